//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] owns every intermediate value. Operations on [`Var`] handles append
//! nodes; [`Tape::backward`] replays them in reverse. Nodes whose inputs are all
//! constants are evaluated eagerly and never visited by the reverse pass.

mod gradcheck;
mod tape;

pub use gradcheck::{
    finite_diff_check, kink_safe_sample, relative_error, FiniteDiff, GradCheckReport,
    KINK_MARGIN_STEPS, REL_ERROR_FLOOR,
};
pub use tape::{CustomBackward, DiffTensor, Tape, Var};

pub(crate) use tape::sigmoid;

#[cfg(test)]
mod tests;
