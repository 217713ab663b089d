//! Sparse feature steering on a frozen toy transformer.
//!
//! A sparse autoencoder is trained on the residual stream of a small decoder-only
//! model; a one-layer adapter then learns a sparse vector over the autoencoder's
//! features whose decoded direction is added back into the residual stream. The
//! adapter is trained against a length-normalized preference loss with an ℓ1
//! penalty, and the crate ships the analyses used to inspect what it learned.
//!
//! All numeric code is generic over [`Scalar`]; the aliases at the crate root fix
//! the type to `f64` (training and verification) or `f32` (storage).

pub mod analysis;
pub mod autodiff;
pub mod error;
pub mod harness;
pub mod lm;
pub mod optim;
pub mod oracles;
pub mod pref;
pub mod rng;
pub mod sae;
pub mod steering;
pub mod scalar;
pub mod tensor;
pub mod theory;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
