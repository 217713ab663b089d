//! Small pre-norm decoder-only transformer used as the frozen base model.
//!
//! The hook point is the residual stream entering layer `hook_layer`, before that
//! layer's attention sublayer.

mod config;
mod model;
mod pretrain;
mod tokenizer;

pub use config::LmConfig;
pub use model::{
    intervention, param_shapes, sequence_avg_logprob, BoundLm, FrozenLm, HookedForward, Intervention,
    LayerWeights, LmParams, LmWeights,
};
pub use pretrain::{heldout_loss, pretrain_lm, PretrainConfig, PretrainReport};
pub use tokenizer::{decode, encode, vocab_size, Role, TokenSequence, ALPHABET};
