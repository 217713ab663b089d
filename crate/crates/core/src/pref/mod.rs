//! Preference optimization: synthetic data, the SimPO objective, adapter training
//! and the full fine-tuning baseline.

mod data;
mod simpo;
mod train;

pub use data::{
    encode_corpus, gen_corpus, gen_preference_data, read_corpus, read_jsonl, split_validation, write_corpus,
    write_jsonl, Corruption, DataSpec, PreferenceTriplet, TokenClass, TripletLabels, CHOSEN_DELIMITER,
    CHOSEN_TERMINATOR, DELIMITERS, TERMINATORS,
};
pub use simpo::{
    evaluate, neg_log_sigmoid, objective, prepare, score_sequence, simpo_loss_value, softplus, Evaluation,
    Objective, Prepared, SequenceScore, SimpoConfig, SteeringVars, VectorEdit,
};
pub use train::{
    fit_adapter, train_adapter, train_adapter_on, train_full_baseline, AdapterFit, BaselineConfig, BaselineFit,
    StepMetrics,
};
