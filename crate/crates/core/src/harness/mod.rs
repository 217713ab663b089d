//! Run configuration, checkpoint files and CSV reports shared by the command line
//! front end and the tests.

mod checkpoint;
mod config;
mod report;

pub use checkpoint::{
    load_adapter, load_checkpoint, load_lm, load_sae, save_adapter, save_checkpoint, save_lm, save_sae, Checkpoint,
    Manifest, TensorEntry, FORMAT_VERSION, MAGIC,
};
pub use config::{AnalysisConfig, RunConfig};
pub use report::{read_csv, write_csv, CsvTable};
