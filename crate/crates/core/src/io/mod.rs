//! Configuration documents, checkpoints and CSV output.

mod checkpoint;
mod config;
mod tables;

pub use checkpoint::{
    checkpoint_to_json, load_checkpoint, parse_checkpoint, save_checkpoint, Checkpoint, NetworkRecords, TensorRecord,
    CHECKPOINT_FORMAT,
};
pub use config::{config_to_toml, parse_config, ExperimentConfig, OutputConfig};
pub use tables::{
    read_paths_csv, sig9, write_bands_csv, write_losses_csv, write_metrics_csv, write_mpc_csv, write_paths_csv,
    write_timings_csv, PathsTable, PATHS_HEADER,
};
