//! Configuration, evaluation protocols and result reporting.

pub mod config;
pub mod pipeline;
pub mod protocol;
pub mod report;

pub use config::{config_template, ExperimentConfig, LocationMode, ProtocolConfig};
pub use pipeline::{build_assimilator, generate_data, init_model, run_stage1, run_stage2};
pub use protocol::{run_cycling, run_noise_sweep, run_single_step, Assimilator, CycleRun};
pub use report::{read_records, summarize, summary_json, write_records, write_report, AbortNote, Record, Summary};
