//! Experiment driver: config parsing, presets, run orchestration, the
//! ANIL-vs-MAML timing benchmark, and report emission.

pub mod bench;
pub mod config;
pub mod presets;
pub mod report;
pub mod run;

pub use bench::{timing_bench, TimingRow, TimingTable};
pub use config::{parse_config, serialize_config, Config, ExperimentKind};
pub use presets::{preset, preset_names};
pub use report::emit_report;
pub use run::{run_experiment, RunArtifacts};
