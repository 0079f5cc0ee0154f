//! Experiment orchestration: config, the round loop, metrics, file output,
//! parameter sweeps and the variance probe.

pub mod config;
pub mod metrics;
pub mod output;
pub mod probe;
pub mod runner;
pub mod sweep;

pub use config::{DetectionSchedule, ExperimentConfig, ModelConfig, PartitionConfig, TaskSpec};
pub use metrics::{metrics_summary, Summary};
pub use output::{emit_outputs, summary_json};
pub use probe::{proposition1_probe, Prop1Report};
pub use runner::{detection_scheduler, run_experiment, ClientStat, ExperimentOutcome, RoundRecord};
pub use sweep::{sweep, SweepAxis};
