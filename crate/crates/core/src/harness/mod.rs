//! Scenario simulation: configuration, workload generation, baseline
//! policies, the slot loop and metrics output.

pub mod baselines;
pub mod config;
pub mod metrics;
pub mod sim;
pub mod workload;

pub use baselines::{CacheAction, EpsilonGreedy, Policy, SlotView};
pub use config::ScenarioConfig;
pub use metrics::{metrics_report, read_metrics_csv, write_metrics_csv, MetricsRow, Report, RowKind, Tally};
pub use sim::{pretrain_predictor, run, run_episode, Predictor, RunOutput};
pub use workload::{load_trace, synth_zipf, Catalog, RequestEvent, ZipfSampler};
