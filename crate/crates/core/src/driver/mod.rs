//! Configuration, the adaptive training loops, evaluation metrics and run
//! artifacts.

mod artifacts;
mod config;
mod eval;
mod record;
mod run;

pub use artifacts::{
    compare, comparison_csv, load_run, read_samples, run_dir_name, samples_csv, write_run_dir, ComparisonRow, RunDir, COMPARE_HEADER,
};
pub use config::{
    load_config, preset, resolve_config, EvalConfig, FlowConfig, FlowObjective, NetConfig, ProblemConfig, RunConfig,
    SamplingConfig, Strategy, TrainConfig, PRESETS,
};
pub use eval::{
    chunked, density_diagnostic, flow_diagnostic, grid_mse, midpoint_grid, origin_grid, relative_error, residual_variance,
    sample_variance, tail_probability, tensor_grid, FlowDiagnostic, MAX_GRID_POINTS,
};
pub use record::{fmt_real, MetricRow, RunRecord, METRICS_HEADER};
pub use run::{run, run_with_progress, stream_rng, streams, top_k_by_magnitude, RunOutput};
