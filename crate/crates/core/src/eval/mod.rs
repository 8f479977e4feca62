mod evaluate;
mod harness;
mod metrics;
mod probe;
mod report;

pub use evaluate::{evaluate, EvalOptions, Evaluation, Forecaster, PathRequest, Persistence};
pub use harness::{
    ablation_suite, benchmark_run, crash_ratio_sweep, crash_ratio_sweep_benchmark, feasible_units, non_increasing_within_noise,
    omega_sweep, run_model, sha256_hex, sha256_json, subsample_crash_ratio, train_neural, ModelKind, PipelineConfig, ABLATION_ROWS,
};
pub use metrics::{crmse, mean_std, rmse_per_horizon, Crmse, EffectRecord};
pub use probe::{probe_treatment, ProbeResult};
pub use report::{ExperimentReport, PlotData, PlotSeries, ReportRow};
