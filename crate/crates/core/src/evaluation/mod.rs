//! Detection metrics, model evaluation, sensitivity sweeps and report
//! emission.

mod evaluate;
mod metrics;
mod report;
mod sweep;

pub use evaluate::{evaluate, read_score_dump, score_dump, write_score_dump, Evaluation};
pub use metrics::{
    auc, confusion, f1_score, precision_recall_f1, roc_curve, Confusion, MetricsReport, RocPoint,
    DEFAULT_THRESHOLD,
};
pub use report::{
    emit_metrics_report, emit_sweep_report, parse_metrics_report, ReportFormat, SweepTable,
    SweepTableRow, METRICS_CSV_HEADER, SWEEP_CSV_HEADER,
};
pub use sweep::{
    run_sweep, run_trial, ExperimentConfig, SeedOutcome, SweepKind, SweepResult, SweepRow, Trial,
};
