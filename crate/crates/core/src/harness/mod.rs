//! Forgetting evaluation, technique comparison, experiment runner and plots.

mod eval;
mod experiment;
mod plots;
mod report;

pub use eval::{argmax, eval_loss, masked_accuracy, EvalConfig, EvalSet};
pub use experiment::{median, run_experiment, ExperimentConfig, ExperimentResult, Stage};
pub use plots::emit_plots;
pub use report::{
    check_compatible, compare_techniques, forgetting_report, run_compare, CompareConfig, ComparisonReport,
    ForgettingReport, ForgettingRow, TechniqueRow, COMPARISON_HEADER,
};
