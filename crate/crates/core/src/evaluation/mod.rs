//! Metrics, statistical tests, fold assignment and method comparison.

mod metrics;
mod report;

pub use metrics::{
    dice, mcnemar, mcnemar_from_counts, roc, stratified_kfold, stratified_split, youden,
    ConfusionCounts, FoldAssignment, OperatingPoint, RocCurve, RocPoint,
};
pub use report::{
    compare_methods, cross_validate, evaluate, reconstruction_dice, splits, train_data, train_methods,
    ConceptMetrics, EvalSettings, FoldModels, Method, MethodRow, MetricsReport, Protocol, Rates, Split,
    ValidationSelected,
};

#[cfg(test)]
mod tests;
