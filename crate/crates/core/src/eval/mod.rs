//! Thresholding, confusion counts, segmentation metrics and report rendering.

mod evaluate;
mod metrics;
mod report;

pub use evaluate::{evaluate_model, DatasetEvaluation, ImageEvaluation, MeanMetrics, Segmenter};
pub use metrics::{binarize, confusion_counts, metrics, ConfusionCounts, SegmentationMetrics, DEFAULT_THRESHOLD};
pub use report::{
    best_trials, format_best_trials, format_metrics_table, metrics_table_csv, plot_loss_curve, render_report,
    render_report_with_stem, NamedEvaluation, ReportFiles, BEST_TRIALS,
};
