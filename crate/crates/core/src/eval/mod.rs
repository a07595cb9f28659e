//! Metrics, confidence intervals, confidence densities and retention curves.

mod kde;
mod metrics;
mod retention;

pub use kde::{
    confidence_kde, density, grid as kde_grid, silverman_bandwidth, trapezoid, DensityCurve,
    KdeReport, GRID_POINTS, MIN_BANDWIDTH,
};
pub use metrics::{
    accuracy, binary_accuracy, confidence_interval, qwk, qwk_labels, sensitivity, MetricError,
    MetricReport, Z_95,
};
pub use retention::{retention_curve, RankedSlide, RetentionPoint, DEFAULT_KS};
