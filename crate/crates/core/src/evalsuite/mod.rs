//! Density estimation, divergences and sampling statistics.

mod density;
mod summary;
mod sweep;

pub use density::{
    js_divergence, js_samples, kde, kde_or_spike, scott_bandwidth, trapezoid, DensityEstimate, JSReport,
    DENSITY_FLOOR, GRID_POINTS,
};
pub use summary::{
    class_js, count_modes, model_path_curvature, path_curvature, realization_summary, ClassJs, Curvature,
    RealizationSummary,
};
pub use sweep::{
    draw_statistics, loglinear_fit, spearman, temp_sweep, LogLinearFit, SweepRow, SweepTable, DEFAULT_TAU_GRID,
};
