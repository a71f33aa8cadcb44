//! Post-fit analysis: residuals, Kaplan–Meier summaries, PSIS-LOO, marginal
//! failure-time correlations and failure-proportion maps.

pub mod correlation;
pub mod km;
pub mod loo;
pub mod maps;
pub mod residuals;
pub mod svg;

pub use correlation::{
    marginal_cross_mode_correlation, marginal_spatial_correlation, marginal_spatial_correlation_at,
    spatial_correlation_curve, CorrelationSettings, PlugIn,
};
pub use km::{binned_pmf, kaplan_meier, kaplan_meier_mode, KmCurve};
pub use loo::{loo, psis_loo, LooResult};
pub use maps::{failure_proportion_map, FailureMap};
pub use residuals::ResidualSet;
