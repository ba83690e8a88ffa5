//! Survival analysis and association statistics in double precision.

mod association;
mod cox;
mod error;
mod km;
mod split;

pub use association::{
    default_bins, equal_frequency_bins, kendall_tau, kolmogorov_sf, ks_two_sample,
    nmi_from_counts, normalized_mutual_info, pearson, TestResult,
};
pub use cox::{
    breslow_baseline, cox_fit, cox_fit_data, hazard_ratio_report, partial_log_likelihood,
    BaselineSurvival, CoxData, CoxFit, HazardRatio, SurvivalRecord, MAX_ITERATIONS,
    SEPARATION_BOUND, Z_95,
};
pub use error::{Result, SurvivalError};
pub use km::{km_estimate, KmCurve};
pub use split::{median, median_split, MedianSplit};
