//! Weak-instrument-robust inference for multivariable Mendelian
//! randomization with two-sample summary data.
//!
//! The crate ingests univariable GWAS-style summary statistics
//! ([`summary_data`]), forms the multivariable moment model, and provides
//! non-robust estimators and tests ([`core_stats`]) alongside
//! weak-instrument-robust confidence sets built by grid test inversion
//! ([`robust_inference`]) with simulated critical values ([`calibration`]).
//! A Monte Carlo engine ([`simulation`]) reproduces the coverage, power,
//! screening, and post-selection experiments at desk scale.

pub mod calibration;
pub mod core_stats;
pub mod error;
mod linalg;
mod optim;
pub mod robust_inference;
pub mod simulation;
pub mod summary_data;

pub use error::{Error, Result};

pub use calibration::{
    chi2_quantile, crit_value, solve_a, CalibrationStore, ChiSquareMixtureDraws, DistortionParams,
    LcCalibration, LcCalibrationTable,
};
pub use core_stats::{
    conditional_f, conditional_f_report, gmm_criterion, gmm_estimate, ivw_estimate,
    moment_function, omega, omega_with_dispersion, wald_stat, ConditionalFReport, Estimate,
};
pub use robust_inference::{
    andrews_wald_stat, ar_stat, compute_grid_statistics, distortion_cutoff,
    invert_confidence_set, kleibergen_d, kleibergen_oh_stat, kstar_stat,
    kstar_stat_with_dispersion, lc_stat, select_instruments, solve_kappa2, ConfidenceSetResult,
    DistortionReport, GammaHat, GridStatistics, Method, OverdispersionFit, SelectionStrategy,
    ThetaGrid,
};
pub use simulation::{
    run_study, screening_experiment, selection_experiment, simulate_dataset, SimulationConfig,
    StudyOptions,
};
pub use summary_data::{
    build_multivariable_summary, harmonize_variants, load_gwas_tables, InputScale,
    MultivariableSummary, SummaryBuild, UnivariableGwasTables,
};
