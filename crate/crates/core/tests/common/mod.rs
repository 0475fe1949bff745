//! Shared generators for integration tests: random harmonizable tables and
//! the summaries built from them.

use mvmr_core::{build_multivariable_summary, InputScale, MultivariableSummary, UnivariableGwasTables};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Unit-diagonal correlation matrix with factor structure u u' off the
/// diagonal; positive definite because every loading is below 1.
pub fn random_correlation(rng: &mut ChaCha12Rng, n: usize, max_loading: f64) -> DMatrix<f64> {
    let u: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * max_loading).collect();
    DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { u[i] * u[j] })
}

/// Random valid tables on the standardized scale: J variants, K exposures,
/// moderately strong signals.
pub fn random_tables(rng: &mut ChaCha12Rng, j: usize, k: usize) -> UnivariableGwasTables {
    let exposure_beta = DMatrix::from_fn(j, k, |_, _| {
        let v: f64 = rng.sample(StandardNormal);
        0.25 * v
    });
    let exposure_se = DMatrix::from_fn(j, k, |_, _| 0.02 + 0.06 * rng.random::<f64>());
    let outcome_beta = DVector::from_fn(j, |_, _| {
        let v: f64 = rng.sample(StandardNormal);
        0.2 * v
    });
    let outcome_se = DVector::from_fn(j, |_, _| 0.02 + 0.06 * rng.random::<f64>());
    UnivariableGwasTables {
        variants: (0..j).map(|i| format!("rs{}", i + 1)).collect(),
        effect_allele: vec!["A".into(); j],
        other_allele: vec!["G".into(); j],
        outcome_effect_allele: vec!["A".into(); j],
        outcome_other_allele: vec!["G".into(); j],
        exposure_names: (0..k).map(|i| format!("x{}", i + 1)).collect(),
        exposure_beta,
        exposure_se,
        outcome_beta,
        outcome_se,
        ld: random_correlation(rng, j, 0.6),
        exposure_cor: random_correlation(rng, k, 0.5),
        n_x: 5000,
        n_y: 8000,
    }
}

pub fn random_summary(rng: &mut ChaCha12Rng, j: usize, k: usize) -> MultivariableSummary {
    let tables = random_tables(rng, j, k);
    build_multivariable_summary(&tables, InputScale::Standardized)
        .expect("random tables build")
        .summary
}

/// theta' (x) I_J under column-stacked vec ordering: the J x JK matrix with
/// theta_m * I_J in block m.
pub fn phi_matrix(theta: &DVector<f64>, j: usize) -> DMatrix<f64> {
    let k = theta.len();
    let mut phi = DMatrix::zeros(j, j * k);
    for m in 0..k {
        for r in 0..j {
            phi[(r, m * j + r)] = theta[m];
        }
    }
    phi
}
