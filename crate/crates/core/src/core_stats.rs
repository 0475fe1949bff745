//! Non-robust estimation and testing: moment functions, the moment-variance
//! matrix Omega(theta), IVW and GMM estimators, the Wald statistic, and
//! conditional F-statistics.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::linalg;
use crate::optim::{self, NmOptions};
use crate::summary_data::MultivariableSummary;

/// Point estimate with its large-sample covariance. `se` is per-exposure,
/// already divided by sqrt(n_X); `cov` is the undivided large-sample matrix.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub theta: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub se: DVector<f64>,
    pub criterion_value: f64,
    pub converged: bool,
}

/// One conditional F-statistic per exposure, with the minimizing linear
/// combination of the other exposures' associations.
#[derive(Debug, Clone)]
pub struct ConditionalFReport {
    pub f_stats: Vec<f64>,
    pub min_f: f64,
    pub delta_at_min: Vec<Vec<f64>>,
}

/// Moment vector g(theta) = Gamma_hat - gamma_hat * theta.
pub fn moment_function(theta: &DVector<f64>, s: &MultivariableSummary) -> DVector<f64> {
    assert_eq!(theta.len(), s.n_exposures(), "theta length must equal K");
    &s.outcome_assoc - &s.exposure_assoc * theta
}

fn omega_unchecked(theta: &DVector<f64>, s: &MultivariableSummary) -> DMatrix<f64> {
    let k = s.n_exposures();
    let mut m = s.outcome_cov.clone();
    for a in 0..k {
        for b in 0..k {
            let w = theta[a] * theta[b];
            if w != 0.0 {
                m += s.exposure_cov_block(a, b) * w;
            }
        }
    }
    linalg::symmetrize(&mut m);
    m
}

/// Large-sample variance of the moment functions,
/// Omega(theta) = Sigma_Gamma + sum_{k,m} theta_k theta_m B_{km},
/// where B_{km} is the (k, m) block of the exposure covariance.
pub fn omega(theta: &DVector<f64>, s: &MultivariableSummary) -> Result<DMatrix<f64>> {
    assert_eq!(theta.len(), s.n_exposures(), "theta length must equal K");
    let m = omega_unchecked(theta, s);
    if linalg::cholesky(&m).is_none() {
        return Err(Error::OmegaNotPd {
            theta: theta.iter().copied().collect(),
        });
    }
    Ok(m)
}

/// Omega(theta, kappa2) = Omega(theta) + c * kappa2 * I, the moment variance
/// under overdispersion heterogeneity of size kappa2.
pub fn omega_with_dispersion(
    theta: &DVector<f64>,
    s: &MultivariableSummary,
    kappa2: f64,
) -> Result<DMatrix<f64>> {
    let mut m = omega_unchecked(theta, s);
    let add = s.c * kappa2;
    for i in 0..m.nrows() {
        m[(i, i)] += add;
    }
    if linalg::cholesky(&m).is_none() {
        return Err(Error::OmegaNotPd {
            theta: theta.iter().copied().collect(),
        });
    }
    Ok(m)
}

pub(crate) struct OmegaFactor {
    pub chol: Cholesky<f64, Dyn>,
}

pub(crate) fn omega_factor(theta: &DVector<f64>, s: &MultivariableSummary) -> Result<OmegaFactor> {
    let matrix = omega_unchecked(theta, s);
    let chol = linalg::cholesky(&matrix).ok_or_else(|| Error::OmegaNotPd {
        theta: theta.iter().copied().collect(),
    })?;
    Ok(OmegaFactor { chol })
}

pub(crate) fn omega_factor_with_dispersion(
    theta: &DVector<f64>,
    s: &MultivariableSummary,
    kappa2: f64,
) -> Result<OmegaFactor> {
    let mut matrix = omega_unchecked(theta, s);
    let add = s.c * kappa2;
    for i in 0..matrix.nrows() {
        matrix[(i, i)] += add;
    }
    let chol = linalg::cholesky(&matrix).ok_or_else(|| Error::OmegaNotPd {
        theta: theta.iter().copied().collect(),
    })?;
    Ok(OmegaFactor { chol })
}

/// Continuously-updating GMM criterion Q(theta) = g' Omega(theta)^{-1} g.
pub fn gmm_criterion(theta: &DVector<f64>, s: &MultivariableSummary) -> Result<f64> {
    let g = moment_function(theta, s);
    let f = omega_factor(theta, s)?;
    Ok(linalg::quad_form_inv(&f.chol, &g))
}

/// Weighted GLS solve: (X' W^{-1} X)^{-1} X' W^{-1} y with W given by its
/// Cholesky factor. Errors if the weighted Gram matrix is rank deficient.
fn gls_solve(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    w_chol: &Cholesky<f64, Dyn>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let wx = w_chol.solve(x);
    let gram = x.transpose() * &wx;
    let gram_chol = linalg::cholesky(&gram).ok_or(Error::CollinearExposures)?;
    let rhs = wx.transpose() * y;
    let coef = gram_chol.solve(&rhs);
    let cov = gram_chol.inverse();
    Ok((coef, cov))
}

/// Two-sample multivariable inverse variance weighted estimator:
/// theta = (gamma' Sigma_Gamma^{-1} gamma)^{-1} gamma' Sigma_Gamma^{-1} Gamma.
pub fn ivw_estimate(s: &MultivariableSummary) -> Result<Estimate> {
    let chol = linalg::cholesky(&s.outcome_cov)
        .ok_or_else(|| Error::InvalidCovariance("Sigma_Gamma".into()))?;
    let (theta, cov) = gls_solve(&s.exposure_assoc, &s.outcome_assoc, &chol)?;
    let resid = &s.outcome_assoc - &s.exposure_assoc * &theta;
    let criterion_value = linalg::quad_form_inv(&chol, &resid);
    let n_x = s.n_x as f64;
    let se = DVector::from_fn(theta.len(), |i, _| (cov[(i, i)] / n_x).sqrt());
    Ok(Estimate {
        theta,
        cov,
        se,
        criterion_value,
        converged: true,
    })
}

const GMM_MAX_GLS_ITER: usize = 200;
const GMM_GLS_TOL: f64 = 1e-10;

/// GMM point estimate minimizing the continuously-updating criterion.
///
/// Iterates fixed-Omega GLS solves from the IVW start (fast near-quadratic
/// contraction), then polishes with a simplex search on Q itself; the GLS
/// fixed point solves only the gamma-part of the first-order conditions, so
/// the polish step is what makes the result an actual local minimizer of Q.
pub fn gmm_estimate(s: &MultivariableSummary, init: Option<&DVector<f64>>) -> Result<Estimate> {
    let ivw = ivw_estimate(s)?;
    let start = init.cloned().unwrap_or_else(|| ivw.theta.clone());
    let q_start = gmm_criterion(&start, s).unwrap_or(f64::INFINITY);

    // Iterated GLS: theta_{t+1} = (gamma' W gamma)^{-1} gamma' W Gamma with
    // W = Omega(theta_t)^{-1}.
    let mut theta = start.clone();
    for _ in 0..GMM_MAX_GLS_ITER {
        let f = match omega_factor(&theta, s) {
            Ok(f) => f,
            Err(_) => break,
        };
        let next = match gls_solve(&s.exposure_assoc, &s.outcome_assoc, &f.chol) {
            Ok((t, _)) => t,
            Err(_) => break,
        };
        let step = (&next - &theta).norm();
        theta = next;
        if step < GMM_GLS_TOL {
            break;
        }
    }
    let q_gls = gmm_criterion(&theta, s).unwrap_or(f64::INFINITY);
    let nm_start = if q_gls <= q_start { theta } else { start.clone() };

    let objective = |t: &DVector<f64>| gmm_criterion(t, s).unwrap_or(f64::INFINITY);
    let nm = optim::nelder_mead(
        objective,
        &nm_start,
        &NmOptions {
            init_step: 0.02,
            ..NmOptions::default()
        },
    );

    // Keep the best candidate seen; the IVW start guarantees
    // Q(theta_hat) <= Q(theta_ivw) + tolerance.
    let mut best = (ivw.theta.clone(), gmm_criterion(&ivw.theta, s).unwrap_or(f64::INFINITY));
    for cand in [(nm.x.clone(), nm.fx), (nm_start.clone(), objective(&nm_start))] {
        if cand.1 < best.1 {
            best = cand;
        }
    }
    let (theta_hat, q_hat) = best;

    let f = omega_factor(&theta_hat, s)?;
    let (_, cov) = gls_solve(&s.exposure_assoc, &s.outcome_assoc, &f.chol)?;
    let n_x = s.n_x as f64;
    let se = DVector::from_fn(theta_hat.len(), |i, _| (cov[(i, i)] / n_x).sqrt());
    let improved = init.is_none() || q_hat <= q_start + 1e-10;
    Ok(Estimate {
        theta: theta_hat,
        cov,
        se,
        criterion_value: q_hat,
        converged: nm.converged && improved,
    })
}

/// Wald statistic W(theta) = n_X (theta_hat - theta)' cov^{-1} (theta_hat - theta).
pub fn wald_stat(theta: &DVector<f64>, est: &Estimate, n_x: u64) -> f64 {
    let d = &est.theta - theta;
    let chol = linalg::cholesky(&est.cov).expect("estimate covariance must be PD");
    n_x as f64 * linalg::quad_form_inv(&chol, &d)
}

/// Conditional F-statistic for one exposure, with the minimizing delta.
#[derive(Debug, Clone)]
pub struct ConditionalF {
    pub f_stat: f64,
    pub delta: DVector<f64>,
}

/// Weight matrix h(delta) Sigma_{gamma,k} h(delta)' under the block
/// rearrangement that moves exposure k's J rows/columns first:
/// B_kk - sum_m delta_m (B_k,om + B_om,k) + sum_{m,l} delta_m delta_l B_om,ol.
fn condf_weight(
    s: &MultivariableSummary,
    k: usize,
    others: &[usize],
    delta: &DVector<f64>,
) -> DMatrix<f64> {
    let j = s.n_variants();
    let mut w = s.exposure_cov_block(k, k).clone_owned();
    for (mi, &m) in others.iter().enumerate() {
        let dm = delta[mi];
        if dm != 0.0 {
            w -= (s.exposure_cov_block(k, m) + s.exposure_cov_block(m, k).transpose()) * dm;
        }
        for (li, &l) in others.iter().enumerate() {
            let w2 = dm * delta[li];
            if w2 != 0.0 {
                w += s.exposure_cov_block(m, l) * w2;
            }
        }
    }
    let mut w = w.clone_owned();
    linalg::symmetrize(&mut w);
    let _ = j;
    w
}

const CONDF_MAX_ITER: usize = 100;
const CONDF_TOL: f64 = 1e-8;

/// Conditional F-statistic for exposure `k`:
/// F = n_X / (J - K + 1) * min_delta (g_k - g_-k d)' [h(d) S_k h(d)']^{-1} (g_k - g_-k d).
/// For K = 1 the minimization is empty and F = (n_X / J) gamma' Sigma_gamma^{-1} gamma.
pub fn conditional_f(s: &MultivariableSummary, k: usize) -> Result<ConditionalF> {
    let j = s.n_variants();
    let kk = s.n_exposures();
    assert!(k < kk, "exposure index out of range");
    let n_x = s.n_x as f64;
    let df = (j - kk + 1) as f64;

    if kk == 1 {
        let g = s.exposure_assoc.column(0).clone_owned();
        let chol = linalg::cholesky(&s.exposure_cov)
            .ok_or_else(|| Error::InvalidCovariance("Sigma_gamma".into()))?;
        let q = linalg::quad_form_inv(&chol, &g);
        return Ok(ConditionalF {
            f_stat: n_x / df * q,
            delta: DVector::zeros(0),
        });
    }

    let others: Vec<usize> = (0..kk).filter(|&m| m != k).collect();
    let gk = s.exposure_assoc.column(k).clone_owned();
    let g_others = s.exposure_assoc.select_columns(&others);

    let objective = |delta: &DVector<f64>| -> f64 {
        let w = condf_weight(s, k, &others, delta);
        match linalg::cholesky(&w) {
            Some(chol) => {
                let r = &gk - &g_others * delta;
                linalg::quad_form_inv(&chol, &r)
            }
            None => f64::INFINITY,
        }
    };

    // Unweighted least-squares start; deterministic perturbations if the
    // weight matrix is not PD there.
    let gram = g_others.transpose() * &g_others;
    let mut delta = match linalg::cholesky(&gram) {
        Some(chol) => chol.solve(&(g_others.transpose() * &gk)),
        None => DVector::zeros(kk - 1),
    };
    if !objective(&delta).is_finite() {
        let mut found = false;
        for i in 1..=5 {
            let mut trial = delta.clone();
            for (idx, v) in trial.iter_mut().enumerate() {
                let sign = if (i + idx) % 2 == 0 { 1.0 } else { -1.0 };
                *v += sign * 1e-3 * i as f64 * (1.0 + v.abs());
            }
            if objective(&trial).is_finite() {
                delta = trial;
                found = true;
                break;
            }
        }
        if !found && !objective(&DVector::zeros(kk - 1)).is_finite() {
            return Err(Error::OptimFailed(
                "conditional F weight matrix not PD near all starting values".into(),
            ));
        } else if !found {
            delta = DVector::zeros(kk - 1);
        }
    }

    // Iterated GLS on delta, then a simplex polish of the full objective.
    for _ in 0..CONDF_MAX_ITER {
        let w = condf_weight(s, k, &others, &delta);
        let chol = match linalg::cholesky(&w) {
            Some(c) => c,
            None => break,
        };
        let next = match gls_solve(&g_others, &gk, &chol) {
            Ok((d, _)) => d,
            Err(_) => break,
        };
        let step = (&next - &delta).norm();
        let scale = 1.0 + delta.norm();
        delta = next;
        if step < CONDF_TOL * scale {
            break;
        }
    }
    let nm = optim::nelder_mead(
        objective,
        &delta,
        &NmOptions {
            init_step: 0.05,
            ..NmOptions::default()
        },
    );
    let (delta, q) = if nm.fx <= objective(&delta) {
        (nm.x, nm.fx)
    } else {
        let q = objective(&delta);
        (delta, q)
    };
    if !q.is_finite() {
        return Err(Error::OptimFailed("conditional F minimization failed".into()));
    }
    Ok(ConditionalF {
        f_stat: n_x / df * q,
        delta,
    })
}

/// Conditional F-statistics for every exposure.
pub fn conditional_f_report(s: &MultivariableSummary) -> Result<ConditionalFReport> {
    let kk = s.n_exposures();
    let mut f_stats = Vec::with_capacity(kk);
    let mut delta_at_min = Vec::with_capacity(kk);
    for k in 0..kk {
        let r = conditional_f(s, k)?;
        f_stats.push(r.f_stat);
        delta_at_min.push(r.delta.iter().copied().collect());
    }
    let min_f = f_stats.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(ConditionalFReport {
        f_stats,
        min_f,
        delta_at_min,
    })
}
