//! Weak-instrument-robust statistics and grid test inversion: Anderson-Rubin,
//! Kleibergen score projection, the linear-combination statistic with
//! simulated critical values, the overdispersion-adjusted Kleibergen
//! statistic, the distortion-cutoff search, and instrument selection.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{chi2_quantile, LcCalibration, LcCalibrationTable};
use crate::core_stats::{
    self, conditional_f_report, gmm_estimate, moment_function, omega_factor,
    omega_factor_with_dispersion, wald_stat, OmegaFactor,
};
use crate::error::{Error, Result};
use crate::linalg;
use crate::summary_data::MultivariableSummary;

// ---------------------------------------------------------------------------
// Pointwise statistics
// ---------------------------------------------------------------------------

/// Anderson-Rubin statistic S(theta) = n_X * Q(theta); chi2_J under the null
/// regardless of instrument strength.
pub fn ar_stat(theta: &DVector<f64>, s: &MultivariableSummary) -> Result<f64> {
    Ok(s.n_x as f64 * core_stats::gmm_criterion(theta, s)?)
}

fn kleibergen_d_from(
    theta: &DVector<f64>,
    s: &MultivariableSummary,
    omega_inv_g: &DVector<f64>,
) -> DMatrix<f64> {
    let j = s.n_variants();
    let k = s.n_exposures();
    let mut d = s.exposure_assoc.clone();
    for col in 0..k {
        let mut adj = DVector::zeros(j);
        for m in 0..k {
            if theta[m] != 0.0 {
                adj += s.exposure_cov_block(col, m) * omega_inv_g * theta[m];
            }
        }
        let new_col = d.column(col) + adj;
        d.set_column(col, &new_col);
    }
    d
}

/// J x K sufficient statistic D(theta) for instrument strength: column k is
/// gamma_hat_k - Delta_k(theta)' Omega(theta)^{-1} g(theta) with
/// Delta(theta) = -phi(theta) Sigma_gamma.
pub fn kleibergen_d(theta: &DVector<f64>, s: &MultivariableSummary) -> Result<DMatrix<f64>> {
    let g = moment_function(theta, s);
    let f = omega_factor(theta, s)?;
    let wg = f.chol.solve(&g);
    Ok(kleibergen_d_from(theta, s, &wg))
}

/// Kleibergen score-projection statistic and the one-step update point.
#[derive(Debug, Clone)]
pub struct KstarResult {
    pub stat: f64,
    pub theta_star: DVector<f64>,
}

fn kstar_with_factor(
    theta: &DVector<f64>,
    s: &MultivariableSummary,
    f: &OmegaFactor,
) -> Result<KstarResult> {
    let g = moment_function(theta, s);
    let wg = f.chol.solve(&g);
    let d = kleibergen_d_from(theta, s, &wg);
    let wd = f.chol.solve(&d);
    let gram = d.transpose() * &wd;
    let gram_chol = linalg::cholesky(&gram).ok_or_else(|| Error::UnidentifiedDirection {
        rank: linalg::numerical_rank(&d),
        cols: d.ncols(),
    })?;
    let b = d.transpose() * &wg;
    let sol = gram_chol.solve(&b);
    Ok(KstarResult {
        stat: s.n_x as f64 * b.dot(&sol),
        theta_star: theta + &sol,
    })
}

/// K*(theta) = n_X g' W D (D' W D)^{-1} D' W g with W = Omega(theta)^{-1}:
/// the projection of S(theta) onto the D(theta) directions. Satisfies
/// 0 <= K* <= S, with equality when J = K.
pub fn kstar_stat(theta: &DVector<f64>, s: &MultivariableSummary) -> Result<KstarResult> {
    let f = omega_factor(theta, s)?;
    kstar_with_factor(theta, s, &f)
}

/// Andrews-Wald statistic and the plug-in estimate theta_bar it is built on.
#[derive(Debug, Clone)]
pub struct AndrewsWaldResult {
    pub stat: f64,
    pub theta_bar: DVector<f64>,
}

fn andrews_wald_with_factor(
    theta: &DVector<f64>,
    s: &MultivariableSummary,
    f: &OmegaFactor,
) -> Result<AndrewsWaldResult> {
    let g = moment_function(theta, s);
    let wg = f.chol.solve(&g);
    let wx = f.chol.solve(&s.exposure_assoc);
    let gram = s.exposure_assoc.transpose() * &wx;
    let gram_chol = linalg::cholesky(&gram).ok_or(Error::CollinearExposures)?;
    let b = s.exposure_assoc.transpose() * &wg;
    let sol = gram_chol.solve(&b);
    Ok(AndrewsWaldResult {
        stat: s.n_x as f64 * b.dot(&sol),
        theta_bar: theta + &sol,
    })
}

/// Wald statistic around theta_bar(theta) = theta +
/// (gamma' W gamma)^{-1} gamma' W g, weighted by gamma' W gamma: the
/// projection of S(theta) onto the gamma_hat directions.
pub fn andrews_wald_stat(theta: &DVector<f64>, s: &MultivariableSummary) -> Result<AndrewsWaldResult> {
    let f = omega_factor(theta, s)?;
    andrews_wald_with_factor(theta, s, &f)
}

/// Linear-combination statistic K*(theta) + a * S(theta).
pub fn lc_stat(theta: &DVector<f64>, s: &MultivariableSummary, a: f64) -> Result<f64> {
    let g = moment_function(theta, s);
    let f = omega_factor(theta, s)?;
    let wg = f.chol.solve(&g);
    let ar = s.n_x as f64 * g.dot(&wg);
    let kstar = kstar_with_factor(theta, s, &f)?.stat;
    Ok(kstar + a * ar)
}

// ---------------------------------------------------------------------------
// Overdispersion heterogeneity
// ---------------------------------------------------------------------------

/// Solved overdispersion parameter kappa^2 >= 0.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OverdispersionFit {
    pub kappa2: f64,
    /// True when the estimating equation is already nonpositive at
    /// kappa^2 = 0 and the solution is truncated there.
    pub at_boundary: bool,
}

/// Solve n_X g' Omega(theta, kappa^2)^{-1} g - J = 0 for kappa^2. The left
/// side is strictly decreasing in kappa^2, so the root is unique when the
/// value at zero is positive; otherwise the fit truncates at zero.
pub fn solve_kappa2(theta: &DVector<f64>, s: &MultivariableSummary) -> Result<OverdispersionFit> {
    if s.c <= 0.0 {
        return Err(Error::InvalidConfig("sample-size ratio c must be positive".into()));
    }
    let g = moment_function(theta, s);
    let j = s.n_variants() as f64;
    let n = s.n_x as f64;
    let value = |kappa2: f64| -> f64 {
        match omega_factor_with_dispersion(theta, s, kappa2) {
            Ok(f) => n * linalg::quad_form_inv(&f.chol, &g) - j,
            // A non-PD base matrix acts like an unbounded criterion; more
            // dispersion always repairs it.
            Err(_) => f64::INFINITY,
        }
    };

    let v0 = value(0.0);
    if v0 <= 0.0 {
        return Ok(OverdispersionFit {
            kappa2: 0.0,
            at_boundary: true,
        });
    }

    // Expanding bracket, then bisection.
    let scale = (n * g.dot(&g) / j - s.outcome_cov.trace() / j).max(1.0) / s.c;
    let mut hi = scale.max(1e-6);
    let mut expansions = 0;
    while value(hi) > 0.0 {
        hi *= 2.0;
        expansions += 1;
        if expansions > 200 {
            return Err(Error::OptimFailed("kappa^2 bracket expansion failed".into()));
        }
    }
    let mut lo = 0.0f64;
    let mut mid = 0.5 * hi;
    for _ in 0..500 {
        mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let v = value(mid);
        if v > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo) <= 1e-10 * hi.max(1.0) && value(mid).abs() <= 1e-9 * j {
            break;
        }
    }
    Ok(OverdispersionFit {
        kappa2: mid,
        at_boundary: false,
    })
}

/// K* statistic recomputed with the plug-in variance Omega(theta, kappa2)
/// replacing Omega(theta) everywhere, for a caller-supplied kappa2.
pub fn kstar_stat_with_dispersion(
    theta: &DVector<f64>,
    s: &MultivariableSummary,
    kappa2: f64,
) -> Result<KstarResult> {
    let f = omega_factor_with_dispersion(theta, s, kappa2)?;
    kstar_with_factor(theta, s, &f)
}

/// Overdispersion-adjusted Kleibergen statistic: K* evaluated with
/// Omega(theta, kappa2_hat(theta)). Equals K*(theta) exactly when the
/// kappa^2 fit truncates at zero.
pub fn kleibergen_oh_stat(theta: &DVector<f64>, s: &MultivariableSummary) -> Result<f64> {
    let fit = solve_kappa2(theta, s)?;
    Ok(kstar_stat_with_dispersion(theta, s, fit.kappa2)?.stat)
}

// ---------------------------------------------------------------------------
// Grids and confidence sets
// ---------------------------------------------------------------------------

/// Cartesian grid of candidate exposure-effect vectors. Points are
/// enumerated row-major: the last axis varies fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaGrid {
    axes: Vec<Vec<f64>>,
}

impl ThetaGrid {
    pub fn new(axes: Vec<Vec<f64>>) -> Result<ThetaGrid> {
        if axes.is_empty() {
            return Err(Error::InvalidConfig("grid needs at least one axis".into()));
        }
        for (i, axis) in axes.iter().enumerate() {
            if axis.is_empty() {
                return Err(Error::InvalidConfig(format!("grid axis {} is empty", i + 1)));
            }
            if axis.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::InvalidConfig(format!(
                    "grid axis {} is not strictly increasing",
                    i + 1
                )));
            }
        }
        Ok(ThetaGrid { axes })
    }

    /// Axis from an inclusive `lo:hi:step` range; the endpoint is included
    /// when it lies on the step lattice (to 1e-6 relative slack).
    pub fn from_ranges(ranges: &[(f64, f64, f64)]) -> Result<ThetaGrid> {
        let mut axes = Vec::with_capacity(ranges.len());
        for &(lo, hi, step) in ranges {
            if step <= 0.0 || hi < lo {
                return Err(Error::InvalidConfig(format!(
                    "invalid grid range {lo}:{hi}:{step}"
                )));
            }
            let n = ((hi - lo) / step + 1e-6).floor() as usize + 1;
            axes.push((0..n).map(|i| lo + i as f64 * step).collect());
        }
        ThetaGrid::new(axes)
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn n_points(&self) -> usize {
        self.axes.iter().map(|a| a.len()).product()
    }

    /// Multi-index of the flat point index (row-major).
    pub fn indices(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for ax in (0..self.dim()).rev() {
            let len = self.axes[ax].len();
            out[ax] = index % len;
            index /= len;
        }
        out
    }

    pub fn point(&self, index: usize) -> DVector<f64> {
        let idx = self.indices(index);
        DVector::from_iterator(self.dim(), idx.iter().zip(&self.axes).map(|(&i, ax)| ax[i]))
    }

    /// True when the point sits on the edge of any axis.
    pub fn on_boundary(&self, index: usize) -> bool {
        self.indices(index)
            .iter()
            .zip(&self.axes)
            .any(|(&i, ax)| i == 0 || i + 1 == ax.len())
    }

    /// Flat index of an exact grid point, if present.
    pub fn position_of(&self, theta: &[f64]) -> Option<usize> {
        if theta.len() != self.dim() {
            return None;
        }
        let mut index = 0;
        for (ax, &v) in self.axes.iter().zip(theta) {
            let i = ax.iter().position(|&x| (x - v).abs() < 1e-9)?;
            index = index * ax.len() + i;
        }
        Some(index)
    }
}

/// Confidence-set construction method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Wald,
    AndrewsWald,
    Ar,
    Kleibergen,
    LcRobust,
    CsP,
    KleibergenOh,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Wald => "wald",
            Method::AndrewsWald => "andrews_wald",
            Method::Ar => "ar",
            Method::Kleibergen => "kleibergen",
            Method::LcRobust => "lc_robust",
            Method::CsP => "cs_p",
            Method::KleibergenOh => "kleibergen_oh",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(tag: &str) -> Result<Method> {
        match tag {
            "wald" => Ok(Method::Wald),
            "andrews_wald" => Ok(Method::AndrewsWald),
            "ar" => Ok(Method::Ar),
            "kleibergen" => Ok(Method::Kleibergen),
            "lc" | "lc_robust" => Ok(Method::LcRobust),
            "cs_p" => Ok(Method::CsP),
            "koh" | "kleibergen_oh" => Ok(Method::KleibergenOh),
            other => Err(Error::InvalidConfig(format!("unknown method tag {other:?}"))),
        }
    }
}

/// Grid membership mask plus summary flags for one inverted test.
#[derive(Debug, Clone)]
pub struct ConfidenceSetResult {
    pub method: Method,
    pub alpha: f64,
    pub crit_value: f64,
    pub member: Vec<bool>,
    pub area: usize,
    pub empty: bool,
    pub touches_boundary: bool,
    pub stat_values: Option<Vec<f64>>,
    /// Grid points where the statistic could not be evaluated; recorded as
    /// non-members with a diagnostic, never silently dropped.
    pub failed_points: usize,
    /// Set when more than 0.1% of grid points failed to evaluate.
    pub unreliable: bool,
}

impl ConfidenceSetResult {
    fn from_stats(
        method: Method,
        alpha: f64,
        crit_value: f64,
        grid: &ThetaGrid,
        stats: Vec<f64>,
        failed_points: usize,
    ) -> ConfidenceSetResult {
        let member: Vec<bool> = stats.iter().map(|&v| v <= crit_value).collect();
        let area = member.iter().filter(|&&m| m).count();
        let touches_boundary = member
            .iter()
            .enumerate()
            .any(|(i, &m)| m && grid.on_boundary(i));
        ConfidenceSetResult {
            method,
            alpha,
            crit_value,
            area,
            empty: area == 0,
            touches_boundary,
            member,
            stat_values: Some(stats),
            failed_points,
            unreliable: failed_points as f64 > 0.001 * grid.n_points() as f64,
        }
    }

    /// Projection of the member points onto axis `k`: [min, max] of their
    /// k-th coordinates, or None when the set is empty.
    pub fn projected_interval(&self, grid: &ThetaGrid, k: usize) -> Option<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (i, &m) in self.member.iter().enumerate() {
            if m {
                let v = grid.axes()[k][grid.indices(i)[k]];
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if lo.is_finite() {
            Some((lo, hi))
        } else {
            None
        }
    }
}

/// S, K*, and Andrews-Wald values over a grid, computed in one pass per
/// point with a shared Omega factorization. Failed points carry NaN.
#[derive(Debug, Clone)]
pub struct GridStatistics {
    pub ar: Vec<f64>,
    pub kstar: Vec<f64>,
    pub andrews_wald: Vec<f64>,
    pub failures: Vec<(usize, String)>,
}

fn eval_point(theta: &DVector<f64>, s: &MultivariableSummary) -> Result<(f64, f64, f64)> {
    let g = moment_function(theta, s);
    let f = omega_factor(theta, s)?;
    let wg = f.chol.solve(&g);
    let ar = s.n_x as f64 * g.dot(&wg);
    let kstar = kstar_with_factor(theta, s, &f)?.stat;
    let aw = andrews_wald_with_factor(theta, s, &f)?.stat;
    Ok((ar, kstar, aw))
}

/// Evaluate S, K*, and AW at every grid point. Point evaluations are pure
/// and scheduled in parallel; results are ordered by grid enumeration so
/// the output is identical for any thread count.
pub fn compute_grid_statistics(grid: &ThetaGrid, s: &MultivariableSummary) -> GridStatistics {
    let n = grid.n_points();
    let evals: Vec<std::result::Result<(f64, f64, f64), String>> = (0..n)
        .into_par_iter()
        .map(|i| eval_point(&grid.point(i), s).map_err(|e| e.to_string()))
        .collect();
    let mut ar = Vec::with_capacity(n);
    let mut kstar = Vec::with_capacity(n);
    let mut andrews_wald = Vec::with_capacity(n);
    let mut failures = Vec::new();
    for (i, e) in evals.into_iter().enumerate() {
        match e {
            Ok((a, k, w)) => {
                ar.push(a);
                kstar.push(k);
                andrews_wald.push(w);
            }
            Err(msg) => {
                ar.push(f64::NAN);
                kstar.push(f64::NAN);
                andrews_wald.push(f64::NAN);
                failures.push((i, msg));
            }
        }
    }
    GridStatistics {
        ar,
        kstar,
        andrews_wald,
        failures,
    }
}

/// Invert one test over the grid: member[i] holds iff the statistic at grid
/// point i is at or below the method's critical value. `cal` is required
/// for `LcRobust` and `CsP`.
pub fn invert_confidence_set(
    method: Method,
    grid: &ThetaGrid,
    s: &MultivariableSummary,
    alpha: f64,
    cal: Option<&LcCalibration>,
) -> Result<ConfidenceSetResult> {
    if grid.dim() != s.n_exposures() {
        return Err(Error::Dimension(format!(
            "grid has {} axes but summary has K = {}",
            grid.dim(),
            s.n_exposures()
        )));
    }
    let j = s.n_variants();
    let k = s.n_exposures();
    let n = grid.n_points();

    let (crit, stat_fn): (f64, Box<dyn Fn(&DVector<f64>) -> Result<f64> + Sync>) = match method {
        Method::Wald => {
            let est = gmm_estimate(s, None)?;
            let n_x = s.n_x;
            (
                chi2_quantile(k, 1.0 - alpha),
                Box::new(move |t: &DVector<f64>| Ok(wald_stat(t, &est, n_x))),
            )
        }
        Method::AndrewsWald => (
            chi2_quantile(k, 1.0 - alpha),
            Box::new(|t: &DVector<f64>| Ok(andrews_wald_stat(t, s)?.stat)),
        ),
        Method::Ar => (
            chi2_quantile(j, 1.0 - alpha),
            Box::new(|t: &DVector<f64>| ar_stat(t, s)),
        ),
        Method::Kleibergen => (
            chi2_quantile(k, 1.0 - alpha),
            Box::new(|t: &DVector<f64>| Ok(kstar_stat(t, s)?.stat)),
        ),
        Method::LcRobust => {
            let cal = cal.ok_or_else(|| {
                Error::InvalidConfig("lc_robust inversion requires a calibration".into())
            })?;
            let a = cal.a;
            (
                cal.quantile,
                Box::new(move |t: &DVector<f64>| lc_stat(t, s, a)),
            )
        }
        Method::CsP => {
            let cal = cal.ok_or_else(|| {
                Error::InvalidConfig("cs_p inversion requires a calibration".into())
            })?;
            let a = cal.a;
            (
                chi2_quantile(k, 1.0 - alpha),
                Box::new(move |t: &DVector<f64>| lc_stat(t, s, a)),
            )
        }
        Method::KleibergenOh => (
            chi2_quantile(k, 1.0 - alpha),
            Box::new(|t: &DVector<f64>| kleibergen_oh_stat(t, s)),
        ),
    };

    let evals: Vec<std::result::Result<f64, String>> = (0..n)
        .into_par_iter()
        .map(|i| stat_fn(&grid.point(i)).map_err(|e| e.to_string()))
        .collect();
    let mut stats = Vec::with_capacity(n);
    let mut failed = 0;
    for e in evals {
        match e {
            Ok(v) => stats.push(v),
            Err(_) => {
                stats.push(f64::NAN);
                failed += 1;
            }
        }
    }
    Ok(ConfidenceSetResult::from_stats(
        method, alpha, crit, grid, stats, failed,
    ))
}

// ---------------------------------------------------------------------------
// Distortion cutoff
// ---------------------------------------------------------------------------

/// Outcome of the distortion-cutoff scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum GammaHat {
    Determined { gamma: f64 },
    /// No gamma up to the cap produced CS_P(gamma) contained in CS_N.
    Undetermined { cap: f64 },
}

impl GammaHat {
    /// Numeric value with `undetermined` mapped to +inf (the convention the
    /// min-distortion selection strategy uses).
    pub fn value_or_inf(&self) -> f64 {
        match self {
            GammaHat::Determined { gamma } => *gamma,
            GammaHat::Undetermined { .. } => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DistortionReport {
    pub gamma_hat: GammaHat,
    /// Non-robust set CS_N from the Andrews-Wald inversion.
    pub cs_n: ConfidenceSetResult,
    /// Robust set CS_R: the LC statistic at a(gamma_min) against
    /// q(1 - alpha; a(gamma_min)).
    pub cs_r: ConfidenceSetResult,
    /// Calibration at gamma_min.
    pub calibration: LcCalibration,
}

/// Compute CS_N and CS_R, then scan gamma upward from gamma_min until
/// CS_P(gamma) (LC statistic at a(gamma) against chi2_{K,1-alpha}) is
/// contained in CS_N. S and K* are evaluated once per grid point and reused
/// across all gamma levels, which is what makes the scan cheap; CS_P(gamma)
/// shrinks with gamma because a(gamma) is nondecreasing under shared draws.
pub fn distortion_cutoff(
    grid: &ThetaGrid,
    s: &MultivariableSummary,
    table: &LcCalibrationTable,
) -> Result<DistortionReport> {
    if table.j != s.n_variants() || table.k != s.n_exposures() {
        return Err(Error::Dimension(format!(
            "calibration table is for (J={}, K={}), summary has (J={}, K={})",
            table.j,
            table.k,
            s.n_variants(),
            s.n_exposures()
        )));
    }
    let stats = compute_grid_statistics(grid, s);
    let alpha = table.alpha;
    let n_failed = stats.failures.len();

    let cs_n = ConfidenceSetResult::from_stats(
        Method::AndrewsWald,
        alpha,
        table.chi2_k_crit,
        grid,
        stats.andrews_wald.clone(),
        n_failed,
    );

    let cal_min = table.at_gamma_min().clone();
    let lc_values: Vec<f64> = stats
        .kstar
        .iter()
        .zip(&stats.ar)
        .map(|(&k, &a)| k + cal_min.a * a)
        .collect();
    let cs_r = ConfidenceSetResult::from_stats(
        Method::LcRobust,
        alpha,
        cal_min.quantile,
        grid,
        lc_values,
        n_failed,
    );

    let mut gamma_hat = GammaHat::Undetermined {
        cap: *table.gammas.last().unwrap(),
    };
    'scan: for (gi, cal) in table.levels.iter().enumerate() {
        for i in 0..grid.n_points() {
            let v = stats.kstar[i] + cal.a * stats.ar[i];
            let in_p = v <= table.chi2_k_crit;
            if in_p && !cs_n.member[i] {
                continue 'scan;
            }
        }
        gamma_hat = GammaHat::Determined {
            gamma: table.gammas[gi],
        };
        break;
    }

    Ok(DistortionReport {
        gamma_hat,
        cs_n,
        cs_r,
        calibration: cal_min,
    })
}

// ---------------------------------------------------------------------------
// Instrument selection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// Choose the subset maximizing the minimum conditional F-statistic.
    MaxMinConditionalF,
    /// Choose the subset minimizing the distortion cutoff (undetermined
    /// cutoffs count as +inf).
    MinDistortionCutoff,
}

#[derive(Debug, Clone)]
pub struct SubsetScore {
    pub subset_index: usize,
    pub n_instruments: usize,
    pub score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    pub chosen: usize,
    pub scores: Vec<SubsetScore>,
}

/// Score each candidate subset and pick the winner. Ties break toward fewer
/// instruments, then input order. Subsets that fail to build or score are
/// recorded and skipped; if every subset fails the selection errors.
pub fn select_instruments<B>(
    candidates: &[Vec<usize>],
    builder: B,
    strategy: SelectionStrategy,
    grid: &ThetaGrid,
    store: &crate::calibration::CalibrationStore,
) -> Result<SelectionOutcome>
where
    B: Fn(&[usize]) -> Result<MultivariableSummary>,
{
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("no candidate subsets".into()));
    }
    let mut scores = Vec::with_capacity(candidates.len());
    for (i, subset) in candidates.iter().enumerate() {
        let score = builder(subset).and_then(|s| match strategy {
            SelectionStrategy::MaxMinConditionalF => Ok(conditional_f_report(&s)?.min_f),
            SelectionStrategy::MinDistortionCutoff => {
                let table = store.distortion_table(s.n_variants(), s.n_exposures())?;
                let rep = distortion_cutoff(grid, &s, &table)?;
                Ok(rep.gamma_hat.value_or_inf())
            }
        });
        scores.push(match score {
            Ok(v) => SubsetScore {
                subset_index: i,
                n_instruments: subset.len(),
                score: Some(v),
                error: None,
            },
            Err(e) => SubsetScore {
                subset_index: i,
                n_instruments: subset.len(),
                score: None,
                error: Some(e.to_string()),
            },
        });
    }

    let better = |a: f64, b: f64| match strategy {
        SelectionStrategy::MaxMinConditionalF => a > b,
        SelectionStrategy::MinDistortionCutoff => a < b,
    };
    let mut chosen: Option<(usize, f64, usize)> = None;
    for sc in &scores {
        let Some(v) = sc.score else { continue };
        chosen = match chosen {
            None => Some((sc.subset_index, v, sc.n_instruments)),
            Some((bi, bv, bn)) => {
                if better(v, bv) || (v == bv && sc.n_instruments < bn) {
                    Some((sc.subset_index, v, sc.n_instruments))
                } else {
                    Some((bi, bv, bn))
                }
            }
        };
    }
    match chosen {
        Some((idx, _, _)) => Ok(SelectionOutcome { chosen: idx, scores }),
        None => {
            let first_err = scores
                .iter()
                .find_map(|s| s.error.clone())
                .unwrap_or_else(|| "unknown".into());
            Err(Error::AllSubsetsFailed(first_err))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn toy(
        gamma_big: &[f64],
        gamma: &[&[f64]],
        sigma_big: DMatrix<f64>,
        sigma_small: DMatrix<f64>,
        n_x: u64,
    ) -> MultivariableSummary {
        let j = gamma_big.len();
        let k = gamma.len();
        let mut ga = DMatrix::zeros(j, k);
        for (c, col) in gamma.iter().enumerate() {
            for (r, &v) in col.iter().enumerate() {
                ga[(r, c)] = v;
            }
        }
        MultivariableSummary {
            outcome_assoc: DVector::from_column_slice(gamma_big),
            exposure_assoc: ga,
            outcome_cov: sigma_big,
            exposure_cov: sigma_small,
            n_x,
            n_y: n_x,
            c: 1.0,
        }
    }

    #[test]
    fn ar_scalar_case() {
        // J=1, K=1: g = 0.1, Omega = 1, n = 100 -> S = 1.
        let s = toy(
            &[0.1],
            &[&[1.0]],
            DMatrix::identity(1, 1),
            DMatrix::from_element(1, 1, 0.0),
            100,
        );
        let v = ar_stat(&DVector::from_column_slice(&[0.0]), &s).unwrap();
        assert!((v - 1.0).abs() < 1e-14);
    }

    #[test]
    fn kleibergen_d_reduces_to_gamma() {
        // Sigma_gamma = 0 -> D = gamma_hat.
        let s = toy(
            &[0.5, 0.2],
            &[&[1.0, 0.3]],
            DMatrix::identity(2, 2),
            DMatrix::from_element(2, 2, 0.0),
            100,
        );
        let d = kleibergen_d(&DVector::from_column_slice(&[0.7]), &s).unwrap();
        assert!((d - &s.exposure_assoc).abs().max() < 1e-14);
        // theta = 0 -> Delta = 0 -> D = gamma_hat.
        let s = toy(
            &[0.5, 0.2],
            &[&[1.0, 0.3]],
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2) * 0.5,
            100,
        );
        let d = kleibergen_d(&DVector::from_column_slice(&[0.0]), &s).unwrap();
        assert!((d - &s.exposure_assoc).abs().max() < 1e-14);
    }

    #[test]
    fn kstar_exact_fit_and_just_identified() {
        // Exact fit: K* = 0 and theta_star = theta.
        let s = toy(
            &[0.6, 0.3],
            &[&[1.2, 0.6]],
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2) * 0.4,
            100,
        );
        let theta = DVector::from_column_slice(&[0.5]);
        let r = kstar_stat(&theta, &s).unwrap();
        assert!(r.stat.abs() < 1e-18);
        assert!((r.theta_star - theta).abs().max() < 1e-12);

        // J = K: K* = S.
        let s = toy(
            &[0.5, -0.2],
            &[&[0.8, 0.1], &[0.2, 0.9]],
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.0]),
            DMatrix::identity(4, 4) * 0.3,
            500,
        );
        let theta = DVector::from_column_slice(&[0.3, -0.4]);
        let k = kstar_stat(&theta, &s).unwrap().stat;
        let a = ar_stat(&theta, &s).unwrap();
        assert!((k - a).abs() < 1e-10 * a.max(1.0), "K* = {k}, S = {a}");
    }

    #[test]
    fn andrews_wald_exact_fit_and_sigma_zero() {
        let s = toy(
            &[0.6, 0.3],
            &[&[1.2, 0.6]],
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2) * 0.4,
            100,
        );
        let theta = DVector::from_column_slice(&[0.5]);
        let r = andrews_wald_stat(&theta, &s).unwrap();
        assert!(r.stat.abs() < 1e-18);
        assert!((r.theta_bar - theta).abs().max() < 1e-12);

        // Sigma_gamma = 0: D = gamma, so AW = K* exactly.
        let s = toy(
            &[0.9, 0.1, 0.4],
            &[&[1.0, 0.3, 0.5]],
            DMatrix::identity(3, 3),
            DMatrix::from_element(3, 3, 0.0),
            200,
        );
        let theta = DVector::from_column_slice(&[0.25]);
        let aw = andrews_wald_stat(&theta, &s).unwrap().stat;
        let ks = kstar_stat(&theta, &s).unwrap().stat;
        assert!((aw - ks).abs() < 1e-12);
    }

    #[test]
    fn lc_composition() {
        let s = toy(
            &[0.9, 0.1, 0.4, 0.2],
            &[&[1.0, 0.3, 0.5, 0.1], &[0.2, 0.8, 0.1, 0.6]],
            DMatrix::identity(4, 4),
            DMatrix::identity(8, 8) * 0.2,
            300,
        );
        let theta = DVector::from_column_slice(&[0.3, -0.2]);
        let lc = lc_stat(&theta, &s, 0.3).unwrap();
        let k = kstar_stat(&theta, &s).unwrap().stat;
        let a = ar_stat(&theta, &s).unwrap();
        assert!((lc - (k + 0.3 * a)).abs() < 1e-12);
        // a = 0 -> K*.
        let lc0 = lc_stat(&theta, &s, 0.0).unwrap();
        assert!((lc0 - k).abs() < 1e-14);
    }

    #[test]
    fn kappa2_truncates_at_zero() {
        // Small moment vector: criterion at kappa2 = 0 already below J.
        let s = toy(
            &[0.001, 0.001],
            &[&[1.0, 0.5]],
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2) * 0.1,
            100,
        );
        let fit = solve_kappa2(&DVector::from_column_slice(&[0.0]), &s).unwrap();
        assert_eq!(fit.kappa2, 0.0);
        assert!(fit.at_boundary);
        // And then Kleibergen-OH equals plain K* exactly.
        let theta = DVector::from_column_slice(&[0.0]);
        let koh = kleibergen_oh_stat(&theta, &s).unwrap();
        let k = kstar_stat(&theta, &s).unwrap().stat;
        assert_eq!(koh, k);
    }

    #[test]
    fn kappa2_scalar_closed_form() {
        // J=1: n g^2 / (sigma^2 + c kappa2) = 1 => kappa2 = (n g^2 - sigma^2) / c.
        let s = toy(
            &[0.5],
            &[&[1.0]],
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 0.0),
            400,
        );
        let theta = DVector::from_column_slice(&[0.0]);
        let fit = solve_kappa2(&theta, &s).unwrap();
        let want = (400.0 * 0.25 - 2.0) / 1.0;
        assert!(
            (fit.kappa2 - want).abs() < 1e-8 * want,
            "kappa2 = {}, want {want}",
            fit.kappa2
        );
        assert!(!fit.at_boundary);
    }

    #[test]
    fn kappa2_monotone_in_outcome_cov() {
        let theta = DVector::from_column_slice(&[0.0]);
        let mk = |scale: f64| {
            toy(
                &[0.4, 0.3, 0.5],
                &[&[1.0, 0.4, 0.2]],
                DMatrix::identity(3, 3) * scale,
                DMatrix::identity(3, 3) * 0.1,
                500,
            )
        };
        let f1 = solve_kappa2(&theta, &mk(1.0)).unwrap();
        let f2 = solve_kappa2(&theta, &mk(2.0)).unwrap();
        assert!(f2.kappa2 < f1.kappa2);
    }

    #[test]
    fn kstar_decreases_with_added_dispersion() {
        let s = toy(
            &[0.5],
            &[&[1.0]],
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.0),
            100,
        );
        let theta = DVector::from_column_slice(&[0.0]);
        let mut prev = f64::INFINITY;
        for k2 in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let v = kstar_stat_with_dispersion(&theta, &s, k2).unwrap().stat;
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn grid_axes_and_enumeration() {
        let g = ThetaGrid::from_ranges(&[(-2.0, 2.0, 0.04), (-2.0, 2.0, 0.04)]).unwrap();
        assert_eq!(g.axes()[0].len(), 101);
        assert_eq!(g.n_points(), 10201);
        // Row-major: last axis fastest.
        assert_eq!(g.indices(0), vec![0, 0]);
        assert_eq!(g.indices(1), vec![0, 1]);
        assert_eq!(g.indices(101), vec![1, 0]);
        assert!(g.on_boundary(0));
        assert!(!g.on_boundary(102));
        let p = g.position_of(&[1.0, 0.0]).unwrap();
        let pt = g.point(p);
        assert!((pt[0] - 1.0).abs() < 1e-12 && pt[1].abs() < 1e-12);
    }

    #[test]
    fn grid_rejects_bad_axes() {
        assert!(ThetaGrid::new(vec![]).is_err());
        assert!(ThetaGrid::new(vec![vec![0.0, 0.0]]).is_err());
        assert!(ThetaGrid::from_ranges(&[(1.0, 0.0, 0.1)]).is_err());
    }

    #[test]
    fn method_tags_round_trip() {
        for m in [
            Method::Wald,
            Method::AndrewsWald,
            Method::Ar,
            Method::Kleibergen,
            Method::LcRobust,
            Method::CsP,
            Method::KleibergenOh,
        ] {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("nope".parse::<Method>().is_err());
    }

    #[test]
    fn ar_set_empty_under_gross_heterogeneity() {
        // Outcome associations far outside the column span of gamma_hat
        // relative to tiny Sigma_Gamma: every theta is rejected.
        let s = toy(
            &[10.0, -10.0, 10.0, -10.0],
            &[&[1.0, 1.0, 1.0, 1.0]],
            DMatrix::identity(4, 4) * 0.01,
            DMatrix::identity(4, 4) * 0.01,
            1000,
        );
        let grid = ThetaGrid::from_ranges(&[(-2.0, 2.0, 0.1)]).unwrap();
        let set = invert_confidence_set(Method::Ar, &grid, &s, 0.05, None).unwrap();
        assert!(set.empty);
        assert_eq!(set.area, 0);
    }

    #[test]
    fn wald_set_contiguous_around_estimate() {
        let gamma1 = [0.8, 0.1, 0.4, 0.3];
        let gamma2 = [0.1, 0.9, 0.2, 0.5];
        let theta0 = [0.5, -0.5];
        let big: Vec<f64> = (0..4)
            .map(|i| gamma1[i] * theta0[0] + gamma2[i] * theta0[1])
            .collect();
        let s = toy(
            &big,
            &[&gamma1, &gamma2],
            DMatrix::identity(4, 4),
            DMatrix::identity(8, 8) * 0.1,
            5000,
        );
        let grid = ThetaGrid::from_ranges(&[(-2.0, 2.0, 0.05), (-2.0, 2.0, 0.05)]).unwrap();
        let set = invert_confidence_set(Method::Wald, &grid, &s, 0.05, None).unwrap();
        assert!(!set.empty);
        let p0 = grid.position_of(&[0.5, -0.5]).unwrap();
        assert!(set.member[p0]);
        assert_eq!(set.failed_points, 0);
        // Projection intervals bracket the truth.
        let (lo, hi) = set.projected_interval(&grid, 0).unwrap();
        assert!(lo <= 0.5 && 0.5 <= hi);
    }

    #[test]
    fn selection_dominance_and_ties() {
        // One subset strictly dominates: both strategies agree. Build
        // summaries where subset 0 has strong second exposure signal.
        let strong = toy(
            &[0.5, 0.2, 0.3, 0.1],
            &[&[1.0, 0.2, 0.1, 0.05], &[0.1, 0.9, 0.2, 0.1]],
            DMatrix::identity(4, 4) * 0.01,
            DMatrix::identity(8, 8) * 0.01,
            2000,
        );
        let weak = toy(
            &[0.5, 0.2, 0.3, 0.1],
            &[&[1.0, 0.2, 0.1, 0.05], &[1.0, 0.2, 0.1, 0.05]],
            DMatrix::identity(4, 4) * 0.01,
            DMatrix::identity(8, 8) * 0.01,
            2000,
            );
        let candidates = vec![vec![0], vec![1]];
        let builder = |subset: &[usize]| -> crate::error::Result<MultivariableSummary> {
            Ok(if subset[0] == 0 { strong.clone() } else { weak.clone() })
        };
        let grid = ThetaGrid::from_ranges(&[(-2.0, 2.0, 0.5), (-2.0, 2.0, 0.5)]).unwrap();
        let store = crate::calibration::CalibrationStore::new(
            9,
            20_000,
            crate::calibration::DistortionParams::new(0.05, 0.01),
        )
        .unwrap();
        let by_f = select_instruments(
            &candidates,
            builder,
            SelectionStrategy::MaxMinConditionalF,
            &grid,
            &store,
        )
        .unwrap();
        assert_eq!(by_f.chosen, 0);

        // Identical duplicated subsets: first in input order wins.
        let builder2 = |_: &[usize]| -> crate::error::Result<MultivariableSummary> { Ok(strong.clone()) };
        let dup = select_instruments(
            &[vec![0], vec![0]],
            builder2,
            SelectionStrategy::MaxMinConditionalF,
            &grid,
            &store,
        )
        .unwrap();
        assert_eq!(dup.chosen, 0);
    }

    #[test]
    fn selection_all_failures_errors() {
        let grid = ThetaGrid::from_ranges(&[(-1.0, 1.0, 0.5)]).unwrap();
        let store = crate::calibration::CalibrationStore::new(
            9,
            20_000,
            crate::calibration::DistortionParams::new(0.05, 0.01),
        )
        .unwrap();
        let builder = |_: &[usize]| -> crate::error::Result<MultivariableSummary> {
            Err(Error::CollinearExposures)
        };
        let r = select_instruments(
            &[vec![0], vec![1]],
            builder,
            SelectionStrategy::MaxMinConditionalF,
            &grid,
            &store,
        );
        assert!(matches!(r, Err(Error::AllSubsetsFailed(_))));
    }
}
