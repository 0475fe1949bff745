//! Monte Carlo engine: two-sample data generation under the linear
//! instrumental-variable model, coverage/power/area studies, the
//! F-statistic screening experiment, and post-selection experiments.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{chi2_quantile, CalibrationStore};
use crate::core_stats::{conditional_f_report, gmm_estimate, ivw_estimate, wald_stat};
use crate::error::{Error, Result};
use crate::robust_inference::{
    ar_stat, distortion_cutoff, kleibergen_oh_stat, kstar_stat, lc_stat, andrews_wald_stat,
    select_instruments, GammaHat, Method, SelectionStrategy, ThetaGrid,
};
use crate::summary_data::{
    build_multivariable_summary, InputScale, MultivariableSummary, UnivariableGwasTables,
};

/// Scenario parameters for the simulation study. The data-generating model
/// is the two-exposure, four-core-instrument design: instrument effects on
/// exposure 1 are [1+xi, 1+xi, 1-xi, 1-xi] * 0.2 * mu / sqrt(n_X) and on
/// exposure 2 are [1-xi, 1-xi, 1+xi, 1+xi] * mu / sqrt(n_X); instruments are
/// unit-variance with off-diagonal covariance a a' for a ~ U[0, sqrt(0.4)]
/// redrawn per replicate. Setting `tau` appends four more instruments whose
/// true effects are tau times the core effects.
#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub n_x: usize,
    pub n_y: usize,
    /// Core instrument count; the generating patterns are defined for 4.
    pub n_instruments: usize,
    /// True exposure effects; the generating patterns are defined for K = 2.
    pub theta0: Vec<f64>,
    /// Unconditional instrument strength.
    pub mu: f64,
    /// Conditional instrument strength in [0, 1].
    pub xi: f64,
    /// Additional-instrument multiplier; None runs the core-only design.
    pub tau: Option<f64>,
    /// Covariance of the structural errors (U, V1, V2).
    pub error_cov: DMatrix<f64>,
    /// Direct variant-outcome effect variance kappa^2 (overdispersion);
    /// direct effects nu ~ N(0, kappa^2 / n_Y) are redrawn per replicate.
    pub overdispersion_kappa2: f64,
    pub grid: ThetaGrid,
    pub alpha: f64,
    pub gamma_min: f64,
    pub replicates: usize,
    pub master_seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            n_x: 5000,
            n_y: 5000,
            n_instruments: 4,
            theta0: vec![1.0, 0.0],
            mu: 10.0,
            xi: 1.0,
            tau: None,
            // cov(V1, V2) must stay below 0.28 for positive definiteness
            // given the +/-0.6 confounder correlations.
            error_cov: DMatrix::from_row_slice(
                3,
                3,
                &[1.0, -0.6, 0.6, -0.6, 1.0, 0.25, 0.6, 0.25, 1.0],
            ),
            overdispersion_kappa2: 0.0,
            grid: ThetaGrid::from_ranges(&[(-2.0, 2.0, 0.04), (-2.0, 2.0, 0.04)])
                .expect("default grid"),
            alpha: 0.05,
            gamma_min: 0.01,
            replicates: 100,
            master_seed: 1,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.theta0.len() != 2 {
            return Err(Error::InvalidConfig(
                "the generating model is defined for K = 2 exposures".into(),
            ));
        }
        if self.n_instruments != 4 {
            return Err(Error::InvalidConfig(
                "the generating model is defined for 4 core instruments".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.xi) {
            return Err(Error::InvalidConfig(format!("xi = {} outside [0, 1]", self.xi)));
        }
        if self.mu <= 0.0 {
            return Err(Error::InvalidConfig(format!("mu = {} must be positive", self.mu)));
        }
        if self.overdispersion_kappa2 < 0.0 {
            return Err(Error::InvalidConfig("kappa^2 must be nonnegative".into()));
        }
        if self.error_cov.nrows() != 3 || self.error_cov.ncols() != 3 {
            return Err(Error::InvalidConfig("error covariance must be 3 x 3".into()));
        }
        if nalgebra::Cholesky::new(self.error_cov.clone()).is_none() {
            return Err(Error::InvalidConfig("error covariance is not PD".into()));
        }
        if self.n_x < 50 || self.n_y < 50 {
            return Err(Error::InvalidConfig("sample sizes too small to regress".into()));
        }
        Ok(())
    }

    /// Total instruments including the tau-scaled additional set.
    pub fn total_instruments(&self) -> usize {
        if self.tau.is_some() {
            2 * self.n_instruments
        } else {
            self.n_instruments
        }
    }
}

/// True instrument-exposure effect matrix (J_total x 2).
pub(crate) fn true_effects(config: &SimulationConfig) -> DMatrix<f64> {
    let scale = 1.0 / (config.n_x as f64).sqrt();
    let xi = config.xi;
    let pat1 = [1.0 + xi, 1.0 + xi, 1.0 - xi, 1.0 - xi];
    let pat2 = [1.0 - xi, 1.0 - xi, 1.0 + xi, 1.0 + xi];
    let j_total = config.total_instruments();
    let mut g = DMatrix::zeros(j_total, 2);
    for i in 0..4 {
        g[(i, 0)] = pat1[i] * 0.2 * config.mu * scale;
        g[(i, 1)] = pat2[i] * config.mu * scale;
    }
    if let Some(tau) = config.tau {
        for i in 0..4 {
            g[(4 + i, 0)] = g[(i, 0)] * tau;
            g[(4 + i, 1)] = g[(i, 1)] * tau;
        }
    }
    g
}

/// Per-replicate RNG: one ChaCha key per study seed, one stream per
/// (cell, replicate), so replicates are independent and order-insensitive.
pub fn replicate_rng(master_seed: u64, cell: u64, replicate: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
    rng.set_stream((cell << 32) | replicate);
    rng
}

struct Sample {
    /// J columns of instrument values.
    z: Vec<Vec<f64>>,
    /// K columns of exposure values.
    x: Vec<Vec<f64>>,
    /// Outcome values.
    y: Vec<f64>,
}

fn draw_sample(
    rng: &mut ChaCha12Rng,
    n: usize,
    a: &[f64],
    gamma: &DMatrix<f64>,
    theta0: &[f64],
    err_lower: &DMatrix<f64>,
    nu: &[f64],
) -> Sample {
    let j = a.len();
    let b: Vec<f64> = a.iter().map(|&ai| (1.0 - ai * ai).sqrt()).collect();
    let mut z = vec![vec![0.0; n]; j];
    let mut x = vec![vec![0.0; n]; 2];
    let mut y = vec![0.0; n];
    for i in 0..n {
        let w: f64 = rng.sample(StandardNormal);
        for jj in 0..j {
            let e: f64 = rng.sample(StandardNormal);
            z[jj][i] = a[jj] * w + b[jj] * e;
        }
        let g1: f64 = rng.sample(StandardNormal);
        let g2: f64 = rng.sample(StandardNormal);
        let g3: f64 = rng.sample(StandardNormal);
        let u = err_lower[(0, 0)] * g1;
        let v1 = err_lower[(1, 0)] * g1 + err_lower[(1, 1)] * g2;
        let v2 = err_lower[(2, 0)] * g1 + err_lower[(2, 1)] * g2 + err_lower[(2, 2)] * g3;
        let mut x1 = v1;
        let mut x2 = v2;
        for jj in 0..j {
            x1 += gamma[(jj, 0)] * z[jj][i];
            x2 += gamma[(jj, 1)] * z[jj][i];
        }
        x[0][i] = x1;
        x[1][i] = x2;
        let mut yi = theta0[0] * x1 + theta0[1] * x2 + u;
        for jj in 0..j {
            yi += nu[jj] * z[jj][i];
        }
        y[i] = yi;
    }
    Sample { z, x, y }
}

/// Univariable regression with intercept: slope and its standard error.
fn simple_regression(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        let dx = xi - mx;
        let dy = yi - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let beta = sxy / sxx;
    let rss = (syy - beta * sxy).max(0.0);
    let se = (rss / (n - 2.0) / sxx).sqrt();
    (beta, se)
}

fn correlation_matrix(cols: &[Vec<f64>]) -> DMatrix<f64> {
    let p = cols.len();
    let n = cols[0].len() as f64;
    let means: Vec<f64> = cols.iter().map(|c| c.iter().sum::<f64>() / n).collect();
    let mut cov = DMatrix::zeros(p, p);
    for i in 0..p {
        for k in i..p {
            let mut s = 0.0;
            for t in 0..cols[i].len() {
                s += (cols[i][t] - means[i]) * (cols[k][t] - means[k]);
            }
            cov[(i, k)] = s;
            cov[(k, i)] = s;
        }
    }
    let sd: Vec<f64> = (0..p).map(|i| cov[(i, i)].sqrt()).collect();
    DMatrix::from_fn(p, p, |r, c| {
        if r == c {
            1.0
        } else {
            cov[(r, c)] / (sd[r] * sd[c])
        }
    })
}

/// One simulated two-sample dataset: the univariable tables, the built
/// summary, and the generating truth.
#[derive(Debug, Clone)]
pub struct SimulatedDataset {
    pub tables: UnivariableGwasTables,
    pub summary: MultivariableSummary,
    pub truth: DVector<f64>,
}

/// Generate one replicate: draw two independent samples from the structural
/// model, compute univariable per-variant regressions in each, and build
/// the multivariable summary using the exposure-sample variant correlation
/// and exposure correlation matrices. Deterministic in
/// (master_seed, cell, replicate).
pub fn simulate_dataset(config: &SimulationConfig, cell: u64, replicate: u64) -> Result<SimulatedDataset> {
    config.validate()?;
    let mut rng = replicate_rng(config.master_seed, cell, replicate);
    let j_total = config.total_instruments();
    let gamma = true_effects(config);
    let err_lower = nalgebra::Cholesky::new(config.error_cov.clone())
        .expect("validated PD")
        .l();

    let a: Vec<f64> = (0..j_total)
        .map(|_| rng.random::<f64>() * 0.4f64.sqrt())
        .collect();
    let nu: Vec<f64> = if config.overdispersion_kappa2 > 0.0 {
        let sd = (config.overdispersion_kappa2 / config.n_y as f64).sqrt();
        (0..j_total)
            .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
            .collect()
    } else {
        vec![0.0; j_total]
    };

    let exp_sample = draw_sample(&mut rng, config.n_x, &a, &gamma, &config.theta0, &err_lower, &nu);
    let out_sample = draw_sample(&mut rng, config.n_y, &a, &gamma, &config.theta0, &err_lower, &nu);

    let mut exposure_beta = DMatrix::zeros(j_total, 2);
    let mut exposure_se = DMatrix::zeros(j_total, 2);
    for jj in 0..j_total {
        for k in 0..2 {
            let (b, se) = simple_regression(&exp_sample.z[jj], &exp_sample.x[k]);
            exposure_beta[(jj, k)] = b;
            exposure_se[(jj, k)] = se;
        }
    }
    let mut outcome_beta = DVector::zeros(j_total);
    let mut outcome_se = DVector::zeros(j_total);
    for jj in 0..j_total {
        let (b, se) = simple_regression(&out_sample.z[jj], &out_sample.y);
        outcome_beta[jj] = b;
        outcome_se[jj] = se;
    }

    let ld = correlation_matrix(&exp_sample.z);
    let exposure_cor = correlation_matrix(&exp_sample.x);

    let names: Vec<String> = (1..=j_total).map(|i| format!("z{i}")).collect();
    let tables = UnivariableGwasTables {
        variants: names,
        effect_allele: vec!["A".into(); j_total],
        other_allele: vec!["G".into(); j_total],
        outcome_effect_allele: vec!["A".into(); j_total],
        outcome_other_allele: vec!["G".into(); j_total],
        exposure_names: vec!["x1".into(), "x2".into()],
        exposure_beta,
        exposure_se,
        outcome_beta,
        outcome_se,
        ld,
        exposure_cor,
        n_x: config.n_x as u64,
        n_y: config.n_y as u64,
    };
    let summary = build_multivariable_summary(&tables, InputScale::Standardized)?.summary;
    Ok(SimulatedDataset {
        tables,
        summary,
        truth: DVector::from_vec(config.theta0.clone()),
    })
}

// ---------------------------------------------------------------------------
// Study runner
// ---------------------------------------------------------------------------

/// Per-method outcome of one replicate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SetRecord {
    pub method: Method,
    pub covers_truth: bool,
    pub rejects_null: bool,
    pub area: Option<usize>,
    pub empty: Option<bool>,
    pub touches_boundary: Option<bool>,
}

/// One replicate's metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub bias_ivw: Vec<f64>,
    pub bias_gmm: Vec<f64>,
    pub ivw_covers: bool,
    pub ivw_rejects_null: bool,
    pub gmm_covers: bool,
    pub gmm_rejects_null: bool,
    pub min_condf: f64,
    /// Distortion cutoff; None when the scan is undetermined up to its cap.
    pub gamma_hat: Option<f64>,
    pub sets: Vec<SetRecord>,
}

/// Which per-replicate quantities a study computes.
#[derive(Debug, Clone)]
pub struct StudyOptions {
    pub methods: Vec<Method>,
    /// Invert sets over the full grid (areas, emptiness, boundary flags).
    pub compute_areas: bool,
    /// Run the distortion-cutoff scan per replicate.
    pub compute_distortion: bool,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            methods: vec![Method::Wald, Method::Ar, Method::Kleibergen, Method::LcRobust],
            compute_areas: false,
            compute_distortion: false,
        }
    }
}

/// Aggregated metrics for one method in one scenario cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: Method,
    pub coverage: f64,
    pub power: f64,
    pub mean_area: Option<f64>,
    pub empty_rate: Option<f64>,
    pub boundary_rate: Option<f64>,
}

/// Aggregated metrics for one (mu, xi) scenario cell.
#[derive(Debug, Clone, Serialize)]
pub struct CellMetrics {
    pub mu: f64,
    pub xi: f64,
    pub replicates: usize,
    pub failed_replicates: usize,
    pub bias_ivw: Vec<f64>,
    pub bias_gmm: Vec<f64>,
    pub ivw_coverage: f64,
    pub ivw_power: f64,
    pub gmm_coverage: f64,
    pub gmm_power: f64,
    pub mean_min_condf: f64,
    /// Mean distortion cutoff with undetermined scans counted at the cap.
    pub mean_gamma_hat: Option<f64>,
    pub median_gamma_hat: Option<f64>,
    pub undetermined_rate: Option<f64>,
    pub methods: Vec<MethodMetrics>,
    #[serde(skip)]
    pub records: Vec<ReplicateRecord>,
}

fn run_replicate(
    config: &SimulationConfig,
    cell: u64,
    replicate: usize,
    opts: &StudyOptions,
    store: &CalibrationStore,
) -> Result<ReplicateRecord> {
    let data = simulate_dataset(config, cell, replicate as u64)?;
    let s = &data.summary;
    let j = s.n_variants();
    let k = s.n_exposures();
    let theta0 = &data.truth;
    let null = DVector::zeros(k);
    let alpha = config.alpha;
    let z_crit = {
        use statrs::distribution::ContinuousCDF;
        statrs::distribution::Normal::new(0.0, 1.0)
            .unwrap()
            .inverse_cdf(1.0 - alpha / 2.0)
    };

    let ivw = ivw_estimate(s)?;
    let gmm = gmm_estimate(s, None)?;
    let bias_ivw: Vec<f64> = (0..k).map(|i| ivw.theta[i] - theta0[i]).collect();
    let bias_gmm: Vec<f64> = (0..k).map(|i| gmm.theta[i] - theta0[i]).collect();
    // Exposure-1 confidence intervals for the point estimators.
    let ivw_covers = (ivw.theta[0] - theta0[0]).abs() <= z_crit * ivw.se[0];
    let ivw_rejects_null = (ivw.theta[0] / ivw.se[0]).abs() > z_crit;
    let gmm_covers = (gmm.theta[0] - theta0[0]).abs() <= z_crit * gmm.se[0];
    let gmm_rejects_null = (gmm.theta[0] / gmm.se[0]).abs() > z_crit;

    let condf = conditional_f_report(s)?;

    let lc_cal = if opts.methods.iter().any(|m| matches!(m, Method::LcRobust | Method::CsP))
        || opts.compute_distortion
    {
        Some(store.lc_calibration(j, k)?)
    } else {
        None
    };

    let chi2_k = chi2_quantile(k, 1.0 - alpha);
    let chi2_j = chi2_quantile(j, 1.0 - alpha);
    let stat_reject = |m: Method, theta: &DVector<f64>| -> Result<bool> {
        Ok(match m {
            Method::Wald => wald_stat(theta, &gmm, s.n_x) > chi2_k,
            Method::AndrewsWald => andrews_wald_stat(theta, s)?.stat > chi2_k,
            Method::Ar => ar_stat(theta, s)? > chi2_j,
            Method::Kleibergen => kstar_stat(theta, s)?.stat > chi2_k,
            Method::LcRobust => {
                let cal = lc_cal.as_ref().expect("calibration prepared");
                lc_stat(theta, s, cal.a)? > cal.quantile
            }
            Method::CsP => {
                let cal = lc_cal.as_ref().expect("calibration prepared");
                lc_stat(theta, s, cal.a)? > chi2_k
            }
            Method::KleibergenOh => kleibergen_oh_stat(theta, s)? > chi2_k,
        })
    };

    let mut sets = Vec::with_capacity(opts.methods.len());
    for &m in &opts.methods {
        let covers_truth = !stat_reject(m, theta0)?;
        let rejects_null = stat_reject(m, &null)?;
        let (area, empty, touches_boundary) = if opts.compute_areas {
            let cal = lc_cal.clone();
            let set = crate::robust_inference::invert_confidence_set(
                m,
                &config.grid,
                s,
                alpha,
                cal.as_ref(),
            )?;
            (Some(set.area), Some(set.empty), Some(set.touches_boundary))
        } else {
            (None, None, None)
        };
        sets.push(SetRecord {
            method: m,
            covers_truth,
            rejects_null,
            area,
            empty,
            touches_boundary,
        });
    }

    let gamma_hat = if opts.compute_distortion {
        let table = store.distortion_table(j, k)?;
        let rep = distortion_cutoff(&config.grid, s, &table)?;
        match rep.gamma_hat {
            GammaHat::Determined { gamma } => Some(gamma),
            GammaHat::Undetermined { .. } => None,
        }
    } else {
        None
    };

    Ok(ReplicateRecord {
        replicate,
        bias_ivw,
        bias_gmm,
        ivw_covers,
        ivw_rejects_null,
        gmm_covers,
        gmm_rejects_null,
        min_condf: condf.min_f,
        gamma_hat,
        sets,
    })
}

fn aggregate_cell(
    mu: f64,
    xi: f64,
    records: Vec<ReplicateRecord>,
    failed: usize,
    opts: &StudyOptions,
    gamma_cap: f64,
) -> CellMetrics {
    let n = records.len().max(1) as f64;
    let k = records.first().map(|r| r.bias_ivw.len()).unwrap_or(0);
    let mean_vec = |f: &dyn Fn(&ReplicateRecord) -> &Vec<f64>| -> Vec<f64> {
        (0..k)
            .map(|i| records.iter().map(|r| f(r)[i]).sum::<f64>() / n)
            .collect()
    };
    let rate = |f: &dyn Fn(&ReplicateRecord) -> bool| -> f64 {
        records.iter().filter(|r| f(r)).count() as f64 / n
    };

    let mut methods = Vec::new();
    for (mi, &m) in opts.methods.iter().enumerate() {
        let coverage = rate(&|r: &ReplicateRecord| r.sets[mi].covers_truth);
        let power = rate(&|r: &ReplicateRecord| r.sets[mi].rejects_null);
        let (mean_area, empty_rate, boundary_rate) = if opts.compute_areas {
            (
                Some(records.iter().map(|r| r.sets[mi].area.unwrap() as f64).sum::<f64>() / n),
                Some(rate(&|r: &ReplicateRecord| r.sets[mi].empty.unwrap())),
                Some(rate(&|r: &ReplicateRecord| r.sets[mi].touches_boundary.unwrap())),
            )
        } else {
            (None, None, None)
        };
        methods.push(MethodMetrics {
            method: m,
            coverage,
            power,
            mean_area,
            empty_rate,
            boundary_rate,
        });
    }

    let (mean_gamma_hat, median_gamma_hat, undetermined_rate) = if opts.compute_distortion {
        let values: Vec<f64> = records
            .iter()
            .map(|r| r.gamma_hat.unwrap_or(gamma_cap))
            .collect();
        let mean = values.iter().sum::<f64>() / n;
        let mut sorted: Vec<f64> = records
            .iter()
            .map(|r| r.gamma_hat.unwrap_or(f64::INFINITY))
            .collect();
        sorted.sort_by(f64::total_cmp);
        let median = sorted.get(sorted.len() / 2).copied().unwrap_or(f64::NAN);
        let undet = rate(&|r: &ReplicateRecord| r.gamma_hat.is_none());
        (Some(mean), Some(median), Some(undet))
    } else {
        (None, None, None)
    };

    CellMetrics {
        mu,
        xi,
        replicates: records.len(),
        failed_replicates: failed,
        bias_ivw: mean_vec(&|r: &ReplicateRecord| &r.bias_ivw),
        bias_gmm: mean_vec(&|r: &ReplicateRecord| &r.bias_gmm),
        ivw_coverage: rate(&|r: &ReplicateRecord| r.ivw_covers),
        ivw_power: rate(&|r: &ReplicateRecord| r.ivw_rejects_null),
        gmm_coverage: rate(&|r: &ReplicateRecord| r.gmm_covers),
        gmm_power: rate(&|r: &ReplicateRecord| r.gmm_rejects_null),
        mean_min_condf: records.iter().map(|r| r.min_condf).sum::<f64>() / n,
        mean_gamma_hat,
        median_gamma_hat,
        undetermined_rate,
        methods,
        records,
    }
}

/// Run the study over the (mu, xi) product. Replicates are scheduled in
/// parallel and aggregated in replicate order, so identical (config,
/// master_seed) produce bit-identical tables for any thread count.
pub fn run_study(
    config: &SimulationConfig,
    mu_list: &[f64],
    xi_list: &[f64],
    opts: &StudyOptions,
    store: &CalibrationStore,
) -> Result<Vec<CellMetrics>> {
    config.validate()?;
    let mut cells = Vec::new();
    for (ci, (&mu, &xi)) in mu_list
        .iter()
        .flat_map(|m| xi_list.iter().map(move |x| (m, x)))
        .enumerate()
    {
        let mut cell_config = config.clone();
        cell_config.mu = mu;
        cell_config.xi = xi;
        let results: Vec<Result<ReplicateRecord>> = (0..config.replicates)
            .into_par_iter()
            .map(|r| run_replicate(&cell_config, ci as u64, r, opts, store))
            .collect();
        let mut records = Vec::with_capacity(config.replicates);
        let mut failed = 0;
        for r in results {
            match r {
                Ok(rec) => records.push(rec),
                Err(_) => failed += 1,
            }
        }
        cells.push(aggregate_cell(
            mu,
            xi,
            records,
            failed,
            opts,
            store.params.gamma_cap,
        ));
    }
    Ok(cells)
}

// ---------------------------------------------------------------------------
// Screening experiment
// ---------------------------------------------------------------------------

/// Coverage over all replicates versus over the subset whose minimum
/// conditional F-statistic clears the screening threshold.
#[derive(Debug, Clone, Serialize)]
pub struct ScreeningMetrics {
    pub threshold: f64,
    pub mean_min_condf: f64,
    pub kept_fraction: f64,
    pub kept_replicates: usize,
    pub unscreened: CellMetrics,
    /// None when no replicate clears the threshold.
    pub screened: Option<CellMetrics>,
}

/// Run one scenario cell and compare unscreened metrics with metrics over
/// replicates whose min conditional F is at least `threshold`.
pub fn screening_experiment(
    config: &SimulationConfig,
    threshold: f64,
    opts: &StudyOptions,
    store: &CalibrationStore,
) -> Result<ScreeningMetrics> {
    let cells = run_study(config, &[config.mu], &[config.xi], opts, store)?;
    let unscreened = cells.into_iter().next().expect("single cell");
    let kept: Vec<ReplicateRecord> = unscreened
        .records
        .iter()
        .filter(|r| r.min_condf >= threshold)
        .cloned()
        .collect();
    let kept_n = kept.len();
    let total = unscreened.records.len().max(1);
    let screened = if kept_n > 0 {
        Some(aggregate_cell(
            config.mu,
            config.xi,
            kept,
            0,
            opts,
            store.params.gamma_cap,
        ))
    } else {
        None
    };
    Ok(ScreeningMetrics {
        threshold,
        mean_min_condf: unscreened.mean_min_condf,
        kept_fraction: kept_n as f64 / total as f64,
        kept_replicates: kept_n,
        unscreened,
        screened,
    })
}

// ---------------------------------------------------------------------------
// Selection experiment
// ---------------------------------------------------------------------------

/// Instrument-set policy in the post-selection experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    AlwaysCore,
    AlwaysFull,
    ByConditionalF,
    ByDistortionCutoff,
}

impl SelectionPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            SelectionPolicy::AlwaysCore => "core",
            SelectionPolicy::AlwaysFull => "full",
            SelectionPolicy::ByConditionalF => "post_selection_condf",
            SelectionPolicy::ByDistortionCutoff => "post_selection_gamma",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PolicyMetrics {
    pub policy: SelectionPolicy,
    pub coverage: f64,
    pub mean_area: f64,
    /// Fraction of replicates in which the full set was chosen (1.0 and 0.0
    /// for the fixed policies).
    pub full_selection_rate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectionMetrics {
    pub tau: f64,
    pub mu: f64,
    pub replicates: usize,
    pub failed_replicates: usize,
    pub policies: Vec<PolicyMetrics>,
}

struct SelectionReplicate {
    covers: [bool; 4],
    areas: [usize; 4],
    chose_full: [bool; 4],
}

fn selection_replicate(
    config: &SimulationConfig,
    cell: u64,
    replicate: usize,
    store: &CalibrationStore,
) -> Result<SelectionReplicate> {
    let data = simulate_dataset(config, cell, replicate as u64)?;
    let core: Vec<usize> = (0..4).collect();
    let full: Vec<usize> = (0..8).collect();
    let candidates = vec![core.clone(), full.clone()];
    let builder = |subset: &[usize]| -> Result<MultivariableSummary> {
        let sub = data.tables.subset(subset)?;
        Ok(build_multivariable_summary(&sub, InputScale::Standardized)?.summary)
    };

    // LC coverage and area per candidate subset, computed once and shared
    // by every policy.
    let mut covers = [false; 2];
    let mut areas = [0usize; 2];
    for (i, subset) in candidates.iter().enumerate() {
        let s = builder(subset)?;
        let cal = store.lc_calibration(s.n_variants(), s.n_exposures())?;
        let set = crate::robust_inference::invert_confidence_set(
            Method::LcRobust,
            &config.grid,
            &s,
            config.alpha,
            Some(&cal),
        )?;
        covers[i] = lc_stat(&data.truth, &s, cal.a)? <= cal.quantile;
        areas[i] = set.area;
    }

    let by_f = select_instruments(
        &candidates,
        &builder,
        SelectionStrategy::MaxMinConditionalF,
        &config.grid,
        store,
    )?
    .chosen;
    let by_g = select_instruments(
        &candidates,
        &builder,
        SelectionStrategy::MinDistortionCutoff,
        &config.grid,
        store,
    )?
    .chosen;

    let pick = [0usize, 1, by_f, by_g];
    Ok(SelectionReplicate {
        covers: [covers[pick[0]], covers[pick[1]], covers[pick[2]], covers[pick[3]]],
        areas: [areas[pick[0]], areas[pick[1]], areas[pick[2]], areas[pick[3]]],
        chose_full: [false, true, by_f == 1, by_g == 1],
    })
}

/// Post-selection experiment comparing always-core, always-full, and the
/// two data-driven selection policies for each tau.
pub fn selection_experiment(
    config: &SimulationConfig,
    tau_list: &[f64],
    store: &CalibrationStore,
) -> Result<Vec<SelectionMetrics>> {
    let mut out = Vec::new();
    for (ti, &tau) in tau_list.iter().enumerate() {
        let mut cfg = config.clone();
        cfg.tau = Some(tau);
        cfg.validate()?;
        let results: Vec<Result<SelectionReplicate>> = (0..cfg.replicates)
            .into_par_iter()
            .map(|r| selection_replicate(&cfg, 1_000_000 + ti as u64, r, store))
            .collect();
        let mut ok = Vec::new();
        let mut failed = 0;
        for r in results {
            match r {
                Ok(v) => ok.push(v),
                Err(_) => failed += 1,
            }
        }
        let n = ok.len().max(1) as f64;
        let policies = [
            SelectionPolicy::AlwaysCore,
            SelectionPolicy::AlwaysFull,
            SelectionPolicy::ByConditionalF,
            SelectionPolicy::ByDistortionCutoff,
        ]
        .iter()
        .enumerate()
        .map(|(pi, &policy)| PolicyMetrics {
            policy,
            coverage: ok.iter().filter(|r| r.covers[pi]).count() as f64 / n,
            mean_area: ok.iter().map(|r| r.areas[pi] as f64).sum::<f64>() / n,
            full_selection_rate: ok.iter().filter(|r| r.chose_full[pi]).count() as f64 / n,
        })
        .collect();
        out.push(SelectionMetrics {
            tau,
            mu: cfg.mu,
            replicates: ok.len(),
            failed_replicates: failed,
            policies,
        });
    }
    Ok(out)
}
