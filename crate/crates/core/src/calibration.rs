//! Simulated critical values for the linear-combination statistic and the
//! distortion-cutoff machinery.
//!
//! All quantiles come from one set of chi-squared draws per (J, K, seed),
//! shared across every weight `a` and distortion level `gamma` within an
//! analysis, so solved weights are exactly nondecreasing in gamma and every
//! result is reproducible bit-for-bit from (seed, draws).

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{ChiSquared, Distribution};
use statrs::distribution::{ChiSquared as Chi2Dist, ContinuousCDF};

use crate::error::{Error, Result};

/// Theoretical chi-squared quantile, used as the inversion threshold for
/// the Wald, Kleibergen, and CS_P sets and as the target in the a(gamma)
/// equation.
pub fn chi2_quantile(df: usize, p: f64) -> f64 {
    assert!(df > 0 && p > 0.0 && p < 1.0);
    Chi2Dist::new(df as f64).unwrap().inverse_cdf(p)
}

/// Common-random-number store of chi-squared draws for the mixture
/// (1 + a) chi2_K + a chi2_{J-K}.
#[derive(Debug, Clone)]
pub struct ChiSquareMixtureDraws {
    pub j: usize,
    pub k: usize,
    pub seed: u64,
    chi_k: Vec<f64>,
    chi_rest: Vec<f64>,
}

impl ChiSquareMixtureDraws {
    pub fn new(j: usize, k: usize, draws: usize, seed: u64) -> Result<Self> {
        if k == 0 || j < k {
            return Err(Error::InvalidConfig(format!("need J >= K >= 1, got J={j}, K={k}")));
        }
        if draws < 10_000 {
            return Err(Error::InvalidConfig(format!(
                "need at least 10000 critical-value draws, got {draws}"
            )));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let dist_k = ChiSquared::new(k as f64).expect("valid df");
        let dist_rest = if j > k {
            Some(ChiSquared::new((j - k) as f64).expect("valid df"))
        } else {
            None
        };
        let mut chi_k = Vec::with_capacity(draws);
        let mut chi_rest = Vec::with_capacity(draws);
        for _ in 0..draws {
            chi_k.push(dist_k.sample(&mut rng));
            chi_rest.push(match &dist_rest {
                Some(d) => d.sample(&mut rng),
                None => 0.0,
            });
        }
        Ok(ChiSquareMixtureDraws {
            j,
            k,
            seed,
            chi_k,
            chi_rest,
        })
    }

    pub fn n_draws(&self) -> usize {
        self.chi_k.len()
    }

    /// Empirical `level`-quantile of (1 + a) chi2_K + a chi2_{J-K} over the
    /// stored draws. Nondecreasing in `a` by construction.
    pub fn quantile(&self, a: f64, level: f64) -> f64 {
        let n = self.n_draws();
        let mut values: Vec<f64> = self
            .chi_k
            .iter()
            .zip(&self.chi_rest)
            .map(|(&u, &v)| (1.0 + a) * u + a * v)
            .collect();
        let idx = ((level * n as f64).ceil() as usize).clamp(1, n) - 1;
        let (_, val, _) = values.select_nth_unstable_by(idx, f64::total_cmp);
        *val
    }
}

/// Empirical 1-alpha quantile of (1 + a) chi2_K + a chi2_{J-K} from `draws`
/// simulated values keyed by `seed`.
pub fn crit_value(a: f64, j: usize, k: usize, alpha: f64, draws: usize, seed: u64) -> Result<f64> {
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::InvalidConfig(format!("weight a = {a} outside [0, 1]")));
    }
    let store = ChiSquareMixtureDraws::new(j, k, draws, seed)?;
    Ok(store.quantile(a, 1.0 - alpha))
}

/// Calibrated linear-combination weight for one distortion level.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LcCalibration {
    /// Weight a(gamma) in [0, 1].
    pub a: f64,
    /// Distortion level gamma this weight was solved for.
    pub gamma: f64,
    /// q(1 - alpha; a, J, K), the robust-set threshold.
    pub quantile: f64,
    pub draws: usize,
    pub seed: u64,
    /// True when a = 1 still leaves q(1 - alpha - gamma; a) below the
    /// chi-squared target.
    pub at_boundary: bool,
}

/// Granularity of the a(gamma) solve.
const A_RESOLUTION: f64 = 1e-4;

/// Solve q(1 - alpha - gamma; a, J, K) = chi2_{K, 1-alpha} for the weight a.
///
/// The search runs over the discrete grid a = i * 1e-4 and returns the
/// smallest grid value whose mixture quantile reaches the chi-squared
/// target, which makes a(gamma) exactly nondecreasing in gamma under the
/// shared draws. Returns a = 1 with `at_boundary` when no grid value
/// suffices.
pub fn solve_a(
    gamma: f64,
    alpha: f64,
    draws: &ChiSquareMixtureDraws,
) -> Result<LcCalibration> {
    if !(0.0..0.5).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("alpha = {alpha} outside (0, 0.5)")));
    }
    if gamma < 0.0 || gamma > 1.0 - alpha {
        return Err(Error::InvalidConfig(format!(
            "gamma = {gamma} outside [0, {}]",
            1.0 - alpha
        )));
    }
    let target = chi2_quantile(draws.k, 1.0 - alpha);
    let level = (1.0 - alpha - gamma).max(0.0);
    let steps = (1.0 / A_RESOLUTION).round() as usize;

    let reaches = |i: usize| draws.quantile(i as f64 * A_RESOLUTION, level) >= target;
    let (a, at_boundary) = if reaches(0) {
        (0.0, false)
    } else if !reaches(steps) {
        (1.0, true)
    } else {
        // Binary search for the smallest grid index satisfying the target.
        let (mut lo, mut hi) = (0usize, steps);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if reaches(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        (hi as f64 * A_RESOLUTION, false)
    };

    Ok(LcCalibration {
        a,
        gamma,
        quantile: draws.quantile(a, 1.0 - alpha),
        draws: draws.n_draws(),
        seed: draws.seed,
        at_boundary,
    })
}

/// Distortion-cutoff scan parameters.
#[derive(Debug, Clone, Copy)]
pub struct DistortionParams {
    pub alpha: f64,
    pub gamma_min: f64,
    pub gamma_step: f64,
    pub gamma_cap: f64,
}

impl DistortionParams {
    pub fn new(alpha: f64, gamma_min: f64) -> Self {
        DistortionParams {
            alpha,
            gamma_min,
            gamma_step: 0.01,
            gamma_cap: 1.0 - alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha = {} outside (0, 0.5)", self.alpha)));
        }
        if self.gamma_min < 0.001 {
            return Err(Error::InvalidConfig(format!(
                "gamma_min = {} below 0.001",
                self.gamma_min
            )));
        }
        if self.gamma_step <= 0.0 {
            return Err(Error::InvalidConfig("gamma_step must be positive".into()));
        }
        if self.gamma_cap < self.gamma_min || self.gamma_cap > 1.0 - self.alpha {
            return Err(Error::InvalidConfig(format!(
                "gamma_cap = {} outside [gamma_min, 1 - alpha]",
                self.gamma_cap
            )));
        }
        Ok(())
    }
}

/// Precomputed a(gamma) ladder for one (J, K): everything the distortion
/// scan needs that does not depend on the data.
#[derive(Debug, Clone)]
pub struct LcCalibrationTable {
    pub j: usize,
    pub k: usize,
    pub alpha: f64,
    pub gammas: Vec<f64>,
    pub levels: Vec<LcCalibration>,
    /// chi2_{K, 1-alpha}: threshold for Wald/Kleibergen/CS_P sets.
    pub chi2_k_crit: f64,
    /// chi2_{J, 1-alpha}: threshold for the AR set.
    pub chi2_j_crit: f64,
}

impl LcCalibrationTable {
    pub fn build(
        draws: &ChiSquareMixtureDraws,
        params: &DistortionParams,
    ) -> Result<LcCalibrationTable> {
        params.validate()?;
        let mut gammas = Vec::new();
        let mut g = params.gamma_min;
        while g <= params.gamma_cap + 1e-12 {
            gammas.push(g);
            g = params.gamma_min + params.gamma_step * gammas.len() as f64;
        }
        let levels = gammas
            .iter()
            .map(|&g| solve_a(g.min(1.0 - params.alpha), params.alpha, draws))
            .collect::<Result<Vec<_>>>()?;
        Ok(LcCalibrationTable {
            j: draws.j,
            k: draws.k,
            alpha: params.alpha,
            gammas,
            levels,
            chi2_k_crit: chi2_quantile(draws.k, 1.0 - params.alpha),
            chi2_j_crit: chi2_quantile(draws.j, 1.0 - params.alpha),
        })
    }

    /// Calibration at gamma_min, i.e. the CS_R weight and threshold.
    pub fn at_gamma_min(&self) -> &LcCalibration {
        &self.levels[0]
    }
}

/// Lazily built, immutable-after-construction cache of calibration objects
/// keyed by (J, K). Everything inside is a pure function of (seed, draws,
/// params), so concurrent lookups are deterministic no matter which thread
/// fills the cache first.
pub struct CalibrationStore {
    pub seed: u64,
    pub draws: usize,
    pub params: DistortionParams,
    draws_cache: Mutex<HashMap<(usize, usize), Arc<ChiSquareMixtureDraws>>>,
    table_cache: Mutex<HashMap<(usize, usize), Arc<LcCalibrationTable>>>,
}

impl CalibrationStore {
    pub fn new(seed: u64, draws: usize, params: DistortionParams) -> Result<Self> {
        params.validate()?;
        if draws < 10_000 {
            return Err(Error::InvalidConfig(format!(
                "need at least 10000 critical-value draws, got {draws}"
            )));
        }
        Ok(CalibrationStore {
            seed,
            draws,
            params,
            draws_cache: Mutex::new(HashMap::new()),
            table_cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn mixture_draws(&self, j: usize, k: usize) -> Result<Arc<ChiSquareMixtureDraws>> {
        if let Some(d) = self.draws_cache.lock().unwrap().get(&(j, k)) {
            return Ok(d.clone());
        }
        let built = Arc::new(ChiSquareMixtureDraws::new(j, k, self.draws, self.seed)?);
        let mut cache = self.draws_cache.lock().unwrap();
        Ok(cache.entry((j, k)).or_insert(built).clone())
    }

    /// Calibration at gamma_min only (enough for CS_R inversion).
    pub fn lc_calibration(&self, j: usize, k: usize) -> Result<LcCalibration> {
        let draws = self.mixture_draws(j, k)?;
        solve_a(self.params.gamma_min, self.params.alpha, &draws)
    }

    /// Full gamma ladder for the distortion-cutoff scan.
    pub fn distortion_table(&self, j: usize, k: usize) -> Result<Arc<LcCalibrationTable>> {
        if let Some(t) = self.table_cache.lock().unwrap().get(&(j, k)) {
            return Ok(t.clone());
        }
        let draws = self.mixture_draws(j, k)?;
        let built = Arc::new(LcCalibrationTable::build(&draws, &self.params)?);
        let mut cache = self.table_cache.lock().unwrap();
        Ok(cache.entry((j, k)).or_insert(built).clone())
    }
}
