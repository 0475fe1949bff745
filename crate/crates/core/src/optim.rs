//! Derivative-free simplex minimizer used to polish the iterated-GLS
//! solutions of the GMM criterion and the conditional-F inner problem.

use nalgebra::DVector;

pub(crate) struct NmOptions {
    pub init_step: f64,
    pub ftol: f64,
    pub xtol: f64,
    pub max_iter: usize,
}

impl Default for NmOptions {
    fn default() -> Self {
        NmOptions {
            init_step: 0.05,
            ftol: 1e-13,
            xtol: 1e-10,
            max_iter: 4000,
        }
    }
}

pub(crate) struct NmResult {
    pub x: DVector<f64>,
    pub fx: f64,
    pub converged: bool,
}

/// Nelder-Mead with standard reflection/expansion/contraction/shrink
/// coefficients. The objective may return +inf for infeasible points.
pub(crate) fn nelder_mead<F>(mut f: F, x0: &DVector<f64>, opts: &NmOptions) -> NmResult
where
    F: FnMut(&DVector<f64>) -> f64,
{
    let n = x0.len();
    assert!(n >= 1);
    let mut eval = |x: &DVector<f64>| -> f64 {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    let mut simplex: Vec<(DVector<f64>, f64)> = Vec::with_capacity(n + 1);
    let fx0 = eval(x0);
    simplex.push((x0.clone(), fx0));
    for i in 0..n {
        let mut x = x0.clone();
        let step = opts.init_step * (1.0 + x[i].abs());
        x[i] += step;
        let fx = eval(&x);
        simplex.push((x, fx));
    }

    let mut converged = false;
    for _ in 0..opts.max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        let spread = (worst - best).abs();
        let xspread = (0..n)
            .map(|i| {
                simplex
                    .iter()
                    .map(|(x, _)| x[i])
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
            })
            .map(|(lo, hi)| hi - lo)
            .fold(0.0f64, f64::max);
        if spread <= opts.ftol * (1.0 + best.abs()) && xspread <= opts.xtol {
            converged = true;
            break;
        }

        // Centroid of all but the worst vertex.
        let mut centroid = DVector::zeros(n);
        for (x, _) in simplex.iter().take(n) {
            centroid += x;
        }
        centroid /= n as f64;

        let reflect = &centroid + (&centroid - &simplex[n].0);
        let f_reflect = eval(&reflect);

        if f_reflect < simplex[0].1 {
            let expand = &centroid + (&reflect - &centroid) * 2.0;
            let f_expand = eval(&expand);
            simplex[n] = if f_expand < f_reflect {
                (expand, f_expand)
            } else {
                (reflect, f_reflect)
            };
        } else if f_reflect < simplex[n - 1].1 {
            simplex[n] = (reflect, f_reflect);
        } else {
            let contract = if f_reflect < simplex[n].1 {
                &centroid + (&reflect - &centroid) * 0.5
            } else {
                &centroid + (&simplex[n].0 - &centroid) * 0.5
            };
            let f_contract = eval(&contract);
            if f_contract < simplex[n].1.min(f_reflect) {
                simplex[n] = (contract, f_contract);
            } else {
                // Shrink toward the best vertex.
                let best_x = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    v.0 = &best_x + (&v.0 - &best_x) * 0.5;
                    v.1 = eval(&v.0);
                }
            }
        }
    }

    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, fx) = simplex.swap_remove(0);
    NmResult { x, fx, converged }
}
