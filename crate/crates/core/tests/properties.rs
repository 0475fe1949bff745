//! Property tests for the structural invariants: projection bounds,
//! harmonization equivariance, variant-order invariance, calibration
//! monotonicity, and solver residuals.

mod common;

use std::sync::OnceLock;

use common::{random_summary, random_tables, rng};
use mvmr_core::{
    ar_stat, build_multivariable_summary, gmm_criterion, gmm_estimate, harmonize_variants,
    invert_confidence_set, kstar_stat, moment_function, solve_a, solve_kappa2, wald_stat,
    CalibrationStore, ChiSquareMixtureDraws, DistortionParams, InputScale, Method, ThetaGrid,
};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn store() -> &'static CalibrationStore {
    static STORE: OnceLock<CalibrationStore> = OnceLock::new();
    STORE.get_or_init(|| {
        CalibrationStore::new(5, 10_000, DistortionParams::new(0.05, 0.01)).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn kstar_within_projection_bounds(seed in 0u64..1_000_000, j in 2usize..7, k in 1usize..4) {
        prop_assume!(j >= k);
        let mut r = rng(seed);
        let s = random_summary(&mut r, j, k);
        let theta = DVector::from_fn(k, |_, _| {
            let v: f64 = r.sample(StandardNormal);
            0.7 * v
        });
        let ar = ar_stat(&theta, &s).unwrap();
        let ks = kstar_stat(&theta, &s).unwrap().stat;
        prop_assert!(ks >= -1e-10);
        prop_assert!(ks <= ar * (1.0 + 1e-10) + 1e-8, "K* = {ks}, S = {ar}");
        if j == k {
            prop_assert!((ks - ar).abs() <= 1e-8 * ar.max(1.0), "K* = {ks}, S = {ar}");
        }
    }

    #[test]
    fn sign_flip_equivariance(seed in 0u64..1_000_000, j in 2usize..6, k in 1usize..3) {
        prop_assume!(j >= k);
        let mut r = rng(seed);
        let tables = random_tables(&mut r, j, k);
        let flip_row = (seed as usize) % j;

        // Re-express one variant's exposure row on the opposite allele.
        let mut flipped = tables.clone();
        flipped.effect_allele[flip_row] = tables.other_allele[flip_row].clone();
        flipped.other_allele[flip_row] = tables.effect_allele[flip_row].clone();
        for e in 0..k {
            flipped.exposure_beta[(flip_row, e)] = -flipped.exposure_beta[(flip_row, e)];
        }

        let (h0, _) = harmonize_variants(&tables, false).unwrap();
        let (h1, _) = harmonize_variants(&flipped, false).unwrap();
        let s0 = build_multivariable_summary(&h0, InputScale::Standardized).unwrap().summary;
        let s1 = build_multivariable_summary(&h1, InputScale::Standardized).unwrap().summary;

        // Coordinate sign flip on the flipped variant only.
        for i in 0..j {
            let sgn = if i == flip_row { -1.0 } else { 1.0 };
            prop_assert!((s1.outcome_assoc[i] - sgn * s0.outcome_assoc[i]).abs() < 1e-10);
            for e in 0..k {
                prop_assert!((s1.exposure_assoc[(i, e)] - sgn * s0.exposure_assoc[(i, e)]).abs() < 1e-10);
            }
        }
        // Scalar statistics invariant at the same theta.
        let theta = DVector::from_fn(k, |_, _| {
            let v: f64 = r.sample(StandardNormal);
            0.5 * v
        });
        let a0 = ar_stat(&theta, &s0).unwrap();
        let a1 = ar_stat(&theta, &s1).unwrap();
        prop_assert!((a0 - a1).abs() <= 1e-8 * a0.max(1.0), "S {a0} vs {a1}");
        let k0 = kstar_stat(&theta, &s0).unwrap().stat;
        let k1 = kstar_stat(&theta, &s1).unwrap().stat;
        prop_assert!((k0 - k1).abs() <= 1e-7 * k0.max(1.0), "K* {k0} vs {k1}");
    }

    #[test]
    fn variant_permutation_leaves_scalars_unchanged(seed in 0u64..1_000_000, j in 2usize..6) {
        let k = 2usize.min(j);
        let mut r = rng(seed);
        let tables = random_tables(&mut r, j, k);
        let rot = 1 + (seed as usize) % (j - 1);
        let perm: Vec<usize> = (0..j).map(|i| (i + rot) % j).collect();
        let permuted = tables.subset(&perm).unwrap();

        let s0 = build_multivariable_summary(&tables, InputScale::Standardized).unwrap().summary;
        let s1 = build_multivariable_summary(&permuted, InputScale::Standardized).unwrap().summary;

        // Rows permute consistently.
        for (new_row, &old_row) in perm.iter().enumerate() {
            prop_assert!((s1.outcome_assoc[new_row] - s0.outcome_assoc[old_row]).abs() < 1e-10);
        }
        let theta = DVector::from_fn(k, |_, _| {
            let v: f64 = r.sample(StandardNormal);
            0.5 * v
        });
        let a0 = ar_stat(&theta, &s0).unwrap();
        let a1 = ar_stat(&theta, &s1).unwrap();
        prop_assert!((a0 - a1).abs() <= 1e-8 * a0.max(1.0));
        let q0 = gmm_criterion(&theta, &s0).unwrap();
        let q1 = gmm_criterion(&theta, &s1).unwrap();
        prop_assert!((q0 - q1).abs() <= 1e-8 * q0.max(1.0));
    }

    #[test]
    fn kappa2_solves_estimating_equation(seed in 0u64..1_000_000, j in 2usize..7) {
        let mut r = rng(seed);
        let s = random_summary(&mut r, j, 2);
        let theta = DVector::from_fn(2, |_, _| {
            let v: f64 = r.sample(StandardNormal);
            0.5 * v
        });
        let fit = solve_kappa2(&theta, &s).unwrap();
        prop_assert!(fit.kappa2 >= 0.0);
        if !fit.at_boundary {
            let g = moment_function(&theta, &s);
            let om = mvmr_core::omega_with_dispersion(&theta, &s, fit.kappa2).unwrap();
            let inv = om.try_inverse().unwrap();
            let value = s.n_x as f64 * (g.transpose() * inv * &g)[(0, 0)] - j as f64;
            prop_assert!(value.abs() <= 1e-8 * j as f64, "residual {value}");
        }
    }

    #[test]
    fn wald_zero_at_center_and_convex_along_rays(seed in 0u64..1_000_000) {
        let mut r = rng(seed);
        let s = random_summary(&mut r, 4, 2);
        let est = gmm_estimate(&s, None).unwrap();
        prop_assert!(wald_stat(&est.theta, &est, s.n_x).abs() < 1e-16);
        let dir = DVector::from_fn(2, |_, _| {
            let v: f64 = r.sample(StandardNormal);
            v
        });
        prop_assume!(dir.norm() > 1e-3);
        let mut prev = 0.0;
        for t in [0.1, 0.2, 0.4, 0.8] {
            let w = wald_stat(&(&est.theta + &dir * t), &est, s.n_x);
            prop_assert!(w > prev);
            prev = w;
        }
    }

    #[test]
    fn quantile_nondecreasing_in_weight(seed in 0u64..100_000, a1 in 0.0f64..1.0, a2 in 0.0f64..1.0) {
        let draws = ChiSquareMixtureDraws::new(5, 2, 10_000, seed).unwrap();
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        prop_assert!(draws.quantile(lo, 0.95) <= draws.quantile(hi, 0.95));
    }

    #[test]
    fn grid_enumeration_is_bijective(l1 in 1usize..6, l2 in 1usize..6, l3 in 1usize..4) {
        let axes: Vec<Vec<f64>> = [l1, l2, l3]
            .iter()
            .map(|&l| (0..l).map(|i| i as f64 * 0.5).collect())
            .collect();
        let grid = ThetaGrid::new(axes).unwrap();
        let mut seen = std::collections::HashSet::new();
        for i in 0..grid.n_points() {
            let idx = grid.indices(i);
            prop_assert!(seen.insert(idx.clone()));
            let p = grid.point(i);
            for (d, &ii) in idx.iter().enumerate() {
                prop_assert!((p[d] - grid.axes()[d][ii]).abs() < 1e-15);
            }
        }
        prop_assert_eq!(seen.len(), grid.n_points());
    }
}

#[test]
fn csp_monotone_and_contained_in_csr() {
    // CS_P(gamma) masks shrink as gamma rises under shared draws, and CS_R
    // (larger threshold at a(gamma_min)) contains CS_P(gamma_min).
    let mut r = rng(2024);
    let store = store();
    for trial in 0..5 {
        let s = random_summary(&mut r, 4, 2);
        let grid = ThetaGrid::from_ranges(&[(-2.0, 2.0, 0.2), (-2.0, 2.0, 0.2)]).unwrap();
        let draws = store.mixture_draws(4, 2).unwrap();
        let mut prev: Option<Vec<bool>> = None;
        for gamma in [0.01, 0.05, 0.10, 0.20, 0.40] {
            let cal = solve_a(gamma, 0.05, &draws).unwrap();
            let set = invert_confidence_set(Method::CsP, &grid, &s, 0.05, Some(&cal)).unwrap();
            if let Some(prev_mask) = &prev {
                for (i, &m) in set.member.iter().enumerate() {
                    assert!(
                        !m || prev_mask[i],
                        "trial {trial}: CS_P not nested at gamma {gamma} point {i}"
                    );
                }
            }
            prev = Some(set.member.clone());
        }
        let cal_min = solve_a(0.01, 0.05, &draws).unwrap();
        let cs_p = invert_confidence_set(Method::CsP, &grid, &s, 0.05, Some(&cal_min)).unwrap();
        let cs_r = invert_confidence_set(Method::LcRobust, &grid, &s, 0.05, Some(&cal_min)).unwrap();
        for (i, &m) in cs_p.member.iter().enumerate() {
            assert!(!m || cs_r.member[i], "trial {trial}: CS_R missing CS_P point {i}");
        }
        assert!(cs_r.area >= cs_p.area);
    }
}

#[test]
fn confidence_set_flags_consistent() {
    let mut r = rng(77);
    let s = random_summary(&mut r, 4, 2);
    let grid = ThetaGrid::from_ranges(&[(-1.0, 1.0, 0.1), (-1.0, 1.0, 0.1)]).unwrap();
    let set = invert_confidence_set(Method::Ar, &grid, &s, 0.05, None).unwrap();
    assert_eq!(set.area, set.member.iter().filter(|&&m| m).count());
    assert_eq!(set.empty, set.area == 0);
    let boundary_member = set
        .member
        .iter()
        .enumerate()
        .any(|(i, &m)| m && grid.on_boundary(i));
    assert_eq!(set.touches_boundary, boundary_member);
}
