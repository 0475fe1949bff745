// Temporary scratch harness for calibrating Monte Carlo test cells.
use mvmr_core::*;
use nalgebra::DVector;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(|s| s.as_str()).unwrap_or("all");

    let store = CalibrationStore::new(7, 100_000, DistortionParams::new(0.05, 0.01)).unwrap();

    if which == "all" || which == "size" {
        // C1: strong cell null rejection rates, statistic-only.
        let config = SimulationConfig {
            mu: 10.0,
            xi: 1.0,
            replicates: 1000,
            master_seed: 11,
            ..SimulationConfig::default()
        };
        let t0 = std::time::Instant::now();
        let opts = StudyOptions {
            methods: vec![Method::Ar, Method::Kleibergen, Method::LcRobust],
            compute_areas: false,
            compute_distortion: false,
        };
        let cells = run_study(&config, &[10.0], &[1.0], &opts, &store).unwrap();
        let c = &cells[0];
        println!("C1 strong cell ({} reps, {:?}):", c.replicates, t0.elapsed());
        for m in &c.methods {
            println!("  {} rejection at theta0 = {:.4}", m.method.as_str(), 1.0 - m.coverage);
        }
        println!("  mean min condF = {:.2}", c.mean_min_condf);
    }

    if which == "all" || which == "weak" {
        // C2: weak cell coverage with full grid inversion.
        let config = SimulationConfig {
            mu: 2.0,
            xi: 0.1,
            replicates: 500,
            master_seed: 12,
            ..SimulationConfig::default()
        };
        let t0 = std::time::Instant::now();
        let opts = StudyOptions {
            methods: vec![Method::Wald, Method::Ar, Method::Kleibergen, Method::LcRobust],
            compute_areas: true,
            compute_distortion: false,
        };
        let cells = run_study(&config, &[2.0], &[0.1], &opts, &store).unwrap();
        let c = &cells[0];
        println!("C2 weak cell ({} reps, {:?}):", c.replicates, t0.elapsed());
        println!("  ivw coverage = {:.4}, gmm coverage = {:.4}", c.ivw_coverage, c.gmm_coverage);
        for m in &c.methods {
            println!(
                "  {} coverage = {:.4} mean area = {:?}",
                m.method.as_str(),
                m.coverage,
                m.mean_area
            );
        }
        println!("  mean min condF = {:.2}", c.mean_min_condf);
    }

    if which == "all" || which == "screen" {
        // C3: tune a cell to mean min condF near 6.
        for (mu, xi) in [(9.0, 0.5), (10.0, 0.5), (11.0, 0.5), (10.0, 0.4), (12.0, 0.4)] {
            let config = SimulationConfig {
                mu,
                xi,
                replicates: 400,
                master_seed: 13,
                ..SimulationConfig::default()
            };
            let opts = StudyOptions {
                methods: vec![Method::Wald],
                compute_areas: false,
                compute_distortion: false,
            };
            let cells = run_study(&config, &[mu], &[xi], &opts, &store).unwrap();
            let c = &cells[0];
            let kept: Vec<_> = c.records.iter().filter(|r| r.min_condf >= 10.0).collect();
            let cov_all = c.ivw_coverage;
            let cov_kept = if kept.is_empty() {
                f64::NAN
            } else {
                kept.iter().filter(|r| r.ivw_covers).count() as f64 / kept.len() as f64
            };
            println!(
                "screen mu={mu} xi={xi}: mean minF = {:.2}, ivw cov all = {:.3}, kept = {:.3} ({} reps), wald cov all = {:.3}",
                c.mean_min_condf,
                cov_all,
                cov_kept,
                kept.len(),
                c.methods[0].coverage,
            );
        }
    }

    if which == "all" || which == "distortion" {
        // C4: distortion cutoff medians.
        for (mu, xi, seed) in [(10.0, 1.0, 14), (2.0, 0.1, 15)] {
            let config = SimulationConfig {
                mu,
                xi,
                replicates: 100,
                master_seed: seed,
                ..SimulationConfig::default()
            };
            let t0 = std::time::Instant::now();
            let opts = StudyOptions {
                methods: vec![],
                compute_areas: false,
                compute_distortion: true,
            };
            let cells = run_study(&config, &[mu], &[xi], &opts, &store).unwrap();
            let c = &cells[0];
            println!(
                "C4 mu={mu} xi={xi}: median gamma = {:?}, mean = {:?}, undet = {:?} ({:?})",
                c.median_gamma_hat,
                c.mean_gamma_hat,
                c.undetermined_rate,
                t0.elapsed()
            );
        }
    }

    if which == "all" || which == "koh" {
        // C7: overdispersion kappa^2 tuning at the strong cell.
        for kappa2 in [2.0, 4.0, 6.0] {
            let config = SimulationConfig {
                mu: 10.0,
                xi: 1.0,
                overdispersion_kappa2: kappa2,
                replicates: 500,
                master_seed: 16,
                ..SimulationConfig::default()
            };
            let opts = StudyOptions {
                methods: vec![Method::Kleibergen, Method::KleibergenOh, Method::Ar],
                compute_areas: false,
                compute_distortion: false,
            };
            let cells = run_study(&config, &[10.0], &[1.0], &opts, &store).unwrap();
            let c = &cells[0];
            println!("C7 kappa2={kappa2}:");
            for m in &c.methods {
                println!("  {} coverage = {:.4}", m.method.as_str(), m.coverage);
            }
        }
    }

    if which == "all" || which == "condf" {
        // Conditional F chi-squared mean at xi = 0 over 2000 reps.
        let config = SimulationConfig {
            mu: 5.0,
            xi: 0.0,
            replicates: 2000,
            master_seed: 17,
            ..SimulationConfig::default()
        };
        let mut sum = 0.0;
        let mut n = 0;
        let mut ar_sum = 0.0;
        for rep in 0..config.replicates {
            let d = simulate_dataset(&config, 0, rep as u64).unwrap();
            let f = conditional_f(&d.summary, 0).unwrap();
            sum += f.f_stat * 3.0; // (J-K+1) F
            ar_sum += ar_stat(&DVector::from_vec(config.theta0.clone()), &d.summary).unwrap();
            n += 1;
        }
        println!(
            "condf: mean (J-K+1)F at xi=0 = {:.3} (target 3), AR mean = {:.3} (target 4) over {n} reps",
            sum / n as f64,
            ar_sum / n as f64
        );
    }
}
