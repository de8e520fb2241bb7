//! Acceptance gate: one PASS/FAIL line per criterion, exit status 1 if any fail.

mod common;

use std::process::Command;
use std::time::{Duration, Instant};

use adaloc::adaptive::{
    candidate_streams, evaluate_candidate, free_run, run_experiment, run_experiment_with,
    run_fixed_radius, sweep_fixed, window_mean, AnalysisSettings, Phase, PoolMode,
};
use adaloc::config::ExperimentConfig;
use adaloc::enkf::ObservationBatch;
use adaloc::ensemble::Ensemble;
use adaloc::forest::{Forest, ForestConfig};
use adaloc::localization::{gc_taper, Radii};
use adaloc::metrics::{fit_beta, kl_beta_uniform, rank_histogram_projected, BetaParams};
use adaloc::rng::stream;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::{digamma, ln_gamma};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn settings(cfg: &ExperimentConfig) -> AnalysisSettings {
    AnalysisSettings {
        taper: cfg.localization.taper,
        filter: cfg.filter_config(),
        weights: cfg.weights(),
    }
}

fn gc_taper_criterion() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for c in [0.5, 1.0, 1.8257, 3.0, 7.3, 40.0] {
        for knot in [c, 2.0 * c] {
            let below = gc_taper(knot * (1.0 - 1e-14), c).unwrap();
            let above = gc_taper(knot * (1.0 + 1e-14), c).unwrap();
            worst = worst.max((below - above).abs());
        }
        ok &= gc_taper(0.0, c).unwrap() == 1.0;
        ok &= (gc_taper(c, c).unwrap() - 5.0 / 24.0).abs() <= 1e-12;
        ok &= (0..=400).all(|i| gc_taper(2.0 * c * (1.0 + i as f64 / 100.0), c).unwrap() == 0.0);
    }
    outcome(
        ok && worst <= 1e-12,
        format!("max knot jump {worst:.1e}; rho(0)=1, rho(c)=5/24, rho(z>=2c)=0: {ok}"),
    )
}

fn kl_quadrature_criterion() -> Outcome {
    let grid = [0.25, 0.5, 1.0, 2.0, 5.0];
    let mut worst: f64 = 0.0;
    for &a in &grid {
        for &b in &grid {
            let exact = kl_beta_uniform(BetaParams::new(a, b).unwrap()).unwrap();
            worst = worst.max((exact - common::kl_beta_uniform_quadrature(a, b)).abs());
        }
    }
    outcome(worst <= 1e-8, format!("max |closed form - quadrature| = {worst:.2e} over 25 points"))
}

fn filter_skill_criterion() -> Outcome {
    let mut good = 0;
    let mut notes = Vec::new();
    for seed in 1..=10 {
        let mut cfg = ExperimentConfig::default();
        cfg.experiment.seed = seed;
        let res = run_fixed_radius(&cfg, &Radii::Scalar(4.0)).unwrap();
        let analysis = window_mean(&res, 51, |r| r.analysis_rmse_true);
        let forecast = window_mean(&res, 51, |r| r.forecast_rmse_true);
        let free = common::mean(&free_run(&cfg).unwrap()[50..]);
        if analysis < forecast && analysis < 0.5 * free {
            good += 1;
        }
        notes.push(format!("{analysis:.3}/{forecast:.3}/{free:.2}"));
    }
    outcome(
        good >= 9,
        format!("{good}/10 seeds pass (analysis/forecast/free RMSE: {})", notes.join(" ")),
    )
}

/// Decision criterion recomputed from scratch for `H = I`: observation-space
/// RMSE of the analysis mean plus the KL of a moment-matched Beta.
fn recompute_cost(analysis: &Ensemble, obs: &ObservationBatch, w1: f64, w2: f64, ties: &mut impl Rng) -> f64 {
    let x = analysis.members();
    let (n, m) = x.shape();
    let mut se = 0.0;
    let mut ranks = Vec::with_capacity(n);
    for i in 0..n {
        let mean_i = (0..m).map(|e| x[(i, e)]).sum::<f64>() / m as f64;
        se += (mean_i - obs.y[i]).powi(2);
        let mut rank = 0;
        for e in 0..m {
            let v = x[(i, e)];
            if v < obs.y[i] || (v == obs.y[i] && ties.random_bool(0.5)) {
                rank += 1;
            }
        }
        ranks.push(rank);
    }
    let rmse = (se / n as f64).sqrt();
    let u: Vec<f64> = ranks.iter().map(|&r| (r as f64 + 0.5) / (m as f64 + 1.0)).collect();
    let mu = u.iter().sum::<f64>() / n as f64;
    let var = u.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let kl = if var > 0.0 {
        let t = mu * (1.0 - mu) / var - 1.0;
        let (a, b) = ((mu * t).max(1e-3), ((1.0 - mu) * t).max(1e-3));
        let ln_b = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
        (-ln_b + (a - 1.0) * digamma(a) + (b - 1.0) * digamma(b) - (a + b - 2.0) * digamma(a + b)).max(0.0)
    } else {
        10.0
    };
    w1 * rmse + w2 * kl
}

fn winner_recheck_criterion() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.model.n_cycles = 10;
    let s = settings(&cfg);
    let (w1, w2) = (cfg.criterion.w1, cfg.criterion.w2);
    let mut checked = 0;
    let mut mismatches = 0;
    let mut worst: f64 = 0.0;
    run_experiment_with(&cfg, |v| {
        let cov = v.forecast.covariance();
        let mut best = (f64::INFINITY, usize::MAX);
        for (i, r) in v.candidates.iter().enumerate() {
            let analysis = evaluate_candidate(v.forecast, &cov, v.obs, r, &s, v.cycle, i)
                .unwrap()
                .analysis;
            let mut ties = candidate_streams(cfg.experiment.seed, v.cycle, i).1;
            let cost = recompute_cost(&analysis, v.obs, w1, w2, &mut ties);
            worst = worst.max((cost - v.search.costs[i]).abs());
            if cost < best.0 {
                best = (cost, i);
            }
            checked += 1;
        }
        if best.1 != v.search.winner_index {
            mismatches += 1;
        }
    })
    .unwrap();
    outcome(
        mismatches == 0 && checked == 8 * 40,
        format!("{checked} (cycle, radius) pairs re-evaluated, {mismatches} winner mismatches, max cost diff {worst:.1e}"),
    )
}

fn test_phase_mean(results: &[adaloc::adaptive::CycleResult]) -> f64 {
    let v: Vec<f64> = results
        .iter()
        .filter(|r| r.phase == Phase::Testing)
        .map(|r| r.analysis_rmse_true)
        .collect();
    common::mean(&v)
}

fn adaptive_skill_criterion() -> Outcome {
    let mut ratios = Vec::new();
    let mut notes = Vec::new();
    for seed in 1..=5 {
        let mut cfg = ExperimentConfig::default();
        cfg.experiment.seed = seed;
        let adaptive = run_experiment(&cfg).unwrap();
        let fixed = run_fixed_radius(&cfg, &Radii::Scalar(4.0)).unwrap();
        let (a, f) = (test_phase_mean(&adaptive.results), test_phase_mean(&fixed));
        let radii: Vec<f64> = adaptive
            .results
            .iter()
            .filter(|r| r.phase == Phase::Testing)
            .map(|r| r.radius_used.summary().0)
            .collect();
        ratios.push(a / f);
        notes.push(format!("{:.3} (test radii mean {:.1})", a / f, common::mean(&radii)));
    }
    let med = common::median(ratios);
    outcome(
        med <= 1.10,
        format!("median adaptive/fixed-4 test RMSE ratio {med:.3} (limit 1.10); per seed: {}", notes.join(", ")),
    )
}

fn sweep_criterion() -> Outcome {
    let mut argmins = Vec::new();
    for seed in 1..=5 {
        let mut cfg = ExperimentConfig::default();
        cfg.experiment.seed = seed;
        argmins.push(sweep_fixed(&cfg).unwrap().best_radius);
    }
    let med = common::median(argmins.clone());
    outcome(
        (2.0..=8.0).contains(&med),
        format!("median argmin {med} (target [2, 8]); per seed {argmins:?}"),
    )
}

fn forest_criterion() -> Outcome {
    let data = |seed: u64, n: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 10, |_, _| rng.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(n, 1, |i, _| 3.0 * x[(i, 0)] + 0.5 * rng.sample::<f64, _>(StandardNormal));
        (x, y)
    };
    let (x, y) = data(11, 500);
    let (xt, yt) = data(12, 200);
    let cfg = ForestConfig {
        n_trees: 100,
        rng_seed: 7,
        ..Default::default()
    };
    let forest = Forest::fit(&x, &y, &cfg).unwrap();
    let pred = forest.predict_rows(&xt).unwrap();
    let ybar = yt.mean();
    let ss_res: f64 = (&pred - &yt).iter().map(|v| v * v).sum();
    let ss_tot: f64 = yt.iter().map(|v| (v - ybar).powi(2)).sum();
    let r2 = 1.0 - ss_res / ss_tot;
    let imp = forest.feature_importances();
    let top = (0..imp.len()).max_by(|&a, &b| imp[a].total_cmp(&imp[b])).unwrap();
    let again = Forest::fit(&x, &y, &cfg).unwrap().predict_rows(&xt).unwrap();
    let same = again == pred;
    outcome(
        r2 >= 0.8 && top == 0 && same,
        format!("R^2 {r2:.3}, top feature {top} (importance {:.3}), reproducible {same}", imp[0]),
    )
}

fn rank_calibration_criterion() -> Outcome {
    let (n_ens, n) = (25, 10_000);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let members = DMatrix::from_fn(n, n_ens, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let hist = rank_histogram_projected(&members, &y, &mut stream(3, &[])).unwrap();
    let fit = fit_beta(&hist).unwrap();
    let kl = kl_beta_uniform(fit).unwrap();
    outcome(
        (fit.alpha - 1.0).abs() < 0.1 && (fit.beta - 1.0).abs() < 0.1 && kl < 0.01,
        format!("alpha {:.4}, beta {:.4}, KL {kl:.2e}", fit.alpha, fit.beta),
    )
}

fn vector_mode_criterion() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.model.n_cycles = 200;
    cfg.pool.mode = PoolMode::VectorInTimeSpace;
    cfg.pool.n_trials = 30;
    cfg.pool.vector_range = [1, 40];
    let s = settings(&cfg);
    let mut cycles = 0;
    let mut bad = 0;
    let run = run_experiment_with(&cfg, |v| {
        cycles += 1;
        let cov = v.forecast.covariance();
        let costs: Vec<f64> = v
            .candidates
            .iter()
            .enumerate()
            .map(|(i, r)| {
                evaluate_candidate(v.forecast, &cov, v.obs, r, &s, v.cycle, i)
                    .map_or(f64::INFINITY, |o| o.criterion.value)
            })
            .collect();
        let w = v.search.winner_index;
        let is_min = costs.iter().all(|c| costs[w] <= *c);
        if v.candidates.len() != 30 || costs != v.search.costs || !is_min {
            bad += 1;
        }
    });
    let run = match run {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("run failed: {e}")),
    };
    let pool = cfg.pool();
    let in_range = run
        .results
        .iter()
        .filter(|r| r.phase == Phase::Testing)
        .all(|r| pool.contains(&r.radius_used));
    let test_cycles = run.results.iter().filter(|r| r.phase == Phase::Testing).count();
    outcome(
        bad == 0 && cycles == 160 && in_range && run.results.len() == 200,
        format!("{cycles} training cycles rechecked ({bad} bad), {test_cycles} test vectors in [1, 40]: {in_range}"),
    )
}

fn reproducibility_criterion() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_adaloc"))
            .args(["run-adaptive", "--seed", "12", "--out", out.to_str().unwrap()])
            .env_remove("ADALOC_OUT_DIR")
            .output()
            .unwrap()
            .status;
        assert!(status.success());
        std::fs::read(out.join("cycles.csv")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    outcome(a == b, format!("cycles.csv {} bytes, identical: {}", a.len(), a == b))
}

type Criterion = (u32, &'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "GC taper correctness", Duration::from_secs(1), gc_taper_criterion),
        (2, "KL closed form vs quadrature", Duration::from_secs(5), kl_quadrature_criterion),
        (3, "baseline filter skill", Duration::from_secs(60), filter_skill_criterion),
        (4, "winner search brute-force equivalence", Duration::from_secs(120), winner_recheck_criterion),
        (5, "adaptive-in-time vs hand-tuned radius 4", Duration::from_secs(600), adaptive_skill_criterion),
        (6, "sweep-fixed argmin in [2, 8]", Duration::from_secs(900), sweep_criterion),
        (7, "random forest benchmark", Duration::from_secs(30), forest_criterion),
        (8, "rank histogram calibration", Duration::from_secs(10), rank_calibration_criterion),
        (9, "vector-mode mechanics", Duration::from_secs(1200), vector_mode_criterion),
        (10, "end-to-end reproducibility", Duration::from_secs(1200), reproducibility_criterion),
    ];
    let mut failed = Vec::new();
    for (id, name, budget, check) in criteria {
        let start = Instant::now();
        let out = check();
        let elapsed = start.elapsed();
        let pass = out.pass && elapsed <= budget;
        println!(
            "{} [{id:>2}] {name}: {} ({:.2}s, budget {}s)",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
        if !pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all 10 criteria pass");
    } else {
        println!("acceptance: {} of 10 criteria fail: {failed:?}", failed.len());
        std::process::exit(1);
    }
}
