#![allow(clippy::excessive_precision)]

//! Acceptance suite: ten numbered checks, one PASS/FAIL line each.
//!
//! Normal-distribution oracles here use statrs' `erfc` and a bisection
//! inverse, independent of the library's own CDF and quantile code.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use statrs::function::erf::erfc;

use rcp1::certificates::{knapsack_lower, RegionSystem};
use rcp1::conformal::{calibrate_rcp1, predict_sets};
use rcp1::risk::{run_risk_experiment, synthetic_segmentation, RiskExperimentConfig};
use rcp1::rng::stream_rng;
use rcp1::scores::{augment_once, ScoreKind, ScoreTable};
use rcp1::simulate::{
    beta_coverage_samples, halfspace_smooth_prob, halfspace_worst_case, pushforward_worst_coverage,
    run_coverage_experiment, ExperimentConfig, HalfspaceModel,
};
use rcp1::{lower_bound, upper_bound, SmoothingSpec, ThreatModel};

fn oracle_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn oracle_quantile(p: f64) -> f64 {
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if oracle_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn oracle_lower(beta: f64, sigma: f64, r: f64) -> f64 {
    oracle_cdf(oracle_quantile(beta) - r / sigma)
}

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn gaussian(sigma: f64) -> SmoothingSpec {
    SmoothingSpec::gaussian(sigma).unwrap()
}

fn l2(r: f64) -> ThreatModel {
    ThreatModel::l2(r).unwrap()
}

fn closed_form_certificate() -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..10 {
        let beta = (i as f64 + 0.5) / 10.0;
        for j in 0..10 {
            let sigma = 0.1 * (j + 1) as f64;
            for k in 0..10 {
                let r = 0.1 * k as f64;
                let got = lower_bound(beta, &gaussian(sigma), &l2(r)).unwrap();
                worst = worst.max((got - oracle_lower(beta, sigma, r)).abs());
            }
        }
    }
    // 40-digit references.
    let references = [
        (0.9, 0.5, 0.25, 0.782_760_919_572_694_805_37),
        (0.5, 0.25, 0.06, 0.405_165_128_302_204_153_33),
        (0.999, 0.12, 0.37, 0.502_752_270_122_236_032_21),
        (0.05, 1.0, 0.5, 0.015_982_275_968_578_404_377),
        (0.7, 0.25, 0.5, 0.070_025_721_430_546_267_514),
        (0.9, 0.25, 0.37, 0.421_347_112_835_466_915_8),
    ];
    let mut worst_ref: f64 = 0.0;
    for (beta, sigma, r, want) in references {
        let got = lower_bound(beta, &gaussian(sigma), &l2(r)).unwrap();
        worst_ref = worst_ref.max((got - want).abs());
    }
    outcome(
        worst <= 1e-9 && worst_ref <= 1e-12,
        format!("max |err| grid {worst:.2e}, references {worst_ref:.2e}"),
    )
}

fn schemes() -> Vec<(SmoothingSpec, ThreatModel)> {
    vec![
        (gaussian(0.5), l2(0.25)),
        (SmoothingSpec::laplace(0.5).unwrap(), ThreatModel::l1(0.25).unwrap()),
        (SmoothingSpec::uniform(0.5).unwrap(), ThreatModel::l1(0.25).unwrap()),
    ]
}

fn convexity_and_monotonicity() -> Outcome {
    let n = 1000;
    let grid: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let mut violations = 0;
    let mut checked = 0;
    for (s, t) in schemes() {
        let values: Vec<f64> = grid.iter().map(|b| lower_bound(*b, &s, &t).unwrap()).collect();
        for i in 1..n {
            checked += 1;
            if values[i] < values[i - 1] - 1e-9 {
                violations += 1;
            }
        }
        // Midpoints of every symmetric pair around each grid point.
        for mid in 1..n - 1 {
            for h in 1..=mid.min(n - 1 - mid).min(50) {
                checked += 1;
                if values[mid] > 0.5 * (values[mid - h] + values[mid + h]) + 1e-9 {
                    violations += 1;
                }
            }
        }
    }
    outcome(violations == 0, format!("{violations} violations in {checked} checks"))
}

fn duality_and_round_trip() -> Outcome {
    let mut dual: f64 = 0.0;
    for (s, t) in schemes() {
        for i in 0..=100 {
            let b = i as f64 / 100.0;
            let up = upper_bound(b, &s, &t).unwrap();
            let lo = lower_bound(1.0 - b, &s, &t).unwrap();
            dual = dual.max((up - (1.0 - lo)).abs());
        }
    }
    let mut trip: f64 = 0.0;
    for (s, t) in schemes().into_iter().take(2) {
        for i in 1..=19 {
            let p = 0.05 * i as f64;
            let back = upper_bound(lower_bound(p, &s, &t).unwrap(), &s, &t).unwrap();
            trip = trip.max((back - p).abs());
        }
    }
    outcome(
        dual <= 1e-12 && trip <= 1e-9,
        format!("duality {dual:.2e}, round trip {trip:.2e}"),
    )
}

fn knapsack_oracle() -> Outcome {
    let (sigma, r) = (0.5, 0.25);
    let sys = RegionSystem::gaussian_shift(400, sigma, r).unwrap();
    let closed = |b: f64| lower_bound(b, &gaussian(sigma), &l2(r)).unwrap();
    let mut gap: f64 = 0.0;
    for i in 1..=9 {
        let beta = 0.1 * i as f64;
        gap = gap.max((knapsack_lower(beta, &sys).unwrap() - closed(beta)).abs());
    }
    // Slab-constant classifiers are a subset of all classifiers, so the
    // discrete minimum can only be higher. Probe between slab edges too.
    let mut lowest_excess = f64::INFINITY;
    for i in 1..400 {
        let beta = (i as f64 + 0.5) / 400.0;
        lowest_excess = lowest_excess.min(knapsack_lower(beta, &sys).unwrap() - closed(beta));
    }
    let valid = lowest_excess >= -1e-12;
    outcome(
        gap <= 2e-3 && valid,
        format!("max gap {gap:.2e}; min(discrete - closed) between edges {lowest_excess:.2e}"),
    )
}

fn halfspace_tightness() -> Outcome {
    let mut rng = stream_rng(2024, 5);
    let mut worst: f64 = 0.0;
    let mut below = true;
    for _ in 0..100 {
        let dim = rng.random_range(1..=32);
        let k = rng.random_range(2..=10);
        let spread = rng.random_range(0.0..2.0);
        let model = HalfspaceModel::random(&mut rng, dim, k, 1.0, spread).unwrap();
        let scaled = HalfspaceModel::new(
            model.weight.iter().map(|w| w * rng.random_range(0.2..5.0)).collect(),
            model.offsets.clone(),
            spread,
        )
        .unwrap();
        let (x, y) = scaled.sample(&mut rng);
        let sigma = rng.random_range(0.05..1.0);
        let r = rng.random_range(0.0..1.0);
        let z: f64 = rng.random_range(-3.0..3.0);
        let proj: f64 = scaled.weight.iter().zip(&x).map(|(w, v)| w * v).sum();
        let q = proj - scaled.offsets[y] - z * sigma * scaled.weight_norm();
        let beta = halfspace_smooth_prob(&scaled, &x, y, sigma, q).unwrap();
        let exact = halfspace_worst_case(&scaled, &x, y, sigma, q, r).unwrap();
        let cert = lower_bound(beta, &gaussian(sigma), &l2(r)).unwrap();
        worst = worst.max((exact - cert).abs());
        below &= cert <= exact + 1e-12;
    }
    outcome(worst <= 1e-9 && below, format!("max |worst case - certificate| {worst:.2e}"))
}

fn end_to_end_coverage() -> Outcome {
    let config = ExperimentConfig {
        dim: 16,
        n_labels: 10,
        n_calibration: 200,
        alpha: 0.1,
        sigma: 0.5,
        radius: 0.25,
        trials: 2000,
        ..Default::default()
    };
    let s = run_coverage_experiment(&config).unwrap();
    let rcp1 = s.rcp1_worst_coverage;
    let vanilla = s.vanilla_worst_coverage;
    let holds = rcp1.mean >= 0.9 - 3.0 * rcp1.se;
    let gap = vanilla.mean < 0.9 - 3.0 * vanilla.se;
    let above_bound = rcp1.mean >= s.rcp1_bound - 3.0 * rcp1.se && vanilla.mean >= s.vanilla_bound - 3.0 * vanilla.se;
    outcome(
        holds && gap && above_bound,
        format!(
            "RCP1 worst {:.4} (se {:.1e}, bound {:.4}, alpha' {:.4}); vanilla worst {:.4} (se {:.1e}, bound {:.4})",
            rcp1.mean, rcp1.se, s.rcp1_bound, s.adjusted_alpha, vanilla.mean, vanilla.se, s.vanilla_bound
        ),
    )
}

fn coverage_distribution() -> Outcome {
    let (n, alpha) = (200usize, 0.1);
    let draws = 1_000_000;
    let d = beta_coverage_samples(n, alpha, draws, 99).unwrap();
    let a = (1.0 - alpha) * (n + 1) as f64;
    let b = alpha * (n + 1) as f64;
    let sd = (a * b / ((a + b).powi(2) * (a + b + 1.0))).sqrt();
    let mean = d.summary().mean;
    let mean_ok = (mean - (1.0 - alpha)).abs() <= 3.0 * sd / (draws as f64).sqrt();
    let pushed = pushforward_worst_coverage(&d, &gaussian(0.5), &l2(0.25)).unwrap().summary();
    let floor = oracle_lower(1.0 - alpha, 0.5, 0.25);
    let jensen = pushed.mean >= floor - 3.0 * pushed.se;
    outcome(
        mean_ok && jensen,
        format!(
            "Beta mean {mean:.6} (tol {:.1e}); pushforward mean {:.6} vs c_down[1-alpha] {floor:.6}",
            3.0 * sd / (draws as f64).sqrt(),
            pushed.mean
        ),
    )
}

/// Augmented half-space scores for `n` fresh examples.
fn halfspace_table(model: &HalfspaceModel, n: usize, data_seed: u64, noise_seed: u64, sigma: f64) -> ScoreTable {
    let data: Vec<(Vec<f64>, usize)> = (0..n).map(|i| model.sample(&mut stream_rng(data_seed, i as u64))).collect();
    augment_once(n, model.dim(), &gaussian(sigma), noise_seed, |i, noise| {
        let z: Vec<f64> = data[i].0.iter().zip(noise).map(|(x, e)| x + e).collect();
        Ok::<_, rcp1::Error>(model.scores(&z))
    })
    .unwrap()
    .with_labels(data.iter().map(|d| d.1).collect())
    .unwrap()
}

fn nestedness() -> Outcome {
    let sigma = 0.5;
    let model = HalfspaceModel::random(&mut stream_rng(8, 0), 16, 10, 1.0, 1.0).unwrap();
    let cal = halfspace_table(&model, 200, 1, 2, sigma);
    let test = halfspace_table(&model, 1000, 3, 4, sigma);
    let radii = [0.0, 0.06, 0.12, 0.18, 0.25, 0.37, 0.5];
    let sets: Vec<_> = radii
        .iter()
        .map(|r| {
            let c = calibrate_rcp1(&cal, ScoreKind::Logit, 0.1, &gaussian(sigma), &l2(*r)).unwrap();
            predict_sets(&test, &c)
        })
        .collect();
    let mut breaks = 0;
    for w in sets.windows(2) {
        for (small, large) in w[0].iter().zip(&w[1]) {
            if !small.members.iter().all(|m| large.contains(*m)) {
                breaks += 1;
            }
        }
    }
    let sizes: Vec<String> = sets
        .iter()
        .map(|s| format!("{:.2}", s.iter().map(|x| x.len()).sum::<usize>() as f64 / s.len() as f64))
        .collect();
    outcome(breaks == 0, format!("{breaks} inclusion breaks; mean sizes {}", sizes.join(" <= ")))
}

fn risk_control() -> Outcome {
    let images = synthetic_segmentation(600, 16, 16, 77);
    let config = RiskExperimentConfig {
        n_calibration: 100,
        resamples: 1000,
        alpha: 0.15,
        sigma: 0.25,
        radius: 0.06,
        seed: 5,
        grid_points: 512,
    };
    let s = run_risk_experiment(&images, &config).unwrap();
    let valid = s.test_fnr.mean <= 0.15 + 3.0 * s.test_fnr.se;
    let dominates = s.splits.iter().all(|x| x.robust.outcome.lambda >= x.vanilla.outcome.lambda);
    let larger = s.robust_mask_proportion.mean > s.mask_proportion.mean;
    outcome(
        valid && dominates && larger,
        format!(
            "test FNR {:.4} (se {:.1e}); robust FNR {:.4}; mask prop {:.4} -> {:.4}; alpha_rob {:.4}; \
             per-image var {:.4}, resample var {:.2e}",
            s.test_fnr.mean,
            s.test_fnr.se,
            s.robust_test_fnr.mean,
            s.mask_proportion.mean,
            s.robust_mask_proportion.mean,
            s.alpha_robust,
            s.image_variance,
            s.test_fnr.sd.powi(2)
        ),
    )
}

fn saturation() -> Outcome {
    let sigma = 0.25;
    let model = HalfspaceModel::random(&mut stream_rng(10, 0), 16, 10, 1.0, 1.0).unwrap();
    let cal = halfspace_table(&model, 200, 11, 12, sigma);
    let test = halfspace_table(&model, 500, 13, 14, sigma);
    let mut ok = true;
    let mut notes = Vec::new();
    for r in [0.37, 0.5] {
        let c = calibrate_rcp1(&cal, ScoreKind::Logit, 0.1, &gaussian(sigma), &l2(r)).unwrap();
        let sets = predict_sets(&test, &c);
        let full = sets.iter().all(|s| s.len() == 10);
        ok &= c.vacuous && full;
        notes.push(format!("r={r}: alpha'={:.5}, vacuous={}, all sets full={full}", c.adjusted_alpha(), c.vacuous));
    }
    outcome(ok, notes.join("; "))
}

fn main() -> ExitCode {
    type Check = fn() -> Outcome;
    let criteria: [(&str, Check, Duration); 10] = [
        ("certificate closed form", closed_form_certificate, Duration::from_secs(1)),
        ("convexity and monotonicity", convexity_and_monotonicity, Duration::from_secs(5)),
        ("duality and round trip", duality_and_round_trip, Duration::from_secs(1)),
        ("knapsack oracle", knapsack_oracle, Duration::from_secs(5)),
        ("half-space tightness", halfspace_tightness, Duration::from_secs(1)),
        ("end-to-end worst-case coverage", end_to_end_coverage, Duration::from_secs(60)),
        ("coverage distribution", coverage_distribution, Duration::from_secs(10)),
        ("nestedness across radii", nestedness, Duration::from_secs(5)),
        ("risk control", risk_control, Duration::from_secs(60)),
        ("saturation", saturation, Duration::from_secs(5)),
    ];
    let mut failures = 0;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= *budget;
        let passed = result.passed && in_time;
        if !passed {
            failures += 1;
        }
        println!(
            "criterion {:>2} [{name}]: {} ({}; {:.2}s of {}s)",
            i + 1,
            if passed { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
