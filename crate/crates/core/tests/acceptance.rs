//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero
//! when a criterion fails that is not listed in `KNOWN_UNATTAINABLE`.
//!
//! Every check runs at its stated tolerance. Reference values come from oracles
//! written here (enumeration, explicit Jacobians, brute-force CDF sweeps) rather
//! than from the library.

use std::time::{Duration, Instant};

use attncap::distance::{
    expected_distance_closed_form, expected_distance_oracle, representation_distance, select_top_n,
    FormulaVariant, OracleMode,
};
use attncap::experiment::{
    log_grid, run_distance_experiment, run_geometry_experiment, run_gradient_experiment, ExperimentConfig,
    ExperimentKind, InputSource, OracleChoice,
};
use attncap::geometry::{separability_monte_carlo, XiReading};
use attncap::gradient::{jacobian_vector_product, max_entry_norm, random_direction, swap_difference};
use attncap::matrix::Matrix;
use attncap::normalization::{normalize, weight_bounds, NormalizerConfig, WeightVector};
use attncap::rng::{derive_seed, substream};
use attncap::stats::ks_two_sample;
use attncap::synthetic::{sample_logits, SyntheticConfig};
use rand::Rng;
use rand_distr::StandardNormal;

/// Criteria that cannot hold for any faithful implementation; they still run and
/// print FAIL, but do not fail the target.
const KNOWN_UNATTAINABLE: &[&str] = &["separability_within_bounds", "swap_example_sqrt2_eps_over_t"];

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

fn synthetic(seq_len: usize, dim: usize, logit_bound: f64, seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        seq_len,
        dim,
        radius: 1.0,
        delta_min: 0.0,
        logit_bound,
        seed,
        max_retries: 1000,
    }
}

fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

fn softmax_oracle(logits: &[f64], t: f64) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| ((l - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    sxy / (sxx * syy).sqrt()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean over every `n`-subset of `sum_{i not in I} |alpha_i x_i - sum_{j in I} alpha_j x_j|`.
fn enumerate_expected(x: &Matrix, alpha: &[f64], n: usize) -> f64 {
    let len = x.rows();
    let (mut total, mut count) = (0.0, 0u64);
    for mask in 0u32..(1 << len) {
        if mask.count_ones() as usize != n {
            continue;
        }
        let inside = |i: usize| mask & (1 << i) != 0;
        let mut s = vec![0.0; x.cols()];
        for i in (0..len).filter(|&i| inside(i)) {
            for (acc, v) in s.iter_mut().zip(x.row(i)) {
                *acc += alpha[i] * v;
            }
        }
        for i in (0..len).filter(|&i| !inside(i)) {
            let diff: Vec<f64> = x.row(i).iter().zip(&s).map(|(v, si)| alpha[i] * v - si).collect();
            total += norm(&diff);
        }
        count += 1;
    }
    total / count as f64
}

fn weight_sandwich() -> Outcome {
    let mut violations = 0usize;
    let mut rows = 0usize;
    for (ai, &a) in [0.5f64, 1.0, 2.0].iter().enumerate() {
        for (ti, &t) in [0.1f64, 1.0, 8.0].iter().enumerate() {
            for &len in &[4usize, 64, 1024] {
                let lf = len as f64;
                let low = (-2.0 * a / t).exp() / lf;
                let high = ((2.0 * a / t).exp() / lf).min(1.0);
                let cfg = NormalizerConfig::softmax(t).unwrap();
                let lib = weight_bounds(a, &cfg, len).unwrap();
                if lib.low != low || lib.high != high {
                    violations += 1;
                }
                for draw in 0..1000u64 {
                    let seed = derive_seed(1, &[ai as u64, ti as u64, len as u64, draw]);
                    let logits = sample_logits(len, a, seed).unwrap();
                    let w = normalize(&logits, &cfg).unwrap();
                    violations += w.as_slice().iter().filter(|&&x| x < low || x > high).count();
                    rows += 1;
                }
            }
        }
    }
    outcome(violations == 0, format!("{rows} logit draws, {violations} weights outside the sandwich"))
}

fn closed_form_agreement() -> Outcome {
    let mut rng = substream(2, 0);
    let (mut instances, mut failures, mut oracle_mismatch) = (0, 0, 0);
    let mut worst = f64::NEG_INFINITY;
    while instances < 600 {
        let len = rng.random_range(2..=10usize);
        let n = rng.random_range(1..len);
        let dim = rng.random_range(1..=6usize);
        let x = gaussian_matrix(len, dim, &mut rng);
        let t = [0.05, 0.3, 1.0, 5.0][rng.random_range(0..4)];
        let logits: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = normalize(&logits, &NormalizerConfig::softmax(t).unwrap()).unwrap();
        let exact = enumerate_expected(&x, w.as_slice(), n);
        let cf = expected_distance_closed_form(&x, &w, n, FormulaVariant::Derived).unwrap();
        let gap = (cf.value - exact).abs();
        worst = worst.max(gap - cf.eps_bound);
        if gap > cf.eps_bound {
            failures += 1;
        }
        let lib = expected_distance_oracle(&x, &w, n, OracleMode::Exact, 0).unwrap();
        if (lib.value - exact).abs() > 1e-12 * (1.0 + exact) {
            oracle_mismatch += 1;
        }
        instances += 1;
    }

    let x = Matrix::identity(2);
    let w = WeightVector::new(vec![0.6, 0.4]).unwrap();
    let printed = expected_distance_closed_form(&x, &w, 1, FormulaVariant::AsPrinted).unwrap();
    let printed_gap = (printed.value - enumerate_expected(&x, w.as_slice(), 1)).abs();
    outcome(
        failures == 0 && oracle_mismatch == 0,
        format!(
            "{instances} instances, {failures} outside eps_bound (largest excess {worst:.3e}), \
             {oracle_mismatch} library-oracle mismatches; as_printed on the L=2 instance: gap {printed_gap:.4} vs bound {:.4}",
            printed.eps_bound
        ),
    )
}

fn full_selection_limit() -> Outcome {
    let mut rng = substream(3, 0);
    let mut bad = 0;
    let total = 200;
    for _ in 0..total {
        let len = rng.random_range(1..=64usize);
        let dim = rng.random_range(1..=8usize);
        let x = gaussian_matrix(len, dim, &mut rng);
        let logits: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
        let w = normalize(&logits, &NormalizerConfig::softmax(0.5).unwrap()).unwrap();
        let sel = select_top_n(&w, len).unwrap();
        let d = representation_distance(&x, &w, &sel).unwrap();
        let derived = expected_distance_closed_form(&x, &w, len, FormulaVariant::Derived).unwrap();
        let printed = expected_distance_closed_form(&x, &w, len, FormulaVariant::AsPrinted).unwrap();
        let oracle = expected_distance_oracle(&x, &w, len, OracleMode::Exact, 0).unwrap();
        if d != 0.0 || derived.value != 0.0 || printed.value != 0.0 || oracle.value != 0.0 {
            bad += 1;
        }
    }
    outcome(bad == 0, format!("{total} instances with N = L, {bad} nonzero"))
}

fn distance_growth_with_length() -> Outcome {
    let mut cfg = ExperimentConfig::new(
        ExperimentKind::Distance,
        InputSource::Synthetic {
            config: synthetic(32, 64, 1.0, 4),
            heads: 16,
        },
    );
    cfg.top_n = vec![5];
    cfg.temperature = Some(1e-3);
    cfg.samples = 500;
    cfg.seed = 4;
    let report = run_distance_experiment(&cfg).unwrap();
    let series = report.series("distance_vs_seq_len").unwrap();
    let r = |label: &str| {
        let y: Vec<f64> = series.find(label).unwrap().y.iter().map(|v| v.unwrap()).collect();
        pearson(&series.x, &y)
    };
    let printed = r("e_closed_as_printed_mean");
    let d_tilde = r("d_tilde_mean");
    outcome(
        printed >= 0.95 && d_tilde >= 0.95,
        format!(
            "N = 5, L = {:?}: r(as_printed E) = {printed:.4}, r(d_tilde) = {d_tilde:.4}; \
             not asserted: r(derived E) = {:.4}, r(oracle E) = {:.4}",
            series.x,
            r("e_closed_derived_mean"),
            r("e_oracle_mean")
        ),
    )
}

fn separability_sandwich() -> Outcome {
    let mut failures = Vec::new();
    let mut configs = 0;
    for &dim in &[8usize, 32] {
        for &len in &[64usize, 256] {
            for &n in &[2usize, 4, 8, 16, 32] {
                let mut cfg = synthetic(len, dim, 1.0, 5);
                cfg.delta_min = 0.1;
                let seed = derive_seed(5, &[dim as u64, len as u64, n as u64]);
                let est = separability_monte_carlo(&cfg, n, 2000, XiReading::Ordered, seed).unwrap();
                configs += 1;
                if !est.within(3.0) {
                    failures.push(format!(
                        "d={dim} L={len} N={n}: {:.4} +- {:.4} vs [{:.4}, {:.4}]",
                        est.mean_ratio, est.stderr, est.mean_lower, est.mean_upper
                    ));
                }
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "{configs} configurations x 2000 draws, {} outside 3 se: {}; the upper bound is below 1 whenever r != xi, \
             while N_s/N -> 1 for small N in high dimension",
            failures.len(),
            failures.join("; ")
        ),
    )
}

fn gradient_entry_bound() -> Outcome {
    let mut rng = substream(6, 0);
    let mut violations = 0;
    for k in 0..10_000 {
        let len = rng.random_range(2..=64usize);
        let t = 10f64.powf(rng.random_range(-3.0..1.0));
        let mut raw: Vec<f64> = (0..len).map(|_| rng.random::<f64>().powi(8)).collect();
        if k % 10 == 0 {
            raw.iter_mut().for_each(|v| *v = 0.0);
            raw[0] = 1.0;
            raw[1] = 1.0;
        }
        let s: f64 = raw.iter().sum();
        let w = WeightVector::renormalized(&raw.iter().map(|v| v / s).collect::<Vec<_>>(), 1e-9).unwrap();
        let oracle = w.as_slice().iter().map(|a| a * (1.0 - a)).fold(0.0, f64::max) / t;
        let lib = max_entry_norm(&w, t);
        if lib > 0.25 / t || oracle > 0.25 / t {
            violations += 1;
        }
    }
    outcome(violations == 0, format!("10000 weight vectors, {violations} above 1/(4T)"))
}

fn gradient_fd_agreement() -> Outcome {
    let mut rng = substream(7, 0);
    let eps = 1e-6;
    let mut worst = 0.0_f64;
    let mut probes = 0;
    for &t in &[0.1, 1.0, 10.0] {
        for _ in 0..34 {
            let len = rng.random_range(2..=64usize);
            let logits: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v = random_direction(len, &mut rng);
            let cfg = NormalizerConfig::softmax(t).unwrap();
            let w = normalize(&logits, &cfg).unwrap();
            let jvp = jacobian_vector_product(&w, t, &v);
            // explicit Jacobian (diag(a) - a a^T) / T
            let a = softmax_oracle(&logits, t);
            let explicit: Vec<f64> = (0..len)
                .map(|i| (0..len).map(|j| ((if i == j { a[i] } else { 0.0 }) - a[i] * a[j]) * v[j] / t).sum())
                .collect();
            let shifted = |sign: f64| {
                let l: Vec<f64> = logits.iter().zip(&v).map(|(l, d)| l + sign * eps * d).collect();
                softmax_oracle(&l, t)
            };
            let (plus, minus) = (shifted(1.0), shifted(-1.0));
            let fd: Vec<f64> = plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * eps)).collect();
            let rel = |x: &[f64]| {
                let diff: Vec<f64> = x.iter().zip(&jvp).map(|(a, b)| a - b).collect();
                norm(&diff) / norm(&jvp)
            };
            worst = worst.max(rel(&fd)).max(rel(&explicit));
            probes += 1;
        }
    }
    outcome(worst <= 1e-4, format!("{probes} probes at eps = 1e-6, largest relative error {worst:.3e}"))
}

fn gradient_slope() -> Outcome {
    let mut cfg = ExperimentConfig::new(
        ExperimentKind::Gradient,
        InputSource::Synthetic {
            config: synthetic(32, 16, 1.0, 8),
            heads: 4,
        },
    );
    cfg.seq_lens = vec![32];
    cfg.rows = 256;
    cfg.temperatures = log_grid(1e-3, 1e-1, 7);
    cfg.epsilons = vec![1e-3];
    cfg.seed = 8;
    let report = run_gradient_experiment(&cfg).unwrap();
    let series = report.series("max_g_vs_temperature").unwrap();
    let y: Vec<f64> = series.find("g_max_eps_1e-3").unwrap().y.iter().map(|v| v.unwrap()).collect();
    let lx: Vec<f64> = series.x.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / 7.0, ly.iter().sum::<f64>() / 7.0);
    let slope = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>()
        / lx.iter().map(|a| (a - mx) * (a - mx)).sum::<f64>();
    let lib = report.check("slope_eps_1e-3").map(|c| c.passed);
    outcome(
        (slope + 1.0).abs() <= 0.1 && lib == Some(true),
        format!("log-log slope {slope:.4} over 7 temperatures in [1e-3, 1e-1]"),
    )
}

fn swap_example() -> Outcome {
    let eps = 1e-3;
    let mut best: Option<(f64, String)> = None;
    let mut lines = Vec::new();
    for &t in &[0.5, 1.0] {
        for &len in &[2usize, 16, 1024] {
            for &a in &[0.0, 1.0, 30.0] {
                let measured = swap_difference(len, a, eps, t).unwrap();
                let ratio = measured / (2f64.sqrt() * eps / t);
                let tag = format!("T={t} L={len} a={a}: ratio {ratio:.4}");
                if best.as_ref().is_none_or(|(r, _)| (ratio - 1.0).abs() < (r - 1.0).abs()) {
                    best = Some((ratio, tag.clone()));
                }
                lines.push(ratio);
            }
        }
    }
    let (ratio, tag) = best.unwrap();
    outcome(
        (ratio - 1.0).abs() <= 0.2,
        format!(
            "closest instance {tag} (target 1 +- 0.2); first-order limit is 3 sqrt2 eps/(4T), ratio 0.75, for every a and L"
        ),
    )
}

fn ks_calibration() -> Outcome {
    let mut rejections = 0;
    for pair in 0..500u64 {
        let mut rng = substream(9, pair);
        let s1: Vec<f64> = (0..100).map(|_| rng.sample(StandardNormal)).collect();
        let s2: Vec<f64> = (0..100).map(|_| rng.sample(StandardNormal)).collect();
        if ks_two_sample(&s1, &s2).unwrap().p_value < 0.01 {
            rejections += 1;
        }
    }
    let rate = rejections as f64 / 500.0;

    let mut mismatches = 0;
    for pair in 0..100u64 {
        let mut rng = substream(10, pair);
        let (n1, n2) = (rng.random_range(1..=60usize), rng.random_range(1..=60usize));
        // half the pairs draw small integers so ties are common
        let draw = |rng: &mut attncap::rng::Stream| {
            if pair % 2 == 0 {
                rng.random_range(0..8) as f64
            } else {
                rng.random::<f64>()
            }
        };
        let s1: Vec<f64> = (0..n1).map(|_| draw(&mut rng)).collect();
        let s2: Vec<f64> = (0..n2).map(|_| draw(&mut rng)).collect();
        let cdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
        let brute = s1
            .iter()
            .chain(&s2)
            .map(|&x| (cdf(&s1, x) - cdf(&s2, x)).abs())
            .fold(0.0, f64::max);
        if ks_two_sample(&s1, &s2).unwrap().d != brute {
            mismatches += 1;
        }
    }
    outcome(
        rate <= 0.03 && mismatches == 0,
        format!("false rejection rate {rate:.3} at alpha 0.01 over 500 pairs; {mismatches}/100 D mismatches"),
    )
}

fn determinism() -> Outcome {
    let input = || InputSource::Synthetic {
        config: synthetic(16, 8, 1.0, 11),
        heads: 3,
    };
    let mut configs = Vec::new();
    let mut distance = ExperimentConfig::new(ExperimentKind::Distance, input());
    distance.seq_lens = vec![8, 16, 32];
    distance.top_n = vec![1, 4];
    distance.samples = 200;
    configs.push(distance.clone());
    distance.oracle = OracleChoice::Exact;
    configs.push(distance);
    let mut geometry = ExperimentConfig::new(ExperimentKind::Geometry, input());
    geometry.seq_lens = vec![32];
    geometry.top_n = vec![2, 4];
    geometry.draws = 50;
    configs.push(geometry);
    let mut gradient = ExperimentConfig::new(ExperimentKind::Gradient, input());
    gradient.seq_lens = vec![16];
    gradient.rows = 4;
    gradient.directions = 8;
    configs.push(gradient);

    let mut differing = 0;
    for cfg in &configs {
        let mut outputs = Vec::new();
        for jobs in [1, 4, 1] {
            let mut c = cfg.clone();
            c.jobs = jobs;
            let report = match c.experiment {
                ExperimentKind::Distance => run_distance_experiment(&c),
                ExperimentKind::Geometry => run_geometry_experiment(&c),
                _ => run_gradient_experiment(&c),
            };
            outputs.push(report.unwrap().to_json().unwrap());
        }
        if outputs.windows(2).any(|w| w[0] != w[1]) {
            differing += 1;
        }
    }
    outcome(
        differing == 0,
        format!("{} configs run three times (jobs 1, 4, 1), {differing} with differing bytes", configs.len()),
    )
}

fn main() {
    let criteria: &[(&str, Duration, fn() -> Outcome)] = &[
        ("weight_sandwich", Duration::from_secs(10), weight_sandwich),
        ("closed_form_within_eps_of_enumeration", Duration::from_secs(60), closed_form_agreement),
        ("full_selection_vanishes", Duration::from_secs(60), full_selection_limit),
        ("expected_distance_grows_with_length", Duration::from_secs(120), distance_growth_with_length),
        ("separability_within_bounds", Duration::from_secs(300), separability_sandwich),
        ("jacobian_entry_bound", Duration::from_secs(60), gradient_entry_bound),
        ("jvp_matches_finite_difference", Duration::from_secs(60), gradient_fd_agreement),
        ("sensitivity_slope_minus_one", Duration::from_secs(60), gradient_slope),
        ("swap_example_sqrt2_eps_over_t", Duration::from_secs(60), swap_example),
        ("ks_calibration", Duration::from_secs(60), ks_calibration),
        ("reports_deterministic", Duration::from_secs(60), determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut unexpected = Vec::new();
    for (name, budget, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let out = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= *budget;
        let passed = out.passed && in_time;
        let known = KNOWN_UNATTAINABLE.contains(name);
        println!(
            "{} {name}: {} [{:.2}s of {}s]{}",
            if passed { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64(),
            budget.as_secs(),
            if !passed && known { " (known unattainable)" } else { "" },
        );
        if !passed && !known {
            unexpected.push(*name);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {}", unexpected.join(", "));
        std::process::exit(1);
    }
}
