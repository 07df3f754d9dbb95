//! Two-sample Kolmogorov-Smirnov test and the critical top-N search.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};

/// Minimum number of samples per N on each side of the critical-N search.
pub const MIN_SAMPLES_PER_N: usize = 8;

const SERIES_TOL: f64 = 1e-10;
const MAX_SERIES_TERMS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub d: f64,
    pub p_value: f64,
    pub n1: usize,
    pub n2: usize,
}

fn sorted(sample: &[f64], name: &str) -> Result<Vec<f64>> {
    if sample.is_empty() {
        return Err(Error::Range(format!("{name} is empty")));
    }
    if let Some(v) = sample.iter().find(|v| !v.is_finite()) {
        return Err(Error::Range(format!("{name} contains {v}")));
    }
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Tail probability `P(K > lambda)` of the Kolmogorov distribution.
pub fn kolmogorov_tail(lambda: f64) -> f64 {
    // below 0.2 the tail is 1 to within 1e-12 and the series converges slowly
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=MAX_SERIES_TERMS {
        let kf = k as f64;
        let term = 2.0 * (-2.0 * kf * kf * lambda * lambda).exp();
        if term < SERIES_TOL {
            break;
        }
        sum += if k % 2 == 1 { term } else { -term };
    }
    sum.clamp(0.0, 1.0)
}

/// Asymptotic p-value for statistic `d` with sample sizes `n1`, `n2`.
pub fn ks_p_value(d: f64, n1: usize, n2: usize) -> f64 {
    let ne = (n1 * n2) as f64 / (n1 + n2) as f64;
    let sq = ne.sqrt();
    kolmogorov_tail((sq + 0.12 + 0.11 / sq) * d)
}

pub fn ks_two_sample(s1: &[f64], s2: &[f64]) -> Result<KsResult> {
    let a = sorted(s1, "first sample")?;
    let b = sorted(s2, "second sample")?;
    let (n1, n2) = (a.len(), b.len());
    let (f1, f2) = (n1 as f64, n2 as f64);
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0_f64;
    while i < n1 && j < n2 {
        let x = a[i].min(b[j]);
        while i < n1 && a[i] <= x {
            i += 1;
        }
        while j < n2 && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / f1 - j as f64 / f2).abs());
    }
    Ok(KsResult {
        d,
        p_value: ks_p_value(d, n1, n2),
        n1,
        n2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriticalNResult {
    pub n_crit: Option<usize>,
    pub tested_grid: Vec<usize>,
    pub p_per_n: Vec<f64>,
    pub d_per_n: Vec<f64>,
    pub alpha: f64,
}

/// Smallest `N` in `grid` whose empirical and expected samples are not
/// rejected as different at level `alpha` (p-value `>= alpha`).
pub fn critical_top_n(
    empirical: &BTreeMap<usize, Vec<f64>>,
    expected: &BTreeMap<usize, Vec<f64>>,
    grid: &[usize],
    alpha: f64,
) -> Result<CriticalNResult> {
    if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Input("N grid must be non-empty and strictly ascending".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Range(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let mut p_per_n = Vec::with_capacity(grid.len());
    let mut d_per_n = Vec::with_capacity(grid.len());
    for &n in grid {
        let (Some(e), Some(x)) = (empirical.get(&n), expected.get(&n)) else {
            return Err(Error::Input(format!("no samples for N = {n}")));
        };
        if e.len() < MIN_SAMPLES_PER_N || x.len() < MIN_SAMPLES_PER_N {
            return Err(Error::Input(format!(
                "N = {n} has {} empirical and {} expected samples; need {MIN_SAMPLES_PER_N} each",
                e.len(),
                x.len()
            )));
        }
        let ks = ks_two_sample(e, x)?;
        p_per_n.push(ks.p_value);
        d_per_n.push(ks.d);
    }
    let n_crit = grid
        .iter()
        .zip(&p_per_n)
        .find(|(_, &p)| p >= alpha)
        .map(|(&n, _)| n);
    Ok(CriticalNResult {
        n_crit,
        tested_grid: grid.to_vec(),
        p_per_n,
        d_per_n,
        alpha,
    })
}
