//! Geometric separability of selected tokens on a sphere.
//!
//! A selected token `i` is distinguishable when `|alpha_i x_i - s| <= r`, where
//! `r` is chosen so every non-selected token lies outside the ball around `s`.
//! The spreads `xi_i` bound the expected fraction of distinguishable tokens from
//! both sides.

use rayon::prelude::*;
use serde::Serialize;

use crate::distance::{context_vector, mean_sd, SelectionSet};
use crate::error::{Error, Result};
use crate::matrix::{distance, norm, scaled_distance, Matrix};
use crate::normalization::WeightVector;
use crate::rng::derive_seed;
use crate::synthetic::{sample_sphere, SyntheticConfig};

/// Radius `M` of the embedding sphere and minimum pairwise distance `delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SphereConfig {
    pub radius: f64,
    pub delta: f64,
}

impl SphereConfig {
    pub fn new(radius: f64, delta: f64) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::Range(format!("radius must be positive, got {radius}")));
        }
        if !(delta >= 0.0 && delta <= 2.0 * radius) {
            return Err(Error::Range(format!(
                "delta must lie in [0, 2*radius], got {delta}"
            )));
        }
        Ok(Self { radius, delta })
    }
}

/// Rescales every row to norm `m`.
pub fn project_to_sphere(x: &Matrix, m: f64) -> Result<Matrix> {
    if !(m.is_finite() && m > 0.0) {
        return Err(Error::Range(format!("radius must be positive, got {m}")));
    }
    let mut data = Vec::with_capacity(x.data().len());
    for (row, r) in x.iter_rows().enumerate() {
        let n = norm(r);
        if n == 0.0 {
            return Err(Error::DegenerateEmbedding { row });
        }
        data.extend(r.iter().map(|v| v * (m / n)));
    }
    Matrix::new(x.rows(), x.cols(), data)
}

/// Smallest distance between two distinct rows.
pub fn min_pairwise_separation(x: &Matrix) -> Result<f64> {
    if x.rows() < 2 {
        return Err(Error::Range("need at least two rows".into()));
    }
    let mut best = f64::INFINITY;
    for i in 0..x.rows() {
        for j in i + 1..x.rows() {
            best = best.min(distance(x.row(i), x.row(j)));
        }
    }
    Ok(best)
}

/// `min_{i not in I} |s - alpha_i x_i|`.
pub fn separation_radius(x: &Matrix, weights: &WeightVector, sel: &SelectionSet) -> Result<f64> {
    if sel.is_full() {
        return Err(Error::NoComplement);
    }
    let s = context_vector(x, weights, sel)?;
    let alpha = weights.as_slice();
    Ok(sel
        .complement()
        .into_iter()
        .map(|i| scaled_distance(alpha[i], x.row(i), s.as_slice()))
        .fold(f64::INFINITY, f64::min))
}

/// Number of selected tokens with `|alpha_i x_i - s| <= r`.
pub fn distinguishable_count(
    x: &Matrix,
    weights: &WeightVector,
    sel: &SelectionSet,
    r: f64,
) -> Result<usize> {
    if !(r >= 0.0) {
        return Err(Error::Range(format!("radius must be >= 0, got {r}")));
    }
    let s = context_vector(x, weights, sel)?;
    let alpha = weights.as_slice();
    Ok(sel
        .indices()
        .iter()
        .filter(|&&i| scaled_distance(alpha[i], x.row(i), s.as_slice()) <= r)
        .count())
}

/// How the pair sum over `j != k`, both different from `i`, is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum XiReading {
    /// Ordered pairs: `(sum_{j != i} a_j)^2 - sum_{j != i} a_j^2`.
    #[default]
    Ordered,
    /// Unordered pairs: half the ordered sum.
    Half,
}

/// Spread `xi_i` of every selected token, in selection order.
pub fn xi_spread(weights: &WeightVector, sel: &SelectionSet, cfg: &SphereConfig, reading: XiReading) -> Result<Vec<f64>> {
    if sel.universe() != weights.len() {
        return Err(Error::Dimension(format!(
            "selection over {} tokens applied to {} weights",
            sel.universe(),
            weights.len()
        )));
    }
    let alpha = weights.as_slice();
    let sel_alpha: Vec<f64> = sel.indices().iter().map(|&i| alpha[i]).collect();
    let total: f64 = sel_alpha.iter().sum();
    let total_sq: f64 = sel_alpha.iter().map(|a| a * a).sum();
    let m2 = cfg.radius * cfg.radius;
    let coeff = m2 - cfg.delta * cfg.delta / 2.0;
    sel_alpha
        .iter()
        .map(|&ai| {
            let sq = (total_sq - ai * ai).max(0.0);
            let lin = total - ai;
            let ordered = (lin * lin - sq).max(0.0);
            let pair = match reading {
                XiReading::Ordered => ordered,
                XiReading::Half => ordered / 2.0,
            };
            let radicand = m2 * sq + coeff * pair;
            let slack = 1e-12 * m2 * (sq + pair);
            if radicand < -slack {
                return Err(Error::AssumptionViolation(format!(
                    "spread radicand {radicand} < 0 (delta^2 > 2 M^2?)"
                )));
            }
            Ok(radicand.max(0.0).sqrt())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeparabilityBounds {
    /// `1 - sum xi / (r N)`, possibly negative.
    pub lower_raw: f64,
    /// `lower_raw` clamped to `[0, 1]`.
    pub lower: f64,
    pub upper: f64,
}

pub fn separability_bounds(xi: &[f64], r: f64, n: usize, m: f64) -> Result<SeparabilityBounds> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Range(format!("radius must be positive, got {r}")));
    }
    if n == 0 || xi.len() != n {
        return Err(Error::Dimension(format!("{} spreads for N = {n}", xi.len())));
    }
    let nf = n as f64;
    let lower_raw = 1.0 - xi.iter().sum::<f64>() / (r * nf);
    let upper = xi
        .iter()
        .map(|x| (-(r - x) * (r - x) / (16.0 * m * m)).exp())
        .sum::<f64>()
        / nf;
    Ok(SeparabilityBounds {
        lower_raw,
        lower: lower_raw.clamp(0.0, 1.0),
        upper,
    })
}

/// Where the ball radius comes from.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum RadiusRule {
    /// Distance from `s` to the closest weighted non-selected token.
    #[default]
    ClosestUnselected,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeometryResult {
    pub seq_len: usize,
    pub top_n: usize,
    pub r: f64,
    pub n_s: usize,
    pub ratio: f64,
    pub xi: Vec<f64>,
    pub xi_mean: f64,
    pub xi_max: f64,
    pub lower_bound_raw: f64,
    pub lower_bound: f64,
    pub upper_bound: f64,
}

/// Separability of the selection `sel` under `sphere`.
pub fn analyze(
    x: &Matrix,
    weights: &WeightVector,
    sel: &SelectionSet,
    sphere: &SphereConfig,
    reading: XiReading,
    rule: RadiusRule,
) -> Result<GeometryResult> {
    let r = match rule {
        RadiusRule::ClosestUnselected => separation_radius(x, weights, sel)?,
        RadiusRule::Fixed(r) => r,
    };
    let n_s = distinguishable_count(x, weights, sel, r)?;
    let xi = xi_spread(weights, sel, sphere, reading)?;
    let b = separability_bounds(&xi, r, sel.len(), sphere.radius)?;
    let n = sel.len() as f64;
    Ok(GeometryResult {
        seq_len: x.rows(),
        top_n: sel.len(),
        r,
        n_s,
        ratio: n_s as f64 / n,
        xi_mean: xi.iter().sum::<f64>() / n,
        xi_max: xi.iter().copied().fold(0.0, f64::max),
        xi,
        lower_bound_raw: b.lower_raw,
        lower_bound: b.lower,
        upper_bound: b.upper,
    })
}

/// Monte-Carlo mean of `N_s / N` over embedding draws, next to the averaged bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeparabilityEstimate {
    pub seq_len: usize,
    pub dim: usize,
    pub top_n: usize,
    pub draws: usize,
    pub mean_ratio: f64,
    pub stderr: f64,
    pub mean_lower_raw: f64,
    pub mean_lower: f64,
    pub mean_upper: f64,
}

impl SeparabilityEstimate {
    /// Whether the mean ratio lies within the bounds widened by `k` standard errors.
    pub fn within(&self, k: f64) -> bool {
        self.mean_lower - k * self.stderr <= self.mean_ratio
            && self.mean_ratio <= self.mean_upper + k * self.stderr
    }
}

/// Draws sphere embeddings from `cfg` (draw `i` reseeded from `seed` and `i`),
/// puts weight `1/N` on tokens `0..N`, and measures separability with the
/// closest-unselected radius. `delta` is the generator's `delta_min`.
pub fn separability_monte_carlo(
    cfg: &SyntheticConfig,
    n: usize,
    draws: usize,
    reading: XiReading,
    seed: u64,
) -> Result<SeparabilityEstimate> {
    cfg.validate()?;
    if draws == 0 {
        return Err(Error::Range("need at least one draw".into()));
    }
    let len = cfg.seq_len;
    if n == 0 || n >= len {
        return Err(Error::Range(format!("N = {n} must lie in [1, {len})")));
    }
    let mut w = vec![0.0; len];
    w[..n].fill(1.0 / n as f64);
    let weights = WeightVector::new(w)?;
    let sel = SelectionSet::explicit((0..n).collect(), len)?;
    let sphere = SphereConfig::new(cfg.radius, cfg.delta_min)?;

    let per_draw: Vec<GeometryResult> = (0..draws as u64)
        .into_par_iter()
        .map(|i| {
            let x = sample_sphere(&cfg.reseeded(derive_seed(seed, &[i])))?;
            analyze(&x, &weights, &sel, &sphere, reading, RadiusRule::ClosestUnselected)
        })
        .collect::<Result<_>>()?;
    let ratios: Vec<f64> = per_draw.iter().map(|g| g.ratio).collect();
    let (mean_ratio, sd) = mean_sd(&ratios);
    let d = draws as f64;
    Ok(SeparabilityEstimate {
        seq_len: len,
        dim: cfg.dim,
        top_n: n,
        draws,
        mean_ratio,
        stderr: sd / d.sqrt(),
        mean_lower_raw: per_draw.iter().map(|g| g.lower_bound_raw).sum::<f64>() / d,
        mean_lower: per_draw.iter().map(|g| g.lower_bound).sum::<f64>() / d,
        mean_upper: per_draw.iter().map(|g| g.upper_bound).sum::<f64>() / d,
    })
}
