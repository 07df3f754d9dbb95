//! Top-N selection, the representation distance and its expectation.
//!
//! For weights `alpha`, embeddings `x_i` (rows of `X`) and a selected index set
//! `I`, the context vector is `s = sum_{i in I} alpha_i x_i` and the
//! representation distance is `d = sum_{i not in I} |alpha_i x_i - s|`.
//! The expectation of `d` over a uniformly random `I` of size `N` has a closed
//! form (two variants are shipped) and is checked against exact enumeration or
//! Monte-Carlo sampling.

use std::str::FromStr;

use rand::seq::index;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::{compensated_sum, distance, norm, scaled_distance, Matrix};
use crate::normalization::WeightVector;
use crate::rng::substream;

/// Largest number of subsets the exact oracle will enumerate.
pub const EXACT_SUBSET_CAP: u128 = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionOrigin {
    TopN,
    Random,
    Explicit,
}

/// A sorted set of `N` distinct token indices out of `universe`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SelectionSet {
    indices: Vec<usize>,
    origin: SelectionOrigin,
    universe: usize,
}

impl SelectionSet {
    fn build(mut indices: Vec<usize>, universe: usize, origin: SelectionOrigin) -> Result<Self> {
        indices.sort_unstable();
        if indices.is_empty() || indices.len() > universe {
            return Err(Error::Range(format!(
                "selection size {} outside [1, {universe}]",
                indices.len()
            )));
        }
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Range("selection contains duplicate indices".into()));
        }
        if let Some(&i) = indices.last().filter(|&&i| i >= universe) {
            return Err(Error::Range(format!("index {i} outside [0, {universe})")));
        }
        Ok(Self {
            indices,
            origin,
            universe,
        })
    }

    pub fn explicit(indices: Vec<usize>, universe: usize) -> Result<Self> {
        Self::build(indices, universe, SelectionOrigin::Explicit)
    }

    /// Uniformly random `n`-subset of `0..universe`.
    pub fn random<R: rand::Rng + ?Sized>(universe: usize, n: usize, rng: &mut R) -> Result<Self> {
        if n == 0 || n > universe {
            return Err(Error::Range(format!("selection size {n} outside [1, {universe}]")));
        }
        Self::build(index::sample(rng, universe, n).into_vec(), universe, SelectionOrigin::Random)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn origin(&self) -> SelectionOrigin {
        self.origin
    }

    pub fn universe(&self) -> usize {
        self.universe
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.indices.len() == self.universe
    }

    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.universe];
        for &i in &self.indices {
            m[i] = true;
        }
        m
    }

    /// Indices not in the selection, ascending.
    pub fn complement(&self) -> Vec<usize> {
        let m = self.mask();
        (0..self.universe).filter(|&i| !m[i]).collect()
    }
}

/// Indices of the `n` largest weights; ties go to the lower index.
pub fn select_top_n(weights: &WeightVector, n: usize) -> Result<SelectionSet> {
    let w = weights.as_slice();
    if n == 0 || n > w.len() {
        return Err(Error::Range(format!("top-N size {n} outside [1, {}]", w.len())));
    }
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&i, &j| w[j].total_cmp(&w[i]));
    order.truncate(n);
    SelectionSet::build(order, w.len(), SelectionOrigin::TopN)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ContextVector(Vec<f64>);

impl ContextVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn check_shapes(x: &Matrix, weights: &WeightVector, universe: Option<usize>) -> Result<()> {
    if x.rows() != weights.len() {
        return Err(Error::Dimension(format!(
            "{} embeddings but {} weights",
            x.rows(),
            weights.len()
        )));
    }
    if let Some(u) = universe.filter(|&u| u != x.rows()) {
        return Err(Error::Dimension(format!(
            "selection over {u} tokens applied to {} embeddings",
            x.rows()
        )));
    }
    Ok(())
}

/// Weighted sum of the embeddings at `indices`.
fn weighted_sum(x: &Matrix, alpha: &[f64], indices: impl Iterator<Item = usize>) -> Vec<f64> {
    let mut s = vec![0.0; x.cols()];
    for i in indices {
        for (acc, v) in s.iter_mut().zip(x.row(i)) {
            *acc += alpha[i] * v;
        }
    }
    s
}

pub fn context_vector(x: &Matrix, weights: &WeightVector, sel: &SelectionSet) -> Result<ContextVector> {
    check_shapes(x, weights, Some(sel.universe))?;
    Ok(ContextVector(weighted_sum(x, weights.as_slice(), sel.indices.iter().copied())))
}

fn distance_with_mask(x: &Matrix, alpha: &[f64], mask: &[bool], s: &[f64]) -> f64 {
    compensated_sum(
        (0..x.rows())
            .filter(|&i| !mask[i])
            .map(|i| scaled_distance(alpha[i], x.row(i), s)),
    )
}

/// `sum_{i not in I} |alpha_i x_i - s|`.
pub fn representation_distance(x: &Matrix, weights: &WeightVector, sel: &SelectionSet) -> Result<f64> {
    let s = context_vector(x, weights, sel)?;
    Ok(distance_with_mask(x, weights.as_slice(), &sel.mask(), s.as_slice()))
}

/// Bound on the distance for a fixed selection, together with whether its second
/// bracket `alpha_N (L - N) - (1 - alpha_N)` is nonnegative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FixedBound {
    pub value: f64,
    pub bracket_nonnegative: bool,
}

pub fn fixed_set_bound(x: &Matrix, weights: &WeightVector, sel: &SelectionSet) -> Result<FixedBound> {
    check_shapes(x, weights, Some(sel.universe))?;
    if sel.is_full() {
        return Ok(FixedBound {
            value: 0.0,
            bracket_nonnegative: true,
        });
    }
    let alpha = weights.as_slice();
    let mask = sel.mask();
    let alpha_n: f64 = sel.indices.iter().map(|&i| alpha[i]).sum();
    let mut d1 = 0.0_f64;
    for i in (0..x.rows()).filter(|&i| !mask[i]) {
        for &j in &sel.indices {
            d1 = d1.max(distance(x.row(i), x.row(j)));
        }
    }
    let max_norm = sel.indices.iter().map(|&j| norm(x.row(j))).fold(0.0, f64::max);
    let rest = (x.rows() - sel.len()) as f64;
    let bracket = alpha_n * rest - (1.0 - alpha_n);
    Ok(FixedBound {
        value: (1.0 - alpha_n) * d1 + max_norm * bracket,
        bracket_nonnegative: bracket >= 0.0,
    })
}

/// Which algebraic form of the random-selection expectation to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FormulaVariant {
    /// `((L-N)/L) sum_i |(alpha_i + p) x_i - xbar|`, `p = N/(L-1)`.
    AsPrinted,
    /// `((L-N)/L) sum_i |alpha_i (1 + p) x_i - p xbar|`.
    #[default]
    Derived,
}

impl FromStr for FormulaVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as-printed" | "as_printed" => Ok(Self::AsPrinted),
            "derived" => Ok(Self::Derived),
            other => Err(Error::Input(format!(
                "unknown formula variant {other:?}; expected as-printed or derived"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClosedForm {
    pub value: f64,
    pub eps_bound: f64,
    /// Terms of the error bound skipped because their denominator vanished.
    pub degenerate_terms: usize,
}

/// Closed-form expected distance over uniformly random `N`-subsets, with the
/// accompanying error bound. `N = L` gives zero.
pub fn expected_distance_closed_form(
    x: &Matrix,
    weights: &WeightVector,
    n: usize,
    variant: FormulaVariant,
) -> Result<ClosedForm> {
    check_shapes(x, weights, None)?;
    let len = x.rows();
    if n == 0 || n > len {
        return Err(Error::Range(format!("N = {n} outside [1, {len}]")));
    }
    if n == len {
        return Ok(ClosedForm {
            value: 0.0,
            eps_bound: 0.0,
            degenerate_terms: 0,
        });
    }
    let alpha = weights.as_slice();
    let (lf, nf) = (len as f64, n as f64);
    let p = nf / (lf - 1.0);
    let scale = (lf - nf) / lf;
    let xbar = weighted_sum(x, alpha, 0..len);

    let mut terms = Vec::with_capacity(len);
    let mut buf = vec![0.0; x.cols()];
    for (i, xi) in x.iter_rows().enumerate() {
        for ((b, &v), &m) in buf.iter_mut().zip(xi).zip(&xbar) {
            *b = match variant {
                FormulaVariant::AsPrinted => (alpha[i] + p) * v - m,
                FormulaVariant::Derived => alpha[i] * (1.0 + p) * v - p * m,
            };
        }
        terms.push(norm(&buf));
    }
    let value = scale * compensated_sum(terms);

    let sq: Vec<f64> = x
        .iter_rows()
        .zip(alpha)
        .map(|(r, a)| {
            let n = a * norm(r);
            n * n
        })
        .collect();
    let sq_total = compensated_sum(sq.iter().copied());
    let mut eps_terms = Vec::with_capacity(len);
    let mut degenerate_terms = 0;
    for (i, xi) in x.iter_rows().enumerate() {
        // sum_{j != i} alpha_j x_j = xbar - alpha_i x_i
        for ((b, &v), &m) in buf.iter_mut().zip(xi).zip(&xbar) {
            *b = alpha[i] * v - p * (m - alpha[i] * v);
        }
        let den = norm(&buf);
        if den == 0.0 {
            degenerate_terms += 1;
            continue;
        }
        eps_terms.push(p * (sq_total - sq[i]).max(0.0) / den);
    }
    let eps_bound = 0.5 * (1.0 - nf / lf) * compensated_sum(eps_terms);
    Ok(ClosedForm {
        value,
        eps_bound,
        degenerate_terms,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum OracleMode {
    Exact,
    MonteCarlo { samples: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleEstimate {
    pub value: f64,
    pub stderr: f64,
    pub mode: OracleMode,
}

/// `C(L, N)` if it does not exceed `cap`, otherwise a partial count above `cap`.
fn binomial_capped(len: usize, n: usize, cap: u128) -> std::result::Result<u128, u128> {
    let k = n.min(len - n);
    let mut c: u128 = 1;
    for i in 0..k {
        // C(L, i+1) = C(L, i) * (L - i) / (i + 1), exact at every step
        c = c * (len - i) as u128 / (i + 1) as u128;
        if c > cap {
            return Err(c);
        }
    }
    Ok(c)
}

/// Calls `f` with every `n`-subset of `0..len` in lexicographic order.
fn for_each_combination(len: usize, n: usize, mut f: impl FnMut(&[usize])) {
    let mut idx: Vec<usize> = (0..n).collect();
    loop {
        f(&idx);
        let Some(pos) = (0..n).rev().find(|&p| idx[p] != p + len - n) else {
            return;
        };
        idx[pos] += 1;
        for q in pos + 1..n {
            idx[q] = idx[q - 1] + 1;
        }
    }
}

fn subset_distance(x: &Matrix, alpha: &[f64], subset: &[usize], mask: &mut [bool]) -> f64 {
    mask.iter_mut().for_each(|m| *m = false);
    for &i in subset {
        mask[i] = true;
    }
    let s = weighted_sum(x, alpha, subset.iter().copied());
    distance_with_mask(x, alpha, mask, &s)
}

/// Mean distance over random `N`-subsets, exactly or by sampling.
///
/// Monte-Carlo sample `i` draws its subset from substream `i` of `seed`, so the
/// estimate does not depend on the thread count.
pub fn expected_distance_oracle(
    x: &Matrix,
    weights: &WeightVector,
    n: usize,
    mode: OracleMode,
    seed: u64,
) -> Result<OracleEstimate> {
    check_shapes(x, weights, None)?;
    let len = x.rows();
    if n == 0 || n > len {
        return Err(Error::Range(format!("N = {n} outside [1, {len}]")));
    }
    let alpha = weights.as_slice();
    match mode {
        OracleMode::Exact => {
            let count = binomial_capped(len, n, EXACT_SUBSET_CAP).map_err(|subsets| {
                Error::Capacity {
                    subsets,
                    cap: EXACT_SUBSET_CAP,
                }
            })?;
            let mut values = Vec::with_capacity(count as usize);
            let mut mask = vec![false; len];
            for_each_combination(len, n, |subset| {
                values.push(subset_distance(x, alpha, subset, &mut mask));
            });
            Ok(OracleEstimate {
                value: compensated_sum(values) / count as f64,
                stderr: 0.0,
                mode,
            })
        }
        OracleMode::MonteCarlo { samples } => {
            if samples == 0 {
                return Err(Error::Range("monte_carlo needs at least one sample".into()));
            }
            let values: Vec<f64> = (0..samples as u64)
                .into_par_iter()
                .map_init(
                    || vec![false; len],
                    |mask, i| {
                        let mut rng = substream(seed, i);
                        let subset = index::sample(&mut rng, len, n).into_vec();
                        subset_distance(x, alpha, &subset, mask)
                    },
                )
                .collect();
            let (mean, sd) = mean_sd(&values);
            Ok(OracleEstimate {
                value: mean,
                stderr: sd / (samples as f64).sqrt(),
                mode,
            })
        }
    }
}

/// Sample mean and (n-1)-normalized standard deviation; zero spread for one value.
pub(crate) fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = compensated_sum(values.iter().copied()) / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = compensated_sum(values.iter().map(|v| (v - mean) * (v - mean))) / (n - 1.0);
    (mean, var.sqrt())
}

/// `sum_i |alpha_i x_i|`, the small-`N` approximation of the expected distance.
pub fn small_n_approx(x: &Matrix, weights: &WeightVector) -> Result<f64> {
    check_shapes(x, weights, None)?;
    Ok(compensated_sum(
        x.iter_rows()
            .zip(weights.as_slice())
            .map(|(r, a)| a * norm(r)),
    ))
}

/// Every distance quantity for one (weights, embeddings, N) instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceResult {
    pub seq_len: usize,
    pub top_n: usize,
    pub d_tilde: f64,
    pub fixed_bound: f64,
    pub bracket_nonnegative: bool,
    pub formula_variant: FormulaVariant,
    pub e_closed: f64,
    pub e_closed_as_printed: f64,
    pub e_closed_derived: f64,
    pub eps_bound: f64,
    pub degenerate_terms: usize,
    pub e_oracle: f64,
    pub oracle_stderr: f64,
    pub oracle_mode: OracleMode,
    pub small_n_approx: f64,
}

/// Evaluates the top-`n` selection of `weights` and the random-selection expectation.
pub fn analyze(
    x: &Matrix,
    weights: &WeightVector,
    n: usize,
    variant: FormulaVariant,
    oracle: OracleMode,
    seed: u64,
) -> Result<DistanceResult> {
    let sel = select_top_n(weights, n)?;
    let d_tilde = representation_distance(x, weights, &sel)?;
    let fixed = fixed_set_bound(x, weights, &sel)?;
    let printed = expected_distance_closed_form(x, weights, n, FormulaVariant::AsPrinted)?;
    let derived = expected_distance_closed_form(x, weights, n, FormulaVariant::Derived)?;
    let oracle_est = expected_distance_oracle(x, weights, n, oracle, seed)?;
    Ok(DistanceResult {
        seq_len: x.rows(),
        top_n: n,
        d_tilde,
        fixed_bound: fixed.value,
        bracket_nonnegative: fixed.bracket_nonnegative,
        formula_variant: variant,
        e_closed: match variant {
            FormulaVariant::AsPrinted => printed.value,
            FormulaVariant::Derived => derived.value,
        },
        e_closed_as_printed: printed.value,
        e_closed_derived: derived.value,
        eps_bound: derived.eps_bound,
        degenerate_terms: derived.degenerate_terms,
        e_oracle: oracle_est.value,
        oracle_stderr: oracle_est.stderr,
        oracle_mode: oracle,
        small_n_approx: small_n_approx(x, weights)?,
    })
}
