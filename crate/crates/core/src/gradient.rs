//! Softmax Jacobians, Jacobian-norm bounds and finite-difference sensitivity.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::{compensated_sum, distance, dot, norm, Matrix};
use crate::normalization::{normalize, NormalizerConfig, NormalizerKind, WeightVector};
use crate::rng::substream;

const POWER_ITERATIONS: usize = 200;
const POWER_TOL: f64 = 1e-12;

/// Default number of random unit directions per probe.
pub const DEFAULT_DIRECTIONS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JacobianResult {
    pub j: Matrix,
    /// Largest absolute entry, `max_i alpha_i (1 - alpha_i) / T`.
    pub max_entry_norm: f64,
    pub spectral_norm_estimate: f64,
    pub fro_norm: f64,
}

fn check_temperature(t: f64) -> Result<()> {
    if t.is_finite() && t > 0.0 {
        Ok(())
    } else {
        Err(Error::Range(format!("temperature must be positive, got {t}")))
    }
}

/// `J v` for the softmax Jacobian `(diag(alpha) - alpha alpha^T) / T`.
pub fn jacobian_vector_product(weights: &WeightVector, t: f64, v: &[f64]) -> Vec<f64> {
    let a = weights.as_slice();
    let av = dot(a, v);
    a.iter().zip(v).map(|(ai, vi)| ai * (vi - av) / t).collect()
}

/// `max_i alpha_i (1 - alpha_i) / T`.
pub fn max_entry_norm(weights: &WeightVector, t: f64) -> f64 {
    weights
        .as_slice()
        .iter()
        .map(|a| a * (1.0 - a) / t)
        .fold(0.0, f64::max)
}

/// Largest eigenvalue of the (symmetric, positive semidefinite) softmax
/// Jacobian by power iteration, never below the largest entry.
pub fn spectral_norm(weights: &WeightVector, t: f64) -> f64 {
    let len = weights.len();
    // the all-ones vector spans the null space, so start away from it
    let mut v: Vec<f64> = (0..len)
        .map(|i| ((i as f64 + 1.0) * 0.618_033_988_749_895).fract() - 0.5)
        .collect();
    let n0 = norm(&v);
    if n0 == 0.0 {
        return max_entry_norm(weights, t);
    }
    v.iter_mut().for_each(|x| *x /= n0);
    let mut lambda = 0.0_f64;
    for _ in 0..POWER_ITERATIONS {
        let w = jacobian_vector_product(weights, t, &v);
        let next = norm(&w);
        if next == 0.0 {
            lambda = 0.0;
            break;
        }
        v = w.into_iter().map(|x| x / next).collect();
        let done = (next - lambda).abs() <= POWER_TOL * next;
        lambda = next;
        if done {
            break;
        }
    }
    lambda.max(max_entry_norm(weights, t))
}

pub fn softmax_jacobian(weights: &WeightVector, t: f64) -> Result<JacobianResult> {
    check_temperature(t)?;
    let a = weights.as_slice();
    let len = a.len();
    let mut data = Vec::with_capacity(len * len);
    for i in 0..len {
        for j in 0..len {
            data.push(if i == j {
                a[i] * (1.0 - a[i]) / t
            } else {
                -(a[i] * a[j]) / t
            });
        }
    }
    let j = Matrix::new(len, len, data)?;
    let fro_norm = j.frobenius();
    Ok(JacobianResult {
        max_entry_norm: max_entry_norm(weights, t),
        spectral_norm_estimate: spectral_norm(weights, t).min(fro_norm.max(max_entry_norm(weights, t))),
        fro_norm,
        j,
    })
}

/// `min{F'max (1/(L Fmin) + Fmax/(L^2 Fmin^2)), sqrt 2}`.
pub fn general_jacobian_bound(f_max: f64, fprime_max: f64, f_min: f64, len: usize) -> Result<f64> {
    if !(f_min > 0.0) {
        return Err(Error::NormalizerContract(format!("min F must be positive, got {f_min}")));
    }
    if !(f_max >= 0.0 && fprime_max >= 0.0) || len == 0 {
        return Err(Error::Range("F max and F' max must be >= 0 and L >= 1".into()));
    }
    let l = len as f64;
    let value = fprime_max * (1.0 / (l * f_min) + f_max / (l * l * f_min * f_min));
    Ok(value.min(std::f64::consts::SQRT_2))
}

/// The general bound with `F`, `F'` extrema taken over the given logits.
pub fn general_jacobian_bound_for(logits: &[f64], cfg: &NormalizerConfig) -> Result<f64> {
    let t = cfg.temperature;
    if cfg.kind.id() == "softmax" || cfg.kind.id() == "exp" {
        if logits.is_empty() {
            return Err(Error::Range("F max and F' max must be >= 0 and L >= 1".into()));
        }
        // The bound is invariant to scaling F, so evaluate exp at l - max l:
        // Fmax = 1, F'max = 1/T, 1/Fmin = exp(spread / T). Overflow saturates at sqrt 2.
        let hi = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = logits.iter().copied().fold(f64::INFINITY, f64::min);
        let inv_min = ((hi - lo) / t).exp();
        let l = logits.len() as f64;
        let value = (inv_min / l + inv_min * inv_min / (l * l)) / t;
        return Ok(value.min(std::f64::consts::SQRT_2));
    }
    let mut f_min = f64::INFINITY;
    let (mut f_max, mut fp_max) = (0.0_f64, 0.0_f64);
    for &l in logits {
        let f = cfg.kind.eval(l, t);
        if !(f.is_finite() && f > 0.0) {
            return Err(Error::NormalizerContract(format!(
                "{}({l}) = {f} is not strictly positive and finite",
                cfg.kind.id()
            )));
        }
        f_min = f_min.min(f);
        f_max = f_max.max(f.abs());
        fp_max = fp_max.max(cfg.kind.derivative(l, t).abs());
    }
    general_jacobian_bound(f_max, fp_max, f_min, logits.len())
}

/// `min{1/(4T), sqrt 2}`.
pub fn softmax_grad_bound(t: f64) -> Result<f64> {
    check_temperature(t)?;
    Ok((0.25 / t).min(std::f64::consts::SQRT_2))
}

/// Logit pair whose top two entries trade places: `(0,..,0, a, a+eps)` and
/// `(0,..,0, a+2eps, a)`.
pub fn swap_pair(len: usize, a: f64, eps: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if len < 2 {
        return Err(Error::Range("the swap construction needs L >= 2".into()));
    }
    let mut first = vec![0.0; len];
    let mut second = vec![0.0; len];
    first[len - 2] = a;
    first[len - 1] = a + eps;
    second[len - 2] = a + 2.0 * eps;
    second[len - 1] = a;
    Ok((first, second))
}

/// `|softmax(l1) - softmax(l2)|` for the swap pair at temperature `t`.
pub fn swap_difference(len: usize, a: f64, eps: f64, t: f64) -> Result<f64> {
    let (l1, l2) = swap_pair(len, a, eps)?;
    let cfg = NormalizerConfig::softmax(t)?;
    let w1 = normalize(&l1, &cfg)?;
    let w2 = normalize(&l2, &cfg)?;
    Ok(distance(w1.as_slice(), w2.as_slice()))
}

/// Unit direction `(2 e_second - e_top) / sqrt 5` through the two largest logits.
pub fn swap_direction(logits: &[f64]) -> Option<Vec<f64>> {
    if logits.len() < 2 {
        return None;
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&i, &j| logits[j].total_cmp(&logits[i]));
    let mut d = vec![0.0; logits.len()];
    let s5 = 5f64.sqrt();
    d[order[0]] = -1.0 / s5;
    d[order[1]] = 2.0 / s5;
    Some(d)
}

/// Uniform direction on the unit sphere in `R^len`.
pub fn random_direction<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityResult {
    pub temperature: f64,
    pub epsilon: f64,
    /// Largest finite-difference ratio over all probed directions.
    pub g: f64,
    pub g_random: f64,
    /// Ratio along the swap direction; absent for `L < 2`.
    pub g_swap: Option<f64>,
    pub directions_probed: usize,
    /// Largest `|J d|` over the same directions.
    pub analytic_max: f64,
    pub theoretical_bound: f64,
}

/// `|alpha(l + eps d) - alpha(l)| / eps` along unit direction `d`.
///
/// For softmax with a moderate step the increment is evaluated as
/// `alpha_i (z_i - zbar) / (1 + zbar)` with `z = expm1(eps d / T)` and
/// `zbar = sum alpha_j z_j`, which equals the plain difference of the two
/// weight vectors but does not cancel when one weight is close to 1.
pub fn directional_sensitivity(logits: &[f64], base: &WeightVector, cfg: &NormalizerConfig, eps: f64, dir: &[f64]) -> Result<f64> {
    let t = cfg.temperature;
    let step = dir.iter().fold(0.0_f64, |m, d| m.max((eps * d / t).abs()));
    if cfg.kind == NormalizerKind::Softmax && step < 1.0 {
        let a = base.as_slice();
        let z: Vec<f64> = dir.iter().map(|d| (eps * d / t).exp_m1()).collect();
        let zbar = compensated_sum(a.iter().zip(&z).map(|(ai, zi)| ai * zi));
        let diff: Vec<f64> = a
            .iter()
            .zip(&z)
            .map(|(ai, zi)| ai * (zi - zbar) / (1.0 + zbar))
            .collect();
        return Ok(norm(&diff) / eps);
    }
    let moved: Vec<f64> = logits.iter().zip(dir).map(|(l, d)| l + eps * d).collect();
    let w = normalize(&moved, cfg)?;
    Ok(distance(w.as_slice(), base.as_slice()) / eps)
}

/// Finite-difference sensitivity of softmax at `logits`: the maximum over
/// `num_directions` random unit directions (direction `k` from substream `k`
/// of `seed`) and the swap direction.
pub fn fd_sensitivity(logits: &[f64], t: f64, eps: f64, num_directions: usize, seed: u64) -> Result<SensitivityResult> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::Range(format!("epsilon must be positive, got {eps}")));
    }
    if num_directions == 0 {
        return Err(Error::Range("need at least one direction".into()));
    }
    let cfg = NormalizerConfig::new(NormalizerKind::Softmax, t)?;
    let base = normalize(logits, &cfg)?;
    let len = logits.len();
    let random: Vec<(f64, f64)> = (0..num_directions as u64)
        .into_par_iter()
        .map(|k| {
            let dir = random_direction(len, &mut substream(seed, k));
            let g = directional_sensitivity(logits, &base, &cfg, eps, &dir)?;
            Ok((g, norm(&jacobian_vector_product(&base, t, &dir))))
        })
        .collect::<Result<_>>()?;
    let g_random = random.iter().map(|p| p.0).fold(0.0, f64::max);
    let mut analytic_max = random.iter().map(|p| p.1).fold(0.0, f64::max);
    let g_swap = match swap_direction(logits) {
        Some(dir) => {
            analytic_max = analytic_max.max(norm(&jacobian_vector_product(&base, t, &dir)));
            Some(directional_sensitivity(logits, &base, &cfg, eps, &dir)?)
        }
        None => None,
    };
    Ok(SensitivityResult {
        temperature: t,
        epsilon: eps,
        g: g_random.max(g_swap.unwrap_or(0.0)),
        g_random,
        g_swap,
        directions_probed: num_directions + usize::from(g_swap.is_some()),
        analytic_max,
        theoretical_bound: softmax_grad_bound(t)?,
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Input("need at least two (x, y) points".into()));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::Input("log-log fit needs positive values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Input("x values are all equal".into()));
    }
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::sample_logits;
    use proptest::prelude::*;

    fn w(v: &[f64]) -> WeightVector {
        WeightVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn jacobian_of_uniform_pair() {
        let r = softmax_jacobian(&w(&[0.5, 0.5]), 1.0).unwrap();
        assert_eq!(r.j.data(), &[0.25, -0.25, -0.25, 0.25]);
        assert_eq!(r.max_entry_norm, 0.25);
        assert!((r.spectral_norm_estimate - 0.5).abs() < 1e-12);
        assert!((r.fro_norm - 0.5).abs() < 1e-15);
    }

    #[test]
    fn jacobian_of_one_hot_is_zero() {
        let r = softmax_jacobian(&w(&[0.0, 1.0, 0.0]), 0.3).unwrap();
        assert!(r.j.data().iter().all(|&v| v == 0.0));
        assert_eq!(r.spectral_norm_estimate, 0.0);
        assert!(softmax_jacobian(&w(&[1.0]), 0.0).is_err());
    }

    #[test]
    fn jacobian_scales_with_temperature() {
        let logits = sample_logits(7, 2.0, 5).unwrap();
        let a = normalize(&logits, &NormalizerConfig::softmax(1.0).unwrap()).unwrap();
        let j1 = softmax_jacobian(&a, 1.0).unwrap();
        let j2 = softmax_jacobian(&a, 2.0).unwrap();
        for (x, y) in j1.j.data().iter().zip(j2.j.data()) {
            assert_eq!(x / 2.0, *y);
        }
    }

    #[test]
    fn general_bound_examples() {
        assert_eq!(general_jacobian_bound(3.0, 0.0, 3.0, 5).unwrap(), 0.0);
        assert_eq!(general_jacobian_bound(1.0, 1.0, 1.0, 1).unwrap(), std::f64::consts::SQRT_2);
        let e = 1f64.exp();
        assert_eq!(general_jacobian_bound(e, e, 1.0 / e, 4).unwrap(), std::f64::consts::SQRT_2);
        assert!(matches!(
            general_jacobian_bound(1.0, 1.0, 0.0, 4),
            Err(Error::NormalizerContract(_))
        ));
        let cfg = NormalizerConfig::softmax(1.0).unwrap();
        assert_eq!(general_jacobian_bound_for(&[1.0, -1.0, 0.0, 0.0], &cfg).unwrap(), std::f64::consts::SQRT_2);

        // unshifted extrema agree where they are representable
        let logits: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin() * 0.5).collect();
        let t = 20.0;
        let f: Vec<f64> = logits.iter().map(|l| (l / t).exp()).collect();
        let (fmin, fmax) = (f.iter().copied().fold(f64::INFINITY, f64::min), f.iter().copied().fold(0.0, f64::max));
        let direct = general_jacobian_bound(fmax, fmax / t, fmin, 64).unwrap();
        let shifted = general_jacobian_bound_for(&logits, &NormalizerConfig::softmax(t).unwrap()).unwrap();
        assert!((direct - shifted).abs() <= 1e-12 * direct, "{direct} vs {shifted}");
        let exp = general_jacobian_bound_for(&logits, &NormalizerConfig::from_id("exp", t).unwrap()).unwrap();
        assert_eq!(exp, shifted);

        // exp(l / T) underflows here; the bound saturates instead of failing
        let cold = NormalizerConfig::softmax(1e-3).unwrap();
        assert_eq!(general_jacobian_bound_for(&[1.0, -1.0], &cold).unwrap(), std::f64::consts::SQRT_2);
    }

    #[test]
    fn softmax_bound_examples() {
        assert_eq!(softmax_grad_bound(1.0).unwrap(), 0.25);
        assert_eq!(softmax_grad_bound(0.01).unwrap(), std::f64::consts::SQRT_2);
        assert!(softmax_grad_bound(1e12).unwrap() < 1e-12);
        assert!(softmax_grad_bound(-1.0).is_err());
    }

    #[test]
    fn saturated_logits_have_no_sensitivity() {
        let logits = [0.0, 0.0, 40.0];
        let r = fd_sensitivity(&logits, 1.0, 1e-3, 16, 1).unwrap();
        assert!(r.g < 1e-6, "{}", r.g);
        assert_eq!(r.directions_probed, 17);
    }

    #[test]
    fn uniform_pair_along_antidiagonal() {
        let logits = [0.0, 0.0];
        let cfg = NormalizerConfig::softmax(1.0).unwrap();
        let base = normalize(&logits, &cfg).unwrap();
        let dir = [1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt()];
        let g = directional_sensitivity(&logits, &base, &cfg, 1e-6, &dir).unwrap();
        let jv = norm(&jacobian_vector_product(&base, 1.0, &dir));
        assert!((jv - 0.5).abs() < 1e-15);
        assert!((g - 0.5).abs() < 1e-6);
    }

    #[test]
    fn swap_difference_small_eps_limit() {
        // two-way softmax: the gap is 3 sqrt(2) eps / (4 T) as eps -> 0
        for t in [0.5, 1.0] {
            let eps = 1e-5;
            let d = swap_difference(16, 30.0, eps, t).unwrap();
            let limit = 3.0 * 2f64.sqrt() * eps / (4.0 * t);
            assert!((d / limit - 1.0).abs() < 1e-4, "{d} vs {limit}");
        }
        let (l1, l2) = swap_pair(4, 2.0, 0.1).unwrap();
        assert!((distance(&l1, &l2) - 5f64.sqrt() * 0.1).abs() < 1e-15);
    }

    #[test]
    fn swap_direction_picks_top_two() {
        let d = swap_direction(&[0.0, 3.0, 1.0, 3.0]).unwrap();
        let s5 = 5f64.sqrt();
        assert_eq!(d, vec![0.0, -1.0 / s5, 0.0, 2.0 / s5]);
        assert!(swap_direction(&[1.0]).is_none());
    }

    #[test]
    fn slope_fit() {
        let x = [1e-3, 1e-2, 1e-1];
        let y: Vec<f64> = x.iter().map(|t| 0.3 / t).collect();
        assert!((log_log_slope(&x, &y).unwrap() + 1.0).abs() < 1e-12);
        assert!(log_log_slope(&x, &[1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn probe_is_deterministic() {
        let logits = sample_logits(32, 1.0, 2).unwrap();
        let a = fd_sensitivity(&logits, 0.1, 1e-3, 64, 7).unwrap();
        let b = fd_sensitivity(&logits, 0.1, 1e-3, 64, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.g >= a.g_random);
    }

    proptest! {
        #[test]
        fn jacobian_invariants(ls in proptest::collection::vec(-4.0f64..4.0, 1..24), t in 0.05f64..5.0) {
            let a = normalize(&ls, &NormalizerConfig::softmax(t).unwrap()).unwrap();
            let r = softmax_jacobian(&a, t).unwrap();
            for row in r.j.iter_rows() {
                prop_assert!(row.iter().sum::<f64>().abs() <= 1e-10);
            }
            prop_assert!(r.max_entry_norm <= 0.25 / t);
            prop_assert!(r.max_entry_norm <= r.spectral_norm_estimate);
            prop_assert!(r.spectral_norm_estimate <= r.fro_norm + 1e-10);
            prop_assert!(r.j.max_abs() <= r.max_entry_norm * (1.0 + 1e-12));
        }

        #[test]
        fn fd_matches_jvp(ls in proptest::collection::vec(-2.0f64..2.0, 2..16), k in 0usize..3, seed in 0u64..1000) {
            let t = [0.1, 1.0, 10.0][k];
            let cfg = NormalizerConfig::softmax(t).unwrap();
            let base = normalize(&ls, &cfg).unwrap();
            let dir = random_direction(ls.len(), &mut substream(seed, 0));
            let g = directional_sensitivity(&ls, &base, &cfg, 1e-6, &dir).unwrap();
            let jv = norm(&jacobian_vector_product(&base, t, &dir));
            // forward differences carry a second-order term of at most eps / T^2
            prop_assert!((g - jv).abs() <= 1e-4 * jv + 1e-6 / (t * t));
        }
    }
}
