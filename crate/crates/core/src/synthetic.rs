//! Synthetic embeddings on a sphere and bounded logits.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{distance, norm, Matrix};
use crate::rng::{derive_seed, substream};

pub const DEFAULT_MAX_RETRIES: usize = 1000;

fn default_max_retries() -> usize {
    DEFAULT_MAX_RETRIES
}

/// Parameters for sphere embeddings with a minimum pairwise separation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Number of tokens L.
    pub seq_len: usize,
    /// Embedding dimension d.
    pub dim: usize,
    /// Sphere radius M.
    pub radius: f64,
    /// Enforced minimum distance between any two rows.
    #[serde(default)]
    pub delta_min: f64,
    /// Logit bound a.
    pub logit_bound: f64,
    pub seed: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: usize,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 1 {
            return Err(Error::Range("seq_len must be >= 1".into()));
        }
        if self.dim < 2 {
            return Err(Error::Range("dim must be >= 2".into()));
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(Error::Range(format!("radius must be positive, got {}", self.radius)));
        }
        if !(self.delta_min >= 0.0 && self.delta_min < 2.0 * self.radius) {
            return Err(Error::Range(format!(
                "delta_min must lie in [0, 2*radius), got {}",
                self.delta_min
            )));
        }
        if !(self.logit_bound.is_finite() && self.logit_bound >= 0.0) {
            return Err(Error::Range(format!(
                "logit_bound must be >= 0, got {}",
                self.logit_bound
            )));
        }
        Ok(())
    }

    /// Same parameters with another seed.
    pub fn reseeded(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Rows uniform on the radius-`M` sphere, resampled until every pair is at
/// least `delta_min` apart.
pub fn sample_sphere(cfg: &SyntheticConfig) -> Result<Matrix> {
    cfg.validate()?;
    let (l, d, m) = (cfg.seq_len, cfg.dim, cfg.radius);
    let mut rng = substream(derive_seed(cfg.seed, &[0x5748]), 0);
    let mut data: Vec<f64> = Vec::with_capacity(l * d);
    let mut row = vec![0.0; d];
    for i in 0..l {
        let mut placed = false;
        for _ in 0..cfg.max_retries.max(1) {
            for v in row.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let n = norm(&row);
            if n == 0.0 || !n.is_finite() {
                continue;
            }
            row.iter_mut().for_each(|v| *v *= m / n);
            if data
                .chunks_exact(d)
                .all(|prev| distance(prev, &row) >= cfg.delta_min)
            {
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Packing {
                achieved: i,
                requested: l,
            });
        }
        data.extend_from_slice(&row);
    }
    Matrix::new(l, d, data)
}

/// `L` logits i.i.d. uniform on `[-a, a]`.
pub fn sample_logits(len: usize, a: f64, seed: u64) -> Result<Vec<f64>> {
    if !(a.is_finite() && a >= 0.0) {
        return Err(Error::Range(format!("logit bound must be >= 0, got {a}")));
    }
    let mut rng = substream(derive_seed(seed, &[0x4c47]), 0);
    Ok((0..len)
        .map(|_| a * (2.0 * rng.random::<f64>() - 1.0))
        .collect())
}

/// `rows` independent logit vectors, row `i` drawn from its own substream.
pub fn sample_logit_rows(rows: usize, len: usize, a: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    (0..rows)
        .map(|i| sample_logits(len, a, derive_seed(seed, &[i as u64])))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::min_pairwise_separation;

    fn cfg(l: usize, d: usize, delta: f64) -> SyntheticConfig {
        SyntheticConfig {
            seq_len: l,
            dim: d,
            radius: 1.0,
            delta_min: delta,
            logit_bound: 1.0,
            seed: 11,
            max_retries: DEFAULT_MAX_RETRIES,
        }
    }

    #[test]
    fn single_row_on_sphere() {
        let x = sample_sphere(&SyntheticConfig { radius: 3.0, ..cfg(1, 5, 1.0) }).unwrap();
        assert_eq!(x.rows(), 1);
        assert!((norm(x.row(0)) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn isotropic_mean() {
        let c = SyntheticConfig { radius: 2.0, ..cfg(2000, 8, 0.0) };
        let x = sample_sphere(&c).unwrap();
        for r in x.iter_rows() {
            assert!((norm(r) - 2.0).abs() < 1e-12);
        }
        let tol = 4.0 / ((2000.0 * 8.0) as f64).sqrt() * 2.0;
        for j in 0..8 {
            let mean = x.iter_rows().map(|r| r[j]).sum::<f64>() / 2000.0;
            assert!(mean.abs() < tol, "column {j} mean {mean}");
        }
    }

    #[test]
    fn impossible_packing_fails() {
        let err = sample_sphere(&cfg(3, 2, 1.9)).unwrap_err();
        assert!(matches!(err, Error::Packing { requested: 3, achieved } if achieved < 3));
    }

    #[test]
    fn separation_enforced_and_deterministic() {
        let c = cfg(64, 8, 0.6);
        let x = sample_sphere(&c).unwrap();
        assert!(min_pairwise_separation(&x).unwrap() >= 0.6);
        assert_eq!(x, sample_sphere(&c).unwrap());
        assert_ne!(x, sample_sphere(&c.reseeded(12)).unwrap());
    }

    #[test]
    fn invalid_configs() {
        assert!(sample_sphere(&cfg(4, 1, 0.0)).is_err());
        assert!(sample_sphere(&cfg(0, 4, 0.0)).is_err());
        assert!(sample_sphere(&cfg(4, 4, 2.0)).is_err());
    }

    #[test]
    fn logits_support_and_moment() {
        assert!(sample_logits(16, 0.0, 3).unwrap().iter().all(|&v| v == 0.0));
        let l = sample_logits(100_000, 1.0, 3).unwrap();
        assert!(l.iter().all(|v| v.abs() <= 1.0));
        let mean = l.iter().sum::<f64>() / l.len() as f64;
        assert!(mean.abs() < 4.0 / (12.0 * 1e5f64).sqrt());
        assert_eq!(l, sample_logits(100_000, 1.0, 3).unwrap());
    }

    #[test]
    fn config_json_defaults() {
        let c: SyntheticConfig = serde_json::from_str(
            r#"{"seq_len": 8, "dim": 4, "radius": 1.0, "logit_bound": 2.0, "seed": 5}"#,
        )
        .unwrap();
        assert_eq!(c.delta_min, 0.0);
        assert_eq!(c.max_retries, DEFAULT_MAX_RETRIES);
    }
}
