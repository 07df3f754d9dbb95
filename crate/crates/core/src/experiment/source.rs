//! Per-head inputs: synthetic heads or heads read from a dump directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use super::{ExperimentConfig, InputSource};
use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};
use crate::normalization::{
    attention_from_qk, compute_logits, normalize, DeltaMode, NormalizerConfig, NormalizerKind, WeightVector,
};
use crate::rng::derive_seed;
use crate::store::{read_manifest, write_manifest, write_tensor, DumpIndex, HeadDump, Manifest, ManifestEntry, ATTENTION_ROW_TOL};
use crate::synthetic::{sample_logit_rows, sample_logits, sample_sphere, SyntheticConfig};

#[derive(Debug, Clone, Copy)]
pub(crate) struct HeadRef {
    pub layer: usize,
    pub head: usize,
    entry: usize,
}

pub(crate) enum Source {
    Synthetic { cfg: SyntheticConfig, heads: Vec<HeadRef> },
    Dump {
        index: DumpIndex,
        embeddings: Option<Arc<Matrix>>,
        heads: Vec<HeadRef>,
    },
}

/// One attention row over the first `L` tokens with the matching embeddings.
pub(crate) struct Instance {
    pub x: Matrix,
    pub weights: WeightVector,
    /// Bound `a` on the logits that produced `weights`.
    pub logit_bound: f64,
    pub normalizer: NormalizerConfig,
}

pub(crate) enum HeadData<'a> {
    Synthetic { cfg: &'a SyntheticConfig, index: usize },
    Dump(HeadDump),
}

impl Source {
    pub fn open(cfg: &ExperimentConfig) -> Result<Self> {
        match &cfg.input {
            InputSource::Synthetic { config, heads } => Ok(Source::Synthetic {
                cfg: config.clone(),
                heads: (0..*heads)
                    .map(|h| HeadRef {
                        layer: 0,
                        head: h,
                        entry: h,
                    })
                    .collect(),
            }),
            InputSource::Dump { dir } => {
                let index = read_manifest(dir)?;
                if index.is_empty() {
                    return Err(Error::Input(format!("dump {} has no entries", dir.display())));
                }
                let embeddings = index.load_embeddings()?;
                let mut heads: Vec<HeadRef> = index
                    .entries
                    .iter()
                    .enumerate()
                    .map(|(entry, e)| HeadRef {
                        layer: e.layer,
                        head: e.head,
                        entry,
                    })
                    .collect();
                heads.sort_by_key(|h| (h.layer, h.head));
                Ok(Source::Dump {
                    index,
                    embeddings,
                    heads,
                })
            }
        }
    }

    pub fn heads(&self) -> &[HeadRef] {
        match self {
            Source::Synthetic { heads, .. } | Source::Dump { heads, .. } => heads,
        }
    }

    pub fn load(&self, h: &HeadRef) -> Result<HeadData<'_>> {
        match self {
            Source::Synthetic { cfg, .. } => Ok(HeadData::Synthetic { cfg, index: h.entry }),
            Source::Dump { index, embeddings, .. } => {
                Ok(HeadData::Dump(index.load_head(&index.entries[h.entry], embeddings.clone())?))
            }
        }
    }
}

fn row_logit_bound(q: &Matrix, k: &Matrix, mode: DeltaMode, row: usize) -> f64 {
    let k_max = k.iter_rows().map(norm).fold(0.0, f64::max);
    match mode {
        DeltaMode::Pairwise => norm(q.row(row)) * k_max,
        DeltaMode::Global => q.iter_rows().map(norm).fold(0.0, f64::max) * k_max,
    }
}

impl HeadData<'_> {
    fn normalizer(&self, cfg: &ExperimentConfig) -> Result<NormalizerConfig> {
        let t = match (cfg.temperature, self) {
            (Some(t), _) => t,
            (None, HeadData::Synthetic { cfg: s, .. }) => (s.dim as f64).sqrt(),
            (None, HeadData::Dump(d)) => d.temperature,
        };
        NormalizerConfig::from_id(&cfg.normalizer, t)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if let HeadData::Dump(d) = self {
            if len > d.seq_len() {
                return Err(Error::Input(format!(
                    "sequence length {len} exceeds the dump length {}",
                    d.seq_len()
                )));
            }
        }
        Ok(())
    }

    /// The attention row of the last query over the first `len` tokens.
    pub fn instance(&self, len: usize, cfg: &ExperimentConfig) -> Result<Instance> {
        self.check_len(len)?;
        let normalizer = self.normalizer(cfg)?;
        match self {
            HeadData::Synthetic { cfg: s, index } => {
                let syn = SyntheticConfig {
                    seq_len: len,
                    ..s.reseeded(derive_seed(s.seed, &[*index as u64, len as u64, 0]))
                };
                let x = sample_sphere(&syn)?;
                let logits = sample_logits(len, s.logit_bound, derive_seed(s.seed, &[*index as u64, len as u64, 1]))?;
                let logit_bound = logits.iter().fold(0.0_f64, |m, l| m.max(l.abs()));
                Ok(Instance {
                    x,
                    weights: normalize(&logits, &normalizer)?,
                    logit_bound,
                    normalizer,
                })
            }
            HeadData::Dump(d) => {
                let x = d.tokens().prefix_rows(len)?;
                let q = d.q.prefix_rows(len)?;
                let k = d.k.prefix_rows(len)?;
                let row = len - 1;
                let stored = d.attention.as_ref().filter(|_| {
                    len == d.seq_len() && normalizer.kind == NormalizerKind::Softmax && cfg.temperature.is_none()
                });
                let weights = match stored {
                    Some(a) => WeightVector::renormalized(a.row(row), ATTENTION_ROW_TOL)?,
                    None => {
                        let logits: Vec<f64> = k.iter_rows().map(|kn| dot(q.row(row), kn)).collect();
                        normalize(&logits, &normalizer)?
                    }
                };
                Ok(Instance {
                    x,
                    weights,
                    logit_bound: row_logit_bound(&q, &k, cfg.delta_mode, row),
                    normalizer,
                })
            }
        }
    }

    /// Up to `rows` raw logit rows over the first `len` tokens.
    pub fn logit_rows(&self, len: usize, rows: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        self.check_len(len)?;
        match self {
            HeadData::Synthetic { cfg: s, .. } => sample_logit_rows(rows, len, s.logit_bound, seed),
            HeadData::Dump(d) => {
                let q = d.q.prefix_rows(len)?;
                let k = d.k.prefix_rows(len)?;
                let logits = compute_logits(&q, &k)?;
                // the last rows see the longest causal prefix
                Ok((len.saturating_sub(rows)..len)
                    .map(|m| {
                        let visible = if d.causal { m + 1 } else { len };
                        logits.values.row(m)[..visible].to_vec()
                    })
                    .collect())
            }
        }
    }
}

/// Shape of a synthetic dump written by [`generate_dump`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DumpSpec {
    pub synthetic: SyntheticConfig,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub causal: bool,
    pub with_attention: bool,
}

/// Writes a synthetic dump: sphere embeddings (`seq_len x dim`), per-head Q, K
/// on the sphere of radius `sqrt(logit_bound)` (so logits lie in
/// `[-logit_bound, logit_bound]`), V on the radius-`M` sphere, and softmax
/// attention at `T = sqrt(head_dim)`.
pub fn generate_dump(spec: &DumpSpec, dir: &Path) -> Result<PathBuf> {
    let s = &spec.synthetic;
    s.validate()?;
    if spec.layers == 0 || spec.heads == 0 || spec.head_dim < 2 {
        return Err(Error::Input("layers and heads must be >= 1 and head_dim >= 2".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let temperature = (spec.head_dim as f64).sqrt();
    write_tensor(&sample_sphere(s)?, dir.join("embeddings.npy"))?;
    let qk_radius = s.logit_bound.sqrt().max(f64::MIN_POSITIVE);
    let mut entries = Vec::new();
    for layer in 0..spec.layers {
        for head in 0..spec.heads {
            let tensor = |slot: u64, radius: f64| {
                sample_sphere(&SyntheticConfig {
                    dim: spec.head_dim,
                    radius,
                    delta_min: 0.0,
                    ..s.reseeded(derive_seed(s.seed, &[layer as u64, head as u64, slot]))
                })
            };
            let q = tensor(1, qk_radius)?;
            let k = tensor(2, qk_radius)?;
            let v = tensor(3, s.radius)?;
            let stem = format!("l{layer:02}_h{head:02}");
            let name = |t: &str| format!("{stem}_{t}.npy");
            write_tensor(&q, dir.join(name("q")))?;
            write_tensor(&k, dir.join(name("k")))?;
            write_tensor(&v, dir.join(name("v")))?;
            let attn = if spec.with_attention {
                let a = attention_from_qk(&q, &k, temperature, spec.causal)?;
                write_tensor(&a, dir.join(name("attn")))?;
                Some(name("attn"))
            } else {
                None
            };
            entries.push(ManifestEntry {
                layer,
                head,
                q: name("q"),
                k: name("k"),
                v: name("v"),
                attn,
            });
        }
    }
    let manifest = Manifest {
        model_id: format!("synthetic-seed{}", s.seed),
        d_model: s.dim,
        n_layers: spec.layers,
        n_heads: spec.heads,
        seq_len: s.seq_len,
        temperature: Some(temperature),
        causal: spec.causal,
        embeddings: Some("embeddings.npy".into()),
        entries,
    };
    write_manifest(&manifest, dir)
}
