//! Tensor dumps: NPY files bound together by a JSON manifest.

mod manifest;
pub mod npy;

use std::sync::Arc;

pub use manifest::{read_manifest, write_manifest, DumpEntry, DumpIndex, Manifest, ManifestEntry};
pub use npy::{encode_tensor, parse_tensor, read_tensor, write_tensor, write_tensor_f32};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Tolerance on attention row sums; dumps are usually written in 32-bit.
pub const ATTENTION_ROW_TOL: f64 = 1e-6;

/// One attention head of one layer, validated against its shape invariants.
#[derive(Debug, Clone)]
pub struct HeadDump {
    pub model_id: String,
    pub layer: usize,
    pub head: usize,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub attention: Option<Matrix>,
    pub embeddings: Option<Arc<Matrix>>,
    pub temperature: f64,
    pub causal: bool,
}

impl HeadDump {
    /// Validates shapes and the attention simplex condition.
    ///
    /// `temperature` defaults to `sqrt(d)` when `None`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model_id: impl Into<String>,
        layer: usize,
        head: usize,
        q: Matrix,
        k: Matrix,
        v: Matrix,
        attention: Option<Matrix>,
        embeddings: Option<Arc<Matrix>>,
        temperature: Option<f64>,
        causal: bool,
    ) -> Result<Self> {
        let (l, d) = (q.rows(), q.cols());
        for (name, m) in [("k", &k), ("v", &v)] {
            if m.rows() != l || m.cols() != d {
                return Err(Error::Dimension(format!(
                    "{name} is {}x{}, q is {l}x{d}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        if let Some(a) = &attention {
            if a.rows() != l || a.cols() != l {
                return Err(Error::Dimension(format!(
                    "attention is {}x{}, expected {l}x{l}",
                    a.rows(),
                    a.cols()
                )));
            }
            for (i, row) in a.iter_rows().enumerate() {
                if let Some(j) = row.iter().position(|&x| x < 0.0) {
                    return Err(Error::Input(format!(
                        "attention[{i}][{j}] is negative"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ATTENTION_ROW_TOL {
                    return Err(Error::Input(format!(
                        "attention row {i} sums to {sum}"
                    )));
                }
            }
        }
        if let Some(e) = &embeddings {
            if e.rows() != l {
                return Err(Error::Dimension(format!(
                    "embeddings have {} rows, sequence length is {l}",
                    e.rows()
                )));
            }
        }
        let temperature = temperature.unwrap_or((d as f64).sqrt());
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::Range(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self {
            model_id: model_id.into(),
            layer,
            head,
            q,
            k,
            v,
            attention,
            embeddings,
            temperature,
            causal,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.q.cols()
    }

    /// Token vectors used for distance/geometry analysis: the shared
    /// embeddings when the dump has them, otherwise this head's values.
    pub fn tokens(&self) -> &Matrix {
        self.embeddings.as_deref().unwrap_or(&self.v)
    }
}

impl DumpIndex {
    pub fn load_embeddings(&self) -> Result<Option<Arc<Matrix>>> {
        self.embeddings
            .as_ref()
            .map(|p| read_tensor(p).map(Arc::new))
            .transpose()
    }

    /// Loads and validates one head. `embeddings` comes from [`Self::load_embeddings`].
    pub fn load_head(&self, entry: &DumpEntry, embeddings: Option<Arc<Matrix>>) -> Result<HeadDump> {
        let attention = entry.attn.as_ref().map(read_tensor).transpose()?;
        HeadDump::new(
            self.model_id.clone(),
            entry.layer,
            entry.head,
            read_tensor(&entry.q)?,
            read_tensor(&entry.k)?,
            read_tensor(&entry.v)?,
            attention,
            embeddings,
            self.temperature,
            self.causal,
        )
    }
}
