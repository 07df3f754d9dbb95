//! Sweeps over heads and sweep points that assemble [`AnalysisReport`]s.
//!
//! Every run takes an [`ExperimentConfig`], fans out over heads on a rayon pool
//! and merges records back in (layer, head, sweep point) order, so the report
//! is identical for any `jobs` setting.

mod critical;
mod distance;
mod geometry;
mod gradient;
pub mod report;
mod source;

use std::path::PathBuf;

use serde::Serialize;

pub use critical::run_critical_n;
pub use distance::run_distance_experiment;
pub use geometry::run_geometry_experiment;
pub use gradient::run_gradient_experiment;
pub use report::{AnalysisReport, Check, PlotSeries, Record, RecordBody, RecordKey, Summary};
pub use source::{generate_dump, DumpSpec};

use crate::distance::{FormulaVariant, OracleMode};
use crate::error::{Error, Result};
use crate::geometry::{RadiusRule, XiReading};
use crate::normalization::{DeltaMode, NormalizerKind};
use crate::synthetic::SyntheticConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Distance,
    Geometry,
    Gradient,
    CriticalN,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InputSource {
    Dump { dir: PathBuf },
    Synthetic { config: SyntheticConfig, heads: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleChoice {
    Exact,
    #[default]
    MonteCarlo,
}

/// Which per-head quantity plays the expected distance in the critical-N test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectedSource {
    #[default]
    ClosedForm,
    Oracle,
}

/// Log-spaced grid of `n` points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub input: InputSource,
    pub seq_lens: Vec<usize>,
    pub top_n: Vec<usize>,
    /// Temperature sweep of the gradient experiment.
    pub temperatures: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub normalizer: String,
    /// Normalizer temperature; defaults to the dump's, or `sqrt(dim)` for synthetic data.
    pub temperature: Option<f64>,
    pub oracle: OracleChoice,
    pub samples: usize,
    pub seed: u64,
    pub formula_variant: FormulaVariant,
    pub delta_mode: DeltaMode,
    pub xi_reading: XiReading,
    /// Fixed ball radius; the closest-unselected rule when absent.
    pub radius: Option<f64>,
    /// Radius dump embeddings are projected to before the geometry analysis.
    pub sphere_radius: f64,
    pub draws: usize,
    pub directions: usize,
    pub rows: usize,
    pub alpha: f64,
    pub expected_source: ExpectedSource,
    /// Worker threads; 0 uses the rayon default. Not part of the report.
    #[serde(skip)]
    pub jobs: usize,
}

impl ExperimentConfig {
    /// Default sweep grids.
    pub fn new(experiment: ExperimentKind, input: InputSource) -> Self {
        Self {
            experiment,
            input,
            seq_lens: vec![32, 64, 128, 256, 512, 1024],
            top_n: vec![1, 5, 10, 20, 100],
            temperatures: log_grid(1e-3, 10.0, 5),
            epsilons: vec![1e-3, 1e-1, 10.0],
            normalizer: "softmax".into(),
            temperature: None,
            oracle: OracleChoice::MonteCarlo,
            samples: 1000,
            seed: 0,
            formula_variant: FormulaVariant::Derived,
            delta_mode: DeltaMode::Global,
            xi_reading: XiReading::Ordered,
            radius: None,
            sphere_radius: 1.0,
            draws: 2000,
            directions: crate::gradient::DEFAULT_DIRECTIONS,
            rows: 16,
            alpha: 0.01,
            expected_source: ExpectedSource::ClosedForm,
            jobs: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Input(msg.into()));
        if self.seq_lens.is_empty() || self.seq_lens.contains(&0) {
            return bad("seq_lens must be a non-empty list of positive lengths");
        }
        if self.top_n.is_empty() || self.top_n.contains(&0) {
            return bad("top_n must be a non-empty list of positive counts");
        }
        if self.temperatures.is_empty() || self.temperatures.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return bad("temperatures must be a non-empty list of positive values");
        }
        if self.epsilons.is_empty() || self.epsilons.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return bad("epsilons must be a non-empty list of positive values");
        }
        NormalizerKind::lookup(&self.normalizer)?;
        if let Some(t) = self.temperature {
            if !(t.is_finite() && t > 0.0) {
                return bad("temperature must be positive");
            }
        }
        if let Some(r) = self.radius {
            if !(r.is_finite() && r > 0.0) {
                return bad("radius must be positive");
            }
        }
        if !(self.sphere_radius.is_finite() && self.sphere_radius > 0.0) {
            return bad("sphere_radius must be positive");
        }
        if self.samples == 0 || self.draws == 0 || self.directions == 0 || self.rows == 0 {
            return bad("samples, draws, directions and rows must be >= 1");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if let InputSource::Synthetic { config, heads } = &self.input {
            config.validate()?;
            if *heads == 0 {
                return bad("heads must be >= 1");
            }
        }
        Ok(())
    }

    pub(crate) fn oracle_mode(&self) -> OracleMode {
        match self.oracle {
            OracleChoice::Exact => OracleMode::Exact,
            OracleChoice::MonteCarlo => OracleMode::MonteCarlo {
                samples: self.samples,
            },
        }
    }

    pub(crate) fn radius_rule(&self) -> RadiusRule {
        self.radius.map_or(RadiusRule::ClosestUnselected, RadiusRule::Fixed)
    }
}

/// Runs the experiment named in the config.
pub fn run(cfg: &ExperimentConfig) -> Result<AnalysisReport> {
    match cfg.experiment {
        ExperimentKind::Distance => run_distance_experiment(cfg),
        ExperimentKind::Geometry => run_geometry_experiment(cfg),
        ExperimentKind::Gradient => run_gradient_experiment(cfg),
        ExperimentKind::CriticalN => run_critical_n(cfg),
    }
}

/// Expected fraction of top-N tokens covered by `heads` independent heads that
/// each separate a fraction `p`: `1 - (1 - p)^H`.
pub fn head_coverage(p: f64, heads: u32) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Range(format!("p must lie in [0, 1], got {p}")));
    }
    if heads == 0 {
        return Err(Error::Range("H must be >= 1".into()));
    }
    Ok(1.0 - (1.0 - p).powi(heads as i32))
}

/// Runs `f` on a pool with `jobs` threads, or on the global pool for 0.
pub(crate) fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if jobs == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Invariant(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Summary statistics of `metric` for every distinct sweep point, in first-seen order.
pub(crate) fn aggregate_by_point(
    records: &[Record],
    metric: &str,
    value: impl Fn(&RecordBody) -> Option<f64>,
) -> Vec<report::Aggregate> {
    let mut points: Vec<(RecordKey, Vec<f64>)> = Vec::new();
    for r in records {
        let Some(v) = value(&r.body) else { continue };
        let point = RecordKey {
            layer: None,
            head: None,
            ..r.key
        };
        match points.iter_mut().find(|(p, _)| *p == point) {
            Some((_, vs)) => vs.push(v),
            None => points.push((point, vec![v])),
        }
    }
    points
        .into_iter()
        .filter_map(|(point, vs)| {
            Summary::of(&vs).map(|summary| report::Aggregate {
                metric: metric.into(),
                point,
                summary,
            })
        })
        .collect()
}

pub(crate) fn find_aggregate<'a>(
    aggregates: &'a [report::Aggregate],
    metric: &str,
    point: &RecordKey,
) -> Option<&'a Summary> {
    aggregates
        .iter()
        .find(|a| a.metric == metric && a.point == *point)
        .map(|a| &a.summary)
}
