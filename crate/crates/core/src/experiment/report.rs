//! Report documents: records, summary statistics, plot series and checks.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::ExperimentConfig;
use crate::distance::DistanceResult;
use crate::error::{Error, Result};
use crate::geometry::{GeometryResult, SeparabilityEstimate};
use crate::rng::RNG_ALGORITHM;
use crate::stats::CriticalNResult;

/// Identifies the head and sweep point a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct RecordKey {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head: Option<usize>,
    pub seq_len: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

impl RecordKey {
    fn identity(&self) -> String {
        format!(
            "{:?}/{:?}/{}/{:?}/{:?}/{:?}",
            self.layer,
            self.head,
            self.seq_len,
            self.top_n,
            self.temperature.map(f64::to_bits),
            self.epsilon.map(f64::to_bits)
        )
    }
}

/// Weight-bound check for the attention row behind a record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightBoundCheck {
    pub logit_bound: f64,
    pub weight_low: f64,
    pub weight_high: f64,
    pub weight_min: f64,
    pub weight_max: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceRecord {
    #[serde(flatten)]
    pub result: DistanceResult,
    pub weight_check: WeightBoundCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeometryRecord {
    #[serde(flatten)]
    pub result: GeometryResult,
    pub sphere_radius: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityRecord {
    pub rows: usize,
    /// Largest finite-difference ratio over rows and directions.
    pub g: f64,
    pub g_swap_max: f64,
    pub analytic_directional_max: f64,
    pub spectral_norm_max: f64,
    pub max_entry_norm: f64,
    pub entry_bound_holds: bool,
    pub theoretical_bound: f64,
    pub general_bound_max: f64,
    pub directions_probed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KsRecord {
    pub d: f64,
    pub p_value: f64,
    pub empirical: Vec<f64>,
    pub expected: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RecordBody {
    Distance(DistanceRecord),
    Geometry(GeometryRecord),
    SeparabilityMc(SeparabilityEstimate),
    Sensitivity(SensitivityRecord),
    Ks(KsRecord),
    CriticalN(CriticalNResult),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Record {
    pub key: RecordKey,
    #[serde(flatten)]
    pub body: RecordBody,
}

/// Order statistics of one metric at one sweep point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    /// Quartiles use linear interpolation between order statistics.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let h = p * (v.len() - 1) as f64;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(v.len() - 1);
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        };
        Some(Self {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: q(0.5),
            q1: q(0.25),
            q3: q(0.75),
            min: v[0],
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub metric: String,
    pub point: RecordKey,
    #[serde(flatten)]
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Line {
    pub label: String,
    pub y: Vec<Option<f64>>,
}

/// One plot: shared x values and any number of labelled y lines.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotSeries {
    pub name: String,
    pub x_label: String,
    pub x: Vec<f64>,
    pub lines: Vec<Line>,
}

impl PlotSeries {
    pub fn new(name: &str, x_label: &str, x: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            x_label: x_label.into(),
            x,
            lines: Vec::new(),
        }
    }

    pub fn line(mut self, label: impl Into<String>, y: Vec<Option<f64>>) -> Self {
        self.lines.push(Line {
            label: label.into(),
            y,
        });
        self
    }

    pub fn find(&self, label: &str) -> Option<&Line> {
        self.lines.iter().find(|l| l.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.x_label.clone();
        for l in &self.lines {
            out.push(',');
            out.push_str(&l.label);
        }
        out.push('\n');
        for (i, x) in self.x.iter().enumerate() {
            let _ = write!(out, "{x}");
            for l in &self.lines {
                out.push(',');
                if let Some(Some(y)) = l.y.get(i) {
                    let _ = write!(out, "{y}");
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub tool: String,
    pub version: String,
    pub rng_algorithm: String,
    pub config: ExperimentConfig,
    pub records: Vec<Record>,
    pub aggregates: Vec<Aggregate>,
    pub series: Vec<PlotSeries>,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
}

impl AnalysisReport {
    pub(crate) fn new(config: &ExperimentConfig, records: Vec<Record>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert((kind_name(&r.body), r.key.identity())) {
                return Err(Error::Invariant(format!("duplicate record key {:?}", r.key)));
            }
        }
        Ok(Self {
            tool: "attncap".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            rng_algorithm: RNG_ALGORITHM.into(),
            config: config.clone(),
            records,
            aggregates: Vec::new(),
            series: Vec::new(),
            checks: Vec::new(),
            notes: Vec::new(),
        })
    }

    pub fn series(&self, name: &str) -> Option<&PlotSeries> {
        self.series.iter().find(|s| s.name == name)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Invariant(format!("report serialization failed: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    /// Writes `report.json` and one CSV per plot series into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let path = dir.join("report.json");
        std::fs::write(&path, self.to_json()?).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        for s in &self.series {
            let path = dir.join(format!("{}.csv", s.name));
            std::fs::write(&path, s.to_csv()).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }
}

fn kind_name(body: &RecordBody) -> &'static str {
    match body {
        RecordBody::Distance(_) => "distance",
        RecordBody::Geometry(_) => "geometry",
        RecordBody::SeparabilityMc(_) => "separability_mc",
        RecordBody::Sensitivity(_) => "sensitivity",
        RecordBody::Ks(_) => "ks",
        RecordBody::CriticalN(_) => "critical_n",
    }
}

/// Pearson correlation; `None` for fewer than two points or zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}
