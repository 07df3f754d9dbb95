use rayon::prelude::*;

use super::report::{GeometryRecord, Record, RecordBody, RecordKey};
use super::source::{HeadData, HeadRef, Source};
use super::{aggregate_by_point, find_aggregate, with_jobs, AnalysisReport, Check, ExperimentConfig, InputSource, PlotSeries};
use crate::distance::select_top_n;
use crate::error::{Error, Result};
use crate::geometry::{analyze, min_pairwise_separation, project_to_sphere, separability_monte_carlo, SphereConfig};
use crate::rng::derive_seed;
use crate::synthetic::SyntheticConfig;

const MC_SIGMAS: f64 = 3.0;

fn dump_head_records(cfg: &ExperimentConfig, src: &Source, h: &HeadRef) -> Result<Vec<Record>> {
    let data = src.load(h)?;
    let HeadData::Dump(_) = &data else {
        return Err(Error::Invariant("dump head expected".into()));
    };
    let mut out = Vec::new();
    for &len in &cfg.seq_lens {
        if len < 2 {
            continue;
        }
        let inst = data.instance(len, cfg)?;
        let x = project_to_sphere(&inst.x, cfg.sphere_radius)?;
        let delta = min_pairwise_separation(&x)?.min(2.0 * cfg.sphere_radius);
        let sphere = SphereConfig::new(cfg.sphere_radius, delta)?;
        for &n in cfg.top_n.iter().filter(|&&n| n < len) {
            let sel = select_top_n(&inst.weights, n)?;
            let result = analyze(&x, &inst.weights, &sel, &sphere, cfg.xi_reading, cfg.radius_rule())?;
            out.push(Record {
                key: RecordKey {
                    layer: Some(h.layer),
                    head: Some(h.head),
                    seq_len: len,
                    top_n: Some(n),
                    ..RecordKey::default()
                },
                body: RecordBody::Geometry(GeometryRecord {
                    result,
                    sphere_radius: cfg.sphere_radius,
                    delta,
                }),
            });
        }
    }
    Ok(out)
}

fn synthetic_records(cfg: &ExperimentConfig, syn: &SyntheticConfig) -> Result<Vec<Record>> {
    let points: Vec<(usize, usize)> = cfg
        .seq_lens
        .iter()
        .flat_map(|&l| cfg.top_n.iter().filter(move |&&n| n < l).map(move |&n| (l, n)))
        .collect();
    points
        .par_iter()
        .map(|&(len, n)| {
            let est = separability_monte_carlo(
                &SyntheticConfig { seq_len: len, ..syn.clone() },
                n,
                cfg.draws,
                cfg.xi_reading,
                derive_seed(cfg.seed, &[len as u64, n as u64]),
            )?;
            Ok(Record {
                key: RecordKey {
                    seq_len: len,
                    top_n: Some(n),
                    ..RecordKey::default()
                },
                body: RecordBody::SeparabilityMc(est),
            })
        })
        .collect()
}

/// Separability ratio and its bounds per head, `L` and `N < L`.
///
/// Dumps: embeddings are projected to the sphere, `delta` is their empirical
/// minimum distance, and the top-N set of the last attention row is analysed.
/// Synthetic input: Monte-Carlo estimates with weight `1/N` on `N` tokens over
/// `draws` embedding draws.
pub fn run_geometry_experiment(cfg: &ExperimentConfig) -> Result<AnalysisReport> {
    cfg.validate()?;
    let records = match &cfg.input {
        InputSource::Synthetic { config, .. } => {
            if cfg.radius.is_some() {
                return Err(Error::Input(
                    "a fixed radius applies to dump input; synthetic runs use the closest-unselected rule".into(),
                ));
            }
            with_jobs(cfg.jobs, || synthetic_records(cfg, config))??
        }
        InputSource::Dump { .. } => {
            let src = Source::open(cfg)?;
            let per_head = with_jobs(cfg.jobs, || {
                src.heads()
                    .par_iter()
                    .map(|h| dump_head_records(cfg, &src, h))
                    .collect::<Result<Vec<_>>>()
            })??;
            per_head.into_iter().flatten().collect()
        }
    };
    let mut report = AnalysisReport::new(cfg, records)?;
    let max_len = *cfg.seq_lens.iter().max().unwrap_or(&1);
    let ns: Vec<usize> = cfg.top_n.iter().copied().filter(|&n| n < max_len).collect();
    let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let at = |n: usize| RecordKey {
        seq_len: max_len,
        top_n: Some(n),
        ..RecordKey::default()
    };

    if let InputSource::Synthetic { .. } = cfg.input {
        let est: Vec<_> = report
            .records
            .iter()
            .filter_map(|r| match &r.body {
                RecordBody::SeparabilityMc(e) => Some(*e),
                _ => None,
            })
            .collect();
        let outside: Vec<String> = est
            .iter()
            .filter(|e| !e.within(MC_SIGMAS))
            .map(|e| {
                format!(
                    "L={} N={}: ratio {:.4} +- {:.4} vs [{:.4}, {:.4}]",
                    e.seq_len, e.top_n, e.mean_ratio, e.stderr, e.mean_lower, e.mean_upper
                )
            })
            .collect();
        report.checks.push(Check::new(
            "ratio_within_bounds_3se",
            outside.is_empty(),
            if outside.is_empty() {
                format!("{} configurations", est.len())
            } else {
                outside.join("; ")
            },
        ));
        let pick = |n: usize, f: fn(&crate::geometry::SeparabilityEstimate) -> f64| {
            est.iter().find(|e| e.seq_len == max_len && e.top_n == n).map(f)
        };
        report.series.push(
            PlotSeries::new("ratio_vs_top_n", "top_n", xs)
                .line("ratio_mean", ns.iter().map(|&n| pick(n, |e| e.mean_ratio)).collect())
                .line("ratio_stderr", ns.iter().map(|&n| pick(n, |e| e.stderr)).collect())
                .line("lower_mean", ns.iter().map(|&n| pick(n, |e| e.mean_lower)).collect())
                .line("upper_mean", ns.iter().map(|&n| pick(n, |e| e.mean_upper)).collect()),
        );
    } else {
        let geo = |b: &RecordBody| match b {
            RecordBody::Geometry(g) => Some(g.result.clone()),
            _ => None,
        };
        for (metric, f) in [
            ("ratio", (|g: &crate::geometry::GeometryResult| g.ratio) as fn(&crate::geometry::GeometryResult) -> f64),
            ("r", |g| g.r),
            ("xi_mean", |g| g.xi_mean),
            ("lower_bound", |g| g.lower_bound),
            ("lower_bound_raw", |g| g.lower_bound_raw),
            ("upper_bound", |g| g.upper_bound),
        ] {
            report
                .aggregates
                .extend(aggregate_by_point(&report.records, metric, |b| geo(b).map(|g| f(&g))));
        }
        let stat = |metric: &str, pick: fn(&super::Summary) -> f64| -> Vec<Option<f64>> {
            ns.iter()
                .map(|&n| find_aggregate(&report.aggregates, metric, &at(n)).map(pick))
                .collect()
        };
        let series = PlotSeries::new("ratio_vs_top_n", "top_n", xs)
            .line("ratio_mean", stat("ratio", |s| s.mean))
            .line("ratio_q1", stat("ratio", |s| s.q1))
            .line("ratio_q3", stat("ratio", |s| s.q3))
            .line("lower_mean", stat("lower_bound", |s| s.mean))
            .line("upper_mean", stat("upper_bound", |s| s.mean));
        let plateau: Vec<f64> = ns
            .iter()
            .filter(|&&n| n >= 16)
            .filter_map(|&n| find_aggregate(&report.aggregates, "ratio", &at(n)).map(|s| s.mean))
            .collect();
        if !plateau.is_empty() {
            let ok = plateau.iter().all(|r| (0.6..=0.95).contains(r));
            report.checks.push(Check::new(
                "ratio_plateau_n16_plus",
                ok,
                format!("mean ratios {plateau:?} against [0.6, 0.95]"),
            ));
        }
        report.series.push(series);
    }
    if let Some(r) = cfg.radius {
        report.notes.push(format!("fixed ball radius r = {r}"));
    }
    Ok(report)
}
