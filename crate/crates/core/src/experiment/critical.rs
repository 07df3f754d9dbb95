use std::collections::BTreeMap;

use rayon::prelude::*;

use super::report::{KsRecord, Record, RecordBody, RecordKey};
use super::source::{HeadRef, Source};
use super::{with_jobs, AnalysisReport, Check, ExpectedSource, ExperimentConfig, PlotSeries};
use crate::distance::{expected_distance_closed_form, expected_distance_oracle, representation_distance, select_top_n};
use crate::error::Result;
use crate::rng::derive_seed;
use crate::stats::{critical_top_n, ks_two_sample};

/// `(L, N) -> (d_tilde, expected)` for one head.
type HeadSamples = Vec<((usize, usize), (f64, f64))>;

fn head_samples(cfg: &ExperimentConfig, src: &Source, h: &HeadRef) -> Result<HeadSamples> {
    let data = src.load(h)?;
    let mut out = Vec::new();
    for &len in &cfg.seq_lens {
        let inst = data.instance(len, cfg)?;
        for &n in cfg.top_n.iter().filter(|&&n| n <= len) {
            let sel = select_top_n(&inst.weights, n)?;
            let empirical = representation_distance(&inst.x, &inst.weights, &sel)?;
            let expected = match cfg.expected_source {
                ExpectedSource::ClosedForm => {
                    expected_distance_closed_form(&inst.x, &inst.weights, n, cfg.formula_variant)?.value
                }
                ExpectedSource::Oracle => {
                    let seed = derive_seed(cfg.seed, &[h.layer as u64, h.head as u64, len as u64, n as u64]);
                    expected_distance_oracle(&inst.x, &inst.weights, n, cfg.oracle_mode(), seed)?.value
                }
            };
            out.push(((len, n), (empirical, expected)));
        }
    }
    Ok(out)
}

/// For every `L`, KS-compares the per-head top-N distances with the per-head
/// expected distances at each `N <= L` and reports the smallest `N` that is
/// not rejected at level `alpha`.
pub fn run_critical_n(cfg: &ExperimentConfig) -> Result<AnalysisReport> {
    cfg.validate()?;
    let src = Source::open(cfg)?;
    let per_head = with_jobs(cfg.jobs, || {
        src.heads()
            .par_iter()
            .map(|h| head_samples(cfg, &src, h))
            .collect::<Result<Vec<_>>>()
    })??;

    let mut records = Vec::new();
    let mut fractions = Vec::new();
    for &len in &cfg.seq_lens {
        let grid: Vec<usize> = cfg.top_n.iter().copied().filter(|&n| n <= len).collect();
        let mut empirical: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut expected: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for head in &per_head {
            for &((l, n), (e, x)) in head.iter().filter(|((l, _), _)| *l == len) {
                debug_assert_eq!(l, len);
                empirical.entry(n).or_default().push(e);
                expected.entry(n).or_default().push(x);
            }
        }
        let result = critical_top_n(&empirical, &expected, &grid, cfg.alpha)?;
        for &n in &grid {
            let ks = ks_two_sample(&empirical[&n], &expected[&n])?;
            records.push(Record {
                key: RecordKey {
                    seq_len: len,
                    top_n: Some(n),
                    ..RecordKey::default()
                },
                body: RecordBody::Ks(KsRecord {
                    d: ks.d,
                    p_value: ks.p_value,
                    empirical: empirical[&n].clone(),
                    expected: expected[&n].clone(),
                }),
            });
        }
        fractions.push(result.n_crit.map(|n| n as f64 / len as f64));
        records.push(Record {
            key: RecordKey {
                seq_len: len,
                ..RecordKey::default()
            },
            body: RecordBody::CriticalN(result),
        });
    }

    let mut report = AnalysisReport::new(cfg, records)?;
    let xs: Vec<f64> = cfg.seq_lens.iter().map(|&l| l as f64).collect();
    let present: Vec<f64> = fractions.iter().flatten().copied().collect();
    if present.len() >= 2 {
        let ok = present.windows(2).all(|w| w[1] <= w[0]);
        report.checks.push(Check::new(
            "critical_fraction_nonincreasing",
            ok,
            format!("N_crit/L = {fractions:?}"),
        ));
    }
    report.series.push(PlotSeries::new("critical_fraction_vs_seq_len", "seq_len", xs).line("n_crit_over_l", fractions));
    report.notes.push(format!(
        "indistinguishable means p >= alpha = {}; expected samples from {}",
        cfg.alpha,
        match cfg.expected_source {
            ExpectedSource::ClosedForm => "the closed form",
            ExpectedSource::Oracle => "the oracle",
        }
    ));
    Ok(report)
}
