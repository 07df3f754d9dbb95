//! `attncap` command-line interface.
//!
//! Exit codes: 0 on success, 1 on invalid input, 2 on an internal failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attncap::distance::FormulaVariant;
use attncap::experiment::{
    generate_dump, head_coverage, log_grid, AnalysisReport, DumpSpec, ExpectedSource, ExperimentConfig,
    ExperimentKind, InputSource, OracleChoice,
};
use attncap::geometry::XiReading;
use attncap::normalization::{attention_consistency, DeltaMode};
use attncap::store::read_manifest;
use attncap::synthetic::{SyntheticConfig, DEFAULT_MAX_RETRIES};
use attncap::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "attncap", version, about = "Capacity diagnostics for attention normalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write report.json plus one CSV per plot series.
    Analyze {
        #[arg(value_enum)]
        experiment: Experiment,
        #[command(flatten)]
        opts: AnalyzeOpts,
    },
    /// Synthetic data generation.
    Synth {
        #[command(subcommand)]
        command: SynthCommand,
    },
    /// Fraction of top-N tokens covered by H heads that each separate a fraction p.
    Coverage {
        #[arg(long)]
        p: f64,
        #[arg(long)]
        heads: u32,
    },
    /// Load every head of a dump and compare stored attention with a recomputation from Q and K.
    VerifyDump {
        #[arg(long)]
        dump: PathBuf,
        /// Largest tolerated per-entry deviation.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    Distance,
    Geometry,
    Gradient,
    CriticalN,
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleArg {
    Exact,
    Mc,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    AsPrinted,
    Derived,
}

#[derive(Clone, Copy, ValueEnum)]
enum DeltaArg {
    Global,
    Pairwise,
}

#[derive(Clone, Copy, ValueEnum)]
enum XiArg {
    Ordered,
    Half,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExpectedArg {
    ClosedForm,
    Oracle,
}

#[derive(Args)]
struct AnalyzeOpts {
    /// Dump directory (or manifest.json path).
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    dump: Option<PathBuf>,
    /// Synthetic-data config file (JSON).
    #[arg(long)]
    synthetic: Option<PathBuf>,
    /// Number of synthetic heads.
    #[arg(long, default_value_t = 16)]
    heads: usize,
    #[arg(long, default_value = "softmax")]
    normalizer: String,
    /// Normalizer temperature; for the gradient experiment, the temperature sweep.
    #[arg(long, value_delimiter = ',')]
    temperature: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    top_n: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    seq_len: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    epsilon: Vec<f64>,
    #[arg(long, value_enum, default_value = "mc")]
    oracle: OracleArg,
    /// Monte-Carlo samples per oracle estimate.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0: one per core).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[arg(long, default_value = "attncap-out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "derived")]
    formula_variant: VariantArg,
    #[arg(long, value_enum, default_value = "global")]
    delta_mode: DeltaArg,
    #[arg(long, value_enum, default_value = "ordered")]
    xi_reading: XiArg,
    /// Fixed ball radius instead of the closest-unselected rule (dumps only).
    #[arg(long)]
    radius: Option<f64>,
    /// Sphere radius dump embeddings are projected to.
    #[arg(long, default_value_t = 1.0)]
    sphere_radius: f64,
    /// Embedding draws per synthetic geometry configuration.
    #[arg(long, default_value_t = 2000)]
    draws: usize,
    /// Random probe directions per logit row.
    #[arg(long, default_value_t = 64)]
    directions: usize,
    /// Logit rows per head in the gradient experiment.
    #[arg(long, default_value_t = 16)]
    rows: usize,
    /// KS significance level.
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    #[arg(long, value_enum, default_value = "closed-form")]
    expected_source: ExpectedArg,
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Write a synthetic dump (NPY tensors and manifest.json).
    Generate(GenerateOpts),
}

#[derive(Args)]
struct GenerateOpts {
    /// Config file (JSON); overrides the individual generator flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    radius: f64,
    #[arg(long, default_value_t = 0.0)]
    delta_min: f64,
    #[arg(long, default_value_t = 1.0)]
    logit_bound: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 16)]
    head_dim: usize,
    /// Store unmasked attention instead of causal.
    #[arg(long)]
    non_causal: bool,
    /// Leave attention matrices out of the dump.
    #[arg(long)]
    no_attention: bool,
    #[arg(long)]
    out: PathBuf,
}

fn read_synthetic(path: &Path) -> Result<SyntheticConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let cfg: SyntheticConfig =
        serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn build_config(experiment: Experiment, o: &AnalyzeOpts) -> Result<ExperimentConfig> {
    let input = match (&o.dump, &o.synthetic) {
        (Some(dir), None) => InputSource::Dump { dir: dir.clone() },
        (None, Some(path)) => InputSource::Synthetic {
            config: read_synthetic(path)?,
            heads: o.heads,
        },
        _ => return Err(Error::Input("exactly one of --dump and --synthetic is required".into())),
    };
    let kind = match experiment {
        Experiment::Distance => ExperimentKind::Distance,
        Experiment::Geometry => ExperimentKind::Geometry,
        Experiment::Gradient => ExperimentKind::Gradient,
        Experiment::CriticalN => ExperimentKind::CriticalN,
    };
    let mut cfg = ExperimentConfig::new(kind, input);
    if kind == ExperimentKind::Gradient {
        cfg.temperatures = if o.temperature.is_empty() {
            log_grid(1e-3, 10.0, 5)
        } else {
            o.temperature.clone()
        };
    } else {
        match o.temperature.as_slice() {
            [] => {}
            [t] => cfg.temperature = Some(*t),
            _ => return Err(Error::Input("--temperature takes a single value outside the gradient experiment".into())),
        }
    }
    if !o.top_n.is_empty() {
        cfg.top_n = o.top_n.clone();
    }
    if !o.seq_len.is_empty() {
        cfg.seq_lens = o.seq_len.clone();
    }
    if !o.epsilon.is_empty() {
        cfg.epsilons = o.epsilon.clone();
    }
    cfg.normalizer = o.normalizer.clone();
    cfg.oracle = match o.oracle {
        OracleArg::Exact => OracleChoice::Exact,
        OracleArg::Mc => OracleChoice::MonteCarlo,
    };
    cfg.samples = o.samples;
    cfg.seed = o.seed;
    cfg.jobs = o.jobs;
    cfg.formula_variant = match o.formula_variant {
        VariantArg::AsPrinted => FormulaVariant::AsPrinted,
        VariantArg::Derived => FormulaVariant::Derived,
    };
    cfg.delta_mode = match o.delta_mode {
        DeltaArg::Global => DeltaMode::Global,
        DeltaArg::Pairwise => DeltaMode::Pairwise,
    };
    cfg.xi_reading = match o.xi_reading {
        XiArg::Ordered => XiReading::Ordered,
        XiArg::Half => XiReading::Half,
    };
    cfg.radius = o.radius;
    cfg.sphere_radius = o.sphere_radius;
    cfg.draws = o.draws;
    cfg.directions = o.directions;
    cfg.rows = o.rows;
    cfg.alpha = o.alpha;
    cfg.expected_source = match o.expected_source {
        ExpectedArg::ClosedForm => ExpectedSource::ClosedForm,
        ExpectedArg::Oracle => ExpectedSource::Oracle,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn print_summary(report: &AnalysisReport, written: &[PathBuf]) {
    println!("{} records", report.records.len());
    for c in &report.checks {
        println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    for n in &report.notes {
        println!("note: {n}");
    }
    for p in written {
        println!("wrote {}", p.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Analyze { experiment, opts } => {
            let cfg = build_config(experiment, &opts)?;
            let report = attncap::experiment::run(&cfg)?;
            let written = report.write(&opts.out)?;
            print_summary(&report, &written);
        }
        Command::Synth {
            command: SynthCommand::Generate(g),
        } => {
            let synthetic = match &g.config {
                Some(path) => read_synthetic(path)?,
                None => SyntheticConfig {
                    seq_len: g.seq_len,
                    dim: g.dim,
                    radius: g.radius,
                    delta_min: g.delta_min,
                    logit_bound: g.logit_bound,
                    seed: g.seed,
                    max_retries: DEFAULT_MAX_RETRIES,
                },
            };
            let spec = DumpSpec {
                synthetic,
                layers: g.layers,
                heads: g.heads,
                head_dim: g.head_dim,
                causal: !g.non_causal,
                with_attention: !g.no_attention,
            };
            let manifest = generate_dump(&spec, &g.out)?;
            let cfg_path = g.out.join("synthetic.json");
            let json = serde_json::to_string_pretty(&spec.synthetic)
                .map_err(|e| Error::Invariant(format!("config serialization failed: {e}")))?;
            std::fs::write(&cfg_path, json + "\n").map_err(|e| Error::Input(format!("{}: {e}", cfg_path.display())))?;
            println!("wrote {}", manifest.display());
            println!("wrote {}", cfg_path.display());
        }
        Command::Coverage { p, heads } => {
            println!("{}", head_coverage(p, heads)?);
        }
        Command::VerifyDump { dump, tolerance } => {
            let index = read_manifest(&dump)?;
            let embeddings = index.load_embeddings()?;
            let mut worst = 0.0_f64;
            for entry in &index.entries {
                let head = index.load_head(entry, embeddings.clone())?;
                match attention_consistency(&head)? {
                    Some(dev) => {
                        worst = worst.max(dev);
                        println!("layer {} head {}: max deviation {dev:e}", entry.layer, entry.head);
                    }
                    None => println!("layer {} head {}: no stored attention", entry.layer, entry.head),
                }
            }
            println!("{} heads loaded, largest deviation {worst:e}", index.len());
            if worst > tolerance {
                return Err(Error::Input(format!(
                    "stored attention deviates by {worst:e} > {tolerance:e} from the recomputation"
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_internal() { 2 } else { 1 })
        }
        Err(_) => ExitCode::from(2),
    }
}
