use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use svib_cli::plot::{self, PlotSeries};
use svib_cli::{config, prepare_run_dir, run_dir, runs_root, CliError, Manifest};
use svib_core::metrics::read_metrics;
use svib_core::mine::{train_probe, PairBatch, ProbeConfig};
use svib_core::optim::OptimizerKind;
use svib_core::oracle::{self, Fault, SweepCounts};
use svib_core::{train, Execution};

#[derive(Parser)]
#[command(name = "svib", version, about = "Information-bottleneck actor-critic experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write it under <runs>/<config-hash>/<seed>/.
    Train(TrainArgs),
    /// Run the discrete oracle sweeps and print a JSON report.
    VerifyOracle(VerifyArgs),
    /// Estimate I(X; Z) from a JSONL file of {"x": [..], "z": [..]} pairs.
    ProbeMi(ProbeArgs),
    /// Write CSV (and optionally SVG) series for one metrics field.
    Plot(PlotArgs),
}

#[derive(clap::Args)]
struct TrainArgs {
    /// JSON config file; the built-in defaults are used without one.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<String>,
    /// Dotted-path override, e.g. `--set svgd.beta=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root for run directories (default: $SVIB_RUNS_DIR, then ./runs).
    #[arg(long)]
    runs_dir: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
    /// Print the resolved config as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum InjectedFault {
    OffByBeta,
}

#[derive(clap::Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sets every sweep count at once; the per-sweep flags take precedence.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    theorem2: Option<usize>,
    #[arg(long)]
    families: Option<usize>,
    #[arg(long)]
    family_size: Option<usize>,
    #[arg(long)]
    stationarity: Option<usize>,
    #[arg(long)]
    perturbations: Option<usize>,
    #[arg(long)]
    identities: Option<usize>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
    #[arg(long, hide = true, value_enum)]
    inject_fault: Option<InjectedFault>,
}

#[derive(clap::Args)]
struct ProbeArgs {
    pairs: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    steps: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 7e-4)]
    learning_rate: f64,
    /// Hidden widths of the statistics network, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "128")]
    hidden: Vec<usize>,
    #[arg(long, value_enum, default_value = "adam")]
    optimizer: Opt,
}

#[derive(Clone, Copy, ValueEnum)]
enum Opt {
    Sgd,
    Adam,
}

#[derive(clap::Args)]
struct PlotArgs {
    /// Run directories, or parents of run directories.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, default_value = "mean_return")]
    field: String,
    /// Smoothing factor in [0, 1); 0 leaves the series unchanged.
    #[arg(long, default_value_t = 0.0)]
    ema: f64,
    #[arg(long, default_value = "plots")]
    out: PathBuf,
    #[arg(long)]
    svg: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::VerifyOracle(a) => cmd_verify(a),
        Command::ProbeMi(a) => cmd_probe(a),
        Command::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<CliError>() {
                Some(CliError::Config { .. } | CliError::Override(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn exec(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let mut overrides = a
        .overrides
        .iter()
        .map(|s| config::parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = a.seed {
        overrides.push(("seed".into(), json!(seed)));
    }
    if let Some(v) = a.variant {
        overrides.push(("variant".into(), json!(v)));
    }
    let cfg = config::load(a.config.as_deref(), &overrides)?;
    if a.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(ExitCode::SUCCESS);
    }
    let dir = run_dir(&runs_root(a.runs_dir.as_deref()), &cfg);
    prepare_run_dir(&dir)?;
    Manifest::new(&cfg).write(&dir)?;
    eprintln!("run directory: {}", dir.display());
    let arts = train(&cfg, Some(&dir), exec(a.sequential))?;
    let last = arts
        .records
        .iter()
        .rev()
        .find_map(|r| r.fields.get("mean_return"))
        .map_or("n/a".to_string(), |v| format!("{v:.4}"));
    let reach = arts
        .first_update_reaching(0.9)
        .map_or("never".to_string(), |u| u.to_string());
    println!(
        "{} seed {}: {} updates, final mean_return {last}, first update at 0.9: {reach}",
        cfg.variant.name(),
        cfg.seed,
        cfg.schedule.total_updates
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(a: VerifyArgs) -> Result<ExitCode> {
    let base = match a.count {
        Some(0) => SweepCounts::zero(),
        Some(n) => SweepCounts {
            theorem2: n,
            theorem1_families: n,
            stationarity: n,
            identities: n,
            ..SweepCounts::default()
        },
        None => SweepCounts::default(),
    };
    let counts = SweepCounts {
        theorem2: a.theorem2.unwrap_or(base.theorem2),
        theorem1_families: a.families.unwrap_or(base.theorem1_families),
        family_size: a.family_size.unwrap_or(base.family_size),
        stationarity: a.stationarity.unwrap_or(base.stationarity),
        perturbations: a.perturbations.unwrap_or(base.perturbations),
        identities: a.identities.unwrap_or(base.identities),
    };
    let fault = match a.inject_fault {
        Some(InjectedFault::OffByBeta) => Fault::OffByBeta,
        None => Fault::None,
    };
    let reports = oracle::run_all(exec(a.sequential), a.seed, counts, fault);
    let total = oracle::total(&reports);
    let sweeps: BTreeMap<&str, Value> = reports
        .iter()
        .map(|(name, r)| (*name, json!({ "checks": r.checks, "failures": r.failures.len() })))
        .collect();
    let report = json!({
        "passed": total.passed(),
        "seed": a.seed,
        "checks": total.checks,
        "sweeps": sweeps,
        "failures": total.failures,
    });
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(p) = a.out {
        std::fs::write(&p, text + "\n").with_context(|| p.display().to_string())?;
    }
    Ok(if total.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PairLine {
    x: Vec<f64>,
    z: Vec<f64>,
}

#[derive(Serialize)]
struct ProbeReport {
    pairs: usize,
    mi_nats: f64,
    steps: usize,
    batch_size: usize,
}

fn read_pairs(path: &Path) -> Result<PairBatch> {
    let f = std::fs::File::open(path).with_context(|| path.display().to_string())?;
    let (mut xs, mut zs) = (Vec::new(), Vec::new());
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.with_context(|| path.display().to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PairLine = serde_json::from_str(&line).with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        xs.push(p.x);
        zs.push(p.z);
    }
    Ok(PairBatch::from_rows(&xs, &zs)?)
}

fn cmd_probe(a: ProbeArgs) -> Result<ExitCode> {
    let pairs = read_pairs(&a.pairs)?;
    let cfg = ProbeConfig {
        interval: 1,
        batch_size: a.batch_size,
        steps: a.steps,
        learning_rate: a.learning_rate,
        optimizer: match a.optimizer {
            Opt::Sgd => OptimizerKind::Sgd,
            Opt::Adam => OptimizerKind::Adam,
        },
        reinitialize: true,
        pool_size: pairs.len(),
    };
    if let Err((field, message)) = cfg.validate() {
        return Err(CliError::Config { field, message }.into());
    }
    let (_, rec) = train_probe(&cfg, &pairs, &a.hidden, a.seed, 0, None)?;
    let report = ProbeReport {
        pairs: pairs.len(),
        mi_nats: rec.mi_nats,
        steps: rec.probe_steps,
        batch_size: rec.batch_size,
    };
    println!("{}", serde_json::to_string(&report)?);
    Ok(ExitCode::SUCCESS)
}

/// Directories holding a `metrics.jsonl`, searched one level down.
fn metric_dirs(roots: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for root in roots {
        if root.join("metrics.jsonl").is_file() {
            out.push(root.clone());
            continue;
        }
        let mut found: Vec<PathBuf> = std::fs::read_dir(root)
            .with_context(|| root.display().to_string())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("metrics.jsonl").is_file())
            .collect();
        if found.is_empty() {
            bail!("{}: no metrics.jsonl here or in its subdirectories", root.display());
        }
        found.sort();
        out.extend(found);
    }
    Ok(out)
}

fn cmd_plot(a: PlotArgs) -> Result<ExitCode> {
    std::fs::create_dir_all(&a.out).with_context(|| a.out.display().to_string())?;
    let mut by_variant: BTreeMap<String, Vec<PlotSeries>> = BTreeMap::new();
    for dir in metric_dirs(&a.runs)? {
        let records = read_metrics(&dir.join("metrics.jsonl"))?;
        let Some(first) = records.first() else {
            bail!("{}: metrics file is empty", dir.display());
        };
        let label = format!("{}_seed{}", first.variant, first.seed);
        let s = plot::extract(&records, &a.field, &label)?.smoothed(a.ema)?;
        plot::write_csv(&a.out.join(format!("{}_{label}.csv", a.field)), &s)?;
        by_variant.entry(first.variant.clone()).or_default().push(s);
    }
    let mut medians = Vec::new();
    for (variant, runs) in &by_variant {
        let m = plot::aggregate(&format!("{variant} (median of {})", runs.len()), runs)?;
        let path = a.out.join(format!("{}_{variant}_median.csv", a.field));
        plot::write_csv(&path, &m)?;
        println!("{}", path.display());
        medians.push(m);
    }
    if a.svg {
        let path = a.out.join(format!("{}.svg", a.field));
        std::fs::write(&path, plot::svg(&medians, &a.field)).with_context(|| path.display().to_string())?;
        println!("{}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}
