mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use subprune::bundle::{load_bundle, save_bundle, DType};
use subprune::multilayer::Variant;
use subprune::netexec::{bundle_from_model, forward_capture, model_from_bundle, Dataset, NetworkModel};
use subprune::objective::Fault;
use subprune::pipeline::{budget_plans, run, BudgetMode, RunConfig, DEFAULT_BATCH};
use subprune::synth::{synth_bundle, Arch, SynthConfig, DEFAULT_MLP, DEFAULT_SAMPLES};
use subprune::verify::{rank_diagnostic, run_suite, SuiteConfig};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Verification(String),
    #[error(transparent)]
    Core(#[from] subprune::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(subprune::Error::Infeasible { .. }) => 2,
            CliError::Verification(_) => 3,
            _ => 1,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "subprune",
    version,
    about = "Structured pruning by greedy input-change minimization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random teacher network, data and captures as a bundle.
    Synth(SynthArgs),
    /// Prune a bundle for each compression ratio and seed; write CSV/JSON reports.
    Prune(PruneArgs),
    /// Print per-layer budgets for each compression ratio.
    Budget(BudgetArgs),
    /// Run the brute-force verification suite on random tiny problems.
    Verify(VerifyArgs),
    /// Per-layer rank diagnostic of the captured activations.
    Rankdiag(RankdiagArgs),
    /// Summarize JSON reports from `prune` into a table and plot data.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// `mlp:d0,d1,...` or `lenet-toy`.
    #[arg(long, default_value = DEFAULT_MLP)]
    arch: String,
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// layer, seq, asym, weightnorm or random.
    #[arg(long, default_value = "asym")]
    variant: String,
    /// Compression ratios (original size / pruned size), comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "4")]
    compression: Vec<f64>,
    /// accuracy, threshold or equal-fraction.
    #[arg(long, default_value = "accuracy")]
    budget_mode: String,
    /// Pruning batch drawn from the non-verification samples.
    #[arg(long, default_value_t = DEFAULT_BATCH)]
    batch: usize,
    /// Use stochastic greedy with this ε.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Keep original successor weights for the baseline variants.
    #[arg(long)]
    no_reweight_baselines: bool,
    /// Relative residual tolerance for rank-deficient columns.
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Args)]
struct PruneArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Seeds, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seed: Vec<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Skip writing pruned bundles.
    #[arg(long)]
    no_bundles: bool,
}

#[derive(Args)]
struct BudgetArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the plans as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 50)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Deliberately break the gain formula (`flip-gain-sign`) to exercise the suite.
    #[arg(long)]
    inject_fault: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RankdiagArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// `report.json` files written by `prune`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Write the aggregated plot data CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn load(path: &Path) -> CliResult<(NetworkModel, Dataset)> {
    let bundle = load_bundle(path).map_err(subprune::Error::from)?;
    Ok(model_from_bundle(&bundle)?)
}

fn run_config(args: &RunArgs, seeds: Vec<u64>) -> CliResult<RunConfig> {
    let variant: Variant = args.variant.parse().map_err(usage)?;
    let mut cfg = RunConfig::new(variant, args.compression.clone(), seeds);
    cfg.budget_mode = args.budget_mode.parse::<BudgetMode>().map_err(usage)?;
    cfg.batch = args.batch;
    cfg.epsilon = args.epsilon;
    cfg.reweight_baselines = !args.no_reweight_baselines;
    if let Some(t) = args.tolerance {
        cfg.tolerance = t;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> CliResult<()> {
    let arch: Arch = args.arch.parse().map_err(usage)?;
    let cfg = SynthConfig::new(arch, args.samples, args.seed);
    let bundle = synth_bundle(&cfg).map_err(|e| match e {
        subprune::Error::InvalidParameter(m) => CliError::Usage(m),
        other => other.into(),
    })?;
    save_bundle(&bundle, &args.out).map_err(subprune::Error::from)?;
    println!("wrote {} ({} tensors)", args.out.display(), bundle.tensors.len());
    Ok(())
}

fn cmd_prune(args: PruneArgs) -> CliResult<()> {
    let cfg = run_config(&args.run, args.seed.clone())?;
    let (model, data) = load(&args.run.bundle)?;
    let report = run(&model, &data, &cfg)?;
    fs::create_dir_all(&args.out)?;
    report::write_rows_csv(&args.out.join("report.csv"), &report.rows)?;
    report::write_plot_csv(&args.out.join("plot.csv"), &report::aggregate(report::rows_of(&report)))?;
    write_json(&args.out.join("report.json"), &report)?;
    if !args.no_bundles {
        let dir = args.out.join("pruned");
        fs::create_dir_all(&dir)?;
        for (row, pruned) in report.rows.iter().zip(&report.models) {
            let bundle = bundle_from_model(pruned, &data, None, DType::F64)?;
            let name = format!("{}_c{}_seed{}.zip", row.variant.as_str(), row.c, row.seed);
            save_bundle(&bundle, dir.join(name)).map_err(subprune::Error::from)?;
        }
    }
    println!(
        "original: acc1 {:.4}, params {}, flops {}",
        report.original.acc1, report.original.params, report.original.flops
    );
    report::print_rows(&report.rows);
    Ok(())
}

fn cmd_budget(args: BudgetArgs) -> CliResult<()> {
    let cfg = run_config(&args.run, vec![args.seed])?;
    let (model, data) = load(&args.run.bundle)?;
    let plans = budget_plans(&model, &data, &cfg, args.seed)?;
    println!(
        "{:>6} {:>10} {:>10} {:>10}  budgets",
        "c", "tau/level", "size", "original"
    );
    for p in &plans {
        let budgets: Vec<String> = p
            .budgets
            .iter()
            .map(|(&l, &k)| format!("{}={}/{}", model.layers[l].name, k, model.layers[l].units()))
            .collect();
        let level = p.tau.or(p.level).map_or("-".into(), |v| format!("{v:.4}"));
        println!(
            "{:>6} {:>10} {:>10} {:>10}  {}",
            p.compression,
            level,
            p.size,
            p.original_size,
            budgets.join(" ")
        );
    }
    if let Some(out) = args.out {
        write_json(
            &out,
            &serde_json::json!({ "config": cfg, "seed": args.seed, "plans": plans }),
        )?;
    }
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> CliResult<()> {
    let fault = match args.inject_fault.as_deref() {
        None => Fault::None,
        Some("flip-gain-sign") => Fault::FlipGainSign,
        Some(other) => return Err(CliError::Usage(format!("unknown fault {other:?} (flip-gain-sign)"))),
    };
    let cfg = SuiteConfig {
        instances: args.instances,
        seed: args.seed,
        fault,
    };
    let report = run_suite(&cfg)?;
    let mut names: Vec<&str> = report.checks.iter().map(|c| c.check).collect();
    names.sort_unstable();
    names.dedup();
    println!("{:<26} {:>6} {:>6} {:>12}", "check", "runs", "fails", "min margin");
    for name in names {
        let runs: Vec<_> = report.checks.iter().filter(|c| c.check == name).collect();
        let fails = runs.iter().filter(|c| !c.passed).count();
        let margin = runs.iter().map(|c| c.margin).fold(f64::INFINITY, f64::min);
        println!("{name:<26} {:>6} {fails:>6} {margin:>12.3e}", runs.len());
    }
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    if report.passed {
        println!("all checks passed");
        Ok(())
    } else {
        Err(CliError::Verification(format!("{} check(s) failed", report.violations)))
    }
}

fn cmd_rankdiag(args: RankdiagArgs) -> CliResult<()> {
    let (model, data) = load(&args.bundle)?;
    let pool = data.inputs.select_samples(&data.pruning_pool());
    let (_, caps) = forward_capture(&model, &pool)?;
    let mut rows = Vec::new();
    println!(
        "{:<12} {:>6} {:>6} {:>8} {:>4} {:>6} {:>8}",
        "layer", "units", "rank", "columns", "g", "max k", "k/n"
    );
    for cap in &caps.layers {
        let g = cap.groups.members(0).len();
        let d = rank_diagnostic(&cap.matrix, g)?;
        let name = &model.layers[cap.layer].name;
        println!(
            "{name:<12} {:>6} {:>6} {:>8} {:>4} {:>6} {:>8.3}",
            d.units, d.rank, d.columns, d.group_size, d.max_k, d.fraction
        );
        rows.push(serde_json::json!({ "layer": name, "diagnostic": d }));
    }
    if let Some(out) = args.out {
        write_json(&out, &rows)?;
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> CliResult<()> {
    let mut rows = Vec::new();
    for path in &args.inputs {
        rows.extend(report::read_rows(path)?);
    }
    let summary = report::aggregate(rows);
    report::print_summary(&summary);
    if let Some(out) = args.out {
        report::write_plot_csv(&out, &summary)?;
    }
    Ok(())
}

fn set_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("SUBPRUNE_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Usage(format!("SUBPRUNE_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
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
    let result = set_threads().and_then(|_| match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Prune(a) => cmd_prune(a),
        Command::Budget(a) => cmd_budget(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Rankdiag(a) => cmd_rankdiag(a),
        Command::Report(a) => cmd_report(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
