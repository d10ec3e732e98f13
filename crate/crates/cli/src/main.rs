use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use monoflow_core::experiment::{self, ExperimentConfig, Plan, ProblemSpec};
use monoflow_core::plot::{self, PlotOptions, PlotSeries};
use monoflow_core::{EnsembleSummary, Error, Metric};

/// Monte-Carlo experiments for noisy monotone operator methods.
#[derive(Parser)]
#[command(name = "monoflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every method and replica of a config and write CSVs + manifest.
    Run(RunArgs),
    /// Run a config and compare ensemble means with the closed-form bounds.
    Verify(RunArgs),
    /// Plot one metric of one or more ensemble CSVs as SVG.
    Plot(PlotArgs),
    /// List the built-in problems and their parameters.
    ListProblems,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; all cores by default.
    #[arg(long)]
    threads: Option<usize>,
    /// Replace the config's master seed.
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Args)]
struct PlotArgs {
    /// Ensemble CSVs written by `run`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value = "ergodic_norm_M_sq")]
    metric: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    title: Option<String>,
}

/// Failure split by exit code: 2 for bad configs, 1 for everything else.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

fn runtime(e: anyhow::Error) -> Failure {
    Failure::Runtime(e)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(&args, false),
        Command::Verify(args) => run(&args, true),
        Command::Plot(args) => plot(&args),
        Command::ListProblems => {
            list_problems();
            Ok(ExitCode::SUCCESS)
        }
    };
    match result {
        Ok(code) => code,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_plan(args: &RunArgs) -> Result<Plan, Failure> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed_override {
        config.master_seed = seed;
    }
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    if args.threads == Some(0) {
        return Err(Failure::Config(anyhow!("--threads must be >= 1")));
    }
    Ok(config.resolve()?)
}

fn run(args: &RunArgs, check: bool) -> Result<ExitCode, Failure> {
    let plan = load_plan(args)?;
    for w in &plan.warnings {
        eprintln!("warning: {w}");
    }
    let outcome = experiment::run_experiment(&plan, args.threads)?;
    let dir = plan.config.output_dir.clone();
    let written = experiment::write_outputs(&plan, &outcome, &dir)?;
    for path in &written {
        println!("wrote {}", path.display());
    }
    for f in outcome.failures() {
        eprintln!(
            "failed: {} replica {}: {}",
            f.method.name(),
            f.replica,
            f.error
        );
    }
    let mut ok = !outcome.has_failures();
    if check {
        let report = experiment::verify(&plan, &outcome)?;
        print!("{}", report.table());
        let path = dir.join("verify.csv");
        let file = File::create(&path)
            .with_context(|| format!("cannot create {}", path.display()))
            .map_err(runtime)?;
        report.write_csv(file)?;
        println!("wrote {}", path.display());
        let passed = report.passed();
        println!(
            "verify: {}",
            if passed {
                "all checks pass"
            } else {
                "some checks FAIL"
            }
        );
        ok &= passed;
    }
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn series_label(path: &Path) -> String {
    let stem = path.file_stem().map_or_else(
        || path.display().to_string(),
        |s| s.to_string_lossy().into_owned(),
    );
    stem.strip_suffix("_ensemble")
        .map(str::to_owned)
        .unwrap_or(stem)
}

fn plot(args: &PlotArgs) -> Result<ExitCode, Failure> {
    let metric = Metric::parse(&args.metric).map_err(|e| Failure::Config(e.into()))?;
    let mut series = Vec::new();
    for path in &args.inputs {
        let file = File::open(path)
            .with_context(|| format!("cannot open {}", path.display()))
            .map_err(runtime)?;
        let summary = EnsembleSummary::read_csv(BufReader::new(file))
            .with_context(|| format!("cannot read {}", path.display()))
            .map_err(runtime)?;
        series.push(PlotSeries {
            label: series_label(path),
            summary,
        });
    }
    let mut opts = PlotOptions::new(metric);
    opts.title = args.title.clone();
    let svg = plot::render_svg(&series, &opts)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .with_context(|| format!("cannot create {}", parent.display()))
            .map_err(runtime)?;
    }
    fs::write(&args.out, svg)
        .with_context(|| format!("cannot write {}", args.out.display()))
        .map_err(runtime)?;
    println!("wrote {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn list_problems() {
    for name in ProblemSpec::NAMES {
        let params = match name {
            "bilinear" => "n (block size, >= 2); dimension 2n",
            "rotation" => "none; dimension 2",
            "identity-strong" => "n (even, default 2), kappa (default 1)",
            _ => "n",
        };
        println!("{name:<16} {params}");
    }
}
