//! Command-line front end of the experiment harness.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use truncdp::harness::{self, RunConfig, Task, TrialPlan, Truth};
use truncdp::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "truncdp", version, about = "Differentially private estimation via truncated likelihoods")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path; overrides the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Trials per grid point; overrides the configuration.
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Disable all privacy noise.
    #[cfg(debug_assertions)]
    #[arg(long, global = true)]
    test_mode: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset and its ground truth.
    Gen,
    /// Private Gaussian mean estimation.
    EstimateMean,
    /// Private Gaussian covariance estimation.
    EstimateCov,
    /// Private natural-parameter estimation for the configured family.
    EstimateExpfam,
    /// Repeated trials over a grid of sample sizes.
    Sweep,
    /// Gradient-bound, neighbouring-preservation and calibration audit.
    Audit,
    /// Summarise result CSV files.
    Report {
        /// Result files written by `sweep` or `estimate-*`.
        inputs: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    if let Some(trials) = cli.trials {
        cfg.trials = trials;
    }
    #[cfg(debug_assertions)]
    if cli.test_mode {
        cfg.test_mode = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Config(format!("json: {e}")))
}

fn estimate(mut cfg: RunConfig, task: Task) -> Result<()> {
    cfg.task = task;
    cfg.validate()?;
    let data = match &cfg.data {
        Some(p) => Some(harness::read_dataset(p)?.0),
        None => None,
    };
    let mut rows = Vec::with_capacity(cfg.trials);
    let mut stdout = std::io::stdout().lock();
    for trial in 0..cfg.trials {
        let (report, row) = harness::run_trial(&cfg, cfg.n, trial, data.as_ref())?;
        writeln!(stdout, "{}", json(&report)?)?;
        rows.push(row);
    }
    if let Some(out) = &cfg.out {
        harness::write_csv(std::fs::File::create(out)?, &rows)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Report { inputs } = &cli.command {
        let mut rows = Vec::new();
        for p in inputs {
            rows.extend(harness::read_results(p)?);
        }
        return harness::write_csv(open_out(cli.out.as_deref())?, &harness::summarize(&rows));
    }
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Gen => {
            let out = cfg.out.clone().ok_or_else(|| Error::Config("gen needs --out".into()))?;
            let truth = Truth::from_config(&cfg)?;
            let rows = TrialPlan::new(&cfg, cfg.n)?.total_raw();
            let data = harness::generate(&cfg, &truth, rows, cfg.seed)?;
            harness::write_dataset(&out, &data, cfg.seed)?;
            let mut truth_path = out.into_os_string();
            truth_path.push(".truth");
            std::fs::write(PathBuf::from(truth_path), format!("{}\n", truth_line(&truth)))?;
            Ok(())
        }
        Command::EstimateMean => estimate(cfg, Task::Mean),
        Command::EstimateCov => estimate(cfg, Task::Cov),
        Command::EstimateExpfam => estimate(cfg, Task::Expfam),
        Command::Sweep => {
            let rows = harness::sweep(&cfg, harness::thread_count())?;
            harness::write_csv(open_out(cfg.out.as_deref())?, &rows)?;
            harness::write_csv(std::io::stderr().lock(), &harness::summarize(&rows))
        }
        Command::Audit => {
            let report = harness::audit(&cfg)?;
            writeln!(open_out(cfg.out.as_deref())?, "{}", json(&report)?)?;
            if report.passed() {
                Ok(())
            } else {
                Err(Error::InsufficientData("audit found violations".into()))
            }
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
}

fn truth_line(truth: &Truth) -> String {
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
    match truth {
        Truth::Mean(v) => format!("mean={}", join(v)),
        Truth::Theta(v) => format!("theta={}", join(v)),
        Truth::Covariance(m) => format!("covariance={}", join(m.transpose().as_slice())),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
