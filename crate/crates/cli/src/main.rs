mod analyze;
mod generate;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use exitpipe::checkpoint;
use exitpipe::train::{write_record, RunConfig, Trainer};
use exitpipe::verify::{run_suite, CRITERIA};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "exitpipe", version, about = "Early-exit training under a simulated 1F1B pipeline, and early-exit decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the configured model and write per-step metrics and a checkpoint
    Train(TrainArgs),
    /// Simulate schedule variants and write timelines plus a summary table
    AnalyzeSchedule(analyze::AnalyzeArgs),
    /// Decode from a checkpoint with early exits
    Generate(generate::GenerateArgs),
    /// Run the acceptance checks; exits nonzero if any fails
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Metrics output, one JSON record per line
    #[arg(long, default_value = "metrics.jsonl")]
    metrics: PathBuf,
    /// Checkpoint written after the last step
    #[arg(long, default_value = "model.ckpt")]
    checkpoint: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Run config (TOML); the built-in default when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Only run these criteria, e.g. `--only 1,3`
    #[arg(long, value_delimiter = ',')]
    only: Vec<u8>,
}

pub(crate) fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn train(args: &TrainArgs) -> Result<()> {
    let cfg = load_config(Some(&args.config))?;
    let mut trainer = Trainer::new(cfg)?;
    let mut out = create(&args.metrics)?;
    let metrics = trainer.run(&mut out)?;
    out.flush()?;
    checkpoint::save(trainer.model(), &args.checkpoint)?;
    match metrics.last() {
        Some(m) => eprintln!("{} steps, final losses {:.4?}", metrics.len(), m.loss),
        None => eprintln!("no steps run"),
    }
    eprintln!("metrics: {}, checkpoint: {}", args.metrics.display(), args.checkpoint.display());
    Ok(())
}

#[derive(Serialize)]
struct VerifySummary {
    record: &'static str,
    passed: bool,
    failed: Vec<u8>,
}

fn verify(args: &VerifyArgs) -> Result<bool> {
    let cfg = load_config(args.config.as_deref())?;
    if let Some(bad) = args.only.iter().find(|&&id| !CRITERIA.iter().any(|(c, _)| *c == id)) {
        bail!("unknown criterion {bad}; expected 1 to {}", CRITERIA.len());
    }
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut io_err = None;
    let reports = run_suite(&cfg, &args.only, |r| {
        eprintln!("{}", r.line());
        if let Err(e) = write_record(&mut out, r) {
            io_err.get_or_insert(e);
        }
    });
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let failed: Vec<u8> = reports.iter().filter(|r| !r.passed).map(|r| r.id).collect();
    write_record(&mut out, &VerifySummary { record: "summary", passed: failed.is_empty(), failed: failed.clone() })?;
    Ok(failed.is_empty())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train(a).map(|_| true),
        Command::AnalyzeSchedule(a) => analyze::run(a).map(|_| true),
        Command::Generate(a) => generate::run(a).map(|_| true),
        Command::Verify(a) => verify(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
