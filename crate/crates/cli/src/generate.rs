use std::io::{self, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use exitpipe::checkpoint;
use exitpipe::infer::{compare_modes, generate_kv_recompute, generate_pipeline, CompareOptions, Generation, ThresholdSummary, TokenRecord};
use exitpipe::train::{write_record, Corpus, GenerateMode};
use serde::Serialize;

use crate::load_config;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Pipeline,
    Recompute,
    Both,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run config supplying inference defaults (stages, thresholds, max_deferred)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Prompt token ids separated by spaces or commas
    #[arg(long, required_unless_present = "compare")]
    prompt: Option<String>,
    /// Confidence an exit must exceed to emit; 1 disables early exits
    #[arg(long, default_value_t = 0.9)]
    threshold: f64,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Deferred-token cap for KV recomputation
    #[arg(long)]
    max_deferred: Option<usize>,
    /// Pipeline stages; defaults to the config's
    #[arg(long)]
    stages: Option<usize>,
    /// Compare both modes on the config's prompts at every configured threshold
    #[arg(long)]
    compare: bool,
}

#[derive(Serialize)]
struct TokenLine<'a> {
    record: &'static str,
    mode: &'static str,
    #[serde(flatten)]
    token: &'a TokenRecord,
}

#[derive(Serialize)]
struct ThresholdLine<'a> {
    record: &'static str,
    #[serde(flatten)]
    row: &'a ThresholdSummary,
}

#[derive(Serialize)]
struct Summary {
    record: &'static str,
    mode: &'static str,
    threshold: f64,
    tokens: Vec<usize>,
    early_exits: usize,
    mean_exit_layer: f64,
    total_latency: f64,
    kv_complete: bool,
}

fn parse_prompt(text: &str) -> Result<Vec<usize>> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().with_context(|| format!("bad token id {s:?}")))
        .collect()
}

fn emit(out: &mut dyn Write, g: &Generation, exits: usize) -> Result<()> {
    let mode = g.trace.mode.as_str();
    for t in &g.trace.tokens {
        write_record(out, &TokenLine { record: "token", mode, token: t })?;
    }
    let summary = Summary {
        record: "summary",
        mode,
        threshold: g.trace.threshold,
        tokens: g.trace.token_ids(),
        early_exits: g.trace.tokens.iter().filter(|t| t.exit < exits).count(),
        mean_exit_layer: g.trace.mean_exit_layer(),
        total_latency: g.trace.total_latency,
        kv_complete: g.kv_complete(),
    };
    write_record(out, &summary)?;
    eprintln!("{mode}: modeled latency {:.3}, wall clock {:.4}s", g.trace.total_latency, g.trace.wall_clock);
    Ok(())
}

pub fn run(args: &GenerateArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let model = checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let inf = &cfg.inference;
    let stages = args.stages.unwrap_or(cfg.parallelism.stages);
    let max_new = args.max_new_tokens.unwrap_or(inf.max_new_tokens);
    let max_deferred = args.max_deferred.unwrap_or(inf.max_deferred);
    let stage_times = if inf.stage_times.len() == stages { inf.stage_times.clone() } else { vec![1.0; stages] };
    let stdout = io::stdout();
    let mut out = stdout.lock();

    if args.compare {
        if args.config.is_none() {
            bail!("--compare draws prompts from the corpus and needs --config");
        }
        let prompts = Corpus::open(&cfg)?.prompts(inf.prompts, 6)?;
        let opts = CompareOptions { stages, max_new_tokens: max_new, max_deferred, stage_times };
        let cmp = compare_modes(&model, &prompts, &inf.thresholds, &opts)?;
        eprintln!("{:>9} {:>7} {:>7} {:>10} {:>9} {:>9}", "threshold", "tokens", "exits", "mean layer", "pipeline", "recompute");
        for row in &cmp.rows {
            eprintln!(
                "{:>9} {:>7} {:>7} {:>10.3} {:>8.3}x {:>8.3}x",
                row.threshold, row.tokens, row.early_exits, row.mean_exit_layer, row.pipeline_speedup, row.recompute_speedup
            );
            write_record(&mut out, &ThresholdLine { record: "threshold", row })?;
        }
        return Ok(());
    }

    let prompt = parse_prompt(args.prompt.as_deref().unwrap_or_default())?;
    let mode = args.mode.unwrap_or(match inf.mode {
        GenerateMode::Pipeline => Mode::Pipeline,
        GenerateMode::Recompute => Mode::Recompute,
        GenerateMode::Both => Mode::Both,
    });
    let exits = model.config().exits.len();
    let mut runs = Vec::new();
    if mode != Mode::Recompute {
        let part = model.partition(stages)?;
        runs.push(generate_pipeline(&model, &part, &prompt, args.threshold, max_new, &stage_times)?);
    }
    if mode != Mode::Pipeline {
        runs.push(generate_kv_recompute(&model, &prompt, args.threshold, max_new, max_deferred, &stage_times)?);
    }
    for g in &runs {
        emit(&mut out, g, exits)?;
    }
    if let [a, b] = &runs[..] {
        if let Some(pos) = a.trace.first_divergence(&b.trace) {
            bail!("pipeline and recompute modes diverge at token {pos}");
        }
    }
    Ok(())
}
