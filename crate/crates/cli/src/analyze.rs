use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use exitpipe::model::EarlyExitModel;
use exitpipe::pipeline::plan_bubble_fill;
use exitpipe::pipeline::program::DEFAULT_TIMES;
use exitpipe::schedule::svg::render_svg;
use exitpipe::schedule::{simulate, CostModel, ExitMode, Timeline, Variant};
use exitpipe::train::write_record;
use serde::Serialize;

use crate::{create, load_config};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Partition of the configured model
    Config,
    /// 4 stages, 6 microbatches, forward:backward 1:2, exit:backbone 1:2
    Reference,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Run config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Variant to simulate, repeatable: standard, eager-exit, deferred-exit,
    /// deferred-reordered or fill. All applicable variants by default.
    #[arg(long = "variant")]
    variants: Vec<String>,
    #[arg(long, value_enum, default_value = "config")]
    preset: Preset,
    /// Microbatches per iteration; the config's global/micro batch ratio by default
    #[arg(long)]
    microbatches: Option<usize>,
    /// Per-stage times as f,b,f_exit,b_exit
    #[arg(long, value_delimiter = ',', num_args = 4)]
    times: Option<Vec<f64>>,
    /// Directory for per-variant events, SVG charts and summary.jsonl
    #[arg(long, default_value = "schedule")]
    out_dir: PathBuf,
}

#[derive(Serialize)]
struct EventRecord<'a> {
    record: &'static str,
    variant: &'a str,
    stage: usize,
    kind: String,
    mb: String,
    start: f64,
    end: f64,
}

#[derive(Serialize)]
struct VariantSummary {
    record: &'static str,
    variant: String,
    span: f64,
    span_delta: f64,
    busy: Vec<f64>,
    idle: Vec<f64>,
    peak_memory: Vec<f64>,
    peak_memory_delta: Vec<f64>,
}

/// Cost model plus whether exits are deferred and embeddings tied.
fn cost_model(args: &AnalyzeArgs) -> Result<(CostModel, bool, bool)> {
    let cfg = load_config(Some(&args.config))?;
    let mut cost = match args.preset {
        Preset::Reference => CostModel::fig3_preset(),
        Preset::Config => {
            let model = EarlyExitModel::build(cfg.model.clone(), cfg.seed)?;
            let part = model.partition(cfg.parallelism.stages)?;
            CostModel::for_partition(&part, cfg.microbatches(), cfg.parallelism.micro_batch, DEFAULT_TIMES)
        }
    };
    if let Some(m) = args.microbatches {
        cost.microbatches = m;
    }
    if let Some(t) = &args.times {
        (cost.f, cost.b_t, cost.f_ee, cost.b_ee) = (t[0], t[1], t[2], t[3]);
    }
    cost.validate()?;
    let tied = args.preset == Preset::Config && cfg.model.tie_embeddings;
    Ok((cost, cfg.parallelism.defer_exit_forward, tied))
}

fn fill_variant(cost: &CostModel, defer: bool) -> Result<Variant> {
    let mode = if defer { ExitMode::Deferred } else { ExitMode::Eager };
    let plan = plan_bubble_fill(cost.stages, cost.f / cost.b_t)?;
    Ok(Variant::with_fill(mode, plan))
}

fn fill_applies(cost: &CostModel, tied: bool) -> bool {
    cost.stages >= 2
        && !tied
        && cost.microbatches + 1 >= cost.stages
        && plan_bubble_fill(cost.stages, cost.f / cost.b_t).is_ok_and(|p| !p.is_empty())
}

fn variants(args: &AnalyzeArgs, cost: &CostModel, defer: bool, tied: bool) -> Result<Vec<(String, Variant)>> {
    let mut out = Vec::new();
    let names: Vec<String> = if args.variants.is_empty() {
        let mut v: Vec<String> = ExitMode::ALL.iter().map(|m| m.as_str().to_string()).collect();
        if fill_applies(cost, tied) {
            v.push("fill".into());
        }
        v
    } else {
        args.variants.clone()
    };
    for name in names {
        let v = match (name.as_str(), ExitMode::parse(&name)) {
            (_, Some(mode)) => Variant::new(mode),
            ("fill", None) => {
                if tied {
                    bail!("fill needs untied embeddings");
                }
                fill_variant(cost, defer)?
            }
            _ => bail!("invalid variant {name:?}; expected one of standard, eager-exit, deferred-exit, deferred-reordered, fill"),
        };
        out.push((name, v));
    }
    Ok(out)
}

fn fmt_units(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.0}")).collect();
    format!("[{}]", parts.join(" "))
}

fn delta(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn run(args: &AnalyzeArgs) -> Result<()> {
    let (cost, defer, tied) = cost_model(args)?;
    let list = variants(args, &cost, defer, tied)?;
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let baseline: Timeline = simulate(&cost, &Variant::new(ExitMode::Standard))?;
    let mut summary = create(&args.out_dir.join("summary.jsonl"))?;
    let mut table = String::new();
    writeln!(table, "P={} M={} exits per stage {:?}", cost.stages, cost.microbatches, cost.exits_per_stage)?;
    writeln!(table, "{:<20} {:>9} {:>9}  {:<40} delta vs standard", "variant", "span", "delta", "peak memory per stage")?;
    for (name, v) in &list {
        let tl = simulate(&cost, v).with_context(|| format!("simulating {name}"))?;
        let mut events = create(&args.out_dir.join(format!("{name}.events.jsonl")))?;
        for e in tl.stages.iter().flatten() {
            let kind = format!("{:?}", e.kind).to_lowercase();
            let rec = EventRecord { record: "event", variant: name, stage: e.stage, kind, mb: e.mb.to_string(), start: e.start, end: e.end };
            write_record(&mut events, &rec)?;
        }
        events.flush()?;
        fs::write(args.out_dir.join(format!("{name}.svg")), render_svg(&tl, name))?;
        let mem_delta = delta(&tl.peak_memory, &baseline.peak_memory);
        writeln!(
            table,
            "{:<20} {:>9.2} {:>+9.2}  {:<40} {}",
            name,
            tl.span,
            tl.span - baseline.span,
            fmt_units(&tl.peak_memory),
            fmt_units(&mem_delta)
        )?;
        let rec = VariantSummary {
            record: "variant",
            variant: name.clone(),
            span: tl.span,
            span_delta: tl.span - baseline.span,
            idle: tl.idle(),
            busy: tl.busy,
            peak_memory: tl.peak_memory,
            peak_memory_delta: mem_delta,
        };
        write_record(&mut summary, &rec)?;
    }
    summary.flush()?;
    print!("{table}");
    Ok(())
}
