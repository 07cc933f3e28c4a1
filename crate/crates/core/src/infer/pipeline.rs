//! Pipeline-based early-exit decoding: one worker per stage.
//!
//! A token is emitted by the first stage whose exit is confident enough,
//! and the next token enters stage 1 right away. The exited token keeps
//! flowing through the remaining stages from its exit hidden state so every
//! stage fills its KV. Channels are FIFO, so each stage sees positions in
//! order and a position never attends to KV that is not yet written.

use std::sync::mpsc::{channel, Receiver, Sender};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::infer::decision::{check_threshold, exit_decision};
use crate::infer::decoder::Decoder;
use crate::infer::kv::KvCache;
use crate::infer::trace::{GenerationTrace, InferMode, TokenRecord};
use crate::infer::{check_context, Generation};
use crate::model::partition::exit_stage;
use crate::model::{EarlyExitModel, HeadRef, StagePartition};
use crate::schedule::inference_latency;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Phase {
    /// Prompt position: fill KV only.
    Prefill,
    /// Still looking for an exit.
    Decide,
    /// Already emitted; continuing to fill KV.
    Exited,
}

enum Work {
    Token { pos: usize, id: usize, phase: Phase },
    Hidden { pos: usize, x: Vec<f64>, phase: Phase },
    Stop,
}

enum Event {
    Report { pos: usize, confidences: Vec<f64>, decision: Option<(usize, usize)> },
    Failed,
}

struct StageCtx<'a> {
    dec: &'a Decoder<'a>,
    stage: usize,
    last: bool,
    layers: std::ops::Range<usize>,
    threshold: f64,
}

fn hangup(stage: usize) -> Error {
    Error::Worker(format!("stage {stage}: neighbouring stage stopped"))
}

fn run_stage(ctx: &StageCtx, rx: Receiver<Work>, next: Option<Sender<Work>>, events: &Sender<Event>) -> Result<KvCache> {
    let dec = ctx.dec;
    let mut kv = KvCache::new(dec.config());
    loop {
        let (pos, mut x, mut phase) = match rx.recv().map_err(|_| hangup(ctx.stage))? {
            Work::Stop => break,
            Work::Token { pos, id, phase } => (pos, dec.embed(id, pos)?, phase),
            Work::Hidden { pos, x, phase } => (pos, x, phase),
        };
        let deciding = phase == Phase::Decide;
        let mut confidences = Vec::new();
        let mut decision = None;
        for l in ctx.layers.clone() {
            if let Some(e) = dec.exit_at(l) {
                if phase == Phase::Decide {
                    let logits = dec.head_logits(&mut kv, HeadRef::Early(e), pos, &x)?;
                    let d = exit_decision(&logits, ctx.threshold)?;
                    confidences.push(d.confidence);
                    if d.exit {
                        decision = Some((e, d.token));
                        phase = Phase::Exited;
                    }
                } else {
                    dec.head_fill(&mut kv, e, &[pos], &x)?;
                }
            }
            x = dec.block(&mut kv, l, &[pos], &x)?;
        }
        if ctx.last && phase == Phase::Decide {
            let logits = dec.head_logits(&mut kv, HeadRef::Final, pos, &x)?;
            let d = exit_decision(&logits, 1.0)?;
            confidences.push(d.confidence);
            decision = Some((dec.exits().len(), d.token));
        }
        // The report goes out before the hidden state so the driver sees
        // stages in depth order.
        if deciding {
            events.send(Event::Report { pos, confidences, decision }).map_err(|_| hangup(ctx.stage))?;
        }
        if let Some(tx) = &next {
            tx.send(Work::Hidden { pos, x, phase }).map_err(|_| hangup(ctx.stage))?;
        }
    }
    if let Some(tx) = &next {
        tx.send(Work::Stop).map_err(|_| hangup(ctx.stage))?;
    }
    Ok(kv)
}

/// Greedy decoding with exits evaluated stage by stage. `stage_times` feed
/// the latency model; they default to one unit per stage when empty.
pub fn generate_pipeline(
    model: &EarlyExitModel,
    partition: &StagePartition,
    prompt: &[usize],
    threshold: f64,
    max_new_tokens: usize,
    stage_times: &[f64],
) -> Result<Generation> {
    let cfg = model.config();
    check_threshold(threshold)?;
    check_context(cfg, prompt, max_new_tokens)?;
    if partition.config != *cfg {
        return Err(crate::error::config_err("partition was built for a different model config"));
    }
    let p = partition.num_stages();
    let times = if stage_times.is_empty() { vec![1.0; p] } else { stage_times.to_vec() };
    if times.len() != p {
        return Err(crate::error::config_err(format!("{} stage times for {p} stages", times.len())));
    }
    let start = Instant::now();
    let dec = Decoder::new(model);
    let ctxs: Vec<StageCtx> = partition
        .stages
        .iter()
        .map(|s| StageCtx { dec: &dec, stage: s.index, last: s.has_final, layers: s.layers.clone(), threshold })
        .collect();

    let (event_tx, event_rx) = channel::<Event>();
    let mut senders = Vec::with_capacity(p);
    let mut receivers = Vec::with_capacity(p);
    for _ in 0..p {
        let (tx, rx) = channel::<Work>();
        senders.push(tx);
        receivers.push(rx);
    }
    let first = senders.remove(0);
    let mut nexts: Vec<Option<Sender<Work>>> = senders.into_iter().map(Some).collect();
    nexts.push(None);

    let (driven, results) = std::thread::scope(|scope| {
        let handles: Vec<_> = ctxs
            .iter()
            .zip(receivers)
            .zip(nexts)
            .map(|((ctx, rx), next)| {
                let events = event_tx.clone();
                scope.spawn(move || {
                    let r = run_stage(ctx, rx, next, &events);
                    if r.is_err() {
                        let _ = events.send(Event::Failed);
                    }
                    r
                })
            })
            .collect();
        drop(event_tx);
        let driven = drive(&first, &event_rx, prompt, max_new_tokens);
        let _ = first.send(Work::Stop);
        drop(first);
        let results: Vec<Result<KvCache>> = handles
            .into_iter()
            .enumerate()
            .map(|(i, h)| h.join().unwrap_or_else(|_| Err(Error::Worker(format!("stage {} panicked", i + 1)))))
            .collect();
        (driven, results)
    });
    let mut errs = Vec::new();
    let mut caches = Vec::with_capacity(p);
    for r in results {
        match r {
            Ok(kv) => caches.push(kv),
            Err(e) => errs.push(e),
        }
    }
    let emitted = match driven {
        Ok(v) if errs.is_empty() => v,
        Ok(_) => return Err(root_cause(errs)),
        Err(e) => {
            errs.push(e);
            return Err(root_cause(errs));
        }
    };
    let kv = KvCache::merge(caches)?;

    let exit_layers = cfg.exit_layers();
    let stages: Vec<usize> = emitted.iter().map(|t| exit_stage(exit_layers[t.exit], cfg.num_layers, p)).collect();
    let latency = inference_latency(&stages, &times)?;
    let tokens = emitted
        .into_iter()
        .zip(stages)
        .zip(&latency.pipeline)
        .map(|((t, stage), &lat)| TokenRecord {
            position: t.pos,
            token: t.token,
            exit: t.exit,
            exit_layer: exit_layers[t.exit],
            exit_stage: stage,
            confidences: t.confidences,
            latency: lat,
        })
        .collect();
    let trace = GenerationTrace {
        mode: InferMode::Pipeline,
        threshold,
        prompt: prompt.to_vec(),
        tokens,
        total_latency: latency.pipeline_total,
        wall_clock: start.elapsed().as_secs_f64(),
    };
    Ok(Generation { trace, kv, positions: if max_new_tokens == 0 { 0 } else { prompt.len() + max_new_tokens - 1 } })
}

/// A stage's own failure rather than a neighbour's hang-up.
fn root_cause(mut errs: Vec<Error>) -> Error {
    let pos = errs.iter().position(|e| !matches!(e, Error::Worker(_))).unwrap_or(0);
    errs.swap_remove(pos)
}

struct Emitted {
    pos: usize,
    token: usize,
    exit: usize,
    confidences: Vec<f64>,
}

fn drive(first: &Sender<Work>, events: &Receiver<Event>, prompt: &[usize], max_new: usize) -> Result<Vec<Emitted>> {
    let mut out = Vec::with_capacity(max_new);
    if max_new == 0 {
        return Ok(out);
    }
    let stopped = || Error::Worker("a stage stopped during generation".into());
    let n = prompt.len();
    for (pos, &id) in prompt.iter().enumerate() {
        let phase = if pos + 1 == n { Phase::Decide } else { Phase::Prefill };
        first.send(Work::Token { pos, id, phase }).map_err(|_| stopped())?;
    }
    let mut pos = n - 1;
    loop {
        let mut confidences = Vec::new();
        let (exit, token) = loop {
            match events.recv().map_err(|_| stopped())? {
                Event::Failed => return Err(stopped()),
                Event::Report { pos: at, confidences: c, decision } => {
                    if at != pos {
                        return Err(Error::Protocol(format!("report for position {at} while deciding {pos}")));
                    }
                    confidences.extend(c);
                    if let Some(d) = decision {
                        break d;
                    }
                }
            }
        };
        out.push(Emitted { pos, token, exit, confidences });
        if out.len() == max_new {
            return Ok(out);
        }
        pos += 1;
        first.send(Work::Token { pos, id: token, phase: Phase::Decide }).map_err(|_| stopped())?;
    }
}
