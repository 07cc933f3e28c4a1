//! Early-exit decoding with KV recomputation on a single worker.
//!
//! Tokens that exit early are kept with their exit hidden state. The next
//! forward pass carries them alongside the current position, resuming each
//! from where it stopped, so their missing KV is filled for every layer the
//! pass covers. Once the list holds `max_deferred` tokens the pass runs to
//! full depth regardless of where the current token exits.

use std::time::Instant;

use crate::error::{config_err, Error, Result};
use crate::infer::decision::{check_threshold, exit_decision};
use crate::infer::decoder::Decoder;
use crate::infer::kv::KvCache;
use crate::infer::trace::{GenerationTrace, InferMode, TokenRecord};
use crate::infer::{check_context, Generation};
use crate::model::partition::exit_stage;
use crate::model::{EarlyExitModel, HeadRef};

pub const DEFAULT_MAX_DEFERRED: usize = 4;

/// A position whose KV is missing from `layer` upward.
#[derive(Clone, Debug, PartialEq)]
pub struct DeferredToken {
    pub position: usize,
    /// Backbone layers already applied to `hidden`.
    pub layer: usize,
    pub hidden: Vec<f64>,
    /// Whether the exits tapping `layer` have seen this position.
    tapped: bool,
}

struct Row {
    pos: usize,
    layer: usize,
    x: Vec<f64>,
    tapped: bool,
}

/// Outcome of deciding one position.
#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub token: usize,
    pub exit: usize,
    pub confidences: Vec<f64>,
    /// Backbone layers the pass ran.
    pub depth: usize,
    pub forced: bool,
}

pub struct KvRecompute<'m> {
    dec: Decoder<'m>,
    kv: KvCache,
    deferred: Vec<DeferredToken>,
    threshold: f64,
    max_deferred: usize,
    next_pos: usize,
}

impl<'m> KvRecompute<'m> {
    pub fn new(model: &'m EarlyExitModel, threshold: f64, max_deferred: usize) -> Result<Self> {
        check_threshold(threshold)?;
        if max_deferred == 0 {
            return Err(config_err("max_deferred must be at least 1"));
        }
        Ok(KvRecompute {
            dec: Decoder::new(model),
            kv: KvCache::new(model.config()),
            deferred: Vec::new(),
            threshold,
            max_deferred,
            next_pos: 0,
        })
    }

    pub fn cache(&self) -> &KvCache {
        &self.kv
    }

    pub fn deferred(&self) -> &[DeferredToken] {
        &self.deferred
    }

    /// Positions fed so far.
    pub fn positions(&self) -> usize {
        self.next_pos
    }

    fn embed_row(&mut self, token: usize) -> Result<Row> {
        let pos = self.next_pos;
        let x = self.dec.embed(token, pos)?;
        self.next_pos += 1;
        Ok(Row { pos, layer: 0, x, tapped: false })
    }

    /// Runs prompt tokens through every layer without exiting.
    pub fn prefill(&mut self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let mut rows = std::mem::take(&mut self.deferred).into_iter().map(Row::from).collect::<Vec<_>>();
        for &t in tokens {
            rows.push(self.embed_row(t)?);
        }
        self.pass(rows, false, true).map(|_| ())
    }

    /// Feeds `token` at the next position and decides the token after it.
    pub fn step(&mut self, token: usize) -> Result<StepResult> {
        let forced = self.deferred.len() >= self.max_deferred;
        let mut rows = std::mem::take(&mut self.deferred).into_iter().map(Row::from).collect::<Vec<_>>();
        rows.push(self.embed_row(token)?);
        let (decided, depth) = self.pass(rows, true, forced)?;
        let (exit, token, confidences) = decided.expect("a live pass always decides");
        Ok(StepResult { token, exit, confidences, depth, forced })
    }

    /// Completes the KV of every deferred position.
    pub fn flush(&mut self) -> Result<()> {
        let rows = std::mem::take(&mut self.deferred).into_iter().map(Row::from).collect::<Vec<_>>();
        if rows.is_empty() {
            return Ok(());
        }
        self.pass(rows, false, true).map(|_| ())
    }

    /// One batched forward pass. With `live`, the last row is the current
    /// position and is decided; the pass stops at its exit unless `full`.
    #[allow(clippy::type_complexity)]
    fn pass(&mut self, mut rows: Vec<Row>, live: bool, full: bool) -> Result<(Option<(usize, usize, Vec<f64>)>, usize)> {
        let dec = &self.dec;
        let layers = dec.config().num_layers;
        let live_idx = if live { Some(rows.len() - 1) } else { None };
        let mut deciding = live;
        let mut decided = None;
        let mut confidences = Vec::new();
        let from = rows.iter().map(|r| r.layer).min().unwrap_or(layers);
        let mut stop = layers;
        for l in from..=layers {
            if let Some(e) = dec.exit_at(l) {
                let fill: Vec<usize> = (0..rows.len())
                    .filter(|&i| rows[i].layer <= l && !(rows[i].layer == l && rows[i].tapped))
                    .filter(|&i| !(deciding && Some(i) == live_idx))
                    .collect();
                if !fill.is_empty() {
                    let pos: Vec<usize> = fill.iter().map(|&i| rows[i].pos).collect();
                    let x: Vec<f64> = fill.iter().flat_map(|&i| rows[i].x.iter().copied()).collect();
                    dec.head_fill(&mut self.kv, e, &pos, &x)?;
                }
                if deciding {
                    let row = &rows[live_idx.expect("deciding implies live")];
                    let logits = dec.head_logits(&mut self.kv, HeadRef::Early(e), row.pos, &row.x)?;
                    let d = exit_decision(&logits, self.threshold)?;
                    confidences.push(d.confidence);
                    if d.exit {
                        decided = Some((e, d.token));
                        deciding = false;
                        if !full {
                            stop = l;
                            break;
                        }
                    }
                }
            }
            if l == layers {
                if deciding {
                    let row = &rows[live_idx.expect("deciding implies live")];
                    let logits = dec.head_logits(&mut self.kv, HeadRef::Final, row.pos, &row.x)?;
                    let d = exit_decision(&logits, 1.0)?;
                    confidences.push(d.confidence);
                    decided = Some((dec.exits().len(), d.token));
                }
                break;
            }
            let active: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].layer <= l).collect();
            let pos: Vec<usize> = active.iter().map(|&i| rows[i].pos).collect();
            let x: Vec<f64> = active.iter().flat_map(|&i| rows[i].x.iter().copied()).collect();
            let out = dec.block(&mut self.kv, l, &pos, &x)?;
            let h = dec.config().hidden_dim;
            for (k, &i) in active.iter().enumerate() {
                rows[i].x = out[k * h..(k + 1) * h].to_vec();
            }
        }
        for row in rows {
            if row.layer <= stop {
                if stop < layers {
                    self.deferred.push(DeferredToken { position: row.pos, layer: stop, hidden: row.x, tapped: true });
                }
            } else {
                self.deferred.push(DeferredToken { position: row.pos, layer: row.layer, hidden: row.x, tapped: row.tapped });
            }
        }
        self.deferred.sort_by_key(|d| d.position);
        if self.deferred.len() > self.max_deferred {
            return Err(Error::Protocol(format!(
                "deferred list holds {} tokens, limit {}",
                self.deferred.len(),
                self.max_deferred
            )));
        }
        Ok((decided.map(|(e, t)| (e, t, confidences)), stop))
    }
}

impl From<DeferredToken> for Row {
    fn from(d: DeferredToken) -> Self {
        Row { pos: d.position, layer: d.layer, x: d.hidden, tapped: d.tapped }
    }
}

/// Greedy decoding with KV recomputation. `stage_times` set the modeled
/// cost of each pass, split evenly over the layers of a stage; empty means
/// one unit per stage on a single stage.
pub fn generate_kv_recompute(
    model: &EarlyExitModel,
    prompt: &[usize],
    threshold: f64,
    max_new_tokens: usize,
    max_deferred: usize,
    stage_times: &[f64],
) -> Result<Generation> {
    let cfg = model.config();
    check_context(cfg, prompt, max_new_tokens)?;
    let times = if stage_times.is_empty() { vec![1.0] } else { stage_times.to_vec() };
    let p = times.len();
    if !cfg.num_layers.is_multiple_of(p) {
        return Err(config_err(format!("{} layers cannot be split over {p} stages", cfg.num_layers)));
    }
    let per = cfg.num_layers / p;
    let layer_time = |l: usize| times[l / per] / per as f64;
    let start = Instant::now();
    let mut run = KvRecompute::new(model, threshold, max_deferred)?;
    let exit_layers = cfg.exit_layers();
    let mut tokens = Vec::with_capacity(max_new_tokens);
    if max_new_tokens > 0 {
        let n = prompt.len();
        run.prefill(&prompt[..n - 1])?;
        let mut next = prompt[n - 1];
        for _ in 0..max_new_tokens {
            let position = run.positions();
            let s = run.step(next)?;
            let layer = exit_layers[s.exit];
            tokens.push(TokenRecord {
                position,
                token: s.token,
                exit: s.exit,
                exit_layer: layer,
                exit_stage: exit_stage(layer, cfg.num_layers, p),
                confidences: s.confidences,
                latency: (0..s.depth).map(layer_time).sum(),
            });
            next = s.token;
        }
        run.flush()?;
    }
    let positions = run.positions();
    let trace = GenerationTrace {
        mode: InferMode::Recompute,
        threshold,
        prompt: prompt.to_vec(),
        total_latency: tokens.iter().map(|t| t.latency).sum(),
        tokens,
        wall_clock: start.elapsed().as_secs_f64(),
    };
    Ok(Generation { trace, kv: run.kv, positions })
}
