//! KV-cache-compatible early-exit inference: pipeline-based decoding and
//! KV recomputation, which emit the same tokens.

pub mod decision;
pub mod decoder;
pub mod kv;
pub mod pipeline;
pub mod recompute;
pub mod trace;

use serde::Serialize;

pub use decision::{exit_decision, ExitDecision};
pub use kv::{KvCache, LayerKv};
pub use pipeline::generate_pipeline;
pub use recompute::{generate_kv_recompute, DeferredToken, KvRecompute, StepResult, DEFAULT_MAX_DEFERRED};
pub use trace::{GenerationTrace, InferMode, TokenRecord};

use crate::error::{config_err, Error, Result};
use crate::model::forward::check_tokens;
use crate::model::{EarlyExitModel, ModelConfig};

/// A finished generation and the cache it left behind.
#[derive(Clone, Debug)]
pub struct Generation {
    pub trace: GenerationTrace,
    pub kv: KvCache,
    /// Positions fed through the model: the prompt plus every emitted
    /// token except the last.
    pub positions: usize,
}

impl Generation {
    pub fn kv_complete(&self) -> bool {
        self.kv.is_complete(self.positions)
    }
}

pub(crate) fn check_context(cfg: &ModelConfig, prompt: &[usize], max_new: usize) -> Result<()> {
    if prompt.is_empty() {
        return Err(config_err("prompt must not be empty"));
    }
    let needed = prompt.len() + max_new.saturating_sub(1);
    check_tokens(cfg, prompt, needed)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Full-model greedy decoding that reruns the whole sequence per token.
pub fn greedy_reference(model: &EarlyExitModel, prompt: &[usize], max_new_tokens: usize) -> Result<Vec<usize>> {
    check_context(model.config(), prompt, max_new_tokens)?;
    let v = model.config().vocab_size;
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(max_new_tokens);
    for _ in 0..max_new_tokens {
        let logits = model.forward_all_exits(&seq, 1, seq.len())?;
        let last = logits.last().expect("final exit").data();
        let t = argmax(&last[(seq.len() - 1) * v..seq.len() * v]);
        out.push(t);
        seq.push(t);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThresholdSummary {
    pub threshold: f64,
    pub tokens: usize,
    pub early_exits: usize,
    pub mean_exit_layer: f64,
    pub pipeline_latency: f64,
    pub recompute_latency: f64,
    /// Relative to the threshold-1 runs of the same prompts.
    pub pipeline_speedup: f64,
    pub recompute_speedup: f64,
    pub max_token_speedup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeComparison {
    pub stages: usize,
    pub prompts: usize,
    pub rows: Vec<ThresholdSummary>,
}

#[derive(Clone, Debug)]
pub struct CompareOptions {
    pub stages: usize,
    pub max_new_tokens: usize,
    pub max_deferred: usize,
    pub stage_times: Vec<f64>,
}

/// Runs both modes for every prompt and threshold and fails on the first
/// token or confidence that differs between them.
pub fn compare_modes(model: &EarlyExitModel, prompts: &[Vec<usize>], thresholds: &[f64], opts: &CompareOptions) -> Result<ModeComparison> {
    let part = model.partition(opts.stages)?;
    // both modes on one time scale: a full pass costs the sum of stage times
    let times = if opts.stage_times.is_empty() { vec![1.0; opts.stages] } else { opts.stage_times.clone() };
    let run = |prompt: &[usize], threshold: f64| -> Result<(Generation, Generation)> {
        let a = generate_pipeline(model, &part, prompt, threshold, opts.max_new_tokens, &times)?;
        let b = generate_kv_recompute(model, prompt, threshold, opts.max_new_tokens, opts.max_deferred, &times)?;
        Ok((a, b))
    };
    let mut baseline = (0.0, 0.0);
    for prompt in prompts {
        let (a, b) = run(prompt, 1.0)?;
        baseline.0 += a.trace.total_latency;
        baseline.1 += b.trace.total_latency;
    }
    let mut rows = Vec::with_capacity(thresholds.len());
    for &threshold in thresholds {
        let mut row = ThresholdSummary {
            threshold,
            tokens: 0,
            early_exits: 0,
            mean_exit_layer: 0.0,
            pipeline_latency: 0.0,
            recompute_latency: 0.0,
            pipeline_speedup: 0.0,
            recompute_speedup: 0.0,
            max_token_speedup: 0.0,
        };
        let mut layer_sum = 0.0;
        for (i, prompt) in prompts.iter().enumerate() {
            let (a, b) = run(prompt, threshold)?;
            let confidences_differ = a.trace.tokens.iter().zip(&b.trace.tokens).position(|(x, y)| x.confidences != y.confidences);
            if let Some(position) = a.trace.first_divergence(&b.trace).or(confidences_differ) {
                return Err(Error::Divergence { prompt: i, threshold, position });
            }
            for g in [&a, &b] {
                if let Some((layer, pos)) = g.kv.missing(g.positions).into_iter().next() {
                    return Err(Error::Protocol(format!("{} mode left {layer} empty at position {pos}", g.trace.mode.as_str())));
                }
            }
            let full: f64 = times.iter().sum();
            for t in &a.trace.tokens {
                row.max_token_speedup = row.max_token_speedup.max(full / t.latency);
            }
            row.tokens += a.trace.tokens.len();
            row.early_exits += a.trace.tokens.iter().filter(|t| t.exit < model.config().exits.len()).count();
            layer_sum += a.trace.tokens.iter().map(|t| t.exit_layer as f64).sum::<f64>();
            row.pipeline_latency += a.trace.total_latency;
            row.recompute_latency += b.trace.total_latency;
        }
        if row.tokens > 0 {
            row.mean_exit_layer = layer_sum / row.tokens as f64;
        }
        let ratio = |base: f64, x: f64| if x == 0.0 { 1.0 } else { base / x };
        row.pipeline_speedup = ratio(baseline.0, row.pipeline_latency);
        row.recompute_speedup = ratio(baseline.1, row.recompute_latency);
        rows.push(row);
    }
    Ok(ModeComparison { stages: opts.stages, prompts: prompts.len(), rows })
}
