//! Per-token generation records.

use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InferMode {
    Pipeline,
    Recompute,
}

impl InferMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InferMode::Pipeline => "pipeline",
            InferMode::Recompute => "recompute",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TokenRecord {
    /// Position whose forward pass produced the token.
    pub position: usize,
    pub token: usize,
    /// Exit id in depth order; the final exit has the largest id.
    pub exit: usize,
    /// Backbone layers run before the exit.
    pub exit_layer: usize,
    pub exit_stage: usize,
    /// Confidence of every exit evaluated for this token, in depth order.
    pub confidences: Vec<f64>,
    /// Modeled time until this token is emitted, from the previous one.
    pub latency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenerationTrace {
    pub mode: InferMode,
    pub threshold: f64,
    pub prompt: Vec<usize>,
    pub tokens: Vec<TokenRecord>,
    pub total_latency: f64,
    /// Measured time, not part of any comparison.
    #[serde(skip)]
    pub wall_clock: f64,
}

impl GenerationTrace {
    pub fn token_ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.token).collect()
    }

    pub fn mean_exit_layer(&self) -> f64 {
        if self.tokens.is_empty() {
            return 0.0;
        }
        self.tokens.iter().map(|t| t.exit_layer as f64).sum::<f64>() / self.tokens.len() as f64
    }

    /// Modeled speedup relative to `baseline`, normally the threshold-1 run.
    pub fn speedup_over(&self, baseline: &GenerationTrace) -> f64 {
        if self.total_latency == 0.0 {
            1.0
        } else {
            baseline.total_latency / self.total_latency
        }
    }

    /// First position where two traces emit different tokens.
    pub fn first_divergence(&self, other: &GenerationTrace) -> Option<usize> {
        let n = self.tokens.len().max(other.tokens.len());
        (0..n).find(|&i| self.tokens.get(i).map(|t| t.token) != other.tokens.get(i).map(|t| t.token))
    }
}
