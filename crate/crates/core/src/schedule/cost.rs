use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::model::config::{head_param_count, layer_param_count};
use crate::model::StagePartition;

/// Stored activation floats per token per backbone layer, in units of `h`:
/// q, k, v, attention output, two residual inputs, two norm outputs and
/// the 4h-wide MLP pre- and post-activation. Attention probabilities are
/// left out.
pub const ACT_FLOATS_PER_TOKEN_LAYER: usize = 16;

/// How early exits are scheduled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitMode {
    /// Early exits ignored; only the final head is costed.
    Standard,
    /// Exit forward in the forward step, exit backward in the backward step.
    Eager,
    /// Exit forward moved into the backward step.
    Deferred,
    /// Deferred, with each exit forward split out ahead of the gradient
    /// dependency. Modeled only; the trainer does not run it.
    DeferredReordered,
}

impl ExitMode {
    pub const ALL: [ExitMode; 4] = [ExitMode::Standard, ExitMode::Eager, ExitMode::Deferred, ExitMode::DeferredReordered];

    pub fn as_str(self) -> &'static str {
        match self {
            ExitMode::Standard => "standard",
            ExitMode::Eager => "eager-exit",
            ExitMode::Deferred => "deferred-exit",
            ExitMode::DeferredReordered => "deferred-reordered",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    pub fn defers(self) -> bool {
        matches!(self, ExitMode::Deferred | ExitMode::DeferredReordered)
    }
}

/// Analytic per-unit costs and memory dimensions of one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub stages: usize,
    pub microbatches: usize,
    /// Backbone forward time per stage per microbatch.
    pub f: f64,
    /// Backbone backward time per stage per microbatch.
    pub b_t: f64,
    pub f_ee: f64,
    pub b_ee: f64,
    #[serde(default)]
    pub embed_f: f64,
    #[serde(default)]
    pub p2p_latency: f64,
    pub seq: usize,
    pub micro_batch: usize,
    pub vocab: usize,
    pub hidden: usize,
    pub layers_per_stage: usize,
    /// Early exits per stage; the final head is implicit on the last stage.
    pub exits_per_stage: Vec<usize>,
    /// Parameter memory per stage. Zero when not modeled.
    #[serde(default)]
    pub param_units: Vec<f64>,
}

impl CostModel {
    /// The layout of the reference figure: 4 stages, 6 microbatches,
    /// forward:backward 1:2, backbone:exit forward 2:1, one exit on each
    /// middle stage.
    pub fn fig3_preset() -> Self {
        CostModel {
            stages: 4,
            microbatches: 6,
            f: 2.0,
            b_t: 4.0,
            f_ee: 1.0,
            b_ee: 2.0,
            embed_f: 0.0,
            p2p_latency: 0.0,
            seq: 64,
            micro_batch: 2,
            vocab: 256,
            hidden: 64,
            layers_per_stage: 2,
            exits_per_stage: vec![0, 1, 1, 0],
            param_units: vec![0.0; 4],
        }
    }

    /// Cost model for a partitioned model, with parameter memory from the
    /// closed-form per-stage counts.
    pub fn for_partition(part: &StagePartition, microbatches: usize, micro_batch: usize, times: [f64; 4]) -> Self {
        let cfg = &part.config;
        let p = part.num_stages();
        CostModel {
            stages: p,
            microbatches,
            f: times[0],
            b_t: times[1],
            f_ee: times[2],
            b_ee: times[3],
            embed_f: 0.0,
            p2p_latency: 0.0,
            seq: cfg.max_seq_len,
            micro_batch,
            vocab: cfg.vocab_size,
            hidden: cfg.hidden_dim,
            layers_per_stage: cfg.num_layers / p,
            exits_per_stage: part.exits_per_stage(),
            param_units: stage_param_formula(part),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.microbatches == 0 {
            return Err(config_err("cost model needs at least one stage and one microbatch"));
        }
        for (name, v) in [("f", self.f), ("b_t", self.b_t)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(config_err(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("f_ee", self.f_ee), ("b_ee", self.b_ee), ("embed_f", self.embed_f), ("p2p_latency", self.p2p_latency)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(config_err(format!("{name} must be non-negative")));
            }
        }
        if self.exits_per_stage.len() != self.stages {
            return Err(config_err("exits_per_stage must list every stage"));
        }
        if !self.param_units.is_empty() && self.param_units.len() != self.stages {
            return Err(config_err("param_units must list every stage"));
        }
        Ok(())
    }

    /// Early exits on `stage` that the given mode costs.
    pub fn exits_at(&self, stage: usize, mode: ExitMode) -> usize {
        if mode == ExitMode::Standard {
            0
        } else {
            self.exits_per_stage[stage - 1]
        }
    }

    /// Number of early exits on middle stages, the `k` of the overhead
    /// formulas.
    pub fn middle_exits(&self) -> usize {
        if self.stages < 3 {
            return 0;
        }
        self.exits_per_stage[1..self.stages - 1].iter().sum()
    }

    pub fn logits_units(&self) -> f64 {
        (self.seq * self.micro_batch * self.vocab) as f64
    }

    /// Activation memory of one in-flight microbatch on one stage.
    pub fn activation_units(&self) -> f64 {
        (ACT_FLOATS_PER_TOKEN_LAYER * self.hidden * self.seq * self.micro_batch * self.layers_per_stage) as f64
    }

    pub fn params_at(&self, stage: usize) -> f64 {
        self.param_units.get(stage - 1).copied().unwrap_or(0.0)
    }
}

/// Per-stage parameter count by formula, tied replicas included.
pub fn stage_param_formula(part: &StagePartition) -> Vec<f64> {
    let cfg = &part.config;
    let (h, v, s) = (cfg.hidden_dim, cfg.vocab_size, cfg.max_seq_len);
    let exits = cfg.exits_by_depth();
    let out = if cfg.tie_embeddings { 0 } else { v * h };
    part.stages
        .iter()
        .map(|st| {
            let mut n = st.layers.len() * layer_param_count(h);
            if st.is_first() {
                n += v * h + s * h;
            }
            n += st.exits.iter().map(|&e| head_param_count(exits[e].head, h) + out).sum::<usize>();
            if st.has_final {
                n += h + out;
            }
            if cfg.tie_embeddings && !st.is_first() && st.head_count() > 0 {
                n += v * h;
            }
            n as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EarlyExitModel, ExitSpec, HeadKind, ModelConfig};

    #[test]
    fn preset_is_valid() {
        let c = CostModel::fig3_preset();
        c.validate().unwrap();
        assert_eq!(c.middle_exits(), 2);
        assert_eq!(c.f / c.b_t, 0.5);
        assert_eq!(c.f / c.f_ee, 2.0);
    }

    #[test]
    fn formula_matches_enumeration_per_stage() {
        for tie in [false, true] {
            let cfg = ModelConfig {
                tie_embeddings: tie,
                exits: vec![ExitSpec::new(0, HeadKind::NormEmbed, 0.1), ExitSpec::new(5, HeadKind::LayerEmbed, 0.2)],
                ..Default::default()
            };
            let m = EarlyExitModel::build(cfg, 0).unwrap();
            let part = m.partition(4).unwrap();
            let formula = stage_param_formula(&part);
            for st in &part.stages {
                let n: usize = st.params.iter().map(|p| m.params()[p].numel()).sum();
                assert_eq!(n as f64, formula[st.index - 1]);
            }
        }
    }
}
