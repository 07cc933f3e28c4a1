//! Assignment of layers, exit heads and parameters to pipeline stages.

use std::ops::Range;

use crate::error::{config_err, Result};
use crate::model::config::{ExitSpec, ModelConfig};

/// Where a parameter lives. Replicas are copies of a tied matrix held by
/// stages other than the owner; their gradients are summed into the owner.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub stage: usize,
    pub replica: bool,
}

/// One pipeline stage. Stage indices are 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    pub index: usize,
    pub layers: Range<usize>,
    /// Early-exit ids (depth order) computed on this stage.
    pub exits: Vec<usize>,
    pub has_final: bool,
    /// Parameter names bound on this stage, owned and replicated.
    pub params: Vec<String>,
}

impl StageSpec {
    pub fn is_first(&self) -> bool {
        self.index == 1
    }

    /// Number of exit heads evaluated here, final head included.
    pub fn head_count(&self) -> usize {
        self.exits.len() + usize::from(self.has_final)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StagePartition {
    pub config: ModelConfig,
    pub stages: Vec<StageSpec>,
    pub slots: Vec<ParamSlot>,
}

/// Stage (1-based) that evaluates an exit attached after `layer` layers.
/// An exit on a stage boundary goes to the beginning of the later stage.
pub fn exit_stage(layer: usize, num_layers: usize, stages: usize) -> usize {
    let per = num_layers / stages;
    (layer / per + 1).min(stages)
}

fn head_param_names(cfg: &ModelConfig, e: usize, spec: &ExitSpec) -> Vec<String> {
    let p = format!("exits.{e}");
    let mut names = Vec::new();
    use crate::model::config::HeadKind::*;
    match spec.head {
        Minimalistic => {}
        NormEmbed => names.push(format!("{p}.norm")),
        MlpEmbed => {
            for n in ["mlp.norm", "mlp.up", "mlp.down", "norm"] {
                names.push(format!("{p}.{n}"));
            }
        }
        LayerEmbed => {
            for n in ["norm1", "wq", "wk", "wv", "wo", "norm2", "up", "down"] {
                names.push(format!("{p}.layer.{n}"));
            }
            names.push(format!("{p}.norm"));
        }
    }
    if !cfg.tie_embeddings {
        names.push(format!("{p}.out"));
    }
    names
}

fn layer_param_names(l: usize) -> Vec<String> {
    ["norm1", "wq", "wk", "wv", "wo", "norm2", "up", "down"]
        .iter()
        .map(|n| format!("layers.{l}.{n}"))
        .collect()
}

impl StagePartition {
    pub fn new(cfg: &ModelConfig, p: usize) -> Result<Self> {
        cfg.validate()?;
        if p == 0 || !cfg.num_layers.is_multiple_of(p) {
            return Err(config_err(format!(
                "{} layers cannot be split evenly over {p} stages",
                cfg.num_layers
            )));
        }
        let per = cfg.num_layers / p;
        let exits = cfg.exits_by_depth();
        let mut stages = Vec::with_capacity(p);
        let mut slots = Vec::new();
        for j in 1..=p {
            let layers = (j - 1) * per..j * per;
            let mut params = Vec::new();
            let mut owned = |name: String, params: &mut Vec<String>| {
                slots.push(ParamSlot { name: name.clone(), stage: j, replica: false });
                params.push(name);
            };
            if j == 1 {
                owned("embed.tokens".into(), &mut params);
                owned("embed.positions".into(), &mut params);
            }
            for l in layers.clone() {
                for n in layer_param_names(l) {
                    owned(n, &mut params);
                }
            }
            let local: Vec<usize> = (0..exits.len()).filter(|&e| exit_stage(exits[e].layer, cfg.num_layers, p) == j).collect();
            for &e in &local {
                for n in head_param_names(cfg, e, &exits[e]) {
                    owned(n, &mut params);
                }
            }
            let has_final = j == p;
            if has_final {
                owned("final.norm".into(), &mut params);
                if !cfg.tie_embeddings {
                    owned("final.out".into(), &mut params);
                }
            }
            if cfg.tie_embeddings && j > 1 && (has_final || !local.is_empty()) {
                slots.push(ParamSlot { name: "embed.tokens".into(), stage: j, replica: true });
                params.push("embed.tokens".into());
            }
            stages.push(StageSpec { index: j, layers, exits: local, has_final, params });
        }
        Ok(StagePartition { config: cfg.clone(), stages, slots })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stage(&self, j: usize) -> &StageSpec {
        &self.stages[j - 1]
    }

    /// Stage owning the early exit with id `e`.
    pub fn stage_of_exit(&self, e: usize) -> usize {
        self.stages.iter().find(|s| s.exits.contains(&e)).map(|s| s.index).expect("every exit is placed")
    }

    pub fn has_replicas(&self) -> bool {
        self.slots.iter().any(|s| s.replica)
    }

    /// Early exits per stage, final head excluded.
    pub fn exits_per_stage(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.exits.len()).collect()
    }
}
