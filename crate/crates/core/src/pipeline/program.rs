//! The early-exit transformer as a stage program.

use exitpipe_tensor::{Tape, Var};

use crate::data::Batch;
use crate::error::Result;
use crate::model::config::{ExitSpec, HeadKind};
use crate::model::forward::{self, Bound};
use crate::model::{EarlyExitModel, HeadRef, ParamMap, StagePartition};
use crate::pipeline::engine::{StageForward, StageProgram};
use crate::schedule::cost::CostModel;

/// Nominal per-unit times used for the cost model attached to training
/// runs. Only the memory units matter for replay checks.
pub const DEFAULT_TIMES: [f64; 4] = [2.0, 4.0, 1.0, 2.0];

pub struct ModelProgram<'a> {
    model: &'a EarlyExitModel,
    partition: StagePartition,
    exits: Vec<ExitSpec>,
}

impl<'a> ModelProgram<'a> {
    pub fn new(model: &'a EarlyExitModel, stages: usize) -> Result<Self> {
        let partition = model.partition(stages)?;
        let exits = model.config().exits_by_depth();
        Ok(ModelProgram { model, partition, exits })
    }

    pub fn partition(&self) -> &StagePartition {
        &self.partition
    }
}

impl StageProgram for ModelProgram<'_> {
    type Data = Batch;

    fn num_stages(&self) -> usize {
        self.partition.num_stages()
    }

    fn num_exits(&self) -> usize {
        self.model.config().num_exits()
    }

    fn stage_exits(&self, stage: usize) -> &[usize] {
        &self.partition.stage(stage).exits
    }

    fn stage_params(&self, stage: usize) -> Result<ParamMap> {
        self.partition
            .stage(stage)
            .params
            .iter()
            .map(|n| Ok((n.clone(), self.model.param(n)?.clone())))
            .collect()
    }

    fn replicas(&self) -> Vec<(String, usize)> {
        self.partition.slots.iter().filter(|s| s.replica).map(|s| (s.name.clone(), s.stage)).collect()
    }

    fn has_tied_params(&self) -> bool {
        self.model.config().tie_embeddings
    }

    fn param_order(&self) -> Vec<String> {
        self.model.params().keys().cloned().collect()
    }

    fn forward(&self, stage: usize, tape: &mut Tape, bound: &Bound, input: Option<Var>, data: &Batch) -> Result<StageForward> {
        let cfg = self.model.config();
        let spec = self.partition.stage(stage);
        let mut x = match input {
            Some(v) => v,
            None => forward::embed(tape, bound, cfg, &data.inputs, data.rows, data.seq)?,
        };
        let mut taps = Vec::with_capacity(spec.exits.len());
        for l in spec.layers.clone() {
            taps.extend(spec.exits.iter().filter(|&&e| self.exits[e].layer == l).map(|_| x));
            x = forward::block(tape, bound, &format!("layers.{l}"), x, cfg.num_heads)?;
        }
        Ok(StageForward { output: x, taps })
    }

    fn exit_loss(&self, _stage: usize, tape: &mut Tape, bound: &Bound, head: HeadRef, x: Var, data: &Batch) -> Result<Var> {
        let kind = match head {
            HeadRef::Early(e) => self.exits[e].head,
            HeadRef::Final => HeadKind::NormEmbed,
        };
        forward::exit_loss(tape, bound, self.model.config(), head, kind, x, &data.targets)
    }

    fn cost_model(&self, microbatches: usize, data: &Batch) -> CostModel {
        let mut c = CostModel::for_partition(&self.partition, microbatches, data.rows, DEFAULT_TIMES);
        c.seq = data.seq;
        c
    }
}
