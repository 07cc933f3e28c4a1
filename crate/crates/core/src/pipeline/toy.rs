//! A linear-Gaussian stage program with closed-form behaviour, used for
//! statistical checks of bubble filling.

use exitpipe_tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{config_err, Result};
use crate::model::forward::Bound;
use crate::model::{HeadRef, ParamMap};
use crate::pipeline::engine::{StageForward, StageProgram};
use crate::schedule::cost::CostModel;

/// Stage `j` adds `theta.j` to its input: `x_j = x_{j-1} + θ_j`, `x_0 = u`.
/// Every exit charges `½‖x − y‖²` against its own target.
pub struct LinearToy {
    stages: usize,
    dim: usize,
    exits_on: Vec<Vec<usize>>,
    params: ParamMap,
    target_means: Vec<f64>,
}

/// One microbatch: the input `u` and one target per exit, final last.
#[derive(Clone, Debug)]
pub struct ToySample {
    pub input: Tensor,
    pub targets: Vec<Tensor>,
}

impl LinearToy {
    /// `exit_stages` lists the stage of each early exit in depth order.
    pub fn new(stages: usize, dim: usize, exit_stages: &[usize], theta: f64) -> Result<Self> {
        if stages == 0 || dim == 0 {
            return Err(config_err("toy model needs stages and a dimension"));
        }
        if exit_stages.windows(2).any(|w| w[0] > w[1]) || exit_stages.iter().any(|&s| s == 0 || s > stages) {
            return Err(config_err("toy exit stages must be sorted and within range"));
        }
        let mut exits_on = vec![Vec::new(); stages];
        for (e, &s) in exit_stages.iter().enumerate() {
            exits_on[s - 1].push(e);
        }
        let params = (1..=stages).map(|j| (format!("theta.{j}"), Tensor::full(&[1, dim], theta))).collect();
        let target_means = (0..=exit_stages.len()).map(|e| 1.0 + 0.5 * e as f64).collect();
        Ok(LinearToy { stages, dim, exits_on, params, target_means })
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Input `u ~ N(0, I)`, target of exit `e` drawn from `N(m_e, I)` with
    /// `m_e = 1 + e/2`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ToySample {
        let mut draw = |mean: f64| {
            let data = (0..self.dim).map(|_| mean + rng.sample::<f64, _>(StandardNormal)).collect();
            Tensor::new(vec![1, self.dim], data).expect("shape")
        };
        let input = draw(0.0);
        let targets = self.target_means.iter().map(|&m| draw(m)).collect();
        ToySample { input, targets }
    }
}

impl StageProgram for LinearToy {
    type Data = ToySample;

    fn num_stages(&self) -> usize {
        self.stages
    }

    fn num_exits(&self) -> usize {
        self.target_means.len()
    }

    fn stage_exits(&self, stage: usize) -> &[usize] {
        &self.exits_on[stage - 1]
    }

    fn stage_params(&self, stage: usize) -> Result<ParamMap> {
        let name = format!("theta.{stage}");
        Ok([(name.clone(), self.params[&name].clone())].into_iter().collect())
    }

    fn replicas(&self) -> Vec<(String, usize)> {
        Vec::new()
    }

    fn has_tied_params(&self) -> bool {
        false
    }

    fn param_order(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    fn forward(&self, stage: usize, tape: &mut Tape, bound: &Bound, input: Option<Var>, data: &ToySample) -> Result<StageForward> {
        let x = match input {
            Some(v) => v,
            None => tape.constant(data.input.clone()),
        };
        let out = tape.add(x, bound.get(&format!("theta.{stage}"))?)?;
        Ok(StageForward { output: out, taps: vec![out; self.exits_on[stage - 1].len()] })
    }

    fn exit_loss(&self, _stage: usize, tape: &mut Tape, _bound: &Bound, head: HeadRef, x: Var, data: &ToySample) -> Result<Var> {
        let e = match head {
            HeadRef::Early(e) => e,
            HeadRef::Final => self.num_exits() - 1,
        };
        let mut neg = data.targets[e].clone();
        neg.scale_in_place(-1.0);
        let y = tape.constant(neg);
        let d = tape.add(x, y)?;
        let sq = tape.mul(d, d)?;
        let s = tape.sum(sq)?;
        Ok(tape.scale(s, 0.5)?)
    }

    fn cost_model(&self, microbatches: usize, _data: &ToySample) -> CostModel {
        CostModel {
            stages: self.stages,
            microbatches,
            f: 1.0,
            b_t: 2.0,
            f_ee: 0.5,
            b_ee: 1.0,
            embed_f: 0.0,
            p2p_latency: 0.0,
            seq: 1,
            micro_batch: 1,
            vocab: self.dim,
            hidden: self.dim,
            layers_per_stage: 1,
            exits_per_stage: self.exits_on.iter().map(Vec::len).collect(),
            param_units: vec![self.dim as f64; self.stages],
        }
    }
}
