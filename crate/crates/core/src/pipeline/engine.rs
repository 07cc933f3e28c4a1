//! One training iteration under 1F1B: one thread per stage, ordered
//! channels between neighbours, and per-stage action lists shared with the
//! simulator.

use std::collections::HashMap;
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::time::Instant;

use exitpipe_tensor::{Tape, Tensor, Var};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::forward::{self, Bound};
use crate::model::{HeadRef, ParamMap};
use crate::pipeline::aux::{backward_send, compute_aux_loss};
use crate::pipeline::fill::{FillPlan, ResolvedFill};
use crate::pipeline::messages::{ActivationMessage, GradientMessage};
use crate::pipeline::weights::WeightSchedule;
use crate::schedule::actions::{route, stage_actions, Action, ActionKind, Mb};
use crate::schedule::cost::{CostModel, ExitMode};
use crate::schedule::replay::ExecutedStage;
use crate::schedule::sim::MemoryTracker;

/// What a stage's backbone produced for one microbatch.
pub struct StageForward {
    /// Activation sent downstream; on the last stage, the input of the final head.
    pub output: Var,
    /// Hidden states read by this stage's early exits, in `stage_exits` order.
    pub taps: Vec<Var>,
}

/// A model split into stages. Implemented by the transformer and by small
/// analytic models used in statistical tests.
pub trait StageProgram: Sync {
    type Data: Sync;

    fn num_stages(&self) -> usize;
    /// Exits including the final one.
    fn num_exits(&self) -> usize;
    /// Early-exit ids (depth order) evaluated on 1-based `stage`.
    fn stage_exits(&self, stage: usize) -> &[usize];
    fn stage_params(&self, stage: usize) -> Result<ParamMap>;
    /// `(name, stage)` of every replica of a tied parameter.
    fn replicas(&self) -> Vec<(String, usize)>;
    fn has_tied_params(&self) -> bool;
    /// Order of the merged gradient map.
    fn param_order(&self) -> Vec<String>;
    fn forward(&self, stage: usize, tape: &mut Tape, bound: &Bound, input: Option<Var>, data: &Self::Data) -> Result<StageForward>;
    fn exit_loss(&self, stage: usize, tape: &mut Tape, bound: &Bound, head: HeadRef, x: Var, data: &Self::Data) -> Result<Var>;
    /// Cost model whose memory units the trainer charges. Must agree with
    /// what the simulator is given for replay checks.
    fn cost_model(&self, microbatches: usize, data: &Self::Data) -> CostModel;
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationOptions {
    pub defer_exit_forward: bool,
    pub fill: Option<FillPlan>,
    pub schedule: WeightSchedule,
    pub step: u64,
    /// Applies the `B/(B+m)` factors for inserted microbatches. Only turned
    /// off to show that the estimate becomes biased without them.
    pub rescale_fill: bool,
}

impl IterationOptions {
    pub fn new(schedule: WeightSchedule) -> Self {
        IterationOptions { defer_exit_forward: false, fill: None, schedule, step: 0, rescale_fill: true }
    }

    pub fn deferred(mut self, on: bool) -> Self {
        self.defer_exit_forward = on;
        self
    }

    pub fn with_fill(mut self, plan: FillPlan) -> Self {
        self.fill = Some(plan);
        self
    }

    pub fn mode(&self) -> ExitMode {
        if self.defer_exit_forward {
            ExitMode::Deferred
        } else {
            ExitMode::Eager
        }
    }
}

/// Extra microbatches consumed by a fill plan, indexed by `i - 1`.
pub struct Extra<'a, D> {
    pub part1: &'a [D],
    pub part2: &'a [D],
}

impl<D> Default for Extra<'_, D> {
    fn default() -> Self {
        Extra { part1: &[], part2: &[] }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MicrobatchCounts {
    pub regular: usize,
    pub part1: usize,
    pub part2: usize,
}

/// Deterministic summary of one iteration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainStepReport {
    /// Mean loss of each exit over the regular microbatches, depth order.
    pub per_exit_loss: Vec<f64>,
    pub weights: Vec<f64>,
    pub weighted_loss: f64,
    /// Gradient norm of each stage's parameters before tied sync.
    pub grad_norms: Vec<f64>,
    pub peak_memory: Vec<f64>,
    pub max_in_flight: Vec<usize>,
    pub microbatches: MicrobatchCounts,
    /// Activation and gradient messages across each stage boundary.
    pub messages: Vec<(usize, usize)>,
}

/// Wall-clock seconds of one stage split into 1F1B phases. Kept out of the
/// report so the report stays reproducible.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct PhaseTimes {
    pub warmup: f64,
    pub steady: f64,
    pub cooldown: f64,
}

pub struct IterationOutput {
    pub grads: ParamMap,
    pub report: TrainStepReport,
    pub executed: Vec<ExecutedStage>,
    pub wall_clock: Vec<PhaseTimes>,
    pub fill: ResolvedFill,
}

/// Sums replica gradients into their owners. Owners are the entries not
/// listed in `replicas`; replicas are added in stage order.
pub fn sync_tied(stage_grads: &[ParamMap], replicas: &[(String, usize)]) -> Result<ParamMap> {
    let is_replica = |name: &str, stage: usize| replicas.iter().any(|(n, s)| n == name && *s == stage);
    let mut out = ParamMap::new();
    for (j, g) in stage_grads.iter().enumerate() {
        for (name, t) in g {
            if !is_replica(name, j + 1) && out.insert(name.clone(), t.clone()).is_some() {
                return Err(Error::Protocol(format!("parameter {name} owned by two stages")));
            }
        }
    }
    for (j, g) in stage_grads.iter().enumerate() {
        for (name, t) in g {
            if is_replica(name, j + 1) {
                let owner = out
                    .get_mut(name)
                    .ok_or_else(|| Error::Protocol(format!("replica of {name} has no owner")))?;
                owner.add_assign(t)?;
            }
        }
    }
    Ok(out)
}

struct Links {
    act_in: Option<Receiver<ActivationMessage>>,
    act_out: Option<SyncSender<ActivationMessage>>,
    grad_in: Option<Receiver<GradientMessage>>,
    grad_out: Option<SyncSender<GradientMessage>>,
}

fn hung_up(stage: usize) -> Error {
    Error::Worker(format!("stage {stage}: neighbouring stage stopped"))
}

struct Shared<'a, D> {
    p: usize,
    fill: &'a ResolvedFill,
    micro: &'a [D],
    extra: &'a Extra<'a, D>,
    weights: &'a [f64],
    defer: bool,
    rescale: bool,
    scale: f64,
    cost: &'a CostModel,
}

impl<D> Shared<'_, D> {
    fn data(&self, mb: Mb) -> Result<&D> {
        let (list, idx) = match mb {
            Mb::Regular(k) => (self.micro, k),
            Mb::Part1(i) => (self.extra.part1, i - 1),
            Mb::Part2(i) => (self.extra.part2, i - 1),
        };
        list.get(idx).ok_or_else(|| Error::Fill(format!("no data for microbatch {mb}")))
    }
}

struct InFlight {
    tape: Tape,
    bound: Bound,
    input: Option<Var>,
    output: Var,
    taps: Vec<Var>,
    early: Vec<Var>,
    final_loss: Option<Var>,
}

struct StageResult {
    grads: ParamMap,
    losses: Vec<(usize, usize, f64)>,
    executed: ExecutedStage,
    max_in_flight: usize,
    phases: PhaseTimes,
}

fn record_early<P: StageProgram>(prog: &P, j: usize, st: &mut InFlight, data: &P::Data) -> Result<()> {
    if !st.early.is_empty() {
        return Err(Error::Protocol(format!("stage {j}: exit forward evaluated twice")));
    }
    for (&e, &tap) in prog.stage_exits(j).iter().zip(&st.taps) {
        let l = prog.exit_loss(j, &mut st.tape, &st.bound, HeadRef::Early(e), tap, data)?;
        st.early.push(l);
    }
    Ok(())
}

fn run_stage<P: StageProgram>(prog: &P, j: usize, actions: &[Action], sh: &Shared<P::Data>, links: Links) -> Result<StageResult> {
    let p = sh.p;
    let params = prog.stage_params(j)?;
    let names: Vec<String> = params.keys().cloned().collect();
    let exits = prog.stage_exits(j);
    let last = prog.num_exits() - 1;
    let factor = if sh.rescale { sh.fill.loss_factor(j, sh.micro.len()) } else { 1.0 };
    let weight = |w: f64| if factor == 1.0 { w } else { w * factor };
    let act = sh.cost.activation_units();
    let logits = sh.cost.logits_units();
    let mut tracker = MemoryTracker::new(sh.cost.params_at(j));
    let mut in_flight: HashMap<Mb, InFlight> = HashMap::new();
    let mut max_in_flight = 0;
    let mut acc: Option<ParamMap> = None;
    let mut losses = Vec::new();
    let mut executed = ExecutedStage::default();

    let first_b = actions.iter().position(|a| a.kind == ActionKind::Backward).unwrap_or(actions.len());
    let last_f = actions.iter().rposition(|a| a.kind == ActionKind::Forward).unwrap_or(0);
    let mut phases = PhaseTimes::default();

    for (idx, &a) in actions.iter().enumerate() {
        let started = Instant::now();
        let mb = a.mb;
        let r = route(mb, p, sh.fill);
        let data = sh.data(mb)?;
        let k = if r.backwards(j) { exits.len() } else { 0 };
        let fin = usize::from(j == p && r.backwards(j));
        match a.kind {
            ActionKind::Forward => {
                let mut tape = Tape::new();
                let bound = Bound::bind_subset(&mut tape, &params, names.iter().map(String::as_str))?;
                let input = match &links.act_in {
                    None => None,
                    Some(rx) => {
                        let msg = rx.recv().map_err(|_| hung_up(j))?;
                        if msg.mb != mb {
                            return Err(Error::Protocol(format!(
                                "stage {j} expected activation of microbatch {mb}, got {}",
                                msg.mb
                            )));
                        }
                        Some(tape.leaf(msg.hidden, true))
                    }
                };
                let fwd = prog.forward(j, &mut tape, &bound, input, data)?;
                if j < r.forward_last {
                    let tx = links.act_out.as_ref().ok_or_else(|| hung_up(j))?;
                    let hidden = tape.value(fwd.output).clone();
                    tx.send(ActivationMessage { mb, hidden }).map_err(|_| hung_up(j))?;
                }
                if r.backwards(j) {
                    let mut st = InFlight {
                        tape,
                        bound,
                        input,
                        output: fwd.output,
                        taps: fwd.taps,
                        early: Vec::new(),
                        final_loss: None,
                    };
                    // The final head is always evaluated during the forward step.
                    if fin == 1 {
                        st.final_loss = Some(prog.exit_loss(j, &mut st.tape, &st.bound, HeadRef::Final, st.output, data)?);
                    }
                    if !sh.defer {
                        record_early(prog, j, &mut st, data)?;
                    }
                    let live = if sh.defer { fin } else { k + fin };
                    tracker.forward(act, live as f64 * logits);
                    in_flight.insert(mb, st);
                    max_in_flight = max_in_flight.max(in_flight.len());
                } else {
                    tracker.transient(act);
                }
            }
            ActionKind::Backward => {
                let mut st = in_flight
                    .remove(&mb)
                    .ok_or_else(|| Error::Protocol(format!("stage {j}: backward of microbatch {mb} without a pending forward")))?;
                if sh.defer {
                    record_early(prog, j, &mut st, data)?;
                }
                let mut vars = st.early.clone();
                let mut ws: Vec<f64> = exits.iter().map(|&e| weight(sh.weights[e])).collect();
                if let Some(f) = st.final_loss {
                    vars.push(f);
                    ws.push(weight(sh.weights[last]));
                }
                if let Mb::Regular(kk) = mb {
                    let ids = exits.iter().copied().chain(st.final_loss.map(|_| last));
                    for (e, &v) in ids.zip(&vars) {
                        let value = st.tape.value(v).item()?;
                        if !value.is_finite() {
                            return Err(Error::NonFiniteLoss(format!("stage {j} microbatch {mb}")));
                        }
                        losses.push((e, kk, value));
                    }
                }
                let local = forward::weighted_sum(&mut st.tape, &vars, &ws, sh.scale)?;
                let received = if j < r.backward_last {
                    let rx = links.grad_in.as_ref().ok_or_else(|| hung_up(j))?;
                    let msg = rx.recv().map_err(|_| hung_up(j))?;
                    if msg.mb != mb {
                        return Err(Error::Protocol(format!(
                            "stage {j} expected gradient of microbatch {mb}, got {}",
                            msg.mb
                        )));
                    }
                    Some(msg.grad)
                } else {
                    None
                };
                let aux = compute_aux_loss(&mut st.tape, local, received.as_ref(), st.output)?;
                let input = if j > r.backward_first { st.input } else { None };
                let (mut grads, msg) = backward_send(&mut st.tape, aux, input, mb)?;
                if let Some(msg) = msg {
                    let tx = links.grad_out.as_ref().ok_or_else(|| hung_up(j))?;
                    tx.send(msg).map_err(|_| hung_up(j))?;
                }
                let g = forward::collect_grads(&st.bound, &mut grads);
                match &mut acc {
                    None => acc = Some(g),
                    Some(acc) => {
                        for (n, t) in g {
                            acc.get_mut(&n).expect("same parameter set").add_assign(&t)?;
                        }
                    }
                }
                let (held, transient) = if sh.defer { (fin, k) } else { (k + fin, 0) };
                tracker.backward(act, held as f64 * logits, transient as f64 * logits);
            }
            ActionKind::ExitForward => {
                return Err(Error::Protocol("split exit forwards are not executed by the trainer".into()));
            }
        }
        executed.events.push((a.kind, mb));
        let secs = started.elapsed().as_secs_f64();
        if idx < first_b {
            phases.warmup += secs;
        } else if idx <= last_f {
            phases.steady += secs;
        } else {
            phases.cooldown += secs;
        }
    }
    if let Some(mb) = in_flight.keys().next() {
        return Err(Error::Protocol(format!("stage {j}: microbatch {mb} never ran backward")));
    }
    let mut acc = acc.unwrap_or_default();
    let sf = if sh.rescale { sh.fill.stage_factor(j, p, sh.micro.len()) } else { 1.0 };
    let mut grads = ParamMap::new();
    for (n, t) in params {
        let mut g = acc.swap_remove(&n).unwrap_or_else(|| Tensor::zeros(t.shape()));
        if sf != 1.0 {
            g.scale_in_place(sf);
        }
        grads.insert(n, g);
    }
    executed.peak_memory = tracker.peak;
    Ok(StageResult { grads, losses, executed, max_in_flight, phases })
}

/// Runs one 1F1B iteration over `micro` (the regular microbatches, in id
/// order) and returns accumulated gradients of
/// `(1/B) Σ_k Σ_i w_i L_i(mb_k)` for every parameter.
pub fn run_iteration<P: StageProgram>(prog: &P, micro: &[P::Data], extra: &Extra<P::Data>, opts: &IterationOptions) -> Result<IterationOutput> {
    let p = prog.num_stages();
    let m = micro.len();
    if m == 0 {
        return Err(Error::InvalidConfig("an iteration needs at least one microbatch".into()));
    }
    opts.schedule.validate(prog.num_exits())?;
    let weights = opts.schedule.weight_at_step(opts.step)?;
    let fill = match &opts.fill {
        None => ResolvedFill::default(),
        Some(plan) => {
            let exits: Vec<usize> = (1..=p).map(|j| prog.stage_exits(j).len()).collect();
            plan.resolve(&exits, prog.has_tied_params(), m)?
        }
    };
    if fill.part1.iter().any(|f| f.index > extra.part1.len()) || fill.part2.iter().any(|f| f.index > extra.part2.len()) {
        return Err(Error::Fill("fill plan needs more extra microbatches than supplied".into()));
    }
    let cost = prog.cost_model(m, &micro[0]);
    let lists = stage_actions(p, m, &fill, &[]);
    let sh = Shared {
        p,
        fill: &fill,
        micro,
        extra,
        weights: &weights,
        defer: opts.defer_exit_forward,
        rescale: opts.rescale_fill,
        scale: 1.0 / m as f64,
        cost: &cost,
    };
    // Capacity equals the number of messages crossing each boundary, so
    // sends never block and ordering alone drives the schedule.
    let mut links: Vec<Links> = (0..p).map(|_| Links { act_in: None, act_out: None, grad_in: None, grad_out: None }).collect();
    let mut messages = Vec::with_capacity(p.saturating_sub(1));
    for j in 1..p {
        let acts = lists[j].iter().filter(|a| a.kind == ActionKind::Forward).count();
        let grads = lists[j - 1]
            .iter()
            .filter(|a| a.kind == ActionKind::Backward && route(a.mb, p, &fill).backward_last > j)
            .count();
        let (atx, arx) = sync_channel(acts.max(1));
        let (gtx, grx) = sync_channel(grads.max(1));
        links[j - 1].act_out = Some(atx);
        links[j].act_in = Some(arx);
        links[j].grad_out = Some(gtx);
        links[j - 1].grad_in = Some(grx);
        messages.push((acts, grads));
    }
    let results: Vec<Result<StageResult>> = std::thread::scope(|scope| {
        let handles: Vec<_> = links
            .into_iter()
            .enumerate()
            .map(|(idx, l)| {
                let list = &lists[idx];
                let sh = &sh;
                scope.spawn(move || run_stage(prog, idx + 1, list, sh, l))
            })
            .collect();
        handles
            .into_iter()
            .enumerate()
            .map(|(idx, h)| h.join().unwrap_or_else(|_| Err(Error::Worker(format!("stage {} panicked", idx + 1)))))
            .collect()
    });
    // Report the root cause rather than a neighbour's hang-up.
    if results.iter().any(|r| r.is_err()) {
        let mut errs: Vec<Error> = results.into_iter().filter_map(|r| r.err()).collect();
        let pos = errs.iter().position(|e| !matches!(e, Error::Worker(_))).unwrap_or(0);
        return Err(errs.swap_remove(pos));
    }
    let results: Vec<StageResult> = results.into_iter().map(|r| r.expect("checked")).collect();

    let stage_grads: Vec<ParamMap> = results.iter().map(|r| r.grads.clone()).collect();
    let grad_norms = stage_grads
        .iter()
        .map(|g| g.values().map(|t| t.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt())
        .collect();
    let merged = sync_tied(&stage_grads, &prog.replicas())?;
    let mut grads = ParamMap::new();
    for name in prog.param_order() {
        let g = merged
            .get(&name)
            .ok_or_else(|| Error::Protocol(format!("no stage produced a gradient for {name}")))?;
        grads.insert(name, g.clone());
    }

    let mut table = vec![vec![0.0; m]; prog.num_exits()];
    for r in &results {
        for &(e, k, v) in &r.losses {
            table[e][k] = v;
        }
    }
    let per_exit_loss: Vec<f64> = table.iter().map(|row| row.iter().sum::<f64>() / m as f64).collect();
    let weighted_loss = per_exit_loss.iter().zip(&weights).map(|(l, w)| l * w).sum();
    let report = TrainStepReport {
        per_exit_loss,
        weights,
        weighted_loss,
        grad_norms,
        peak_memory: results.iter().map(|r| r.executed.peak_memory).collect(),
        max_in_flight: results.iter().map(|r| r.max_in_flight).collect(),
        microbatches: MicrobatchCounts { regular: m, part1: fill.part1.len(), part2: fill.part2.len() },
        messages,
    };
    Ok(IterationOutput {
        grads,
        report,
        executed: results.iter().map(|r| r.executed.clone()).collect(),
        wall_clock: results.iter().map(|r| r.phases).collect(),
        fill,
    })
}
