//! Earliest-start simulation of fixed per-stage action lists.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pipeline::fill::{FillPlan, ResolvedFill};
use crate::schedule::actions::{route, stage_actions, Action, ActionKind, Mb};
use crate::schedule::cost::{CostModel, ExitMode};

const TIME_EPS: f64 = 1e-9;

/// A schedule variant: exit handling plus an optional bubble fill.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub mode: ExitMode,
    pub fill: Option<FillPlan>,
}

impl Variant {
    pub fn new(mode: ExitMode) -> Self {
        Variant { mode, fill: None }
    }

    pub fn with_fill(mode: ExitMode, plan: FillPlan) -> Self {
        Variant { mode, fill: Some(plan) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Event {
    pub stage: usize,
    pub kind: ActionKind,
    pub mb: Mb,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Timeline {
    pub mode: ExitMode,
    /// Events per stage in execution order; index 0 is stage 1.
    pub stages: Vec<Vec<Event>>,
    pub span: f64,
    pub busy: Vec<f64>,
    pub peak_memory: Vec<f64>,
}

impl Timeline {
    pub fn idle(&self) -> Vec<f64> {
        self.busy.iter().map(|b| self.span - b).collect()
    }

    pub fn event(&self, stage: usize, kind: ActionKind, mb: Mb) -> Option<&Event> {
        self.stages[stage - 1].iter().find(|e| e.kind == kind && e.mb == mb)
    }
}

/// Resolves a variant's fill plan against the cost model's exit placement.
pub fn resolve_fill(cost: &CostModel, variant: &Variant) -> Result<ResolvedFill> {
    match &variant.fill {
        None => Ok(ResolvedFill::default()),
        Some(plan) => {
            let exits: Vec<usize> = (1..=cost.stages).map(|j| cost.exits_at(j, variant.mode)).collect();
            plan.resolve(&exits, false, cost.microbatches)
        }
    }
}

/// Duration of one action under `mode`.
pub fn duration(cost: &CostModel, mode: ExitMode, fill: &ResolvedFill, stage: usize, action: Action) -> f64 {
    let r = route(action.mb, cost.stages, fill);
    // Exits are only evaluated where the microbatch also runs backward.
    let k = if r.backwards(stage) { cost.exits_at(stage, mode) as f64 } else { 0.0 };
    let fin = if stage == cost.stages && r.backwards(stage) { 1.0 } else { 0.0 };
    let embed = if stage == 1 { cost.embed_f } else { 0.0 };
    match (action.kind, mode) {
        (ActionKind::Forward, ExitMode::Standard | ExitMode::Eager) => cost.f + embed + (k + fin) * cost.f_ee,
        (ActionKind::Forward, _) => cost.f + embed + fin * cost.f_ee,
        (ActionKind::Backward, ExitMode::Standard | ExitMode::Eager) => cost.b_t + (k + fin) * cost.b_ee,
        (ActionKind::Backward, ExitMode::Deferred) => cost.b_t + fin * cost.b_ee + k * (cost.f_ee + cost.b_ee),
        (ActionKind::Backward, ExitMode::DeferredReordered) => cost.b_t + (k + fin) * cost.b_ee,
        (ActionKind::ExitForward, _) => k * cost.f_ee,
    }
}

/// Action lists the simulator runs for `variant`.
pub fn actions_for(cost: &CostModel, mode: ExitMode, fill: &ResolvedFill) -> Vec<Vec<Action>> {
    let split: Vec<bool> = (1..=cost.stages)
        .map(|j| mode == ExitMode::DeferredReordered && cost.exits_at(j, mode) > 0)
        .collect();
    stage_actions(cost.stages, cost.microbatches, fill, &split)
}

/// Cross-stage predecessor of an action, if any.
pub fn dependency(p: usize, fill: &ResolvedFill, stage: usize, action: Action) -> Option<(usize, Action)> {
    let r = route(action.mb, p, fill);
    match action.kind {
        ActionKind::Forward if stage > 1 => Some((stage - 1, action)),
        ActionKind::Backward if stage < r.backward_last => Some((stage + 1, action)),
        _ => None,
    }
}

pub fn simulate(cost: &CostModel, variant: &Variant) -> Result<Timeline> {
    cost.validate()?;
    let fill = resolve_fill(cost, variant)?;
    simulate_resolved(cost, variant.mode, &fill)
}

/// Simulation with an already resolved fill, for searches over depths.
pub fn simulate_resolved(cost: &CostModel, mode: ExitMode, fill: &ResolvedFill) -> Result<Timeline> {
    let p = cost.stages;
    let lists = actions_for(cost, mode, fill);
    let mut done: HashMap<(usize, Action), f64> = HashMap::new();
    let mut next = vec![0usize; p];
    let mut free = vec![0.0f64; p];
    let mut stages: Vec<Vec<Event>> = vec![Vec::new(); p];
    let total: usize = lists.iter().map(|l| l.len()).sum();
    let mut scheduled = 0;
    while scheduled < total {
        let mut progressed = false;
        for j in 1..=p {
            while next[j - 1] < lists[j - 1].len() {
                let a = lists[j - 1][next[j - 1]];
                let ready = match dependency(p, fill, j, a) {
                    None => Some(0.0),
                    Some(dep) => done.get(&dep).map(|&t| t + cost.p2p_latency),
                };
                let Some(ready) = ready else { break };
                let start = free[j - 1].max(ready);
                let end = start + duration(cost, mode, fill, j, a);
                done.insert((j, a), end);
                stages[j - 1].push(Event { stage: j, kind: a.kind, mb: a.mb, start, end });
                free[j - 1] = end;
                next[j - 1] += 1;
                scheduled += 1;
                progressed = true;
            }
        }
        if !progressed {
            return Err(Error::Protocol("action lists deadlock".into()));
        }
    }
    let span = free.iter().cloned().fold(0.0, f64::max);
    let busy = stages.iter().map(|evs| evs.iter().map(|e| e.end - e.start).sum()).collect();
    let peak_memory = (1..=p).map(|j| stage_peak_memory(cost, mode, fill, j, &lists[j - 1])).collect();
    Ok(Timeline { mode, stages, span, busy, peak_memory })
}

/// Memory walk over one stage's actions: parameters, stored activations of
/// in-flight microbatches, and exit logits while they are alive.
pub fn stage_peak_memory(cost: &CostModel, mode: ExitMode, fill: &ResolvedFill, stage: usize, actions: &[Action]) -> f64 {
    let mut tracker = MemoryTracker::new(cost.params_at(stage));
    let act = cost.activation_units();
    let logits = cost.logits_units();
    for &a in actions {
        let r = route(a.mb, cost.stages, fill);
        let k = if r.backwards(stage) { cost.exits_at(stage, mode) } else { 0 };
        let fin = usize::from(stage == cost.stages && r.backwards(stage));
        match a.kind {
            ActionKind::Forward => {
                if r.backwards(stage) {
                    let live = if mode.defers() { fin } else { k + fin };
                    tracker.forward(act, live as f64 * logits);
                } else {
                    tracker.transient(act);
                }
            }
            ActionKind::ExitForward => tracker.alloc_logits(k as f64 * logits),
            ActionKind::Backward => {
                let (held, transient) = match mode {
                    ExitMode::Standard | ExitMode::Eager => (k + fin, 0),
                    ExitMode::Deferred => (fin, k),
                    ExitMode::DeferredReordered => (k + fin, 0),
                };
                tracker.backward(act, held as f64 * logits, transient as f64 * logits);
            }
        }
    }
    tracker.peak
}

/// Shared by the simulator and the trainer's replay accounting.
#[derive(Clone, Debug)]
pub struct MemoryTracker {
    base: f64,
    live: f64,
    pub peak: f64,
}

impl MemoryTracker {
    pub fn new(params: f64) -> Self {
        MemoryTracker { base: params, live: 0.0, peak: params }
    }

    fn bump(&mut self, extra: f64) {
        self.peak = self.peak.max(self.base + self.live + extra);
    }

    /// Forward step that keeps its activations and `logits` until backward.
    pub fn forward(&mut self, act: f64, logits: f64) {
        self.live += act + logits;
        self.bump(0.0);
    }

    /// Forward step whose activations are dropped right away.
    pub fn transient(&mut self, act: f64) {
        self.bump(act);
    }

    pub fn alloc_logits(&mut self, logits: f64) {
        self.live += logits;
        self.bump(0.0);
    }

    /// Backward step: `transient` logits exist only during the step, then
    /// the activations and `held` logits are released.
    pub fn backward(&mut self, act: f64, held: f64, transient: f64) {
        self.bump(transient);
        self.live -= act + held;
    }
}

/// The three-part decomposition of the critical path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SpanParts {
    /// Forward steps of the first microbatch on all but the last stage.
    pub warmup: f64,
    /// Busy time of the last stage.
    pub steady: f64,
    /// Backward steps of the last microbatch on all but the last stage.
    pub cooldown: f64,
    pub span: f64,
}

impl SpanParts {
    pub fn sum(&self) -> f64 {
        self.warmup + self.steady + self.cooldown
    }

    /// True when the simulated span equals the decomposition, i.e. exit
    /// work fits into the implicit bubbles.
    pub fn holds(&self) -> bool {
        (self.span - self.sum()).abs() < TIME_EPS
    }
}

pub fn decompose(tl: &Timeline, cost: &CostModel) -> SpanParts {
    let p = cost.stages;
    let last_mb = Mb::Regular(cost.microbatches - 1);
    let dur = |j: usize, kind: ActionKind, mb: Mb| tl.event(j, kind, mb).map(|e| e.end - e.start).unwrap_or(0.0);
    let hops = (p - 1) as f64 * cost.p2p_latency;
    let warmup = (1..p).map(|j| dur(j, ActionKind::Forward, Mb::Regular(0))).sum::<f64>() + hops;
    let cooldown = (1..p).map(|j| dur(j, ActionKind::Backward, last_mb)).sum::<f64>() + hops;
    SpanParts { warmup, steady: tl.busy[p - 1], cooldown, span: tl.span }
}

/// Span by exhaustive enumeration of every path in the event dependency
/// graph. Exponential; meant for tiny pipelines.
pub fn brute_force_span(cost: &CostModel, variant: &Variant) -> Result<f64> {
    let fill = resolve_fill(cost, variant)?;
    let p = cost.stages;
    let lists = actions_for(cost, variant.mode, &fill);
    let mut index = HashMap::new();
    let mut nodes = Vec::new();
    for (j, list) in lists.iter().enumerate() {
        for &a in list {
            index.insert((j + 1, a), nodes.len());
            nodes.push((j + 1, a));
        }
    }
    // successors with edge latency
    let mut succ: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nodes.len()];
    let mut has_pred = vec![false; nodes.len()];
    for (j, list) in lists.iter().enumerate() {
        for w in list.windows(2) {
            let (u, v) = (index[&(j + 1, w[0])], index[&(j + 1, w[1])]);
            succ[u].push((v, 0.0));
            has_pred[v] = true;
        }
        for &a in list {
            if let Some(dep) = dependency(p, &fill, j + 1, a) {
                let (u, v) = (index[&dep], index[&(j + 1, a)]);
                succ[u].push((v, cost.p2p_latency));
                has_pred[v] = true;
            }
        }
    }
    let dur: Vec<f64> = nodes.iter().map(|&(j, a)| duration(cost, variant.mode, &fill, j, a)).collect();
    fn walk(u: usize, acc: f64, succ: &[Vec<(usize, f64)>], dur: &[f64], best: &mut f64) {
        let here = acc + dur[u];
        if succ[u].is_empty() {
            *best = best.max(here);
        }
        for &(v, lat) in &succ[u] {
            walk(v, here + lat, succ, dur, best);
        }
    }
    let mut best = 0.0;
    for u in (0..nodes.len()).filter(|&u| !has_pred[u]) {
        walk(u, 0.0, &succ, &dur, &mut best);
    }
    Ok(best)
}

/// Overheads of the deferred schedule with and without splitting the
/// cool-down exit forwards ahead of the gradient dependency.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReorderedOverhead {
    pub deferred: f64,
    pub reordered: f64,
    pub reduction: f64,
}

pub fn further_optimized_span(cost: &CostModel, k: usize) -> ReorderedOverhead {
    let k = k as f64;
    ReorderedOverhead {
        deferred: k * (cost.f_ee + cost.b_ee),
        reordered: k * cost.b_ee,
        reduction: k * cost.f_ee,
    }
}

pub fn peak_memory(cost: &CostModel, variant: &Variant) -> Result<Vec<f64>> {
    Ok(simulate(cost, variant)?.peak_memory)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::fill::plan_bubble_fill;

    fn approx(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn single_stage_single_microbatch_is_a_chain() {
        let mut c = CostModel::fig3_preset();
        c.stages = 1;
        c.microbatches = 1;
        c.exits_per_stage = vec![2];
        c.param_units = vec![0.0];
        let tl = simulate(&c, &Variant::new(ExitMode::Eager)).unwrap();
        assert!(approx(tl.span, c.f + 3.0 * c.f_ee + c.b_t + 3.0 * c.b_ee));
        assert_eq!(tl.stages[0].len(), 2);
    }

    #[test]
    fn fig3_standard_span() {
        let c = CostModel::fig3_preset();
        let tl = simulate(&c, &Variant::new(ExitMode::Standard)).unwrap();
        // 3 warm-up forwards, 6 x (3 + 6) on the last stage, 3 backwards
        assert!(approx(tl.span, 6.0 + 54.0 + 12.0));
        assert!(decompose(&tl, &c).holds());
    }

    #[test]
    fn events_never_overlap() {
        let c = CostModel::fig3_preset();
        for mode in ExitMode::ALL {
            let tl = simulate(&c, &Variant::new(mode)).unwrap();
            for lane in &tl.stages {
                for w in lane.windows(2) {
                    assert!(w[0].end <= w[1].start + 1e-12);
                }
            }
        }
    }

    #[test]
    fn filled_span_not_larger() {
        let c = CostModel { f: 1.0, b_t: 2.0, f_ee: 0.0, b_ee: 0.0, exits_per_stage: vec![1, 1, 1, 0], ..CostModel::fig3_preset() };
        let base = simulate(&c, &Variant::new(ExitMode::Eager)).unwrap().span;
        let plan = plan_bubble_fill(4, 0.5).unwrap();
        let filled = simulate(&c, &Variant::with_fill(ExitMode::Eager, plan)).unwrap().span;
        assert!(filled <= base + 1e-9, "{filled} > {base}");
    }

    #[test]
    fn further_optimized_formula() {
        let c = CostModel::fig3_preset();
        let o = further_optimized_span(&c, 2);
        assert_eq!(o.reduction, 2.0 * c.f_ee);
        assert_eq!(further_optimized_span(&c, 0).reduction, 0.0);
    }
}
