//! Per-stage 1F1B action lists. The training engine executes these lists
//! and the simulator times them, so both see the same order.

use std::fmt;

use serde::Serialize;

use crate::pipeline::fill::ResolvedFill;

/// Microbatch label. Regular ids are 0-based; inserted ones are 1-based as
/// in the fill plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Mb {
    Regular(usize),
    Part1(usize),
    Part2(usize),
}

impl fmt::Display for Mb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mb::Regular(k) => write!(f, "{k}"),
            Mb::Part1(i) => write!(f, "p{i}"),
            Mb::Part2(i) => write!(f, "q{i}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum ActionKind {
    Forward,
    /// Exit-head forward split out of a backward step. Only produced for the
    /// cool-down reordering that the trainer does not implement.
    ExitForward,
    Backward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Action {
    pub kind: ActionKind,
    pub mb: Mb,
}

impl Action {
    pub fn fwd(mb: Mb) -> Self {
        Action { kind: ActionKind::Forward, mb }
    }

    pub fn bwd(mb: Mb) -> Self {
        Action { kind: ActionKind::Backward, mb }
    }
}

/// Stages a microbatch visits. Stages are 1-based and ranges inclusive;
/// an empty backward range is `(1, 0)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Route {
    pub forward_last: usize,
    pub backward_first: usize,
    pub backward_last: usize,
}

impl Route {
    pub fn forwards(&self, stage: usize) -> bool {
        stage <= self.forward_last
    }

    pub fn backwards(&self, stage: usize) -> bool {
        stage >= self.backward_first && stage <= self.backward_last
    }
}

pub fn route(mb: Mb, p: usize, fill: &ResolvedFill) -> Route {
    match mb {
        Mb::Regular(_) => Route { forward_last: p, backward_first: 1, backward_last: p },
        Mb::Part1(i) => {
            let d = fill.part1_depth(i).unwrap_or(0);
            Route { forward_last: d, backward_first: 1, backward_last: d }
        }
        Mb::Part2(i) => {
            let d = fill.part2_depth(i).unwrap_or(0);
            Route { forward_last: p, backward_first: p + 1 - d, backward_last: p }
        }
    }
}

/// Number of warm-up forwards on 1-based `stage`.
pub fn warmup_count(p: usize, m: usize, stage: usize) -> usize {
    (p - stage).min(m)
}

/// Action list of every stage for `p` stages and `m` regular microbatches.
/// `split_exit_stages[j-1]` marks stages whose backward steps are preceded
/// by a separate exit-forward event.
pub fn stage_actions(p: usize, m: usize, fill: &ResolvedFill, split_exit_stages: &[bool]) -> Vec<Vec<Action>> {
    (1..=p).map(|j| one_stage(p, m, j, fill, split_exit_stages.get(j - 1).copied().unwrap_or(false))).collect()
}

fn one_stage(p: usize, m: usize, j: usize, fill: &ResolvedFill, split: bool) -> Vec<Action> {
    let w = warmup_count(p, m, j);
    let mut out = Vec::new();
    let push_b = |out: &mut Vec<Action>, mb: Mb| {
        if split {
            out.push(Action { kind: ActionKind::ExitForward, mb });
        }
        out.push(Action::bwd(mb));
    };
    let part1: Vec<usize> = fill.part1.iter().filter(|f| f.depth >= j).map(|f| f.index).collect();
    let part2: Vec<(usize, bool)> = fill.part2.iter().map(|f| (f.index, j + f.depth > p)).collect();

    let steady = m - w;
    // Part 1 fills the wait for the first gradient. All stages run their
    // forwards as sub-sequences of one global order, so activations cross
    // each boundary in the order the receiver expects: a Part-1 microbatch
    // follows the last regular forward its deepest stage runs before the
    // first backward.
    let pre_backward = |stage: usize| (p - stage + 1).min(m);
    for t in 0..pre_backward(j) {
        out.push(Action::fwd(Mb::Regular(t)));
        for &i in &part1 {
            if fill.part1_depth(i).is_some_and(|d| pre_backward(d) - 1 == t) {
                out.push(Action::fwd(Mb::Part1(i)));
            }
        }
    }
    for &i in part1.iter().rev() {
        push_b(&mut out, Mb::Part1(i));
    }
    for k in 0..steady {
        if k > 0 {
            out.push(Action::fwd(Mb::Regular(w + k)));
        }
        push_b(&mut out, Mb::Regular(k));
    }
    if j == p {
        for &(i, _) in &part2 {
            out.push(Action::fwd(Mb::Part2(i)));
            push_b(&mut out, Mb::Part2(i));
        }
        return out;
    }
    // Cool-down backwards and Part-2 work are ordered by their start times
    // in the ideal schedule, measured in units of one backward step from
    // the end of the last regular backward on the last stage. Part-2
    // forwards use their latest start that keeps the last stage busy.
    let r = fill.f_over_b;
    let hops = (p - j) as f64;
    let mut tail: Vec<(f64, u8, Action)> = Vec::new();
    for k in steady..m {
        let q = (m - 1 - k) as f64;
        tail.push((hops - 1.0 - q * (r + 1.0), 1, Action::bwd(Mb::Regular(k))));
    }
    for &(i, reaches) in &part2 {
        let slot = (i - 1) as f64 * (r + 1.0);
        tail.push((slot - hops * r, 0, Action::fwd(Mb::Part2(i))));
        if reaches {
            tail.push((slot + r + hops, 2, Action::bwd(Mb::Part2(i))));
        }
    }
    tail.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for (_, _, a) in tail {
        match a.kind {
            ActionKind::Backward => push_b(&mut out, a.mb),
            _ => out.push(a),
        }
    }
    out
}
