//! Filling explicit pipeline bubbles with partial passes of extra
//! microbatches, and the rescaling that keeps the gradient unbiased.

use crate::error::{Error, Result};

// Guards floors of ratios like 3/1.5 against representation error.
const FLOOR_EPS: f64 = 1e-9;

fn floor(x: f64) -> usize {
    let f = (x + FLOOR_EPS).floor();
    if f <= 0.0 {
        0
    } else {
        f as usize
    }
}

/// Capacity plan for one iteration, before exit placement is known.
#[derive(Clone, Debug, PartialEq)]
pub struct FillPlan {
    pub stages: usize,
    pub f_over_b: f64,
    pub k_part1: usize,
    pub k_part2: usize,
    /// Forward depth `K + 1 - i` of Part-1 microbatch `i` (1-based, index i-1).
    pub part1_forward_depth: Vec<usize>,
    /// Number of trailing stages Part-2 microbatch `i` runs backward through.
    pub part2_backward_depth: Vec<usize>,
}

/// Largest number of extra microbatches that fit in either bubble part.
pub fn fill_capacity(p: usize, f_over_b: f64) -> usize {
    floor((p as f64 - 1.0) / (f_over_b + 1.0))
}

pub fn plan_bubble_fill(p: usize, f_over_b: f64) -> Result<FillPlan> {
    if p < 2 {
        return Err(Error::Fill(format!("bubble filling needs at least 2 stages, got {p}")));
    }
    if !(f_over_b > 0.0) || !f_over_b.is_finite() {
        return Err(Error::Fill(format!("f/b must be positive, got {f_over_b}")));
    }
    let k = fill_capacity(p, f_over_b);
    let part1_forward_depth = (1..=k).map(|i| k + 1 - i).collect();
    let part2_backward_depth = (1..=k).map(|i| floor(p as f64 - i as f64 * (f_over_b + 1.0))).collect();
    Ok(FillPlan { stages: p, f_over_b, k_part1: k, k_part2: k, part1_forward_depth, part2_backward_depth })
}

impl FillPlan {
    pub fn is_empty(&self) -> bool {
        self.k_part1 == 0 && self.k_part2 == 0
    }

    /// Keeps only one part, for experiments that enable them separately.
    pub fn only_part1(mut self) -> Self {
        self.k_part2 = 0;
        self.part2_backward_depth.clear();
        self
    }

    pub fn only_part2(mut self) -> Self {
        self.k_part1 = 0;
        self.part1_forward_depth.clear();
        self
    }

    /// Applies exit placement. Part-1 depths shrink to the deepest stage
    /// with an early exit; microbatches with no such stage are dropped.
    /// Part-2 depths are cut so they never reach a stage that Part 1
    /// runs backward through, since the two rescalings would otherwise
    /// compound on that stage. With fewer than `P - 1` regular
    /// microbatches the bubbles have a different shape and the plan's
    /// depths would lengthen the iteration, so that case is rejected.
    pub fn resolve(&self, exits_per_stage: &[usize], tied: bool, microbatches: usize) -> Result<ResolvedFill> {
        if exits_per_stage.len() != self.stages {
            return Err(Error::Fill(format!(
                "plan is for {} stages, model has {}",
                self.stages,
                exits_per_stage.len()
            )));
        }
        if self.is_empty() {
            return Ok(ResolvedFill::default());
        }
        if tied {
            return Err(Error::Fill("bubble filling requires untied parameters across stages".into()));
        }
        if microbatches + 1 < self.stages {
            return Err(Error::Fill(format!(
                "bubble filling needs at least {} microbatches on {} stages, got {microbatches}",
                self.stages - 1,
                self.stages
            )));
        }
        let mut part1 = Vec::new();
        for (idx, &d) in self.part1_forward_depth.iter().enumerate() {
            if let Some(depth) = (1..=d.min(self.stages)).rev().find(|&j| exits_per_stage[j - 1] > 0) {
                part1.push(FillMb { index: idx + 1, depth });
            }
        }
        let reach1 = part1.iter().map(|m| m.depth).max().unwrap_or(0);
        let mut part2 = Vec::new();
        for (idx, &d) in self.part2_backward_depth.iter().enumerate() {
            let depth = d.min(self.stages - reach1);
            if depth > 0 {
                part2.push(FillMb { index: idx + 1, depth });
            }
        }
        Ok(ResolvedFill { part1, part2, f_over_b: self.f_over_b })
    }
}

/// One inserted microbatch. For Part 1 `depth` is the forward/backward
/// depth from stage 1; for Part 2 it is the number of trailing stages
/// covered by the backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FillMb {
    pub index: usize,
    pub depth: usize,
}

/// A fill plan bound to a concrete exit placement.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResolvedFill {
    pub part1: Vec<FillMb>,
    pub part2: Vec<FillMb>,
    /// Forward/backward time ratio the plan was made for. Orders Part-2
    /// work inside the cool-down phase.
    pub f_over_b: f64,
}

impl ResolvedFill {
    pub fn is_empty(&self) -> bool {
        self.part1.is_empty() && self.part2.is_empty()
    }

    pub fn part1_depth(&self, i: usize) -> Option<usize> {
        self.part1.iter().find(|m| m.index == i).map(|m| m.depth)
    }

    pub fn part2_depth(&self, i: usize) -> Option<usize> {
        self.part2.iter().find(|m| m.index == i).map(|m| m.depth)
    }

    /// Number of Part-1 microbatches whose losses include those of `stage`.
    pub fn part1_cover(&self, stage: usize) -> usize {
        self.part1.iter().filter(|m| m.depth >= stage).count()
    }

    /// Number of Part-2 microbatches whose backward pass reaches `stage`.
    pub fn part2_cover(&self, stage: usize, stages: usize) -> usize {
        self.part2.iter().filter(|m| stage + m.depth > stages).count()
    }

    /// Factor `B / (B + m)` applied to the loss weights of exits on `stage`.
    pub fn loss_factor(&self, stage: usize, b: usize) -> f64 {
        let m = self.part1_cover(stage);
        if m == 0 {
            1.0
        } else {
            b as f64 / (b + m) as f64
        }
    }

    /// Factor `B / (B + n)` applied to the accumulated gradient of `stage`.
    pub fn stage_factor(&self, stage: usize, stages: usize, b: usize) -> f64 {
        let n = self.part2_cover(stage, stages);
        if n == 0 {
            1.0
        } else {
            b as f64 / (b + n) as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_stages_half_ratio() {
        let plan = plan_bubble_fill(4, 0.5).unwrap();
        assert_eq!((plan.k_part1, plan.k_part2), (2, 2));
        assert_eq!(plan.part2_backward_depth, vec![2, 1]);
        assert_eq!(plan.part1_forward_depth, vec![2, 1]);
    }

    #[test]
    fn bubble_too_small() {
        let plan = plan_bubble_fill(4, 3.0).unwrap();
        assert!(plan.is_empty());
        assert!(plan.resolve(&[0, 1, 1, 0], true, 8).unwrap().is_empty());
        assert!(plan_bubble_fill(1, 0.5).is_err());
        assert!(plan_bubble_fill(4, 0.0).is_err());
    }

    #[test]
    fn resolve_truncates_and_rejects_ties() {
        let plan = plan_bubble_fill(4, 0.5).unwrap();
        assert!(plan.resolve(&[0, 1, 1, 0], true, 8).is_err());
        assert!(plan.resolve(&[0, 1, 1, 0], false, 2).is_err());
        assert!(plan.resolve(&[0, 1, 1, 0], false, 3).is_ok());
        assert!(plan.resolve(&[0, 1, 1], false, 8).is_err());
        // exit only on stage 2: part-1 mb 1 keeps depth 2, mb 2 (depth 1) dropped
        let r = plan.resolve(&[0, 1, 0, 0], false, 8).unwrap();
        assert_eq!(r.part1, vec![FillMb { index: 1, depth: 2 }]);
        assert_eq!(r.part2, vec![FillMb { index: 1, depth: 2 }, FillMb { index: 2, depth: 1 }]);
        // exits on stage 3 would need depth 3 which the plan does not reach
        let r = plan.clone().only_part2().resolve(&[0, 0, 1, 0], false, 8).unwrap();
        assert!(r.part1.is_empty());
        assert_eq!(r.stage_factor(3, 4, 4), 0.8);
        assert_eq!(r.stage_factor(4, 4, 4), 4.0 / 6.0);
        assert_eq!(r.stage_factor(2, 4, 4), 1.0);
        // overlap: part 1 reaching stage 3 cuts part 2 to depth 1
        let plan5 = plan_bubble_fill(5, 0.25).unwrap();
        assert_eq!(plan5.k_part1, 3);
        let r = plan5.resolve(&[1, 1, 1, 1, 0], false, 8).unwrap();
        assert_eq!(r.part1.iter().map(|m| m.depth).collect::<Vec<_>>(), vec![3, 2, 1]);
        assert!(r.part2.iter().all(|m| m.depth <= 2));
        assert_eq!(r.loss_factor(1, 4), 4.0 / 7.0);
        assert_eq!(r.loss_factor(3, 4), 0.8);
    }
}
