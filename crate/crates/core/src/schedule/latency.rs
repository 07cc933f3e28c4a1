//! Latency model of pipeline-based early-exit decoding.

use serde::Serialize;

use crate::error::{config_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyReport {
    /// Time between consecutive emitted tokens, pipeline mode.
    pub pipeline: Vec<f64>,
    /// Per-token latency when every token runs all stages sequentially.
    pub sequential: Vec<f64>,
    pub pipeline_total: f64,
    pub sequential_total: f64,
}

impl LatencyReport {
    /// Speedup of each token over the full-depth sequential baseline.
    pub fn per_token_speedup(&self) -> Vec<f64> {
        self.sequential.iter().zip(&self.pipeline).map(|(s, p)| s / p).collect()
    }

    pub fn speedup(&self) -> f64 {
        if self.pipeline_total == 0.0 {
            1.0
        } else {
            self.sequential_total / self.pipeline_total
        }
    }
}

/// `exit_stages[t]` is the 1-based stage whose exit emits token `t`.
///
/// Pipeline mode: token `t` enters stage 1 once token `t-1` is emitted,
/// and stage `s` handles tokens in order, so token `t` at stage `s` also
/// waits until token `t-1` has filled its KV there. Every token runs all
/// stages; only its emission happens early.
pub fn inference_latency(exit_stages: &[usize], stage_times: &[f64]) -> Result<LatencyReport> {
    let p = stage_times.len();
    if p == 0 || stage_times.iter().any(|&t| !(t >= 0.0) || !t.is_finite()) {
        return Err(config_err("stage times must be non-negative and non-empty"));
    }
    if let Some(&bad) = exit_stages.iter().find(|&&s| s == 0 || s > p) {
        return Err(config_err(format!("exit stage {bad} outside 1..={p}")));
    }
    let full: f64 = stage_times.iter().sum();
    let mut prev_end = vec![0.0f64; p];
    let mut prev_emit = 0.0f64;
    let mut pipeline = Vec::with_capacity(exit_stages.len());
    for &exit in exit_stages {
        let mut end = vec![0.0f64; p];
        let mut ready = prev_emit;
        for s in 0..p {
            let start = ready.max(prev_end[s]);
            end[s] = start + stage_times[s];
            ready = end[s];
        }
        let emit = end[exit - 1];
        pipeline.push(emit - prev_emit);
        prev_emit = emit;
        prev_end = end;
    }
    let sequential = vec![full; exit_stages.len()];
    Ok(LatencyReport {
        pipeline_total: prev_emit,
        sequential_total: full * exit_stages.len() as f64,
        pipeline,
        sequential,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_early_exit_matches_sequential() {
        let r = inference_latency(&[4; 5], &[1.0; 4]).unwrap();
        assert_eq!(r.pipeline, r.sequential);
        assert_eq!(r.speedup(), 1.0);
    }

    #[test]
    fn all_first_stage_reaches_stage_count() {
        let r = inference_latency(&[1; 50], &[1.0; 4]).unwrap();
        assert!(r.per_token_speedup().iter().all(|&s| s <= 4.0 + 1e-12));
        assert!((r.speedup() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn alternating_exits_hand_unrolled() {
        // token 0: stage 1 done at 1, emitted; fills stages 2..4 until 4
        // token 1: starts at 1, stages end 2, 3, 4, 5; emitted at 5
        // token 2: starts at 5, stage 1 ends 6, emitted at 6; fills until 9
        // token 3: stage 1 at max(6, 6) ends 7, then 8, 9, 10; emitted at 10
        let r = inference_latency(&[1, 4, 1, 4], &[1.0; 4]).unwrap();
        assert_eq!(r.pipeline, vec![1.0, 4.0, 1.0, 4.0]);
        assert_eq!(r.pipeline_total, 10.0);
        assert_eq!(r.sequential_total, 16.0);
    }

    #[test]
    fn rejects_bad_stage() {
        assert!(inference_latency(&[0], &[1.0]).is_err());
        assert!(inference_latency(&[3], &[1.0, 1.0]).is_err());
        assert!(inference_latency(&[1], &[]).is_err());
    }
}
