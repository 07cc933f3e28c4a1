//! Cross-check of an executed training iteration against the simulator.

use serde::Serialize;

use crate::schedule::actions::{ActionKind, Mb};
use crate::schedule::sim::Timeline;

/// What one stage worker actually did, in order.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ExecutedStage {
    pub events: Vec<(ActionKind, Mb)>,
    pub peak_memory: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ReplayReport {
    pub discrepancies: Vec<String>,
}

impl ReplayReport {
    pub fn is_clean(&self) -> bool {
        self.discrepancies.is_empty()
    }
}

/// Compares event order and memory accounting stage by stage. Mismatches
/// are collected, not raised.
pub fn verify_against_replay(tl: &Timeline, executed: &[ExecutedStage]) -> ReplayReport {
    let mut out = Vec::new();
    if tl.stages.len() != executed.len() {
        out.push(format!("stage count: simulated {}, executed {}", tl.stages.len(), executed.len()));
        return ReplayReport { discrepancies: out };
    }
    for (j, (sim, run)) in tl.stages.iter().zip(executed).enumerate() {
        let stage = j + 1;
        let sim_events: Vec<(ActionKind, Mb)> = sim.iter().map(|e| (e.kind, e.mb)).collect();
        if sim_events.len() != run.events.len() {
            out.push(format!(
                "stage {stage}: {} simulated events, {} executed",
                sim_events.len(),
                run.events.len()
            ));
        }
        if let Some(pos) = sim_events.iter().zip(&run.events).position(|(a, b)| a != b) {
            out.push(format!(
                "stage {stage}: event {pos} simulated {:?} {}, executed {:?} {}",
                sim_events[pos].0, sim_events[pos].1, run.events[pos].0, run.events[pos].1
            ));
        }
        let (a, b) = (tl.peak_memory[j], run.peak_memory);
        if (a - b).abs() > 1e-9 * a.abs().max(1.0) {
            out.push(format!("stage {stage}: peak memory simulated {a}, executed {b}"));
        }
    }
    ReplayReport { discrepancies: out }
}
