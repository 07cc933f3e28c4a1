//! Discrete-event model of the 1F1B schedule: timing, memory, replay
//! checks and the decoding latency model.

pub mod actions;
pub mod cost;
pub mod latency;
pub mod replay;
pub mod sim;
pub mod svg;

pub use actions::{route, stage_actions, Action, ActionKind, Mb, Route};
pub use cost::{CostModel, ExitMode};
pub use latency::{inference_latency, LatencyReport};
pub use replay::{verify_against_replay, ExecutedStage, ReplayReport};
pub use sim::{brute_force_span, decompose, further_optimized_span, peak_memory, simulate, SpanParts, Timeline, Variant};
