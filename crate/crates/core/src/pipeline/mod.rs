//! Pipeline-parallel training: stage workers, the auxiliary loss, exit
//! weight schedules, bubble filling and its statistics.

pub mod aux;
pub mod engine;
pub mod fill;
pub mod messages;
pub mod program;
pub mod stats;
pub mod toy;
pub mod weights;

pub use aux::{backward_send, compute_aux_loss};
pub use engine::{run_iteration, sync_tied, Extra, IterationOptions, IterationOutput, StageForward, StageProgram, TrainStepReport};
pub use fill::{plan_bubble_fill, FillPlan, ResolvedFill};
pub use messages::{ActivationMessage, GradientMessage};
pub use program::ModelProgram;
pub use weights::WeightSchedule;
