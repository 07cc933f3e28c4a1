//! The per-stage auxiliary loss `L_i + ⟨g_i, x_i⟩` and the gradient it
//! sends upstream.

use exitpipe_tensor::{Gradients, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::pipeline::messages::GradientMessage;
use crate::schedule::Mb;

/// Builds the auxiliary loss on `tape`. `local` is the weighted sum of this
/// stage's exit losses (if any), `received` the gradient of the next stage
/// and `sent` the activation that gradient refers to. `g` enters as a
/// constant, so no gradient flows into it.
pub fn compute_aux_loss(tape: &mut Tape, local: Option<Var>, received: Option<&Tensor>, sent: Var) -> Result<Var> {
    let link = match received {
        Some(g) => Some(tape.dot_const(sent, g)?),
        None => None,
    };
    match (local, link) {
        (Some(l), Some(d)) => Ok(tape.add(l, d)?),
        (Some(l), None) => Ok(l),
        (None, Some(d)) => Ok(d),
        (None, None) => Err(Error::Protocol("stage has neither local losses nor a downstream gradient".into())),
    }
}

/// Runs backward on the auxiliary loss. Returns every leaf gradient and,
/// when the stage received its input from upstream, the message carrying
/// the gradient with respect to that input.
pub fn backward_send(tape: &mut Tape, aux: Var, input: Option<Var>, mb: Mb) -> Result<(Gradients, Option<GradientMessage>)> {
    let mut grads = tape.backward(aux)?;
    let msg = match input {
        Some(x) => {
            let grad = grads
                .take(x)
                .ok_or_else(|| Error::Protocol(format!("input of microbatch {mb} does not require gradient")))?;
            Some(GradientMessage { mb, grad })
        }
        None => None,
    };
    Ok((grads, msg))
}
