//! Confidence-based exit rule.

use exitpipe_tensor::kernels;
use serde::Serialize;

use crate::error::{config_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ExitDecision {
    pub exit: bool,
    pub token: usize,
    /// Largest softmax probability.
    pub confidence: f64,
}

pub fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(config_err(format!("threshold {threshold} outside (0, 1]")));
    }
    Ok(())
}

/// Exits when the top probability is strictly above `threshold`. A
/// threshold of 1 never exits.
pub fn exit_decision(logits: &[f64], threshold: f64) -> Result<ExitDecision> {
    check_threshold(threshold)?;
    if logits.is_empty() {
        return Err(config_err("empty logits"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss("exit logits".into()));
    }
    let mut probs = vec![0.0; logits.len()];
    kernels::softmax_row(logits, &mut probs);
    let mut token = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[token] {
            token = i;
        }
    }
    let confidence = probs[token];
    Ok(ExitDecision { exit: threshold < 1.0 && confidence > threshold, token, confidence })
}
