//! Exit-loss weights that may change over training.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Weights cover every exit in depth order, final exit last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightSchedule {
    Constant { weights: Vec<f64> },
    /// Moves from `start` to `end` over `span` steps, then stays at `end`.
    Linear { start: Vec<f64>, end: Vec<f64>, span: u64 },
}

impl WeightSchedule {
    pub fn constant(weights: Vec<f64>) -> Self {
        WeightSchedule::Constant { weights }
    }

    pub fn num_exits(&self) -> usize {
        match self {
            WeightSchedule::Constant { weights } => weights.len(),
            WeightSchedule::Linear { start, .. } => start.len(),
        }
    }

    pub fn validate(&self, num_exits: usize) -> Result<()> {
        let lists: Vec<&Vec<f64>> = match self {
            WeightSchedule::Constant { weights } => vec![weights],
            WeightSchedule::Linear { start, end, .. } => vec![start, end],
        };
        for w in lists {
            if w.len() != num_exits {
                return Err(config_err(format!("weight schedule has {} entries for {num_exits} exits", w.len())));
            }
            if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(config_err("exit loss weights must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn weight_at_step(&self, step: u64) -> Result<Vec<f64>> {
        self.validate(self.num_exits())?;
        Ok(match self {
            WeightSchedule::Constant { weights } => weights.clone(),
            WeightSchedule::Linear { start, end, span } => {
                if step >= *span {
                    return Ok(end.clone());
                }
                let t = step as f64 / *span as f64;
                start.iter().zip(end).map(|(a, b)| a + (b - a) * t).collect()
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_is_itself() {
        let s = WeightSchedule::constant(vec![0.25, 0.5, 1.0]);
        for step in [0, 7, 1_000_000] {
            assert_eq!(s.weight_at_step(step).unwrap(), vec![0.25, 0.5, 1.0]);
        }
    }

    #[test]
    fn linear_midpoint_and_clamp() {
        let s = WeightSchedule::Linear { start: vec![0.0, 1.0], end: vec![0.5, 1.0], span: 100 };
        assert_eq!(s.weight_at_step(50).unwrap(), vec![0.25, 1.0]);
        assert_eq!(s.weight_at_step(0).unwrap(), vec![0.0, 1.0]);
        assert_eq!(s.weight_at_step(100).unwrap(), vec![0.5, 1.0]);
        assert_eq!(s.weight_at_step(5000).unwrap(), vec![0.5, 1.0]);
    }

    #[test]
    fn rejects_negative_and_ragged() {
        assert!(WeightSchedule::constant(vec![-0.1, 1.0]).weight_at_step(0).is_err());
        let s = WeightSchedule::Linear { start: vec![0.0], end: vec![0.5, 1.0], span: 10 };
        assert!(s.weight_at_step(0).is_err());
        assert!(WeightSchedule::constant(vec![0.5, 1.0]).validate(3).is_err());
    }

    #[test]
    fn serde_shape() {
        let s: WeightSchedule = toml::from_str("kind = \"linear\"\nstart = [0.0, 1.0]\nend = [0.5, 1.0]\nspan = 10\n").unwrap();
        assert_eq!(s, WeightSchedule::Linear { start: vec![0.0, 1.0], end: vec![0.5, 1.0], span: 10 });
    }
}
