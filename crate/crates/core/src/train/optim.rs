//! Plain SGD and Adam over a parameter map.

use exitpipe_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::model::ParamMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
}

fn beta1() -> f64 {
    0.9
}

fn beta2() -> f64 {
    0.999
}

fn adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam { lr, beta1: beta1(), beta2: beta2(), eps: adam_eps() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { lr } => lr > 0.0 && lr.is_finite(),
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                lr > 0.0 && lr.is_finite() && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(config_err(format!("invalid optimizer settings {self:?}")))
        }
    }
}

pub struct Optimizer {
    cfg: OptimizerConfig,
    t: i32,
    m: ParamMap,
    v: ParamMap,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer { cfg, t: 0, m: ParamMap::new(), v: ParamMap::new() })
    }

    /// Applies one update. Every gradient must name an existing parameter.
    pub fn step(&mut self, params: &mut ParamMap, grads: &ParamMap) -> Result<()> {
        self.t += 1;
        for (name, g) in grads {
            let p = params.get_mut(name).ok_or_else(|| config_err(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(config_err(format!("{name}: gradient shape {:?} vs {:?}", g.shape(), p.shape())));
            }
            match self.cfg {
                OptimizerConfig::Sgd { lr } => {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
                OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                    let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                    let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                    let c1 = 1.0 - beta1.powi(self.t);
                    let c2 = 1.0 - beta2.powi(self.t);
                    let (md, vd) = (m.data_mut(), v.data_mut());
                    for (i, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        md[i] = beta1 * md[i] + (1.0 - beta1) * d;
                        vd[i] = beta2 * vd[i] + (1.0 - beta2) * d * d;
                        *w -= lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> ParamMap {
        [(name.to_string(), Tensor::full(&[1], v))].into_iter().collect()
    }

    #[test]
    fn sgd_and_adam_first_steps() {
        let mut p = one("w", 1.0);
        Optimizer::new(OptimizerConfig::Sgd { lr: 0.1 }).unwrap().step(&mut p, &one("w", 2.0)).unwrap();
        assert!((p["w"].data()[0] - 0.8).abs() < 1e-15);
        // the first bias-corrected Adam step moves by lr·g/(|g|+eps)
        let mut p = one("w", 1.0);
        Optimizer::new(OptimizerConfig::adam(0.01)).unwrap().step(&mut p, &one("w", -3.0)).unwrap();
        assert!((p["w"].data()[0] - (1.0 + 0.01 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = one("w", 5.0);
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1)).unwrap();
        for _ in 0..500 {
            let g = one("w", 2.0 * (p["w"].data()[0] - 1.5));
            opt.step(&mut p, &g).unwrap();
        }
        assert!((p["w"].data()[0] - 1.5).abs() < 1e-2);
    }

    #[test]
    fn rejects_unknown_names_and_bad_settings() {
        let mut p = one("w", 1.0);
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 0.1 }).unwrap();
        assert!(opt.step(&mut p, &one("x", 1.0)).is_err());
        assert!(Optimizer::new(OptimizerConfig::Sgd { lr: -1.0 }).is_err());
        assert!(Optimizer::new(OptimizerConfig::Adam { lr: 0.1, beta1: 1.0, beta2: 0.9, eps: 1e-8 }).is_err());
    }
}
