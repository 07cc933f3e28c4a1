//! The early-exit GPT model: backbone layers plus exit heads at chosen depths.

pub mod config;
pub mod forward;
pub mod partition;

use exitpipe_tensor::{Tape, Tensor, Var};
use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ExitSpec, HeadKind, ModelConfig, FINAL_EXIT_WEIGHT};
pub use forward::{Bound, HeadRef};
pub use partition::{ParamSlot, StagePartition, StageSpec};

use crate::data::Batch;
use crate::error::{config_err, Error, Result};

/// Named tensors in a stable order. Used for parameters and gradients alike.
pub type ParamMap = IndexMap<String, Tensor>;

const INIT_STD: f64 = 0.02;

/// Per-exit losses of one batch plus their weighted total.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub per_exit: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EarlyExitModel {
    config: ModelConfig,
    params: ParamMap,
}

fn layer_shapes(prefix: &str, h: usize) -> Vec<(String, Vec<usize>, f64)> {
    let m = 4 * h;
    vec![
        (format!("{prefix}.norm1"), vec![h], 1.0),
        (format!("{prefix}.wq"), vec![h, h], INIT_STD),
        (format!("{prefix}.wk"), vec![h, h], INIT_STD),
        (format!("{prefix}.wv"), vec![h, h], INIT_STD),
        (format!("{prefix}.wo"), vec![h, h], INIT_STD),
        (format!("{prefix}.norm2"), vec![h], 1.0),
        (format!("{prefix}.up"), vec![h, m], INIT_STD),
        (format!("{prefix}.down"), vec![m, h], INIT_STD),
    ]
}

/// Names, shapes and init scales of every parameter, in creation order.
/// A scale of 1.0 marks a gain initialised to ones.
fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, f64)> {
    let (h, v, s) = (cfg.hidden_dim, cfg.vocab_size, cfg.max_seq_len);
    let mut out = vec![
        ("embed.tokens".to_string(), vec![v, h], INIT_STD),
        ("embed.positions".to_string(), vec![s, h], INIT_STD),
    ];
    for l in 0..cfg.num_layers {
        out.extend(layer_shapes(&format!("layers.{l}"), h));
    }
    for (e, spec) in cfg.exits_by_depth().iter().enumerate() {
        let p = format!("exits.{e}");
        match spec.head {
            HeadKind::Minimalistic => {}
            HeadKind::NormEmbed => out.push((format!("{p}.norm"), vec![h], 1.0)),
            HeadKind::MlpEmbed => {
                out.push((format!("{p}.mlp.norm"), vec![h], 1.0));
                out.push((format!("{p}.mlp.up"), vec![h, 4 * h], INIT_STD));
                out.push((format!("{p}.mlp.down"), vec![4 * h, h], INIT_STD));
                out.push((format!("{p}.norm"), vec![h], 1.0));
            }
            HeadKind::LayerEmbed => {
                out.extend(layer_shapes(&format!("{p}.layer"), h));
                out.push((format!("{p}.norm"), vec![h], 1.0));
            }
        }
        if !cfg.tie_embeddings {
            out.push((format!("{p}.out"), vec![v, h], INIT_STD));
        }
    }
    out.push(("final.norm".to_string(), vec![h], 1.0));
    if !cfg.tie_embeddings {
        out.push(("final.out".to_string(), vec![v, h], INIT_STD));
    }
    out
}

impl EarlyExitModel {
    /// Deterministic initialisation: the same `(config, seed)` yields
    /// bitwise-identical parameters.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = param_layout(&config)
            .into_iter()
            .map(|(name, shape, std)| {
                let t = if std == 1.0 { Tensor::full(&shape, 1.0) } else { Tensor::randn(&shape, std, &mut rng) };
                (name, t)
            })
            .collect();
        Ok(EarlyExitModel { config, params })
    }

    /// Reassembles a model from stored parameters, checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: ParamMap) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != params.len() {
            return Err(config_err(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &layout {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(config_err(format!("{name}: shape {:?}, expected {shape:?}", t.shape())))
                }
                None => return Err(config_err(format!("missing parameter {name}"))),
            }
        }
        let params = layout.iter().map(|(n, _, _)| (n.clone(), params[n].clone())).collect();
        Ok(EarlyExitModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamMap {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| config_err(format!("no parameter {name}")))
    }

    /// Parameter count by enumeration of the stored tensors.
    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn partition(&self, stages: usize) -> Result<StagePartition> {
        StagePartition::new(&self.config, stages)
    }

    /// Records embedding and backbone. Returns the hidden state tapped by
    /// each early exit (depth order) and the final hidden state.
    fn record_backbone(&self, tape: &mut Tape, bound: &Bound, tokens: &[usize], rows: usize, seq: usize) -> Result<(Vec<Var>, Var)> {
        let cfg = &self.config;
        let exits = cfg.exits_by_depth();
        let mut x = forward::embed(tape, bound, cfg, tokens, rows, seq)?;
        let mut taps = Vec::with_capacity(exits.len());
        for l in 0..cfg.num_layers {
            taps.extend(exits.iter().filter(|e| e.layer == l).map(|_| x));
            x = forward::block(tape, bound, &format!("layers.{l}"), x, cfg.num_heads)?;
        }
        Ok((taps, x))
    }

    /// Records the forward pass and returns the logits of every exit in
    /// depth order, final exit last. The final head is recorded first,
    /// matching the order used by pipeline stages.
    pub fn record_forward(&self, tape: &mut Tape, bound: &Bound, tokens: &[usize], rows: usize, seq: usize) -> Result<Vec<Var>> {
        let cfg = &self.config;
        let (taps, x) = self.record_backbone(tape, bound, tokens, rows, seq)?;
        let last = forward::head(tape, bound, cfg, HeadRef::Final, HeadKind::NormEmbed, x)?;
        let mut logits = Vec::with_capacity(taps.len() + 1);
        for (e, (spec, tap)) in cfg.exits_by_depth().iter().zip(taps).enumerate() {
            logits.push(forward::head(tape, bound, cfg, HeadRef::Early(e), spec.head, tap)?);
        }
        logits.push(last);
        Ok(logits)
    }

    /// Per-exit mean cross-entropy variables in depth order.
    fn record_losses(&self, tape: &mut Tape, bound: &Bound, batch: &Batch) -> Result<Vec<Var>> {
        let cfg = &self.config;
        let (taps, x) = self.record_backbone(tape, bound, &batch.inputs, batch.rows, batch.seq)?;
        let last = forward::exit_loss(tape, bound, cfg, HeadRef::Final, HeadKind::NormEmbed, x, &batch.targets)?;
        let mut losses = Vec::with_capacity(taps.len() + 1);
        for (e, (spec, tap)) in cfg.exits_by_depth().iter().zip(taps).enumerate() {
            losses.push(forward::exit_loss(tape, bound, cfg, HeadRef::Early(e), spec.head, tap, &batch.targets)?);
        }
        losses.push(last);
        Ok(losses)
    }

    /// Logits at every exit, each of shape `rows × seq × V`.
    pub fn forward_all_exits(&self, tokens: &[usize], rows: usize, seq: usize) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let bound = Bound::constants(&mut tape, &self.params);
        let logits = self.record_forward(&mut tape, &bound, tokens, rows, seq)?;
        Ok(logits.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    fn check_weights(&self, weights: &[f64]) -> Result<()> {
        if weights.len() != self.config.num_exits() {
            return Err(config_err(format!(
                "{} weights for {} exits",
                weights.len(),
                self.config.num_exits()
            )));
        }
        Ok(())
    }

    /// `Σ wᵢ · (mean next-token cross-entropy at exit i)` on `batch`.
    pub fn weighted_loss(&self, batch: &Batch, weights: &[f64]) -> Result<LossReport> {
        self.check_weights(weights)?;
        let mut tape = Tape::new();
        let bound = Bound::constants(&mut tape, &self.params);
        let (total, per_exit) = self.record_loss(&mut tape, &bound, batch, weights, 1.0)?;
        let total = tape.value(total).item()?;
        Ok(LossReport { total, per_exit })
    }

    fn record_loss(&self, tape: &mut Tape, bound: &Bound, batch: &Batch, weights: &[f64], scale: f64) -> Result<(Var, Vec<f64>)> {
        let losses = self.record_losses(tape, bound, batch)?;
        let per_exit = losses.iter().map(|&l| tape.value(l).item()).collect::<std::result::Result<Vec<_>, _>>()?;
        if per_exit.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss("monolithic forward".into()));
        }
        let total = forward::weighted_sum(tape, &losses, weights, scale)?.expect("final exit always present");
        Ok((total, per_exit))
    }

    /// Single-device loss and gradients of `scale · Σ wᵢ Lᵢ` on one batch.
    pub fn loss_and_grads(&self, batch: &Batch, weights: &[f64], scale: f64) -> Result<(LossReport, ParamMap)> {
        self.check_weights(weights)?;
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &self.params);
        let (total, per_exit) = self.record_loss(&mut tape, &bound, batch, weights, scale)?;
        let value = tape.value(total).item()?;
        let mut grads = tape.backward(total)?;
        let mut gm = forward::collect_grads(&bound, &mut grads);
        let ordered = self.params.keys().map(|k| (k.clone(), gm.swap_remove(k).expect("bound"))).collect();
        Ok((LossReport { total: value, per_exit }, ordered))
    }

    /// Gradient accumulation over equal microbatches in id order, each loss
    /// scaled by `1 / microbatches`. This is plain single-device training.
    pub fn accumulated_grads(&self, batch: &Batch, weights: &[f64], microbatches: usize) -> Result<ParamMap> {
        let parts = batch.split(microbatches)?;
        let scale = 1.0 / microbatches as f64;
        let mut acc: Option<ParamMap> = None;
        for mb in &parts {
            let (_, g) = self.loss_and_grads(mb, weights, scale)?;
            match &mut acc {
                None => acc = Some(g),
                Some(a) => {
                    for (k, v) in g {
                        a.get_mut(&k).expect("same layout").add_assign(&v)?;
                    }
                }
            }
        }
        Ok(acc.expect("at least one microbatch"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::random_batch;

    fn tiny(exits: Vec<ExitSpec>, tie: bool) -> ModelConfig {
        ModelConfig {
            num_layers: 4,
            hidden_dim: 8,
            num_heads: 2,
            vocab_size: 11,
            max_seq_len: 6,
            exits,
            tie_embeddings: tie,
        }
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = ModelConfig::default();
        let a = EarlyExitModel::build(cfg.clone(), 5).unwrap();
        let b = EarlyExitModel::build(cfg.clone(), 5).unwrap();
        assert_eq!(a, b);
        let c = EarlyExitModel::build(cfg, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn default_model_has_two_early_heads() {
        let m = EarlyExitModel::build(ModelConfig::default(), 0).unwrap();
        assert!(m.params().contains_key("exits.0.out"));
        assert!(m.params().contains_key("exits.1.out"));
        assert!(!m.params().contains_key("exits.2.out"));
        assert_eq!(m.config().exit_layers(), vec![2, 4, 8]);
    }

    #[test]
    fn param_count_formula_matches_enumeration() {
        for kind in [HeadKind::Minimalistic, HeadKind::NormEmbed, HeadKind::MlpEmbed, HeadKind::LayerEmbed] {
            for tie in [false, true] {
                let cfg = tiny(vec![ExitSpec::new(0, kind, 0.3), ExitSpec::new(2, kind, 0.5)], tie);
                let m = EarlyExitModel::build(cfg.clone(), 1).unwrap();
                assert_eq!(m.param_count(), cfg.param_count_formula(), "{kind:?} tie={tie}");
            }
        }
    }

    #[test]
    fn no_exits_is_backbone_plus_final_head() {
        let cfg = tiny(vec![], false);
        let m = EarlyExitModel::build(cfg.clone(), 1).unwrap();
        let (h, v, s) = (8, 11, 6);
        let backbone = v * h + s * h + 4 * config::layer_param_count(h);
        assert_eq!(m.param_count(), backbone + h + v * h);
    }

    #[test]
    fn tying_removes_every_output_embedding() {
        let exits = vec![ExitSpec::new(1, HeadKind::Minimalistic, 0.25), ExitSpec::new(2, HeadKind::Minimalistic, 0.5)];
        let untied = EarlyExitModel::build(tiny(exits.clone(), false), 1).unwrap();
        let tied = EarlyExitModel::build(tiny(exits, true), 1).unwrap();
        // two early heads plus the final head each drop a V×h matrix
        assert_eq!(untied.param_count() - tied.param_count(), 3 * 11 * 8);
    }

    #[test]
    fn forward_lists_every_exit() {
        let m = EarlyExitModel::build(tiny(vec![], false), 2).unwrap();
        let b = random_batch(2, 5, 11, 3);
        assert_eq!(m.forward_all_exits(&b.inputs, 2, 5).unwrap().len(), 1);
        let m = EarlyExitModel::build(
            tiny(vec![ExitSpec::new(2, HeadKind::NormEmbed, 0.5), ExitSpec::new(1, HeadKind::MlpEmbed, 0.25)], false),
            2,
        )
        .unwrap();
        let out = m.forward_all_exits(&b.inputs, 2, 5).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|t| t.shape() == [2, 5, 11]));
    }

    #[test]
    fn forward_rejects_bad_input() {
        let m = EarlyExitModel::build(tiny(vec![], false), 2).unwrap();
        assert!(matches!(m.forward_all_exits(&[0; 7], 1, 7), Err(Error::ContextOverflow { .. })));
        assert!(m.forward_all_exits(&[11, 0], 1, 2).is_err());
    }

    #[test]
    fn weighted_loss_is_weighted_sum() {
        let cfg = tiny(vec![ExitSpec::new(1, HeadKind::Minimalistic, 0.25), ExitSpec::new(3, HeadKind::NormEmbed, 0.5)], false);
        let m = EarlyExitModel::build(cfg, 4).unwrap();
        let b = random_batch(3, 5, 11, 8);
        let r = m.weighted_loss(&b, &[0.25, 0.5, 1.0]).unwrap();
        let manual = 0.25 * r.per_exit[0] + 0.5 * r.per_exit[1] + r.per_exit[2];
        assert!((r.total - manual).abs() < 1e-12);
        let final_only = m.weighted_loss(&b, &[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(final_only.total, r.per_exit[2]);
        assert!(m.weighted_loss(&b, &[1.0]).is_err());
    }
}
