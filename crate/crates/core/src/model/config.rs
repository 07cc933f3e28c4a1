use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Structure of an exit head between the backbone hidden state and the
/// output embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Output embedding only.
    #[default]
    Minimalistic,
    /// RMSNorm, then output embedding.
    NormEmbed,
    /// Residual MLP block, RMSNorm, output embedding.
    MlpEmbed,
    /// Full transformer layer, RMSNorm, output embedding.
    LayerEmbed,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Minimalistic => "minimalistic",
            HeadKind::NormEmbed => "norm-embed",
            HeadKind::MlpEmbed => "mlp-embed",
            HeadKind::LayerEmbed => "layer-embed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [HeadKind::Minimalistic, HeadKind::NormEmbed, HeadKind::MlpEmbed, HeadKind::LayerEmbed]
            .into_iter()
            .find(|k| k.as_str() == s)
    }

    /// Whether the head contains an attention layer and therefore its own
    /// KV cache during decoding.
    pub fn has_attention(self) -> bool {
        self == HeadKind::LayerEmbed
    }
}

/// An early exit attached to the hidden state after `layer` backbone layers.
/// Layer 0 is the embedding output, right before the first layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExitSpec {
    pub layer: usize,
    #[serde(default)]
    pub head: HeadKind,
    pub weight: f64,
}

impl ExitSpec {
    pub fn new(layer: usize, head: HeadKind, weight: f64) -> Self {
        ExitSpec { layer, head, weight }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub exits: Vec<ExitSpec>,
    #[serde(default)]
    pub tie_embeddings: bool,
}

/// Loss weight of the final exit.
pub const FINAL_EXIT_WEIGHT: f64 = 1.0;

impl Default for ModelConfig {
    /// Desk-scale default: 8 layers, h=64, 4 heads, V=256, s=64, with
    /// minimalistic exits at 1/4 and 1/2 depth weighted 1/4 and 1/2.
    fn default() -> Self {
        ModelConfig {
            num_layers: 8,
            hidden_dim: 64,
            num_heads: 4,
            vocab_size: 256,
            max_seq_len: 64,
            exits: vec![
                ExitSpec::new(2, HeadKind::Minimalistic, 0.25),
                ExitSpec::new(4, HeadKind::Minimalistic, 0.5),
            ],
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(config_err(format!("{name} must be positive")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(config_err(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        let mut layers: Vec<usize> = self.exits.iter().map(|e| e.layer).collect();
        layers.sort_unstable();
        if layers.windows(2).any(|w| w[0] == w[1]) {
            return Err(config_err(format!("duplicate exit layers in {layers:?}")));
        }
        for e in &self.exits {
            // The final exit at num_layers is always present implicitly.
            if e.layer >= self.num_layers {
                return Err(config_err(format!(
                    "exit layer {} must be below num_layers {}",
                    e.layer, self.num_layers
                )));
            }
            if !(e.weight >= 0.0) || !e.weight.is_finite() {
                return Err(config_err(format!("exit weight {} must be non-negative", e.weight)));
            }
        }
        Ok(())
    }

    /// Early exits sorted by depth. Exit ids used throughout the crate index
    /// this list; the final exit has id `num_exits() - 1`.
    pub fn exits_by_depth(&self) -> Vec<ExitSpec> {
        let mut v = self.exits.clone();
        v.sort_by_key(|e| e.layer);
        v
    }

    /// Number of exits including the final one.
    pub fn num_exits(&self) -> usize {
        self.exits.len() + 1
    }

    /// Default per-exit loss weights in depth order, final weight last.
    pub fn default_weights(&self) -> Vec<f64> {
        let mut w: Vec<f64> = self.exits_by_depth().iter().map(|e| e.weight).collect();
        w.push(FINAL_EXIT_WEIGHT);
        w
    }

    /// Layer index each exit attaches to, final exit included.
    pub fn exit_layers(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.exits_by_depth().iter().map(|e| e.layer).collect();
        v.push(self.num_layers);
        v
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.hidden_dim
    }

    /// Closed-form parameter count, independent of the enumeration in
    /// [`crate::model::EarlyExitModel::param_count`].
    pub fn param_count_formula(&self) -> usize {
        let (h, v, s) = (self.hidden_dim, self.vocab_size, self.max_seq_len);
        let layer = layer_param_count(h);
        let embed = v * h + s * h;
        let out = if self.tie_embeddings { 0 } else { v * h };
        let heads: usize = self.exits.iter().map(|e| head_param_count(e.head, h) + out).sum();
        let final_head = h + out;
        embed + self.num_layers * layer + heads + final_head
    }
}

/// Parameters of one transformer layer: two gains, four attention
/// projections and a 4x MLP.
pub fn layer_param_count(h: usize) -> usize {
    2 * h + 4 * h * h + 2 * 4 * h * h
}

/// Parameters of an exit head excluding its output embedding.
pub fn head_param_count(kind: HeadKind, h: usize) -> usize {
    match kind {
        HeadKind::Minimalistic => 0,
        HeadKind::NormEmbed => h,
        HeadKind::MlpEmbed => h + 2 * 4 * h * h + h,
        HeadKind::LayerEmbed => layer_param_count(h) + h,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.num_exits(), 3);
        assert_eq!(c.default_weights(), vec![0.25, 0.5, 1.0]);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig { num_heads: 3, ..Default::default() };
        assert!(c.validate().is_err());
        c.num_heads = 4;
        c.exits.push(ExitSpec::new(2, HeadKind::NormEmbed, 0.1));
        assert!(c.validate().is_err());
        c.exits.pop();
        c.exits.push(ExitSpec::new(8, HeadKind::NormEmbed, 0.1));
        assert!(c.validate().is_err());
        c.exits.pop();
        c.exits.push(ExitSpec::new(0, HeadKind::NormEmbed, -0.1));
        assert!(c.validate().is_err());
    }
}
