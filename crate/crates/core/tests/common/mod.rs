#![allow(dead_code)]

use exitpipe::model::{ExitSpec, HeadKind, ModelConfig, ParamMap};

/// Largest elementwise gap of each tensor relative to that tensor's scale.
pub fn max_rel_error(got: &ParamMap, want: &ParamMap) -> (String, f64) {
    assert_eq!(got.len(), want.len(), "parameter sets differ");
    let mut worst = (String::new(), 0.0f64);
    for (name, w) in want {
        let g = &got[name];
        assert_eq!(g.shape(), w.shape(), "{name}");
        let scale = w.max_abs().max(1e-300);
        let err = g.data().iter().zip(w.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
        if err > worst.1 {
            worst = (name.clone(), err);
        }
    }
    worst
}

pub fn bitwise_equal(a: &ParamMap, b: &ParamMap) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|((na, ta), (nb, tb))| {
            na == nb && ta.shape() == tb.shape() && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

pub fn small_config(layers: usize, exits: &[usize], tie: bool) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        hidden_dim: 8,
        num_heads: 2,
        vocab_size: 13,
        max_seq_len: 6,
        exits: exits
            .iter()
            .enumerate()
            .map(|(i, &l)| ExitSpec::new(l, HeadKind::NormEmbed, 0.25 * (i + 1) as f64))
            .collect(),
        tie_embeddings: tie,
    }
}
