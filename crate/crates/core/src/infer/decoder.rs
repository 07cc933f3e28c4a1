//! Row-wise forward arithmetic over a KV cache.
//!
//! Mirrors the tape forward op by op with the same kernels, so decoding a
//! position incrementally reproduces the full-sequence forward bitwise.

use exitpipe_tensor::{kernels, DEFAULT_RMS_EPS};

use crate::error::Result;
use crate::infer::kv::{head_slot, KvCache, LayerKv};
use crate::model::forward::{check_tokens, out_embedding_name};
use crate::model::{EarlyExitModel, ExitSpec, HeadKind, HeadRef, ModelConfig};

pub struct Decoder<'m> {
    model: &'m EarlyExitModel,
    exits: Vec<ExitSpec>,
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m EarlyExitModel) -> Self {
        Decoder { model, exits: model.config().exits_by_depth() }
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    pub fn exits(&self) -> &[ExitSpec] {
        &self.exits
    }

    /// Id of the early exit tapping the input of `layer`.
    pub fn exit_at(&self, layer: usize) -> Option<usize> {
        self.exits.iter().position(|e| e.layer == layer)
    }

    fn w(&self, name: &str) -> Result<&[f64]> {
        Ok(self.model.param(name)?.data())
    }

    fn hidden(&self) -> usize {
        self.config().hidden_dim
    }

    pub fn embed(&self, token: usize, pos: usize) -> Result<Vec<f64>> {
        check_tokens(self.config(), &[token], pos + 1)?;
        let h = self.hidden();
        let tok = &self.w("embed.tokens")?[token * h..(token + 1) * h];
        let at = &self.w("embed.positions")?[pos * h..(pos + 1) * h];
        Ok(add(tok, at))
    }

    fn rmsnorm(&self, x: &[f64], gain: &str) -> Result<Vec<f64>> {
        let h = self.hidden();
        let g = self.w(gain)?;
        let mut out = vec![0.0; x.len()];
        for (xr, or) in x.chunks(h).zip(out.chunks_mut(h)) {
            kernels::rmsnorm_row(xr, g, DEFAULT_RMS_EPS, or);
        }
        Ok(out)
    }

    fn mlp(&self, prefix: &str, x: &[f64]) -> Result<Vec<f64>> {
        let (h, m) = (self.hidden(), self.config().mlp_dim());
        let rows = x.len() / h;
        let norm = if prefix.ends_with(".mlp") { format!("{prefix}.norm") } else { format!("{prefix}.norm2") };
        let h2 = self.rmsnorm(x, &norm)?;
        let u: Vec<f64> = kernels::matmul(&h2, rows, h, self.w(&format!("{prefix}.up"))?, m).into_iter().map(kernels::gelu).collect();
        Ok(kernels::matmul(&u, rows, m, self.w(&format!("{prefix}.down"))?, h))
    }

    /// Key and value rows of an attention layer's input.
    fn kv_rows(&self, prefix: &str, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let h = self.hidden();
        let rows = x.len() / h;
        let h1 = self.rmsnorm(x, &format!("{prefix}.norm1"))?;
        let proj = |n: &str| -> Result<Vec<f64>> { Ok(kernels::matmul(&h1, rows, h, self.w(&format!("{prefix}.{n}"))?, h)) };
        Ok((proj("wq")?, proj("wk")?, proj("wv")?))
    }

    /// One transformer layer over rows at positions `pos`. All rows write
    /// their KV before any row attends, so a batch may hold consecutive
    /// positions that attend to each other.
    fn layer(&self, kv: &mut LayerKv, prefix: &str, pos: &[usize], x: &[f64]) -> Result<Vec<f64>> {
        let (h, heads) = (self.hidden(), self.config().num_heads);
        let (q, k, v) = self.kv_rows(prefix, x)?;
        for (r, &p) in pos.iter().enumerate() {
            kv.write(p, &k[r * h..(r + 1) * h], &v[r * h..(r + 1) * h])?;
        }
        let d = h / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut a = vec![0.0; x.len()];
        let mut probs = vec![0.0; pos.iter().max().map_or(0, |m| m + 1)];
        let kv = &*kv;
        for (r, &p) in pos.iter().enumerate() {
            kv.require_prefix(p)?;
            for hd in 0..heads {
                let off = hd * d;
                kernels::attend_head(
                    &q[r * h + off..r * h + off + d],
                    p + 1,
                    |j| &kv.key(j)[off..off + d],
                    |j| &kv.value(j)[off..off + d],
                    scale,
                    &mut a[r * h + off..r * h + off + d],
                    &mut probs,
                );
            }
        }
        let o = kernels::matmul(&a, pos.len(), h, self.w(&format!("{prefix}.wo"))?, h);
        let x = add(x, &o);
        let m = self.mlp(prefix, &x)?;
        Ok(add(&x, &m))
    }

    /// Backbone layer `l` on a batch of rows.
    pub fn block(&self, kv: &mut KvCache, l: usize, pos: &[usize], x: &[f64]) -> Result<Vec<f64>> {
        self.layer(&mut kv.layers[l], &format!("layers.{l}"), pos, x)
    }

    /// Logits of one head for a single row.
    pub fn head_logits(&self, kv: &mut KvCache, which: HeadRef, pos: usize, x: &[f64]) -> Result<Vec<f64>> {
        let cfg = self.config();
        let (prefix, kind) = match which {
            HeadRef::Early(e) => (format!("exits.{e}"), self.exits[e].head),
            HeadRef::Final => ("final".to_string(), HeadKind::NormEmbed),
        };
        let y = match kind {
            HeadKind::Minimalistic => x.to_vec(),
            HeadKind::NormEmbed => self.rmsnorm(x, &format!("{prefix}.norm"))?,
            HeadKind::MlpEmbed => {
                let m = self.mlp(&format!("{prefix}.mlp"), x)?;
                self.rmsnorm(&add(x, &m), &format!("{prefix}.norm"))?
            }
            HeadKind::LayerEmbed => {
                let HeadRef::Early(e) = which else { unreachable!("final head has no layer") };
                let slot = head_slot(cfg, e).expect("layer head has a slot");
                let y = self.layer(&mut kv.layers[slot], &format!("{prefix}.layer"), &[pos], x)?;
                self.rmsnorm(&y, &format!("{prefix}.norm"))?
            }
        };
        let h = self.hidden();
        Ok(kernels::matmul_bt(&y, 1, h, self.w(&out_embedding_name(cfg, which))?, cfg.vocab_size))
    }

    /// Fills the head's own KV for rows that pass the exit without
    /// evaluating it. Heads without attention hold no cache.
    pub fn head_fill(&self, kv: &mut KvCache, e: usize, pos: &[usize], x: &[f64]) -> Result<()> {
        let Some(slot) = head_slot(self.config(), e) else { return Ok(()) };
        let h = self.hidden();
        let (_, k, v) = self.kv_rows(&format!("exits.{e}.layer"), x)?;
        for (r, &p) in pos.iter().enumerate() {
            kv.layers[slot].write(p, &k[r * h..(r + 1) * h], &v[r * h..(r + 1) * h])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ExitSpec;

    #[test]
    fn incremental_rows_equal_full_forward() {
        let cfg = ModelConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            vocab_size: 11,
            max_seq_len: 6,
            exits: vec![ExitSpec::new(1, HeadKind::LayerEmbed, 0.5), ExitSpec::new(0, HeadKind::MlpEmbed, 0.5)],
            tie_embeddings: false,
        };
        let model = EarlyExitModel::build(cfg.clone(), 5).unwrap();
        let tokens = [3, 1, 4, 1, 5];
        let full = model.forward_all_exits(&tokens, 1, tokens.len()).unwrap();
        let dec = Decoder::new(&model);
        let mut kv = KvCache::new(&cfg);
        let v = cfg.vocab_size;
        for (t, &tok) in tokens.iter().enumerate() {
            let mut x = dec.embed(tok, t).unwrap();
            for l in 0..=cfg.num_layers {
                if let Some(e) = dec.exit_at(l) {
                    let logits = dec.head_logits(&mut kv, HeadRef::Early(e), t, &x).unwrap();
                    assert_eq!(logits, full[e].data()[t * v..(t + 1) * v]);
                }
                if l < cfg.num_layers {
                    x = dec.block(&mut kv, l, &[t], &x).unwrap();
                }
            }
            let last = dec.head_logits(&mut kv, HeadRef::Final, t, &x).unwrap();
            assert_eq!(last, full[2].data()[t * v..(t + 1) * v]);
        }
        assert!(kv.is_complete(tokens.len()));
    }
}
