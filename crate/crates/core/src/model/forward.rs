//! Tape-recorded building blocks shared by the monolithic model and the
//! pipeline stages. Both paths call the same functions in the same order,
//! which is what makes a one-stage pipeline bitwise equal to the model.

use std::collections::HashMap;

use exitpipe_tensor::{Tape, Tensor, Var, DEFAULT_RMS_EPS};

use crate::error::{config_err, Error, Result};
use crate::model::config::{HeadKind, ModelConfig};
use crate::model::ParamMap;

/// Parameters registered on a tape, looked up by name.
#[derive(Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    /// Registers every tensor as a gradient leaf, in map order.
    pub fn bind(tape: &mut Tape, params: &ParamMap) -> Self {
        let vars = params.iter().map(|(n, t)| (n.clone(), tape.param(t.clone()))).collect();
        Bound { vars }
    }

    /// Registers every tensor as a constant. Used for inference-only passes.
    pub fn constants(tape: &mut Tape, params: &ParamMap) -> Self {
        let vars = params.iter().map(|(n, t)| (n.clone(), tape.constant(t.clone()))).collect();
        Bound { vars }
    }

    /// Binds a subset of names, gradient-tracked.
    pub fn bind_subset<'a>(tape: &mut Tape, params: &ParamMap, names: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut vars = HashMap::new();
        for n in names {
            let t = params.get(n).ok_or_else(|| config_err(format!("missing parameter {n}")))?;
            vars.insert(n.to_string(), tape.param(t.clone()));
        }
        Ok(Bound { vars })
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| config_err(format!("parameter {name} is not bound on this tape")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Which output head to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadRef {
    Early(usize),
    Final,
}

pub fn out_embedding_name(cfg: &ModelConfig, head: HeadRef) -> String {
    if cfg.tie_embeddings {
        return "embed.tokens".to_string();
    }
    match head {
        HeadRef::Early(e) => format!("exits.{e}.out"),
        HeadRef::Final => "final.out".to_string(),
    }
}

pub fn check_tokens(cfg: &ModelConfig, tokens: &[usize], seq: usize) -> Result<()> {
    if seq > cfg.max_seq_len {
        return Err(Error::ContextOverflow { needed: seq, max: cfg.max_seq_len });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(exitpipe_tensor::TensorError::InvalidTokenId { id: bad, vocab: cfg.vocab_size }.into());
    }
    Ok(())
}

/// Token plus position embedding of a `rows × seq` token grid.
pub fn embed(tape: &mut Tape, b: &Bound, cfg: &ModelConfig, tokens: &[usize], rows: usize, seq: usize) -> Result<Var> {
    check_tokens(cfg, tokens, seq)?;
    let tok = tape.embedding(b.get("embed.tokens")?, tokens, &[rows, seq])?;
    let positions: Vec<usize> = (0..rows).flat_map(|_| 0..seq).collect();
    let pos = tape.embedding(b.get("embed.positions")?, &positions, &[rows, seq])?;
    Ok(tape.add(tok, pos)?)
}

/// Pre-norm transformer layer with parameters under `prefix`.
pub fn block(tape: &mut Tape, b: &Bound, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let p = |n: &str| format!("{prefix}.{n}");
    let h1 = tape.rmsnorm(x, b.get(&p("norm1"))?, DEFAULT_RMS_EPS)?;
    let q = tape.matmul(h1, b.get(&p("wq"))?)?;
    let k = tape.matmul(h1, b.get(&p("wk"))?)?;
    let v = tape.matmul(h1, b.get(&p("wv"))?)?;
    let a = tape.causal_attention(q, k, v, heads)?;
    let o = tape.matmul(a, b.get(&p("wo"))?)?;
    let x = tape.add(x, o)?;
    let m = mlp(tape, b, prefix, x)?;
    Ok(tape.add(x, m)?)
}

fn mlp(tape: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let p = |n: &str| format!("{prefix}.{n}");
    let norm_name = if prefix.ends_with(".mlp") { p("norm") } else { p("norm2") };
    let h2 = tape.rmsnorm(x, b.get(&norm_name)?, DEFAULT_RMS_EPS)?;
    let u = tape.matmul(h2, b.get(&p("up"))?)?;
    let u = tape.gelu(u)?;
    Ok(tape.matmul(u, b.get(&p("down"))?)?)
}

/// Logits of one exit head applied to hidden state `x`.
pub fn head(tape: &mut Tape, b: &Bound, cfg: &ModelConfig, which: HeadRef, kind: HeadKind, x: Var) -> Result<Var> {
    let prefix = match which {
        HeadRef::Early(e) => format!("exits.{e}"),
        HeadRef::Final => "final".to_string(),
    };
    let y = match kind {
        HeadKind::Minimalistic => x,
        HeadKind::NormEmbed => tape.rmsnorm(x, b.get(&format!("{prefix}.norm"))?, DEFAULT_RMS_EPS)?,
        HeadKind::MlpEmbed => {
            let m = mlp(tape, b, &format!("{prefix}.mlp"), x)?;
            let y = tape.add(x, m)?;
            tape.rmsnorm(y, b.get(&format!("{prefix}.norm"))?, DEFAULT_RMS_EPS)?
        }
        HeadKind::LayerEmbed => {
            let y = block(tape, b, &format!("{prefix}.layer"), x, cfg.num_heads)?;
            tape.rmsnorm(y, b.get(&format!("{prefix}.norm"))?, DEFAULT_RMS_EPS)?
        }
    };
    Ok(tape.matmul_bt(y, b.get(&out_embedding_name(cfg, which))?)?)
}

/// Head followed by mean next-token cross-entropy.
#[allow(clippy::too_many_arguments)]
pub fn exit_loss(tape: &mut Tape, b: &Bound, cfg: &ModelConfig, which: HeadRef, kind: HeadKind, x: Var, targets: &[usize]) -> Result<Var> {
    let logits = head(tape, b, cfg, which, kind, x)?;
    Ok(tape.cross_entropy(logits, targets)?)
}

/// `scale · Σ wᵢ·lossᵢ`, accumulated left to right. `None` when empty.
pub fn weighted_sum(tape: &mut Tape, losses: &[Var], weights: &[f64], scale: f64) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for (&l, &w) in losses.iter().zip(weights) {
        let term = tape.scale(l, w * scale)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc)
}

/// Extracts `name → gradient` for every bound parameter.
pub fn collect_grads(bound: &Bound, grads: &mut exitpipe_tensor::Gradients) -> ParamMap {
    let mut out: Vec<(String, Tensor)> = bound
        .iter()
        .filter_map(|(n, v)| grads.take(*v).map(|g| (n.clone(), g)))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out.into_iter().collect()
}
