use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The nine differentiable operation kinds exposed through [`Tape::apply`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    Scale,
    EmbeddingLookup,
    RmsNorm,
    Softmax,
    Gelu,
    CausalAttention,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 9] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Scale,
        OpKind::EmbeddingLookup,
        OpKind::RmsNorm,
        OpKind::Softmax,
        OpKind::Gelu,
        OpKind::CausalAttention,
        OpKind::CrossEntropy,
    ];
}

/// Attributes for [`Tape::apply`]; each kind reads only the fields it needs.
#[derive(Clone, Debug, Default)]
pub struct OpAttrs {
    /// MatMul: multiply by the transpose of the second operand.
    pub transpose_b: bool,
    /// Scale factor.
    pub factor: f64,
    /// Embedding ids, row-major over `ids_shape`.
    pub ids: Vec<usize>,
    pub ids_shape: Vec<usize>,
    /// RmsNorm epsilon.
    pub eps: f64,
    /// CausalAttention head count.
    pub heads: usize,
    /// CrossEntropy targets, one per logits row.
    pub targets: Vec<usize>,
}

pub const DEFAULT_RMS_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulBT { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Embedding { table: Var, ids: Vec<usize> },
    RmsNorm { x: Var, gain: Var, inv: Vec<f64> },
    Softmax { x: Var },
    Gelu { x: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum { a: Var },
    DotConst { a: Var, c: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-use reverse-mode tape.
///
/// Values are recorded in creation order, so every node's inputs precede it.
/// [`Tape::backward`] may run once; afterwards the tape only answers value
/// queries.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass, keyed by variable.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn check(&self, var: Var) -> Result<&Tensor> {
        self.nodes.get(var.0).map(|n| &n.value).ok_or(TensorError::UnknownVar(var.0))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        // Nodes that need no gradient keep their value but drop the rule.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Generic entry point dispatching on [`OpKind`].
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var], attrs: &OpAttrs) -> Result<Var> {
        let arity = match kind {
            OpKind::MatMul | OpKind::Add => 2,
            OpKind::EmbeddingLookup
            | OpKind::Scale
            | OpKind::Softmax
            | OpKind::Gelu
            | OpKind::CrossEntropy => 1,
            OpKind::RmsNorm => 2,
            OpKind::CausalAttention => 3,
        };
        if inputs.len() != arity {
            return Err(TensorError::InvalidArgument(format!(
                "{kind:?} expects {arity} inputs, got {}",
                inputs.len()
            )));
        }
        match kind {
            OpKind::MatMul if attrs.transpose_b => self.matmul_bt(inputs[0], inputs[1]),
            OpKind::MatMul => self.matmul(inputs[0], inputs[1]),
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Scale => self.scale(inputs[0], attrs.factor),
            OpKind::EmbeddingLookup => self.embedding(inputs[0], &attrs.ids, &attrs.ids_shape),
            OpKind::RmsNorm => {
                let eps = if attrs.eps > 0.0 { attrs.eps } else { DEFAULT_RMS_EPS };
                self.rmsnorm(inputs[0], inputs[1], eps)
            }
            OpKind::Softmax => self.softmax(inputs[0]),
            OpKind::Gelu => self.gelu(inputs[0]),
            OpKind::CausalAttention => {
                self.causal_attention(inputs[0], inputs[1], inputs[2], attrs.heads)
            }
            OpKind::CrossEntropy => self.cross_entropy(inputs[0], &attrs.targets),
        }
    }

    /// `a[..., k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        if bv.shape().len() != 2 || av.shape().is_empty() || av.last_dim() != bv.shape()[0] {
            return Err(mismatch("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let (k, n) = (bv.shape()[0], bv.shape()[1]);
        let rows = av.rows();
        let data = kernels::matmul(av.data(), rows, k, bv.data(), n);
        check_finite("matmul", &data)?;
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::MatMul { a, b }, rg))
    }

    /// `a[..., k] · b[n, k]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        if bv.shape().len() != 2 || av.shape().is_empty() || av.last_dim() != bv.shape()[1] {
            return Err(mismatch("matmul", format!("{:?} x {:?}ᵀ", av.shape(), bv.shape())));
        }
        let (n, k) = (bv.shape()[0], bv.shape()[1]);
        let rows = av.rows();
        let data = kernels::matmul_bt(av.data(), rows, k, bv.data(), n);
        check_finite("matmul", &data)?;
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::MatMulBT { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        if av.shape() != bv.shape() {
            return Err(mismatch("add", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let data: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        check_finite("add", &data)?;
        let shape = av.shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        if av.shape() != bv.shape() {
            return Err(mismatch("mul", format!("{:?} * {:?}", av.shape(), bv.shape())));
        }
        let data: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        check_finite("mul", &data)?;
        let shape = av.shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let av = self.check(a)?;
        let data: Vec<f64> = av.data().iter().map(|x| x * factor).collect();
        check_finite("scale", &data)?;
        let shape = av.shape().to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Scale { a, factor }, rg))
    }

    /// Gathers rows of `table[vocab, h]`; output shape is `ids_shape ++ [h]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let tv = self.check(table)?;
        if tv.shape().len() != 2 {
            return Err(mismatch("embedding", format!("table shape {:?}", tv.shape())));
        }
        if ids_shape.iter().product::<usize>() != ids.len() || ids.is_empty() {
            return Err(mismatch(
                "embedding",
                format!("{} ids for shape {ids_shape:?}", ids.len()),
            ));
        }
        let (vocab, h) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::InvalidTokenId { id, vocab });
            }
            data.extend_from_slice(&tv.data()[id * h..(id + 1) * h]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(h);
        let rg = self.any_grad(&[table]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// RMS normalization over the last dimension with a learned gain.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (xv, gv) = (self.check(x)?, self.check(gain)?);
        let h = xv.last_dim();
        if gv.shape() != [h] || xv.shape().is_empty() {
            return Err(mismatch("rmsnorm", format!("{:?} with gain {:?}", xv.shape(), gv.shape())));
        }
        let rows = xv.rows();
        let mut data = vec![0.0; xv.numel()];
        let mut inv = Vec::with_capacity(rows);
        for r in 0..rows {
            let out = &mut data[r * h..(r + 1) * h];
            inv.push(kernels::rmsnorm_row(&xv.data()[r * h..(r + 1) * h], gv.data(), eps, out));
        }
        check_finite("rmsnorm", &data)?;
        let shape = xv.shape().to_vec();
        let rg = self.any_grad(&[x, gain]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::RmsNorm { x, gain, inv }, rg))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.check(x)?;
        let h = xv.last_dim();
        let mut data = vec![0.0; xv.numel()];
        for r in 0..xv.rows() {
            kernels::softmax_row(&xv.data()[r * h..(r + 1) * h], &mut data[r * h..(r + 1) * h]);
        }
        check_finite("softmax", &data)?;
        let shape = xv.shape().to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Softmax { x }, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.check(x)?;
        let data: Vec<f64> = xv.data().iter().map(|&v| kernels::gelu(v)).collect();
        check_finite("gelu", &data)?;
        let shape = xv.shape().to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Gelu { x }, rg))
    }

    /// Multi-head causal self-attention on pre-projected `q, k, v` of shape
    /// `[batch, seq, h]`; position `t` attends to positions `0..=t`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.check(q)?, self.check(k)?, self.check(v)?);
        if qv.shape().len() != 3 || qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(mismatch(
                "causal_attention",
                format!("q {:?}, k {:?}, v {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        let (batch, seq, h) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        if heads == 0 || h % heads != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "hidden size {h} not divisible by {heads} heads"
            )));
        }
        let d = h / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut data = vec![0.0; qv.numel()];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for bi in 0..batch {
            let base = bi * seq * h;
            for hd in 0..heads {
                let off = hd * d;
                for t in 0..seq {
                    let qrow = &qd[base + t * h + off..base + t * h + off + d];
                    let prow = &mut probs[((bi * heads + hd) * seq + t) * seq..][..seq];
                    let out = &mut data[base + t * h + off..base + t * h + off + d];
                    kernels::attend_head(
                        qrow,
                        t + 1,
                        |j| &kd[base + j * h + off..base + j * h + off + d],
                        |j| &vd[base + j * h + off..base + j * h + off + d],
                        scale,
                        out,
                        prow,
                    );
                }
            }
        }
        check_finite("causal_attention", &data)?;
        let shape = qv.shape().to_vec();
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Attention { q, k, v, heads, probs }, rg))
    }

    /// Mean next-token cross-entropy of `logits[..., V]` against one target
    /// per row. Returns a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.check(logits)?;
        let vocab = lv.last_dim();
        let rows = lv.rows();
        if targets.len() != rows || lv.shape().is_empty() {
            return Err(mismatch(
                "cross_entropy",
                format!("{} targets for logits {:?}", targets.len(), lv.shape()),
            ));
        }
        let mut probs = vec![0.0; lv.numel()];
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(TensorError::InvalidTokenId { id: t, vocab });
            }
            let row = &lv.data()[r * vocab..(r + 1) * vocab];
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            kernels::softmax_row(row, p);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let loss = total / rows as f64;
        check_finite("cross_entropy", &[loss])?;
        let rg = self.any_grad(&[logits]);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        Ok(self.push(Tensor::from_parts(Vec::new(), vec![loss]), op, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.check(a)?.sum();
        check_finite("sum", &[s])?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::from_parts(Vec::new(), vec![s]), Op::Sum { a }, rg))
    }

    /// `⟨c, a⟩` where `c` is a constant: no gradient flows into `c`.
    pub fn dot_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let av = self.check(a)?;
        if av.shape() != c.shape() {
            return Err(mismatch("dot", format!("{:?} vs {:?}", av.shape(), c.shape())));
        }
        let s = kernels::dot(av.data(), c.data());
        check_finite("dot", &[s])?;
        let rg = self.any_grad(&[a]);
        let op = Op::DotConst { a, c: c.data().to_vec() };
        Ok(self.push(Tensor::from_parts(Vec::new(), vec![s]), op, rg))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every leaf created with `requires_grad` gets an entry; leaves the loss
    /// does not depend on get zeros. Consumes the tape's saved state.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let lv = self.check(loss)?;
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar { shape: lv.shape().to_vec() });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let shape = node.value.shape().to_vec();
                let data = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                out.grads.insert(Var(i), Tensor::from_parts(shape, data));
            }
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut accumulate = |var: Var, contrib: Vec<f64>| {
            if !nodes[var.0].requires_grad {
                return;
            }
            match &mut grads[var.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(&contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let rows = av.rows();
                if nodes[a.0].requires_grad {
                    accumulate(*a, kernels::matmul_bt(g, rows, n, bv.data(), k));
                }
                if nodes[b.0].requires_grad {
                    accumulate(*b, kernels::matmul_at(av.data(), rows, k, g, n));
                }
            }
            Op::MatMulBT { a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (n, k) = (bv.shape()[0], bv.shape()[1]);
                let rows = av.rows();
                if nodes[a.0].requires_grad {
                    accumulate(*a, kernels::matmul(g, rows, n, bv.data(), k));
                }
                if nodes[b.0].requires_grad {
                    accumulate(*b, kernels::matmul_at(g, rows, n, av.data(), k));
                }
            }
            Op::Add { a, b } => {
                accumulate(*a, g.to_vec());
                accumulate(*b, g.to_vec());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                accumulate(*a, g.iter().zip(bv.data()).map(|(x, y)| x * y).collect());
                accumulate(*b, g.iter().zip(av.data()).map(|(x, y)| x * y).collect());
            }
            Op::Scale { a, factor } => {
                accumulate(*a, g.iter().map(|x| x * factor).collect());
            }
            Op::Embedding { table, ids } => {
                let tv = &nodes[table.0].value;
                let h = tv.shape()[1];
                let mut d = vec![0.0; tv.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &gv) in d[id * h..(id + 1) * h].iter_mut().zip(&g[r * h..(r + 1) * h]) {
                        *o += gv;
                    }
                }
                accumulate(*table, d);
            }
            Op::RmsNorm { x, gain, inv } => {
                let (xv, gv) = (&nodes[x.0].value, &nodes[gain.0].value);
                let h = xv.last_dim();
                let mut dx = vec![0.0; xv.numel()];
                let mut dgain = vec![0.0; h];
                for (r, &ir) in inv.iter().enumerate() {
                    let xr = &xv.data()[r * h..(r + 1) * h];
                    let gr = &g[r * h..(r + 1) * h];
                    let mut proj = 0.0;
                    for j in 0..h {
                        proj += gr[j] * gv.data()[j] * xr[j];
                        dgain[j] += gr[j] * xr[j] * ir;
                    }
                    let c = ir * ir * ir * proj / h as f64;
                    for j in 0..h {
                        dx[r * h + j] = ir * gr[j] * gv.data()[j] - c * xr[j];
                    }
                }
                accumulate(*x, dx);
                accumulate(*gain, dgain);
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let h = node.value.last_dim();
                let mut dx = vec![0.0; y.len()];
                for r in 0..node.value.rows() {
                    let (yr, gr) = (&y[r * h..(r + 1) * h], &g[r * h..(r + 1) * h]);
                    let s = kernels::dot(yr, gr);
                    for j in 0..h {
                        dx[r * h + j] = yr[j] * (gr[j] - s);
                    }
                }
                accumulate(*x, dx);
            }
            Op::Gelu { x } => {
                let xv = &nodes[x.0].value;
                accumulate(
                    *x,
                    xv.data().iter().zip(g).map(|(&v, gv)| kernels::gelu_grad(v) * gv).collect(),
                );
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let (batch, seq, h) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
                let d = h / heads;
                let scale = 1.0 / (d as f64).sqrt();
                let mut dq = vec![0.0; qv.numel()];
                let mut dk = vec![0.0; kv.numel()];
                let mut dv = vec![0.0; vv.numel()];
                let mut dp = vec![0.0; seq];
                for bi in 0..batch {
                    let base = bi * seq * h;
                    for hd in 0..*heads {
                        let off = hd * d;
                        for t in 0..seq {
                            let prow = &probs[((bi * heads + hd) * seq + t) * seq..][..seq];
                            let go = &g[base + t * h + off..base + t * h + off + d];
                            let mut s = 0.0;
                            for j in 0..=t {
                                let vj = &vv.data()[base + j * h + off..base + j * h + off + d];
                                dp[j] = kernels::dot(go, vj);
                                s += prow[j] * dp[j];
                                let dvj = &mut dv[base + j * h + off..base + j * h + off + d];
                                for (o, &gv) in dvj.iter_mut().zip(go) {
                                    *o += prow[j] * gv;
                                }
                            }
                            let qt = &qv.data()[base + t * h + off..base + t * h + off + d];
                            for j in 0..=t {
                                let ds = prow[j] * (dp[j] - s) * scale;
                                let kj = &kv.data()[base + j * h + off..base + j * h + off + d];
                                let dqt = &mut dq[base + t * h + off..base + t * h + off + d];
                                for (o, &kvv) in dqt.iter_mut().zip(kj) {
                                    *o += ds * kvv;
                                }
                                let dkj = &mut dk[base + j * h + off..base + j * h + off + d];
                                for (o, &qvv) in dkj.iter_mut().zip(qt) {
                                    *o += ds * qvv;
                                }
                            }
                        }
                    }
                }
                accumulate(*q, dq);
                accumulate(*k, dk);
                accumulate(*v, dv);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let vocab = nodes[logits.0].value.last_dim();
                let scale = g[0] / targets.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * vocab + t] -= scale;
                }
                accumulate(*logits, d);
            }
            Op::Sum { a } => {
                accumulate(*a, vec![g[0]; nodes[a.0].value.numel()]);
            }
            Op::DotConst { a, c } => {
                accumulate(*a, c.iter().map(|x| x * g[0]).collect());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn cross_entropy_two_equal_logits_is_ln2() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        let l = tape.cross_entropy(x, &[0]).unwrap();
        assert!((tape.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn dot_with_constant_returns_constant_exactly() {
        let gvals = [0.1, -2.5, 3.0e-7, 42.0];
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let l = tape.dot_const(x, &t(&[2, 2], &gvals)).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &gvals);
    }

    #[test]
    fn two_consumers_accumulate() {
        // loss = sum(2x) + sum(x * x)  =>  grad = 2 + 2x
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.5, -0.5]));
        let a = tape.scale(x, 2.0).unwrap();
        let sa = tape.sum(a).unwrap();
        let b = tape.mul(x, x).unwrap();
        let sb = tape.sum(b).unwrap();
        let l = tape.add(sa, sb).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0 + 3.0, 2.0 - 1.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let l = tape.sum(x).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(y).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar { .. })));
        let l = tape.sum(x).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.backward(l).unwrap_err(), TensorError::TapeConsumed);
    }

    #[test]
    fn op_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
        let logits = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            tape.cross_entropy(logits, &[3]),
            Err(TensorError::InvalidTokenId { id: 3, vocab: 3 })
        ));
        let table = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(
            tape.embedding(table, &[9], &[1]),
            Err(TensorError::InvalidTokenId { .. })
        ));
        let big = tape.constant(Tensor::full(&[1], 1e308));
        assert!(matches!(tape.scale(big, 10.0), Err(TensorError::NonFinite { .. })));
    }
}
