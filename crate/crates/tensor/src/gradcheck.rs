use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::tape::{OpAttrs, OpKind, Tape, Var};
use crate::tensor::Tensor;

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` receives a fresh tape and the input variable and must return a scalar
/// variable. Returns the maximum over coordinates of
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(TensorError::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get(xv).expect("input is a gradient leaf").clone();

    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(point, false);
        let out = f(&mut tape, v)?;
        let value = tape.value(out).item()?;
        if value.is_finite() {
            Ok(value)
        } else {
            Err(TensorError::NonFinite { op: "finite_difference_check" })
        }
    };

    let mut worst = 0.0_f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Step used by [`op_gradient_suite`].
pub const SUITE_EPS: f64 = 1e-5;

/// One random instance of an op: inputs, the input slots to check, attributes
/// and the output shape.
struct Case {
    inputs: Vec<Tensor>,
    slots: Vec<usize>,
    attrs: OpAttrs,
    out_shape: Vec<usize>,
}

fn random_case(kind: OpKind, rng: &mut ChaCha8Rng) -> Case {
    let randn = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::randn(shape, 1.0, rng);
    match kind {
        OpKind::MatMul => {
            let (m, k, n) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..4));
            let tb = rng.random_bool(0.5);
            let a = randn(&[2, m, k], rng);
            let b = if tb { randn(&[n, k], rng) } else { randn(&[k, n], rng) };
            let attrs = OpAttrs { transpose_b: tb, ..Default::default() };
            Case { inputs: vec![a, b], slots: vec![0, 1], attrs, out_shape: vec![2, m, n] }
        }
        OpKind::Add => {
            let shape = [rng.random_range(1..4), rng.random_range(1..5)];
            let (a, b) = (randn(&shape, rng), randn(&shape, rng));
            Case { inputs: vec![a, b], slots: vec![0, 1], attrs: OpAttrs::default(), out_shape: shape.to_vec() }
        }
        OpKind::Scale => {
            let shape = [rng.random_range(1..6)];
            let a = randn(&shape, rng);
            let attrs = OpAttrs { factor: rng.random_range(-3.0..3.0), ..Default::default() };
            Case { inputs: vec![a], slots: vec![0], attrs, out_shape: shape.to_vec() }
        }
        OpKind::EmbeddingLookup => {
            let (vocab, h) = (rng.random_range(2..7), rng.random_range(1..5));
            let table = randn(&[vocab, h], rng);
            let ids: Vec<usize> = (0..6).map(|_| rng.random_range(0..vocab)).collect();
            let attrs = OpAttrs { ids, ids_shape: vec![2, 3], ..Default::default() };
            Case { inputs: vec![table], slots: vec![0], attrs, out_shape: vec![2, 3, h] }
        }
        OpKind::RmsNorm => {
            let h = rng.random_range(2..7);
            let x = randn(&[3, h], rng);
            let mut gain = Tensor::randn(&[h], 0.3, rng);
            gain.data_mut().iter_mut().for_each(|g| *g += 1.0);
            let attrs = OpAttrs { eps: 1e-5, ..Default::default() };
            Case { inputs: vec![x, gain], slots: vec![0, 1], attrs, out_shape: vec![3, h] }
        }
        OpKind::Softmax => {
            let shape = [rng.random_range(1..4), rng.random_range(2..6)];
            Case { inputs: vec![randn(&shape, rng)], slots: vec![0], attrs: OpAttrs::default(), out_shape: shape.to_vec() }
        }
        OpKind::Gelu => {
            let shape = [rng.random_range(1..8)];
            let x = Tensor::randn(&shape, 1.5, rng);
            Case { inputs: vec![x], slots: vec![0], attrs: OpAttrs::default(), out_shape: shape.to_vec() }
        }
        OpKind::CausalAttention => {
            let heads = rng.random_range(1..3);
            let h = heads * rng.random_range(1..4);
            let shape = [rng.random_range(1..3), rng.random_range(1..5), h];
            let inputs = vec![randn(&shape, rng), randn(&shape, rng), randn(&shape, rng)];
            let attrs = OpAttrs { heads, ..Default::default() };
            Case { inputs, slots: vec![0, 1, 2], attrs, out_shape: shape.to_vec() }
        }
        OpKind::CrossEntropy => {
            let (rows, vocab) = (rng.random_range(1..5), rng.random_range(2..7));
            let logits = randn(&[rows, vocab], rng);
            let targets = (0..rows).map(|_| rng.random_range(0..vocab)).collect();
            Case { inputs: vec![logits], slots: vec![0], attrs: OpAttrs { targets, ..Default::default() }, out_shape: vec![] }
        }
    }
}

/// Worst finite-difference error of `kind` over `trials` random instances,
/// checking every differentiable input. Outputs are projected onto a random
/// direction so the checked function is a scalar.
pub fn op_gradient_suite(kind: OpKind, trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ kind as u64);
    let mut worst = 0.0_f64;
    for _ in 0..trials {
        let case = random_case(kind, &mut rng);
        for &slot in &case.slots {
            let dir = Tensor::randn(&case.out_shape, 1.0, &mut rng);
            let err = finite_difference_check(
                |tape, x| {
                    let vars: Vec<Var> = case
                        .inputs
                        .iter()
                        .enumerate()
                        .map(|(i, t)| if i == slot { x } else { tape.constant(t.clone()) })
                        .collect();
                    let y = tape.apply(kind, &vars, &case.attrs)?;
                    if tape.value(y).numel() == 1 {
                        Ok(y)
                    } else {
                        tape.dot_const(y, &dir)
                    }
                },
                &case.inputs[slot],
                SUITE_EPS,
            )?;
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
