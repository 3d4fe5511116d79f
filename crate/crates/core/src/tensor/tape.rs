//! Reverse-mode automatic differentiation on an explicit tape.
//!
//! Every operation appends a node holding its forward value. When recording is
//! on, the node also keeps the operands needed for the backward sweep, which
//! walks the nodes in exact reverse order of recording.

use std::collections::BTreeMap;

use super::matrix::{check_finite, Matrix};
use crate::error::TensorError;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifier of a trainable parameter slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    /// `x * s` where `s` is 1×1.
    ScaleBy(Var, Var),
    OneMinus(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Mean(Vec<Var>),
    Sum(Vec<Var>),
    Row(Var, usize),
    /// Column-wise weighted pooling: `out[j] = Σ_r w[r][j] · x_r[j]`.
    Pool(Vec<Var>, Vec<Vec<f64>>),
    /// Softmax cross-entropy restricted to the unmasked columns.
    MaskedCe {
        logits: Var,
        grad: Vec<f64>,
    },
    BceLogits {
        z: Var,
        target: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients accumulated per parameter slot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub by_param: BTreeMap<ParamId, Matrix>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.by_param.get(&id)
    }
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape, for training.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A tape that only evaluates; `backward` is unavailable.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.as_slice()[0]
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let op = if self.record { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId, value: &Matrix) -> Var {
        self.push(value.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Hadamard(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let v = self.value(a).scale(s)?;
        Ok(self.push(v, Op::Scale(a, s)))
    }

    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        let sv = self.value(s);
        if sv.shape() != (1, 1) {
            return Err(TensorError::Shape {
                op: "scale_by",
                lhs: self.value(a).shape(),
                rhs: sv.shape(),
            });
        }
        let k = sv.as_slice()[0];
        let v = self.value(a).scale(k)?;
        Ok(self.push(v, Op::ScaleBy(a, s)))
    }

    pub fn one_minus(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a).map("one_minus", |x| 1.0 - x)?;
        Ok(self.push(v, Op::OneMinus(a)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a).map("relu", |x| x.max(0.0))?;
        Ok(self.push(v, Op::Relu(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a).map("tanh", f64::tanh)?;
        Ok(self.push(v, Op::Tanh(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a).map("sigmoid", sigmoid)?;
        Ok(self.push(v, Op::Sigmoid(a)))
    }

    /// Concatenates row vectors left to right.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Empty("concat"));
        }
        let mut data = Vec::new();
        for &p in parts {
            let m = self.value(p);
            if m.rows() != 1 {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: (1, data.len()),
                    rhs: m.shape(),
                });
            }
            data.extend_from_slice(m.as_slice());
        }
        let v = Matrix::new(1, data.len(), data)?;
        Ok(self.push(v, Op::Concat(parts.to_vec())))
    }

    pub fn mean(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let v = self
            .sum_values("mean", parts)?
            .scale(1.0 / parts.len() as f64)?;
        Ok(self.push(v, Op::Mean(parts.to_vec())))
    }

    pub fn sum(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let v = self.sum_values("sum", parts)?;
        Ok(self.push(v, Op::Sum(parts.to_vec())))
    }

    fn sum_values(&self, op: &'static str, parts: &[Var]) -> Result<Matrix, TensorError> {
        let first = parts.first().ok_or(TensorError::Empty(op))?;
        let mut acc = self.value(*first).clone();
        for &p in &parts[1..] {
            let m = self.value(p);
            if m.shape() != acc.shape() {
                return Err(TensorError::Shape {
                    op,
                    lhs: acc.shape(),
                    rhs: m.shape(),
                });
            }
            acc.add_assign(m);
        }
        check_finite(op, acc.as_slice())?;
        Ok(acc)
    }

    /// Selects row `index` of a table as a 1×cols vector.
    pub fn row(&mut self, table: Var, index: usize) -> Result<Var, TensorError> {
        let t = self.value(table);
        if index >= t.rows() {
            return Err(TensorError::Index {
                op: "row",
                index,
                len: t.rows(),
            });
        }
        let v = Matrix::row_vector(t.row(index))?;
        Ok(self.push(v, Op::Row(table, index)))
    }

    /// Column-wise weighted combination of same-shaped row vectors. The
    /// weights are treated as constants for differentiation.
    pub fn pool(&mut self, parts: &[Var], weights: Vec<Vec<f64>>) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::Empty("pool"))?;
        let cols = self.value(*first).cols();
        if weights.len() != parts.len() || weights.iter().any(|w| w.len() != cols) {
            return Err(TensorError::Invalid("pool weights shape".into()));
        }
        let mut out = vec![0.0; cols];
        for (p, w) in parts.iter().zip(&weights) {
            let m = self.value(*p);
            if m.shape() != (1, cols) {
                return Err(TensorError::Shape {
                    op: "pool",
                    lhs: (1, cols),
                    rhs: m.shape(),
                });
            }
            for ((o, &x), &wj) in out.iter_mut().zip(m.as_slice()).zip(w) {
                if wj != 0.0 {
                    *o += wj * x;
                }
            }
        }
        let v = Matrix::new(1, cols, out)?;
        Ok(self.push(v, Op::Pool(parts.to_vec(), weights)))
    }

    /// Softmax cross-entropy of a 1×C logit row over the columns where
    /// `mask` is true. The target column must be unmasked.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        target: usize,
        mask: &[bool],
    ) -> Result<Var, TensorError> {
        let z = self.value(logits).as_slice();
        if z.is_empty() {
            return Err(TensorError::Empty("cross_entropy"));
        }
        if mask.len() != z.len() {
            return Err(TensorError::Invalid("mask length".into()));
        }
        if target >= z.len() || !mask[target] {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: target,
                len: z.len(),
            });
        }
        let (loss, grad) = masked_softmax_ce(z, target, mask);
        let v = Matrix::new(1, 1, vec![loss])?;
        Ok(self.push(v, Op::MaskedCe { logits, grad }))
    }

    /// Binary cross-entropy on a pre-sigmoid 1×1 logit.
    pub fn bce_with_logits(&mut self, z: Var, target: f64) -> Result<Var, TensorError> {
        let x = self.scalar(z);
        // log(1 + e^x) - t·x, stable for large |x|
        let loss = x.max(0.0) - x * target + (-x.abs()).exp().ln_1p();
        let v = Matrix::new(1, 1, vec![loss])?;
        Ok(self.push(v, Op::BceLogits { z, target }))
    }

    /// Runs the backward sweep from a 1×1 loss node and returns gradients for
    /// every parameter leaf reached.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        if !self.record {
            return Err(TensorError::Invalid(
                "backward on a non-recording tape".into(),
            ));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(TensorError::Shape {
                op: "backward",
                lhs: self.value(loss).shape(),
                rhs: (1, 1),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => match out.by_param.get_mut(id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.by_param.insert(*id, g);
                    }
                },
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&self.value(*b).transpose())?;
                    let gb = self.value(*a).transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0)?);
                    accumulate(&mut grads, *a, g);
                }
                Op::Hadamard(a, b) => {
                    let ga = g.hadamard(self.value(*b))?;
                    let gb = g.hadamard(self.value(*a))?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)?),
                Op::ScaleBy(a, s) => {
                    let k = self.scalar(*s);
                    let gs: f64 = g
                        .as_slice()
                        .iter()
                        .zip(self.value(*a).as_slice())
                        .map(|(x, y)| x * y)
                        .sum();
                    accumulate(&mut grads, *a, g.scale(k)?);
                    accumulate(&mut grads, *s, Matrix::new(1, 1, vec![gs])?);
                }
                Op::OneMinus(a) => accumulate(&mut grads, *a, g.scale(-1.0)?),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let d = zip_map(&g, x, |gi, xi| if xi > 0.0 { gi } else { 0.0 })?;
                    accumulate(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let d = zip_map(&g, &node.value, |gi, yi| gi * (1.0 - yi * yi))?;
                    accumulate(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = zip_map(&g, &node.value, |gi, yi| gi * yi * (1.0 - yi))?;
                    accumulate(&mut grads, *a, d);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).cols();
                        let slice = g.as_slice()[offset..offset + n].to_vec();
                        accumulate(&mut grads, p, Matrix::new(1, n, slice)?);
                        offset += n;
                    }
                }
                Op::Mean(parts) => {
                    let share = g.scale(1.0 / parts.len() as f64)?;
                    for &p in parts {
                        accumulate(&mut grads, p, share.clone());
                    }
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        accumulate(&mut grads, p, g.clone());
                    }
                }
                Op::Row(table, index) => {
                    let t = self.value(*table);
                    let mut d = Matrix::zeros(t.rows(), t.cols());
                    let cols = t.cols();
                    d.data_mut()[index * cols..(index + 1) * cols].copy_from_slice(g.as_slice());
                    accumulate(&mut grads, *table, d);
                }
                Op::Pool(parts, weights) => {
                    for (&p, w) in parts.iter().zip(weights) {
                        if w.iter().all(|&x| x == 0.0) {
                            continue;
                        }
                        let d: Vec<f64> =
                            g.as_slice().iter().zip(w).map(|(gi, wi)| gi * wi).collect();
                        accumulate(&mut grads, p, Matrix::new(1, d.len(), d)?);
                    }
                }
                Op::MaskedCe { logits, grad } => {
                    let k = g.as_slice()[0];
                    let d: Vec<f64> = grad.iter().map(|x| x * k).collect();
                    accumulate(&mut grads, *logits, Matrix::new(1, d.len(), d)?);
                }
                Op::BceLogits { z, target } => {
                    let x = self.scalar(*z);
                    let d = (sigmoid(x) - target) * g.as_slice()[0];
                    accumulate(&mut grads, *z, Matrix::new(1, 1, vec![d])?);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix, TensorError> {
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Matrix::new(a.rows(), a.cols(), data)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn masked_softmax_ce(z: &[f64], target: usize, mask: &[bool]) -> (f64, Vec<f64>) {
    let max = z
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z
        .iter()
        .zip(mask)
        .map(|(&x, &m)| if m { (x - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() - (z[target] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[target] -= 1.0;
    (loss, grad)
}

/// Numerically stabilized softmax cross-entropy. Returns the loss and its
/// gradient with respect to the logits, `softmax(logits) - onehot(target)`.
pub fn softmax_cross_entropy(
    logits: &[f64],
    target: usize,
) -> Result<(f64, Vec<f64>), TensorError> {
    if logits.is_empty() {
        return Err(TensorError::Empty("softmax_cross_entropy"));
    }
    if target >= logits.len() {
        return Err(TensorError::Index {
            op: "softmax_cross_entropy",
            index: target,
            len: logits.len(),
        });
    }
    check_finite("softmax_cross_entropy", logits)?;
    let mask = vec![true; logits.len()];
    Ok(masked_softmax_ce(logits, target, &mask))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_two_class_loss() {
        let (loss, grad) = softmax_cross_entropy(&[0.0, 0.0], 0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(grad, vec![-0.5, 0.5]);
    }

    #[test]
    fn large_logits_stay_finite() {
        let (loss, grad) = softmax_cross_entropy(&[1000.0, 0.0], 0).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-12);
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn ce_errors() {
        assert!(matches!(
            softmax_cross_entropy(&[], 0),
            Err(TensorError::Empty(_))
        ));
        assert!(softmax_cross_entropy(&[1.0], 1).is_err());
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let z: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let (_, grad) = softmax_cross_entropy(&z, 2).unwrap();
        let h = 1e-5;
        for i in 0..5 {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += h;
            zm[i] -= h;
            let fd = (softmax_cross_entropy(&zp, 2).unwrap().0
                - softmax_cross_entropy(&zm, 2).unwrap().0)
                / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs());
            assert!(rel < 1e-6, "component {i}: {rel}");
        }
    }

    #[test]
    fn softmax_sums_to_one_and_loss_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let n = rng.gen_range(1..10);
            let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let s: f64 = softmax(&z).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            let t = rng.gen_range(0..n);
            assert!(softmax_cross_entropy(&z, t).unwrap().0 >= 0.0);
        }
    }

    #[test]
    fn inference_tape_refuses_backward() {
        let mut tape = Tape::inference();
        let x = tape.constant(Matrix::filled(1, 1, 2.0));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn shared_param_gradients_accumulate() {
        // loss = sum(w ⊙ w) = Σ w² → grad 2w
        let w = Matrix::row_vector(&[1.0, -2.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(ParamId(0), &w);
        let b = tape.param(ParamId(0), &w);
        let sq = tape.hadamard(a, b).unwrap();
        let ones = tape.constant(Matrix::filled(3, 1, 1.0));
        let loss = tape.matmul(sq, ones).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().as_slice(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn bce_is_stable() {
        let mut tape = Tape::new();
        let z = tape.constant(Matrix::filled(1, 1, 800.0));
        let l = tape.bce_with_logits(z, 1.0).unwrap();
        assert!(tape.scalar(l).abs() < 1e-12);
        let l0 = tape.bce_with_logits(z, 0.0).unwrap();
        assert!((tape.scalar(l0) - 800.0).abs() < 1e-9);
    }
}
