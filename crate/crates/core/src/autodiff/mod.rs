//! Define-by-run reverse-mode differentiation over dense row-major tensors.
//!
//! Every operation on a [`Graph`] evaluates eagerly and appends a node to
//! the tape, so the tape is topologically ordered by construction.
//! [`Graph::backward`] walks it in reverse. The primitive set is exactly
//! what the denoiser needs: matmul, add (optionally row-broadcast),
//! elementwise multiply, scalar scale, row softmax, row layer-norm, GELU,
//! dropout, column concat/slice, mean over an axis, transpose and sum, plus
//! [`Graph::external_loss`] for scalar losses whose gradient is supplied
//! analytically.

mod gradcheck;
mod tensor;

use rand::Rng;

pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport};
pub use tensor::{Scalar, Tensor};

use tensor::{matmul_raw, transpose_raw};

use crate::error::{Error, Result};
use crate::seed::{self, SeededRng};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    SoftmaxRows(Var),
    LayerNorm { input: Var, inv_std: Vec<T> },
    Gelu(Var),
    Dropout { input: Var, mask: Vec<T> },
    ConcatCols(Vec<Var>),
    SliceCols { input: Var, start: usize },
    Mean(Var, Axis),
    Transpose(Var),
    Sum(Var),
    External { input: Var, grad: Tensor<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Dropout { .. } => "dropout",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Mean(..) => "mean",
            Op::Transpose(..) => "transpose",
            Op::Sum(..) => "sum",
            Op::External { .. } => "external",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Tape of evaluated nodes.
///
/// Single-threaded by design; distinct graphs can run concurrently.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    train: bool,
    rng: SeededRng,
}

impl<T: Scalar> Graph<T> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            train: false,
            rng: seed::rng(0),
        }
    }

    /// Training-mode graph whose dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            train: true,
            rng: seed::rng(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &str, a: Var, b: Var) -> Error {
        Error::shape(format!(
            "{op} (node {}): operand shapes {:?} and {:?}",
            self.nodes.len(),
            self.shape(a),
            self.shape(b)
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out)?, &[a, b]))
    }

    fn zip_same(&self, op: &str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op, a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    fn zip_row(&self, op: &str, a: Var, row: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (_, n) = self.dims(a);
        let (rr, rn) = self.dims(row);
        if rr != 1 || rn != n {
            return Err(self.mismatch(op, a, row));
        }
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks_exact(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), out, &[a, b]))
    }

    /// `a + row`, broadcasting a `[1, n]` (or `[n]`) row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.zip_row("add_row", a, row, |x, y| x + y)?;
        Ok(self.push(Op::AddRow(a, row), out, &[a, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), out, &[a, b]))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.zip_row("mul_row", a, row, |x, y| x * y)?;
        Ok(self.push(Op::MulRow(a, row), out, &[a, row]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let c = T::from_f64_lossy(factor);
        let out = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), out, &[a])
    }

    /// Softmax along each row, computed with row-max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (_, n) = self.dims(a);
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        self.push(Op::SoftmaxRows(a), out, &[a])
    }

    /// Per-row standardization without affine terms; variance floored by
    /// [`LAYER_NORM_EPS`].
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let (_, n) = self.dims(a);
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let nf = T::from_usize(n).unwrap();
        let mut out = self.value(a).clone();
        let mut inv_std = Vec::new();
        for row in out.data_mut().chunks_exact_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            inv_std.push(r);
        }
        self.push(Op::LayerNorm { input: a, inv_std }, out, &[a])
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(Op::Gelu(a), out, &[a])
    }

    /// Inverted dropout: identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout rate {p} outside [0, 1)")));
        }
        if !self.train || p == 0.0 {
            return Ok(a);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let n = self.value(a).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mut out = self.value(a).clone();
        for (v, &m) in out.data_mut().iter_mut().zip(&mask) {
            *v = *v * m;
        }
        Ok(self.push(Op::Dropout { input: a, mask }, out, &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (m, _) = self.dims(first);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pm != m {
                return Err(self.mismatch("concat_cols", first, p));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::matrix(m, total, data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, parts))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start >= end || end > n {
            return Err(Error::shape(format!(
                "slice_cols {start}..{end} of a {m}x{n} tensor"
            )));
        }
        let src = self.value(a).data();
        let data: Vec<T> = (0..m)
            .flat_map(|r| src[r * n + start..r * n + end].iter().copied())
            .collect();
        let out = Tensor::matrix(m, end - start, data)?;
        Ok(self.push(Op::SliceCols { input: a, start }, out, &[a]))
    }

    /// Mean over rows (`[1, n]` result) or over columns (`[m, 1]`).
    pub fn mean(&mut self, a: Var, axis: Axis) -> Var {
        let (m, n) = self.dims(a);
        let src = self.value(a).data();
        let out = match axis {
            Axis::Rows => {
                let mf = T::from_usize(m).unwrap();
                let data = (0..n)
                    .map(|c| (0..m).map(|r| src[r * n + c]).sum::<T>() / mf)
                    .collect();
                Tensor::matrix(1, n, data)
            }
            Axis::Cols => {
                let nf = T::from_usize(n).unwrap();
                let data = src
                    .chunks_exact(n)
                    .map(|row| row.iter().copied().sum::<T>() / nf)
                    .collect();
                Tensor::matrix(m, 1, data)
            }
        }
        .expect("consistent shape");
        self.push(Op::Mean(a, axis), out, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let data = transpose_raw(self.value(a).data(), m, n);
        let out = Tensor::matrix(n, m, data).expect("consistent shape");
        self.push(Op::Transpose(a), out, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Op::Sum(a), Tensor::scalar(s), &[a])
    }

    /// Scalar node with value `loss` whose gradient with respect to `input`
    /// is the supplied tensor.
    pub fn external_loss(&mut self, input: Var, loss: T, grad: Tensor<T>) -> Result<Var> {
        if grad.shape() != self.shape(input) {
            return Err(Error::shape(format!(
                "external loss gradient {:?} does not match input {:?}",
                grad.shape(),
                self.shape(input)
            )));
        }
        Ok(self.push(Op::External { input, grad }, Tensor::scalar(loss), &[input]))
    }

    /// Reverse pass from a scalar node. Dropout masks recorded during the
    /// forward pass are reused.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            for (input, contribution) in self.local_grads(idx, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            // Interior gradients are only needed transiently.
            grads[idx] = None;
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let gd = g.data();
        let like = |v: Var, data: Vec<T>| Tensor::new(self.shape(v).to_vec(), data);
        let grads = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let (_, n) = self.dims(*b);
                let bt = transpose_raw(self.value(*b).data(), k, n);
                let at = transpose_raw(self.value(*a).data(), m, k);
                vec![
                    (*a, like(*a, matmul_raw(gd, &bt, m, n, k))?),
                    (*b, like(*b, matmul_raw(&at, gd, k, m, n))?),
                ]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(a, row) => {
                let (_, n) = self.dims(*a);
                let mut rg = vec![T::zero(); n];
                for chunk in gd.chunks_exact(n) {
                    for (acc, &v) in rg.iter_mut().zip(chunk) {
                        *acc = *acc + v;
                    }
                }
                vec![(*a, g.clone()), (*row, like(*row, rg)?)]
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                vec![
                    (*a, like(*a, gd.iter().zip(bv).map(|(&g, &y)| g * y).collect())?),
                    (*b, like(*b, gd.iter().zip(av).map(|(&g, &x)| g * x).collect())?),
                ]
            }
            Op::MulRow(a, row) => {
                let (_, n) = self.dims(*a);
                let av = self.value(*a).data();
                let rv = self.value(*row).data();
                let mut ga = Vec::with_capacity(gd.len());
                let mut gr = vec![T::zero(); n];
                for (gc, ac) in gd.chunks_exact(n).zip(av.chunks_exact(n)) {
                    for c in 0..n {
                        ga.push(gc[c] * rv[c]);
                        gr[c] = gr[c] + gc[c] * ac[c];
                    }
                }
                vec![(*a, like(*a, ga)?), (*row, like(*row, gr)?)]
            }
            Op::Scale(a, c) => vec![(*a, g.map(|v| v * *c))],
            Op::SoftmaxRows(a) => {
                let (_, n) = self.dims(*a);
                let mut ga = Vec::with_capacity(gd.len());
                for (gc, yc) in gd.chunks_exact(n).zip(out.data().chunks_exact(n)) {
                    let dot: T = gc.iter().zip(yc).map(|(&g, &y)| g * y).sum();
                    ga.extend(gc.iter().zip(yc).map(|(&g, &y)| y * (g - dot)));
                }
                vec![(*a, like(*a, ga)?)]
            }
            Op::LayerNorm { input, inv_std } => {
                let (_, n) = self.dims(*input);
                let nf = T::from_usize(n).unwrap();
                let mut ga = Vec::with_capacity(gd.len());
                for ((gc, yc), &r) in gd
                    .chunks_exact(n)
                    .zip(out.data().chunks_exact(n))
                    .zip(inv_std)
                {
                    let mean_g = gc.iter().copied().sum::<T>() / nf;
                    let mean_gy = gc.iter().zip(yc).map(|(&g, &y)| g * y).sum::<T>() / nf;
                    ga.extend(
                        gc.iter()
                            .zip(yc)
                            .map(|(&g, &y)| r * (g - mean_g - y * mean_gy)),
                    );
                }
                vec![(*input, like(*input, ga)?)]
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let ga = gd.iter().zip(x).map(|(&g, &x)| g * gelu_grad(x)).collect();
                vec![(*a, like(*a, ga)?)]
            }
            Op::Dropout { input, mask } => {
                let ga = gd.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                vec![(*input, like(*input, ga)?)]
            }
            Op::ConcatCols(parts) => {
                let (m, total) = out.dims2();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let (_, w) = self.dims(p);
                    let data = (0..m)
                        .flat_map(|r| gd[r * total + offset..r * total + offset + w].iter().copied())
                        .collect();
                    res.push((p, like(p, data)?));
                    offset += w;
                }
                res
            }
            Op::SliceCols { input, start } => {
                let (m, n) = self.dims(*input);
                let (_, w) = out.dims2();
                let mut ga = vec![T::zero(); m * n];
                for r in 0..m {
                    ga[r * n + start..r * n + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                vec![(*input, like(*input, ga)?)]
            }
            Op::Mean(a, axis) => {
                let (m, n) = self.dims(*a);
                let ga = match axis {
                    Axis::Rows => {
                        let mf = T::from_usize(m).unwrap();
                        (0..m * n).map(|i| gd[i % n] / mf).collect()
                    }
                    Axis::Cols => {
                        let nf = T::from_usize(n).unwrap();
                        (0..m * n).map(|i| gd[i / n] / nf).collect()
                    }
                };
                vec![(*a, like(*a, ga)?)]
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims(*a);
                // g has shape [n, m].
                vec![(*a, like(*a, transpose_raw(gd, n, m))?)]
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                vec![(*a, like(*a, vec![gd[0]; n])?)]
            }
            Op::External { input, grad } => vec![(*input, grad.map(|v| v * gd[0]))],
        };
        Ok(grads)
    }

    /// Name of the primitive that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn std_normal_cdf<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    half * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu<T: Scalar>(x: T) -> T {
    x * std_normal_cdf(x)
}

/// `Φ(x) + x·φ(x)`.
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let inv_sqrt_2pi = T::from_f64_lossy(0.398_942_280_401_432_7);
    let pdf = inv_sqrt_2pi * (-(x * x) * T::from_f64_lossy(0.5)).exp();
    std_normal_cdf(x) + x * pdf
}
