//! Define-by-run tape with reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so the node list is topologically sorted by construction
//! and [`Graph::backward`] simply walks it in reverse.

use indexmap::IndexMap;

use super::{NumericsError, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    Gelu(Var),
    Sigmoid(Var),
    Silu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Transpose(Var),
    Mean(Var),
    Sum(Var),
    SumSquares(Var),
    Rope { x: Var, cos: Vec<T>, sin: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of the trainable leaves, keyed by parameter name in
/// registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    grads: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.grads.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.grads.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Global ℓ2 norm over every gradient entry.
    pub fn global_norm(&self) -> T {
        self.grads
            .values()
            .map(|g| g.sum_squares())
            .sum::<T>()
            .sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }

    /// Adds `other` entrywise. Both sets must come from the same parameter list.
    pub fn accumulate(&mut self, other: &Self) -> Result<(), NumericsError> {
        if self.grads.len() != other.grads.len() {
            return Err(NumericsError::ParamMismatch);
        }
        for ((na, a), (nb, b)) in self.grads.iter_mut().zip(&other.grads) {
            if na != nb || a.shape() != b.shape() {
                return Err(NumericsError::ParamMismatch);
            }
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = *x + y;
            }
        }
        Ok(())
    }
}

/// Recorded computation. See the module docs.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: IndexMap::new(),
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf. Registering the same name twice returns the first handle.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        self.nodes.push(Node {
            value: value.clone(),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        v
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mismatch(&self, op: &'static str, vars: &[Var]) -> NumericsError {
        NumericsError::ShapeMismatch {
            op,
            shapes: vars.iter().map(|v| self.value(*v).shape().to_vec()).collect(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (va.rows(), va.cols(), vb.rows(), vb.cols());
        if k != k2 {
            return Err(self.mismatch("matmul", &[a, b]));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, va.data(), false, vb.data(), false, T::zero(), &mut out);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b])
    }

    fn elementwise(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var, NumericsError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch(name, &[a, b]));
        }
        let out = self.value(a).zip_map(self.value(b), f)?;
        self.push(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn check_row(&self, name: &'static str, a: Var, row: Var) -> Result<(), NumericsError> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(self.mismatch(name, &[a, row]));
        }
        Ok(())
    }

    /// `a + row` with `row` (`1×c`) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        self.check_row("add_row", a, row)?;
        let (va, vr) = (self.value(a), self.value(row));
        let c = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vr.data()[i % c])
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add_row", out, Op::AddRow(a, row), &[a, row])
    }

    /// `a ⊙ row` with `row` (`1×c`) broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        self.check_row("mul_row", a, row)?;
        let (va, vr) = (self.value(a), self.value(row));
        let c = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * vr.data()[i % c])
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push("mul_row", out, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, NumericsError> {
        let out = self.value(a).scale(s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    /// `a + c` for a constant scalar `c`.
    pub fn offset(&mut self, a: Var, c: T) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|x| x + c);
        self.push("offset", out, Op::Offset(a), &[a])
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        let va = self.value(a);
        let c = va.cols();
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(c) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let out = Tensor::new(va.shape().to_vec(), out)?;
        self.push("softmax", out, Op::Softmax(a), &[a])
    }

    /// Normalizes each row to zero mean and unit variance (ε = 1e-6), no affine.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var, NumericsError> {
        let va = self.value(a);
        let c = va.cols();
        let n = T::lit(c as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut out = va.data().to_vec();
        let mut inv_std = Vec::with_capacity(va.rows());
        for row in out.chunks_mut(c) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let out = Tensor::new(va.shape().to_vec(), out)?;
        self.push("layer_norm", out, Op::LayerNorm { x: a, inv_std }, &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (c, k) = (T::lit(GELU_C), T::lit(GELU_A));
        let half = T::lit(0.5);
        let out = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        self.push("gelu", out, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push("silu", out, Op::Silu(a), &[a])
    }

    /// Stacks inputs along the token (row) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::Empty { op: "concat_rows" });
        }
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_rows(&refs).map_err(|_| self.mismatch("concat_rows", parts))?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Joins inputs along the channel (column) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::Empty { op: "concat_cols" });
        }
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&v| self.value(v).rows() != rows) {
            return Err(self.mismatch("concat_cols", parts));
        }
        let total: usize = parts.iter().map(|&v| self.value(v).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let out = self.value(a).slice_rows(start, len)?;
        self.push("slice_rows", out, Op::SliceRows { x: a, start }, &[a])
    }

    /// Columns `[start, start + len)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        if len == 0 || start + len > c {
            return Err(NumericsError::OutOfRange {
                op: "slice_cols",
                shape: va.shape().to_vec(),
                start,
                len,
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&va.row(i)[start..start + len]);
        }
        let out = Tensor::matrix(r, len, data)?;
        self.push("slice_cols", out, Op::SliceCols { x: a, start }, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).transpose();
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = Tensor::scalar(self.value(a).mean());
        self.push("mean", out, Op::Mean(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = Tensor::scalar(self.value(a).sum_squares());
        self.push("sum_squares", out, Op::SumSquares(a), &[a])
    }

    /// Rotates adjacent channel pairs `(2j, 2j+1)` of each row by fixed
    /// angles. `cos`/`sin` hold one entry per (row, pair).
    pub fn rope(&mut self, a: Var, cos: Vec<T>, sin: Vec<T>) -> Result<Var, NumericsError> {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        if c % 2 != 0 || cos.len() != r * c / 2 || sin.len() != cos.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "rope",
                shapes: vec![va.shape().to_vec(), vec![cos.len()], vec![sin.len()]],
            });
        }
        let mut out = va.data().to_vec();
        for (p, pair) in out.chunks_mut(2).enumerate() {
            let (x0, x1) = (pair[0], pair[1]);
            pair[0] = x0 * cos[p] - x1 * sin[p];
            pair[1] = x0 * sin[p] + x1 * cos[p];
        }
        let out = Tensor::new(va.shape().to_vec(), out)?;
        self.push("rope", out, Op::Rope { x: a, cos, sin }, &[a])
    }

    /// Reverse pass from a scalar node. Every registered parameter receives a
    /// gradient (zeros when it does not influence `loss`).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericsError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut out = IndexMap::with_capacity(self.params.len());
        for (name, &v) in &self.params {
            let g = grads
                .get_mut(v.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
            out.insert(name.clone(), g);
        }
        Ok(Gradients { grads: out })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.wants(*a) {
                    let slot = slot(grads, *a, va);
                    T::gemm(m, n, k, g.data(), false, vb.data(), true, T::one(), slot.data_mut());
                }
                if self.wants(*b) {
                    let slot = slot(grads, *b, vb);
                    T::gemm(k, m, n, va.data(), true, g.data(), false, T::one(), slot.data_mut());
                }
            }
            Op::Add(a, b) => {
                self.acc_map(grads, *a, g, |gi, _| gi);
                self.acc_map(grads, *b, g, |gi, _| gi);
            }
            Op::Sub(a, b) => {
                self.acc_map(grads, *a, g, |gi, _| gi);
                self.acc_map(grads, *b, g, |gi, _| -gi);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc_map(grads, *a, g, |gi, i| gi * vb[i]);
                self.acc_map(grads, *b, g, |gi, i| gi * va[i]);
            }
            Op::AddRow(a, row) => {
                self.acc_map(grads, *a, g, |gi, _| gi);
                if self.wants(*row) {
                    let c = g.cols();
                    let slot = slot(grads, *row, self.value(*row));
                    let s = slot.data_mut();
                    for (i, &gi) in g.data().iter().enumerate() {
                        s[i % c] = s[i % c] + gi;
                    }
                }
            }
            Op::MulRow(a, row) => {
                let (va, vr) = (self.value(*a), self.value(*row));
                let c = g.cols();
                let rd = vr.data();
                self.acc_map(grads, *a, g, |gi, i| gi * rd[i % c]);
                if self.wants(*row) {
                    let ad = va.data();
                    let slot = slot(grads, *row, vr);
                    let s = slot.data_mut();
                    for (i, &gi) in g.data().iter().enumerate() {
                        s[i % c] = s[i % c] + gi * ad[i];
                    }
                }
            }
            Op::Scale(a, s) => self.acc_map(grads, *a, g, |gi, _| gi * *s),
            Op::Offset(a) => self.acc_map(grads, *a, g, |gi, _| gi),
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let c = y.cols();
                    let mut dx = vec![T::zero(); y.len()];
                    for ((dr, yr), gr) in dx.chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.acc_map(grads, *a, g, |_, i| dx[i]);
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if self.wants(*x) {
                    let c = y.cols();
                    let n = T::lit(c as f64);
                    let mut dx = vec![T::zero(); y.len()];
                    for (r, ((dr, yr), gr)) in dx
                        .chunks_mut(c)
                        .zip(y.data().chunks(c))
                        .zip(g.data().chunks(c))
                        .enumerate()
                    {
                        let mg = gr.iter().copied().sum::<T>() / n;
                        let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for j in 0..c {
                            dr[j] = inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                    self.acc_map(grads, *x, g, |_, i| dx[i]);
                }
            }
            Op::Gelu(a) => {
                let (c, k) = (T::lit(GELU_C), T::lit(GELU_A));
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let xs = self.value(*a).data();
                self.acc_map(grads, *a, g, |gi, i| {
                    let x = xs[i];
                    let t = (c * (x + k * x * x * x)).tanh();
                    let d = half * (T::one() + t)
                        + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x);
                    gi * d
                });
            }
            Op::Sigmoid(a) => {
                let yd = y.data();
                self.acc_map(grads, *a, g, |gi, i| gi * yd[i] * (T::one() - yd[i]));
            }
            Op::Silu(a) => {
                let xs = self.value(*a).data();
                self.acc_map(grads, *a, g, |gi, i| {
                    let s = sigmoid(xs[i]);
                    gi * s * (T::one() + xs[i] * (T::one() - s))
                });
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let part = &g.data()[offset..offset + n];
                    self.acc_map(grads, p, self.value(p), |_, i| part[i]);
                    offset += n;
                    debug_assert_eq!(n % c, 0);
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut col = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    let gd = g.data();
                    self.acc_map(grads, p, self.value(p), |_, i| gd[(i / pc) * total + col + i % pc]);
                    col += pc;
                }
            }
            Op::SliceRows { x, start } => {
                if self.wants(*x) {
                    let c = g.cols();
                    let slot = slot(grads, *x, self.value(*x));
                    let dst = &mut slot.data_mut()[start * c..start * c + g.len()];
                    for (d, &gi) in dst.iter_mut().zip(g.data()) {
                        *d = *d + gi;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if self.wants(*x) {
                    let len = g.cols();
                    let vx = self.value(*x);
                    let c = vx.cols();
                    let slot = slot(grads, *x, vx);
                    let s = slot.data_mut();
                    for (r, gr) in g.data().chunks(len).enumerate() {
                        for (j, &gi) in gr.iter().enumerate() {
                            let idx = r * c + start + j;
                            s[idx] = s[idx] + gi;
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let gt = g.transpose();
                self.acc_map(grads, *a, &gt, |gi, _| gi);
            }
            Op::Mean(a) => {
                let n = T::lit(self.value(*a).len() as f64);
                let s = g.data()[0] / n;
                self.acc_map(grads, *a, self.value(*a), |_, _| s);
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                self.acc_map(grads, *a, self.value(*a), |_, _| s);
            }
            Op::SumSquares(a) => {
                let s = g.data()[0];
                let two = T::lit(2.0);
                let xs = self.value(*a).data();
                self.acc_map(grads, *a, self.value(*a), |_, i| two * xs[i] * s);
            }
            Op::Rope { x, cos, sin } => {
                if self.wants(*x) {
                    let gd = g.data();
                    let slot = slot(grads, *x, self.value(*x));
                    let s = slot.data_mut();
                    for p in 0..cos.len() {
                        let (g0, g1) = (gd[2 * p], gd[2 * p + 1]);
                        s[2 * p] = s[2 * p] + g0 * cos[p] + g1 * sin[p];
                        s[2 * p + 1] = s[2 * p + 1] - g0 * sin[p] + g1 * cos[p];
                    }
                }
            }
        }
    }

    /// `grad[v][i] += f(template[i], i)` over the entries of `template`.
    fn acc_map(&self, grads: &mut [Option<Tensor<T>>], v: Var, template: &Tensor<T>, f: impl Fn(T, usize) -> T) {
        if !self.wants(v) {
            return;
        }
        let slot = slot(grads, v, self.value(v));
        for (i, (d, &t)) in slot.data_mut().iter_mut().zip(template.data()).enumerate() {
            *d = *d + f(t, i);
        }
    }
}

fn slot<'a, T: Scalar>(grads: &'a mut [Option<Tensor<T>>], v: Var, like: &Tensor<T>) -> &'a mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.shape()))
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
