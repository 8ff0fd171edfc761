//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a write-once tape: every operation appends a node holding
//! its forward value, and [`Graph::backward`] walks the tape in reverse to
//! accumulate gradients. Nodes built only from constants never receive a
//! gradient, which keeps frozen backends out of the backward pass.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    MulConst(Var, Tensor<T>),
    Tanh(Var),
    LeakyRelu(Var, T),
    Gelu(Var),
    Abs(Var),
    ClampMin(Var, T),
    SoftmaxRows(Var),
    LayerNormRows(Var),
    NormalizeRows(Var),
    Norm(Var),
    Sum(Var),
    Mean(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    // Per-row statistics kept from the forward pass (inverse std, norms).
    aux: Vec<T>,
    needs_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const GELU_C: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + T::lit(GELU_C) * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    let t = (k * (x + T::lit(GELU_C) * x * x * x)).tanh();
    half * (T::one() + t)
        + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0 * GELU_C) * x * x)
}

const LN_EPS: f64 = 1e-5;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, aux: Vec<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            aux,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            aux: Vec::new(),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            aux: Vec::new(),
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b), Vec::new(), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b), Vec::new(), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), Vec::new(), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), Vec::new(), &[a, b])
    }

    /// Adds the `1 × c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        debug_assert_eq!(vb.shape(), (1, va.cols()));
        let mut v = va.clone();
        let cols = va.cols();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x = *x + vb.data()[i % cols];
        }
        self.push(v, Op::AddRow(a, b), Vec::new(), &[a, b])
    }

    /// Multiplies every row of `a` elementwise by the `1 × c` row `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        debug_assert_eq!(vb.shape(), (1, va.cols()));
        let mut v = va.clone();
        let cols = va.cols();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x = *x * vb.data()[i % cols];
        }
        self.push(v, Op::MulRow(a, b), Vec::new(), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), Vec::new(), &[a])
    }

    /// Elementwise product with a fixed tensor (masks, weights).
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Var {
        let v = self.value(a).zip_map(&c, |x, y| x * y);
        self.push(v, Op::MulConst(a, c), Vec::new(), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a), Vec::new(), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x * slope });
        self.push(v, Op::LeakyRelu(a, slope), Vec::new(), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a), Vec::new(), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.abs());
        self.push(v, Op::Abs(a), Vec::new(), &[a])
    }

    /// `max(floor, a)` elementwise; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: T) -> Var {
        let v = self.value(a).map(|x| x.max(floor));
        self.push(v, Op::ClampMin(a, floor), Vec::new(), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let cols = va.cols();
        let mut v = va.clone();
        for row in v.data_mut().chunks_mut(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total = total + *x;
            }
            for x in row.iter_mut() {
                *x = *x / total;
            }
        }
        self.push(v, Op::SoftmaxRows(a), Vec::new(), &[a])
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let cols = va.cols();
        let n = T::lit(cols as f64);
        let mut v = va.clone();
        let mut inv_std = Vec::with_capacity(va.rows());
        for row in v.data_mut().chunks_mut(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let inv = T::one() / (var + T::lit(LN_EPS)).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(v, Op::LayerNormRows(a), inv_std, &[a])
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let cols = va.cols();
        let mut v = va.clone();
        let mut norms = Vec::with_capacity(va.rows());
        for row in v.data_mut().chunks_mut(cols) {
            let norm = row.iter().fold(T::zero(), |s, &x| s + x * x).sqrt();
            let safe = if norm > T::zero() { norm } else { T::one() };
            for x in row.iter_mut() {
                *x = *x / safe;
            }
            norms.push(safe);
        }
        self.push(v, Op::NormalizeRows(a), norms, &[a])
    }

    /// Frobenius norm, as a `1 × 1` node.
    pub fn norm(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).norm());
        self.push(v, Op::Norm(a), Vec::new(), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), Vec::new(), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let v = Tensor::scalar(va.sum() / T::lit(va.len() as f64));
        self.push(v, Op::Mean(a), Vec::new(), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_rows(start, len);
        self.push(v, Op::SliceRows(a, start), Vec::new(), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_cols(start, len);
        self.push(v, Op::SliceCols(a, start), Vec::new(), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&vals).expect("concat_rows: column mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()), Vec::new(), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&vals).expect("concat_cols: row mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()), Vec::new(), parts)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self
            .value(a)
            .clone()
            .reshape(rows, cols)
            .expect("reshape: element count mismatch");
        self.push(v, Op::Reshape(a), Vec::new(), &[a])
    }

    /// Linear combination `Σ cᵢ·xᵢ` of same-shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(T, Var)]) -> Var {
        let mut acc: Option<Var> = None;
        for &(c, v) in terms {
            let scaled = if c == T::one() { v } else { self.scale(v, c) };
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled),
            });
        }
        acc.expect("weighted_sum of no terms")
    }

    /// Back-propagates from the `1 × 1` node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.matmul_t(val(*b)));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, val(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                // c = a bᵀ: da = g b, db = gᵀ a
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.matmul(val(*b)));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.t_matmul(val(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.scale(-T::one()));
                }
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, column_sums(g));
                }
            }
            Op::MulRow(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let cols = va.cols();
                if self.wants(*a) {
                    let mut ga = g.clone();
                    for (i, x) in ga.data_mut().iter_mut().enumerate() {
                        *x = *x * vb.data()[i % cols];
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, column_sums(&g.zip_map(va, |x, y| x * y)));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::MulConst(a, c) => self.accumulate(grads, *a, g.zip_map(c, |x, y| x * y)),
            Op::Tanh(a) => {
                let ga = g.zip_map(&node.value, |gi, y| gi * (T::one() - y * y));
                self.accumulate(grads, *a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let ga = g.zip_map(val(*a), |gi, x| if x > T::zero() { gi } else { gi * *slope });
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let ga = g.zip_map(val(*a), |gi, x| gi * gelu_grad(x));
                self.accumulate(grads, *a, ga);
            }
            Op::Abs(a) => {
                let ga = g.zip_map(val(*a), |gi, x| {
                    if x > T::zero() {
                        gi
                    } else if x < T::zero() {
                        -gi
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::ClampMin(a, floor) => {
                let ga = g.zip_map(val(*a), |gi, x| if x > *floor { gi } else { T::zero() });
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let cols = y.cols();
                let mut ga = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&p, &q)| s + p * q);
                    for c in 0..cols {
                        ga[(r, c)] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNormRows(a) => {
                let y = &node.value;
                let cols = y.cols();
                let n = T::lit(cols as f64);
                let mut ga = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let mean_g = gr.iter().copied().sum::<T>() / n;
                    let mean_gy = yr.iter().zip(gr).fold(T::zero(), |s, (&p, &q)| s + p * q) / n;
                    let inv = node.aux[r];
                    for c in 0..cols {
                        ga[(r, c)] = inv * (gr[c] - mean_g - yr[c] * mean_gy);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::NormalizeRows(a) => {
                let y = &node.value;
                let cols = y.cols();
                let mut ga = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&p, &q)| s + p * q);
                    let norm = node.aux[r];
                    for c in 0..cols {
                        ga[(r, c)] = (gr[c] - yr[c] * dot) / norm;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Norm(a) => {
                let n = node.value.item();
                let gi = g.item();
                let ga = if n > T::zero() {
                    val(*a).scale(gi / n)
                } else {
                    let (r, c) = val(*a).shape();
                    Tensor::zeros(r, c)
                };
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                self.accumulate(grads, *a, Tensor::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                let share = g.item() / T::lit((r * c) as f64);
                self.accumulate(grads, *a, Tensor::filled(r, c, share));
            }
            Op::SliceRows(a, start) => {
                if self.wants(*a) {
                    let (r, c) = val(*a).shape();
                    let mut ga = Tensor::zeros(r, c);
                    ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    self.accumulate(grads, *a, ga);
                }
            }
            Op::SliceCols(a, start) => {
                if self.wants(*a) {
                    let (r, c) = val(*a).shape();
                    let mut ga = Tensor::zeros(r, c);
                    for row in 0..r {
                        for (j, &x) in g.row(row).iter().enumerate() {
                            ga[(row, start + j)] = x;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    if self.wants(p) {
                        self.accumulate(grads, p, g.slice_rows(start, rows));
                    }
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let cols = val(p).cols();
                    if self.wants(p) {
                        self.accumulate(grads, p, g.slice_cols(start, cols));
                    }
                    start += cols;
                }
            }
            Op::Reshape(a) => {
                let (r, c) = val(*a).shape();
                let ga = g.clone().reshape(r, c).expect("reshape grad");
                self.accumulate(grads, *a, ga);
            }
        }
    }
}

fn column_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (c, &x) in g.row(r).iter().enumerate() {
            out.data_mut()[c] = out.data()[c] + x;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `d loss / d input` for a single-input graph.
    fn check(build: impl Fn(&mut Graph<f64>, Var) -> Var, input: Tensor<f64>) {
        let mut g = Graph::new();
        let x = g.param(input.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| {
            let (r, c) = input.shape();
            Tensor::zeros(r, c)
        });
        let h = 1e-5;
        for i in 0..input.len() {
            let eval = |delta: f64| {
                let mut t = input.clone();
                t.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.param(t);
                let l = build(&mut g, x);
                g.value(l).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / numeric.abs().max(a.abs()).max(1e-6);
            assert!(err < 1e-5, "element {i}: analytic {a} numeric {numeric}");
        }
    }

    fn rand_input(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(rows, cols, 1.0, &mut rng)
    }

    // Fixed random projection so every op's gradient reaches a scalar non-trivially.
    fn probe(g: &mut Graph<f64>, v: Var) -> Var {
        let (r, c) = g.shape(v);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let w = Tensor::randn(r, c, 1.0, &mut rng);
        let p = g.mul_const(v, w);
        g.sum(p)
    }

    #[test]
    fn elementwise_ops() {
        let x = rand_input(3, 4, 1);
        check(|g, x| { let y = g.tanh(x); probe(g, y) }, x.clone());
        check(|g, x| { let y = g.gelu(x); probe(g, y) }, x.clone());
        check(|g, x| { let y = g.leaky_relu(x, 0.2); probe(g, y) }, x.clone());
        check(|g, x| { let y = g.abs(x); probe(g, y) }, x.clone());
        check(|g, x| { let y = g.clamp_min(x, 0.1); probe(g, y) }, x.clone());
        check(|g, x| { let y = g.scale(x, -2.5); probe(g, y) }, x);
    }

    #[test]
    fn row_ops() {
        let x = rand_input(3, 5, 2);
        check(|g, x| { let y = g.softmax_rows(x); probe(g, y) }, x.clone());
        check(|g, x| { let y = g.layer_norm_rows(x); probe(g, y) }, x.clone());
        check(|g, x| { let y = g.normalize_rows(x); probe(g, y) }, x.clone());
        check(|g, x| g.norm(x), x.clone());
        check(|g, x| { let y = g.mean(x); g.scale(y, 3.0) }, x);
    }

    #[test]
    fn matrix_ops() {
        let x = rand_input(3, 4, 3);
        let w = rand_input(4, 2, 4);
        let b = rand_input(1, 4, 5);
        let wc = w.clone();
        check(move |g, x| { let wv = g.constant(wc.clone()); let y = g.matmul(x, wv); probe(g, y) }, x.clone());
        let left = rand_input(2, 3, 7);
        check(move |g, x| { let lv = g.constant(left.clone()); let y = g.matmul(lv, x); probe(g, y) }, x.clone());
        check(|g, x| { let y = g.matmul_t(x, x); probe(g, y) }, x.clone());
        let bc = b.clone();
        check(move |g, x| { let bv = g.constant(bc.clone()); let y = g.add_row(x, bv); let z = g.mul_row(y, bv); probe(g, z) }, x.clone());
        // gradient into the broadcast row itself
        let xc = x.clone();
        check(move |g, b| { let xv = g.constant(xc.clone()); let y = g.mul_row(xv, b); let z = g.add_row(y, b); probe(g, z) }, b);
    }

    #[test]
    fn structural_ops() {
        let x = rand_input(4, 6, 6);
        check(|g, x| {
            let top = g.slice_rows(x, 0, 1);
            let rest = g.slice_rows(x, 1, 3);
            let left = g.slice_cols(rest, 0, 2);
            let right = g.slice_cols(rest, 2, 4);
            let back = g.concat_cols(&[right, left]);
            let flat = g.reshape(back, 1, 18);
            let t = g.reshape(top, 1, 6);
            let all = g.concat_cols(&[flat, t]);
            let stacked = g.concat_rows(&[all, all]);
            probe(g, stacked)
        }, x);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::scalar(2.0));
        let p = g.param(Tensor::scalar(3.0));
        let y = g.add(c, p);
        assert!(!g.needs_grad(c));
        let grads = g.backward(y);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().item(), 1.0);
    }

}
