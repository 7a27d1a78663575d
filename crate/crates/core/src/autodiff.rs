//! Reverse-mode differentiation over matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves are either
//! constants or parameters from a [`ParamStore`]; gradients only flow into
//! parameters marked trainable, and backward work is skipped for any subgraph
//! that cannot reach one.

use std::collections::BTreeMap;

use crate::scalar::Scalar;
use crate::tensor::{axpy, dot, Matrix};

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Matrix<T>,
    pub trainable: bool,
}

/// Named parameter tensors, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Matrix<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix<T> {
        &self.params[id.0].value
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Per-parameter gradients produced by [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    pub by_param: BTreeMap<ParamId, Matrix<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.by_param.get(&id)
    }

    /// Adds `other` into `self`, visiting parameters in id order.
    pub fn accumulate(&mut self, other: Gradients<T>) {
        for (id, g) in other.by_param {
            match self.by_param.get_mut(&id) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.by_param.insert(id, g);
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.by_param.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn global_norm(&self) -> T {
        self.by_param
            .values()
            .map(|g| dot(g.data(), g.data()))
            .fold(T::zero(), |a, b| a + b)
            .sqrt()
    }
}

enum Op<T> {
    Leaf(Option<ParamId>),
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    MulConst(NodeId, Matrix<T>),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Matrix<T>,
        rstd: Vec<T>,
    },
    CausalSoftmax {
        x: NodeId,
        scale: T,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    GatherRows(Vec<(NodeId, usize)>),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Matrix<T>,
    },
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-9;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::of(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

impl<T: Scalar> Tape<T> {
    /// Tape that records gradients for trainable parameters.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Forward-only tape; nothing requires a gradient.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        self.nodes.len() - 1
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn constant(&mut self, value: Matrix<T>) -> NodeId {
        self.push(value, Op::Leaf(None), false)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Leaf(Some(id)), p.trainable)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_nt(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMulNT(a, b), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    /// Adds the 1×d row `b` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let bias = self.value(b);
        assert_eq!(bias.rows(), 1);
        assert_eq!(bias.cols(), self.value(a).cols(), "add_row width");
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            axpy(T::one(), bias.row(0), v.row_mut(r));
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::AddRow(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).scaled(s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// Elementwise product with a constant, e.g. a dropout mask.
    pub fn mul_const(&mut self, a: NodeId, c: Matrix<T>) -> NodeId {
        let x = self.value(a);
        assert_eq!(x.shape(), c.shape());
        let data = x.data().iter().zip(c.data()).map(|(&p, &q)| p * q).collect();
        let v = Matrix::from_vec(x.rows(), x.cols(), data);
        let rg = self.rg(a);
        self.push(v, Op::MulConst(a, c), rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalization with a 1×d gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gain);
        let b = self.value(bias);
        assert_eq!(g.cols(), cols, "layer norm gain width");
        assert_eq!(b.cols(), cols, "layer norm bias width");
        let n = T::of(cols as f64);
        let eps = T::of(LAYER_NORM_EPS);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let s = T::one() / (var + eps).sqrt();
            rstd.push(s);
            for c in 0..cols {
                let h = (row[c] - mean) * s;
                xhat.set(r, c, h);
                out.set(r, c, h * g.get(0, c) + b.get(0, c));
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Softmax of `scale · x` over each row, restricted to columns `j ≤ i`.
    pub fn causal_softmax(&mut self, x: NodeId, scale: T) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        assert!(rows <= cols, "causal softmax expects a square or wide score matrix");
        let offset = cols - rows;
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let visible = r + offset + 1;
            let row = &xv.row(r)[..visible];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v * scale));
            let mut total = T::zero();
            let o = out.row_mut(r);
            for c in 0..visible {
                let e = (row[c] * scale - max).exp();
                o[c] = e;
                total += e;
            }
            for v in &mut o[..visible] {
                *v /= total;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::CausalSoftmax { x, scale }, rg)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        assert!(start + len <= xv.cols());
        let mut out = Matrix::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        let rg = self.rg(x);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row count");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Stacks the selected rows of several nodes into a new matrix.
    pub fn gather_rows(&mut self, sources: &[(NodeId, usize)]) -> NodeId {
        let cols = self.value(sources[0].0).cols();
        let mut out = Matrix::zeros(sources.len(), cols);
        for (i, &(n, r)) in sources.iter().enumerate() {
            let v = self.value(n);
            assert_eq!(v.cols(), cols, "gather_rows width");
            out.row_mut(i).copy_from_slice(v.row(r));
        }
        let rg = sources.iter().any(|&(n, _)| self.rg(n));
        self.push(out, Op::GatherRows(sources.to_vec()), rg)
    }

    /// Mean cross-entropy of each logits row against its target index; 1×1 result.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target per logits row");
        assert!(!targets.is_empty());
        let mut probs = Matrix::zeros(lv.rows(), lv.cols());
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut z = T::zero();
            let p = probs.row_mut(r);
            for (c, &v) in row.iter().enumerate() {
                p[c] = (v - max).exp();
                z += p[c];
            }
            for v in p.iter_mut() {
                *v /= z;
            }
            total += (max + z.ln() - row[t]).as_f64();
        }
        let loss = T::of(total / targets.len() as f64);
        let rg = self.rg(logits);
        self.push(
            Matrix::from_vec(1, 1, vec![loss]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Gradients of the 1×1 node `output` with respect to every trainable parameter that reaches it.
    pub fn backward(&self, output: NodeId) -> Gradients<T> {
        assert_eq!(self.value(output).shape(), (1, 1), "backward from a scalar");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output] = Some(Matrix::filled(1, 1, T::one()));
        let mut out = Gradients::default();

        for id in (0..=output).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.op {
                Op::Leaf(Some(pid)) => {
                    match out.by_param.get_mut(pid) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            out.by_param.insert(*pid, g);
                        }
                    }
                }
                Op::Leaf(None) => {}
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let ga = g.matmul_nt(self.value(*b));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = self.value(*a).matmul_tn(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMulNT(a, b) => {
                    if self.rg(*a) {
                        let ga = g.matmul(self.value(*b));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = g.matmul_tn(self.value(*a));
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::AddRow(a, b) => {
                    if self.rg(*b) {
                        let mut gb = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            axpy(T::one(), g.row(r), gb.row_mut(0));
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, g.scaled(*s));
                }
                Op::MulConst(a, c) => {
                    let data = g.data().iter().zip(c.data()).map(|(&p, &q)| p * q).collect();
                    accumulate(&mut grads, *a, Matrix::from_vec(g.rows(), g.cols(), data));
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gv, &xv)| gv * gelu_grad(xv))
                        .collect();
                    accumulate(&mut grads, *a, Matrix::from_vec(g.rows(), g.cols(), data));
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let (rows, cols) = g.shape();
                    if self.rg(*gain) {
                        let mut gg = Matrix::zeros(1, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                let v = gg.get(0, c) + g.get(r, c) * xhat.get(r, c);
                                gg.set(0, c, v);
                            }
                        }
                        accumulate(&mut grads, *gain, gg);
                    }
                    if self.rg(*bias) {
                        let mut gb = Matrix::zeros(1, cols);
                        for r in 0..rows {
                            axpy(T::one(), g.row(r), gb.row_mut(0));
                        }
                        accumulate(&mut grads, *bias, gb);
                    }
                    if self.rg(*x) {
                        let gain_v = self.value(*gain);
                        let n = T::of(cols as f64);
                        let mut gx = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            let mut mean_d = T::zero();
                            let mut mean_dh = T::zero();
                            for c in 0..cols {
                                let d = g.get(r, c) * gain_v.get(0, c);
                                mean_d += d;
                                mean_dh += d * xhat.get(r, c);
                            }
                            mean_d /= n;
                            mean_dh /= n;
                            for c in 0..cols {
                                let d = g.get(r, c) * gain_v.get(0, c);
                                gx.set(r, c, rstd[r] * (d - mean_d - xhat.get(r, c) * mean_dh));
                            }
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::CausalSoftmax { x, scale } => {
                    let y = &node.value;
                    let (rows, cols) = y.shape();
                    let offset = cols - rows;
                    let mut gx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let visible = r + offset + 1;
                        let yr = &y.row(r)[..visible];
                        let gr = &g.row(r)[..visible];
                        let s = dot(yr, gr);
                        let o = gx.row_mut(r);
                        for c in 0..visible {
                            o[c] = *scale * yr[c] * (gr[c] - s);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.rg(p) {
                            let mut gp = Matrix::zeros(g.rows(), w);
                            for r in 0..g.rows() {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                            }
                            accumulate(&mut grads, p, gp);
                        }
                        offset += w;
                    }
                }
                Op::GatherRows(sources) => {
                    let mut partial: BTreeMap<NodeId, Matrix<T>> = BTreeMap::new();
                    for (i, &(n, r)) in sources.iter().enumerate() {
                        if !self.rg(n) {
                            continue;
                        }
                        let shape = self.value(n).shape();
                        let gn = partial.entry(n).or_insert_with(|| Matrix::zeros(shape.0, shape.1));
                        axpy(T::one(), g.row(i), gn.row_mut(r));
                    }
                    for (n, gn) in partial {
                        accumulate(&mut grads, n, gn);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let upstream = g.get(0, 0) / T::of(targets.len() as f64);
                    let mut gl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let v = gl.get(r, t) - T::one();
                        gl.set(r, t, v);
                    }
                    accumulate(&mut grads, *logits, gl.scaled(upstream));
                }
            }
        }
        out
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], id: NodeId, g: Matrix<T>) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite difference of `f` with respect to every entry of parameter `id`.
    fn numeric_grad(
        store: &mut ParamStore<f64>,
        id: ParamId,
        f: &dyn Fn(&ParamStore<f64>) -> f64,
    ) -> Vec<f64> {
        let h = 1e-6;
        let n = store.value(id).len();
        (0..n)
            .map(|i| {
                let orig = store.value(id).data()[i];
                store.get_mut(id).value.data_mut()[i] = orig + h;
                let up = f(store);
                store.get_mut(id).value.data_mut()[i] = orig - h;
                let down = f(store);
                store.get_mut(id).value.data_mut()[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn check(store: &mut ParamStore<f64>, build: &dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> NodeId) {
        let mut tape = Tape::new();
        let out = build(&mut tape, store);
        let grads = tape.backward(out);
        let f = |s: &ParamStore<f64>| {
            let mut t = Tape::inference();
            let o = build(&mut t, s);
            t.value(o).get(0, 0)
        };
        for id in store.trainable_ids() {
            let analytic = grads.get(id).expect("gradient present");
            let numeric = numeric_grad(store, id, &f);
            for (a, n) in analytic.data().iter().zip(&numeric) {
                assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "{a} vs {n}");
            }
        }
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let x = store.register("x", Matrix::randn(3, 4, 1.0, &mut rng), true);
        let w = store.register("w", Matrix::randn(5, 4, 0.5, &mut rng), true);
        let b = store.register("b", Matrix::randn(1, 5, 0.5, &mut rng), true);
        let g = store.register("g", Matrix::randn(1, 5, 1.0, &mut rng), true);
        let beta = store.register("beta", Matrix::randn(1, 5, 1.0, &mut rng), true);
        let frozen = store.register("frozen", Matrix::randn(5, 5, 1.0, &mut rng), false);
        let mask = Matrix::randn(3, 5, 1.0, &mut rng);

        check(&mut store, &|t, s| {
            let xn = t.param(s, x);
            let wn = t.param(s, w);
            let bn = t.param(s, b);
            let h = t.matmul_nt(xn, wn);
            let h = t.add_row(h, bn);
            let gn = t.param(s, g);
            let betan = t.param(s, beta);
            let h = t.layer_norm(h, gn, betan);
            let h = t.gelu(h);
            let fr = t.param(s, frozen);
            let h2 = t.matmul(h, fr);
            let h = t.add(h, h2);
            let h = t.mul_const(h, mask.clone());
            let left = t.slice_cols(h, 0, 2);
            let right = t.slice_cols(h, 2, 3);
            let h = t.concat_cols(&[right, left]);
            let scores = t.matmul_nt(h, h);
            let p = t.causal_softmax(scores, 0.7);
            let h = t.matmul(p, h);
            let h = t.scale(h, 1.3);
            let rows = t.gather_rows(&[(h, 2), (h, 0), (h, 2)]);
            let rows = t.slice_cols(rows, 0, 4);
            t.cross_entropy(rows, &[1, 3, 0])
        });
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let w = store.register("w", Matrix::identity(2), false);
        let x = store.register("x", Matrix::from_f64(1, 2, &[1.0, 2.0]), true);
        let mut t = Tape::new();
        let wn = t.param(&store, w);
        let xn = t.param(&store, x);
        let y = t.matmul_nt(xn, wn);
        let loss = t.cross_entropy(y, &[0]);
        let grads = t.backward(loss);
        assert!(grads.get(w).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn causal_softmax_rows_sum_to_one_and_mask_future() {
        let mut t = Tape::<f64>::inference();
        let x = t.constant(Matrix::from_f64(3, 3, &[1., 9., 9., 2., 3., 9., 0.5, 0.1, 0.2]));
        let p = t.causal_softmax(x, 1.0);
        let v = t.value(p);
        for r in 0..3 {
            let s: f64 = v.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            for c in r + 1..3 {
                assert_eq!(v.get(r, c), 0.0);
            }
        }
    }
}
