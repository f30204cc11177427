//! Reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] rather than copied, and each parameter
//! appears on the tape at most once, so [`Tape::backward`] can write its
//! gradient straight into the matching slot of [`Grads`].

use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Real, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Real> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&self) -> Grads<S> {
        Grads(self.tensors.iter().map(Tensor::zeros_like).collect())
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// One gradient tensor per parameter, aligned with the store.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<S = f32>(pub Vec<Tensor<S>>);

impl<S: Real> Grads<S> {
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, k: S) {
        for t in &mut self.0 {
            t.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.0[id.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SumRows(Var),
    MeanRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weight: S,
        probs: Vec<S>,
    },
    BceLogits {
        logits: Var,
        targets: Vec<S>,
        weight: S,
        probs: Vec<S>,
    },
    Mse {
        pred: Var,
        targets: Vec<S>,
        weight: S,
    },
}

struct Node<S> {
    value: Option<Tensor<S>>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Tape<'p, S: Real = f32> {
    params: &'p ParamStore<S>,
    nodes: Vec<Node<S>>,
    param_vars: Vec<Option<Var>>,
}

impl<'p, S: Real> Tape<'p, S> {
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore<S> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        debug_assert!(value.is_finite(), "non-finite value produced on tape");
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        assert_eq!(k, tb.rows(), "matmul shape mismatch");
        let mut out = vec![S::zero(); n * m];
        gemm_acc(ta.data(), tb.data(), &mut out, n, k, m);
        self.push(Tensor::matrix(n, m, out), Op::MatMul(a, b), &[a, b])
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k, m) = (ta.rows(), ta.cols(), tb.rows());
        assert_eq!(k, tb.cols(), "matmul_nt shape mismatch");
        let mut out = vec![S::zero(); n * m];
        gemm_nt_acc(ta.data(), tb.data(), &mut out, n, k, m);
        self.push(Tensor::matrix(n, m, out), Op::MatMulNt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let mut out = ta.clone();
        out.add_assign(tb);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 x d` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        let d = ta.cols();
        assert_eq!((tr.rows(), tr.cols()), (1, d), "add_row shape mismatch");
        let mut out = ta.clone();
        for chunk in out.data_mut().chunks_mut(d) {
            for (o, &r) in chunk.iter_mut().zip(tr.data()) {
                *o += r;
            }
        }
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: S) -> Var {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| x * k).collect());
        self.push(out, Op::Scale(a, k), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| x.max(S::zero())).collect(),
        );
        self.push(out, Op::Relu(a), &[a])
    }

    /// Per-row normalization with learned `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let tx = self.value(x);
        let (n, d) = (tx.rows(), tx.cols());
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let eps = S::lit(LAYER_NORM_EPS);
        let dn = S::from_usize(d).unwrap();
        let mut xhat = vec![S::zero(); n * d];
        let mut inv_std = vec![S::zero(); n];
        let mut out = vec![S::zero(); n * d];
        for r in 0..n {
            let row = tx.row_slice(r);
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let inv = S::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        self.push(
            Tensor::matrix(n, d, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (n, d) = (ta.rows(), ta.cols());
        let mut out = vec![S::zero(); n * d];
        for r in 0..n {
            softmax_into(ta.row_slice(r), &mut out[r * d..(r + 1) * d]);
        }
        self.push(Tensor::matrix(n, d, out), Op::SoftmaxRows(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![S::zero(); n * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            assert_eq!(t.rows(), n, "concat_cols row mismatch");
            for r in 0..n {
                out[r * total + offset..r * total + offset + w].copy_from_slice(t.row_slice(r));
            }
            offset += w;
        }
        self.push(Tensor::matrix(n, total, out), Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let ta = self.value(a);
        let n = ta.rows();
        assert!(start + width <= ta.cols(), "slice_cols out of range");
        let mut out = Vec::with_capacity(n * width);
        for r in 0..n {
            out.extend_from_slice(&ta.row_slice(r)[start..start + width]);
        }
        self.push(Tensor::matrix(n, width, out), Op::SliceCols(a, start), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let ta = self.value(a);
        let d = ta.cols();
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            out.extend_from_slice(ta.row_slice(i));
        }
        self.push(
            Tensor::matrix(index.len(), d, out),
            Op::GatherRows(a, index.to_vec()),
            &[a],
        )
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let d = ta.cols();
        let mut out = vec![S::zero(); d];
        for r in 0..ta.rows() {
            for (o, &x) in out.iter_mut().zip(ta.row_slice(r)) {
                *o += x;
            }
        }
        self.push(Tensor::row(out), Op::SumRows(a), &[a])
    }

    /// Mean over rows; zero rows give a zero vector.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (n, d) = (ta.rows(), ta.cols());
        let mut out = vec![S::zero(); d];
        if n > 0 {
            let k = S::one() / S::from_usize(n).unwrap();
            for r in 0..n {
                for (o, &x) in out.iter_mut().zip(ta.row_slice(r)) {
                    *o += x * k;
                }
            }
        }
        self.push(Tensor::row(out), Op::MeanRows(a), &[a])
    }

    /// `weight * mean_r(-log softmax(logits_r)[target_r])`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weight: S) -> Var {
        let tl = self.value(logits);
        let (n, d) = (tl.rows(), tl.cols());
        assert_eq!(n, targets.len(), "one target per row");
        let mut probs = vec![S::zero(); n * d];
        let mut loss = S::zero();
        for r in 0..n {
            let row = tl.row_slice(r);
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<S>().ln();
            loss += lse - row[targets[r]];
            softmax_into(row, &mut probs[r * d..(r + 1) * d]);
        }
        let value = if n == 0 { S::zero() } else { weight * loss / S::from_usize(n).unwrap() };
        self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weight,
                probs,
            },
            &[logits],
        )
    }

    /// `weight * mean(BCE(sigmoid(logits), targets))` over an `n x 1` column.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[S], weight: S) -> Var {
        let tl = self.value(logits);
        assert_eq!(tl.len(), targets.len(), "one target per logit");
        let mut loss = S::zero();
        let mut probs = Vec::with_capacity(targets.len());
        for (&z, &y) in tl.data().iter().zip(targets) {
            loss += z.max(S::zero()) - z * y + (S::one() + (-z.abs()).exp()).ln();
            probs.push(sigmoid(z));
        }
        let n = targets.len();
        let value = if n == 0 { S::zero() } else { weight * loss / S::from_usize(n).unwrap() };
        self.push(
            Tensor::scalar(value),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
                weight,
                probs,
            },
            &[logits],
        )
    }

    /// `weight * mean((pred - target)^2)`.
    pub fn mse(&mut self, pred: Var, targets: &[S], weight: S) -> Var {
        let tp = self.value(pred);
        assert_eq!(tp.len(), targets.len(), "one target per prediction");
        let loss: S = tp
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &y)| (p - y) * (p - y))
            .sum();
        let n = S::from_usize(targets.len().max(1)).unwrap();
        self.push(
            Tensor::scalar(weight * loss / n),
            Op::Mse {
                pred,
                targets: targets.to_vec(),
                weight,
            },
            &[pred],
        )
    }

    /// Gradients of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Grads<S> {
        let mut out = self.params.zero_grads();
        self.backward_into(loss, &mut out);
        out
    }

    /// Accumulates gradients of `loss` into `out`.
    pub fn backward_into(&self, loss: Var, out: &mut Grads<S>) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<S>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(S::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, Var(i), g, &mut grads, out);
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(
        &self,
        op: &Op<S>,
        this: Var,
        g: Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
        out: &mut Grads<S>,
    ) {
        let acc = |v: Var, t: Tensor<S>, grads: &mut [Option<Tensor<S>>]| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        };
        match op {
            Op::Leaf => {}
            Op::Param(id) => out.0[id.0].add_assign(&g),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                if self.needs(*a) {
                    let mut da = vec![S::zero(); n * k];
                    gemm_nt_acc(g.data(), tb.data(), &mut da, n, m, k);
                    acc(*a, Tensor::matrix(n, k, da), grads);
                }
                if self.needs(*b) {
                    let mut db = vec![S::zero(); k * m];
                    gemm_tn_acc(ta.data(), g.data(), &mut db, n, k, m);
                    acc(*b, Tensor::matrix(k, m, db), grads);
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.rows());
                if self.needs(*a) {
                    let mut da = vec![S::zero(); n * k];
                    gemm_acc(g.data(), tb.data(), &mut da, n, m, k);
                    acc(*a, Tensor::matrix(n, k, da), grads);
                }
                if self.needs(*b) {
                    let mut db = vec![S::zero(); m * k];
                    gemm_tn_acc(g.data(), ta.data(), &mut db, n, m, k);
                    acc(*b, Tensor::matrix(m, k, db), grads);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone(), grads);
                }
                if self.needs(*b) {
                    acc(*b, g, grads);
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*row) {
                    let d = g.cols();
                    let mut dr = vec![S::zero(); d];
                    for chunk in g.data().chunks(d) {
                        for (o, &x) in dr.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                    acc(*row, Tensor::row(dr), grads);
                }
                if self.needs(*a) {
                    acc(*a, g, grads);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
                    acc(*a, Tensor::new(g.shape().to_vec(), d), grads);
                }
                if self.needs(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                    acc(*b, Tensor::new(g.shape().to_vec(), d), grads);
                }
            }
            Op::Scale(a, k) => {
                let d = g.data().iter().map(|&x| x * *k).collect();
                acc(*a, Tensor::new(g.shape().to_vec(), d), grads);
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(&x, &v)| if v > S::zero() { x } else { S::zero() })
                    .collect();
                acc(*a, Tensor::new(g.shape().to_vec(), d), grads);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (n, d) = (g.rows(), g.cols());
                let gv = self.value(*gain).data();
                if self.needs(*gain) || self.needs(*bias) {
                    let mut dg = vec![S::zero(); d];
                    let mut db = vec![S::zero(); d];
                    for r in 0..n {
                        for c in 0..d {
                            let gy = g.data()[r * d + c];
                            dg[c] += gy * xhat[r * d + c];
                            db[c] += gy;
                        }
                    }
                    acc(*gain, Tensor::row(dg), grads);
                    acc(*bias, Tensor::row(db), grads);
                }
                if self.needs(*x) {
                    let dn = S::from_usize(d).unwrap();
                    let mut dx = vec![S::zero(); n * d];
                    for r in 0..n {
                        let mut sum_dh = S::zero();
                        let mut sum_dh_h = S::zero();
                        for c in 0..d {
                            let dh = g.data()[r * d + c] * gv[c];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * d + c];
                        }
                        for c in 0..d {
                            let dh = g.data()[r * d + c] * gv[c];
                            dx[r * d + c] = inv_std[r] / dn
                                * (dn * dh - sum_dh - xhat[r * d + c] * sum_dh_h);
                        }
                    }
                    acc(*x, Tensor::matrix(n, d, dx), grads);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = self.value(this);
                let (n, d) = (y.rows(), y.cols());
                let mut dx = vec![S::zero(); n * d];
                for r in 0..n {
                    let yr = y.row_slice(r);
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dot: S = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for c in 0..d {
                        dx[r * d + c] = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*a, Tensor::matrix(n, d, dx), grads);
            }
            Op::ConcatCols(parts) => {
                let (n, total) = (g.rows(), g.cols());
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(n * w);
                        for r in 0..n {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        acc(p, Tensor::matrix(n, w, d), grads);
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let ta = self.value(*a);
                let (n, d, w) = (ta.rows(), ta.cols(), g.cols());
                let mut da = vec![S::zero(); n * d];
                for r in 0..n {
                    da[r * d + start..r * d + start + w].copy_from_slice(g.row_slice(r));
                }
                acc(*a, Tensor::matrix(n, d, da), grads);
            }
            Op::GatherRows(a, index) => {
                let ta = self.value(*a);
                let d = ta.cols();
                let mut da = vec![S::zero(); ta.rows() * d];
                for (r, &i) in index.iter().enumerate() {
                    for (o, &x) in da[i * d..(i + 1) * d].iter_mut().zip(g.row_slice(r)) {
                        *o += x;
                    }
                }
                acc(*a, Tensor::matrix(ta.rows(), d, da), grads);
            }
            Op::SumRows(a) | Op::MeanRows(a) => {
                let ta = self.value(*a);
                let n = ta.rows();
                let k = match op {
                    Op::MeanRows(_) if n > 0 => S::one() / S::from_usize(n).unwrap(),
                    _ => S::one(),
                };
                let mut da = Vec::with_capacity(ta.len());
                for _ in 0..n {
                    da.extend(g.data().iter().map(|&x| x * k));
                }
                acc(*a, Tensor::matrix(n, ta.cols(), da), grads);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weight,
                probs,
            } => {
                let tl = self.value(*logits);
                let (n, d) = (tl.rows(), tl.cols());
                let scale = g.item() * *weight / S::from_usize(n.max(1)).unwrap();
                let mut dl: Vec<S> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * d + t] -= scale;
                }
                acc(*logits, Tensor::matrix(n, d, dl), grads);
            }
            Op::BceLogits {
                logits,
                targets,
                weight,
                probs,
            } => {
                let tl = self.value(*logits);
                let scale = g.item() * *weight / S::from_usize(targets.len().max(1)).unwrap();
                let dl = probs.iter().zip(targets).map(|(&p, &y)| (p - y) * scale).collect();
                acc(*logits, Tensor::new(tl.shape().to_vec(), dl), grads);
            }
            Op::Mse {
                pred,
                targets,
                weight,
            } => {
                let tp = self.value(*pred);
                let scale = S::lit(2.0) * g.item() * *weight
                    / S::from_usize(targets.len().max(1)).unwrap();
                let dp = tp
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&p, &y)| (p - y) * scale)
                    .collect();
                acc(*pred, Tensor::new(tp.shape().to_vec(), dp), grads);
            }
        }
    }
}

pub fn sigmoid<S: Real>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

pub(crate) fn softmax_into<S: Real>(row: &[S], out: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_and_backward_by_hand() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_f64(2, 1, &[3.0, -1.0]));
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::from_f64(1, 2, &[2.0, 5.0]));
        let wv = tape.param(w);
        let y = tape.matmul(x, wv);
        assert_eq!(tape.value(y).item(), 1.0);
        let grads = tape.backward(y);
        assert_eq!(grads.get(w).data(), &[2.0, 5.0]);
    }

    #[test]
    fn params_appear_once() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::scalar(2.0));
        let mut tape = Tape::new(&store);
        let a = tape.param(w);
        let b = tape.param(w);
        assert_eq!(a, b);
        let y = tape.mul(a, b);
        let grads = tape.backward(y);
        assert_eq!(grads.get(w).item(), 4.0);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let z = tape.constant(Tensor::zeros(2, 4));
        let loss = tape.cross_entropy(z, &[0, 3], 1.0);
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mean_of_zero_rows_is_zero() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let z = tape.constant(Tensor::zeros(0, 3));
        let m = tape.mean_rows(z);
        assert_eq!(tape.value(m).data(), &[0.0, 0.0, 0.0]);
    }
}
