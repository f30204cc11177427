//! The layer zoo: affine maps, layer norm, BiMPNN, set pooling and
//! multi-head self-attention blocks. Layers hold [`ParamId`]s only; their
//! weights live in a [`ParamStore`].


use super::tape::{ParamId, ParamStore, Tape, Var};
use super::tensor::{Real, Tensor};
use super::NnError;

/// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<S: Real>(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Tensor<S> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| S::lit(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::matrix(rows, cols, data)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(in_dim, out_dim, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, out_dim));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<'_, S>, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::row(vec![S::one(); dim]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, dim));
        Self { gain, bias }
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<'_, S>, x: Var) -> Var {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Two-layer perceptron with a ReLU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        dims: (usize, usize, usize),
        rng: &mut impl rand::Rng,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.0"), dims.0, dims.1, rng),
            out: Linear::new(store, &format!("{name}.1"), dims.1, dims.2, rng),
        }
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<'_, S>, x: Var) -> Var {
        let h = self.hidden.forward(tape, x);
        let h = tape.relu(h);
        self.out.forward(tape, h)
    }
}

/// Nonlinearity applied after BiMPNN aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    /// ReLU followed by layer normalization (the default).
    ReluNorm,
}

/// `sigma(A H W_fwd + A^T H W_rev + H W_self + b)`.
///
/// `adj[u][v] = 1` iff `u -> v`, so `A H` gathers from successors and
/// `A^T H` from predecessors.
#[derive(Debug, Clone)]
pub struct BiMpnnLayer {
    pub w_forward: ParamId,
    pub w_reverse: ParamId,
    pub self_map: Linear,
    pub norm: Option<LayerNorm>,
    pub activation: Activation,
    pub out_dim: usize,
}

impl BiMpnnLayer {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let w_forward = store.add(format!("{name}.w_forward"), glorot(in_dim, out_dim, rng));
        let w_reverse = store.add(format!("{name}.w_reverse"), glorot(in_dim, out_dim, rng));
        let self_map = Linear::new(store, &format!("{name}.w_self"), in_dim, out_dim, rng);
        let norm = (activation == Activation::ReluNorm)
            .then(|| LayerNorm::new(store, &format!("{name}.norm"), out_dim));
        Self {
            w_forward,
            w_reverse,
            self_map,
            norm,
            activation,
            out_dim,
        }
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<'_, S>, graph: &GraphOperands, h: Var) -> Var {
        let wf = tape.param(self.w_forward);
        let wr = tape.param(self.w_reverse);
        let mut acc = self.self_map.forward(tape, h);
        if let (Some(adj), Some(adj_t)) = (graph.adj, graph.adj_t) {
            let hf = tape.matmul(h, wf);
            let fwd = tape.matmul(adj, hf);
            let hr = tape.matmul(h, wr);
            let rev = tape.matmul(adj_t, hr);
            acc = tape.add(acc, fwd);
            acc = tape.add(acc, rev);
        }
        match self.activation {
            Activation::Identity => acc,
            Activation::Relu => tape.relu(acc),
            Activation::ReluNorm => {
                let r = tape.relu(acc);
                self.norm.as_ref().expect("norm params").forward(tape, r)
            }
        }
    }
}

/// Adjacency and its transpose placed on a tape as constants. Graphs
/// without edges skip message passing entirely.
#[derive(Debug, Clone, Copy)]
pub struct GraphOperands {
    pub num_nodes: usize,
    adj: Option<Var>,
    adj_t: Option<Var>,
}

impl GraphOperands {
    pub fn new<S: Real>(tape: &mut Tape<'_, S>, num_nodes: usize, edges: &[(usize, usize)]) -> Self {
        if edges.is_empty() {
            return Self {
                num_nodes,
                adj: None,
                adj_t: None,
            };
        }
        let mut adj = Tensor::<S>::zeros(num_nodes, num_nodes);
        let mut adj_t = Tensor::<S>::zeros(num_nodes, num_nodes);
        for &(u, v) in edges {
            adj.data_mut()[u * num_nodes + v] = S::one();
            adj_t.data_mut()[v * num_nodes + u] = S::one();
        }
        Self {
            num_nodes,
            adj: Some(tape.constant(adj)),
            adj_t: Some(tape.constant(adj_t)),
        }
    }
}

/// One BiMPNN layer on explicit tensors, for direct use and testing.
pub fn bimpnn_layer<S: Real>(
    adj: &Tensor<S>,
    h: &Tensor<S>,
    w_forward: &Tensor<S>,
    w_reverse: &Tensor<S>,
    w_self: &Tensor<S>,
    activation: Activation,
) -> Result<Tensor<S>, NnError> {
    let n = h.rows();
    if adj.rows() != n || adj.cols() != n {
        return Err(NnError::ShapeMismatch(format!(
            "adjacency {:?} for {} nodes",
            adj.shape(),
            n
        )));
    }
    for (name, w) in [("w_forward", w_forward), ("w_reverse", w_reverse), ("w_self", w_self)] {
        if w.rows() != h.cols() || w.cols() != w_self.cols() {
            return Err(NnError::ShapeMismatch(format!(
                "{name} is {:?} for input width {}",
                w.shape(),
                h.cols()
            )));
        }
    }
    let mut store = ParamStore::new();
    let wf = store.add("w_forward", w_forward.clone());
    let wr = store.add("w_reverse", w_reverse.clone());
    let ws = store.add("w_self", w_self.clone());
    let mut tape = Tape::new(&store);
    let (a, at) = (tape.constant(adj.clone()), tape.constant(adj.transpose()));
    let hv = tape.constant(h.clone());
    let (wf, wr, ws) = (tape.param(wf), tape.param(wr), tape.param(ws));
    let hf = tape.matmul(hv, wf);
    let fwd = tape.matmul(a, hf);
    let hr = tape.matmul(hv, wr);
    let rev = tape.matmul(at, hr);
    let own = tape.matmul(hv, ws);
    let sum = tape.add(fwd, rev);
    let mut out = tape.add(sum, own);
    match activation {
        Activation::Identity => {}
        Activation::Relu => out = tape.relu(out),
        Activation::ReluNorm => {
            let d = w_self.cols();
            let g = tape.constant(Tensor::row(vec![S::one(); d]));
            let b = tape.constant(Tensor::zeros(1, d));
            let r = tape.relu(out);
            out = tape.layer_norm(r, g, b);
        }
    }
    Ok(tape.value(out).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Sum,
    Mean,
}

/// Permutation-invariant pooling of node representations into `1 x d`.
pub fn set_pool<S: Real>(tape: &mut Tape<'_, S>, h: Var, mode: PoolMode) -> Var {
    match mode {
        PoolMode::Sum => tape.sum_rows(h),
        PoolMode::Mean => tape.mean_rows(h),
    }
}

/// Transformer block without positional encodings:
/// `x = LN(x + MHA(x))`, then `x = LN(x + FFN(x))`.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionBlock {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "width must split evenly into heads");
        Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            ffn: Mlp::new(store, &format!("{name}.ffn"), (dim, 2 * dim, dim), rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            heads,
            dim,
        }
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<'_, S>, x: Var) -> Var {
        let head_dim = self.dim / self.heads;
        let scale = S::one() / S::from_usize(head_dim).unwrap().sqrt();
        let q = self.query.forward(tape, x);
        let k = self.key.forward(tape, x);
        let v = self.value.forward(tape, x);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim);
            let kh = tape.slice_cols(k, h * head_dim, head_dim);
            let vh = tape.slice_cols(v, h * head_dim, head_dim);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            outs.push(tape.matmul(attn, vh));
        }
        let merged = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        let mixed = self.output.forward(tape, merged);
        let res = tape.add(x, mixed);
        let x = self.norm1.forward(tape, res);
        let ff = self.ffn.forward(tape, x);
        let res = tape.add(x, ff);
        self.norm2.forward(tape, res)
    }
}

/// Embedding table `rows x dim`, initialized like an affine weight.
pub fn embedding<S: Real>(
    store: &mut ParamStore<S>,
    name: &str,
    rows: usize,
    dim: usize,
    rng: &mut impl rand::Rng,
) -> ParamId {
    store.add(name.to_string(), glorot(rows, dim, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed_rng;

    #[test]
    fn bimpnn_identity_configuration() {
        let h = Tensor::<f64>::from_f64(3, 2, &[1., 2., 3., 4., 5., 6.]);
        let mut adj = Tensor::zeros(3, 3);
        adj.data_mut()[1] = 1.0;
        let zero = Tensor::zeros(2, 2);
        let out = bimpnn_layer(&adj, &h, &zero, &zero, &Tensor::identity(2), Activation::Identity).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn bimpnn_hand_example() {
        let h = Tensor::<f64>::from_f64(2, 1, &[1., 2.]);
        let adj = Tensor::from_f64(2, 2, &[0., 1., 0., 0.]);
        let one = Tensor::scalar(1.0);
        let out = bimpnn_layer(&adj, &h, &one, &one, &Tensor::scalar(0.0), Activation::Identity).unwrap();
        assert_eq!(out.data(), &[2.0, 1.0]);
    }

    #[test]
    fn bimpnn_rejects_bad_shapes() {
        let h = Tensor::<f64>::zeros(3, 2);
        let w = Tensor::zeros(2, 2);
        assert!(matches!(
            bimpnn_layer(&Tensor::zeros(2, 2), &h, &w, &w, &w, Activation::Relu),
            Err(NnError::ShapeMismatch(_))
        ));
        assert!(bimpnn_layer(&Tensor::zeros(3, 3), &h, &Tensor::zeros(3, 2), &w, &w, Activation::Relu).is_err());
    }

    #[test]
    fn pooling_examples() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let same = tape.constant(Tensor::from_f64(3, 2, &[1., 2., 1., 2., 1., 2.]));
        let m = set_pool(&mut tape, same, PoolMode::Mean);
        assert_eq!(tape.value(m).data(), &[1.0, 2.0]);
        let eye = tape.constant(Tensor::identity(2));
        let s = set_pool(&mut tape, eye, PoolMode::Sum);
        assert_eq!(tape.value(s).data(), &[1.0, 1.0]);
    }

    #[test]
    fn singleton_attention_is_feed_forward_of_input() {
        let mut rng = keyed_rng(3, &[]);
        let mut store = ParamStore::<f64>::new();
        let block = AttentionBlock::new(&mut store, "attn", 8, 2, &mut rng);
        let x = glorot::<f64>(1, 8, &mut rng);
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x.clone());
        let out = block.forward(&mut tape, xv);
        let got = tape.value(out).clone();

        // With one element the attention weights are exactly 1, so the
        // mixed value is output(value(x)).
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x);
        let v = block.value.forward(&mut tape, xv);
        let mixed = block.output.forward(&mut tape, v);
        let res = tape.add(xv, mixed);
        let h = block.norm1.forward(&mut tape, res);
        let ff = block.ffn.forward(&mut tape, h);
        let res = tape.add(h, ff);
        let want = block.norm2.forward(&mut tape, res);
        for (a, b) in got.data().iter().zip(tape.value(want).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_elements_give_duplicate_outputs() {
        let mut rng = keyed_rng(4, &[]);
        let mut store = ParamStore::<f64>::new();
        let block = AttentionBlock::new(&mut store, "attn", 8, 4, &mut rng);
        let row = glorot::<f64>(1, 8, &mut rng).into_data();
        let other = glorot::<f64>(1, 8, &mut rng).into_data();
        let data: Vec<f64> = row.iter().chain(&other).chain(&row).copied().collect();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::matrix(3, 8, data));
        let out = block.forward(&mut tape, x);
        let t = tape.value(out);
        for c in 0..8 {
            assert!((t.at(0, c) - t.at(2, c)).abs() < 1e-12);
        }
    }
}
