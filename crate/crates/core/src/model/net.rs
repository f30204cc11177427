use crate::dag::Prefix;
use crate::nn::layers::{set_pool, GraphOperands, PoolMode};
use crate::nn::tensor::sinusoidal_embed;
use crate::nn::{Tape, Tensor, Var};

use super::{EdgeHead, Encoder, ModelError, ModelMeta, ModelParams, NodeHead, SizeHead};

/// Graph handed to an encoder: a prefix, optionally augmented with the
/// nodes of the layer being generated.
pub(crate) struct GraphView<'a> {
    pub attrs: Vec<&'a [u32]>,
    /// Layers between a node and the layer being generated (new nodes: 0).
    pub rel_depth: Vec<usize>,
    pub is_new: Vec<bool>,
    pub edges: Vec<(usize, usize)>,
    pub num_layers: usize,
}

impl<'a> GraphView<'a> {
    pub fn of_prefix(prefix: &'a Prefix) -> Self {
        Self {
            attrs: prefix.attrs.iter().map(Vec::as_slice).collect(),
            rel_depth: prefix.depth.iter().map(|&d| prefix.num_layers - d).collect(),
            is_new: vec![false; prefix.len()],
            edges: prefix.edges.clone(),
            num_layers: prefix.num_layers,
        }
    }

    /// Prefix plus new nodes; `cross` holds `(context, new)` local pairs.
    pub fn augmented(prefix: &'a Prefix, new_attrs: &'a [Vec<u32>], cross: &[(usize, usize)]) -> Self {
        let mut view = Self::of_prefix(prefix);
        let base = prefix.len();
        for row in new_attrs {
            view.attrs.push(row);
            view.rel_depth.push(0);
            view.is_new.push(true);
        }
        view.edges.extend(cross.iter().map(|&(u, j)| (u, base + j)));
        view
    }

    fn len(&self) -> usize {
        self.attrs.len()
    }
}

pub(crate) fn check_attrs<'r>(meta: &ModelMeta, rows: impl IntoIterator<Item = &'r [u32]>) -> Result<(), ModelError> {
    for row in rows {
        if row.len() != meta.num_channels() {
            return Err(ModelError::ShapeMismatch(format!(
                "attribute row has {} channels, model expects {}",
                row.len(),
                meta.num_channels()
            )));
        }
        for (c, &v) in row.iter().enumerate() {
            if v as usize >= meta.cardinalities[c] {
                return Err(ModelError::ShapeMismatch(format!(
                    "channel {c} value {v} outside the {} trained categories",
                    meta.cardinalities[c]
                )));
            }
        }
    }
    Ok(())
}

fn onehot_into(meta: &ModelMeta, row: &[u32], out: &mut [f32]) {
    let mut offset = 0;
    for (c, &v) in row.iter().enumerate() {
        out[offset + v as usize] = 1.0;
        offset += meta.cardinalities[c];
    }
}

fn sin_row(tape: &mut Tape<'_>, x: f64, dim: usize) -> Var {
    let e = sinusoidal_embed(x, dim);
    tape.constant(Tensor::row(e.into_iter().map(|v| v as f32).collect()))
}

/// `is_new`, in-degree and out-degree columns.
pub(crate) const EXTRA_FEATURES: usize = 3;

/// Noisy in-degrees at or above the last bucket share one embedding row.
pub(crate) const DEGREE_BUCKETS: usize = 9;

pub(crate) struct Encoded {
    pub nodes: Option<Var>,
    pub graph: Var,
}

impl Encoder {
    /// Node inputs are `onehot(attrs) | sin(rel_depth) | is_new | in_degree |
    /// out_degree` through an
    /// affine map, plus projected `sin(t)` and `sin(y)` rows. The graph
    /// representation is the mean of the final node states (or a learned
    /// start vector when empty) plus layer-count and label projections.
    pub(crate) fn forward(
        &self,
        tape: &mut Tape<'_>,
        meta: &ModelMeta,
        hidden: usize,
        view: &GraphView<'_>,
        t: Option<usize>,
        y: Option<f64>,
    ) -> Encoded {
        let y_row = match (&self.y_proj, y) {
            (Some(proj), Some(y)) => {
                let s = sin_row(tape, y, hidden);
                Some(proj.forward(tape, s))
            }
            _ => None,
        };
        let nodes = (view.len() > 0).then(|| {
            let width = meta.onehot_width() + hidden + EXTRA_FEATURES;
            let mut feats = vec![0f32; view.len() * width];
            for &(u, v) in &view.edges {
                feats[v * width + width - 2] += 1.0;
                feats[u * width + width - 1] += 1.0;
            }
            for (i, row) in view.attrs.iter().enumerate() {
                let dst = &mut feats[i * width..(i + 1) * width];
                onehot_into(meta, row, dst);
                let off = meta.onehot_width();
                for (k, v) in sinusoidal_embed(view.rel_depth[i] as f64, hidden).into_iter().enumerate() {
                    dst[off + k] = v as f32;
                }
                dst[width - 3] = if view.is_new[i] { 1.0 } else { 0.0 };
            }
            let x = tape.constant(Tensor::matrix(view.len(), width, feats));
            let mut h = self.input.forward(tape, x);
            if let Some(t) = t {
                let s = sin_row(tape, t as f64, hidden);
                let tr = self.t_proj.forward(tape, s);
                h = tape.add_row(h, tr);
            }
            if let Some(yr) = y_row {
                h = tape.add_row(h, yr);
            }
            let ops = GraphOperands::new(tape, view.len(), &view.edges);
            for layer in &self.layers {
                h = layer.forward(tape, &ops, h);
            }
            h
        });
        let pooled = match nodes {
            Some(h) => set_pool(tape, h, PoolMode::Mean),
            None => tape.param(self.start),
        };
        let s = sin_row(tape, view.num_layers as f64, hidden);
        let count = self.count_proj.forward(tape, s);
        let mut graph = tape.add(pooled, count);
        if let Some(yr) = y_row {
            graph = tape.add(graph, yr);
        }
        Encoded { nodes, graph }
    }
}

impl SizeHead {
    pub(crate) fn logits(&self, tape: &mut Tape<'_>, p: &ModelParams, prefix: &Prefix, y: Option<f64>) -> Var {
        let view = GraphView::of_prefix(prefix);
        let enc = self.enc.forward(tape, &p.meta, p.config.hidden_dim, &view, None, y);
        self.mlp.forward(tape, enc.graph)
    }
}

impl NodeHead {
    /// Per-channel logits (`n x K_c`) for the clean attributes of `noisy`.
    pub(crate) fn logits(
        &self,
        tape: &mut Tape<'_>,
        p: &ModelParams,
        prefix: &Prefix,
        noisy: &[Vec<u32>],
        t: usize,
        y: Option<f64>,
    ) -> Vec<Var> {
        let hidden = p.config.hidden_dim;
        let view = GraphView::of_prefix(prefix);
        let ctx = self.enc.forward(tape, &p.meta, hidden, &view, Some(t), y).graph;
        let width = p.meta.onehot_width();
        let mut feats = vec![0f32; noisy.len() * width];
        for (i, row) in noisy.iter().enumerate() {
            onehot_into(&p.meta, row, &mut feats[i * width..(i + 1) * width]);
        }
        let x = tape.constant(Tensor::matrix(noisy.len(), width, feats));
        let mut h = self.elem_in.forward(tape, x);
        h = tape.add_row(h, ctx);
        let s = sin_row(tape, t as f64, hidden);
        let tr = self.t_proj.forward(tape, s);
        h = tape.add_row(h, tr);
        for block in &self.blocks {
            h = block.forward(tape, h);
        }
        self.outs.iter().map(|out| out.forward(tape, h)).collect()
    }
}

impl EdgeHead {
    /// Logits for all candidate pairs, ordered new-node-major: row
    /// `j * n_ctx + u` scores `u -> new j`. `noisy[j][u]` is the current
    /// noisy indicator of that pair.
    pub(crate) fn logits(
        &self,
        tape: &mut Tape<'_>,
        p: &ModelParams,
        prefix: &Prefix,
        new_attrs: &[Vec<u32>],
        noisy: &[Vec<bool>],
        t: usize,
        y: Option<f64>,
    ) -> Var {
        let n_ctx = prefix.len();
        let mut cross = Vec::new();
        let mut ind = Vec::with_capacity(n_ctx * new_attrs.len());
        let (mut us, mut vs, mut degs) = (Vec::new(), Vec::new(), Vec::new());
        let cards = &p.meta.cardinalities;
        let mut class_rows: Vec<Vec<Vec<usize>>> = cards.iter().map(|&k| vec![Vec::new(); k]).collect();
        for (j, row) in noisy.iter().enumerate() {
            let deg = row.iter().filter(|&&on| on).count().min(DEGREE_BUCKETS - 1);
            degs.extend(std::iter::repeat(deg).take(row.len()));
            for (c, &k) in cards.iter().enumerate() {
                let mut counts = vec![0usize; k];
                for (u, _) in row.iter().enumerate().filter(|(_, &on)| on) {
                    counts[prefix.attrs[u][c] as usize] += 1;
                }
                for (class, &n) in counts.iter().enumerate() {
                    let idx = class * DEGREE_BUCKETS + n.min(DEGREE_BUCKETS - 1);
                    class_rows[c][class].extend(std::iter::repeat(idx).take(row.len()));
                }
            }
            for (u, &on) in row.iter().enumerate() {
                if on {
                    cross.push((u, j));
                }
                ind.push(if on { 1f32 } else { 0.0 });
                us.push(u);
                vs.push(n_ctx + j);
            }
        }
        let view = GraphView::augmented(prefix, new_attrs, &cross);
        let enc = self.enc.forward(tape, &p.meta, p.config.hidden_dim, &view, Some(t), y);
        let h = enc.nodes.expect("augmented graph is nonempty");
        let src = self.src.forward(tape, h);
        let dst = self.dst.forward(tape, h);
        let a = tape.gather_rows(src, &us);
        let b = tape.gather_rows(dst, &vs);
        let pair = tape.add(a, b);
        let ind = tape.constant(Tensor::matrix(ind.len(), 1, ind));
        let w = tape.param(self.noisy);
        let flag = tape.matmul(ind, w);
        let pair = tape.add(pair, flag);
        let table = tape.param(self.degree);
        let deg = tape.gather_rows(table, &degs);
        let mut pair = tape.add(pair, deg);
        for (c, rows) in class_rows.iter().enumerate() {
            let table = tape.param(self.class_counts[c]);
            for idx in rows {
                let e = tape.gather_rows(table, idx);
                pair = tape.add(pair, e);
            }
        }
        let pair = tape.relu(pair);
        let pair = self.hidden.forward(tape, pair);
        let pair = tape.relu(pair);
        self.out.forward(tape, pair)
    }
}

/// Which head's encoder to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Size,
    Node,
    Edge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextEncoding {
    /// `None` for an empty prefix.
    pub node_reps: Option<Tensor<f32>>,
    pub graph_rep: Tensor<f32>,
}

/// Encodes a prefix with the encoder of `head`. `y` is the raw label.
pub fn encode_context(
    p: &ModelParams,
    prefix: &Prefix,
    head: Head,
    t: Option<usize>,
    y: Option<f64>,
) -> Result<ContextEncoding, ModelError> {
    check_attrs(&p.meta, prefix.attrs.iter().map(Vec::as_slice))?;
    let y = p.condition(y)?;
    let enc = match head {
        Head::Size => &p.size.enc,
        Head::Node => &p.node.enc,
        Head::Edge => &p.edge.enc,
    };
    let mut tape = Tape::new(&p.store);
    let view = GraphView::of_prefix(prefix);
    let out = enc.forward(&mut tape, &p.meta, p.config.hidden_dim, &view, t, y);
    Ok(ContextEncoding {
        node_reps: out.nodes.map(|v| tape.value(v).clone()),
        graph_rep: tape.value(out.graph).clone(),
    })
}

/// Distribution over the next layer's size `{0..N_max}`; class 0 stops.
pub fn predict_layer_size(p: &ModelParams, prefix: &Prefix, y: Option<f64>) -> Result<Vec<f64>, ModelError> {
    check_attrs(&p.meta, prefix.attrs.iter().map(Vec::as_slice))?;
    let y = p.condition(y)?;
    Ok(size_probs(p, prefix, y))
}

pub(crate) fn size_probs(p: &ModelParams, prefix: &Prefix, y: Option<f64>) -> Vec<f64> {
    let mut tape = Tape::new(&p.store);
    let logits = p.size.logits(&mut tape, p, prefix, y);
    let probs = tape.softmax_rows(logits);
    tape.value(probs).to_f64_vec()
}

/// Predicted clean-attribute distributions, indexed `[element][channel]`.
pub fn denoise_node_attrs(
    p: &ModelParams,
    prefix: &Prefix,
    noisy: &[Vec<u32>],
    t: usize,
    y: Option<f64>,
) -> Result<Vec<Vec<Vec<f64>>>, ModelError> {
    check_attrs(&p.meta, prefix.attrs.iter().map(Vec::as_slice))?;
    check_attrs(&p.meta, noisy.iter().map(Vec::as_slice))?;
    if noisy.is_empty() {
        return Err(ModelError::ShapeMismatch("no elements to denoise".into()));
    }
    if t == 0 || t > p.config.t_train {
        return Err(ModelError::ShapeMismatch(format!(
            "step {t} outside [1, {}]",
            p.config.t_train
        )));
    }
    let y = p.condition(y)?;
    Ok(node_probs(p, prefix, noisy, t, y))
}

pub(crate) fn node_probs(
    p: &ModelParams,
    prefix: &Prefix,
    noisy: &[Vec<u32>],
    t: usize,
    y: Option<f64>,
) -> Vec<Vec<Vec<f64>>> {
    let mut tape = Tape::new(&p.store);
    let logits = p.node.logits(&mut tape, p, prefix, noisy, t, y);
    let mut out = vec![Vec::with_capacity(logits.len()); noisy.len()];
    for l in logits {
        let probs = tape.softmax_rows(l);
        let probs = tape.value(probs);
        for (i, row) in out.iter_mut().enumerate() {
            row.push(probs.row_slice(i).iter().map(|&x| x as f64).collect());
        }
    }
    out
}

/// Edge probabilities indexed `[new node][context node]`.
pub fn denoise_edges(
    p: &ModelParams,
    prefix: &Prefix,
    new_attrs: &[Vec<u32>],
    noisy: &[Vec<bool>],
    t: usize,
    y: Option<f64>,
) -> Result<Vec<Vec<f64>>, ModelError> {
    if prefix.is_empty() {
        return Err(ModelError::EmptyContext);
    }
    check_attrs(&p.meta, prefix.attrs.iter().map(Vec::as_slice))?;
    check_attrs(&p.meta, new_attrs.iter().map(Vec::as_slice))?;
    if noisy.len() != new_attrs.len() || noisy.iter().any(|r| r.len() != prefix.len()) {
        return Err(ModelError::ShapeMismatch(format!(
            "noisy edges must be {} x {}",
            new_attrs.len(),
            prefix.len()
        )));
    }
    if t == 0 || t > p.config.t_train {
        return Err(ModelError::ShapeMismatch(format!(
            "step {t} outside [1, {}]",
            p.config.t_train
        )));
    }
    let y = p.condition(y)?;
    Ok(edge_probs(p, prefix, new_attrs, noisy, t, y))
}

pub(crate) fn edge_probs(
    p: &ModelParams,
    prefix: &Prefix,
    new_attrs: &[Vec<u32>],
    noisy: &[Vec<bool>],
    t: usize,
    y: Option<f64>,
) -> Vec<Vec<f64>> {
    let mut tape = Tape::new(&p.store);
    let logits = p.edge.logits(&mut tape, p, prefix, new_attrs, noisy, t, y);
    let z = tape.value(logits).data();
    z.chunks(prefix.len())
        .map(|row| row.iter().map(|&x| crate::nn::tape::sigmoid(x as f64)).collect())
        .collect()
}
