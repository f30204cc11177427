//! The layerwise generative model: a layer-size head, a node-attribute
//! denoiser and an edge denoiser, each reading the current prefix through a
//! BiMPNN encoder.

mod net;
mod sample;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dag::{layer_partition, Dag, DagError};
use crate::diffusion::{DiffusionError, NoiseModel};
use crate::nn::layers::{embedding, AttentionBlock, BiMpnnLayer, Activation, Linear, Mlp};
use crate::nn::{NnError, ParamId, ParamStore};
use crate::rng::keyed_rng;

pub use net::{
    denoise_edges, denoise_node_attrs, encode_context, predict_layer_size, ContextEncoding, Head,
};
pub use sample::{sample, SampleConfig, SampleFlag, SampleStats, SampledDag, Schedule};
pub use train::{draw_teacher_layer, train, EpochRecord, LossBreakdown, TrainConfig, TrainLog};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model is conditional but no label was supplied")]
    MissingLabel,
    #[error("the first layer has no context to draw edges from")]
    EmptyContext,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, graph {graph} (layer {layer})")]
    NonFiniteLoss {
        epoch: usize,
        graph: usize,
        layer: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid label {0}: labels must exceed -1")]
    InvalidLabel(f64),
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Architecture hyperparameters plus default sampling budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub mpnn_layers: usize,
    pub attn_blocks: usize,
    pub attn_heads: usize,
    pub t_train: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub s_offset: f64,
    pub shared_encoder: bool,
    pub conditional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            mpnn_layers: 3,
            attn_blocks: 2,
            attn_heads: 4,
            t_train: 64,
            t_min: 16,
            t_max: 64,
            s_offset: crate::diffusion::DEFAULT_OFFSET,
            shared_encoder: false,
            conditional: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidConfig(msg.to_string()));
        if self.hidden_dim == 0 || self.hidden_dim % 2 != 0 {
            return bad("hidden_dim must be a positive even number");
        }
        if self.attn_heads == 0 || self.hidden_dim % self.attn_heads != 0 {
            return bad("hidden_dim must be divisible by attn_heads");
        }
        if self.t_train == 0 {
            return bad("t_train must be positive");
        }
        if self.t_min == 0 || self.t_min > self.t_max || self.t_max > self.t_train {
            return bad("need 1 <= t_min <= t_max <= t_train");
        }
        if !(self.s_offset > 0.0) {
            return bad("s_offset must be positive");
        }
        Ok(())
    }
}

/// `log1p` followed by min-max scaling onto `[0, 100]`. Values outside the
/// training range extrapolate linearly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub log_min: f64,
    pub log_max: f64,
}

impl LabelStats {
    pub fn fit(labels: &[f64]) -> Result<Self, ModelError> {
        let mut log_min = f64::INFINITY;
        let mut log_max = f64::NEG_INFINITY;
        for &y in labels {
            if !(y > -1.0) || !y.is_finite() {
                return Err(ModelError::InvalidLabel(y));
            }
            let z = y.ln_1p();
            log_min = log_min.min(z);
            log_max = log_max.max(z);
        }
        if labels.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        Ok(Self { log_min, log_max })
    }

    pub fn normalize(&self, y: f64) -> Result<f64, ModelError> {
        if !(y > -1.0) || !y.is_finite() {
            return Err(ModelError::InvalidLabel(y));
        }
        let span = self.log_max - self.log_min;
        let span = if span > 0.0 { span } else { 1.0 };
        Ok(100.0 * (y.ln_1p() - self.log_min) / span)
    }
}

/// Data-derived quantities fixed at training time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    /// Number of categories per attribute channel.
    pub cardinalities: Vec<usize>,
    pub marginals: Vec<Vec<f64>>,
    pub n_max: usize,
    pub l_max: usize,
    /// Average in-degree of non-source nodes.
    pub d_in: f64,
    pub max_nodes: usize,
    pub label_stats: Option<LabelStats>,
}

impl ModelMeta {
    pub fn from_dataset(graphs: &[Dag], conditional: bool) -> Result<Self, ModelError> {
        let first = graphs.first().ok_or(ModelError::EmptyDataset)?;
        let channels = first.num_channels();
        let mut cardinalities = vec![2usize; channels];
        let mut counts: Vec<Vec<u64>> = vec![Vec::new(); channels];
        let (mut n_max, mut l_max, mut max_nodes) = (1, 1, 1);
        let (mut in_edges, mut non_source) = (0usize, 0usize);
        for d in graphs {
            if d.num_channels() != channels {
                return Err(ModelError::ShapeMismatch(format!(
                    "graphs mix {} and {} attribute channels",
                    channels,
                    d.num_channels()
                )));
            }
            for row in d.attrs() {
                for (c, &v) in row.iter().enumerate() {
                    let v = v as usize;
                    cardinalities[c] = cardinalities[c].max(v + 1);
                    if counts[c].len() <= v {
                        counts[c].resize(v + 1, 0);
                    }
                    counts[c][v] += 1;
                }
            }
            let p = layer_partition(d)?;
            l_max = l_max.max(p.num_layers());
            n_max = n_max.max(p.layers.iter().map(Vec::len).max().unwrap_or(0));
            max_nodes = max_nodes.max(d.num_nodes());
            in_edges += d.num_edges();
            non_source += d.num_nodes() - p.layers.first().map_or(0, Vec::len);
        }
        let marginals = counts
            .iter()
            .zip(&cardinalities)
            .map(|(cnt, &k)| {
                let total: u64 = cnt.iter().sum();
                (0..k)
                    .map(|v| cnt.get(v).copied().unwrap_or(0) as f64 / total.max(1) as f64)
                    .collect()
            })
            .collect();
        let d_in = if non_source == 0 {
            1.0
        } else {
            in_edges as f64 / non_source as f64
        };
        let label_stats = if conditional {
            let labels: Vec<f64> = graphs
                .iter()
                .map(|d| d.label().ok_or(ModelError::MissingLabel))
                .collect::<Result<_, _>>()?;
            Some(LabelStats::fit(&labels)?)
        } else {
            None
        };
        Ok(Self {
            cardinalities,
            marginals,
            n_max,
            l_max,
            d_in,
            max_nodes,
            label_stats,
        })
    }

    pub fn num_channels(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn onehot_width(&self) -> usize {
        self.cardinalities.iter().sum()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Encoder {
    pub input: Linear,
    pub t_proj: Linear,
    pub y_proj: Option<Linear>,
    pub count_proj: Linear,
    pub layers: Vec<BiMpnnLayer>,
    pub start: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct SizeHead {
    pub enc: Encoder,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub(crate) struct NodeHead {
    pub enc: Encoder,
    pub elem_in: Linear,
    pub t_proj: Linear,
    pub blocks: Vec<AttentionBlock>,
    pub outs: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub(crate) struct EdgeHead {
    pub enc: Encoder,
    pub src: Linear,
    pub dst: Linear,
    pub noisy: ParamId,
    /// Rows indexed by the new node's noisy in-degree, capped.
    pub degree: ParamId,
    /// Per channel, rows indexed by `class * DEGREE_BUCKETS + count` of
    /// noisy predecessors carrying that class.
    pub class_counts: Vec<ParamId>,
    pub hidden: Linear,
    pub out: Linear,
}

/// Trained (or freshly initialized) model: configuration, data-derived
/// metadata and all weights.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub meta: ModelMeta,
    pub store: ParamStore<f32>,
    pub(crate) size: SizeHead,
    pub(crate) node: NodeHead,
    pub(crate) edge: EdgeHead,
}

const INIT_KEY: u64 = 0x1417;

impl ModelParams {
    /// Builds the architecture with weights drawn from `seed`. Parameter
    /// names and order depend only on `config` and `meta`.
    pub fn init(config: ModelConfig, meta: ModelMeta, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if meta.cardinalities.is_empty() {
            return Err(ModelError::InvalidConfig("no attribute channels".into()));
        }
        if config.conditional && meta.label_stats.is_none() {
            return Err(ModelError::MissingLabel);
        }
        let mut rng = keyed_rng(seed, &[INIT_KEY]);
        let mut store = ParamStore::new();
        let h = config.hidden_dim;
        let feat = meta.onehot_width() + h + net::EXTRA_FEATURES;

        let mut encoder = |store: &mut ParamStore<f32>, name: &str| Encoder {
            input: Linear::new(store, &format!("{name}.input"), feat, h, &mut rng),
            t_proj: Linear::new(store, &format!("{name}.t_proj"), h, h, &mut rng),
            y_proj: config
                .conditional
                .then(|| Linear::new(store, &format!("{name}.y_proj"), h, h, &mut rng)),
            count_proj: Linear::new(store, &format!("{name}.count_proj"), h, h, &mut rng),
            layers: (0..config.mpnn_layers)
                .map(|i| {
                    BiMpnnLayer::new(store, &format!("{name}.mpnn{i}"), h, h, Activation::ReluNorm, &mut rng)
                })
                .collect(),
            start: embedding(store, &format!("{name}.start"), 1, h, &mut rng),
        };
        let (size_enc, node_enc, edge_enc) = if config.shared_encoder {
            let e = encoder(&mut store, "encoder");
            (e.clone(), e.clone(), e)
        } else {
            (
                encoder(&mut store, "size.encoder"),
                encoder(&mut store, "node.encoder"),
                encoder(&mut store, "edge.encoder"),
            )
        };
        let size = SizeHead {
            enc: size_enc,
            mlp: Mlp::new(&mut store, "size.mlp", (h, h, meta.n_max + 1), &mut rng),
        };
        let node = NodeHead {
            enc: node_enc,
            elem_in: Linear::new(&mut store, "node.elem_in", meta.onehot_width(), h, &mut rng),
            t_proj: Linear::new(&mut store, "node.t_proj", h, h, &mut rng),
            blocks: (0..config.attn_blocks)
                .map(|i| AttentionBlock::new(&mut store, &format!("node.attn{i}"), h, config.attn_heads, &mut rng))
                .collect(),
            outs: meta
                .cardinalities
                .iter()
                .enumerate()
                .map(|(c, &k)| Linear::new(&mut store, &format!("node.out{c}"), h, k, &mut rng))
                .collect(),
        };
        let edge = EdgeHead {
            enc: edge_enc,
            src: Linear::new(&mut store, "edge.src", h, h, &mut rng),
            dst: Linear::new(&mut store, "edge.dst", h, h, &mut rng),
            noisy: embedding(&mut store, "edge.noisy", 1, h, &mut rng),
            degree: embedding(&mut store, "edge.degree", net::DEGREE_BUCKETS, h, &mut rng),
            class_counts: meta
                .cardinalities
                .iter()
                .enumerate()
                .map(|(c, &k)| embedding(&mut store, &format!("edge.class_counts.{c}"), k * net::DEGREE_BUCKETS, h, &mut rng))
                .collect(),
            hidden: Linear::new(&mut store, "edge.hidden", h, h, &mut rng),
            out: Linear::new(&mut store, "edge.out", h, 1, &mut rng),
        };
        Ok(Self {
            config,
            meta,
            store,
            size,
            node,
            edge,
        })
    }

    /// Replaces weights by name, e.g. after reading a checkpoint. Every
    /// parameter must be supplied with its exact shape.
    pub fn load_tensors(
        &mut self,
        mut lookup: impl FnMut(&str, &[usize]) -> Option<Vec<f32>>,
    ) -> Result<(), ModelError> {
        let ids: Vec<(ParamId, String, Vec<usize>)> = self
            .store
            .iter()
            .map(|(id, name, t)| (id, name.to_string(), t.shape().to_vec()))
            .collect();
        for (id, name, shape) in ids {
            let data = lookup(&name, &shape)
                .ok_or_else(|| ModelError::ShapeMismatch(format!("missing or misshapen tensor {name}")))?;
            let t = self.store.get_mut(id);
            if data.len() != t.len() {
                return Err(ModelError::ShapeMismatch(format!("tensor {name} has wrong length")));
            }
            t.data_mut().copy_from_slice(&data);
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Noise model for attribute channel `c`.
    pub fn attr_noise(&self, c: usize) -> Result<NoiseModel, ModelError> {
        Ok(NoiseModel::cosine(
            self.config.t_train,
            self.config.s_offset,
            self.meta.marginals[c].clone(),
        )?)
    }

    /// Edge noise model for a context of `n_prev` candidate predecessors.
    pub fn edge_noise(&self, n_prev: usize) -> Result<NoiseModel, ModelError> {
        let p = crate::diffusion::edge_prior(n_prev, self.meta.d_in)?;
        Ok(NoiseModel::cosine(
            self.config.t_train,
            self.config.s_offset,
            vec![1.0 - p, p],
        )?)
    }

    /// Normalized conditioning value, enforcing the conditional contract.
    pub fn condition(&self, y: Option<f64>) -> Result<Option<f64>, ModelError> {
        match (&self.meta.label_stats, self.config.conditional) {
            (Some(stats), true) => {
                let y = y.ok_or(ModelError::MissingLabel)?;
                Ok(Some(stats.normalize(y)?))
            }
            _ => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_normalization() {
        let stats = LabelStats::fit(&[0.0, 9.0]).unwrap();
        assert_eq!(stats.normalize(0.0).unwrap(), 0.0);
        assert!((stats.normalize(9.0).unwrap() - 100.0).abs() < 1e-12);
        let beyond = stats.normalize(99.0).unwrap();
        assert!((beyond - 200.0).abs() < 1e-9);
        assert!(matches!(stats.normalize(-1.0), Err(ModelError::InvalidLabel(_))));
    }

    #[test]
    fn meta_from_dataset() {
        let a = Dag::new(3, vec![(0, 2), (1, 2)], vec![vec![0], vec![1], vec![1]], None).unwrap();
        let b = Dag::new(2, vec![(0, 1)], vec![vec![0], vec![0]], None).unwrap();
        let meta = ModelMeta::from_dataset(&[a, b], false).unwrap();
        assert_eq!(meta.cardinalities, vec![2]);
        assert_eq!(meta.marginals, vec![vec![0.6, 0.4]]);
        assert_eq!((meta.n_max, meta.l_max, meta.max_nodes), (2, 2, 3));
        assert!((meta.d_in - 1.5).abs() < 1e-12);
        assert!(ModelMeta::from_dataset(&[], false).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let odd = ModelConfig {
            hidden_dim: 30,
            attn_heads: 4,
            ..ModelConfig::default()
        };
        assert!(odd.validate().is_err());
        let sched = ModelConfig {
            t_max: 100,
            ..ModelConfig::default()
        };
        assert!(sched.validate().is_err());
    }
}
