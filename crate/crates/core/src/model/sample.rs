use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dag::{Dag, Prefix};
use crate::diffusion::{
    denoise_steps_for_layer, enforce_min_indegree, sample_categorical, strided_timesteps, DenoiseSchedule,
    DiffusionError,
};
use crate::rng::{keyed_rng, Rng};

use super::net::{edge_probs, node_probs, size_probs};
use super::{ModelError, ModelParams};

/// Per-layer denoising budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    /// `T(l)` rises linearly from `t_min` at the first layer to `t_max` at
    /// the deepest training layer.
    Linear { t_min: usize, t_max: usize },
    Constant(usize),
}

impl Schedule {
    pub fn resolve(self, l_max: usize) -> DenoiseSchedule {
        match self {
            Schedule::Linear { t_min, t_max } => DenoiseSchedule { t_min, t_max, l_max },
            Schedule::Constant(t) => DenoiseSchedule::constant(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleConfig {
    pub count: usize,
    pub schedule: Schedule,
    /// Defaults to four times the deepest training graph.
    pub l_cap: Option<usize>,
    /// Defaults to four times the largest training graph.
    pub n_cap: Option<usize>,
    /// One label per sample for conditional models.
    pub labels: Option<Vec<f64>>,
    pub seed: u64,
}

/// Why a sample ended other than through the stop class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleFlag {
    LayerCap,
    NodeCap,
    /// The first layer kept drawing size 0; the graph is empty.
    EmptyGraph,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    /// Denoising steps run for each emitted layer.
    pub steps_per_layer: Vec<usize>,
    /// `T(l)` of the schedule for each emitted layer.
    pub scheduled_per_layer: Vec<usize>,
    pub wall_seconds: f64,
    pub flag: Option<SampleFlag>,
}

impl SampleStats {
    pub fn layers(&self) -> usize {
        self.steps_per_layer.len()
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_layer.iter().sum()
    }

    pub fn scheduled_steps(&self) -> usize {
        self.scheduled_per_layer.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledDag {
    pub dag: Dag,
    pub stats: SampleStats,
}

const SAMPLE_KEY: u64 = 0x5A3;
const FIRST_LAYER_RETRIES: usize = 100;

/// Switches on one frontier candidate (local index `>= frontier`) when none
/// is selected, weighted by `probs`. This implies a minimum in-degree of
/// one and keeps the new node exactly one layer below the frontier.
pub(crate) fn enforce_frontier(
    on: &mut [bool],
    probs: &[f64],
    frontier: usize,
    rng: &mut Rng,
) -> Result<(), DiffusionError> {
    let fixed = enforce_min_indegree(&probs[frontier..], on[frontier..].to_vec(), rng)?;
    on[frontier..].copy_from_slice(&fixed);
    Ok(())
}

/// Autoregressive layerwise generation.
pub fn sample(p: &ModelParams, cfg: &SampleConfig) -> Result<Vec<SampledDag>, ModelError> {
    let ds = cfg.schedule.resolve(p.meta.l_max);
    if ds.t_min == 0 || ds.t_min > ds.t_max || ds.t_max > p.config.t_train {
        return Err(ModelError::InvalidConfig(format!(
            "schedule needs 1 <= t_min <= t_max <= t_train = {}",
            p.config.t_train
        )));
    }
    let l_cap = cfg.l_cap.unwrap_or(4 * p.meta.l_max);
    let n_cap = cfg.n_cap.unwrap_or(4 * p.meta.max_nodes);
    if l_cap == 0 || n_cap == 0 {
        return Err(ModelError::InvalidConfig("caps must be positive".into()));
    }
    let labels: Vec<Option<f64>> = match (&cfg.labels, p.config.conditional) {
        (Some(ys), true) => {
            if ys.len() != cfg.count {
                return Err(ModelError::ShapeMismatch(format!(
                    "{} labels for {} samples",
                    ys.len(),
                    cfg.count
                )));
            }
            ys.iter().map(|&y| Some(y)).collect()
        }
        (None, true) => return Err(ModelError::MissingLabel),
        (_, false) => vec![None; cfg.count],
    };
    let conds: Vec<Option<f64>> = labels.iter().map(|&y| p.condition(y)).collect::<Result<_, _>>()?;
    (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = keyed_rng(cfg.seed, &[SAMPLE_KEY, i as u64]);
            sample_one(p, &ds, l_cap, n_cap, labels[i], conds[i], &mut rng)
        })
        .collect()
}

fn sample_one(
    p: &ModelParams,
    ds: &DenoiseSchedule,
    l_cap: usize,
    n_cap: usize,
    label: Option<f64>,
    y: Option<f64>,
    rng: &mut Rng,
) -> Result<SampledDag, ModelError> {
    let start = Instant::now();
    let mut prefix = Prefix::empty();
    let mut stats = SampleStats {
        steps_per_layer: Vec::new(),
        scheduled_per_layer: Vec::new(),
        wall_seconds: 0.0,
        flag: None,
    };
    loop {
        let l = prefix.num_layers;
        if l >= l_cap {
            stats.flag = Some(SampleFlag::LayerCap);
            break;
        }
        let probs = size_probs(p, &prefix, y);
        let mut n = sample_categorical(&probs, rng);
        if l == 0 {
            let mut tries = 1;
            while n == 0 && tries < FIRST_LAYER_RETRIES {
                n = sample_categorical(&probs, rng);
                tries += 1;
            }
            if n == 0 {
                stats.flag = Some(SampleFlag::EmptyGraph);
                break;
            }
        }
        if n == 0 {
            break;
        }
        if prefix.len() + n > n_cap {
            stats.flag = Some(SampleFlag::NodeCap);
            break;
        }
        let budget = denoise_steps_for_layer(l, ds);
        let timesteps = strided_timesteps(p.config.t_train, budget);
        let attrs = sample_attrs(p, &prefix, n, &timesteps, y, rng)?;
        let cross = if l >= 1 {
            sample_edges(p, &prefix, &attrs, &timesteps, y, rng)?
        } else {
            Vec::new()
        };
        stats.steps_per_layer.push(timesteps.len() - 1);
        stats.scheduled_per_layer.push(budget);
        prefix.push_layer(attrs, &cross);
    }
    stats.wall_seconds = start.elapsed().as_secs_f64();
    Ok(SampledDag {
        dag: prefix.to_dag(label),
        stats,
    })
}

fn sample_attrs(
    p: &ModelParams,
    prefix: &Prefix,
    n: usize,
    timesteps: &[usize],
    y: Option<f64>,
    rng: &mut Rng,
) -> Result<Vec<Vec<u32>>, ModelError> {
    let channels = p.meta.num_channels();
    let noise: Vec<_> = (0..channels).map(|c| p.attr_noise(c)).collect::<Result<_, _>>()?;
    let mut z: Vec<Vec<u32>> = (0..n)
        .map(|_| {
            (0..channels)
                .map(|c| sample_categorical(noise[c].marginal(), rng) as u32)
                .collect()
        })
        .collect();
    for w in timesteps.windows(2) {
        let (from, to) = (w[0], w[1]);
        let z0_hat = node_probs(p, prefix, &z, from, y);
        for (row, probs) in z.iter_mut().zip(&z0_hat) {
            for c in 0..channels {
                let post = noise[c].posterior_between(row[c] as usize, &probs[c], from, to)?;
                row[c] = sample_categorical(&post, rng) as u32;
            }
        }
    }
    Ok(z)
}

fn sample_edges(
    p: &ModelParams,
    prefix: &Prefix,
    new_attrs: &[Vec<u32>],
    timesteps: &[usize],
    y: Option<f64>,
    rng: &mut Rng,
) -> Result<Vec<(usize, usize)>, ModelError> {
    let n_ctx = prefix.len();
    let frontier = prefix.last_layer_start;
    let nm = p.edge_noise(n_ctx)?;
    let prior = nm.marginal().to_vec();
    let mut z: Vec<Vec<bool>> = Vec::with_capacity(new_attrs.len());
    for _ in new_attrs {
        let mut on: Vec<bool> = (0..n_ctx).map(|_| sample_categorical(&prior, rng) == 1).collect();
        enforce_frontier(&mut on, &vec![prior[1]; n_ctx], frontier, rng)?;
        z.push(on);
    }
    for w in timesteps.windows(2) {
        let (from, to) = (w[0], w[1]);
        let q = edge_probs(p, prefix, new_attrs, &z, from, y);
        for (row, qrow) in z.iter_mut().zip(&q) {
            let mut weights = Vec::with_capacity(n_ctx);
            for (on, &qu) in row.iter_mut().zip(qrow) {
                let post = nm.posterior_between(usize::from(*on), &[1.0 - qu, qu], from, to)?;
                *on = sample_categorical(&post, rng) == 1;
                weights.push(post[1]);
            }
            enforce_frontier(row, &weights, frontier, rng)?;
        }
    }
    Ok(z.iter()
        .enumerate()
        .flat_map(|(j, row)| row.iter().enumerate().filter(|(_, &on)| on).map(move |(u, _)| (u, j)))
        .collect())
}
