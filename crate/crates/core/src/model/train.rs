use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dag::{layer_partition, Dag, LayerPartition, Prefix};
use crate::diffusion::corrupt;
use crate::nn::{Adam, Grads, Tape};
use crate::rng::{keyed_rng, Rng};

use super::net::check_attrs;
use super::sample::enforce_frontier;
use super::{ModelConfig, ModelError, ModelMeta, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Teacher-forced (graph, layer) examples per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Weights of the size, node and edge losses.
    pub loss_weights: [f64; 3],
    pub grad_clip: Option<f64>,
    /// Anneal the learning rate along a half cosine from `lr` toward zero
    /// over `epochs`.
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patience: 10,
            seed: 0,
            loss_weights: [1.0, 1.0, 1.0],
            grad_clip: Some(5.0),
            cosine_decay: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.patience > 0
            && self.loss_weights.iter().all(|&w| w > 0.0);
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidConfig(
                "training hyperparameters must be positive (betas in [0, 1))".into(),
            ))
        }
    }
}

/// Mean per-example losses. Components are unweighted; `total` applies
/// the configured weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub size: f64,
    pub node: f64,
    pub edge: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, other: &Self) {
        self.size += other.size;
        self.node += other.node;
        self.edge += other.edge;
        self.total += other.total;
    }

    fn scaled(mut self, k: f64) -> Self {
        self.size *= k;
        self.node *= k;
        self.edge *= k;
        self.total *= k;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: Option<LossBreakdown>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Teacher-forcing prefix length, uniform over `{0..=num_layers}`;
/// `num_layers` itself trains the stop class.
pub fn draw_teacher_layer(num_layers: usize, rng: &mut impl rand::Rng) -> usize {
    rng.gen_range(0..=num_layers)
}

struct Prepared {
    part: LayerPartition,
    y: Option<f64>,
}

const TRAIN_KEY: u64 = 0x7241;
const VAL_KEY: u64 = 0x7A1;
const SHUFFLE_KEY: u64 = 0x5AF;

fn prepare(p: &ModelParams, graphs: &[Dag]) -> Result<Vec<Prepared>, ModelError> {
    graphs
        .iter()
        .map(|d| {
            check_attrs(&p.meta, d.attrs().iter().map(Vec::as_slice))?;
            Ok(Prepared {
                part: layer_partition(d)?,
                y: p.condition(d.label())?,
            })
        })
        .collect()
}

/// One teacher-forced example: loss components and, if requested,
/// gradients.
fn example(
    p: &ModelParams,
    g: &Prepared,
    l: usize,
    weights: [f64; 3],
    rng: &mut Rng,
    with_grads: bool,
) -> Result<(LossBreakdown, Option<Grads<f32>>), ModelError> {
    let part = &g.part;
    let num_layers = part.num_layers();
    let prefix = Prefix::from_partition(part, l);
    let mut tape = Tape::new(&p.store);
    let mut out = LossBreakdown::default();

    let target = if l < num_layers { part.layers[l].len() } else { 0 };
    let logits = p.size.logits(&mut tape, p, &prefix, g.y);
    let size_loss = tape.cross_entropy(logits, &[target.min(p.meta.n_max)], 1.0);
    out.size = tape.value(size_loss).item() as f64;
    let mut total = tape.scale(size_loss, weights[0] as f32);

    if l < num_layers {
        let new_nodes = &part.layers[l];
        let clean: Vec<&Vec<u32>> = new_nodes.iter().map(|&v| &part.attrs[v]).collect();
        let t = rng.gen_range(1..=p.config.t_train);
        let channels = p.meta.num_channels();
        let mut noisy = vec![vec![0u32; channels]; clean.len()];
        for c in 0..channels {
            let z0: Vec<usize> = clean.iter().map(|row| row[c] as usize).collect();
            let zt = corrupt(&z0, t, &p.attr_noise(c)?, rng)?;
            for (row, z) in noisy.iter_mut().zip(zt) {
                row[c] = z as u32;
            }
        }
        let logits = p.node.logits(&mut tape, p, &prefix, &noisy, t, g.y);
        let mut node_loss = None;
        for (c, lg) in logits.into_iter().enumerate() {
            let targets: Vec<usize> = clean.iter().map(|row| row[c] as usize).collect();
            let ce = tape.cross_entropy(lg, &targets, 1.0 / channels as f32);
            node_loss = Some(match node_loss {
                Some(acc) => tape.add(acc, ce),
                None => ce,
            });
        }
        let node_loss = node_loss.expect("at least one channel");
        out.node = tape.value(node_loss).item() as f64;
        let weighted = tape.scale(node_loss, weights[1] as f32);
        total = tape.add(total, weighted);

        if l >= 1 {
            let n_ctx = prefix.len();
            let mut local = vec![usize::MAX; part.num_nodes()];
            for (i, &v) in prefix.nodes.iter().enumerate() {
                local[v] = i;
            }
            let slot: std::collections::HashMap<usize, usize> =
                new_nodes.iter().enumerate().map(|(j, &v)| (v, j)).collect();
            let mut truth = vec![vec![false; n_ctx]; new_nodes.len()];
            for &(u, v) in &part.edge_slices[l - 1] {
                truth[slot[&v]][local[u]] = true;
            }
            let t = rng.gen_range(1..=p.config.t_train);
            let nm = p.edge_noise(n_ctx)?;
            let mut noisy = Vec::with_capacity(truth.len());
            for row in &truth {
                let z0: Vec<usize> = row.iter().map(|&b| usize::from(b)).collect();
                let mut on: Vec<bool> = corrupt(&z0, t, &nm, rng)?.into_iter().map(|z| z == 1).collect();
                let probs: Vec<f64> = z0.iter().map(|&z| nm.forward_row(z, t)[1]).collect();
                enforce_frontier(&mut on, &probs, prefix.last_layer_start, rng)?;
                noisy.push(on);
            }
            let new_attrs: Vec<Vec<u32>> = clean.iter().map(|r| (*r).clone()).collect();
            let logits = p.edge.logits(&mut tape, p, &prefix, &new_attrs, &noisy, t, g.y);
            let targets: Vec<f32> = truth.iter().flatten().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let edge_loss = tape.bce_with_logits(logits, &targets, 1.0);
            out.edge = tape.value(edge_loss).item() as f64;
            let weighted = tape.scale(edge_loss, weights[2] as f32);
            total = tape.add(total, weighted);
        }
    }
    out.total = tape.value(total).item() as f64;
    let grads = with_grads.then(|| tape.backward(total));
    Ok((out, grads))
}

/// Learning rate for `epoch` under half-cosine annealing; the last epoch
/// still takes a nonzero step.
fn cosine_lr(lr: f64, epoch: usize, epochs: usize) -> f64 {
    0.5 * lr * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
}

/// Teacher-forced training of all three heads with Adam. Returns the
/// parameters of the epoch with the lowest validation loss (training loss
/// when `val` is empty).
pub fn train(
    train_set: &[Dag],
    val_set: &[Dag],
    model: ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainLog), ModelError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let meta = ModelMeta::from_dataset(train_set, model.conditional)?;
    let mut params = ModelParams::init(model, meta, cfg.seed)?;
    let train_data = prepare(&params, train_set)?;
    let val_data = prepare(&params, val_set)?;

    let mut adam = Adam::new(&params.store, cfg.lr);
    adam.beta1 = cfg.beta1;
    adam.beta2 = cfg.beta2;
    adam.eps = cfg.eps;
    adam.grad_clip = cfg.grad_clip;

    let mut log = TrainLog::default();
    let mut best: Option<(f64, ModelParams)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        if cfg.cosine_decay {
            adam.lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        }
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        shuffle(&mut order, &mut keyed_rng(cfg.seed, &[SHUFFLE_KEY, epoch as u64]));
        let mut epoch_loss = LossBreakdown::default();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<(LossBreakdown, Grads<f32>), ModelError>> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &gi)| {
                    let pos = (b * cfg.batch_size + k) as u64;
                    let mut rng = keyed_rng(cfg.seed, &[TRAIN_KEY, epoch as u64, pos]);
                    let g = &train_data[gi];
                    let l = draw_teacher_layer(g.part.num_layers(), &mut rng);
                    let (loss, grads) = example(&params, g, l, cfg.loss_weights, &mut rng, true)?;
                    if !loss.total.is_finite() {
                        return Err(ModelError::NonFiniteLoss { epoch, graph: gi, layer: l });
                    }
                    Ok((loss, grads.expect("requested")))
                })
                .collect();
            let mut sum = params.store.zero_grads();
            for r in results {
                let (loss, grads) = r?;
                epoch_loss.accumulate(&loss);
                sum.add_assign(&grads);
            }
            sum.scale(1.0 / batch.len() as f32);
            adam.step(&mut params.store, &sum)?;
        }
        let train_loss = epoch_loss.scaled(1.0 / train_data.len() as f64);
        let val_loss = if val_data.is_empty() {
            None
        } else {
            Some(evaluate(&params, &val_data, cfg)?)
        };
        let monitored = val_loss.map_or(train_loss.total, |v| v.total);
        log.epochs.push(EpochRecord {
            epoch,
            train: train_loss,
            val: val_loss,
        });
        if best.as_ref().map_or(true, |(b, _)| monitored < *b) {
            best = Some((monitored, params.clone()));
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    let (_, best) = best.expect("at least one epoch ran");
    Ok((best, log))
}

/// Validation loss with draws fixed per graph, so epochs are comparable.
fn evaluate(p: &ModelParams, data: &[Prepared], cfg: &TrainConfig) -> Result<LossBreakdown, ModelError> {
    let losses: Vec<LossBreakdown> = data
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let mut rng = keyed_rng(cfg.seed, &[VAL_KEY, i as u64]);
            let l = draw_teacher_layer(g.part.num_layers(), &mut rng);
            example(p, g, l, cfg.loss_weights, &mut rng, false).map(|(loss, _)| loss)
        })
        .collect::<Result<_, _>>()?;
    let mut sum = LossBreakdown::default();
    for l in &losses {
        sum.accumulate(l);
    }
    Ok(sum.scaled(1.0 / data.len() as f64))
}

fn shuffle(v: &mut [usize], rng: &mut Rng) {
    use rand::seq::SliceRandom;
    v.shuffle(rng);
}
