//! BiMPNN regressor used to compare synthetic and real labeled graphs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dag::{layer_partition, Dag};
use crate::nn::layers::{set_pool, Activation, BiMpnnLayer, GraphOperands, Linear, Mlp, PoolMode};
use crate::nn::tensor::sinusoidal_embed;
use crate::nn::{Adam, Grads, ParamStore, Tape, Tensor, Var};
use crate::rng::keyed_rng;

use super::{mae, pearson, EvalError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without a better validation score before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            layers: 3,
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            patience: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Surrogate {
    pub config: SurrogateConfig,
    pub cardinalities: Vec<usize>,
    pub label_mean: f64,
    pub label_std: f64,
    pub store: ParamStore<f32>,
    input: Linear,
    layers: Vec<BiMpnnLayer>,
    head: Mlp,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SurrogateLog {
    pub train_mse: Vec<f64>,
    /// Selection score per epoch: validation Pearson, or negative MSE when
    /// Pearson is undefined on the validation set.
    pub val_score: Vec<f64>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateEval {
    /// `None` when predictions or labels have zero variance.
    pub pearson: Option<f64>,
    pub mae: f64,
}

const SHUFFLE_KEY: u64 = 0x5C2;

fn labels_of(data: &[Dag]) -> Result<Vec<f64>, EvalError> {
    data.iter()
        .enumerate()
        .map(|(i, d)| d.label().ok_or(EvalError::MissingLabel(i)))
        .collect()
}

impl Surrogate {
    fn init(config: SurrogateConfig, cardinalities: Vec<usize>, label_mean: f64, label_std: f64) -> Self {
        let mut rng = keyed_rng(config.seed, &[0x5C1]);
        let mut store = ParamStore::new();
        let h = config.hidden_dim;
        let width = cardinalities.iter().sum::<usize>() + h + 2;
        let input = Linear::new(&mut store, "input", width, h, &mut rng);
        let layers = (0..config.layers)
            .map(|i| BiMpnnLayer::new(&mut store, &format!("mpnn.{i}"), h, h, Activation::ReluNorm, &mut rng))
            .collect();
        let head = Mlp::new(&mut store, "head", (2 * h, h, 1), &mut rng);
        Self {
            config,
            cardinalities,
            label_mean,
            label_std,
            store,
            input,
            layers,
            head,
        }
    }

    /// Node inputs: attribute one-hots, sinusoidal depth, log in/out degree.
    fn features(&self, d: &Dag) -> Result<Tensor<f32>, EvalError> {
        d.check_cardinalities(&self.cardinalities)?;
        let h = self.config.hidden_dim;
        let onehot: usize = self.cardinalities.iter().sum();
        let width = onehot + h + 2;
        let depth = layer_partition(d)?.layer_of();
        let mut feats = vec![0f32; d.num_nodes() * width];
        for (v, row) in d.attrs().iter().enumerate() {
            let dst = &mut feats[v * width..(v + 1) * width];
            let mut off = 0;
            for (c, &x) in row.iter().enumerate() {
                dst[off + x as usize] = 1.0;
                off += self.cardinalities[c];
            }
            for (k, e) in sinusoidal_embed(depth[v] as f64, h).into_iter().enumerate() {
                dst[onehot + k] = e as f32;
            }
        }
        for (v, deg) in d.in_degrees().into_iter().enumerate() {
            feats[v * width + width - 2] = (deg as f32).ln_1p();
        }
        let mut out_deg = vec![0usize; d.num_nodes()];
        for &(u, _) in d.edges() {
            out_deg[u] += 1;
        }
        for (v, deg) in out_deg.into_iter().enumerate() {
            feats[v * width + width - 1] = (deg as f32).ln_1p();
        }
        Ok(Tensor::matrix(d.num_nodes(), width, feats))
    }

    /// Normalized prediction; graph representation is `mean | sum` pooling.
    fn forward(&self, tape: &mut Tape<'_>, d: &Dag, x: Tensor<f32>) -> Var {
        let h = self.config.hidden_dim;
        let pooled = if d.num_nodes() == 0 {
            tape.constant(Tensor::zeros(1, 2 * h))
        } else {
            let x = tape.constant(x);
            let mut z = self.input.forward(tape, x);
            let ops = GraphOperands::new(tape, d.num_nodes(), d.edges());
            for layer in &self.layers {
                z = layer.forward(tape, &ops, z);
            }
            let mean = set_pool(tape, z, PoolMode::Mean);
            let sum = set_pool(tape, z, PoolMode::Sum);
            tape.concat_cols(&[mean, sum])
        };
        self.head.forward(tape, pooled)
    }

    fn predict_normalized(&self, d: &Dag) -> Result<f64, EvalError> {
        let x = self.features(d)?;
        let mut tape = Tape::new(&self.store);
        let out = self.forward(&mut tape, d, x);
        Ok(tape.value(out).item() as f64)
    }

    /// Predictions in label units.
    pub fn predict(&self, graphs: &[Dag]) -> Result<Vec<f64>, EvalError> {
        graphs
            .par_iter()
            .map(|d| self.predict_normalized(d).map(|z| z * self.label_std + self.label_mean))
            .collect()
    }

    fn loss_and_grads(&self, d: &Dag, target: f32) -> Result<(f64, Grads<f32>), EvalError> {
        let x = self.features(d)?;
        let mut tape = Tape::new(&self.store);
        let out = self.forward(&mut tape, d, x);
        let loss = tape.mse(out, &[target], 1.0);
        Ok((tape.value(loss).item() as f64, tape.backward(loss)))
    }
}

/// MSE on z-scored labels with Adam; keeps the epoch with the best
/// validation Pearson correlation.
pub fn train_surrogate(
    train: &[Dag],
    val: &[Dag],
    config: &SurrogateConfig,
) -> Result<(Surrogate, SurrogateLog), EvalError> {
    if train.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if config.hidden_dim == 0 || config.hidden_dim % 2 != 0 || config.batch_size == 0 {
        return Err(EvalError::InvalidArgument(
            "hidden_dim must be positive and even, batch_size positive".into(),
        ));
    }
    let ys = labels_of(train)?;
    let val_ys = labels_of(val)?;
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    let channels = train[0].num_channels();
    let mut cards = vec![1usize; channels];
    for d in train {
        if d.num_channels() != channels {
            return Err(EvalError::InvalidArgument("graphs disagree on channel count".into()));
        }
        for row in d.attrs() {
            for (c, &x) in row.iter().enumerate() {
                cards[c] = cards[c].max(x as usize + 1);
            }
        }
    }
    for d in val {
        for row in d.attrs() {
            for (c, &x) in row.iter().enumerate().take(channels) {
                cards[c] = cards[c].max(x as usize + 1);
            }
        }
    }
    let mut model = Surrogate::init(config.clone(), cards, mean, std);
    let targets: Vec<f32> = ys.iter().map(|y| ((y - mean) / std) as f32).collect();
    let mut adam = Adam::new(&model.store, config.lr);
    let mut log = SurrogateLog::default();
    let mut best: Option<(f64, ParamStore<f32>)> = None;
    let mut since_best = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut keyed_rng(config.seed, &[SHUFFLE_KEY, epoch as u64]));
        }
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<Result<(f64, Grads<f32>), EvalError>> = batch
                .par_iter()
                .map(|&i| model.loss_and_grads(&train[i], targets[i]))
                .collect();
            let mut sum = model.store.zero_grads();
            for r in results {
                let (loss, grads) = r?;
                total += loss;
                sum.add_assign(&grads);
            }
            sum.scale(1.0 / batch.len() as f32);
            adam.step(&mut model.store, &sum)?;
        }
        log.train_mse.push(total / n);
        let score = if val.is_empty() {
            -total / n
        } else {
            let pred = model.predict(val)?;
            match pearson(&pred, &val_ys) {
                Ok(r) => r,
                Err(EvalError::ZeroVariance) => {
                    -pred.iter().zip(&val_ys).map(|(p, y)| ((p - y) / std).powi(2)).sum::<f64>() / val.len() as f64
                }
                Err(e) => return Err(e),
            }
        };
        log.val_score.push(score);
        if best.as_ref().map_or(true, |(b, _)| score > *b) {
            best = Some((score, model.store.clone()));
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    Ok((model, log))
}

/// Pearson and MAE (label units) of the regressor on `test`.
pub fn eval_surrogate(model: &Surrogate, test: &[Dag]) -> Result<SurrogateEval, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let ys = labels_of(test)?;
    let pred = model.predict(test)?;
    let mae = mae(&pred, &ys)?;
    let pearson = match pearson(&pred, &ys) {
        Ok(r) => Some(r),
        Err(EvalError::ZeroVariance) => None,
        Err(e) => return Err(e),
    };
    Ok(SurrogateEval { pearson, mae })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lp::{generate_lp, LpConfig, LpVariant};

    fn sized(count: usize, seed: u64) -> Vec<Dag> {
        generate_lp(&LpConfig::new(1.0, LpVariant::Base, count, seed))
            .unwrap()
            .into_iter()
            .map(|d| {
                let y = d.num_nodes() as f64;
                d.with_label(Some(y))
            })
            .collect()
    }

    fn quick() -> SurrogateConfig {
        SurrogateConfig {
            hidden_dim: 16,
            layers: 2,
            epochs: 40,
            batch_size: 16,
            lr: 3e-3,
            patience: 40,
            seed: 1,
        }
    }

    #[test]
    fn learns_node_count() {
        let (model, _) = train_surrogate(&sized(300, 1), &sized(60, 2), &quick()).unwrap();
        let ev = eval_surrogate(&model, &sized(100, 3)).unwrap();
        assert!(ev.pearson.unwrap() >= 0.9, "{ev:?}");
    }

    #[test]
    fn constant_labels_are_fit() {
        let data: Vec<Dag> = sized(60, 4).into_iter().map(|d| d.with_label(Some(7.5))).collect();
        let (model, _) = train_surrogate(&data, &data[..10], &quick()).unwrap();
        let ev = eval_surrogate(&model, &data[..20]).unwrap();
        assert!(ev.mae < 0.5, "{ev:?}");
    }

    #[test]
    fn deterministic_given_seed() {
        let data = sized(40, 5);
        let cfg = SurrogateConfig { epochs: 3, ..quick() };
        let (a, la) = train_surrogate(&data, &data[..8], &cfg).unwrap();
        let (b, lb) = train_surrogate(&data, &data[..8], &cfg).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.predict(&data).unwrap(), b.predict(&data).unwrap());
    }

    #[test]
    fn missing_labels_are_rejected() {
        let data = generate_lp(&LpConfig::new(1.0, LpVariant::Base, 3, 0)).unwrap();
        assert!(matches!(train_surrogate(&data, &[], &quick()), Err(EvalError::MissingLabel(0))));
        assert!(matches!(train_surrogate(&[], &[], &quick()), Err(EvalError::EmptyInput)));
    }
}
