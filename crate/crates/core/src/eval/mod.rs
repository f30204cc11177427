//! Distribution metrics, validity rates and the surrogate-model protocol.
//!
//! MMD values depend on the kernel bandwidth, which is chosen here by the
//! median heuristic. Absolute numbers are only comparable within one
//! artifact run, not with externally reported tables.

pub mod surrogate;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dag::{layer_partition, Dag, DagError};
use crate::lp::{check_validity, LpConfig, LpError};

pub use surrogate::{eval_surrogate, train_surrogate, Surrogate, SurrogateConfig, SurrogateEval, SurrogateLog};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    EmptyInput,
    #[error("too few samples: {have} for {need}")]
    TooFewSamples { have: usize, need: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("graph {0} has no label")]
    MissingLabel(usize),
    #[error("zero variance; Pearson correlation undefined")]
    ZeroVariance,
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
}

/// 1-Wasserstein distance between two empirical distributions on the line.
///
/// Equal lengths use the sorted coupling; otherwise the quantile functions
/// are integrated over `[0, 1]`.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        let sum: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        return Ok(sum / a.len() as f64);
    }
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut q = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        total += (next - q) * (a[i] - b[j]).abs();
        q = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    Ok(total)
}

/// Normalized histogram over the integers `0..len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub mass: Vec<f64>,
}

impl Histogram {
    pub fn from_counts(counts: &[f64]) -> Result<Self, EvalError> {
        let total: f64 = counts.iter().sum();
        if counts.is_empty() || counts.iter().any(|&c| c < 0.0) || total <= 0.0 {
            return Err(EvalError::InvalidArgument("histogram needs nonnegative counts with positive total".into()));
        }
        Ok(Self {
            mass: counts.iter().map(|c| c / total).collect(),
        })
    }

    pub fn from_values(values: &[usize]) -> Result<Self, EvalError> {
        let len = values.iter().max().map_or(0, |&m| m + 1);
        let mut counts = vec![0.0; len];
        for &v in values {
            counts[v] += 1.0;
        }
        Self::from_counts(&counts)
    }
}

/// Earth mover's distance between histograms on the integer line.
pub fn emd(a: &Histogram, b: &Histogram) -> f64 {
    let len = a.mass.len().max(b.mass.len());
    let (mut ca, mut cb, mut total) = (0.0, 0.0, 0.0);
    for k in 0..len {
        ca += a.mass.get(k).copied().unwrap_or(0.0);
        cb += b.mass.get(k).copied().unwrap_or(0.0);
        total += (ca - cb).abs();
    }
    total
}

fn mean_kernel(a: &[Histogram], b: &[Histogram], sigma: f64) -> f64 {
    let denom = 2.0 * sigma * sigma;
    let sum: f64 = a
        .par_iter()
        .map(|x| b.iter().map(|y| (-emd(x, y).powi(2) / denom).exp()).sum::<f64>())
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    sum / (a.len() * b.len()) as f64
}

/// Squared MMD with the Gaussian-EMD kernel, clamped at zero.
pub fn mmd_squared(a: &[Histogram], b: &[Histogram], sigma: f64) -> Result<f64, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if !(sigma > 0.0) {
        return Err(EvalError::InvalidArgument(format!("bandwidth {sigma} must be positive")));
    }
    let v = mean_kernel(a, a, sigma) + mean_kernel(b, b, sigma) - 2.0 * mean_kernel(a, b, sigma);
    Ok(v.max(0.0))
}

/// `sqrt(max(MMD^2, 0))`; this is the value reported in metric tables.
pub fn mmd(a: &[Histogram], b: &[Histogram], sigma: f64) -> Result<f64, EvalError> {
    mmd_squared(a, b, sigma).map(f64::sqrt)
}

/// Median pairwise EMD within `reference`; 1.0 when that is zero or there
/// are fewer than two histograms.
pub fn median_bandwidth(reference: &[Histogram]) -> f64 {
    let mut d: Vec<f64> = (0..reference.len())
        .into_par_iter()
        .flat_map_iter(|i| (i + 1..reference.len()).map(move |j| (i, j)))
        .map(|(i, j)| emd(&reference[i], &reference[j]))
        .collect();
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let median = if d.len() % 2 == 0 { 0.5 * (d[mid - 1] + d[mid]) } else { d[mid] };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

pub fn layer_count(d: &Dag) -> Result<usize, EvalError> {
    Ok(layer_partition(d)?.num_layers())
}

/// Histogram of `|V(l)|` over the layers of one graph. Empty graphs get a
/// point mass at zero.
pub fn layer_size_histogram(d: &Dag) -> Result<Histogram, EvalError> {
    let part = layer_partition(d)?;
    let sizes: Vec<usize> = part.layers.iter().map(Vec::len).collect();
    if sizes.is_empty() {
        return Histogram::from_values(&[0]);
    }
    Histogram::from_values(&sizes)
}

/// Per-channel attribute-value histograms, each weighted `1/K`, laid end to
/// end. `cardinalities` fixes every channel's width.
pub fn attribute_histogram(d: &Dag, cardinalities: &[usize]) -> Result<Histogram, EvalError> {
    d.check_cardinalities(cardinalities)?;
    let width: usize = cardinalities.iter().sum();
    let mut counts = vec![0.0; width.max(1)];
    if d.num_nodes() == 0 || cardinalities.is_empty() {
        counts[0] = 1.0;
        return Histogram::from_counts(&counts);
    }
    let share = 1.0 / (cardinalities.len() * d.num_nodes()) as f64;
    for row in d.attrs() {
        let mut off = 0;
        for (c, &k) in cardinalities.iter().enumerate() {
            counts[off + row[c] as usize] += share;
            off += k;
        }
    }
    Histogram::from_counts(&counts)
}

/// Fractions of graphs passing each LP rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidityBreakdown {
    pub balance: f64,
    pub attribute: f64,
    pub indegree: f64,
    pub full: f64,
    pub count: usize,
}

pub fn validity_rate(graphs: &[Dag], cfg: &LpConfig) -> Result<ValidityBreakdown, EvalError> {
    if graphs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let reports = graphs
        .par_iter()
        .map(|d| check_validity(d, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let frac = |f: &dyn Fn(&crate::lp::ValidityReport) -> bool| {
        reports.iter().filter(|r| f(r)).count() as f64 / reports.len() as f64
    };
    Ok(ValidityBreakdown {
        balance: frac(&|r| r.balance_ok),
        attribute: frac(&|r| r.attr_ok),
        indegree: frac(&|r| r.indegree_ok),
        full: frac(&|r| r.overall),
        count: graphs.len(),
    })
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    if x.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if x.len() != y.len() {
        return Err(EvalError::InvalidArgument(format!("lengths {} and {}", x.len(), y.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64, EvalError> {
    if pred.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if pred.len() != target.len() {
        return Err(EvalError::InvalidArgument(format!("lengths {} and {}", pred.len(), target.len())));
    }
    Ok(pred.iter().zip(target).map(|(p, y)| (p - y).abs()).sum::<f64>() / pred.len() as f64)
}

/// Generated-vs-real comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub validity: Option<ValidityBreakdown>,
    pub w1_layers: f64,
    pub mmd_layer_size: f64,
    pub mmd_attribute: Option<f64>,
    /// Bandwidths from the median heuristic on the real set.
    pub sigma_layer_size: f64,
    pub sigma_attribute: Option<f64>,
    pub pearson: Option<f64>,
    pub mae: Option<f64>,
}

/// W1 over layer counts, MMD over layer-size histograms and, when
/// `cardinalities` is given, MMD over attribute histograms. MMD entries are
/// square roots of the clamped MMD^2.
pub fn compare(
    real: &[Dag],
    generated: &[Dag],
    lp: Option<&LpConfig>,
    cardinalities: Option<&[usize]>,
) -> Result<MetricsReport, EvalError> {
    if real.is_empty() || generated.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let counts = |set: &[Dag]| -> Result<Vec<f64>, EvalError> {
        set.iter().map(|d| layer_count(d).map(|l| l as f64)).collect()
    };
    let w1 = wasserstein1(&counts(real)?, &counts(generated)?)?;
    let sizes = |set: &[Dag]| -> Result<Vec<Histogram>, EvalError> { set.par_iter().map(layer_size_histogram).collect() };
    let (hr, hg) = (sizes(real)?, sizes(generated)?);
    let sigma = median_bandwidth(&hr);
    let mmd_sizes = mmd(&hr, &hg, sigma)?;
    let (mmd_attribute, sigma_attribute) = match cardinalities {
        Some(cards) => {
            let attrs = |set: &[Dag]| -> Result<Vec<Histogram>, EvalError> {
                set.par_iter().map(|d| attribute_histogram(d, cards)).collect()
            };
            let (ar, ag) = (attrs(real)?, attrs(generated)?);
            let s = median_bandwidth(&ar);
            (Some(mmd(&ar, &ag, s)?), Some(s))
        }
        None => (None, None),
    };
    let validity = lp.map(|cfg| validity_rate(generated, cfg)).transpose()?;
    Ok(MetricsReport {
        validity,
        w1_layers: w1,
        mmd_layer_size: mmd_sizes,
        mmd_attribute,
        sigma_layer_size: sigma,
        sigma_attribute,
        pearson: None,
        mae: None,
    })
}

/// Sorts by label (ties by original index), cuts into `k` blocks whose
/// sizes differ by at most one, and returns `(dev, held)` where `held` is
/// block `held` (1-based).
pub fn quantile_split(data: &[Dag], k: usize, held: usize) -> Result<(Vec<Dag>, Vec<Dag>), EvalError> {
    if k < 2 || held == 0 || held > k {
        return Err(EvalError::InvalidArgument(format!("need k >= 2 and 1 <= held <= k, got k={k}, held={held}")));
    }
    if data.len() < k {
        return Err(EvalError::TooFewSamples { have: data.len(), need: k });
    }
    let labels: Vec<f64> = data
        .iter()
        .enumerate()
        .map(|(i, d)| d.label().ok_or(EvalError::MissingLabel(i)))
        .collect::<Result<_, _>>()?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| labels[a].total_cmp(&labels[b]).then(a.cmp(&b)));
    let n = data.len();
    let (lo, hi) = ((held - 1) * n / k, held * n / k);
    let mut dev = Vec::with_capacity(n - (hi - lo));
    let mut out = Vec::with_capacity(hi - lo);
    for (rank, &i) in order.iter().enumerate() {
        if (lo..hi).contains(&rank) {
            out.push(data[i].clone());
        } else {
            dev.push(data[i].clone());
        }
    }
    Ok((dev, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lp::LpVariant;

    fn labeled(ys: &[f64]) -> Vec<Dag> {
        ys.iter()
            .map(|&y| Dag::new(1, vec![], vec![vec![0]], Some(y)).unwrap())
            .collect()
    }

    #[test]
    fn w1_examples() {
        assert_eq!(wasserstein1(&[2.0, 3.0, 4.0], &[4.0, 3.0, 2.0]).unwrap(), 0.0);
        assert_eq!(wasserstein1(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 2.0);
        assert!(matches!(wasserstein1(&[], &[1.0]), Err(EvalError::EmptyInput)));
    }

    #[test]
    fn w1_unequal_lengths_uses_quantiles() {
        // Quantile functions: a = 0 on [0,1]; b = 0 on [0,1/2], 2 on (1/2,1].
        assert!((wasserstein1(&[0.0], &[0.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        // Replicating samples leaves the distribution unchanged.
        let a = [1.0, 4.0, 2.0];
        let b = [0.0, 3.0];
        let a2 = [1.0, 1.0, 4.0, 4.0, 2.0, 2.0];
        let b3 = [0.0, 0.0, 0.0, 3.0, 3.0, 3.0];
        let d = wasserstein1(&a, &b).unwrap();
        assert!((d - wasserstein1(&a2, &b3).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn mmd_singletons_and_identity() {
        let h1 = Histogram::from_values(&[1, 1, 2]).unwrap();
        let h2 = Histogram::from_values(&[3]).unwrap();
        let d = emd(&h1, &h2);
        assert!((d - (2.0 / 3.0 * 2.0 + 1.0 / 3.0)).abs() < 1e-12);
        let sigma = 0.7;
        let expect = 2.0 - 2.0 * (-d * d / (2.0 * sigma * sigma)).exp();
        assert!((mmd_squared(&[h1.clone()], &[h2.clone()], sigma).unwrap() - expect).abs() < 1e-12);
        let set = vec![h1.clone(), h2.clone()];
        assert!(mmd_squared(&set, &set, sigma).unwrap() < 1e-12);
        assert!(mmd_squared(&[h1], &[h2], 1e6).unwrap() < 1e-9);
    }

    #[test]
    fn bandwidth_falls_back_to_one() {
        let h = Histogram::from_values(&[2]).unwrap();
        assert_eq!(median_bandwidth(&[h.clone()]), 1.0);
        assert_eq!(median_bandwidth(&[h.clone(), h]), 1.0);
    }

    #[test]
    fn pearson_and_mae_identities() {
        let y = [1.0, 2.0, 4.0, 7.0];
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        let shift: Vec<f64> = y.iter().map(|v| v + 5.0).collect();
        assert!((pearson(&y, &y).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&neg, &y).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson(&shift, &y).unwrap() - 1.0).abs() < 1e-12);
        assert!((mae(&shift, &y).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(mae(&y, &y).unwrap(), 0.0);
        assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(EvalError::ZeroVariance)));
    }

    #[test]
    fn quantile_split_examples() {
        let data = labeled(&[5.0, 1.0, 9.0, 3.0, 7.0, 2.0, 8.0, 4.0, 6.0, 10.0]);
        let (dev, held) = quantile_split(&data, 5, 5).unwrap();
        let mut ys: Vec<f64> = held.iter().map(|d| d.label().unwrap()).collect();
        ys.sort_by(f64::total_cmp);
        assert_eq!(ys, vec![9.0, 10.0]);
        assert_eq!(dev.len(), 8);
        let (_, held) = quantile_split(&data, 5, 1).unwrap();
        let mut ys: Vec<f64> = held.iter().map(|d| d.label().unwrap()).collect();
        ys.sort_by(f64::total_cmp);
        assert_eq!(ys, vec![1.0, 2.0]);
        let small = labeled(&[3.0, 1.0, 4.0, 2.0]);
        let (dev, held) = quantile_split(&small, 2, 1).unwrap();
        assert_eq!(held.iter().map(|d| d.label().unwrap()).collect::<Vec<_>>(), vec![1.0, 2.0]);
        assert_eq!(dev.iter().map(|d| d.label().unwrap()).collect::<Vec<_>>(), vec![3.0, 4.0]);
        assert!(matches!(quantile_split(&small, 5, 1), Err(EvalError::TooFewSamples { .. })));
        assert!(matches!(quantile_split(&small, 2, 3), Err(EvalError::InvalidArgument(_))));
    }

    #[test]
    fn validity_rate_half() {
        let cfg = LpConfig::new(0.0, LpVariant::Base, 1, 0);
        // Node 3 has predecessors with values (0, 0, 0): ratio 1 > 0.
        let bad = Dag::new(
            4,
            vec![(0, 3), (1, 3), (2, 3)],
            vec![vec![0], vec![0], vec![0], vec![1]],
            None,
        )
        .unwrap();
        let good = Dag::new(3, vec![(0, 2), (1, 2)], vec![vec![0], vec![1], vec![0]], None).unwrap();
        let v = validity_rate(&[bad, good], &cfg).unwrap();
        assert_eq!(v.full, 0.5);
        assert_eq!(v.balance, 0.5);
        assert_eq!(v.indegree, 1.0);
        assert!(matches!(validity_rate(&[], &cfg), Err(EvalError::EmptyInput)));
    }
}
