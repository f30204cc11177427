//! Latent preferential (LP) synthetic DAGs and their validity oracle.
//!
//! Every non-source node draws an in-degree, then picks that many
//! predecessors from earlier layers with probability inversely proportional
//! to the depth gap. The hard rule is the balance constraint on the binary
//! channel-0 attribute of the chosen predecessors, controlled by `rho`.
//! The `Multi` variant adds two derived binary channels: channel 1 copies
//! the majority value among predecessors and channel 2 the minority value.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dag::Dag;
use crate::rng::{keyed_rng, Rng};

/// Predecessor draws per in-degree before the in-degree is redrawn.
const ATTEMPTS_PER_INDEGREE: usize = 1000;
/// In-degree redraws before giving up on a node.
const INDEGREE_REDRAWS: usize = 200;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LpError {
    #[error("balance ratio undefined for zero predecessors")]
    DegenerateInput,
    #[error("invalid LP config: {0}")]
    InvalidConfig(String),
    #[error("graph {graph}: node {node} could not satisfy the constraints")]
    ExhaustedResampling { graph: usize, node: usize },
    #[error("expected {expected} attribute channels, found {found}")]
    ChannelCountMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LpVariant {
    Base,
    Multi,
}

impl LpVariant {
    pub fn num_channels(self) -> usize {
        match self {
            LpVariant::Base => 1,
            LpVariant::Multi => 3,
        }
    }
}

impl std::str::FromStr for LpVariant {
    type Err = LpError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "base" => Ok(LpVariant::Base),
            "multi" => Ok(LpVariant::Multi),
            other => Err(LpError::InvalidConfig(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpConfig {
    pub rho: f64,
    pub variant: LpVariant,
    pub count: usize,
    pub seed: u64,
    /// Inclusive range for the number of layers.
    pub layer_count_range: (usize, usize),
    /// Inclusive range for the size of each layer.
    pub layer_size_range: (usize, usize),
    /// Inclusive range for the in-degree of non-source nodes.
    pub indegree_range: (usize, usize),
    /// Bernoulli parameter per binary channel for randomly drawn values.
    pub attr_priors: Vec<f64>,
}

impl LpConfig {
    pub fn new(rho: f64, variant: LpVariant, count: usize, seed: u64) -> Self {
        Self {
            rho,
            variant,
            count,
            seed,
            layer_count_range: (2, 5),
            layer_size_range: (1, 5),
            indegree_range: (1, 4),
            attr_priors: vec![0.5; variant.num_channels()],
        }
    }

    pub fn validate(&self) -> Result<(), LpError> {
        let bad = |msg: &str| Err(LpError::InvalidConfig(msg.to_string()));
        if !(0.0..=1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1]");
        }
        for (name, (lo, hi)) in [
            ("layer_count_range", self.layer_count_range),
            ("layer_size_range", self.layer_size_range),
            ("indegree_range", self.indegree_range),
        ] {
            if lo > hi || lo == 0 {
                return bad(&format!("{name} must be a non-empty range of positive counts"));
            }
        }
        if self.attr_priors.len() != self.variant.num_channels() {
            return bad("one attribute prior per channel is required");
        }
        if self.attr_priors.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("attribute priors must lie in [0, 1]");
        }
        Ok(())
    }
}

/// `floor(|n0 - n1| / 2) / ((n0 + n1) / 2)`.
pub fn balance_ratio(n0: usize, n1: usize) -> Result<f64, LpError> {
    let total = n0 + n1;
    if total == 0 {
        return Err(LpError::DegenerateInput);
    }
    let half_gap = n0.abs_diff(n1) / 2;
    Ok(half_gap as f64 / (total as f64 / 2.0))
}

/// Generates `cfg.count` LP graphs. Graph `i` uses its own keyed stream, so
/// the output does not depend on the rayon thread count.
pub fn generate_lp(cfg: &LpConfig) -> Result<Vec<Dag>, LpError> {
    cfg.validate()?;
    (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = keyed_rng(cfg.seed, &[i as u64]);
            generate_one(cfg, i, &mut rng)
        })
        .collect()
}

fn draw_binary(p: f64, rng: &mut Rng) -> u32 {
    u32::from(rng.gen::<f64>() < p)
}

fn generate_one(cfg: &LpConfig, graph: usize, rng: &mut Rng) -> Result<Dag, LpError> {
    let (l_lo, l_hi) = cfg.layer_count_range;
    let (s_lo, s_hi) = cfg.layer_size_range;
    let num_layers = rng.gen_range(l_lo..=l_hi);
    let channels = cfg.variant.num_channels();

    let mut attrs: Vec<Vec<u32>> = Vec::new();
    let mut depth: Vec<usize> = Vec::new();
    let mut edges = Vec::new();

    let first = rng.gen_range(s_lo..=s_hi);
    for _ in 0..first {
        attrs.push((0..channels).map(|k| draw_binary(cfg.attr_priors[k], rng)).collect());
        depth.push(1);
    }

    for layer in 2..=num_layers {
        let size = rng.gen_range(s_lo..=s_hi);
        let candidates: Vec<usize> = (0..attrs.len()).collect();
        let weights: Vec<f64> = candidates
            .iter()
            .map(|&u| 1.0 / (layer - depth[u]) as f64)
            .collect();
        let mut new_rows = Vec::with_capacity(size);
        for _ in 0..size {
            let node = attrs.len() + new_rows.len();
            let preds = draw_predecessors(cfg, &attrs, &depth, &weights, layer, rng)
                .ok_or(LpError::ExhaustedResampling { graph, node })?;
            let mut row = vec![draw_binary(cfg.attr_priors[0], rng)];
            if cfg.variant == LpVariant::Multi {
                let counts1 = binary_counts(preds.iter().map(|&u| attrs[u][1]));
                let counts2 = binary_counts(preds.iter().map(|&u| attrs[u][2]));
                row.push(pick_extreme(counts1, true, rng));
                row.push(pick_extreme(counts2, false, rng));
            }
            edges.extend(preds.iter().map(|&u| (u, node)));
            new_rows.push(row);
        }
        for row in new_rows {
            attrs.push(row);
            depth.push(layer);
        }
    }
    let n = attrs.len();
    Ok(Dag::from_parts(n, edges, attrs, None))
}

/// Rejection-samples a predecessor set for a node in `layer` (1-based).
fn draw_predecessors(
    cfg: &LpConfig,
    attrs: &[Vec<u32>],
    depth: &[usize],
    weights: &[f64],
    layer: usize,
    rng: &mut Rng,
) -> Option<Vec<usize>> {
    let (d_lo, d_hi) = cfg.indegree_range;
    for _ in 0..INDEGREE_REDRAWS {
        let indegree = rng.gen_range(d_lo..=d_hi);
        if indegree > weights.len() {
            continue;
        }
        for _ in 0..ATTEMPTS_PER_INDEGREE {
            let preds = weighted_without_replacement(weights, indegree, rng);
            if !preds.iter().any(|&u| depth[u] + 1 == layer) {
                continue;
            }
            let [n0, n1] = binary_counts(preds.iter().map(|&u| attrs[u][0]));
            if balance_ratio(n0, n1).is_ok_and(|r| r <= cfg.rho) {
                let mut preds = preds;
                preds.sort_unstable();
                return Some(preds);
            }
        }
    }
    None
}

fn weighted_without_replacement(weights: &[f64], k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut remaining: Vec<f64> = weights.to_vec();
    let mut chosen = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = remaining.iter().sum();
        let mut x = rng.gen::<f64>() * total;
        let mut pick = remaining.iter().rposition(|&w| w > 0.0).unwrap_or(0);
        for (i, &w) in remaining.iter().enumerate() {
            if w > 0.0 && x < w {
                pick = i;
                break;
            }
            x -= w;
        }
        chosen.push(pick);
        remaining[pick] = 0.0;
    }
    chosen
}

fn binary_counts(values: impl Iterator<Item = u32>) -> [usize; 2] {
    let mut counts = [0usize; 2];
    for v in values {
        counts[v.min(1) as usize] += 1;
    }
    counts
}

/// Most (or least) common binary value, ties broken uniformly.
fn pick_extreme(counts: [usize; 2], most: bool, rng: &mut Rng) -> u32 {
    match counts[0].cmp(&counts[1]) {
        std::cmp::Ordering::Equal => rng.gen_range(0..2),
        std::cmp::Ordering::Greater => u32::from(!most),
        std::cmp::Ordering::Less => u32::from(most),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValidityRule {
    Balance,
    InDegree,
    Attribute,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub balance_ok: bool,
    pub attr_ok: bool,
    pub indegree_ok: bool,
    pub overall: bool,
    pub first_violation: Option<(usize, ValidityRule)>,
}

/// Checks the hard LP rules on every non-source node.
pub fn check_validity(d: &Dag, cfg: &LpConfig) -> Result<ValidityReport, LpError> {
    let expected = cfg.variant.num_channels();
    if d.num_nodes() > 0 && d.num_channels() != expected {
        return Err(LpError::ChannelCountMismatch {
            expected,
            found: d.num_channels(),
        });
    }
    let (d_lo, d_hi) = cfg.indegree_range;
    let mut report = ValidityReport {
        balance_ok: true,
        attr_ok: true,
        indegree_ok: true,
        overall: true,
        first_violation: None,
    };
    let flag = |ok: &mut bool, node: usize, rule: ValidityRule, first: &mut Option<_>| {
        *ok = false;
        first.get_or_insert((node, rule));
    };
    let attrs = d.attrs();
    for (v, preds) in d.predecessors().iter().enumerate() {
        if preds.is_empty() {
            continue;
        }
        let mut first = report.first_violation;
        let [n0, n1] = binary_counts(preds.iter().map(|&u| attrs[u][0]));
        if balance_ratio(n0, n1)? > cfg.rho {
            flag(&mut report.balance_ok, v, ValidityRule::Balance, &mut first);
        }
        if !(d_lo..=d_hi).contains(&preds.len()) {
            flag(&mut report.indegree_ok, v, ValidityRule::InDegree, &mut first);
        }
        if cfg.variant == LpVariant::Multi {
            let c1 = binary_counts(preds.iter().map(|&u| attrs[u][1]));
            let c2 = binary_counts(preds.iter().map(|&u| attrs[u][2]));
            let max1 = c1[0].max(c1[1]);
            let min2 = c2[0].min(c2[1]);
            let v1 = attrs[v][1].min(1) as usize;
            let v2 = attrs[v][2].min(1) as usize;
            if attrs[v][1] > 1 || attrs[v][2] > 1 || c1[v1] != max1 || c2[v2] != min2 {
                flag(&mut report.attr_ok, v, ValidityRule::Attribute, &mut first);
            }
        }
        report.first_violation = first;
    }
    report.overall = report.balance_ok && report.indegree_ok && report.attr_ok;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::dag_stats;

    #[test]
    fn balance_ratio_examples() {
        assert_eq!(balance_ratio(1, 1).unwrap(), 0.0);
        assert_eq!(balance_ratio(3, 1).unwrap(), 0.5);
        assert_eq!(balance_ratio(2, 0).unwrap(), 1.0);
        assert_eq!(balance_ratio(0, 0), Err(LpError::DegenerateInput));
    }

    #[test]
    fn generated_graphs_pass_their_own_oracle() {
        for rho in [0.0, 0.5, 1.0] {
            for variant in [LpVariant::Base, LpVariant::Multi] {
                let cfg = LpConfig::new(rho, variant, 100, 7);
                let graphs = generate_lp(&cfg).unwrap();
                assert_eq!(graphs.len(), 100);
                for g in &graphs {
                    let report = check_validity(g, &cfg).unwrap();
                    assert!(report.overall, "{report:?}");
                    let stats = dag_stats(g).unwrap();
                    assert!((2..=5).contains(&stats.num_layers));
                    assert!(stats.layer_sizes.iter().all(|s| (1..=5).contains(s)));
                }
            }
        }
    }

    #[test]
    fn rho_zero_keeps_counts_within_one() {
        let cfg = LpConfig::new(0.0, LpVariant::Base, 100, 7);
        for g in generate_lp(&cfg).unwrap() {
            for preds in g.predecessors().iter().filter(|p| !p.is_empty()) {
                let [n0, n1] = binary_counts(preds.iter().map(|&u| g.attrs()[u][0]));
                assert!(n0.abs_diff(n1) <= 1);
            }
        }
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let cfg = LpConfig::new(0.5, LpVariant::Multi, 50, 11);
        assert_eq!(generate_lp(&cfg).unwrap(), generate_lp(&cfg).unwrap());
    }

    #[test]
    fn balance_violation_detected() {
        // Node 4 has predecessors with channel-0 values (0, 0, 0, 1).
        let d = Dag::new(
            5,
            vec![(0, 4), (1, 4), (2, 4), (3, 4)],
            vec![vec![0], vec![0], vec![0], vec![1], vec![0]],
            None,
        )
        .unwrap();
        let strict = LpConfig::new(0.0, LpVariant::Base, 1, 0);
        let report = check_validity(&d, &strict).unwrap();
        assert!(!report.balance_ok && !report.overall);
        assert_eq!(report.first_violation, Some((4, ValidityRule::Balance)));
        let loose = LpConfig::new(0.5, LpVariant::Base, 1, 0);
        assert!(check_validity(&d, &loose).unwrap().overall);
    }

    #[test]
    fn attribute_rule_violation_detected() {
        // Channel-1 values among predecessors are {0, 0, 1}; majority is 0.
        let d = Dag::new(
            4,
            vec![(0, 3), (1, 3), (2, 3)],
            vec![
                vec![0, 0, 0],
                vec![1, 0, 1],
                vec![0, 1, 1],
                vec![0, 1, 0],
            ],
            None,
        )
        .unwrap();
        let cfg = LpConfig::new(1.0, LpVariant::Multi, 1, 0);
        let report = check_validity(&d, &cfg).unwrap();
        assert!(!report.attr_ok);
        assert!(report.balance_ok && report.indegree_ok);
        assert_eq!(report.first_violation, Some((3, ValidityRule::Attribute)));
    }

    #[test]
    fn indegree_and_channel_checks() {
        let d = Dag::new(
            6,
            (0..5).map(|u| (u, 5)).collect(),
            vec![vec![0], vec![1], vec![0], vec![1], vec![0], vec![0]],
            None,
        )
        .unwrap();
        let cfg = LpConfig::new(1.0, LpVariant::Base, 1, 0);
        let report = check_validity(&d, &cfg).unwrap();
        assert!(!report.indegree_ok && report.balance_ok);
        let multi = LpConfig::new(1.0, LpVariant::Multi, 1, 0);
        assert!(matches!(
            check_validity(&d, &multi),
            Err(LpError::ChannelCountMismatch { expected: 3, found: 1 })
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = LpConfig::new(1.5, LpVariant::Base, 1, 0);
        assert!(cfg.validate().is_err());
        cfg.rho = 1.0;
        cfg.layer_size_range = (3, 2);
        assert!(generate_lp(&cfg).is_err());
    }
}
