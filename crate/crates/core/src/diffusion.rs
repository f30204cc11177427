//! Discrete (D3PM-style) diffusion kernels over categorical channels.
//!
//! The forward process for one channel with `C` categories and marginal
//! prior `m` uses
//!
//! ```text
//! Qbar(t) = abar(t) * I + (1 - abar(t)) * 1 m^T
//! abar(t) = cos^2( pi/2 * (t/T + s) / (1 + s) )
//! ```
//!
//! and the per-step matrix `Q(t)` has the same form with
//! `alpha(t) = abar(t) / abar(t - 1)`. Because the family is closed under
//! products, any jump `s -> t` (s < t) is again of this form with ratio
//! `abar(t) / abar(s)`; strided sampling uses that.
//!
//! Edges are the `C = 2` case with `m = [1 - p, p]`, `p` the edge prior.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default cosine-schedule offset.
pub const DEFAULT_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffusionError {
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("singular schedule: abar({0}) is zero")]
    SingularSchedule(usize),
    #[error("posterior underflow (unnormalized mass {0:e})")]
    NumericalUnderflow(f64),
    #[error("no candidate predecessors")]
    NoCandidates,
}

/// `cos^2(pi/2 * (t/T + s)/(1 + s))`, exactly zero at `t = T`.
pub fn cosine_alpha_bar(t: usize, num_steps: usize, offset: f64) -> Result<f64, DiffusionError> {
    if num_steps == 0 || t > num_steps {
        return Err(DiffusionError::DomainError(format!(
            "step {t} outside [0, {num_steps}]"
        )));
    }
    if offset <= 0.0 {
        return Err(DiffusionError::DomainError("offset must be positive".into()));
    }
    if t == num_steps {
        return Ok(0.0);
    }
    let x = (t as f64 / num_steps as f64 + offset) / (1.0 + offset);
    let c = (std::f64::consts::FRAC_PI_2 * x).cos();
    Ok(c * c)
}

/// Row-stochastic `C x C` matrix, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    size: usize,
    data: Vec<f64>,
}

impl TransitionMatrix {
    /// `keep * I + (1 - keep) * 1 m^T`.
    pub fn mix(keep: f64, marginal: &[f64]) -> Self {
        let size = marginal.len();
        let mut data = vec![0.0; size * size];
        for i in 0..size {
            for j in 0..size {
                data[i * size + j] = (1.0 - keep) * marginal[j];
            }
            data[i * size + i] += keep;
        }
        Self { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.size..(i + 1) * self.size]
    }

    pub fn matmul(&self, other: &Self) -> Self {
        let n = self.size;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.get(i, k);
                for j in 0..n {
                    data[i * n + j] += a * other.get(k, j);
                }
            }
        }
        Self { size: n, data }
    }
}

/// Cosine schedule plus marginal prior for one categorical channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    num_steps: usize,
    offset: f64,
    marginal: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseModel {
    pub fn cosine(num_steps: usize, offset: f64, marginal: Vec<f64>) -> Result<Self, DiffusionError> {
        check_distribution(&marginal)?;
        let alpha_bar = (0..=num_steps)
            .map(|t| cosine_alpha_bar(t, num_steps, offset))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            num_steps,
            offset,
            marginal,
            alpha_bar,
        })
    }

    /// Uses an explicit `abar(0..=T)` table. It must be nonincreasing and
    /// within `[0, 1]`; it need not reach zero at `T`.
    pub fn with_alpha_bar(alpha_bar: Vec<f64>, marginal: Vec<f64>) -> Result<Self, DiffusionError> {
        check_distribution(&marginal)?;
        if alpha_bar.len() < 2
            || alpha_bar.iter().any(|a| !(0.0..=1.0).contains(a))
            || alpha_bar.windows(2).any(|w| w[1] > w[0])
        {
            return Err(DiffusionError::DomainError(
                "alpha_bar must be a nonincreasing table in [0, 1] with at least two entries".into(),
            ));
        }
        Ok(Self {
            num_steps: alpha_bar.len() - 1,
            offset: 0.0,
            marginal,
            alpha_bar,
        })
    }

    /// Same schedule with a different prior (e.g. a per-layer edge prior).
    pub fn with_marginal(&self, marginal: Vec<f64>) -> Result<Self, DiffusionError> {
        check_distribution(&marginal)?;
        Ok(Self {
            marginal,
            ..self.clone()
        })
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn num_classes(&self) -> usize {
        self.marginal.len()
    }

    pub fn marginal(&self) -> &[f64] {
        &self.marginal
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_step(&self, t: usize) -> Result<(), DiffusionError> {
        if t > self.num_steps {
            return Err(DiffusionError::DomainError(format!(
                "step {t} outside [0, {}]",
                self.num_steps
            )));
        }
        Ok(())
    }

    /// Distribution of `z(t)` given clean class `class`.
    pub fn forward_row(&self, class: usize, t: usize) -> Vec<f64> {
        let keep = self.alpha_bar[t];
        let mut row: Vec<f64> = self.marginal.iter().map(|m| (1.0 - keep) * m).collect();
        row[class] += keep;
        row
    }

    /// Transition from step `from` to a later step `to`.
    pub fn jump_transition(&self, from: usize, to: usize) -> Result<TransitionMatrix, DiffusionError> {
        self.check_step(to)?;
        if from > to {
            return Err(DiffusionError::DomainError(format!("jump {from} -> {to} goes backwards")));
        }
        let start = self.alpha_bar[from];
        if start == 0.0 {
            return Err(DiffusionError::SingularSchedule(from));
        }
        Ok(TransitionMatrix::mix(self.alpha_bar[to] / start, &self.marginal))
    }

    /// Posterior over `z(to)` for a reverse jump `from -> to` (`to < from`).
    ///
    /// For each clean class `x` the exact bridge
    /// `q(z(to) | z(from), x) ∝ Q(to->from)[., z(from)] ⊙ Qbar(to)[x, .]` is
    /// normalized on its own, then mixed with weights `zhat0[x]`. For a
    /// one-hot `zhat0` this equals the single-normalization form
    /// `z(from) Q^T ⊙ zhat0 Qbar(to)`; for a soft `zhat0` that form counts
    /// the evidence in `z(from)` twice.
    pub fn posterior_between(
        &self,
        z_from: usize,
        z0_hat: &[f64],
        from: usize,
        to: usize,
    ) -> Result<Vec<f64>, DiffusionError> {
        if to >= from {
            return Err(DiffusionError::DomainError(format!(
                "reverse jump {from} -> {to} must decrease the step"
            )));
        }
        let jump = self.jump_transition(to, from)?;
        let prior = composed_transition(to, self)?;
        let c = self.num_classes();
        let mut out = vec![0.0; c];
        let mut bridge = vec![0.0; c];
        for (x, &w) in z0_hat.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            for (j, b) in bridge.iter_mut().enumerate() {
                *b = jump.get(j, z_from) * prior.get(x, j);
            }
            let mass: f64 = bridge.iter().sum();
            if mass > 0.0 {
                for (o, b) in out.iter_mut().zip(&bridge) {
                    *o += w * b / mass;
                }
            }
        }
        let total: f64 = out.iter().sum();
        if !(total >= 1e-300) {
            return Err(DiffusionError::NumericalUnderflow(total));
        }
        out.iter_mut().for_each(|o| *o /= total);
        Ok(out)
    }
}

fn check_distribution(p: &[f64]) -> Result<(), DiffusionError> {
    let total: f64 = p.iter().sum();
    if p.is_empty() || p.iter().any(|x| !(*x >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(DiffusionError::DomainError(format!(
            "not a probability vector: {p:?}"
        )));
    }
    Ok(())
}

/// `Qbar(t)`.
pub fn composed_transition(t: usize, nm: &NoiseModel) -> Result<TransitionMatrix, DiffusionError> {
    nm.check_step(t)?;
    Ok(TransitionMatrix::mix(nm.alpha_bar[t], &nm.marginal))
}

/// `Q(t)` with `alpha(t) = abar(t) / abar(t - 1)`.
pub fn step_transition(t: usize, nm: &NoiseModel) -> Result<TransitionMatrix, DiffusionError> {
    if t == 0 {
        return Err(DiffusionError::DomainError("step transitions start at t = 1".into()));
    }
    nm.jump_transition(t - 1, t)
}

/// Samples `z(t) ~ z0 Qbar(t)` independently for each element.
pub fn corrupt(z0: &[usize], t: usize, nm: &NoiseModel, rng: &mut impl rand::Rng) -> Result<Vec<usize>, DiffusionError> {
    nm.check_step(t)?;
    Ok(z0
        .iter()
        .map(|&c| sample_categorical(&nm.forward_row(c, t), rng))
        .collect())
}

/// One-step reverse posterior `p(z(t-1) | z(t), zhat0)`.
pub fn posterior(z_t: usize, z0_hat: &[f64], t: usize, nm: &NoiseModel) -> Result<Vec<f64>, DiffusionError> {
    if t == 0 {
        return Err(DiffusionError::DomainError("posterior needs t >= 1".into()));
    }
    nm.posterior_between(z_t, z0_hat, t, t - 1)
}

/// `min(n_prev, d_in) / n_prev`.
pub fn edge_prior(n_prev: usize, d_in: f64) -> Result<f64, DiffusionError> {
    if n_prev == 0 || !(d_in > 0.0) {
        return Err(DiffusionError::DomainError(format!(
            "edge prior needs n_prev >= 1 and d_in > 0 (got {n_prev}, {d_in})"
        )));
    }
    Ok((n_prev as f64).min(d_in) / n_prev as f64)
}

/// Guarantees at least one selected candidate. A nonempty `sampled` set is
/// returned unchanged; otherwise one candidate is switched on with
/// probability proportional to `probs` (uniform when all are zero).
pub fn enforce_min_indegree(
    probs: &[f64],
    mut sampled: Vec<bool>,
    rng: &mut impl rand::Rng,
) -> Result<Vec<bool>, DiffusionError> {
    if probs.is_empty() {
        return Err(DiffusionError::NoCandidates);
    }
    if sampled.iter().any(|&s| s) {
        return Ok(sampled);
    }
    let total: f64 = probs.iter().sum();
    let pick = if total > 0.0 {
        sample_categorical(probs, rng)
    } else {
        rng.gen_range(0..probs.len())
    };
    sampled[pick] = true;
    Ok(sampled)
}

/// Inverse-CDF draw from unnormalized nonnegative weights.
pub fn sample_categorical(weights: &[f64], rng: &mut impl rand::Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if x < w {
            return i;
        }
        x -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}

/// Per-layer reverse-diffusion step budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiseSchedule {
    pub t_min: usize,
    pub t_max: usize,
    pub l_max: usize,
}

impl DenoiseSchedule {
    pub fn constant(t: usize) -> Self {
        Self {
            t_min: t,
            t_max: t,
            l_max: 1,
        }
    }
}

/// `T_min + floor((T_max - T_min) * min(l / L_max, 1))`.
pub fn denoise_steps_for_layer(l: usize, ds: &DenoiseSchedule) -> usize {
    let span = ds.t_max.saturating_sub(ds.t_min);
    let l_max = ds.l_max.max(1);
    ds.t_min + span * l.min(l_max) / l_max
}

/// Timesteps `T_train = tau_k > ... > tau_0 = 0` visited by a reverse pass
/// of `steps` jumps over a schedule trained with `num_steps` steps.
pub fn strided_timesteps(num_steps: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, num_steps);
    (0..=steps)
        .rev()
        .map(|k| (k * num_steps + steps / 2) / steps)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed_rng;

    fn two_class(alpha_bar: Vec<f64>) -> NoiseModel {
        NoiseModel::with_alpha_bar(alpha_bar, vec![0.5, 0.5]).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_alpha_bar(10, 10, 0.008).unwrap(), 0.0);
        let a0 = cosine_alpha_bar(0, 10, 0.008).unwrap();
        let expected = (std::f64::consts::FRAC_PI_2 * 0.008 / 1.008).cos().powi(2);
        assert_eq!(a0, expected);
        assert!((a0 - 0.99984).abs() < 5e-6);
        let mid = cosine_alpha_bar(50, 100, 1e-12).unwrap();
        assert!((mid - 0.5).abs() < 1e-9);
        assert!(cosine_alpha_bar(11, 10, 0.008).is_err());
    }

    #[test]
    fn schedule_is_monotone() {
        let nm = NoiseModel::cosine(64, DEFAULT_OFFSET, vec![0.3, 0.7]).unwrap();
        for t in 1..=64 {
            assert!(nm.alpha_bar(t) <= nm.alpha_bar(t - 1));
        }
        assert_eq!(nm.alpha_bar(64), 0.0);
    }

    #[test]
    fn composed_examples() {
        let m = vec![0.2, 0.3, 0.5];
        let identity = TransitionMatrix::mix(1.0, &m);
        let absorbed = TransitionMatrix::mix(0.0, &m);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(identity.get(i, j), if i == j { 1.0 } else { 0.0 });
                assert_eq!(absorbed.get(i, j), m[j]);
            }
        }
        let q = composed_transition(1, &two_class(vec![1.0, 0.8])).unwrap();
        for (got, want) in q.row(0).iter().chain(q.row(1)).zip([0.9, 0.1, 0.1, 0.9]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn step_examples() {
        let nm = two_class(vec![1.0, 0.8, 0.5]);
        let q = step_transition(2, &nm).unwrap();
        for (got, want) in q.row(0).iter().chain(q.row(1)).zip([0.8125, 0.1875, 0.1875, 0.8125]) {
            assert!((got - want).abs() < 1e-15);
        }
        let product = composed_transition(1, &nm).unwrap().matmul(&q);
        let direct = composed_transition(2, &nm).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((product.get(i, j) - direct.get(i, j)).abs() < 1e-12);
            }
        }
        let flat = two_class(vec![1.0, 0.7, 0.7]);
        assert_eq!(step_transition(2, &flat).unwrap(), TransitionMatrix::mix(1.0, &[0.5, 0.5]));
        let dead = two_class(vec![1.0, 0.0, 0.0]);
        assert_eq!(step_transition(2, &dead), Err(DiffusionError::SingularSchedule(1)));
    }

    #[test]
    fn corrupt_examples() {
        let mut rng = keyed_rng(1, &[]);
        let nm = two_class(vec![1.0, 0.8, 0.0]);
        let z0: Vec<usize> = (0..200).map(|i| i % 2).collect();
        assert_eq!(corrupt(&z0, 0, &nm, &mut rng).unwrap(), z0);

        let zeros = vec![0usize; 100_000];
        let z = corrupt(&zeros, 1, &nm, &mut rng).unwrap();
        let kept = z.iter().filter(|&&c| c == 0).count() as f64 / z.len() as f64;
        assert!((kept - 0.9).abs() < 0.01, "{kept}");
    }

    #[test]
    fn posterior_examples() {
        let nm = two_class(vec![1.0, 0.8, 0.5]);
        let p = posterior(0, &[1.0, 0.0], 2, &nm).unwrap();
        assert!((p[0] - 0.975).abs() < 1e-12 && (p[1] - 0.025).abs() < 1e-12);

        // abar(t-1) -> 0: the prior factor collapses to m. Exactly zero makes
        // Q(t) singular, so the limit is taken with a vanishing abar(t-1).
        let m = vec![0.25, 0.75];
        let nm = NoiseModel::with_alpha_bar(vec![1.0, 1e-15, 1e-16], m.clone()).unwrap();
        let p = posterior(1, &m, 2, &nm).unwrap();
        let q = step_transition(2, &nm).unwrap();
        let raw: Vec<f64> = (0..2).map(|j| q.get(j, 1) * m[j]).collect();
        let total: f64 = raw.iter().sum();
        for j in 0..2 {
            assert!((p[j] - raw[j] / total).abs() < 1e-12);
        }
        let dead = NoiseModel::with_alpha_bar(vec![1.0, 0.0, 0.0], m).unwrap();
        assert_eq!(posterior(1, &[0.5, 0.5], 2, &dead), Err(DiffusionError::SingularSchedule(1)));
    }

    #[test]
    fn soft_prediction_mixes_per_class_bridges() {
        // Two classes, m uniform, abar(1)=0.8, abar(2)=0.5, z(2)=0.
        // Bridges: x=0 -> [0.975, 0.025]; x=1 -> [0.8125 * 0.1, 0.1875 * 0.9]
        // normalized.
        let nm = two_class(vec![1.0, 0.8, 0.5]);
        let p = posterior(0, &[0.5, 0.5], 2, &nm).unwrap();
        let b1 = [0.8125 * 0.1, 0.1875 * 0.9];
        let s1 = b1[0] + b1[1];
        let want0 = 0.5 * 0.975 + 0.5 * b1[0] / s1;
        assert!((p[0] - want0).abs() < 1e-12, "{p:?}");
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn posterior_symmetry_under_uniform_inputs() {
        let nm = NoiseModel::cosine(10, DEFAULT_OFFSET, vec![1.0 / 3.0; 3]).unwrap();
        for t in 1..=10 {
            let p = posterior(0, &[1.0 / 3.0; 3], t, &nm).unwrap();
            assert!((p[1] - p[2]).abs() < 1e-12);
        }
    }

    #[test]
    fn edge_prior_examples() {
        assert!((edge_prior(5, 2.0).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(edge_prior(1, 2.0).unwrap(), 1.0);
        assert_eq!(edge_prior(4, 4.0).unwrap(), 1.0);
        assert!(edge_prior(0, 2.0).is_err());
        assert!(edge_prior(3, 0.0).is_err());
    }

    #[test]
    fn min_indegree_examples() {
        let mut rng = keyed_rng(5, &[]);
        let kept = enforce_min_indegree(&[0.2, 0.3], vec![false, true], &mut rng).unwrap();
        assert_eq!(kept, vec![false, true]);
        assert_eq!(
            enforce_min_indegree(&[], vec![], &mut rng),
            Err(DiffusionError::NoCandidates)
        );

        let trials = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..trials {
            let s = enforce_min_indegree(&[0.0; 3], vec![false; 3], &mut rng).unwrap();
            counts[s.iter().position(|&b| b).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / trials as f64 - 1.0 / 3.0).abs() < 0.01);
        }

        let mut first = 0;
        for _ in 0..trials {
            let s = enforce_min_indegree(&[0.9, 0.1], vec![false; 2], &mut rng).unwrap();
            first += usize::from(s[0]);
        }
        assert!((first as f64 / trials as f64 - 0.9).abs() < 0.01);
    }

    #[test]
    fn denoise_schedule_examples() {
        let ds = DenoiseSchedule {
            t_min: 20,
            t_max: 100,
            l_max: 10,
        };
        assert_eq!(denoise_steps_for_layer(0, &ds), 20);
        assert_eq!(denoise_steps_for_layer(5, &ds), 60);
        assert_eq!(denoise_steps_for_layer(10, &ds), 100);
        assert_eq!(denoise_steps_for_layer(37, &ds), 100);
        let mut prev = 0;
        for l in 0..30 {
            let t = denoise_steps_for_layer(l, &ds);
            assert!(t >= prev && (20..=100).contains(&t));
            prev = t;
        }
    }

    #[test]
    fn strided_timesteps_cover_the_range() {
        assert_eq!(strided_timesteps(10, 10), (0..=10).rev().collect::<Vec<_>>());
        assert_eq!(strided_timesteps(10, 1), vec![10, 0]);
        let ts = strided_timesteps(32, 5);
        assert_eq!(ts.len(), 6);
        assert_eq!((ts[0], ts[5]), (32, 0));
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
    }
}
