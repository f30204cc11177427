use super::tape::{Grads, ParamStore};
use super::tensor::Real;
use super::NnError;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<S: Real = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: Option<f64>,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Real> Adam<S> {
    pub fn new(store: &ParamStore<S>, lr: f64) -> Self {
        let zeros: Vec<Vec<S>> = store
            .iter()
            .map(|(_, _, t)| vec![S::zero(); t.len()])
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(5.0),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Nothing is modified when a gradient is
    /// non-finite.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &Grads<S>) -> Result<(), NnError> {
        if !grads.is_finite() {
            return Err(NnError::NonFiniteGradient);
        }
        let clip = match self.grad_clip {
            Some(max_norm) => {
                let norm = grads
                    .0
                    .iter()
                    .flat_map(|g| g.data())
                    .map(|x| x.to_f64().unwrap().powi(2))
                    .sum::<f64>()
                    .sqrt();
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let (clip, eps) = (S::lit(clip), S::lit(self.eps));
        let step_size = S::lit(self.lr / bc1);
        let bc2_sqrt = S::lit(bc2.sqrt());
        for (i, param) in store.tensors_mut().iter_mut().enumerate() {
            let g = grads.0[i].data();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in param.data_mut().iter_mut().enumerate() {
                let gj = g[j] * clip;
                m[j] = b1 * m[j] + (S::one() - b1) * gj;
                v[j] = b2 * v[j] + (S::one() - b2) * gj * gj;
                *p -= step_size * m[j] / (v[j].sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}
