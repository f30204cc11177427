//! Finite-difference verification of tape gradients.

use super::layers::{glorot, set_pool, Activation, AttentionBlock, BiMpnnLayer, GraphOperands, LayerNorm, Linear, Mlp, PoolMode};
use super::tape::{ParamId, ParamStore, Tape, Var};
use super::tensor::Real;
use crate::rng::keyed_rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares the tape gradient of `loss` against central differences with
/// step `eps` at every scalar parameter. `loss` must be deterministic.
pub fn check_gradients<S, F>(store: &ParamStore<S>, eps: f64, loss: F) -> GradCheck
where
    S: Real,
    F: Fn(&mut Tape<'_, S>) -> Var,
{
    let grads = {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape);
        tape.backward(l)
    };
    let eval = |s: &ParamStore<S>| {
        let mut tape = Tape::new(s);
        let l = loss(&mut tape);
        tape.value(l).item().to_f64().unwrap()
    };
    let mut probe = store.clone();
    let mut max_rel_error = 0.0f64;
    let mut checked = 0;
    for p in 0..store.len() {
        for j in 0..store.get(ParamId(p)).len() {
            let orig = probe.tensors_mut()[p].data()[j];
            probe.tensors_mut()[p].data_mut()[j] = orig + S::lit(eps);
            let up = eval(&probe);
            probe.tensors_mut()[p].data_mut()[j] = orig - S::lit(eps);
            let down = eval(&probe);
            probe.tensors_mut()[p].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.0[p].data()[j].to_f64().unwrap();
            max_rel_error = max_rel_error.max(relative_error(analytic, numeric));
            checked += 1;
        }
    }
    GradCheck {
        max_rel_error,
        checked,
    }
}

/// Central-difference checks (64-bit, step 1e-6) for every layer type:
/// affine, a BiMPNN stack, an attention block with layer norm, and a
/// pooling plus heads composite. Returns `(case, report)` pairs.
pub fn gradient_suite(seed: u64) -> Vec<(&'static str, GradCheck)> {
    let eps = 1e-6;
    let mut out = Vec::new();

    let mut rng = keyed_rng(seed, &[1]);
    let mut store = ParamStore::<f64>::new();
    let lin = Linear::new(&mut store, "lin", 3, 2, &mut rng);
    let x = glorot::<f64>(4, 3, &mut rng);
    out.push((
        "affine",
        check_gradients(&store, eps, |tape| {
            let h = tape.constant(x.clone());
            let y = lin.forward(tape, h);
            tape.mse(y, &[0.5, -1.0, 0.2, 0.0, 1.0, 0.3, -0.4, 0.8], 1.0)
        }),
    ));

    let mut rng = keyed_rng(seed, &[2]);
    let mut store = ParamStore::<f64>::new();
    let l1 = BiMpnnLayer::new(&mut store, "l1", 3, 4, Activation::ReluNorm, &mut rng);
    let l2 = BiMpnnLayer::new(&mut store, "l2", 4, 4, Activation::Relu, &mut rng);
    let l3 = BiMpnnLayer::new(&mut store, "l3", 4, 2, Activation::Identity, &mut rng);
    let x = glorot::<f64>(5, 3, &mut rng);
    let edges = [(0, 1), (0, 2), (1, 3), (2, 3), (3, 4), (0, 4)];
    out.push((
        "bimpnn",
        check_gradients(&store, eps, |tape| {
            let g = GraphOperands::new(tape, 5, &edges);
            let h = tape.constant(x.clone());
            let h = l1.forward(tape, &g, h);
            let h = l2.forward(tape, &g, h);
            let h = l3.forward(tape, &g, h);
            tape.cross_entropy(h, &[0, 1, 1, 0, 1], 1.0)
        }),
    ));

    let mut rng = keyed_rng(seed, &[3]);
    let mut store = ParamStore::<f64>::new();
    let block = AttentionBlock::new(&mut store, "attn", 4, 2, &mut rng);
    let norm = LayerNorm::new(&mut store, "ln", 4);
    let head = Linear::new(&mut store, "head", 4, 1, &mut rng);
    let x = glorot::<f64>(3, 4, &mut rng);
    out.push((
        "attention",
        check_gradients(&store, eps, |tape| {
            let h = tape.constant(x.clone());
            let h = block.forward(tape, h);
            let h = norm.forward(tape, h);
            let y = head.forward(tape, h);
            tape.bce_with_logits(y, &[1.0, 0.0, 1.0], 1.0)
        }),
    ));

    let mut rng = keyed_rng(seed, &[4]);
    let mut store = ParamStore::<f64>::new();
    let enc = BiMpnnLayer::new(&mut store, "enc", 3, 4, Activation::ReluNorm, &mut rng);
    let size = Mlp::new(&mut store, "size", (8, 4, 3), &mut rng);
    let src = Linear::new(&mut store, "src", 4, 4, &mut rng);
    let dst = Linear::new(&mut store, "dst", 4, 4, &mut rng);
    let score = Linear::new(&mut store, "score", 4, 1, &mut rng);
    let x = glorot::<f64>(4, 3, &mut rng);
    let edges = [(0, 2), (1, 2), (2, 3)];
    out.push((
        "pooling+heads",
        check_gradients(&store, eps, |tape| {
            let g = GraphOperands::new(tape, 4, &edges);
            let h = tape.constant(x.clone());
            let h = enc.forward(tape, &g, h);
            let mean = set_pool(tape, h, PoolMode::Mean);
            let sum = set_pool(tape, h, PoolMode::Sum);
            let pooled = tape.concat_cols(&[mean, sum]);
            let logits = size.forward(tape, pooled);
            let size_loss = tape.cross_entropy(logits, &[2], 1.0);
            let a = src.forward(tape, h);
            let b = dst.forward(tape, h);
            let a = tape.gather_rows(a, &[0, 1, 0]);
            let b = tape.gather_rows(b, &[3, 3, 2]);
            let pair = tape.add(a, b);
            let pair = tape.relu(pair);
            let s = score.forward(tape, pair);
            let edge_loss = tape.bce_with_logits(s, &[1.0, 0.0, 1.0], 1.0);
            let probs = tape.softmax_rows(logits);
            let reg = tape.mse(probs, &[0.2, 0.3, 0.5], 0.5);
            let l = tape.add(size_loss, edge_loss);
            tape.add(l, reg)
        }),
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1e-9, 2e-9), 1e-9);
        assert!((relative_error(100.0, 101.0) - 1.0 / 101.0).abs() < 1e-15);
    }

    #[test]
    fn suite_passes_and_covers_every_scalar() {
        for seed in 0..3 {
            for (name, report) in gradient_suite(seed) {
                assert!(report.passes(1e-5), "{name}: {report:?}");
                assert!(report.checked > 0);
            }
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::scalar(1.5));
        // Loss not expressible on the tape: finite differences see w^2,
        // the tape sees a constant.
        let report = check_gradients(&store, 1e-6, |tape| {
            let w = tape.params().get(ParamId(0)).item();
            tape.constant(Tensor::scalar(w * w))
        });
        assert!(!report.passes(1e-5));
    }
}
