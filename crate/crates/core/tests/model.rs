use layerdag::dag::{check_predecessor_property, layer_partition, validate_dag, Dag, Prefix};
use layerdag::lp::{generate_lp, LpConfig, LpVariant};
use layerdag::model::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        hidden_dim: 16,
        mpnn_layers: 2,
        attn_blocks: 1,
        attn_heads: 2,
        t_train: 8,
        t_min: 2,
        t_max: 8,
        ..Default::default()
    }
}

fn lp(count: usize, seed: u64) -> Vec<Dag> {
    generate_lp(&LpConfig::new(1.0, LpVariant::Base, count, seed)).unwrap()
}

fn random_model(seed: u64) -> ModelParams {
    let data = lp(20, seed);
    let meta = ModelMeta::from_dataset(&data, false).unwrap();
    ModelParams::init(small_config(), meta, seed).unwrap()
}

/// Relabels context nodes: new local index of old `i` is `perm[i]`.
fn permute_prefix(p: &Prefix, perm: &[usize]) -> Prefix {
    let n = p.len();
    let mut out = p.clone();
    for i in 0..n {
        out.nodes[perm[i]] = p.nodes[i];
        out.attrs[perm[i]] = p.attrs[i].clone();
        out.depth[perm[i]] = p.depth[i];
    }
    out.edges = p.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_perm(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

fn prefixes(data: &[Dag]) -> Vec<Prefix> {
    let mut out = Vec::new();
    for d in data {
        let part = layer_partition(d).unwrap();
        for l in 1..=part.num_layers() {
            out.push(Prefix::from_partition(&part, l));
        }
    }
    out
}

#[test]
fn size_head_and_graph_rep_are_relabeling_invariant() {
    let p = random_model(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for prefix in prefixes(&lp(10, 3)) {
        let perm = random_perm(prefix.len(), &mut rng);
        let q = permute_prefix(&prefix, &perm);
        let a = predict_layer_size(&p, &prefix, None).unwrap();
        let b = predict_layer_size(&p, &q, None).unwrap();
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(max_diff(&a, &b) <= 1e-5);
        for head in [Head::Size, Head::Node, Head::Edge] {
            let ea = encode_context(&p, &prefix, head, Some(3), None).unwrap();
            let eb = encode_context(&p, &q, head, Some(3), None).unwrap();
            assert!(max_diff(&ea.graph_rep.to_f64_vec(), &eb.graph_rep.to_f64_vec()) <= 1e-5);
        }
    }
}

#[test]
fn empty_prefix_uses_start_embedding() {
    let p = random_model(4);
    let a = encode_context(&p, &Prefix::empty(), Head::Size, None, None).unwrap();
    assert!(a.node_reps.is_none());
    let probs = predict_layer_size(&p, &Prefix::empty(), None).unwrap();
    assert_eq!(probs.len(), p.meta.n_max + 1);
}

#[test]
fn node_denoiser_is_equivariant_over_elements() {
    let p = random_model(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for prefix in prefixes(&lp(5, 7)) {
        let n = rng.gen_range(1..=5);
        let noisy: Vec<Vec<u32>> = (0..n).map(|_| vec![rng.gen_range(0..2)]).collect();
        let perm = random_perm(n, &mut rng);
        let mut shuffled = noisy.clone();
        for i in 0..n {
            shuffled[perm[i]] = noisy[i].clone();
        }
        let t = rng.gen_range(1..=8);
        let a = denoise_node_attrs(&p, &prefix, &noisy, t, None).unwrap();
        let b = denoise_node_attrs(&p, &prefix, &shuffled, t, None).unwrap();
        for i in 0..n {
            assert!((a[i][0].iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(max_diff(&a[i][0], &b[perm[i]][0]) <= 1e-5);
        }
    }
}

#[test]
fn duplicate_noisy_elements_get_identical_rows() {
    let p = random_model(8);
    let prefix = prefixes(&lp(1, 9)).remove(0);
    let out = denoise_node_attrs(&p, &prefix, &[vec![1], vec![0], vec![1]], 4, None).unwrap();
    assert!(max_diff(&out[0][0], &out[2][0]) <= 1e-6);
}

#[test]
fn edge_denoiser_is_equivariant_under_joint_relabeling() {
    let p = random_model(10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for prefix in prefixes(&lp(5, 12)) {
        let n_ctx = prefix.len();
        let n = rng.gen_range(1..=4);
        let attrs: Vec<Vec<u32>> = (0..n).map(|_| vec![rng.gen_range(0..2)]).collect();
        let noisy: Vec<Vec<bool>> = (0..n).map(|_| (0..n_ctx).map(|_| rng.gen_bool(0.3)).collect()).collect();
        let t = rng.gen_range(1..=8);
        let a = denoise_edges(&p, &prefix, &attrs, &noisy, t, None).unwrap();

        let ctx_perm = random_perm(n_ctx, &mut rng);
        let new_perm = random_perm(n, &mut rng);
        let q = permute_prefix(&prefix, &ctx_perm);
        let mut attrs2 = attrs.clone();
        let mut noisy2 = vec![vec![false; n_ctx]; n];
        for j in 0..n {
            attrs2[new_perm[j]] = attrs[j].clone();
            for u in 0..n_ctx {
                noisy2[new_perm[j]][ctx_perm[u]] = noisy[j][u];
            }
        }
        let b = denoise_edges(&p, &q, &attrs2, &noisy2, t, None).unwrap();
        for j in 0..n {
            for u in 0..n_ctx {
                let x = a[j][u];
                assert!(x > 0.0 && x < 1.0);
                assert!((x - b[new_perm[j]][ctx_perm[u]]).abs() <= 1e-5);
            }
        }
    }
}

#[test]
fn identical_new_nodes_get_identical_edge_rows() {
    let p = random_model(13);
    let prefix = prefixes(&lp(1, 14)).remove(0);
    let row: Vec<bool> = (0..prefix.len()).map(|u| u % 2 == 0).collect();
    let out = denoise_edges(&p, &prefix, &[vec![1], vec![1]], &[row.clone(), row], 3, None).unwrap();
    assert!(max_diff(&out[0], &out[1]) <= 1e-6);
}

#[test]
fn edge_denoiser_rejects_empty_context() {
    let p = random_model(15);
    let err = denoise_edges(&p, &Prefix::empty(), &[vec![0]], &[vec![]], 1, None).unwrap_err();
    assert!(matches!(err, ModelError::EmptyContext));
}

#[test]
fn conditional_model_needs_and_uses_labels() {
    let data: Vec<Dag> = lp(20, 16)
        .into_iter()
        .map(|d| {
            let y = d.num_nodes() as f64;
            d.with_label(Some(y))
        })
        .collect();
    let meta = ModelMeta::from_dataset(&data, true).unwrap();
    let config = ModelConfig {
        conditional: true,
        ..small_config()
    };
    let p = ModelParams::init(config, meta, 17).unwrap();
    let prefix = Prefix::empty();
    assert!(matches!(
        encode_context(&p, &prefix, Head::Size, None, None),
        Err(ModelError::MissingLabel)
    ));
    let a = encode_context(&p, &prefix, Head::Size, None, Some(5.0)).unwrap();
    let b = encode_context(&p, &prefix, Head::Size, None, Some(20.0)).unwrap();
    assert!(max_diff(&a.graph_rep.to_f64_vec(), &b.graph_rep.to_f64_vec()) > 1e-3);
    let cfg = SampleConfig {
        count: 2,
        schedule: Schedule::Constant(2),
        l_cap: None,
        n_cap: None,
        labels: None,
        seed: 0,
    };
    assert!(matches!(sample(&p, &cfg), Err(ModelError::MissingLabel)));
}

#[test]
fn training_rejects_empty_dataset() {
    let err = train(&[], &[], small_config(), &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, ModelError::EmptyDataset));
}

#[test]
fn overfit_smoke_lowers_training_loss() {
    let data = lp(10, 18);
    let tc = TrainConfig {
        epochs: 200,
        batch_size: 10,
        lr: 3e-3,
        patience: 1000,
        seed: 19,
        ..Default::default()
    };
    let (_, log) = train(&data, &[], small_config(), &tc).unwrap();
    let first = log.epochs.first().unwrap().train.total;
    let last = log.epochs.last().unwrap().train.total;
    assert!(last < first, "loss {first} -> {last}");
}

#[test]
fn training_is_deterministic() {
    let data = lp(12, 20);
    let val = lp(4, 21);
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 22,
        ..Default::default()
    };
    let (a, la) = train(&data, &val, small_config(), &tc).unwrap();
    let (b, lb) = train(&data, &val, small_config(), &tc).unwrap();
    assert_eq!(la, lb);
    for ((_, na, ta), (_, nb, tb)) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.data(), tb.data());
    }
}

#[test]
fn overfit_first_layer_size() {
    // Every graph has exactly three source nodes.
    let data: Vec<Dag> = lp(200, 23)
        .into_iter()
        .filter(|d| layer_partition(d).unwrap().layers[0].len() == 3)
        .take(20)
        .collect();
    assert!(data.len() >= 10);
    let tc = TrainConfig {
        epochs: 60,
        batch_size: 8,
        lr: 3e-3,
        patience: 1000,
        seed: 24,
        ..Default::default()
    };
    let (p, _) = train(&data, &[], small_config(), &tc).unwrap();
    let probs = predict_layer_size(&p, &Prefix::empty(), None).unwrap();
    let argmax = (0..probs.len()).max_by(|&a, &b| probs[a].total_cmp(&probs[b])).unwrap();
    assert_eq!(argmax, 3);
}

#[test]
fn samples_are_structurally_sound_and_account_steps() {
    let data = lp(30, 25);
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 8,
        seed: 26,
        ..Default::default()
    };
    let (p, _) = train(&data, &[], small_config(), &tc).unwrap();
    let cfg = SampleConfig {
        count: 40,
        schedule: Schedule::Linear { t_min: 2, t_max: 8 },
        l_cap: None,
        n_cap: None,
        labels: None,
        seed: 27,
    };
    let out = sample(&p, &cfg).unwrap();
    assert_eq!(out.len(), 40);
    let ds = cfg.schedule.resolve(p.meta.l_max);
    for s in &out {
        validate_dag(&s.dag).unwrap();
        check_predecessor_property(&s.dag).unwrap();
        let layers = s.stats.layers();
        if s.dag.num_nodes() > 0 {
            assert_eq!(layer_partition(&s.dag).unwrap().num_layers(), layers);
        }
        let expected: usize = (0..layers)
            .map(|l| layerdag::diffusion::denoise_steps_for_layer(l, &ds))
            .sum();
        assert_eq!(s.stats.total_steps(), expected);
        assert_eq!(s.stats.scheduled_steps(), expected);
        assert!(layers <= 4 * p.meta.l_max);
    }
    // Worker count does not matter: same seed, same graphs.
    let again = sample(&p, &cfg).unwrap();
    for (a, b) in out.iter().zip(&again) {
        assert_eq!(a.dag, b.dag);
    }
}

#[test]
fn schedule_outside_training_steps_is_rejected() {
    let p = random_model(28);
    let cfg = SampleConfig {
        count: 1,
        schedule: Schedule::Constant(9),
        l_cap: None,
        n_cap: None,
        labels: None,
        seed: 0,
    };
    assert!(matches!(sample(&p, &cfg), Err(ModelError::InvalidConfig(_))));
}
