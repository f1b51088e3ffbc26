use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::graph::{build_camera_rig, knn_edges, CameraRig};
use crate::tensor::{check_gradients, FD_RESOLUTION, FD_STEP, FD_TOLERANCE};

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn toy(seed: u64, views: usize, d: usize) -> (EncoderConfig, ParamStore, ViewSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = EncoderConfig::new(d, d, views);
    let params = config.init_params(&mut rng).unwrap();
    let features = random(&mut rng, views, d, -2.0, 2.0);
    let vs = ViewSet::new(features, build_camera_rig(views).unwrap()).unwrap();
    (config, params, vs)
}

fn row_stochastic(m: &Matrix) -> bool {
    (0..m.rows()).all(|r| m.row(r).iter().all(|&v| v >= 0.0) && (m.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-9)
}

#[test]
fn identical_features_attend_uniformly() {
    let rig = build_camera_rig(12).unwrap();
    let g = knn_edges(&rig, 4).unwrap();
    let mut t = Tape::new();
    let f = t.constant(Matrix::filled(12, 8, 0.3));
    let a = local_attention_weights(&mut t, f, &g).unwrap();
    let a = t.value(a);
    for i in 0..12 {
        for j in 0..12 {
            let inside = i == j || g.neighbors(i).contains(&j);
            let expect = if inside { 1.0 / 5.0 } else { 0.0 };
            assert!((a.get(i, j) - expect).abs() < 1e-15);
        }
    }
}

#[test]
fn two_node_attention_by_hand() {
    let rig = CameraRig::new(vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
    let g = knn_edges(&rig, 1).unwrap();
    let mut t = Tape::new();
    let f = t.constant(Matrix::from_rows(&[[1.0], [2.0]]).unwrap());
    let a = local_attention_weights(&mut t, f, &g).unwrap();
    // Row 0: softmax over (self = 1, neighbour = 2).
    let e1 = 1f64.exp();
    let e2 = 2f64.exp();
    assert!((t.value(a).get(0, 0) - e1 / (e1 + e2)).abs() < 1e-15);
    assert!((t.value(a).get(0, 1) - e2 / (e1 + e2)).abs() < 1e-15);
    assert!((t.value(a).get(0, 0) - 0.2689).abs() < 1e-4);
    assert!((t.value(a).get(0, 1) - 0.7311).abs() < 1e-4);
}

#[test]
fn single_node_gcn_with_identity_weight_is_identity() {
    let rig = build_camera_rig(1).unwrap();
    let g = crate::graph::level_graph(&rig, 4, 0).unwrap();
    let mut t = Tape::new();
    let x = Matrix::row_vector(&[0.5, -1.5, 2.0, 0.0]);
    let f = t.constant(x.clone());
    let w = t.constant(Matrix::identity(4));
    let gamma = t.constant(Matrix::filled(1, 4, 1.0));
    let beta = t.constant(Matrix::zeros(1, 4));
    let (out, _) = local_gcn(&mut t, f, &g, w, gamma, beta, Psi::Identity).unwrap();
    assert_eq!(t.value(out), &x);
}

#[test]
fn local_gcn_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let rig = CameraRig::new(
        (0..6)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.2..1.0)])
            .collect(),
    )
    .unwrap();
    let x = random(&mut rng, 6, 8, -2.0, 2.0);
    let w = random(&mut rng, 8, 8, -0.5, 0.5);
    let mut perm: Vec<usize> = (0..6).collect();
    perm.shuffle(&mut rng);

    let run = |x: &Matrix, rig: &CameraRig, norm: NormMode| {
        let g = knn_edges(rig, 3).unwrap();
        let mut t = Tape::new();
        let f = t.constant(x.clone());
        let wv = t.constant(w.clone());
        let gamma = t.constant(Matrix::filled(1, 8, 1.2));
        let beta = t.constant(Matrix::filled(1, 8, 0.1));
        let (out, _) = local_gcn(&mut t, f, &g, wv, gamma, beta, Psi::Full { norm, slope: 0.2 }).unwrap();
        t.value(out).clone()
    };
    for norm in [NormMode::Nodes, NormMode::Features, NormMode::None] {
        let base = run(&x, &rig, norm);
        let permuted = run(&x.select_rows(&perm), &rig.permuted(&perm), norm);
        assert!(permuted.max_abs_diff(&base.select_rows(&perm)) < 1e-12, "{norm:?}");
    }
}

#[test]
fn local_gcn_weight_gradient() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let rig = build_camera_rig(6).unwrap();
        let g = knn_edges(&rig, 2).unwrap();
        let x = random(&mut rng, 6, 8, -2.0, 2.0);
        let w = random(&mut rng, 8, 8, -0.5, 0.5);
        let mix = random(&mut rng, 6, 8, -1.0, 1.0);
        for norm in [NormMode::Nodes, NormMode::Features] {
            let c = check_gradients("local_gcn", &[x.clone(), w.clone()], FD_STEP, FD_TOLERANCE, |t, v| {
                let gamma = t.constant(Matrix::filled(1, 8, 1.0));
                let beta = t.constant(Matrix::zeros(1, 8));
                let (out, _) = local_gcn(t, v[0], &g, v[1], gamma, beta, Psi::Full { norm, slope: 0.2 })?;
                let m = t.constant(mix.clone());
                let p = t.mul(out, m)?;
                t.sum(p)
            })
            .unwrap();
            assert!(c.passed(), "{norm:?} seed {seed}: {:.3e}", c.max_rel_err());
        }
    }
}

#[test]
fn global_attention_single_node() {
    let mut t = Tape::new();
    let x = Matrix::row_vector(&[1.0, -2.0]);
    let wv_m = Matrix::from_rows(&[[0.5, 1.0], [2.0, -1.0]]).unwrap();
    let f = t.constant(x.clone());
    let wq = t.constant(Matrix::from_rows(&[[1.0], [3.0]]).unwrap());
    let wk = t.constant(Matrix::from_rows(&[[-2.0], [0.5]]).unwrap());
    let wv = t.constant(wv_m.clone());
    let (out, _) = global_attention(&mut t, f, wq, wk, wv).unwrap();
    let fw = x.matmul(&wv_m).unwrap();
    assert_eq!(t.value(out).data(), &[1.0 + fw.get(0, 0), -2.0 + fw.get(0, 1)]);
}

#[test]
fn global_attention_zero_query_key_is_mean_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for &n in &[3usize, 6, 12] {
        let x = random(&mut rng, n, 8, -2.0, 2.0);
        let wv_m = random(&mut rng, 8, 8, -1.0, 1.0);
        let mut t = Tape::new();
        let f = t.constant(x.clone());
        let zero = t.constant(Matrix::zeros(8, 4));
        let wv = t.constant(wv_m.clone());
        let (out, attn) = global_attention(&mut t, f, zero, zero, wv).unwrap();
        assert_eq!(t.value(out).shape(), (n, 8));
        assert!(row_stochastic(t.value(attn)));

        // Closed form: F + column-mean(F W_v) on every row.
        let fw = x.matmul(&wv_m).unwrap();
        let mean: Vec<f64> = (0..8).map(|c| (0..n).map(|r| fw.get(r, c)).sum::<f64>() / n as f64).collect();
        for r in 0..n {
            for c in 0..8 {
                assert!((t.value(out).get(r, c) - (x.get(r, c) + mean[c])).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn selector_one_hot_picks_views() {
    // View i is e_i scaled by (i + 1); the MLP is an identity hidden layer and
    // a second layer that gives prototype k a large logit on view chosen[k].
    let v = 6;
    let d = 6;
    let chosen = [4usize, 1, 3];
    let mut feats = Matrix::zeros(v, d);
    for i in 0..v {
        feats.set(i, i, (i + 1) as f64);
    }
    let mut w2 = Matrix::zeros(d, 3);
    for (k, &j) in chosen.iter().enumerate() {
        w2.set(j, k, 200.0 / (j + 1) as f64);
    }
    let mut t = Tape::new();
    let f = t.constant(feats.clone());
    let params = SelectorParams {
        w1: t.constant(Matrix::identity(d)),
        b1: t.constant(Matrix::zeros(1, d)),
        w2: t.constant(w2),
        slope: 0.2,
    };
    let rig = build_camera_rig(v).unwrap();
    let sel = view_selector(&mut t, f, &rig, params, 3).unwrap();
    for (k, &j) in chosen.iter().enumerate() {
        let p = t.value(sel.prototypes).row(k);
        for c in 0..d {
            assert!((p[c] - feats.get(j, c)).abs() < 1e-12);
        }
        for dd in 0..3 {
            assert!((sel.rig.position(k)[dd] - rig.position(j)[dd]).abs() < 1e-12);
        }
    }
}

#[test]
fn selector_zero_weights_average_views() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let feats = random(&mut rng, 12, 8, -2.0, 2.0);
    let mut t = Tape::new();
    let f = t.constant(feats.clone());
    let params = SelectorParams {
        w1: t.constant(Matrix::zeros(8, 4)),
        b1: t.constant(Matrix::zeros(1, 4)),
        w2: t.constant(Matrix::zeros(4, 6)),
        slope: 0.2,
    };
    let rig = build_camera_rig(12).unwrap();
    let sel = view_selector(&mut t, f, &rig, params, 6).unwrap();
    for k in 0..6 {
        for c in 0..8 {
            let mean = (0..12).map(|r| feats.get(r, c)).sum::<f64>() / 12.0;
            assert!((t.value(sel.prototypes).get(k, c) - mean).abs() < 1e-12);
        }
    }
    assert!(row_stochastic(t.value(sel.assignment)));
}

#[test]
fn selector_prototypes_stay_in_envelope_and_k_must_shrink() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
        let feats = random(&mut rng, 12, 8, -2.0, 2.0);
        let mut t = Tape::new();
        let f = t.constant(feats.clone());
        let params = SelectorParams {
            w1: t.constant(random(&mut rng, 8, 4, -2.0, 2.0)),
            b1: t.constant(random(&mut rng, 1, 4, -1.0, 1.0)),
            w2: t.constant(random(&mut rng, 4, 6, -2.0, 2.0)),
            slope: 0.2,
        };
        let rig = build_camera_rig(12).unwrap();
        let sel = view_selector(&mut t, f, &rig, params, 6).unwrap();
        let p = t.value(sel.prototypes);
        for c in 0..8 {
            let lo = (0..12).map(|r| feats.get(r, c)).fold(f64::INFINITY, f64::min);
            let hi = (0..12).map(|r| feats.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
            for k in 0..6 {
                assert!(p.get(k, c) >= lo - 1e-12 && p.get(k, c) <= hi + 1e-12);
            }
        }
        if seed == 0 {
            let err = view_selector(&mut t, f, &rig, params, 12);
            assert!(matches!(err, Err(Error::Argument(_))));
        }
    }
}

#[test]
fn default_schedule_and_node_trace() {
    assert_eq!(default_schedule(12), vec![12, 6, 3]);
    assert_eq!(default_schedule(6), vec![6, 3]);
    assert_eq!(default_schedule(3), vec![3]);
    assert_eq!(default_schedule(1), vec![1]);

    let (config, params, vs) = toy(1, 12, 16);
    let mut t = Tape::inference();
    let b = params.bind(&mut t, |_| false);
    let f = t.constant(vs.features.clone());
    let trace = encode(&mut t, &config, &b, f, &vs.rig).unwrap();
    assert_eq!(trace.node_counts, vec![12, 6, 3]);
    assert_eq!(trace.pooled.len(), 3);
    for a in &trace.attention {
        assert!(row_stochastic(t.value(*a)));
    }
}

#[test]
fn single_level_embeds_first_level_pool_only() {
    let (config, _, vs) = toy(2, 12, 8);
    let config = config.truncated(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = config.init_params(&mut rng).unwrap();
    let e = encode_shape(&config, &params, &vs).unwrap();
    assert_eq!(e.pooled.len(), 1);
    assert_eq!(params.get("enc3d.head.w1").unwrap().rows(), 8);
    assert!(!params.contains("enc3d.l0.sel_w1"));
}

#[test]
fn schedule_must_decrease() {
    let mut c = EncoderConfig::new(8, 8, 12);
    c.schedule = vec![12, 12, 3];
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    c.schedule = vec![12, 6, 3];
    c.feature_dim = 7;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
}

#[test]
fn repeated_views_encode_deterministically() {
    let (config, params, _) = toy(3, 12, 8);
    let row = Matrix::row_vector(&[0.1, -0.4, 0.9, 1.2, -0.3, 0.0, 0.5, -1.1]);
    let feats = Matrix::vstack(&vec![&row; 12]).unwrap();
    let vs = ViewSet::new(feats, build_camera_rig(12).unwrap()).unwrap();
    let a = encode_shape(&config, &params, &vs).unwrap();
    let b = encode_shape(&config, &params, &vs).unwrap();
    assert_eq!(a, b);
}

#[test]
fn embedding_is_invariant_to_view_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for norm in [NormMode::Nodes, NormMode::Features] {
        let (mut config, _, vs) = toy(5, 12, 8);
        config.norm = norm;
        let params = config.init_params(&mut rng).unwrap();
        let base = encode_shape(&config, &params, &vs).unwrap();
        for _ in 0..10 {
            let mut perm: Vec<usize> = (0..12).collect();
            perm.shuffle(&mut rng);
            let e = encode_shape(&config, &params, &vs.permuted(&perm)).unwrap();
            assert!(e.vector.max_abs_diff(&base.vector) < 1e-9);
            for (p, q) in e.pooled.iter().zip(&base.pooled) {
                assert!(p.max_abs_diff(q) < 1e-9);
            }
        }
    }
}

/// Finite-difference check of a random projection of the embedding with
/// respect to every encoder parameter and the input features.
fn encoder_gradcheck(seed: u64, norm: NormMode, levels: usize) -> crate::tensor::GradCheck {
    let (config, _, vs) = toy(seed, 6, 8);
    let mut config = config.truncated(levels);
    config.norm = norm;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let params = config.init_params(&mut rng).unwrap();
    let mix = random(&mut rng, 1, 8, -1.0, 1.0);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut inputs: Vec<Matrix> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
    inputs.push(vs.features.clone());
    check_gradients("encode_shape", &inputs, FD_STEP, FD_TOLERANCE, |t, v| {
        let map: BTreeMap<String, Var> = names.iter().cloned().zip(v.iter().copied()).collect();
        let bound = Bound::from_vars(map);
        let trace = encode(t, &config, &bound, v[v.len() - 1], &vs.rig)?;
        let m = t.constant(mix.clone());
        let p = t.mul(trace.embedding, m)?;
        t.sum(p)
    })
    .unwrap()
}

#[test]
fn encoder_is_end_to_end_differentiable() {
    for seed in 0..20 {
        let c = encoder_gradcheck(seed, NormMode::Features, 2);
        let (rel, abs) = c.split_at(FD_RESOLUTION);
        assert!(c.passed_resolved(), "seed {seed}: relative {rel:.3e}, absolute {abs:.3e}");

        let single = encoder_gradcheck(seed, NormMode::Nodes, 1);
        assert!(single.passed(), "seed {seed}: {:.3e} at {:?}", single.max_rel_err(), single.worst());
    }
}

#[test]
fn node_standardization_erases_view_invariant_shapes() {
    // Identical views (any rotationally symmetric shape on a ring rig) leave
    // zero spread per column; standardizing over nodes maps every such shape
    // to the same output, while standardizing over features does not.
    let rig = build_camera_rig(12).unwrap();
    let g = knn_edges(&rig, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let w = random(&mut rng, 8, 8, -1.0, 1.0);
    let run = |row: &[f64], norm: NormMode| {
        let x = Matrix::vstack(&vec![&Matrix::row_vector(row); 12]).unwrap();
        let mut t = Tape::inference();
        let f = t.constant(x);
        let wv = t.constant(w.clone());
        let gamma = t.constant(Matrix::filled(1, 8, 1.0));
        let beta = t.constant(Matrix::filled(1, 8, 0.3));
        let (out, _) = local_gcn(&mut t, f, &g, wv, gamma, beta, Psi::Full { norm, slope: 0.2 }).unwrap();
        t.value(out).clone()
    };
    let a = [0.5, -1.0, 0.2, 0.9, -0.4, 1.3, 0.0, -0.8];
    let b = [-1.2, 0.3, 0.8, -0.1, 1.1, -0.6, 0.4, 0.7];
    assert!(run(&a, NormMode::Nodes).max_abs_diff(&run(&b, NormMode::Nodes)) < 1e-6);
    assert!(run(&a, NormMode::Features).max_abs_diff(&run(&b, NormMode::Features)) > 0.1);
}

#[test]
fn adapter_fixtures() {
    let cfg = AdapterConfig {
        in_dim: 5,
        hidden: 4,
        out_dim: 5,
        leaky_slope: 0.2,
    };
    let x = Matrix::from_rows(&[[0.3, -1.0, 2.0, 0.0, -0.7], [1.0, 1.0, -1.0, 0.5, 0.2]]).unwrap();
    let mut zero = ParamStore::new();
    zero.insert("ske.w_skip", Matrix::zeros(5, 5));
    zero.insert("ske.w1", Matrix::zeros(5, 4));
    zero.insert("ske.b1", Matrix::zeros(1, 4));
    zero.insert("ske.w2", Matrix::zeros(4, 5));
    zero.insert("ske.b2", Matrix::zeros(1, 5));
    assert_eq!(adapt_sketches(&cfg, &zero, &x).unwrap(), Matrix::zeros(2, 5));

    let mut ident = zero.clone();
    ident.insert("ske.w_skip", Matrix::identity(5));
    assert_eq!(adapt_sketches(&cfg, &ident, &x).unwrap(), x);

    let wrong = Matrix::zeros(1, 4);
    assert!(matches!(adapt_sketches(&cfg, &zero, &wrong), Err(Error::Config(_))));
}

#[test]
fn adapter_gradient() {
    let cfg = AdapterConfig {
        in_dim: 6,
        hidden: 5,
        out_dim: 4,
        leaky_slope: 0.2,
    };
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let params = cfg.init_params(&mut rng).unwrap();
        let x = random(&mut rng, 3, 6, -2.0, 2.0);
        let mix = random(&mut rng, 3, 4, -1.0, 1.0);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        let mut inputs: Vec<Matrix> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
        inputs.push(x);
        let c = check_gradients("sketch_adapter", &inputs, FD_STEP, FD_TOLERANCE, |t, v| {
            let map: BTreeMap<String, Var> = names.iter().cloned().zip(v.iter().copied()).collect();
            let y = sketch_adapter(t, &cfg, &Bound::from_vars(map), v[v.len() - 1])?;
            let m = t.constant(mix.clone());
            let p = t.mul(y, m)?;
            t.sum(p)
        })
        .unwrap();
        assert!(c.passed(), "seed {seed}: {:.3e}", c.max_rel_err());
    }
}
