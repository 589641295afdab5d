use citylike_core::network::{
    accuracy, cross_entropy_loss, l2_penalty, top_k, Activations, ArchitectureConfig, Checkpoint, InceptionBlockSpec,
    Mode, ModelParameters, Network, OptimizerConfig, ParamKind, TrainingState,
};
use citylike_core::seed;
use rand::Rng;

fn tiny_arch(classes: usize) -> ArchitectureConfig {
    ArchitectureConfig {
        input_size: 12,
        stem_channels: 4,
        blocks: vec![
            InceptionBlockSpec { b1: 2, b2_reduce: 2, b2: 3, b3_reduce: 2, b3: 2, pool_proj: 2, pool_after: true },
            InceptionBlockSpec { b1: 3, b2_reduce: 2, b2: 2, b3_reduce: 2, b3: 3, pool_proj: 2, pool_after: false },
        ],
        dropout_rate: 0.2,
        num_classes: classes,
        bn_momentum: 0.9,
        bn_eps: 1e-5,
    }
}

fn random_batch(n: usize, size: usize, s: u64) -> Activations<f64> {
    let mut rng = seed::rng(s, "batch", &[]);
    let mut x = Activations::zeros(n, 3, size, size);
    for v in &mut x.data {
        *v = rng.random_range(-1.0..1.0);
    }
    x
}

fn total_loss(net: &Network<f64>, p: &ModelParameters<f64>, x: &Activations<f64>, labels: &[usize], l2: f64) -> f64 {
    let fwd = net.forward_with(p, x, Mode::Train { dropout_seed: 11 }).unwrap();
    cross_entropy_loss(&fwd.probs, labels, fwd.num_classes) + l2_penalty(p, l2)
}

#[test]
fn gradients_match_central_differences() {
    let net: Network<f64> = Network::new(tiny_arch(3), 4).unwrap();
    let x = random_batch(4, 12, 9);
    let labels = [0, 2, 1, 2];
    let l2 = 1e-3;
    let fwd = net.forward_with(&net.params, &x, Mode::Train { dropout_seed: 11 }).unwrap();
    let grads = net.backward(&net.params, &fwd, &labels, l2).unwrap();
    let h = 1e-5;
    let mut checked = 0;
    for (ti, t) in net.params.tensors.iter().enumerate() {
        if !t.kind.trainable() {
            assert!(grads[ti].iter().all(|&g| g == 0.0));
            continue;
        }
        let mut numeric = vec![0.0; t.data.len()];
        for i in 0..t.data.len() {
            let mut p = net.params.clone();
            p.tensors[ti].data[i] += h;
            let up = total_loss(&net, &p, &x, &labels, l2);
            p.tensors[ti].data[i] -= 2.0 * h;
            let down = total_loss(&net, &p, &x, &labels, l2);
            numeric[i] = (up - down) / (2.0 * h);
        }
        let diff: f64 = grads[ti].iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na: f64 = grads[ti].iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let rel = diff / na.max(nn).max(1e-12);
        assert!(rel < 1e-4, "{}: relative error {rel:e}", t.name);
        checked += 1;
    }
    assert!(checked > 30);
}

#[test]
fn l2_gradient_alone_is_two_l2_w() {
    let net: Network<f64> = Network::new(tiny_arch(3), 4).unwrap();
    let x = random_batch(3, 12, 1);
    let labels = [0, 1, 2];
    let fwd = net.forward_with(&net.params, &x, Mode::Train { dropout_seed: 1 }).unwrap();
    let g0 = net.backward(&net.params, &fwd, &labels, 0.0).unwrap();
    let l2 = 0.25;
    let g1 = net.backward(&net.params, &fwd, &labels, l2).unwrap();
    for ((a, b), t) in g0.iter().zip(&g1).zip(&net.params.tensors) {
        for ((ga, gb), w) in a.iter().zip(b).zip(&t.data) {
            let extra = if t.kind == ParamKind::Weight { 2.0 * l2 * w } else { 0.0 };
            assert_eq!(*gb, *ga + extra);
        }
    }
}

#[test]
fn softmax_rows_are_normalized() {
    let net: Network<f32> = Network::new(ArchitectureConfig::toy(7), 3).unwrap();
    let mut x = Activations::zeros(5, 3, 64, 64);
    let mut rng = seed::rng(2, "x", &[]);
    for v in &mut x.data {
        *v = rng.random_range(-1.0..1.0);
    }
    for mode in [Mode::Eval, Mode::Train { dropout_seed: 5 }] {
        let f = net.forward(&x, mode).unwrap();
        for i in 0..5 {
            let row = f.probs_row(i);
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }
}

#[test]
fn zero_dense_gives_uniform_output() {
    let mut net: Network<f64> = Network::new(tiny_arch(4), 8).unwrap();
    net.zero_dense();
    let p = net.predict(&random_batch(2, 12, 3)).unwrap();
    assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn symmetric_labels_give_zero_dense_rows() {
    // zero input and zero dense: every sample has the same uniform output,
    // so a class labelled as often as 1/C of the batch gets no weight gradient
    let mut net: Network<f64> = Network::new(tiny_arch(2), 8).unwrap();
    net.zero_dense();
    let x = Activations::zeros(4, 3, 12, 12);
    let fwd = net.forward_with(&net.params, &x, Mode::Train { dropout_seed: 0 }).unwrap();
    let g = net.backward(&net.params, &fwd, &[0, 1, 0, 1], 0.0).unwrap();
    let wi = net.params.tensors.iter().position(|t| t.name == "dense.weight").unwrap();
    assert!(g[wi].iter().all(|&v| v.abs() < 1e-15));
}

#[test]
fn loss_analytic_values() {
    let c = 10;
    let uniform = vec![0.1f64; c * 3];
    let l = cross_entropy_loss(&uniform, &[0, 4, 9], c);
    assert!((l - 10f64.ln()).abs() < 1e-12);
    assert!((l - 2.302585).abs() < 1e-6);
    let onehot = [0.0f64, 1.0, 0.0];
    assert_eq!(cross_entropy_loss(&onehot, &[1], 3), 0.0);
    let half = [0.5f64, 0.25, 0.25];
    assert!((cross_entropy_loss(&half, &[0], 3) - 0.693147).abs() < 1e-6);
    // clamp keeps a zero probability finite
    assert!(cross_entropy_loss(&[1.0f64, 0.0], &[1], 2).is_finite());
}

#[test]
fn l2_penalty_skips_batch_norm() {
    let mut net: Network<f64> = Network::new(tiny_arch(2), 8).unwrap();
    for t in &mut net.params.tensors {
        t.data.fill(if t.kind == ParamKind::Weight { 1.0 } else { 5.0 });
    }
    let n_weights: usize =
        net.params.tensors.iter().filter(|t| t.kind == ParamKind::Weight).map(|t| t.data.len()).sum();
    assert_eq!(l2_penalty(&net.params, 0.5), 0.5 * n_weights as f64);
}

#[test]
fn eval_batch_norm_is_affine_in_input() {
    let net: Network<f64> = Network::new(tiny_arch(3), 2).unwrap();
    let x = random_batch(2, 12, 4);
    let a = net.forward(&x, Mode::Eval).unwrap();
    let b = net.forward(&x, Mode::Eval).unwrap();
    assert_eq!(a.probs, b.probs);
    // per-sample independence: a sample's output does not depend on its batch mates
    let mut single = Activations::zeros(1, 3, 12, 12);
    single.data.copy_from_slice(&x.data[..3 * 144]);
    let s = net.forward(&single, Mode::Eval).unwrap();
    for (u, v) in s.probs.iter().zip(&a.probs[..3]) {
        assert!((u - v).abs() < 1e-14);
    }
}

#[test]
fn topk_ties_prefer_lower_index() {
    assert_eq!(top_k(&[0.2f64, 0.4, 0.4, 0.0], 2), vec![1, 2]);
    assert_eq!(top_k(&[0.25f64; 4], 1), vec![0]);
    let probs = [1.0f64, 0.0, 0.0, 1.0];
    let r = accuracy(&probs, 2, &[0, 1]).unwrap();
    assert_eq!((r.top1, r.top5), (1.0, 1.0));
    assert!(accuracy::<f64>(&[], 2, &[]).is_err());
}

#[test]
fn random_classifier_accuracy_near_chance() {
    let (n, c) = (1000usize, 10usize);
    let mut rng = seed::rng(77, "random-classifier", &[]);
    let mut probs = Vec::with_capacity(n * c);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..c).map(|_| rng.random::<f64>()).collect();
        let s: f64 = row.iter().sum();
        probs.extend(row.iter().map(|v| v / s));
        labels.push(rng.random_range(0..c));
    }
    let r = accuracy(&probs, c, &labels).unwrap();
    let sd1 = (0.1f64 * 0.9 / n as f64).sqrt();
    let sd5 = (0.5f64 * 0.5 / n as f64).sqrt();
    assert!((r.top1 - 0.1).abs() < 3.0 * sd1, "top1 {}", r.top1);
    assert!((r.top5 - 0.5).abs() < 3.0 * sd5, "top5 {}", r.top5);
    assert!(r.top5 >= r.top1);
}

fn sample_checkpoint() -> Checkpoint {
    let net: Network<f32> = Network::new(ArchitectureConfig::toy(3), 21).unwrap();
    let mut vel = net.params.zeros_like();
    for (v, t) in vel.iter_mut().zip(&net.params.tensors) {
        if t.kind.trainable() {
            for (i, x) in v.iter_mut().enumerate() {
                *x = (i as f32 * 0.37).sin() * 1e-3;
            }
        }
    }
    let state = TrainingState {
        epoch: 4,
        seed: 21,
        optimizer: OptimizerConfig::default(),
        classes: vec!["a".into(), "b".into(), "c".into()],
    };
    Checkpoint::from_network(&net, state, Some(vel))
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let ck = sample_checkpoint();
    let bytes = ck.to_bytes().unwrap();
    assert_eq!(&bytes[..4], b"UTNC");
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.utnc");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let a = loaded.network().unwrap();
    let b = ck.network().unwrap();
    let x = Activations::from_nhwc(1, 64, 64, 3, &vec![0.25f32; 64 * 64 * 3]);
    assert_eq!(a.predict(&x).unwrap(), b.predict(&x).unwrap());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = sample_checkpoint().to_bytes().unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad_magic).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(Checkpoint::from_bytes(&longer).is_err());
}

#[test]
fn toy_output_matches_golden_vector() {
    let net: Network<f32> = Network::new(ArchitectureConfig::toy(5), 1234).unwrap();
    let mut data = vec![0f32; 2 * 64 * 64 * 3];
    for (i, v) in data.iter_mut().enumerate() {
        *v = ((i % 251) as f32 - 125.0) / 128.0;
    }
    let x = Activations::from_nhwc(2, 64, 64, 3, &data);
    let got = net.predict(&x).unwrap();
    let golden: Vec<f32> =
        serde_json::from_str(include_str!("golden/toy_forward.json")).expect("golden vector");
    assert_eq!(got.len(), golden.len());
    for (a, b) in got.iter().zip(&golden) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

/// Regenerates the golden vector: `cargo test --test network -- --ignored freeze`.
#[test]
#[ignore]
fn freeze_toy_golden() {
    let net: Network<f32> = Network::new(ArchitectureConfig::toy(5), 1234).unwrap();
    let mut data = vec![0f32; 2 * 64 * 64 * 3];
    for (i, v) in data.iter_mut().enumerate() {
        *v = ((i % 251) as f32 - 125.0) / 128.0;
    }
    let got = net.predict(&Activations::from_nhwc(2, 64, 64, 3, &data)).unwrap();
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/toy_forward.json");
    std::fs::write(path, serde_json::to_string_pretty(&got).unwrap() + "\n").unwrap();
}
