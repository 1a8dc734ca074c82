use attend_core::par::Exec;
use attend_core::tensornet::{
    batch_gradients, cross_entropy, decode_weights, encode_weights, evaluate, focal_loss, softmax, train, AlphaSpec, Dataset, FocalConfig,
    Head, LayerSpec, LossSettings, MultiHeadNet, ParameterSet, Sample, TrainConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dense_net(seed: u64, heads: usize, input: usize, classes: usize) -> MultiHeadNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = vec![LayerSpec::Flatten, LayerSpec::dense(input, 8), LayerSpec::Relu, LayerSpec::dense(8, classes), LayerSpec::Softmax];
    let heads = (0..heads)
        .map(|_| Head {
            params: ParameterSet::he_uniform(&specs, &mut rng),
            specs: specs.clone(),
        })
        .collect();
    MultiHeadNet::new(vec![1, 2, 2], heads).unwrap()
}

/// Four Gaussian blobs in 4-D, one per class; head 1 sees the class parity.
fn blobs(seed: u64, n: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| {
            let c = i % 4;
            let mut input = vec![0.0; 4];
            input[c] = 3.0;
            for v in input.iter_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
            Sample {
                input,
                labels: vec![c, c % 2],
            }
        })
        .collect();
    Dataset::new(samples)
}

fn two_head_net(seed: u64) -> MultiHeadNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mk = |classes: usize, rng: &mut ChaCha8Rng| {
        let specs = vec![LayerSpec::Flatten, LayerSpec::dense(4, 8), LayerSpec::Relu, LayerSpec::dense(8, classes), LayerSpec::Softmax];
        Head {
            params: ParameterSet::he_uniform(&specs, rng),
            specs,
        }
    };
    let heads = vec![mk(4, &mut rng), mk(2, &mut rng)];
    MultiHeadNet::new(vec![1, 2, 2], heads).unwrap()
}

#[test]
fn separable_toy_reaches_full_accuracy() {
    for seed in [1, 2, 3] {
        let net = two_head_net(seed);
        let cfg = TrainConfig {
            max_epochs: 20,
            batch_size: 16,
            early_stop_patience: 20,
            rng_seed: seed,
            adam: attend_core::tensornet::AdamConfig {
                learning_rate: 0.01,
                ..Default::default()
            },
            ..TrainConfig::default()
        };
        let (trained, history) = train(&net, &blobs(seed, 200), &blobs(seed + 100, 80), &cfg).unwrap();
        let losses = cfg.loss.resolve(&trained, &blobs(seed, 200)).unwrap();
        let eval = evaluate(&trained, &blobs(seed + 200, 80), &losses, Exec::Sequential).unwrap();
        assert_eq!(eval.head_accuracy, vec![1.0, 1.0], "seed {seed}: {history:?}");
    }
}

#[test]
fn rising_validation_loss_stops_after_patience() {
    let train_set = blobs(5, 64);
    // validation labels contradict the training labels, so its loss climbs
    let mut val = blobs(5, 64);
    for s in &mut val.samples {
        s.labels = vec![(s.labels[0] + 1) % 4, 1 - s.labels[1]];
    }
    let cfg = TrainConfig {
        max_epochs: 10,
        batch_size: 8,
        early_stop_patience: 1,
        adam: attend_core::tensornet::AdamConfig {
            learning_rate: 0.01,
            ..Default::default()
        },
        ..TrainConfig::default()
    };
    let (best, history) = train(&two_head_net(4), &train_set, &val, &cfg).unwrap();
    assert!(history.stopped_early);
    // one epoch past the best, then stop
    assert_eq!(history.epochs.len(), history.best_epoch + 1);
    assert!(history.epochs.len() < cfg.max_epochs);
    let best_loss = history.epochs[history.best_epoch - 1].val_loss;
    assert!(history.epochs.iter().all(|e| e.val_loss >= best_loss));
    // the returned weights are the best epoch's weights
    let losses = cfg.loss.resolve(&best, &train_set).unwrap();
    let eval = evaluate(&best, &val, &losses, Exec::Sequential).unwrap();
    assert!((eval.mean_loss - best_loss).abs() < 1e-12);
}

#[test]
fn training_is_bit_deterministic_across_exec_modes() {
    let data = blobs(9, 96);
    let val = blobs(10, 32);
    let run = |exec| {
        let cfg = TrainConfig {
            max_epochs: 3,
            batch_size: 20,
            early_stop_patience: 3,
            exec,
            ..TrainConfig::default()
        };
        train(&two_head_net(11), &data, &val, &cfg).unwrap()
    };
    let (a, ha) = run(Exec::Sequential);
    let (b, hb) = run(Exec::Sequential);
    let (c, hc) = run(Exec::Parallel);
    assert_eq!(encode_weights(&a, "x"), encode_weights(&b, "x"));
    assert_eq!(encode_weights(&a, "x"), encode_weights(&c, "x"));
    assert_eq!(ha, hb);
    assert_eq!(ha, hc);
}

#[test]
fn batch_gradient_is_mean_of_sample_gradients() {
    let net = two_head_net(12);
    let data = blobs(13, 19);
    let losses = LossSettings::focal_default().resolve(&net, &data).unwrap();
    let all: Vec<&Sample> = data.samples.iter().collect();
    let (loss, grads) = batch_gradients(&net, &all, &losses, Exec::Parallel).unwrap();
    let mut sum_loss = 0.0;
    let mut acc: Vec<ParameterSet> = net.heads.iter().map(|h| ParameterSet::zeros(&h.specs)).collect();
    for s in &all {
        let (l, g) = batch_gradients(&net, &[*s], &losses, Exec::Sequential).unwrap();
        sum_loss += l;
        for (a, gi) in acc.iter_mut().zip(&g) {
            a.add_assign(gi);
        }
    }
    assert!((loss - sum_loss / 19.0).abs() < 1e-12);
    for (a, g) in acc.iter_mut().zip(&grads) {
        a.scale(1.0 / 19.0);
        for (x, y) in a.tensors().zip(g.tensors()) {
            for (u, v) in x.data().iter().zip(y.data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn alpha_resolution() {
    let net = dense_net(1, 1, 4, 3);
    let data = Dataset::new(
        [0, 0, 0, 1, 2, 2]
            .iter()
            .map(|&c| Sample {
                input: vec![0.0; 4],
                labels: vec![c],
            })
            .collect(),
    );
    let cfgs = LossSettings::focal_default().resolve(&net, &data).unwrap();
    let a = &cfgs[0].alpha;
    assert!((a.iter().sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
    assert!(a[1] > a[2] && a[2] > a[0]);
    let explicit = LossSettings {
        gamma: 1.0,
        alpha: AlphaSpec::Explicit(vec![vec![1.0, 2.0]]),
    };
    assert!(explicit.resolve(&net, &data).is_err());
}

#[test]
fn label_and_input_errors_are_reported() {
    let net = dense_net(1, 1, 4, 3);
    let bad = Dataset::new(vec![Sample {
        input: vec![0.0; 4],
        labels: vec![5],
    }]);
    assert!(train(&net, &bad, &bad, &TrainConfig::default()).is_err());
    let short = Dataset::new(vec![Sample {
        input: vec![0.0; 3],
        labels: vec![0],
    }]);
    assert!(train(&net, &short, &short, &TrainConfig::default()).is_err());
    let cfg = TrainConfig {
        early_stop_patience: 40,
        ..TrainConfig::default()
    };
    assert!(cfg.validate().is_err());
}

#[test]
fn weights_roundtrip_through_bytes() {
    let net = two_head_net(21);
    let (_, back) = decode_weights(&encode_weights(&net, "toy")).unwrap();
    assert_eq!(back, net);
}

#[test]
fn gamma_zero_unit_alpha_is_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..1000 {
        let k = rng.random_range(2..=6);
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-6.0..6.0)).collect();
        let p = softmax(&logits);
        let t = rng.random_range(0..k);
        let (fl, _) = focal_loss(&p, t, &FocalConfig::cross_entropy(k)).unwrap();
        assert!((fl - cross_entropy(&p, t)).abs() < 1e-12);
    }
}

#[test]
fn focal_hand_value() {
    // p_t = 0.9, gamma 2, alpha 0.25: 0.25 · 0.01 · −ln 0.9
    let cfg = FocalConfig {
        gamma: 2.0,
        alpha: vec![0.25, 0.25],
    };
    let (l, _) = focal_loss(&[0.9, 0.1], 0, &cfg).unwrap();
    assert!((l - 2.63401e-4).abs() < 1e-9);
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-700.0f64..700.0, 1..12), shift in -50.0f64..50.0) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn focal_loss_falls_as_target_probability_rises(p1 in 0.01f64..0.98, dp in 0.001f64..0.5, gamma in 0.0f64..5.0) {
        let p2 = (p1 + dp).min(0.999);
        let cfg = FocalConfig { gamma, alpha: vec![1.0, 1.0] };
        let l1 = focal_loss(&[p1, 1.0 - p1], 0, &cfg).unwrap().0;
        let l2 = focal_loss(&[p2, 1.0 - p2], 0, &cfg).unwrap().0;
        prop_assert!(l2 <= l1);
    }

    #[test]
    fn focal_never_exceeds_weighted_cross_entropy(p in 0.0f64..1.0, gamma in 0.0f64..5.0, alpha in 0.1f64..3.0) {
        let cfg = FocalConfig { gamma, alpha: vec![alpha, 1.0] };
        let (l, g) = focal_loss(&[p, 1.0 - p], 0, &cfg).unwrap();
        prop_assert!(l.is_finite() && l >= 0.0);
        prop_assert!(l <= alpha * cross_entropy(&[p, 1.0 - p], 0) + 1e-15);
        prop_assert!(g.iter().all(|v| v.is_finite()));
        // gradients w.r.t. logits sum to zero
        prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);
    }
}
