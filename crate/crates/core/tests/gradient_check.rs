use attend_core::tensornet::{
    backward, backward_accumulate, focal_loss, forward, logits_end, FocalConfig, LayerSpec, ParameterSet, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// |a − n| relative to the larger magnitude, floored so that gradients at
/// round-off level are compared absolutely.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

struct Case {
    specs: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    params: ParameterSet,
    input: Vec<f64>,
    target: usize,
    loss: FocalConfig,
}

fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let in_ch = rng.random_range(1..=2);
    let side = rng.random_range(5..=8);
    let out_ch = rng.random_range(1..=3);
    let kernel = if rng.random_bool(0.5) { 3 } else { 2 };
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=1);
    let conv_side = (side + 2 * pad - kernel) / stride + 1;
    let pool_side = conv_side / 2;
    let flat = out_ch * pool_side * pool_side;
    let hidden = rng.random_range(3..=6);
    let classes = rng.random_range(2..=5);
    let specs = vec![
        LayerSpec::conv(in_ch, out_ch, kernel, stride, pad),
        LayerSpec::Relu,
        LayerSpec::pool(2, 2),
        LayerSpec::Flatten,
        LayerSpec::dense(flat, hidden),
        LayerSpec::Relu,
        LayerSpec::dense(hidden, classes),
        LayerSpec::Softmax,
    ];
    let mut params = ParameterSet::he_uniform(&specs, rng);
    // non-zero biases so every bias gradient path is exercised
    for t in params.tensors_mut() {
        if t.shape().len() == 1 {
            t.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
    }
    let input = (0..in_ch * side * side).map(|_| rng.random_range(-1.0..1.0)).collect();
    let gammas = [0.0, 0.5, 1.0, 2.0, 3.5];
    Case {
        specs,
        input_shape: vec![in_ch, side, side],
        params,
        input,
        target: rng.random_range(0..classes),
        loss: FocalConfig {
            gamma: gammas[rng.random_range(0..gammas.len())],
            alpha: (0..classes).map(|_| rng.random_range(0.25..2.0)).collect(),
        },
    }
}

fn loss_of(c: &Case, params: &ParameterSet, input: &[f64]) -> f64 {
    let x = Tensor::new(c.input_shape.clone(), input.to_vec()).unwrap();
    let (probs, _) = forward(&c.specs, params, &x).unwrap();
    focal_loss(probs.data(), c.target, &c.loss).unwrap().0
}

/// Worst relative error over every parameter and every input element.
fn check_case(c: &Case) -> f64 {
    let x = Tensor::new(c.input_shape.clone(), c.input.clone()).unwrap();
    let (probs, cache) = forward(&c.specs, &c.params, &x).unwrap();
    let (_, g_logits) = focal_loss(probs.data(), c.target, &c.loss).unwrap();
    let mut grads = ParameterSet::zeros(&c.specs);
    let dx = backward_accumulate(&c.specs, &c.params, &cache, logits_end(&c.specs), &g_logits, &mut grads).unwrap();

    let mut worst: f64 = 0.0;
    let analytic: Vec<f64> = grads.tensors().flat_map(|t| t.data().to_vec()).collect();
    let mut k = 0;
    let n_tensors = c.params.tensors().count();
    for ti in 0..n_tensors {
        let len = c.params.tensors().nth(ti).unwrap().len();
        for j in 0..len {
            let mut plus = c.params.clone();
            plus.tensors_mut().nth(ti).unwrap().data_mut()[j] += H;
            let mut minus = c.params.clone();
            minus.tensors_mut().nth(ti).unwrap().data_mut()[j] -= H;
            let num = (loss_of(c, &plus, &c.input) - loss_of(c, &minus, &c.input)) / (2.0 * H);
            worst = worst.max(rel_err(analytic[k], num));
            k += 1;
        }
    }
    for j in 0..c.input.len() {
        let mut plus = c.input.clone();
        plus[j] += H;
        let mut minus = c.input.clone();
        minus[j] -= H;
        let num = (loss_of(c, &c.params, &plus) - loss_of(c, &c.params, &minus)) / (2.0 * H);
        worst = worst.max(rel_err(dx[j], num));
    }
    worst
}

#[test]
fn fused_softmax_focal_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..24 {
        let c = random_case(&mut rng);
        let err = check_case(&c);
        assert!(err < TOL, "case {i} ({:?}, gamma {}): worst relative error {err:e}", c.specs, c.loss.gamma);
    }
}

#[test]
fn softmax_layer_backward_matches_finite_differences() {
    // L = Σ c_i · softmax(W x + b)_i, differentiated through the softmax layer itself
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let (n_in, n_out) = (rng.random_range(2..6), rng.random_range(2..6));
        let specs = vec![LayerSpec::dense(n_in, n_out), LayerSpec::Softmax];
        let params = ParameterSet::he_uniform(&specs, &mut rng);
        let weights: Vec<f64> = (0..n_out).map(|_| rng.random_range(-2.0..2.0)).collect();
        let input: Vec<f64> = (0..n_in).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |p: &ParameterSet, x: &[f64]| {
            let (y, _) = forward(&specs, p, &Tensor::vector(x.to_vec())).unwrap();
            y.data().iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = forward(&specs, &params, &Tensor::vector(input.clone())).unwrap();
        let (grads, dx) = backward(&specs, &params, &cache, &Tensor::vector(weights.clone())).unwrap();
        for j in 0..n_in {
            let mut p = input.clone();
            p[j] += H;
            let mut m = input.clone();
            m[j] -= H;
            let num = (objective(&params, &p) - objective(&params, &m)) / (2.0 * H);
            assert!(rel_err(dx.data()[j], num) < TOL);
        }
        let gw = grads.layer(0).unwrap().weight.data().to_vec();
        for (j, &a) in gw.iter().enumerate() {
            let mut p = params.clone();
            p.layer_mut(0).unwrap().weight.data_mut()[j] += H;
            let mut m = params.clone();
            m.layer_mut(0).unwrap().weight.data_mut()[j] -= H;
            let num = (objective(&p, &input) - objective(&m, &input)) / (2.0 * H);
            assert!(rel_err(a, num) < TOL);
        }
    }
}

#[test]
fn deep_chain_with_two_conv_stages() {
    let specs = vec![
        LayerSpec::conv(1, 2, 3, 1, 1),
        LayerSpec::Relu,
        LayerSpec::pool(2, 2),
        LayerSpec::conv(2, 3, 3, 1, 1),
        LayerSpec::Relu,
        LayerSpec::pool(2, 2),
        LayerSpec::Flatten,
        LayerSpec::dense(12, 4),
        LayerSpec::Softmax,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let c = Case {
        params: ParameterSet::he_uniform(&specs, &mut rng),
        specs,
        input_shape: vec![1, 8, 8],
        input: (0..64).map(|_| rng.random_range(0.0..1.0)).collect(),
        target: 2,
        loss: FocalConfig {
            gamma: 2.0,
            alpha: vec![0.5, 1.0, 1.5, 1.0],
        },
    };
    assert!(check_case(&c) < TOL);
}
