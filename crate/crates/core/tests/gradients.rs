//! Central-difference checks of every analytic gradient at 64-bit.

use hcnn::model::{forward, ForwardMode, NetworkConfig, Parameters};
use hcnn::ops::{
    cross_entropy_from_logits, separable_attribute_conv, separable_attribute_conv_backward,
    NormMode, SeparableFilterBank, SeparableSpec, Variant,
};
use hcnn::training::{backward, backward_from_logits};
use hcnn::{BoundaryMode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// max |a - n| / max(max |a|, max |n|) over one array.
fn group_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn loss(
    config: &NetworkConfig,
    params: &Parameters<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
) -> f64 {
    let acts = forward(config, params, x, ForwardMode::TRAIN).unwrap();
    cross_entropy_from_logits(&acts.logits, labels).unwrap()
}

fn check_network(config: &NetworkConfig, seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Parameters::<f64>::init(config, &mut rng).unwrap();
    // Move γ, β and the biases off their initial values so that every path
    // through the normalization is exercised.
    for b in &mut params.separable {
        for t in [&mut b.norm.gamma, &mut b.norm.beta, &mut b.bias] {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    }
    for t in [
        &mut params.layer1.bias,
        &mut params.layer2.bias,
        &mut params.layer3.bias,
    ] {
        for v in t.data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
    }
    let n = config.spatial_size;
    let x = random_tensor(&[2, n, n, 3], &mut rng);
    let labels = [1usize, 7];
    let acts = forward(config, &params, &x, ForwardMode::TRAIN).unwrap();
    let grads = backward(config, &params, &acts, &labels).unwrap();
    let names = params.trainable_names();
    let mut report = Vec::new();
    for (g, name) in names.iter().enumerate() {
        let len = params.trainable()[g].len();
        let mut numeric = vec![0.0; len];
        for i in 0..len {
            let orig = params.trainable()[g].data()[i];
            params.trainable_mut()[g].data_mut()[i] = orig + STEP;
            let up = loss(config, &params, &x, &labels);
            params.trainable_mut()[g].data_mut()[i] = orig - STEP;
            let down = loss(config, &params, &x, &labels);
            params.trainable_mut()[g].data_mut()[i] = orig;
            numeric[i] = (up - down) / (2.0 * STEP);
        }
        report.push((
            name.clone(),
            group_error(grads.trainable()[g].data(), &numeric),
        ));
    }
    report
}

fn assert_report(report: &[(String, f64)], tol: f64) {
    for (name, err) in report {
        assert!(*err < tol, "{name}: relative error {err:e}");
    }
}

#[test]
fn toy_network_standard_zero_pad() {
    assert_report(&check_network(&NetworkConfig::toy(), 1), 1e-3);
}

#[test]
fn toy_network_plus_periodic() {
    let config = NetworkConfig::toy()
        .with_variant(Variant::Plus)
        .with_boundary(BoundaryMode::Periodic);
    assert_report(&check_network(&config, 2), 1e-3);
}

#[test]
fn doubling_the_loss_doubles_the_gradient() {
    let config = NetworkConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = Parameters::<f64>::init(&config, &mut rng).unwrap();
    let x = random_tensor(&[2, 8, 8, 3], &mut rng);
    let acts = forward(&config, &params, &x, ForwardMode::TRAIN).unwrap();
    let d = random_tensor(&[2, 10], &mut rng);
    let g1 = backward_from_logits(&config, &params, &acts, &d).unwrap();
    let g2 = backward_from_logits(&config, &params, &acts, &d.scale(2.0)).unwrap();
    for (a, b) in g1.trainable().iter().zip(g2.trainable()) {
        for (&u, &v) in a.data().iter().zip(b.data()) {
            assert_eq!(2.0 * u, v);
        }
    }
}

#[test]
fn eval_activations_are_rejected() {
    let config = NetworkConfig::toy();
    let params = Parameters::<f64>::zeros(&config).unwrap();
    let x = Tensor::zeros(&[2, 8, 8, 3]);
    let acts = forward(&config, &params, &x, ForwardMode::EVAL).unwrap();
    assert!(backward(&config, &params, &acts, &[0, 1]).is_err());
}

fn group(b: &mut SeparableFilterBank<f64>, g: usize) -> &mut Tensor<f64> {
    match g {
        0 => &mut b.spatial,
        1 => &mut b.attribute,
        2 => &mut b.bias,
        3 => &mut b.norm.gamma,
        _ => &mut b.norm.beta,
    }
}

/// Layer-level check of the separable block in every normalization mode,
/// including the input gradient, against a random linear readout.
#[test]
fn separable_layer_all_modes() {
    for (seed, variant, norm, boundary, stride) in [
        (
            10,
            Variant::Standard,
            NormMode::Batch,
            BoundaryMode::ZeroPad,
            1,
        ),
        (
            11,
            Variant::Plus,
            NormMode::Batch,
            BoundaryMode::Periodic,
            2,
        ),
        (
            12,
            Variant::Standard,
            NormMode::Running,
            BoundaryMode::Periodic,
            1,
        ),
        (
            13,
            Variant::Plus,
            NormMode::Bypass,
            BoundaryMode::ZeroPad,
            2,
        ),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 8;
        let mut bank = SeparableFilterBank::<f64>::zeros(2, [3, 3], [3, 5], [k / 2, k], 6);
        for t in [
            &mut bank.spatial,
            &mut bank.attribute,
            &mut bank.bias,
            &mut bank.norm.gamma,
            &mut bank.norm.beta,
        ] {
            *t = random_tensor(t.shape(), &mut rng);
        }
        bank.norm.running_mean = random_tensor(bank.norm.running_mean.shape(), &mut rng);
        bank.norm.running_var =
            Tensor::from_fn(bank.norm.running_var.shape(), |_| rng.gen_range(0.5..2.0));
        let spec = SeparableSpec {
            spatial_stride: stride,
            variant,
            mode: boundary,
        };
        let x = random_tensor(&[2, 5, 5, k / 4, k / 2, k], &mut rng);
        let (y, cache) = separable_attribute_conv(&x, &bank, &spec, norm).unwrap();
        let readout = random_tensor(y.shape(), &mut rng);
        let objective = |x: &Tensor<f64>, bank: &SeparableFilterBank<f64>| {
            let (y, _) = separable_attribute_conv(x, bank, &spec, norm).unwrap();
            y.data()
                .iter()
                .zip(readout.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let (dx, grads) =
            separable_attribute_conv_backward(&readout, &cache, &bank, variant, true).unwrap();
        let dx = dx.unwrap();
        let mut numeric = vec![0.0; x.len()];
        let mut xp = x.clone();
        for i in 0..x.len() {
            let o = x.data()[i];
            xp.data_mut()[i] = o + STEP;
            let up = objective(&xp, &bank);
            xp.data_mut()[i] = o - STEP;
            let down = objective(&xp, &bank);
            xp.data_mut()[i] = o;
            numeric[i] = (up - down) / (2.0 * STEP);
        }
        let err = group_error(dx.data(), &numeric);
        assert!(err < 1e-4, "{variant:?}/{norm:?} input: {err:e}");
        let analytic = [
            grads.spatial,
            grads.attribute,
            grads.bias,
            grads.gamma,
            grads.beta,
        ];
        for (g, a) in analytic.iter().enumerate() {
            let mut b = bank.clone();
            let len = a.len();
            let mut numeric = vec![0.0; len];
            for i in 0..len {
                let o = group(&mut b, g).data()[i];
                group(&mut b, g).data_mut()[i] = o + STEP;
                let up = objective(&x, &b);
                group(&mut b, g).data_mut()[i] = o - STEP;
                let down = objective(&x, &b);
                group(&mut b, g).data_mut()[i] = o;
                numeric[i] = (up - down) / (2.0 * STEP);
            }
            let err = group_error(a, &numeric);
            assert!(err < 1e-4, "{variant:?}/{norm:?} group {g}: {err:e}");
        }
    }
}
