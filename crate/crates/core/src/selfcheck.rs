//! Built-in consistency checks run by `hcnn selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analysis::covariance_probe;
use crate::conv::conv_nd;
use crate::error::Result;
use crate::model::{count_parameters, forward, ForwardMode, NetworkConfig, Parameters};
use crate::ops::{
    cross_entropy_from_logits, elu, separable_attribute_conv, NormMode, SeparableFilterBank,
    SeparableSpec, Variant,
};
use crate::tensor::{BoundaryMode, Tensor};
use crate::training::backward;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckResult {
    fn below(name: &str, value: f64, tolerance: f64, detail: String) -> Self {
        CheckResult {
            name: name.into(),
            passed: value <= tolerance,
            value,
            tolerance,
            detail,
        }
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Direct evaluation of `out[m] = Σ_k z[s m + k - anchor] w[k]` one output
/// and one tap at a time.
pub fn brute_force_conv(
    z: &Tensor<f64>,
    w: &Tensor<f64>,
    axes: &[usize],
    mode: BoundaryMode,
    strides: &[usize],
) -> Tensor<f64> {
    let mut out_shape = z.shape().to_vec();
    for (i, &a) in axes.iter().enumerate() {
        out_shape[a] = z.shape()[a].div_ceil(strides[i]);
    }
    Tensor::from_fn(&out_shape, |m| {
        let mut acc = 0.0;
        let mut src = m.to_vec();
        'taps: for t in 0..w.len() {
            let mut k = vec![0; axes.len()];
            let mut rem = t;
            for i in (0..axes.len()).rev() {
                k[i] = rem % w.shape()[i];
                rem /= w.shape()[i];
            }
            for (i, &a) in axes.iter().enumerate() {
                let n = z.shape()[a] as isize;
                let pos =
                    (strides[i] * m[a]) as isize + k[i] as isize - (w.shape()[i] / 2) as isize;
                src[a] = match mode {
                    BoundaryMode::Periodic => pos.rem_euclid(n) as usize,
                    BoundaryMode::ZeroPad if (0..n).contains(&pos) => pos as usize,
                    BoundaryMode::ZeroPad => continue 'taps,
                };
            }
            acc += z.get(&src) * w.get(&k);
        }
        acc
    })
}

pub fn conv_check(cases: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let rank = rng.gen_range(1..=3);
        let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..=5)).collect();
        let n_axes = rng.gen_range(1..=rank);
        let mut axes: Vec<usize> = (0..rank).collect();
        for i in (1..rank).rev() {
            axes.swap(i, rng.gen_range(0..=i));
        }
        axes.truncate(n_axes);
        let mode = if case % 2 == 0 {
            BoundaryMode::ZeroPad
        } else {
            BoundaryMode::Periodic
        };
        let fshape: Vec<usize> = axes.iter().map(|&a| rng.gen_range(1..=shape[a])).collect();
        let strides: Vec<usize> = axes.iter().map(|_| rng.gen_range(1..=2)).collect();
        let z = random(&shape, &mut rng);
        let w = random(&fshape, &mut rng);
        let fast = conv_nd(&z, &w, &axes, mode, &strides)?;
        worst = worst.max(fast.relative_diff(&brute_force_conv(&z, &w, &axes, mode, &strides))?);
    }
    Ok(CheckResult::below(
        "conv_oracle",
        worst,
        1e-10,
        format!("{cases} random instances"),
    ))
}

/// End-to-end central differences on a two-image batch, every trainable
/// scalar, reporting the worst per-array relative error.
pub fn gradient_check(config: &NetworkConfig, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Parameters::<f64>::init(config, &mut rng)?;
    for t in params.trainable_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    let n = config.spatial_size;
    let x = random(&[2, n, n, config.input_channels], &mut rng);
    let labels = [0, config.num_classes - 1];
    let loss = |p: &Parameters<f64>| -> Result<f64> {
        let acts = forward(config, p, &x, ForwardMode::TRAIN)?;
        cross_entropy_from_logits(&acts.logits, &labels)
    };
    let acts = forward(config, &params, &x, ForwardMode::TRAIN)?;
    let grads = backward(config, &params, &acts, &labels)?;
    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    for (g, name) in params.trainable_names().into_iter().enumerate() {
        let analytic = grads.trainable()[g].data().to_vec();
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = params.trainable()[g].data()[i];
            params.trainable_mut()[g].data_mut()[i] = orig + h;
            let up = loss(&params)?;
            params.trainable_mut()[g].data_mut()[i] = orig - h;
            let down = loss(&params)?;
            params.trainable_mut()[g].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            diff = diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        let rel = if scale > 0.0 { diff / scale } else { 0.0 };
        if rel >= worst.0 {
            worst = (rel, name);
        }
    }
    Ok(CheckResult::below(
        "gradient",
        worst.0,
        1e-3,
        format!("worst array {}", worst.1),
    ))
}

pub fn invariance_check(config: &NetworkConfig, seed: u64) -> Result<CheckResult> {
    let config = config.clone().with_boundary(BoundaryMode::Periodic);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = Parameters::<f64>::init(&config, &mut rng)?;
    let n = config.spatial_size;
    let x = random(&[2, n, n, config.input_channels], &mut rng);
    let report = covariance_probe(&config, &params, &x, 1e-5)?;
    let gated = report.entries.iter().filter(|e| e.gated).count();
    Ok(CheckResult::below(
        &format!("invariance_{:?}", config.variant).to_lowercase(),
        report.max_gated_deviation,
        1e-5,
        format!("{gated} splices"),
    ))
}

/// Standard separable layer against `conv_nd` with the materialized filter,
/// running-mode normalization folded into per-rank scales.
pub fn separable_equivalence_check(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, q, kout) = (8, 4, 6);
    let mut worst = 0.0f64;
    for (mode, stride) in [(BoundaryMode::ZeroPad, 2), (BoundaryMode::Periodic, 1)] {
        let mut bank = SeparableFilterBank::<f64>::zeros(q, [3, 3], [3, 5], [k / 2, k], kout);
        bank.spatial = random(bank.spatial.shape(), &mut rng);
        bank.attribute = random(bank.attribute.shape(), &mut rng);
        bank.bias = random(bank.bias.shape(), &mut rng);
        let gamma: Vec<f64> = (0..q).map(|_| rng.gen_range(0.5..1.5)).collect();
        for (i, g) in bank.norm.gamma.data_mut().iter_mut().enumerate() {
            *g = gamma[i % q];
        }
        let x = random(&[2, 5, 5, k / 4, k / 2, k], &mut rng);
        let spec = SeparableSpec {
            spatial_stride: stride,
            variant: Variant::Standard,
            mode,
        };
        let (y, _) = separable_attribute_conv(&x, &bank, &spec, NormMode::Running)?;
        let scale: Vec<f64> = gamma
            .iter()
            .map(|g| g / (1.0 + bank.norm.eps).sqrt())
            .collect();
        let dense = bank.materialize(&scale);
        let marginal = x.sum_axis(3, false)?;
        let mut per_channel = Vec::with_capacity(kout);
        for v in 0..kout {
            let d = dense.shape();
            let w = Tensor::from_fn(&d[1..], |i| dense.get(&[v, i[0], i[1], i[2], i[3]]));
            per_channel.push(conv_nd(
                &marginal,
                &w,
                &[1, 2, 3, 4],
                mode,
                &[stride, stride, 2, 2],
            )?);
        }
        let s = per_channel[0].shape().to_vec();
        let stacked = Tensor::from_fn(&[s[0], s[1], s[2], s[3], s[4], kout], |i| {
            per_channel[i[5]].get(&i[..5])
        });
        worst = worst.max(y.relative_diff(&elu(&stacked, &bank.bias)?)?);
    }
    Ok(CheckResult::below(
        "separable_equivalence",
        worst,
        1e-5,
        "zero-pad stride 2, periodic stride 1".into(),
    ))
}

/// Filter counts of the four reference configurations, pinned from the
/// counting oracle in the acceptance suite.
pub const PINNED_COUNTS: [(&str, usize); 4] = [
    ("cifar10", 97_650),
    ("cifar100", 250_308),
    ("cifar10_plus", 316_016),
    ("cifar100_plus", 842_608),
];

pub fn preset(name: &str) -> Option<NetworkConfig> {
    Some(match name {
        "cifar10" => NetworkConfig::cifar10(),
        "cifar100" => NetworkConfig::cifar100(),
        "cifar10_plus" => NetworkConfig::cifar10().with_variant(Variant::Plus),
        "cifar100_plus" => NetworkConfig::cifar100().with_variant(Variant::Plus),
        "toy" => NetworkConfig::toy(),
        "desk" => NetworkConfig::desk(),
        _ => return None,
    })
}

pub fn count_check() -> Result<CheckResult> {
    let mut bad = Vec::new();
    for (name, pinned) in PINNED_COUNTS {
        let got = count_parameters(&preset(name).expect("known preset"))?.total;
        if got != pinned {
            bad.push(format!("{name}: {got} != {pinned}"));
        }
    }
    Ok(CheckResult {
        name: "parameter_counts".into(),
        passed: bad.is_empty(),
        value: bad.len() as f64,
        tolerance: 0.0,
        detail: if bad.is_empty() {
            "all pinned".into()
        } else {
            bad.join("; ")
        },
    })
}

/// Every check, in a fixed order.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let toy = NetworkConfig::toy();
    Ok(vec![
        conv_check(60, seed)?,
        gradient_check(&toy, seed)?,
        invariance_check(&toy, seed)?,
        invariance_check(&toy.clone().with_variant(Variant::Plus), seed)?,
        separable_equivalence_check(seed)?,
        count_check()?,
    ])
}
