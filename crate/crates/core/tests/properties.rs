//! Algebraic properties of the convolution, separable layer and analysis code.

use hcnn::analysis::{nearest_translated, smooth, AttributeArray};
use hcnn::conv::conv_nd;
use hcnn::model::{forward, ForwardMode, NetworkConfig, Parameters};
use hcnn::ops::{
    elu, separable_attribute_conv, NormMode, SeparableFilterBank, SeparableSpec, Variant,
};
use hcnn::{BoundaryMode, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn mode_of(periodic: bool) -> BoundaryMode {
    if periodic {
        BoundaryMode::Periodic
    } else {
        BoundaryMode::ZeroPad
    }
}

/// Rank-3 input, 2-D filter over axes (0, 2), with extents drawn so that the
/// filter never exceeds the axis.
fn conv_case() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, u64)> {
    (2usize..7, 1usize..4, 2usize..7, any::<u64>()).prop_flat_map(|(a, b, c, seed)| {
        (
            Just(vec![a, b, c]),
            (1..=a.min(4), 1..=c.min(4)),
            Just(seed),
        )
            .prop_map(|(shape, (fa, fc), seed)| (shape, vec![fa, fc], seed))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn periodic_conv_commutes_with_translation(
        (shape, fshape, seed) in conv_case(), ta in -6isize..6, tc in -6isize..6,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = random(&shape, &mut rng);
        let w = random(&fshape, &mut rng);
        let p = BoundaryMode::Periodic;
        let lhs = conv_nd(&z.translate(0, ta, p).unwrap().translate(2, tc, p).unwrap(), &w, &[0, 2], p, &[1, 1]).unwrap();
        let rhs = conv_nd(&z, &w, &[0, 2], p, &[1, 1]).unwrap().translate(0, ta, p).unwrap().translate(2, tc, p).unwrap();
        prop_assert!(lhs.relative_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn conv_is_linear((shape, fshape, seed) in conv_case(), periodic: bool, alpha in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (z1, z2) = (random(&shape, &mut rng), random(&shape, &mut rng));
        let w = random(&fshape, &mut rng);
        let m = mode_of(periodic);
        let c = |z: &Tensor<f64>| conv_nd(z, &w, &[0, 2], m, &[1, 2]).unwrap();
        let lhs = c(&z1.scale(alpha).add(&z2).unwrap());
        let rhs = c(&z1).scale(alpha).add(&c(&z2)).unwrap();
        prop_assert!(lhs.relative_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn strided_periodic_conv_shifts_by_quotient(
        half in 2usize..5, f in 1usize..4, t in -4isize..4, seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2 * half;
        let z = random(&[n, 3], &mut rng);
        let w = random(&[f.min(n)], &mut rng);
        let p = BoundaryMode::Periodic;
        let lhs = conv_nd(&z.translate(0, 2 * t, p).unwrap(), &w, &[0], p, &[2]).unwrap();
        let rhs = conv_nd(&z, &w, &[0], p, &[2]).unwrap().translate(0, t, p).unwrap();
        prop_assert!(lhs.relative_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn smoothing_commutes_with_circular_shift(
        rows in 1usize..9, cols in 1usize..5, width in 1usize..5, tau in -10isize..10, seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[rows, cols], &mut rng);
        let p = BoundaryMode::Periodic;
        let a = smooth(&x.translate(0, tau, p).unwrap(), width).unwrap();
        let b = smooth(&x, width).unwrap().translate(0, tau, p).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn retrieval_ignores_corpus_order(seed: u64, tau in -3isize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let make = |id: u64, rng: &mut ChaCha8Rng| AttributeArray {
            // Coarse values make exact distance ties likely.
            values: Tensor::from_fn(&[4, 3], |_| rng.gen_range(0..2) as f64),
            image_id: id,
            depth: 4,
            center: [1, 1],
            label: None,
        };
        let query = make(100, &mut rng);
        let mut corpus: Vec<_> = (0..12).map(|i| make(i, &mut rng)).collect();
        let a = nearest_translated(&query, tau, &corpus, 2).unwrap();
        corpus.reverse();
        corpus.swap(0, 5);
        let b = nearest_translated(&query, tau, &corpus, 2).unwrap();
        prop_assert_eq!(a, b);
    }
}

fn random_bank(q: usize, kout: usize, k: usize, rng: &mut ChaCha8Rng) -> SeparableFilterBank<f64> {
    let mut bank = SeparableFilterBank::zeros(q, [3, 3], [3, 5], [k / 2, k], kout);
    bank.spatial = random(bank.spatial.shape(), rng);
    bank.attribute = random(bank.attribute.shape(), rng);
    bank.bias = random(bank.bias.shape(), rng);
    bank
}

#[test]
fn separable_layer_is_stride_two_covariant_along_attributes() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let k = 8;
    let bank = random_bank(3, 6, k, &mut rng);
    let x = random(&[2, 4, 4, k / 4, k / 2, k], &mut rng);
    let p = BoundaryMode::Periodic;
    for variant in [Variant::Standard, Variant::Plus] {
        let spec = SeparableSpec {
            spatial_stride: 2,
            variant,
            mode: p,
        };
        let run = |x: &Tensor<f64>| {
            separable_attribute_conv(x, &bank, &spec, NormMode::Bypass)
                .unwrap()
                .0
        };
        let base = run(&x);
        for (axis, tau) in [(4usize, 1isize), (4, -1), (5, 1), (5, 3)] {
            let moved = run(&x.translate(axis, 2 * tau, p).unwrap());
            let expect = base.translate(axis - 1, tau, p).unwrap();
            assert!(
                moved.relative_diff(&expect).unwrap() < 1e-6,
                "{variant:?} axis {axis}"
            );
        }
        // The summed axis is invariant under any shift.
        let moved = run(&x.translate(3, 1, p).unwrap());
        assert!(moved.relative_diff(&base).unwrap() < 1e-12);
    }
}

#[test]
fn image_translation_moves_early_layers_identically() {
    let config = NetworkConfig::toy().with_boundary(BoundaryMode::Periodic);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = Parameters::<f64>::init(&config, &mut rng).unwrap();
    let x = random(&[2, 8, 8, 3], &mut rng);
    let p = BoundaryMode::Periodic;
    let moved = x.translate(1, 3, p).unwrap().translate(2, -2, p).unwrap();
    let a = forward(&config, &params, &x, ForwardMode::TRAIN).unwrap();
    let b = forward(&config, &params, &moved, ForwardMode::TRAIN).unwrap();
    // The toy network first subsamples space at depth 4.
    for j in 1..4 {
        let expect = a.layers[j]
            .translate(1, 3, p)
            .unwrap()
            .translate(2, -2, p)
            .unwrap();
        assert!(
            b.layers[j].relative_diff(&expect).unwrap() < 1e-12,
            "depth {j}"
        );
    }
}

/// Standard separable layer against the dense filter `Σ_q s_q h_q g_q`
/// applied by `conv_nd`, with normalization in running mode folded into the
/// per-rank scale `s_q` and, under periodic boundaries, a per-output shift.
fn dense_equivalent(
    x: &Tensor<f64>,
    bank: &SeparableFilterBank<f64>,
    stride: usize,
    mode: BoundaryMode,
) -> Tensor<f64> {
    let k = x.shape()[5];
    let q = bank.rank();
    let marginal = x.sum_axis(3, false).unwrap();
    let eps = bank.norm.eps;
    let scale: Vec<f64> = (0..q)
        .map(|r| {
            let i = [0, 0, r];
            bank.norm.gamma.get(&i) / (bank.norm.running_var.get(&i) + eps).sqrt()
        })
        .collect();
    let offset: Vec<f64> = (0..q)
        .map(|r| {
            let i = [0, 0, r];
            bank.norm.beta.get(&i) - scale[r] * bank.norm.running_mean.get(&i)
        })
        .collect();
    let dense = bank.materialize(&scale);
    let kout = bank.out_channels();
    let shape = dense.shape().to_vec();
    let mut outs = Vec::new();
    for v in 0..kout {
        let w = Tensor::from_fn(&shape[1..], |i| dense.get(&[v, i[0], i[1], i[2], i[3]]));
        let mut o = conv_nd(&marginal, &w, &[1, 2, 3, 4], mode, &[stride, stride, 2, 2]).unwrap();
        let shift: f64 = (0..q)
            .map(|r| {
                let gsum: f64 = (0..shape[3])
                    .flat_map(|a| (0..shape[4]).map(move |b| (a, b)))
                    .map(|(a, b)| bank.attribute.get(&[v, a, b, r]))
                    .sum();
                offset[r] * gsum
            })
            .sum();
        o = o.map(|t| t + shift);
        outs.push(o);
    }
    let s = outs[0].shape().to_vec();
    let stacked = Tensor::from_fn(&[s[0], s[1], s[2], s[3], s[4], kout], |i| {
        outs[i[5]].get(&i[..5])
    });
    assert_eq!(k / 4, s[3]);
    elu(&stacked, &bank.bias).unwrap()
}

#[test]
fn separable_layer_equals_materialized_dense_filter() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let k = 8;
    for (mode, stride) in [
        (BoundaryMode::ZeroPad, 1),
        (BoundaryMode::ZeroPad, 2),
        (BoundaryMode::Periodic, 1),
        (BoundaryMode::Periodic, 2),
    ] {
        let mut bank = random_bank(4, 6, k, &mut rng);
        // Normalization constants vary with q only, so they fold into the
        // dense filter; shifts only fold under periodic boundaries.
        let c = bank.norm.channels() / 4;
        for r in 0..4 {
            let (g, v) = (rng.gen_range(0.5..1.5), rng.gen_range(0.5..2.0));
            let (m, b) = if mode == BoundaryMode::Periodic {
                (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5))
            } else {
                (0.0, 0.0)
            };
            for i in 0..c {
                let idx = i * 4 + r;
                bank.norm.gamma.data_mut()[idx] = g;
                bank.norm.running_var.data_mut()[idx] = v;
                bank.norm.running_mean.data_mut()[idx] = m;
                bank.norm.beta.data_mut()[idx] = b;
            }
        }
        let x = random(&[2, 5, 5, k / 4, k / 2, k], &mut rng);
        let spec = SeparableSpec {
            spatial_stride: stride,
            variant: Variant::Standard,
            mode,
        };
        let (y, _) = separable_attribute_conv(&x, &bank, &spec, NormMode::Running).unwrap();
        let expect = dense_equivalent(&x, &bank, stride, mode);
        let err = y.relative_diff(&expect).unwrap();
        assert!(err < 1e-5, "{mode:?} stride {stride}: {err:e}");
    }
}

/// Solves the square system `a x = b` (row-major, `n` unknowns, `m` right-hand
/// sides) by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize, m: usize) -> Vec<f64> {
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap();
        for c in 0..n {
            a.swap(col * n + c, piv * n + c);
        }
        for c in 0..m {
            b.swap(col * m + c, piv * m + c);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            for c in col..n {
                a[row * n + c] -= f * a[col * n + c];
            }
            for c in 0..m {
                b[row * m + c] -= f * b[col * m + c];
            }
        }
    }
    for col in (0..n).rev() {
        for c in 0..m {
            let mut s = b[col * m + c];
            for k in col + 1..n {
                s -= a[col * n + k] * b[k * m + c];
            }
            b[col * m + c] = s / a[col * n + col];
        }
    }
    b
}

/// Fits `g` for random fixed `h` so that `Σ_q h_q g_q` matches a random dense
/// filter bank, returning the relative residual.
fn rank_fit_residual(q: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (kout, sa, sb) = (3, 3, 5);
    let mut bank = SeparableFilterBank::<f64>::zeros(q, [3, 3], [sa, sb], [4, 8], kout);
    bank.spatial = random(bank.spatial.shape(), &mut rng);
    let target = random(&[kout, 3, 3, sa, sb], &mut rng);
    // Least squares over the 9 spatial taps: minimize |H^T G - W| with
    // H (q x 9), G (q x cols), W (9 x cols); normal equations (H H^T) G = H W.
    let cols = kout * sa * sb;
    let h = bank.spatial.data();
    let mut hht = vec![0.0; q * q];
    for i in 0..q {
        for j in 0..q {
            hht[i * q + j] = (0..9).map(|t| h[i * 9 + t] * h[j * 9 + t]).sum();
        }
    }
    let w_col = |t: usize, c: usize| {
        let (v, ab) = (c / (sa * sb), c % (sa * sb));
        target.get(&[v, t / 3, t % 3, ab / sb, ab % sb])
    };
    let mut hw = vec![0.0; q * cols];
    for i in 0..q {
        for c in 0..cols {
            hw[i * cols + c] = (0..9).map(|t| h[i * 9 + t] * w_col(t, c)).sum();
        }
    }
    let g = if q <= 9 {
        solve(hht, hw, q, cols)
    } else {
        // Underdetermined: take the minimum-norm solution through the first
        // nine ranks and leave the rest at zero.
        let mut sub = vec![0.0; 81];
        for i in 0..9 {
            for j in 0..9 {
                sub[i * 9 + j] = hht[i * q + j];
            }
        }
        let mut g = solve(sub, hw[..9 * cols].to_vec(), 9, cols);
        g.resize(q * cols, 0.0);
        g
    };
    for v in 0..kout {
        for ab in 0..sa * sb {
            for r in 0..q {
                bank.attribute
                    .set(&[v, ab / sb, ab % sb, r], g[r * cols + v * sa * sb + ab]);
            }
        }
    }
    let fitted = bank.materialize(&vec![1.0; q]);
    fitted.relative_diff(&target).unwrap()
}

#[test]
fn nine_ranks_represent_any_dense_filter() {
    for seed in 0..3 {
        assert!(rank_fit_residual(9, seed) < 1e-8);
    }
    // Fewer ranks than spatial taps cannot.
    assert!(rank_fit_residual(8, 0) > 1e-3);
}
