//! Differentiable primitives: ELU, batch normalization, softmax/cross-entropy
//! and the separable attribute convolution used by the steady-state layers.

use serde::{Deserialize, Serialize};

use crate::error::{HcnnError, Result};
use crate::kernels::LoweredConv;
use crate::tensor::{BoundaryMode, Element, Tensor};

#[inline]
pub fn elu_scalar<T: Element>(c: T) -> T {
    if c >= T::zero() {
        c
    } else {
        c.exp_m1()
    }
}

/// Derivative of ELU expressed through its output `a = elu(c)`.
#[inline]
pub fn elu_grad_from_output<T: Element>(a: T) -> T {
    if a >= T::zero() {
        T::one()
    } else {
        a + T::one()
    }
}

/// `elu(z + b)` with one bias per entry of the last axis.
pub fn elu<T: Element>(z: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let channels = *z.shape().last().unwrap();
    if bias.len() != channels {
        return Err(HcnnError::Shape(format!(
            "bias has {} entries for {channels} channels",
            bias.len()
        )));
    }
    let mut out = z.clone();
    elu_in_place(out.data_mut(), bias.data());
    Ok(out)
}

pub(crate) fn elu_in_place<T: Element>(data: &mut [T], bias: &[T]) {
    for row in data.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v = elu_scalar(*v + b);
        }
    }
}

/// Turns `dy` into the gradient w.r.t. the ELU input, given the ELU output.
/// Returns the bias gradient (sum over every axis but the last).
pub(crate) fn elu_backward_in_place<T: Element>(
    dy: &mut [T],
    out: &[T],
    channels: usize,
) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for (row, orow) in dy
        .chunks_exact_mut(channels)
        .zip(out.chunks_exact(channels))
    {
        for ((d, &a), acc) in row.iter_mut().zip(orow).zip(db.iter_mut()) {
            *d *= elu_grad_from_output(a);
            *acc += *d;
        }
    }
    db
}

/// Per-channel normalization state. The channel axes are the trailing axes of
/// the normalized tensor and have the shape of `gamma`; statistics are taken
/// over every leading axis (batch and space).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

impl<T: Element> BatchNormState<T> {
    pub fn new(channel_shape: &[usize]) -> Self {
        BatchNormState {
            gamma: Tensor::ones(channel_shape),
            beta: Tensor::zeros(channel_shape),
            running_mean: Tensor::zeros(channel_shape),
            running_var: Tensor::ones(channel_shape),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// `running <- momentum * running + (1 - momentum) * batch`
    pub fn update_running(&mut self, batch_mean: &[T], batch_var: &[T]) {
        let m = T::from_f64_lossy(self.momentum);
        let one_m = T::one() - m;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(batch_mean) {
            *r = m * *r + one_m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(batch_var) {
            *r = m * *r + one_m * b;
        }
    }
}

/// Which statistics a normalization step uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics (training).
    Batch,
    /// Running estimates (evaluation).
    Running,
    /// Skip normalization entirely (x passes through unchanged).
    Bypass,
}

/// Values retained by a batch-statistics normalization for its backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Normalizes `data` in place, viewed as `(rows, channels)`.
///
/// Returns the cache in `Batch` mode. Running estimates are not touched; the
/// caller folds `mean`/`var` into the state when it commits a training step.
pub(crate) fn batch_norm_in_place<T: Element>(
    data: &mut [T],
    state: &BatchNormState<T>,
    mode: NormMode,
) -> Result<Option<BatchNormCache<T>>> {
    let c = state.channels();
    if data.len() % c != 0 {
        return Err(HcnnError::Shape(format!(
            "{} elements do not tile {c} channels",
            data.len()
        )));
    }
    let rows = data.len() / c;
    let eps = T::from_f64_lossy(state.eps);
    let gamma = state.gamma.data();
    let beta = state.beta.data();
    match mode {
        NormMode::Bypass => Ok(None),
        NormMode::Running => {
            let scale: Vec<T> = state
                .running_var
                .data()
                .iter()
                .zip(gamma)
                .map(|(&v, &g)| g / (v + eps).sqrt())
                .collect();
            let mean = state.running_mean.data();
            for row in data.chunks_exact_mut(c) {
                for i in 0..c {
                    row[i] = (row[i] - mean[i]) * scale[i] + beta[i];
                }
            }
            Ok(None)
        }
        NormMode::Batch => {
            if rows < 2 {
                return Err(HcnnError::DegenerateSlice(rows));
            }
            let n = T::from_usize(rows).unwrap();
            let mut mean = vec![T::zero(); c];
            for row in data.chunks_exact(c) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m = *m / n);
            let mut var = vec![T::zero(); c];
            for row in data.chunks_exact(c) {
                for i in 0..c {
                    let d = row[i] - mean[i];
                    var[i] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v = *v / n);
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let mut xhat = vec![T::zero(); data.len()];
            for (row, xrow) in data.chunks_exact_mut(c).zip(xhat.chunks_exact_mut(c)) {
                for i in 0..c {
                    let h = (row[i] - mean[i]) * inv_std[i];
                    xrow[i] = h;
                    row[i] = gamma[i] * h + beta[i];
                }
            }
            Ok(Some(BatchNormCache {
                xhat,
                inv_std,
                mean,
                var,
            }))
        }
    }
}

/// Applies normalization to `z`. In training mode batch statistics are used
/// and the running estimates of `state` are updated.
pub fn batch_norm<T: Element>(
    z: &Tensor<T>,
    state: &mut BatchNormState<T>,
    training: bool,
) -> Result<Tensor<T>> {
    check_channel_shape(z, state)?;
    let mut out = z.clone();
    let mode = if training {
        NormMode::Batch
    } else {
        NormMode::Running
    };
    if let Some(cache) = batch_norm_in_place(out.data_mut(), state, mode)? {
        state.update_running(&cache.mean, &cache.var);
    }
    Ok(out)
}

fn check_channel_shape<T: Element>(z: &Tensor<T>, state: &BatchNormState<T>) -> Result<()> {
    let cs = state.gamma.shape();
    if z.rank() <= cs.len() || &z.shape()[z.rank() - cs.len()..] != cs {
        return Err(HcnnError::Shape(format!(
            "tensor {:?} does not end with channel shape {cs:?}",
            z.shape()
        )));
    }
    Ok(())
}

/// Gradient of a batch-statistics normalization. `dy` becomes the input
/// gradient; returns `(dgamma, dbeta)`.
pub(crate) fn batch_norm_backward_in_place<T: Element>(
    dy: &mut [T],
    cache: &BatchNormCache<T>,
    gamma: &[T],
) -> (Vec<T>, Vec<T>) {
    let c = gamma.len();
    let rows = dy.len() / c;
    let n = T::from_usize(rows).unwrap();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (row, xrow) in dy.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
        for i in 0..c {
            dbeta[i] += row[i];
            dgamma[i] += row[i] * xrow[i];
        }
    }
    // dx = gamma * inv_std / n * (n * dy - sum(dy) - xhat * sum(dy * xhat))
    for (row, xrow) in dy.chunks_exact_mut(c).zip(cache.xhat.chunks_exact(c)) {
        for i in 0..c {
            let k = gamma[i] * cache.inv_std[i] / n;
            row[i] = k * (n * row[i] - dbeta[i] - xrow[i] * dgamma[i]);
        }
    }
    (dgamma, dbeta)
}

/// Row-wise softmax over the last axis with max subtraction.
pub fn softmax<T: Element>(z: &Tensor<T>) -> Tensor<T> {
    let c = *z.shape().last().unwrap();
    let mut out = z.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v = *v / total);
    }
    out
}

fn check_labels<T: Element>(z: &Tensor<T>, labels: &[usize]) -> Result<usize> {
    let c = *z.shape().last().unwrap();
    if z.len() / c != labels.len() {
        return Err(HcnnError::Shape(format!(
            "{} rows but {} labels",
            z.len() / c,
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(HcnnError::Shape(format!("label {bad} outside {c} classes")));
    }
    Ok(c)
}

/// Mean negative log-probability of the true classes.
pub fn cross_entropy<T: Element>(probs: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let c = check_labels(probs, labels)?;
    let total: T = probs
        .data()
        .chunks_exact(c)
        .zip(labels)
        .map(|(row, &l)| -row[l].ln())
        .sum();
    Ok(total / T::from_usize(labels.len()).unwrap())
}

/// Mean cross-entropy computed from logits through log-sum-exp.
pub fn cross_entropy_from_logits<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let c = check_labels(logits, labels)?;
    let total: T = logits
        .data()
        .chunks_exact(c)
        .zip(labels)
        .map(|(row, &l)| {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            lse - row[l]
        })
        .sum();
    Ok(total / T::from_usize(labels.len()).unwrap())
}

/// Gradient of mean cross-entropy w.r.t. the logits: `(softmax - onehot) / B`.
pub fn cross_entropy_logits_grad<T: Element>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<Tensor<T>> {
    let c = check_labels(logits, labels)?;
    let mut g = softmax(logits);
    let inv_b = T::one() / T::from_usize(labels.len()).unwrap();
    for (row, &l) in g.data_mut().chunks_exact_mut(c).zip(labels) {
        row[l] -= T::one();
        row.iter_mut().for_each(|v| *v *= inv_b);
    }
    Ok(g)
}

/// Factorized layer variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `rho(W^g W^h x)`: equivalent to one dense filter per output attribute.
    Standard,
    /// `rho(W^g rho(W^h x))`: extra nonlinearity between the two stages.
    Plus,
}

/// Separable filters of one steady-state layer.
///
/// `spatial` is `(Q, sh, sw)`; `attribute` is stored `(K_out, Sa, Sb, Q)` so
/// the rank index is contiguous; `norm` has channel shape `(K/2, K, Q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableFilterBank<T> {
    pub spatial: Tensor<T>,
    pub attribute: Tensor<T>,
    pub bias: Tensor<T>,
    pub norm: BatchNormState<T>,
}

impl<T: Element> SeparableFilterBank<T> {
    pub fn zeros(
        rank: usize,
        spatial_support: [usize; 2],
        attribute_support: [usize; 2],
        in_attr: [usize; 2],
        out_channels: usize,
    ) -> Self {
        SeparableFilterBank {
            spatial: Tensor::zeros(&[rank, spatial_support[0], spatial_support[1]]),
            attribute: Tensor::zeros(&[
                out_channels,
                attribute_support[0],
                attribute_support[1],
                rank,
            ]),
            bias: Tensor::zeros(&[out_channels]),
            norm: BatchNormState::new(&[in_attr[0], in_attr[1], rank]),
        }
    }

    pub fn rank(&self) -> usize {
        self.spatial.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.attribute.shape()[0]
    }

    /// Dense filters `w[v_j](u, a, b) = sum_q scale_q h_q(u) g_{v_j,q}(a, b)`,
    /// shape `(K_out, sh, sw, Sa, Sb)`.
    pub fn materialize(&self, scale: &[T]) -> Tensor<T> {
        let (q, sh, sw) = (
            self.spatial.shape()[0],
            self.spatial.shape()[1],
            self.spatial.shape()[2],
        );
        let a = self.attribute.shape();
        let (ko, sa, sb) = (a[0], a[1], a[2]);
        Tensor::from_fn(&[ko, sh, sw, sa, sb], |i| {
            (0..q)
                .map(|r| {
                    scale[r]
                        * self.spatial.get(&[r, i[1], i[2]])
                        * self.attribute.get(&[i[0], i[3], i[4], r])
                })
                .sum()
        })
    }
}

/// Everything the separable layer backward pass needs.
#[derive(Debug, Clone)]
pub struct SeparableCache<T> {
    /// `x_prev` marginalized over its first attribute axis.
    pub marginal: Tensor<T>,
    /// Normalized spatial responses (xhat) in batch mode, raw responses
    /// otherwise.
    pub responses: Vec<T>,
    pub norm: Option<BatchNormCache<T>>,
    pub norm_mode: NormMode,
    pub output: Tensor<T>,
    spatial_conv: LoweredConv,
    attribute_conv: LoweredConv,
}

#[derive(Debug, Clone)]
pub struct SeparableGrads<T> {
    pub spatial: Vec<T>,
    pub attribute: Vec<T>,
    pub bias: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Geometry of one separable layer call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeparableSpec {
    pub spatial_stride: usize,
    pub variant: Variant,
    pub mode: BoundaryMode,
}

fn separable_shapes<T: Element>(
    x_prev: &Tensor<T>,
    bank: &SeparableFilterBank<T>,
    spec: &SeparableSpec,
) -> Result<(LoweredConv, LoweredConv, Vec<usize>)> {
    let s = x_prev.shape();
    if s.len() != 6 {
        return Err(HcnnError::Shape(format!(
            "separable layer expects (batch, u1, u2, v_a, v_b, v_c), got {s:?}"
        )));
    }
    let (batch, n1, n2, a1, a2) = (s[0], s[1], s[2], s[4], s[5]);
    let q = bank.rank();
    let ns = bank.norm.gamma.shape();
    if ns != [a1, a2, q] {
        return Err(HcnnError::Shape(format!(
            "normalization shape {ns:?} does not match attributes ({a1}, {a2}) and rank {q}"
        )));
    }
    if bank.attribute.shape()[3] != q {
        return Err(HcnnError::Shape(
            "attribute filters and spatial filters disagree on Q".into(),
        ));
    }
    if a1 % 2 != 0 || a2 % 2 != 0 || s[3] * 2 != a1 {
        return Err(HcnnError::Shape(format!(
            "attribute extents {:?} must be (K/4, K/2, K)",
            &s[3..]
        )));
    }
    let sp = bank.spatial.shape();
    let h = LoweredConv {
        outer: batch,
        in_dims: vec![n1, n2],
        inner: a1 * a2,
        cin: 1,
        cout: q,
        kernel: vec![sp[1], sp[2]],
        strides: vec![spec.spatial_stride; 2],
        mode: spec.mode,
    };
    h.validate()?;
    let od = h.out_dims();
    let at = bank.attribute.shape();
    let g = LoweredConv {
        outer: batch * od[0] * od[1],
        in_dims: vec![a1, a2],
        inner: 1,
        cin: q,
        cout: at[0],
        kernel: vec![at[1], at[2]],
        strides: vec![2, 2],
        mode: spec.mode,
    };
    g.validate()?;
    let out_shape = vec![batch, od[0], od[1], a1 / 2, a2 / 2, at[0]];
    Ok((h, g, out_shape))
}

fn running_inv_std<T: Element>(norm: &BatchNormState<T>) -> Vec<T> {
    let eps = T::from_f64_lossy(norm.eps);
    norm.running_var
        .data()
        .iter()
        .map(|&v| T::one() / (v + eps).sqrt())
        .collect()
}

/// Rebuilds the normalized (pre-Plus-ELU) g-stage input from the cache.
fn normalized_stage<T: Element>(
    cache: &SeparableCache<T>,
    bank: &SeparableFilterBank<T>,
) -> Vec<T> {
    let c = bank.norm.channels();
    let (g, b) = (bank.norm.gamma.data(), bank.norm.beta.data());
    let mut t = cache.responses.clone();
    match cache.norm_mode {
        NormMode::Batch => {
            for row in t.chunks_exact_mut(c) {
                for i in 0..c {
                    row[i] = g[i] * row[i] + b[i];
                }
            }
        }
        NormMode::Running => {
            let inv = running_inv_std(&bank.norm);
            let rm = bank.norm.running_mean.data();
            for row in t.chunks_exact_mut(c) {
                for i in 0..c {
                    row[i] = g[i] * (row[i] - rm[i]) * inv[i] + b[i];
                }
            }
        }
        NormMode::Bypass => {}
    }
    t
}

/// One steady-state layer: marginalize the oldest attribute, convolve along
/// space with each `h_q`, normalize, (Plus: ELU), convolve along the two
/// remaining attributes with `g_{v_j,q}` summed over `q` and subsampled by 2,
/// then add the bias and apply ELU.
///
/// Input `(B, n, n, K/4, K/2, K)`, output `(B, n/2^s, n/2^s, K/4, K/2, K_out)`.
pub fn separable_attribute_conv<T: Element>(
    x_prev: &Tensor<T>,
    bank: &SeparableFilterBank<T>,
    spec: &SeparableSpec,
    norm_mode: NormMode,
) -> Result<(Tensor<T>, SeparableCache<T>)> {
    let (h, g, out_shape) = separable_shapes(x_prev, bank, spec)?;
    let marginal = x_prev.sum_axis(3, false)?;
    let mut responses = h.forward(marginal.data(), bank.spatial.data())?;
    let mut stage = responses.clone();
    let norm = batch_norm_in_place(&mut stage, &bank.norm, norm_mode)?;
    if let Some(nc) = &norm {
        responses.copy_from_slice(&nc.xhat);
    }
    if spec.variant == Variant::Plus {
        stage.iter_mut().for_each(|v| *v = elu_scalar(*v));
    }
    let mut out = g.forward(&stage, bank.attribute.data())?;
    elu_in_place(&mut out, bank.bias.data());
    let output = Tensor::new(out_shape, out)?;
    output.ensure_finite("separable layer output")?;
    Ok((
        output.clone(),
        SeparableCache {
            marginal,
            responses,
            norm,
            norm_mode,
            output,
            spatial_conv: h,
            attribute_conv: g,
        },
    ))
}

/// Backward pass of [`separable_attribute_conv`]; returns the input gradient
/// (when requested) and the parameter gradients.
pub fn separable_attribute_conv_backward<T: Element>(
    dy: &Tensor<T>,
    cache: &SeparableCache<T>,
    bank: &SeparableFilterBank<T>,
    variant: Variant,
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, SeparableGrads<T>)> {
    if dy.shape() != cache.output.shape() {
        return Err(HcnnError::Shape("stale separable cache".into()));
    }
    let kout = bank.out_channels();
    let mut dz = dy.data().to_vec();
    let bias = elu_backward_in_place(&mut dz, cache.output.data(), kout);

    let mut t = normalized_stage(cache, bank);
    if variant == Variant::Plus {
        t.iter_mut().for_each(|v| *v = elu_scalar(*v));
    }
    let (dt, dg) = cache
        .attribute_conv
        .backward(&t, bank.attribute.data(), &dz, true, true)?;
    let mut dt = dt.unwrap();
    if variant == Variant::Plus {
        for (d, &a) in dt.iter_mut().zip(&t) {
            *d *= elu_grad_from_output(a);
        }
    }
    let c = bank.norm.channels();
    let (gamma, beta) = match (&cache.norm, cache.norm_mode) {
        (Some(nc), NormMode::Batch) => {
            batch_norm_backward_in_place(&mut dt, nc, bank.norm.gamma.data())
        }
        (_, NormMode::Running) => {
            let inv = running_inv_std(&bank.norm);
            let rm = bank.norm.running_mean.data();
            let gm = bank.norm.gamma.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for (row, raw) in dt.chunks_exact_mut(c).zip(cache.responses.chunks_exact(c)) {
                for i in 0..c {
                    let xhat = (raw[i] - rm[i]) * inv[i];
                    dbeta[i] += row[i];
                    dgamma[i] += row[i] * xhat;
                    row[i] *= gm[i] * inv[i];
                }
            }
            (dgamma, dbeta)
        }
        _ => (vec![T::zero(); c], vec![T::zero(); c]),
    };
    let (dm, dh) = cache.spatial_conv.backward(
        cache.marginal.data(),
        bank.spatial.data(),
        &dt,
        need_dx,
        true,
    )?;
    let dx = match dm {
        Some(dm) => {
            // The marginal sum broadcasts back along the first attribute axis.
            let m = cache.marginal.shape();
            let x_shape = [m[0], m[1], m[2], m[3] / 2, m[3], m[4]];
            let inner = m[3] * m[4];
            let outer = m[0] * m[1] * m[2];
            let mut dx = Vec::with_capacity(outer * x_shape[3] * inner);
            for o in 0..outer {
                let src = &dm[o * inner..(o + 1) * inner];
                for _ in 0..x_shape[3] {
                    dx.extend_from_slice(src);
                }
            }
            Some(Tensor::new(x_shape.to_vec(), dx)?)
        }
        None => None,
    };
    Ok((
        dx,
        SeparableGrads {
            spatial: dh.unwrap(),
            attribute: dg.unwrap(),
            bias,
            gamma,
            beta,
        },
    ))
}
