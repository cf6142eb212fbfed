//! The hierarchical network: configuration, parameters and forward pass.
//!
//! Layer layout (batch first, row-major):
//!
//! | depth        | tensor                                   |
//! |--------------|------------------------------------------|
//! | input        | `(B, N, N, 3)`                           |
//! | 1            | `(B, n1, n1, K)`                         |
//! | 2            | `(B, n2, n2, K, K)`                      |
//! | 3            | `(B, n3, n3, K/4, K/2, K)`               |
//! | 4 ..= J-2    | `(B, nj, nj, K/4, K/2, K)`               |
//! | J-1          | `(B, nj, nj, K/4, K/2, C)`               |
//! | J            | `(B, C)` logits                          |
//!
//! `nj` halves (rounding up) at every depth listed in `stride_depths`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HcnnError, Result};
use crate::kernels::LoweredConv;
use crate::ops::{
    elu_in_place, separable_attribute_conv, softmax, NormMode, SeparableCache, SeparableFilterBank,
    SeparableSpec, Variant,
};
use crate::tensor::{BoundaryMode, Element, Tensor};

/// Declarative description of one network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Total depth `J`; layer `J` is the final invariant sum.
    pub depth: usize,
    /// Largest attribute extent `K`.
    pub max_attributes: usize,
    /// Separable rank `Q`.
    pub rank: usize,
    pub spatial_size: usize,
    #[serde(default = "default_channels")]
    pub input_channels: usize,
    pub num_classes: usize,
    /// Support along `(v_{j-2}, v_{j-1})` of the attribute filters.
    pub attribute_support: [usize; 2],
    pub spatial_support: [usize; 2],
    /// Depths `j` that subsample space by 2.
    pub stride_depths: Vec<usize>,
    pub boundary: BoundaryMode,
    pub variant: Variant,
    #[serde(default)]
    pub readout: Readout,
}

/// How the last layer reduces `x_{J-1}` over `u, v_{J-3}, v_{J-2}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    Sum,
    /// The sum divided by the number of reduced entries.
    #[default]
    Mean,
}

impl Readout {
    pub fn scale<T: Element>(self, reduced: usize) -> T {
        match self {
            Readout::Sum => T::one(),
            Readout::Mean => T::from_f64_lossy(1.0 / reduced as f64),
        }
    }
}

fn default_channels() -> usize {
    3
}

impl NetworkConfig {
    pub fn cifar10() -> Self {
        NetworkConfig {
            depth: 12,
            max_attributes: 16,
            rank: 32,
            spatial_size: 32,
            input_channels: 3,
            num_classes: 10,
            attribute_support: [7, 11],
            spatial_support: [3, 3],
            stride_depths: vec![5, 9],
            boundary: BoundaryMode::ZeroPad,
            variant: Variant::Standard,
            readout: Readout::Mean,
        }
    }

    pub fn cifar100() -> Self {
        NetworkConfig {
            num_classes: 100,
            attribute_support: [11, 11],
            ..Self::cifar10()
        }
    }

    /// Small network used by gradient and invariance checks.
    pub fn toy() -> Self {
        NetworkConfig {
            depth: 6,
            max_attributes: 8,
            rank: 3,
            spatial_size: 8,
            input_channels: 3,
            num_classes: 10,
            attribute_support: [3, 5],
            spatial_support: [3, 3],
            stride_depths: vec![4],
            boundary: BoundaryMode::ZeroPad,
            variant: Variant::Standard,
            readout: Readout::Mean,
        }
    }

    /// Reduced CIFAR network for desk-scale training runs.
    pub fn desk() -> Self {
        NetworkConfig {
            max_attributes: 8,
            rank: 8,
            attribute_support: [3, 5],
            ..Self::cifar10()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_boundary(mut self, boundary: BoundaryMode) -> Self {
        self.boundary = boundary;
        self
    }

    pub fn k(&self) -> usize {
        self.max_attributes
    }

    /// Layer-2 filter support along `v_1`.
    pub fn layer2_support(&self) -> usize {
        self.attribute_support[1]
    }

    pub fn spatial_stride(&self, depth: usize) -> usize {
        if self.stride_depths.contains(&depth) {
            2
        } else {
            1
        }
    }

    /// Spatial extent of `x_j` for `j` in `0..J`.
    pub fn spatial_extent(&self, depth: usize) -> usize {
        (1..=depth).fold(self.spatial_size, |n, j| n.div_ceil(self.spatial_stride(j)))
    }

    /// Number of values of the newest attribute at depth `j`.
    pub fn out_attributes(&self, depth: usize) -> usize {
        if depth == self.depth - 1 {
            self.num_classes
        } else {
            self.max_attributes
        }
    }

    /// Shape of `x_j` without the batch axis, for `j` in `0..=J`.
    pub fn layer_shape(&self, depth: usize) -> Vec<usize> {
        let n = self.spatial_extent(depth.min(self.depth - 1));
        let k = self.max_attributes;
        match depth {
            0 => vec![n, n, self.input_channels],
            1 => vec![n, n, k],
            2 => vec![n, n, k, k],
            j if j == self.depth => vec![self.num_classes],
            j => vec![n, n, k / 4, k / 2, self.out_attributes(j)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(HcnnError::Config(m));
        let k = self.max_attributes;
        if self.depth < 5 {
            return err(format!("depth {} < 5", self.depth));
        }
        if k < 4 || k % 4 != 0 {
            return err(format!(
                "max_attributes {k} must be a positive multiple of 4"
            ));
        }
        if self.rank == 0 || self.spatial_size == 0 || self.input_channels == 0 {
            return err("rank, spatial_size and input_channels must be positive".into());
        }
        if self.num_classes < 2 {
            return err(format!("num_classes {} < 2", self.num_classes));
        }
        for (i, &d) in self.stride_depths.iter().enumerate() {
            if d < 2 || d >= self.depth {
                return err(format!("stride depth {d} outside 2..{}", self.depth - 1));
            }
            if self.stride_depths[..i].contains(&d) {
                return err(format!("stride depth {d} repeated"));
            }
        }
        let [sa, sb] = self.attribute_support;
        let [sh, sw] = self.spatial_support;
        if sa == 0 || sb == 0 || sh == 0 || sw == 0 {
            return err("filter supports must be positive".into());
        }
        // Circular convolution needs every filter to fit inside its axis;
        // zero padding accepts longer filters.
        if self.boundary == BoundaryMode::Periodic {
            if sa > k / 2 || sb > k {
                return err(format!(
                    "attribute support ({sa}, {sb}) exceeds periodic attribute extents ({}, {k})",
                    k / 2
                ));
            }
            for j in 0..self.depth - 1 {
                let n = self.spatial_extent(j);
                if sh > n || sw > n {
                    return err(format!(
                        "spatial support {sh}x{sw} exceeds extent {n} at depth {j}"
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Filters and biases of one of the first three layers. The filter is stored
/// as `(K, sh, sw, attribute taps..., input channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub filter: Tensor<T>,
    pub bias: Tensor<T>,
}

/// All trainable arrays plus normalization running estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    pub layer1: DenseLayer<T>,
    pub layer2: DenseLayer<T>,
    pub layer3: DenseLayer<T>,
    /// Steady-state layers `4 ..= J-1`.
    pub separable: Vec<SeparableFilterBank<T>>,
}

impl<T: Element> Parameters<T> {
    /// All-zero parameters with γ = 1 and unit running variance.
    pub fn zeros(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let k = config.max_attributes;
        let [sh, sw] = config.spatial_support;
        let [sa, sb] = config.attribute_support;
        let dense = |shape: &[usize]| DenseLayer {
            filter: Tensor::zeros(shape),
            bias: Tensor::zeros(&[k]),
        };
        Ok(Parameters {
            layer1: dense(&[k, sh, sw, config.input_channels]),
            layer2: dense(&[k, sh, sw, config.layer2_support()]),
            layer3: dense(&[k, sh, sw, sa, sb]),
            separable: (4..config.depth)
                .map(|j| {
                    SeparableFilterBank::zeros(
                        config.rank,
                        config.spatial_support,
                        config.attribute_support,
                        [k / 2, k],
                        config.out_attributes(j),
                    )
                })
                .collect(),
        })
    }

    /// Fan-in scaled uniform initialization: each filter entry is drawn from
    /// `U(-a, a)` with `a = sqrt(6 / fan_in)`; biases start at 0, γ at 1.
    pub fn init(config: &NetworkConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let fill = |t: &mut Tensor<T>, fan_in: usize, rng: &mut ChaCha8Rng| {
            let a = (6.0 / fan_in as f64).sqrt();
            for v in t.data_mut() {
                *v = T::from_f64_lossy(rng.gen_range(-a..a));
            }
        };
        let [sh, sw] = config.spatial_support;
        let [sa, sb] = config.attribute_support;
        fill(&mut p.layer1.filter, sh * sw * config.input_channels, rng);
        fill(&mut p.layer2.filter, sh * sw * config.layer2_support(), rng);
        fill(&mut p.layer3.filter, sh * sw * sa * sb, rng);
        for bank in &mut p.separable {
            fill(&mut bank.spatial, sh * sw, rng);
            fill(&mut bank.attribute, sa * sb * config.rank, rng);
        }
        Ok(p)
    }

    /// Trainable tensors in checkpoint / optimizer order.
    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![
            &self.layer1.filter,
            &self.layer1.bias,
            &self.layer2.filter,
            &self.layer2.bias,
            &self.layer3.filter,
            &self.layer3.bias,
        ];
        for b in &self.separable {
            out.extend([
                &b.spatial,
                &b.attribute,
                &b.bias,
                &b.norm.gamma,
                &b.norm.beta,
            ]);
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![
            &mut self.layer1.filter,
            &mut self.layer1.bias,
            &mut self.layer2.filter,
            &mut self.layer2.bias,
            &mut self.layer3.filter,
            &mut self.layer3.bias,
        ];
        for b in &mut self.separable {
            out.extend([
                &mut b.spatial,
                &mut b.attribute,
                &mut b.bias,
                &mut b.norm.gamma,
                &mut b.norm.beta,
            ]);
        }
        out
    }

    /// Names matching [`Parameters::trainable`].
    pub fn trainable_names(&self) -> Vec<String> {
        let mut out: Vec<String> = (1..=3)
            .flat_map(|j| [format!("layer{j}.filter"), format!("layer{j}.bias")])
            .collect();
        for j in 4..4 + self.separable.len() {
            for part in ["spatial", "attribute", "bias", "gamma", "beta"] {
                out.push(format!("layer{j}.{part}"));
            }
        }
        out
    }

    /// Normalization running estimates (not trained, not decayed).
    pub fn buffers(&self) -> Vec<&Tensor<T>> {
        self.separable
            .iter()
            .flat_map(|b| [&b.norm.running_mean, &b.norm.running_var])
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.separable
            .iter_mut()
            .flat_map(|b| [&mut b.norm.running_mean, &mut b.norm.running_var])
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    /// Same structure, every trainable entry zero (used for gradients).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.trainable_mut() {
            t.data_mut().fill(T::zero());
        }
        z
    }

    pub fn cast<U: Element>(&self) -> Parameters<U> {
        let dense = |d: &DenseLayer<T>| DenseLayer {
            filter: d.filter.cast(),
            bias: d.bias.cast(),
        };
        Parameters {
            layer1: dense(&self.layer1),
            layer2: dense(&self.layer2),
            layer3: dense(&self.layer3),
            separable: self
                .separable
                .iter()
                .map(|b| SeparableFilterBank {
                    spatial: b.spatial.cast(),
                    attribute: b.attribute.cast(),
                    bias: b.bias.cast(),
                    norm: crate::ops::BatchNormState {
                        gamma: b.norm.gamma.cast(),
                        beta: b.norm.beta.cast(),
                        running_mean: b.norm.running_mean.cast(),
                        running_var: b.norm.running_var.cast(),
                        eps: b.norm.eps,
                        momentum: b.norm.momentum,
                    },
                })
                .collect(),
        }
    }

    /// Checks every array against the shapes `config` implies.
    pub fn check_against(&self, config: &NetworkConfig) -> Result<()> {
        let expected = Self::zeros(config)?;
        let mine = self.trainable().into_iter().chain(self.buffers());
        let theirs = expected.trainable().into_iter().chain(expected.buffers());
        if self.separable.len() != expected.separable.len() {
            return Err(HcnnError::Config(format!(
                "{} separable layers for depth {}",
                self.separable.len(),
                config.depth
            )));
        }
        for ((a, b), name) in mine.zip(theirs).zip(expected.trainable_names()) {
            if a.shape() != b.shape() {
                return Err(HcnnError::Config(format!(
                    "parameter {name}: shape {:?}, config implies {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Folds the batch statistics of a training forward pass into the running
    /// estimates.
    pub fn commit_batch_statistics(&mut self, acts: &Activations<T>) {
        for (bank, cache) in self.separable.iter_mut().zip(&acts.separable) {
            if let Some(nc) = cache.as_ref().and_then(|c| c.norm.as_ref()) {
                bank.norm.update_running(&nc.mean, &nc.var);
            }
        }
    }
}

/// Normalization mode and cache retention for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardMode {
    pub norm: NormMode,
    pub keep_caches: bool,
}

impl ForwardMode {
    pub const TRAIN: ForwardMode = ForwardMode {
        norm: NormMode::Batch,
        keep_caches: true,
    };
    pub const EVAL: ForwardMode = ForwardMode {
        norm: NormMode::Running,
        keep_caches: false,
    };
}

/// Per-layer forward results. `layers[j]` is `x_j` for `j` in `0..J`
/// (`layers[0]` is the input); `logits` is `x_J`.
#[derive(Debug, Clone)]
pub struct Activations<T> {
    pub layers: Vec<Tensor<T>>,
    pub logits: Tensor<T>,
    pub mode: ForwardMode,
    pub(crate) separable: Vec<Option<SeparableCache<T>>>,
}

impl<T: Element> Activations<T> {
    pub fn batch(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn layer(&self, depth: usize) -> &Tensor<T> {
        &self.layers[depth]
    }

    pub fn has_caches(&self) -> bool {
        self.separable.iter().all(|c| c.is_some())
    }
}

/// Geometry of dense layer `j` (1, 2 or 3) for a batch of `batch`.
pub(crate) fn dense_geometry(config: &NetworkConfig, depth: usize, batch: usize) -> LoweredConv {
    let k = config.max_attributes;
    let n = config.spatial_extent(depth - 1);
    let s = config.spatial_stride(depth);
    let [sh, sw] = config.spatial_support;
    let [sa, sb] = config.attribute_support;
    let (in_dims, kernel, strides, cin) = match depth {
        1 => (vec![n, n], vec![sh, sw], vec![s, s], config.input_channels),
        2 => (
            vec![n, n, k],
            vec![sh, sw, config.layer2_support()],
            vec![s, s, 1],
            1,
        ),
        3 => (vec![n, n, k, k], vec![sh, sw, sa, sb], vec![s, s, 4, 2], 1),
        _ => unreachable!("dense layers are 1..=3"),
    };
    LoweredConv {
        outer: batch,
        in_dims,
        inner: 1,
        cin,
        cout: k,
        kernel,
        strides,
        mode: config.boundary,
    }
}

fn with_batch(batch: usize, shape: &[usize]) -> Vec<usize> {
    let mut s = vec![batch];
    s.extend_from_slice(shape);
    s
}

pub(crate) fn separable_spec(config: &NetworkConfig, depth: usize) -> SeparableSpec {
    SeparableSpec {
        spatial_stride: config.spatial_stride(depth),
        variant: config.variant,
        mode: config.boundary,
    }
}

/// Computes `x_j` from `x_{j-1}` for `1 <= j <= J-1`.
fn layer_forward<T: Element>(
    config: &NetworkConfig,
    params: &Parameters<T>,
    depth: usize,
    prev: &Tensor<T>,
    mode: ForwardMode,
) -> Result<(Tensor<T>, Option<SeparableCache<T>>)> {
    let batch = prev.shape()[0];
    if depth <= 3 {
        let layer = match depth {
            1 => &params.layer1,
            2 => &params.layer2,
            _ => &params.layer3,
        };
        let g = dense_geometry(config, depth, batch);
        let mut out = g.forward(prev.data(), layer.filter.data())?;
        elu_in_place(&mut out, layer.bias.data());
        let t = Tensor::new(with_batch(batch, &config.layer_shape(depth)), out)?;
        t.ensure_finite(&format!("layer {depth} output"))?;
        Ok((t, None))
    } else {
        let bank = &params.separable[depth - 4];
        let (out, cache) =
            separable_attribute_conv(prev, bank, &separable_spec(config, depth), mode.norm)?;
        Ok((out, mode.keep_caches.then_some(cache)))
    }
}

/// `x_J(c)`: sum (or mean) of `x_{J-1}` over `u, v_{J-3}, v_{J-2}`.
pub fn readout<T: Element>(last: &Tensor<T>, kind: Readout) -> Result<Tensor<T>> {
    let s = last.shape();
    let (batch, c) = (s[0], s[s.len() - 1]);
    let per = last.len() / (batch * c);
    let mut logits = vec![T::zero(); batch * c];
    for b in 0..batch {
        let dst = &mut logits[b * c..(b + 1) * c];
        for row in last.data()[b * per * c..(b + 1) * per * c].chunks_exact(c) {
            for (d, &v) in dst.iter_mut().zip(row) {
                *d += v;
            }
        }
    }
    if kind == Readout::Mean {
        let k: T = kind.scale(per);
        logits.iter_mut().for_each(|v| *v *= k);
    }
    Tensor::new(vec![batch, c], logits)
}

/// Runs the network on `input` of shape `(B, N, N, 3)`.
pub fn forward<T: Element>(
    config: &NetworkConfig,
    params: &Parameters<T>,
    input: &Tensor<T>,
    mode: ForwardMode,
) -> Result<Activations<T>> {
    let expected = config.layer_shape(0);
    if input.rank() != 4 || input.shape()[1..] != expected[..] {
        return Err(HcnnError::Shape(format!(
            "input {:?} does not match (batch, {}, {}, {})",
            input.shape(),
            expected[0],
            expected[1],
            expected[2]
        )));
    }
    forward_from(config, params, 0, input.clone(), mode)
}

/// Resumes the forward pass from a given `x_j` (which may have been modified).
pub fn forward_from<T: Element>(
    config: &NetworkConfig,
    params: &Parameters<T>,
    depth: usize,
    x: Tensor<T>,
    mode: ForwardMode,
) -> Result<Activations<T>> {
    config.validate()?;
    if depth >= config.depth {
        return Err(HcnnError::Config(format!(
            "cannot resume from depth {depth} of a {}-layer network",
            config.depth
        )));
    }
    let batch = x.shape()[0];
    if x.shape()[1..] != config.layer_shape(depth)[..] {
        return Err(HcnnError::Shape(format!(
            "x_{depth} has shape {:?}, expected {:?}",
            &x.shape()[1..],
            config.layer_shape(depth)
        )));
    }
    let mut layers = Vec::with_capacity(config.depth);
    // Layers before the resume point are unknown; keep placeholders so that
    // `layers[j]` stays aligned with the depth.
    for j in 0..depth {
        layers.push(Tensor::zeros(&with_batch(batch, &config.layer_shape(j))));
    }
    layers.push(x);
    let mut separable = vec![None; config.depth - 4];
    for j in depth + 1..config.depth {
        let (out, cache) = layer_forward(config, params, j, &layers[j - 1], mode)?;
        if j >= 4 {
            separable[j - 4] = cache;
        }
        layers.push(out);
    }
    let logits = readout(&layers[config.depth - 1], config.readout)?;
    logits.ensure_finite("logits")?;
    Ok(Activations {
        layers,
        logits,
        mode,
        separable,
    })
}

/// Class decision for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub class: usize,
    pub probabilities: Vec<T>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Evaluation-mode predictions for every image in `input`.
pub fn predict<T: Element>(
    config: &NetworkConfig,
    params: &Parameters<T>,
    input: &Tensor<T>,
) -> Result<Vec<Prediction<T>>> {
    let acts = forward(config, params, input, ForwardMode::EVAL)?;
    Ok(predictions_from_logits(&acts.logits))
}

pub fn predictions_from_logits<T: Element>(logits: &Tensor<T>) -> Vec<Prediction<T>> {
    let probs = softmax(logits);
    let c = logits.shape()[1];
    probs
        .data()
        .chunks_exact(c)
        .map(|row| Prediction {
            class: argmax(row),
            probabilities: row.to_vec(),
        })
        .collect()
}

/// Trainable-scalar counts of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCount {
    pub depth: usize,
    /// Filter coefficients under the reference accounting: the dense
    /// `w_{v_j}` size for the standard variant, `h` plus `g` for Plus.
    pub filters: usize,
    /// Scalars actually stored for the filters (factorized form).
    pub stored_filters: usize,
    /// Biases and normalization scale/shift.
    pub auxiliary: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParameterCount {
    pub layers: Vec<LayerCount>,
    /// Sum of `filters` over all layers.
    pub total: usize,
    /// Every trainable scalar held by [`Parameters`].
    pub trainable: usize,
}

pub fn count_parameters(config: &NetworkConfig) -> Result<ParameterCount> {
    config.validate()?;
    let k = config.max_attributes;
    let [sh, sw] = config.spatial_support;
    let [sa, sb] = config.attribute_support;
    let spatial = sh * sw;
    let mut layers = vec![
        (1, k * spatial * config.input_channels),
        (2, k * spatial * config.layer2_support()),
        (3, k * spatial * sa * sb),
    ]
    .into_iter()
    .map(|(depth, n)| LayerCount {
        depth,
        filters: n,
        stored_filters: n,
        auxiliary: k,
    })
    .collect::<Vec<_>>();
    for j in 4..config.depth {
        let ko = config.out_attributes(j);
        let q = config.rank;
        let factored = q * spatial + ko * q * sa * sb;
        layers.push(LayerCount {
            depth: j,
            filters: match config.variant {
                Variant::Standard => ko * spatial * sa * sb,
                Variant::Plus => factored,
            },
            stored_filters: factored,
            auxiliary: ko + 2 * (k / 2) * k * q,
        });
    }
    let total = layers.iter().map(|l| l.filters).sum();
    let trainable = layers.iter().map(|l| l.stored_filters + l.auxiliary).sum();
    Ok(ParameterCount {
        layers,
        total,
        trainable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn cifar_shape_schedule() {
        let c = NetworkConfig::cifar10();
        c.validate().unwrap();
        assert_eq!(c.layer_shape(1), [32, 32, 16]);
        assert_eq!(c.layer_shape(2), [32, 32, 16, 16]);
        assert_eq!(c.layer_shape(3), [32, 32, 4, 8, 16]);
        assert_eq!(c.layer_shape(5), [16, 16, 4, 8, 16]);
        assert_eq!(c.layer_shape(9), [8, 8, 4, 8, 16]);
        assert_eq!(c.layer_shape(11), [8, 8, 4, 8, 10]);
        assert_eq!(c.layer_shape(12), [10]);
    }

    #[test]
    fn config_validation() {
        let mut c = NetworkConfig::toy();
        c.max_attributes = 6;
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::toy();
        c.stride_depths = vec![1];
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::toy();
        c.stride_depths = vec![6];
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::toy();
        c.attribute_support = [5, 5];
        c.validate().unwrap();
        assert!(c.with_boundary(BoundaryMode::Periodic).validate().is_err());
        let mut c = NetworkConfig::toy();
        c.depth = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let mut v = serde_json::to_value(NetworkConfig::cifar10()).unwrap();
        let back: NetworkConfig = serde_json::from_value(v.clone()).unwrap();
        assert_eq!(back, NetworkConfig::cifar10());
        v["surprise"] = serde_json::json!(1);
        assert!(serde_json::from_value::<NetworkConfig>(v).is_err());
    }

    #[test]
    fn cifar100_filters_overhang_the_attribute_axis() {
        let c = NetworkConfig::cifar100();
        c.validate().unwrap();
        let mut small = c.clone();
        small.spatial_size = 8;
        small.stride_depths = vec![5];
        small.depth = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Parameters::<f32>::init(&small, &mut rng).unwrap();
        let x = Tensor::from_fn(&[2, 8, 8, 3], |i| (i[1] as f32 - i[3] as f32) * 0.2);
        let acts = forward(&small, &p, &x, ForwardMode::TRAIN).unwrap();
        assert_eq!(acts.logits.shape(), &[2, 100]);
    }

    #[test]
    fn zero_parameters_give_zero_logits_and_class_zero() {
        let c = NetworkConfig::toy();
        let p = Parameters::<f64>::zeros(&c).unwrap();
        let x = Tensor::from_fn(&[2, 8, 8, 3], |i| (i[1] as f64 - i[2] as f64) * 0.1);
        let acts = forward(&c, &p, &x, ForwardMode::TRAIN).unwrap();
        assert!(acts.logits.data().iter().all(|&v| v == 0.0));
        let preds = predict(&c, &p, &x).unwrap();
        assert!(preds.iter().all(|p| p.class == 0));
    }

    #[test]
    fn argmax_tie_breaks_low() {
        assert_eq!(argmax(&[1.0f64, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0f64; 4]), 0);
    }

    #[test]
    fn activations_follow_schedule() {
        let c = NetworkConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Parameters::<f64>::init(&c, &mut rng).unwrap();
        let x = Tensor::from_fn(&[2, 8, 8, 3], |i| {
            ((i[1] * 3 + i[2] + i[3]) % 5) as f64 - 2.0
        });
        let acts = forward(&c, &p, &x, ForwardMode::TRAIN).unwrap();
        for j in 0..c.depth {
            assert_eq!(
                &acts.layers[j].shape()[1..],
                &c.layer_shape(j)[..],
                "depth {j}"
            );
        }
        assert_eq!(acts.logits.shape(), &[2, 10]);
        assert!(acts.has_caches());
    }

    #[test]
    fn trainable_names_align() {
        let p = Parameters::<f32>::zeros(&NetworkConfig::toy()).unwrap();
        assert_eq!(p.trainable().len(), p.trainable_names().len());
        assert_eq!(
            p.num_trainable(),
            count_parameters(&NetworkConfig::toy()).unwrap().trainable
        );
    }
}
