//! Reverse-mode gradients, momentum SGD and the training loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::LabeledImageSet;
use crate::error::{HcnnError, Result};
use crate::kernels::LoweredConv;
use crate::model::{
    argmax, dense_geometry, forward, Activations, ForwardMode, NetworkConfig, Parameters,
};
use crate::ops::{
    cross_entropy_from_logits, cross_entropy_logits_grad, elu_backward_in_place,
    separable_attribute_conv_backward,
};
use crate::tensor::{Element, Tensor};

/// Gradient of the minibatch-mean cross-entropy with respect to every
/// trainable array, laid out like the parameters themselves.
pub fn backward<T: Element>(
    config: &NetworkConfig,
    params: &Parameters<T>,
    acts: &Activations<T>,
    labels: &[usize],
) -> Result<Parameters<T>> {
    let dlogits = cross_entropy_logits_grad(&acts.logits, labels)?;
    backward_from_logits(config, params, acts, &dlogits)
}

/// Backpropagates an arbitrary upstream gradient on the logits.
pub fn backward_from_logits<T: Element>(
    config: &NetworkConfig,
    params: &Parameters<T>,
    acts: &Activations<T>,
    dlogits: &Tensor<T>,
) -> Result<Parameters<T>> {
    if !acts.has_caches() || acts.layers.len() != config.depth {
        return Err(HcnnError::Shape(
            "activations lack training caches; rerun forward with ForwardMode::TRAIN".into(),
        ));
    }
    if dlogits.shape() != acts.logits.shape() {
        return Err(HcnnError::Shape(format!(
            "logit gradient {:?} vs logits {:?}",
            dlogits.shape(),
            acts.logits.shape()
        )));
    }
    let mut grads = params.zeros_like();
    let batch = acts.batch();
    let last = &acts.layers[config.depth - 1];
    let c = config.num_classes;
    let per = last.len() / (batch * c);
    let k: T = config.readout.scale(per);
    let mut dy = Vec::with_capacity(last.len());
    for b in 0..batch {
        let row: Vec<T> = dlogits.data()[b * c..(b + 1) * c]
            .iter()
            .map(|&v| v * k)
            .collect();
        let row = &row[..];
        for _ in 0..per {
            dy.extend_from_slice(row);
        }
    }
    let mut dy = Tensor::new(last.shape().to_vec(), dy)?;

    for j in (4..config.depth).rev() {
        let cache = acts.separable[j - 4].as_ref().expect("checked above");
        let (dx, g) = separable_attribute_conv_backward(
            &dy,
            cache,
            &params.separable[j - 4],
            config.variant,
            true,
        )?;
        let slot = &mut grads.separable[j - 4];
        slot.spatial.data_mut().copy_from_slice(&g.spatial);
        slot.attribute.data_mut().copy_from_slice(&g.attribute);
        slot.bias.data_mut().copy_from_slice(&g.bias);
        slot.norm.gamma.data_mut().copy_from_slice(&g.gamma);
        slot.norm.beta.data_mut().copy_from_slice(&g.beta);
        dy = dx.expect("requested");
    }
    for j in (1..=3).rev() {
        let geometry: LoweredConv = dense_geometry(config, j, batch);
        let (layer, slot) = match j {
            1 => (&params.layer1, &mut grads.layer1),
            2 => (&params.layer2, &mut grads.layer2),
            _ => (&params.layer3, &mut grads.layer3),
        };
        let mut dz = dy.into_data();
        let db = elu_backward_in_place(&mut dz, acts.layers[j].data(), config.max_attributes);
        let (dx, dw) = geometry.backward(
            acts.layers[j - 1].data(),
            layer.filter.data(),
            &dz,
            j > 1,
            true,
        )?;
        slot.filter
            .data_mut()
            .copy_from_slice(&dw.expect("requested"));
        slot.bias.data_mut().copy_from_slice(&db);
        dy = match dx {
            Some(dx) => Tensor::new(acts.layers[j - 1].shape().to_vec(), dx)?,
            None => Tensor::zeros(&[1]),
        };
    }
    for (t, name) in grads.trainable().iter().zip(params.trainable_names()) {
        t.ensure_finite(&format!("gradient of {name}"))?;
    }
    Ok(grads)
}

/// Learning-rate schedule and minibatching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub decay_period: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            initial_lr: 0.25,
            decay_factor: 10.0,
            decay_period: 40,
            epochs: 240,
            batch_size: 50,
        }
    }
}

impl Schedule {
    pub fn rate(&self, epoch: usize) -> f64 {
        self.initial_lr / self.decay_factor.powi((epoch / self.decay_period) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(HcnnError::Config(format!(
                "learning rate {}",
                self.initial_lr
            )));
        }
        if self.decay_factor < 1.0 || self.decay_period == 0 || self.batch_size == 0 {
            return Err(HcnnError::Config(format!("invalid schedule {self:?}")));
        }
        Ok(())
    }
}

/// Random translations with zero fill and horizontal flips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub enabled: bool,
    pub max_translation: usize,
    pub flip_probability: f64,
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            enabled: true,
            max_translation: 6,
            flip_probability: 0.5,
            seed: 0,
        }
    }
}

impl AugmentationPolicy {
    pub fn disabled() -> Self {
        AugmentationPolicy {
            enabled: false,
            ..Self::default()
        }
    }

    /// Augments every image of a `(B, H, W, C)` batch in place.
    pub fn apply(&self, batch: &mut Tensor<f32>, rng: &mut ChaCha8Rng) {
        if !self.enabled {
            return;
        }
        let s = batch.shape().to_vec();
        let (h, w, c) = (s[1], s[2], s[3]);
        let m = self.max_translation as isize;
        let per = h * w * c;
        let mut src = vec![0.0f32; per];
        for img in batch.data_mut().chunks_exact_mut(per) {
            let dy = rng.gen_range(-m..=m);
            let dx = rng.gen_range(-m..=m);
            let flip = rng.gen_bool(self.flip_probability);
            src.copy_from_slice(img);
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize - dy;
                    let tx = x as isize - dx;
                    let dst = &mut img[(y * w + x) * c..(y * w + x + 1) * c];
                    if sy < 0 || sy >= h as isize || tx < 0 || tx >= w as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let sx = if flip {
                        w - 1 - tx as usize
                    } else {
                        tx as usize
                    };
                    let o = (sy as usize * w + sx) * c;
                    dst.copy_from_slice(&src[o..o + c]);
                }
            }
        }
    }
}

/// Momentum SGD state; `velocity` mirrors the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub velocity: Parameters<T>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr: f64,
    pub epoch: usize,
    pub step: u64,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(params: &Parameters<T>, lr: f64) -> Self {
        OptimizerState {
            velocity: params.zeros_like(),
            momentum: 0.9,
            weight_decay: 2e-4,
            lr,
            epoch: 0,
            step: 0,
        }
    }
}

/// `v <- m v - lr (g + wd θ)`, `θ <- θ + v` for every trainable array.
pub fn sgd_step<T: Element>(
    params: &mut Parameters<T>,
    grads: &Parameters<T>,
    state: &mut OptimizerState<T>,
) {
    let m = T::from_f64_lossy(state.momentum);
    let lr = T::from_f64_lossy(state.lr);
    let wd = T::from_f64_lossy(state.weight_decay);
    for ((p, g), v) in params
        .trainable_mut()
        .into_iter()
        .zip(grads.trainable())
        .zip(state.velocity.trainable_mut())
    {
        for ((p, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *v = m * *v - lr * (g + wd * *p);
            *p += *v;
        }
    }
    state.step += 1;
}

/// Loss, accuracy and gradients for one minibatch; running estimates are
/// folded in afterwards.
pub fn train_step(
    config: &NetworkConfig,
    params: &mut Parameters<f32>,
    state: &mut OptimizerState<f32>,
    images: &Tensor<f32>,
    labels: &[usize],
) -> Result<(f64, usize)> {
    let acts =
        forward(config, params, images, ForwardMode::TRAIN).map_err(|e| at_step(e, state.step))?;
    let loss = cross_entropy_from_logits(&acts.logits, labels)? as f64;
    if !loss.is_finite() {
        return Err(HcnnError::NonFinite(format!(
            "loss {loss} at step {}",
            state.step
        )));
    }
    let correct = acts
        .logits
        .data()
        .chunks_exact(config.num_classes)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    let grads = backward(config, params, &acts, labels).map_err(|e| at_step(e, state.step))?;
    params.commit_batch_statistics(&acts);
    sgd_step(params, &grads, state);
    Ok((loss, correct))
}

fn at_step(e: HcnnError, step: u64) -> HcnnError {
    match e {
        HcnnError::NonFinite(m) => HcnnError::NonFinite(format!("{m} at step {step}")),
        e => e,
    }
}

/// Evaluation-mode accuracy and per-image predicted classes.
pub fn evaluate(
    config: &NetworkConfig,
    params: &Parameters<f32>,
    set: &LabeledImageSet,
    batch_size: usize,
) -> Result<(f64, Vec<usize>)> {
    let mut preds = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = set.gather(chunk);
        let acts = forward(config, params, &x, ForwardMode::EVAL)?;
        preds.extend(
            acts.logits
                .data()
                .chunks_exact(config.num_classes)
                .map(argmax),
        );
    }
    let correct = preds
        .iter()
        .zip(&set.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok((correct as f64 / set.len() as f64, preds))
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub wall_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub schedule: Schedule,
    pub augmentation: AugmentationPolicy,
    /// Seeds initialization and shuffling.
    pub seed: u64,
    /// Stop after this many optimizer steps (within the epoch budget).
    #[serde(default)]
    pub max_steps: Option<u64>,
    /// Evaluate the test split every this many epochs (and after the last).
    #[serde(default = "one")]
    pub eval_every: usize,
    /// Write `checkpoint_epoch<N>.hcnn` every this many epochs.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    /// Record elapsed wall time; off makes logs byte-reproducible.
    #[serde(default = "yes")]
    pub log_wall_time: bool,
    #[serde(default = "eval_batch")]
    pub eval_batch: usize,
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn eval_batch() -> usize {
    100
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            schedule: Schedule::default(),
            augmentation: AugmentationPolicy::default(),
            seed: 0,
            max_steps: None,
            eval_every: 1,
            checkpoint_every: None,
            log_wall_time: true,
            eval_batch: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub records: Vec<EpochRecord>,
    /// Training accuracy of the final parameters in evaluation mode.
    pub final_train_acc: f64,
    pub final_test_acc: Option<f64>,
}

/// Runs the full optimization loop. When `out_dir` is given, the metrics log
/// (`metrics.jsonl`), periodic checkpoints and `checkpoint.hcnn` are written
/// there.
pub fn train(
    config: &NetworkConfig,
    train_set: &LabeledImageSet,
    test_set: Option<&LabeledImageSet>,
    opts: &TrainOptions,
    out_dir: Option<&std::path::Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    opts.schedule.validate()?;
    if train_set.image_shape() != config.layer_shape(0) {
        return Err(HcnnError::Data(format!(
            "images {:?} do not match the network input {:?}",
            train_set.image_shape(),
            config.layer_shape(0)
        )));
    }
    if train_set.num_classes != config.num_classes {
        return Err(HcnnError::Data(format!(
            "{} dataset classes for a {}-class network",
            train_set.num_classes, config.num_classes
        )));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(opts.augmentation.seed);
    let mut params = Parameters::<f32>::init(config, &mut init_rng)?;
    let mut state = OptimizerState::new(&params, opts.schedule.rate(0));

    let mut log = match out_dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            Some(BufWriter::new(File::create(d.join("metrics.jsonl"))?))
        }
        None => None,
    };
    let checkpoint = |params: &Parameters<f32>, step: u64| Checkpoint {
        config: config.clone(),
        params: params.clone(),
        stats: train_set.stats.clone(),
        step,
    };
    let start = Instant::now();
    let mut records = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut last_test = None;
    'epochs: for epoch in 0..opts.schedule.epochs {
        state.epoch = epoch;
        state.lr = opts.schedule.rate(epoch);
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
        let mut stop = false;
        for chunk in order.chunks(opts.schedule.batch_size) {
            let (mut x, labels) = train_set.gather(chunk);
            opts.augmentation.apply(&mut x, &mut aug_rng);
            let (loss, ok) = train_step(config, &mut params, &mut state, &x, &labels)?;
            loss_sum += loss * chunk.len() as f64;
            correct += ok;
            seen += chunk.len();
            if opts.max_steps.is_some_and(|m| state.step >= m) {
                stop = true;
                break;
            }
        }
        let last_epoch = stop || epoch + 1 == opts.schedule.epochs;
        let test_acc = match test_set {
            Some(t) if last_epoch || (epoch + 1) % opts.eval_every.max(1) == 0 => {
                Some(evaluate(config, &params, t, opts.eval_batch)?.0)
            }
            _ => None,
        };
        last_test = test_acc.or(last_test);
        let rec = EpochRecord {
            epoch,
            step: state.step,
            lr: state.lr,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            test_acc,
            wall_ms: opts
                .log_wall_time
                .then(|| start.elapsed().as_millis() as u64),
        };
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, &rec)
                .map_err(|e| HcnnError::Format(format!("metrics encoding: {e}")))?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        records.push(rec);
        if let (Some(d), Some(every)) = (out_dir, opts.checkpoint_every) {
            if every > 0 && (epoch + 1) % every == 0 {
                checkpoint(&params, state.step)
                    .save(&d.join(format!("checkpoint_epoch{}.hcnn", epoch + 1)))?;
            }
        }
        if stop {
            break 'epochs;
        }
    }
    let ck = checkpoint(&params, state.step);
    if let Some(d) = out_dir {
        ck.save(&d.join("checkpoint.hcnn"))?;
    }
    let final_train_acc = evaluate(config, &params, train_set, opts.eval_batch)?.0;
    Ok(TrainOutcome {
        checkpoint: ck,
        records,
        final_train_acc,
        final_test_acc: last_test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps_down_every_period() {
        let s = Schedule::default();
        assert_eq!(s.rate(0), 0.25);
        assert_eq!(s.rate(39), 0.25);
        assert!((s.rate(40) - 0.025).abs() < 1e-15);
        assert!((s.rate(239) - 0.25e-5).abs() < 1e-18);
    }

    fn scalar_params(value: f64) -> Parameters<f64> {
        let mut p = Parameters::<f64>::zeros(&NetworkConfig::toy()).unwrap();
        for t in p.trainable_mut() {
            t.data_mut().fill(value);
        }
        p
    }

    #[test]
    fn sgd_single_and_double_step() {
        let mut p = scalar_params(1.0);
        let g = scalar_params(1.0);
        let mut st = OptimizerState::new(&p, 0.1);
        st.weight_decay = 0.0;
        sgd_step(&mut p, &g, &mut st);
        assert!((p.layer1.filter.data()[0] - 0.9).abs() < 1e-15);
        assert!((st.velocity.layer1.filter.data()[0] + 0.1).abs() < 1e-15);
        sgd_step(&mut p, &g, &mut st);
        assert!((st.velocity.separable[0].norm.beta.data()[0] + 0.1 * 1.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut p = scalar_params(0.3);
        let before = p.clone();
        let mut st = OptimizerState::new(&p, 0.1);
        st.weight_decay = 0.0;
        let zero = p.zeros_like();
        sgd_step(&mut p, &zero, &mut st);
        assert_eq!(p, before);
    }

    #[test]
    fn decay_skips_running_estimates() {
        let mut p = scalar_params(1.0);
        p.separable[0].norm.running_mean.data_mut().fill(0.5);
        let mut st = OptimizerState::new(&p, 0.1);
        let zero = p.zeros_like();
        sgd_step(&mut p, &zero, &mut st);
        assert!(p
            .trainable()
            .iter()
            .all(|t| t.data().iter().all(|&v| v < 1.0)));
        assert!(p.separable[0]
            .norm
            .running_mean
            .data()
            .iter()
            .all(|&v| v == 0.5));
    }

    #[test]
    fn augmentation_translates_with_zero_fill_and_flips() {
        let img = Tensor::<f32>::from_fn(&[1, 4, 4, 1], |i| (i[1] * 4 + i[2] + 1) as f32);
        let policy = AugmentationPolicy {
            enabled: true,
            max_translation: 1,
            flip_probability: 0.5,
            seed: 0,
        };
        let mut seen_flip = false;
        for seed in 0..20 {
            let mut x = img.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Replay the draws to know which transform was applied.
            let mut probe = ChaCha8Rng::seed_from_u64(seed);
            let dy = probe.gen_range(-1isize..=1);
            let dx = probe.gen_range(-1isize..=1);
            let flip = probe.gen_bool(0.5);
            policy.apply(&mut x, &mut rng);
            for y in 0..4isize {
                for xx in 0..4isize {
                    let (sy, tx) = (y - dy, xx - dx);
                    let expect = if (0..4).contains(&sy) && (0..4).contains(&tx) {
                        let sx = if flip { 3 - tx } else { tx };
                        (sy * 4 + sx + 1) as f32
                    } else {
                        0.0
                    };
                    assert_eq!(x.get(&[0, y as usize, xx as usize, 0]), expect);
                }
            }
            seen_flip |= flip;
        }
        assert!(seen_flip);
    }
}
