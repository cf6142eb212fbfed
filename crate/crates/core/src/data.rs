//! Image datasets: CIFAR binary loaders, per-channel standardization and
//! small synthetic sets for fast training checks.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HcnnError, Result};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
const PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE;
const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Population statistics over every pixel of `images` (last axis = channel).
    pub fn measure(images: &Tensor<f32>) -> Self {
        let c = *images.shape().last().unwrap();
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for px in images.data().chunks_exact(c) {
            for (i, &v) in px.iter().enumerate() {
                sum[i] += v as f64;
                sq[i] += (v as f64) * (v as f64);
            }
        }
        let n = (images.len() / c) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(STD_FLOOR))
            .collect();
        ChannelStats { mean, std }
    }

    pub fn identity(channels: usize) -> Self {
        ChannelStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn apply(&self, images: &mut Tensor<f32>) {
        let c = self.mean.len();
        for px in images.data_mut().chunks_exact_mut(c) {
            for (i, v) in px.iter_mut().enumerate() {
                *v = ((*v as f64 - self.mean[i]) / self.std[i]) as f32;
            }
        }
    }

    /// `(2, C)` tensor: row 0 the means, row 1 the deviations.
    pub fn to_tensor(&self) -> Tensor<f64> {
        let mut d = self.mean.clone();
        d.extend_from_slice(&self.std);
        Tensor::new(vec![2, self.mean.len()], d).expect("stats shape")
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Result<Self> {
        if t.rank() != 2 || t.shape()[0] != 2 {
            return Err(HcnnError::Format(format!(
                "standardization tensor has shape {:?}",
                t.shape()
            )));
        }
        let c = t.shape()[1];
        Ok(ChannelStats {
            mean: t.data()[..c].to_vec(),
            std: t.data()[c..].to_vec(),
        })
    }
}

/// Images `(count, side, side, channels)` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    /// Statistics already applied to `images`, if any.
    pub stats: Option<ChannelStats>,
}

impl LabeledImageSet {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(HcnnError::Data(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(HcnnError::Data(format!(
                "label {l} outside 0..{num_classes}"
            )));
        }
        Ok(LabeledImageSet {
            images,
            labels,
            num_classes,
            split,
            stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    /// Gathers the given images (in order) into one batch tensor.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let per = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.image_shape());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("gather shape"), labels)
    }

    /// The first `count` images.
    pub fn head(&self, count: usize) -> Result<Self> {
        if count == 0 || count > self.len() {
            return Err(HcnnError::Data(format!(
                "cannot take {count} of {} images",
                self.len()
            )));
        }
        let idx: Vec<usize> = (0..count).collect();
        let (images, labels) = self.gather(&idx);
        Ok(LabeledImageSet {
            images,
            labels,
            num_classes: self.num_classes,
            split: self.split,
            stats: self.stats.clone(),
        })
    }

    pub fn standardize(&mut self, stats: &ChannelStats) -> Result<()> {
        if self.stats.is_some() {
            return Err(HcnnError::Data("dataset already standardized".into()));
        }
        stats.apply(&mut self.images);
        self.stats = Some(stats.clone());
        Ok(())
    }
}

/// Standardizes both splits with statistics measured on `train`.
pub fn standardize_pair(
    train: &mut LabeledImageSet,
    test: &mut LabeledImageSet,
) -> Result<ChannelStats> {
    let stats = ChannelStats::measure(&train.images);
    train.standardize(&stats)?;
    test.standardize(&stats)?;
    Ok(stats)
}

/// Record layout of a CIFAR binary file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarFormat {
    /// One label byte per record.
    Ten,
    /// Coarse then fine label byte; the fine label is used.
    Hundred,
}

impl CifarFormat {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarFormat::Ten => 1,
            CifarFormat::Hundred => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + CIFAR_CHANNELS * PIXELS
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarFormat::Ten => 10,
            CifarFormat::Hundred => 100,
        }
    }
}

/// Decodes whole records into interleaved `[0, 1]` pixels and labels.
pub fn parse_records(bytes: &[u8], format: CifarFormat) -> Result<(Vec<f32>, Vec<usize>)> {
    let rec = format.record_len();
    if bytes.len() % rec != 0 {
        return Err(HcnnError::Data(format!(
            "truncated file: {} bytes is not a multiple of the {rec}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / rec;
    let mut pixels = Vec::with_capacity(n * PIXELS * CIFAR_CHANNELS);
    let mut labels = Vec::with_capacity(n);
    for r in bytes.chunks_exact(rec) {
        let label = r[format.label_bytes() - 1] as usize;
        if label >= format.num_classes() {
            return Err(HcnnError::Data(format!("label byte {label} out of range")));
        }
        labels.push(label);
        let planes = &r[format.label_bytes()..];
        for p in 0..PIXELS {
            for c in 0..CIFAR_CHANNELS {
                pixels.push(planes[c * PIXELS + p] as f32 / 255.0);
            }
        }
    }
    Ok((pixels, labels))
}

/// Reads and concatenates `files` in order. `expected` enforces a record count.
pub fn read_split(
    files: &[PathBuf],
    format: CifarFormat,
    split: Split,
    expected: Option<usize>,
) -> Result<LabeledImageSet> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let bytes = fs::read(f).map_err(|e| HcnnError::Data(format!("{}: {e}", f.display())))?;
        let (p, l) = parse_records(&bytes, format)
            .map_err(|e| HcnnError::Data(format!("{}: {e}", f.display())))?;
        pixels.extend(p);
        labels.extend(l);
    }
    if let Some(n) = expected {
        if labels.len() != n {
            return Err(HcnnError::Data(format!(
                "{split:?} split has {} records, expected {n}",
                labels.len()
            )));
        }
    }
    if labels.is_empty() {
        return Err(HcnnError::Data(format!("{split:?} split is empty")));
    }
    let images = Tensor::new(
        vec![labels.len(), CIFAR_SIDE, CIFAR_SIDE, CIFAR_CHANNELS],
        pixels,
    )?;
    LabeledImageSet::new(images, labels, format.num_classes(), split)
}

fn resolve_dir(path: &Path, nested: &str, probe: &str) -> PathBuf {
    if path.join(probe).exists() {
        path.to_path_buf()
    } else {
        path.join(nested)
    }
}

/// Unstandardized train and test splits of a CIFAR binary distribution
/// directory (or its parent), with the exact record counts enforced.
pub fn load_cifar_raw(
    path: &Path,
    format: CifarFormat,
) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let (train_files, test_files) = cifar_files(path, format);
    let train = read_split(&train_files, format, Split::Train, Some(50_000))?;
    let test = read_split(&test_files, format, Split::Test, Some(10_000))?;
    Ok((train, test))
}

/// Training and test file lists in their concatenation order.
pub fn cifar_files(path: &Path, format: CifarFormat) -> (Vec<PathBuf>, Vec<PathBuf>) {
    match format {
        CifarFormat::Ten => {
            let dir = resolve_dir(path, "cifar-10-batches-bin", "test_batch.bin");
            (
                (1..=5)
                    .map(|i| dir.join(format!("data_batch_{i}.bin")))
                    .collect(),
                vec![dir.join("test_batch.bin")],
            )
        }
        CifarFormat::Hundred => {
            let dir = resolve_dir(path, "cifar-100-binary", "test.bin");
            (vec![dir.join("train.bin")], vec![dir.join("test.bin")])
        }
    }
}

/// Loads CIFAR-10 and standardizes both splits with training-split statistics.
pub fn load_cifar10(path: &Path) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let (mut train, mut test) = load_cifar_raw(path, CifarFormat::Ten)?;
    standardize_pair(&mut train, &mut test)?;
    Ok((train, test))
}

/// Loads CIFAR-100 (fine labels) and standardizes as for CIFAR-10.
pub fn load_cifar100(path: &Path) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let (mut train, mut test) = load_cifar_raw(path, CifarFormat::Hundred)?;
    standardize_pair(&mut train, &mut test)?;
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Each class is a flat color plus bounded noise.
    Easy,
    /// Each class is a sinusoidal grating at its own orientation, random phase.
    Gratings,
}

/// Parameters of a synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub count: usize,
    pub seed: u64,
    #[serde(default = "default_side")]
    pub side: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
}

fn default_side() -> usize {
    CIFAR_SIDE
}

fn default_classes() -> usize {
    10
}

/// Largest per-pixel noise amplitude of the easy kind.
pub const EASY_NOISE: f32 = 0.05;

/// Class colors of the easy kind: distinct points of `{0.1, 0.5, 0.9}^3`.
pub fn easy_palette(num_classes: usize) -> Vec<[f32; 3]> {
    let levels = [0.1f32, 0.5, 0.9];
    (0..num_classes)
        .map(|c| {
            let c = c % 27;
            [levels[c % 3], levels[(c / 3) % 3], levels[c / 9]]
        })
        .collect()
}

pub fn synth_dataset(kind: SynthKind, count: usize, seed: u64) -> Result<LabeledImageSet> {
    synth(&SynthSpec {
        kind,
        count,
        seed,
        side: CIFAR_SIDE,
        num_classes: 10,
    })
}

/// Unstandardized synthetic images with balanced, shuffled labels.
pub fn synth(spec: &SynthSpec) -> Result<LabeledImageSet> {
    if spec.count == 0 || spec.side == 0 || spec.num_classes < 2 {
        return Err(HcnnError::Config(format!(
            "degenerate synthetic spec {spec:?}"
        )));
    }
    if spec.kind == SynthKind::Easy && spec.num_classes > 27 {
        return Err(HcnnError::Config(
            "easy kind supports at most 27 classes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<usize> = (0..spec.count).map(|i| i % spec.num_classes).collect();
    labels.shuffle(&mut rng);
    let s = spec.side;
    let per = s * s * CIFAR_CHANNELS;
    let palette = easy_palette(spec.num_classes);
    let mut data = Vec::with_capacity(spec.count * per);
    for &label in &labels {
        match spec.kind {
            SynthKind::Easy => {
                for _ in 0..s * s {
                    for &level in &palette[label] {
                        data.push(level + rng.gen_range(-EASY_NOISE..EASY_NOISE));
                    }
                }
            }
            SynthKind::Gratings => {
                let theta = PI * label as f64 / spec.num_classes as f64;
                let (dy, dx) = theta.sin_cos();
                let freq = 2.0 * PI / 4.0;
                let phase = rng.gen_range(0.0..2.0 * PI);
                for y in 0..s {
                    for x in 0..s {
                        let v = 0.5 + 0.4 * (freq * (dx * x as f64 + dy * y as f64) + phase).sin();
                        for _ in 0..CIFAR_CHANNELS {
                            data.push((v + rng.gen_range(-0.05..0.05)) as f32);
                        }
                    }
                }
            }
        }
    }
    let images = Tensor::new(vec![spec.count, s, s, CIFAR_CHANNELS], data)?;
    LabeledImageSet::new(images, labels, spec.num_classes, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: &[u8], fill: impl Fn(usize, usize) -> u8) -> Vec<u8> {
        let mut r = label.to_vec();
        for c in 0..3 {
            for p in 0..PIXELS {
                r.push(fill(c, p));
            }
        }
        r
    }

    #[test]
    fn two_record_fixture_round_trips() {
        let mut bytes = record(&[7], |c, p| ((c * 50 + p) % 256) as u8);
        bytes.extend(record(&[2], |c, _| [0, 128, 255][c]));
        let (px, labels) = parse_records(&bytes, CifarFormat::Ten).unwrap();
        assert_eq!(labels, [7, 2]);
        // Record 0, pixel (row 1, col 2) = planar offset 34, interleaved (34*3 + c).
        for c in 0..3 {
            assert_eq!(px[34 * 3 + c], ((c * 50 + 34) % 256) as f32 / 255.0);
        }
        let second = &px[PIXELS * 3..];
        assert_eq!(&second[..3], &[0.0, 128.0 / 255.0, 1.0]);
        assert_eq!(second[second.len() - 1], 1.0);
    }

    #[test]
    fn hundred_uses_fine_label() {
        let bytes = record(&[3, 42], |_, _| 0);
        let (_, labels) = parse_records(&bytes, CifarFormat::Hundred).unwrap();
        assert_eq!(labels, [42]);
    }

    #[test]
    fn truncated_and_miscounted_files_fail() {
        let bytes = record(&[1], |_, _| 9);
        assert!(parse_records(&bytes[..100], CifarFormat::Ten).is_err());
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("b.bin");
        fs::write(&f, &bytes).unwrap();
        assert!(read_split(&[f.clone()], CifarFormat::Ten, Split::Test, Some(2)).is_err());
        assert_eq!(
            read_split(&[f], CifarFormat::Ten, Split::Test, Some(1))
                .unwrap()
                .len(),
            1
        );
    }

    #[test]
    fn constant_channels_standardize_to_zero() {
        let images = Tensor::<f32>::from_fn(&[4, 2, 2, 3], |i| [0.2, 0.7, 1.0][i[3]]);
        let mut set = LabeledImageSet::new(images, vec![0, 1, 0, 1], 2, Split::Train).unwrap();
        let stats = ChannelStats::measure(&set.images);
        assert!(stats.std.iter().all(|&s| s == STD_FLOOR));
        set.standardize(&stats).unwrap();
        assert!(set.images.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardized_train_split_has_unit_moments() {
        let mut train = synth_dataset(SynthKind::Gratings, 40, 3).unwrap();
        let mut test = synth_dataset(SynthKind::Easy, 10, 4).unwrap();
        standardize_pair(&mut train, &mut test).unwrap();
        let after = ChannelStats::measure(&train.images);
        for c in 0..3 {
            assert!(after.mean[c].abs() < 1e-3);
            assert!((after.std[c] - 1.0).abs() < 1e-3);
        }
        assert!(train.standardize(&after).is_err());
    }

    #[test]
    fn synthetic_sets_are_reproducible() {
        for kind in [SynthKind::Easy, SynthKind::Gratings] {
            let a = synth_dataset(kind, 30, 11).unwrap();
            let b = synth_dataset(kind, 30, 11).unwrap();
            assert_eq!(a.images.to_bytes(), b.images.to_bytes());
            assert_eq!(a.labels, b.labels);
            assert_ne!(a.images, synth_dataset(kind, 30, 12).unwrap().images);
        }
    }

    #[test]
    fn easy_kind_is_linearly_separable() {
        // Score_c(x) = <mean color of x, p_c> - |p_c|^2 / 2 is linear in the
        // pixels and picks the nearest palette color.
        let set = synth_dataset(SynthKind::Easy, 200, 5).unwrap();
        let palette = easy_palette(10);
        for (i, &label) in set.labels.iter().enumerate() {
            let (img, _) = set.gather(&[i]);
            let mut mean = [0.0f64; 3];
            for px in img.data().chunks_exact(3) {
                for c in 0..3 {
                    mean[c] += px[c] as f64 / PIXELS as f64;
                }
            }
            let score = |p: &[f32; 3]| {
                (0..3)
                    .map(|c| mean[c] * p[c] as f64 - 0.5 * (p[c] as f64).powi(2))
                    .sum::<f64>()
            };
            let best = (0..10)
                .max_by(|&a, &b| score(&palette[a]).partial_cmp(&score(&palette[b])).unwrap())
                .unwrap();
            assert_eq!(best, label);
        }
    }

    #[test]
    fn stats_tensor_round_trip() {
        let s = ChannelStats {
            mean: vec![0.1, 0.2, 0.3],
            std: vec![1.0, 2.0, 3.0],
        };
        assert_eq!(ChannelStats::from_tensor(&s.to_tensor()).unwrap(), s);
    }
}
