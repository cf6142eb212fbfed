//! Invariant attribute arrays, translated nearest-neighbour retrieval and the
//! splice probe that measures how far the network is from exact invariance.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{HcnnError, Result};
use crate::model::{forward, forward_from, Activations, ForwardMode, NetworkConfig, Parameters};
use crate::ops::NormMode;
use crate::tensor::{read_u32, read_u64, BoundaryMode, Element, Tensor};

/// `Σ_{v_{j-2}} x_j(u_0, v_{j-2}, v_{j-1}, v_j)` for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeArray {
    /// `(v_{j-1}, v_j)` extents.
    pub values: Tensor<f64>,
    pub image_id: u64,
    pub depth: usize,
    pub center: [usize; 2],
    pub label: Option<usize>,
}

/// Sums `x_j` of batch item `item` over its first attribute axis at the
/// central spatial cell (`floor(n / 2)` on both axes).
pub fn invariant_array<T: Element>(
    acts: &Activations<T>,
    depth: usize,
    item: usize,
    image_id: u64,
) -> Result<AttributeArray> {
    let j_max = acts.layers.len();
    if depth < 3 || depth >= j_max {
        return Err(HcnnError::Config(format!(
            "invariant arrays exist for depths 3..={}, got {depth}",
            j_max - 1
        )));
    }
    let x = &acts.layers[depth];
    let s = x.shape();
    if item >= s[0] {
        return Err(HcnnError::Shape(format!("item {item} of batch {}", s[0])));
    }
    let center = [s[1] / 2, s[2] / 2];
    let (a0, a1, a2) = (s[3], s[4], s[5]);
    let values = Tensor::from_fn(&[a1, a2], |i| {
        (0..a0)
            .map(|k| x.get(&[item, center[0], center[1], k, i[0], i[1]]).as_f64())
            .sum()
    });
    Ok(AttributeArray {
        values,
        image_id,
        depth,
        center,
        label: None,
    })
}

/// Causal box filter of width `w` along axis 0 with periodic wrap:
/// `out[v] = (1/w) Σ_{i<w} x[v - i]`.
pub fn smooth(values: &Tensor<f64>, width: usize) -> Result<Tensor<f64>> {
    if width == 0 {
        return Err(HcnnError::Config(
            "smoothing width must be at least 1".into(),
        ));
    }
    let (n, m) = (values.shape()[0], values.shape()[1]);
    let inv = 1.0 / width as f64;
    Ok(Tensor::from_fn(&[n, m], |idx| {
        let mut acc = 0.0;
        for i in 0..width {
            let v = (idx[0] + n * width - i) % n;
            acc += values.get(&[v, idx[1]]);
        }
        acc * inv
    }))
}

/// One ranked corpus entry.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Match {
    pub rank: usize,
    pub image_id: u64,
    pub label: Option<usize>,
    pub distance: f64,
}

/// Ranks `corpus` by the distance between each smoothed entry and the
/// smoothed query circularly shifted by `tau` along `v_{j-1}`. Ties go to the
/// lowest image id.
pub fn nearest_translated(
    query: &AttributeArray,
    tau: isize,
    corpus: &[AttributeArray],
    smooth_width: usize,
) -> Result<Vec<Match>> {
    let q = smooth(&query.values, smooth_width)?.translate(0, tau, BoundaryMode::Periodic)?;
    let mut out = Vec::with_capacity(corpus.len());
    for c in corpus {
        if c.values.shape() != q.shape() {
            return Err(HcnnError::Shape(format!(
                "corpus image {} has extents {:?}, query {:?}",
                c.image_id,
                c.values.shape(),
                q.shape()
            )));
        }
        let s = smooth(&c.values, smooth_width)?;
        let d2: f64 = s
            .data()
            .iter()
            .zip(q.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        out.push(Match {
            rank: 0,
            image_id: c.image_id,
            label: c.label,
            distance: d2.sqrt(),
        });
    }
    out.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.image_id.cmp(&b.image_id))
    });
    for (i, m) in out.iter_mut().enumerate() {
        m.rank = i + 1;
    }
    Ok(out)
}

/// Shift period under which `x_j`'s axis `axis` (batch axis excluded) leaves
/// the logits unchanged, or `None` when no nonzero shift does.
pub fn invariance_period(config: &NetworkConfig, depth: usize, axis: usize) -> Option<usize> {
    if axis < 2 {
        let p = (depth + 1..config.depth)
            .map(|j| config.spatial_stride(j))
            .product();
        return Some(p);
    }
    if depth == 0 {
        return None;
    }
    let mut pos = axis - 2;
    let mut period = 1;
    for next in depth + 1..=config.depth {
        match next {
            2 => {}
            3 => period *= if pos == 0 { 4 } else { 2 },
            j if j == config.depth => return (pos < 2).then_some(period),
            _ => {
                if pos == 0 {
                    return Some(period);
                }
                period *= 2;
                pos -= 1;
            }
        }
    }
    unreachable!("the final layer always returns")
}

fn axis_name(depth: usize, axis: usize) -> String {
    match axis {
        0 => "u1".into(),
        1 => "u2".into(),
        _ => {
            // Attribute axes of x_j end with v_j.
            let n_attr = match depth {
                1 => 1,
                2 => 2,
                _ => 3,
            };
            format!("v{}", depth + axis - 1 - n_attr)
        }
    }
}

/// One splice of the probe.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeEntry {
    pub depth: usize,
    pub axis: String,
    pub shift: isize,
    pub period: usize,
    /// Whether the shift lies on the invariance lattice (gated).
    pub gated: bool,
    pub deviation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub boundary: BoundaryMode,
    /// Zero padding breaks exact equivariance; such reports are not gated.
    pub informational: bool,
    pub tolerance: f64,
    pub max_gated_deviation: f64,
    pub passed: bool,
    pub entries: Vec<ProbeEntry>,
}

/// Splices translated copies of every `x_j` (`j < J-1`) back into the forward
/// pass and compares the logits with the unshifted ones.
///
/// Gated shifts are `±period` along every axis with an invariance period;
/// one off-lattice shift per axis is added ungated when the period exceeds 1.
pub fn covariance_probe<T: Element>(
    config: &NetworkConfig,
    params: &Parameters<T>,
    input: &Tensor<T>,
    tolerance: f64,
) -> Result<ProbeReport> {
    let mode = ForwardMode {
        norm: NormMode::Batch,
        keep_caches: false,
    };
    let base = forward(config, params, input, mode)?;
    let mut entries = Vec::new();
    for depth in 0..config.depth - 1 {
        let x = &base.layers[depth];
        for axis in 0..x.rank() - 1 {
            let Some(period) = invariance_period(config, depth, axis) else {
                continue;
            };
            let extent = x.shape()[axis + 1];
            let mut shifts: Vec<(isize, bool)> = Vec::new();
            if period < extent {
                shifts.push((period as isize, true));
                if 2 * period != extent {
                    shifts.push((-(period as isize), true));
                }
            }
            if period > 1 {
                shifts.push((1, false));
            }
            for (shift, gated) in shifts {
                let moved = x.translate(axis + 1, shift, config.boundary)?;
                let out = forward_from(config, params, depth, moved, mode)?;
                entries.push(ProbeEntry {
                    depth,
                    axis: axis_name(depth, axis),
                    shift,
                    period,
                    gated,
                    deviation: out.logits.relative_diff(&base.logits)?,
                });
            }
        }
    }
    let max_gated_deviation = entries
        .iter()
        .filter(|e| e.gated)
        .map(|e| e.deviation)
        .fold(0.0, f64::max);
    let informational = config.boundary == BoundaryMode::ZeroPad;
    Ok(ProbeReport {
        boundary: config.boundary,
        informational,
        tolerance,
        max_gated_deviation,
        passed: informational || max_gated_deviation <= tolerance,
        entries,
    })
}

const CORPUS_MAGIC: &[u8; 4] = b"HATR";
const CORPUS_VERSION: u32 = 1;

/// Corpus cache: `"HATR" | u32 version | u64 count` followed by records
/// `u64 image id | u32 depth | u32 u0 | u32 u0' | u32 label (u32::MAX = none) | tensor`.
pub fn write_corpus(path: &Path, corpus: &[AttributeArray]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CORPUS_MAGIC);
    out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
    out.extend_from_slice(&(corpus.len() as u64).to_le_bytes());
    for a in corpus {
        out.extend_from_slice(&a.image_id.to_le_bytes());
        for v in [
            a.depth as u32,
            a.center[0] as u32,
            a.center[1] as u32,
            a.label.map_or(u32::MAX, |l| l as u32),
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        a.values.write_to(&mut out)?;
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<AttributeArray>> {
    let bytes = fs::read(path)?;
    let mut r = Cursor::new(&bytes[..]);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| HcnnError::Format("corpus file too short".into()))?;
    if &magic != CORPUS_MAGIC || read_u32(&mut r)? != CORPUS_VERSION {
        return Err(HcnnError::Format("not a corpus cache".into()));
    }
    let n = read_u64(&mut r)? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let image_id = read_u64(&mut r)?;
        let depth = read_u32(&mut r)? as usize;
        let center = [read_u32(&mut r)? as usize, read_u32(&mut r)? as usize];
        let label = match read_u32(&mut r)? {
            u32::MAX => None,
            l => Some(l as usize),
        };
        let values = Tensor::<f64>::read_from(&mut r)?;
        if values.rank() != 2 {
            return Err(HcnnError::Format(format!(
                "corpus record {image_id} is not 2-D"
            )));
        }
        out.push(AttributeArray {
            values,
            image_id,
            depth,
            center,
            label,
        });
    }
    Ok(out)
}

/// Grayscale binary PGM of a 2-D array, min-max scaled to 0..=255, each
/// cell drawn as a `scale`×`scale` block.
pub fn heatmap_pgm(values: &Tensor<f64>, scale: usize) -> Result<Vec<u8>> {
    if values.rank() != 2 || scale == 0 {
        return Err(HcnnError::Shape(
            "heatmaps need a 2-D array and scale >= 1".into(),
        ));
    }
    let (h, w) = (values.shape()[0], values.shape()[1]);
    let lo = values.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values
        .data()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{} {}\n255\n", w * scale, h * scale).into_bytes();
    for y in 0..h * scale {
        for x in 0..w * scale {
            let v = values.get(&[y / scale, x / scale]);
            let g = if span > 0.0 {
                ((v - lo) / span * 255.0).round()
            } else {
                0.0
            };
            out.push(g as u8);
        }
    }
    Ok(out)
}
