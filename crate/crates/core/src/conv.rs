//! Multidimensional convolution of a tensor by a single filter.
//!
//! The filter tap `k` along a convolved axis sits at offset `anchor - k`, with
//! `anchor = len / 2`, so every output point is
//!
//! ```text
//! out[m] = sum_k z[stride * m + k - anchor] * w[k]
//! ```
//!
//! Odd-length filters are therefore centered and the unstrided output keeps
//! the input length ("same" geometry). Strided outputs keep the phase-0
//! samples `0, s, 2s, ...`.

use rayon::prelude::*;

use crate::error::{HcnnError, Result};
use crate::tensor::{strides_of, BoundaryMode, Element, Tensor};

/// Which implementation evaluates [`conv_nd`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvKernel {
    /// One output element at a time, literal sum over filter taps.
    Reference,
    /// Output rows processed in blocks with the tap loop hoisted outside the
    /// contiguous innermost axis. Same summation order as `Reference`.
    #[default]
    Blocked,
}

/// Index of the filter tap that sits at offset zero.
pub fn anchor(filter_len: usize) -> usize {
    filter_len / 2
}

/// Number of kept samples after subsampling `len` by `stride`.
pub fn output_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// Maps an unclamped source coordinate into `[0, len)` or `None` if it falls
/// into the zero padding.
pub(crate) fn resolve(src: isize, len: usize, mode: BoundaryMode) -> Option<usize> {
    match mode {
        BoundaryMode::Periodic => Some(src.rem_euclid(len as isize) as usize),
        BoundaryMode::ZeroPad => (src >= 0 && src < len as isize).then_some(src as usize),
    }
}

/// Per-axis lookup: `src[k][m]` is the input index read by tap `k` at output
/// position `m`, or -1 for zero padding.
struct AxisPlan {
    out_len: usize,
    taps: usize,
    src: Vec<Vec<isize>>,
}

impl AxisPlan {
    fn identity(len: usize) -> Self {
        AxisPlan {
            out_len: len,
            taps: 1,
            src: vec![(0..len as isize).collect()],
        }
    }

    fn convolved(len: usize, filter: usize, stride: usize, mode: BoundaryMode) -> Self {
        let out_len = output_len(len, stride);
        let a = anchor(filter) as isize;
        let src = (0..filter)
            .map(|k| {
                (0..out_len)
                    .map(|m| {
                        let s = (stride * m) as isize + k as isize - a;
                        resolve(s, len, mode).map_or(-1, |v| v as isize)
                    })
                    .collect()
            })
            .collect();
        AxisPlan {
            out_len,
            taps: filter,
            src,
        }
    }
}

fn validate<T: Element>(
    z: &Tensor<T>,
    w: &Tensor<T>,
    axes: &[usize],
    mode: BoundaryMode,
    strides: &[usize],
) -> Result<()> {
    if w.rank() != axes.len() {
        return Err(HcnnError::Shape(format!(
            "filter rank {} does not match {} convolved axes",
            w.rank(),
            axes.len()
        )));
    }
    if strides.len() != axes.len() {
        return Err(HcnnError::Shape(format!(
            "{} strides for {} convolved axes",
            strides.len(),
            axes.len()
        )));
    }
    for (i, &a) in axes.iter().enumerate() {
        if a >= z.rank() {
            return Err(HcnnError::InvalidAxis {
                axis: a,
                rank: z.rank(),
            });
        }
        if axes[..i].contains(&a) {
            return Err(HcnnError::Shape(format!("axis {a} listed twice")));
        }
        if strides[i] == 0 {
            return Err(HcnnError::InvalidStride { axis: a });
        }
        if mode == BoundaryMode::Periodic && w.shape()[i] > z.shape()[a] {
            return Err(HcnnError::PeriodicSupport {
                axis: a,
                filter: w.shape()[i],
                len: z.shape()[a],
            });
        }
    }
    Ok(())
}

fn plan<T: Element>(
    z: &Tensor<T>,
    w: &Tensor<T>,
    axes: &[usize],
    mode: BoundaryMode,
    strides: &[usize],
) -> Vec<AxisPlan> {
    (0..z.rank())
        .map(|a| match axes.iter().position(|&x| x == a) {
            Some(i) => AxisPlan::convolved(z.shape()[a], w.shape()[i], strides[i], mode),
            None => AxisPlan::identity(z.shape()[a]),
        })
        .collect()
}

/// Convolves `z` with `w` along `axes` (one filter axis per entry) and
/// subsamples by `strides`. Non-convolved axes pass through unchanged.
pub fn conv_nd<T: Element>(
    z: &Tensor<T>,
    w: &Tensor<T>,
    axes: &[usize],
    mode: BoundaryMode,
    strides: &[usize],
) -> Result<Tensor<T>> {
    conv_nd_with(ConvKernel::default(), z, w, axes, mode, strides)
}

pub fn conv_nd_with<T: Element>(
    kernel: ConvKernel,
    z: &Tensor<T>,
    w: &Tensor<T>,
    axes: &[usize],
    mode: BoundaryMode,
    strides: &[usize],
) -> Result<Tensor<T>> {
    validate(z, w, axes, mode, strides)?;
    let plans = plan(z, w, axes, mode, strides);
    // Filter multi-index axis for each z axis (None when not convolved).
    let filter_axis: Vec<Option<usize>> = (0..z.rank())
        .map(|a| axes.iter().position(|&x| x == a))
        .collect();
    let out = match kernel {
        ConvKernel::Reference => reference(z, w, &plans, &filter_axis),
        ConvKernel::Blocked => blocked(z, w, &plans, &filter_axis),
    };
    out.ensure_finite("conv_nd output")?;
    Ok(out)
}

/// Flat filter offset for a tap vector indexed by z axis.
fn filter_offset(tap: &[usize], filter_axis: &[Option<usize>], w_strides: &[usize]) -> usize {
    tap.iter()
        .zip(filter_axis)
        .filter_map(|(&k, fa)| fa.map(|i| k * w_strides[i]))
        .sum()
}

fn reference<T: Element>(
    z: &Tensor<T>,
    w: &Tensor<T>,
    plans: &[AxisPlan],
    filter_axis: &[Option<usize>],
) -> Tensor<T> {
    let out_shape: Vec<usize> = plans.iter().map(|p| p.out_len).collect();
    let tap_shape: Vec<usize> = plans.iter().map(|p| p.taps).collect();
    let z_strides = z.strides();
    let w_strides = w.strides();
    let n_taps: usize = tap_shape.iter().product();
    Tensor::from_fn(&out_shape, |m| {
        let mut acc = T::zero();
        let mut tap = vec![0usize; tap_shape.len()];
        for _ in 0..n_taps {
            let mut off = 0usize;
            let mut valid = true;
            for a in 0..m.len() {
                let s = plans[a].src[tap[a]][m[a]];
                if s < 0 {
                    valid = false;
                    break;
                }
                off += s as usize * z_strides[a];
            }
            if valid {
                acc += z.data()[off] * w.data()[filter_offset(&tap, filter_axis, &w_strides)];
            }
            crate::tensor::increment(&mut tap, &tap_shape);
        }
        acc
    })
}

const ROW_BLOCK: usize = 32;

fn blocked<T: Element>(
    z: &Tensor<T>,
    w: &Tensor<T>,
    plans: &[AxisPlan],
    filter_axis: &[Option<usize>],
) -> Tensor<T> {
    let rank = plans.len();
    let out_shape: Vec<usize> = plans.iter().map(|p| p.out_len).collect();
    let tap_shape: Vec<usize> = plans.iter().map(|p| p.taps).collect();
    let z_strides = z.strides();
    let w_strides = w.strides();
    let n_taps: usize = tap_shape.iter().product();
    let row_len = out_shape[rank - 1];
    let row_shape = &out_shape[..rank - 1];
    let row_strides = strides_of(row_shape);
    let n_rows: usize = row_shape.iter().product();

    // Tap list with its filter weight, in lexicographic order.
    let taps: Vec<(Vec<usize>, T)> = {
        let mut tap = vec![0usize; rank];
        (0..n_taps)
            .map(|_| {
                let weight = w.data()[filter_offset(&tap, filter_axis, &w_strides)];
                let t = tap.clone();
                crate::tensor::increment(&mut tap, &tap_shape);
                (t, weight)
            })
            .collect()
    };

    let mut out = vec![T::zero(); n_rows * row_len];
    let zd = z.data();
    let last = &plans[rank - 1];
    out.par_chunks_mut(ROW_BLOCK * row_len)
        .enumerate()
        .for_each(|(block, chunk)| {
            let first_row = block * ROW_BLOCK;
            let rows = chunk.len() / row_len;
            let row_idx: Vec<Vec<usize>> = (first_row..first_row + rows)
                .map(|r| {
                    row_strides
                        .iter()
                        .zip(row_shape)
                        .map(|(&s, &d)| (r / s) % d)
                        .collect()
                })
                .collect();
            for (tap, weight) in &taps {
                let src_last = &last.src[tap[rank - 1]];
                for (r, m) in row_idx.iter().enumerate() {
                    let mut base = 0usize;
                    let mut valid = true;
                    for a in 0..rank - 1 {
                        let s = plans[a].src[tap[a]][m[a]];
                        if s < 0 {
                            valid = false;
                            break;
                        }
                        base += s as usize * z_strides[a];
                    }
                    if !valid {
                        continue;
                    }
                    let dst = &mut chunk[r * row_len..(r + 1) * row_len];
                    for (d, &s) in dst.iter_mut().zip(src_last) {
                        if s >= 0 {
                            *d += zd[base + s as usize] * *weight;
                        }
                    }
                }
            }
        });
    Tensor::new(out_shape, out).expect("output shape is consistent")
}
