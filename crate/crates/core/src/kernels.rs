//! Lowered (im2col + GEMM) multichannel convolution used by the network layers.
//!
//! Input layout is `(outer, d_0 .. d_{r-1}, inner, cin)` and output layout is
//! `(outer, o_0 .. o_{r-1}, inner, cout)`, both row-major. The `d` axes are
//! convolved, `outer` and `inner` pass through, and `cin` is contracted.
//! Filters are stored as `(cout, k_0 .. k_{r-1}, cin)`.
//!
//! Geometry (anchor, boundary handling, stride phase) is identical to
//! [`crate::conv::conv_nd`]; each output channel equals the sum over input
//! channels of `conv_nd` along the convolved axes.
//!
//! Rows are processed in fixed-size blocks. Forward blocks are independent;
//! backward partial results are reduced in block order, so results do not
//! depend on the number of worker threads.

use rayon::prelude::*;

use crate::conv::{anchor, output_len, resolve};
use crate::error::{HcnnError, Result};
use crate::tensor::{strides_of, BoundaryMode, Element};

const BLOCK_ELEMS: usize = 1 << 17;

/// Safe wrapper around the raw GEMM for contiguous row-major operands.
///
/// `c (m x n) = alpha * op(a) * op(b) + beta * c` where `a` is `m x k` read
/// with strides `(rsa, csa)` and `b` is `k x n` with `(rsb, csb)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every address touched by the kernel.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoweredConv {
    pub outer: usize,
    pub in_dims: Vec<usize>,
    pub inner: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: Vec<usize>,
    pub strides: Vec<usize>,
    pub mode: BoundaryMode,
}

/// Precomputed index tables for one geometry.
struct Plan {
    out_dims: Vec<usize>,
    out_strides: Vec<usize>,
    in_strides: Vec<usize>,
    /// `src[a][m * kernel[a] + k]`: input index on axis `a`, or -1.
    src: Vec<Vec<isize>>,
    in_points: usize,
    out_points: usize,
    cols: usize,
    rows: usize,
    block_rows: usize,
}

impl LoweredConv {
    pub fn validate(&self) -> Result<()> {
        let r = self.in_dims.len();
        if r == 0 || self.kernel.len() != r || self.strides.len() != r {
            return Err(HcnnError::Shape(format!(
                "lowered conv needs matching dims/kernel/strides, got {:?} {:?} {:?}",
                self.in_dims, self.kernel, self.strides
            )));
        }
        if self.outer == 0 || self.inner == 0 || self.cin == 0 || self.cout == 0 {
            return Err(HcnnError::Shape("zero-sized lowered conv".into()));
        }
        for a in 0..r {
            if self.strides[a] == 0 {
                return Err(HcnnError::InvalidStride { axis: a });
            }
            if self.kernel[a] == 0 || self.in_dims[a] == 0 {
                return Err(HcnnError::Shape("zero-length kernel or axis".into()));
            }
            if self.mode == BoundaryMode::Periodic && self.kernel[a] > self.in_dims[a] {
                return Err(HcnnError::PeriodicSupport {
                    axis: a,
                    filter: self.kernel[a],
                    len: self.in_dims[a],
                });
            }
        }
        Ok(())
    }

    pub fn out_dims(&self) -> Vec<usize> {
        self.in_dims
            .iter()
            .zip(&self.strides)
            .map(|(&d, &s)| output_len(d, s))
            .collect()
    }

    pub fn input_len(&self) -> usize {
        self.outer * self.in_dims.iter().product::<usize>() * self.inner * self.cin
    }

    pub fn output_len(&self) -> usize {
        self.outer * self.out_dims().iter().product::<usize>() * self.inner * self.cout
    }

    pub fn filter_len(&self) -> usize {
        self.cout * self.kernel.iter().product::<usize>() * self.cin
    }

    fn plan(&self) -> Plan {
        let out_dims = self.out_dims();
        let src = (0..self.in_dims.len())
            .map(|a| {
                let (len, kl, s) = (self.in_dims[a], self.kernel[a], self.strides[a]);
                let c = anchor(kl) as isize;
                let mut t = Vec::with_capacity(out_dims[a] * kl);
                for m in 0..out_dims[a] {
                    for k in 0..kl {
                        let raw = (s * m) as isize + k as isize - c;
                        t.push(resolve(raw, len, self.mode).map_or(-1, |v| v as isize));
                    }
                }
                t
            })
            .collect();
        let cols = self.kernel.iter().product::<usize>() * self.cin;
        let out_points: usize = out_dims.iter().product();
        let rows = self.outer * out_points * self.inner;
        Plan {
            out_strides: strides_of(&out_dims),
            in_strides: strides_of(&self.in_dims),
            in_points: self.in_dims.iter().product(),
            out_dims,
            src,
            out_points,
            cols,
            rows,
            block_rows: (BLOCK_ELEMS / cols).clamp(1, rows.max(1)),
        }
    }

    /// Calls `f(col, x_offset)` for every tap of row `row`, where `x_offset`
    /// is the start of the `cin` contiguous inputs for that tap (None when the
    /// tap reads zero padding).
    fn for_each_tap(&self, p: &Plan, row: usize, mut f: impl FnMut(usize, Option<usize>)) {
        let r = self.in_dims.len();
        let i = row % self.inner;
        let op = (row / self.inner) % p.out_points;
        let o = row / (self.inner * p.out_points);
        let mut m = [0usize; 8];
        for a in 0..r {
            m[a] = (op / p.out_strides[a]) % p.out_dims[a];
        }
        let mut ks = [0usize; 8];
        let last = r - 1;
        let kl_last = self.kernel[last];
        let src_last = &p.src[last][m[last] * kl_last..(m[last] + 1) * kl_last];
        let mut col = 0;
        loop {
            let mut base = Some(0usize);
            for a in 0..last {
                let s = p.src[a][m[a] * self.kernel[a] + ks[a]];
                if s < 0 {
                    base = None;
                    break;
                }
                base = base.map(|b| b + s as usize * p.in_strides[a]);
            }
            for &s in src_last {
                let off = match base {
                    Some(b) if s >= 0 => {
                        let point = o * p.in_points + b + s as usize;
                        Some((point * self.inner + i) * self.cin)
                    }
                    _ => None,
                };
                f(col, off);
                col += self.cin;
            }
            // odometer over the leading kernel axes
            let mut a = last;
            loop {
                if a == 0 {
                    return;
                }
                a -= 1;
                ks[a] += 1;
                if ks[a] < self.kernel[a] {
                    break;
                }
                ks[a] = 0;
            }
        }
    }

    fn fill_patch<T: Element>(&self, p: &Plan, x: &[T], first_row: usize, patch: &mut [T]) {
        let cin = self.cin;
        for (r, row) in patch.chunks_exact_mut(p.cols).enumerate() {
            self.for_each_tap(p, first_row + r, |col, off| {
                let dst = &mut row[col..col + cin];
                match off {
                    Some(o) => dst.copy_from_slice(&x[o..o + cin]),
                    None => dst.fill(T::zero()),
                }
            });
        }
    }

    fn scatter_patch<T: Element>(&self, p: &Plan, dpatch: &[T], first_row: usize, dx: &mut [T]) {
        let cin = self.cin;
        for (r, row) in dpatch.chunks_exact(p.cols).enumerate() {
            self.for_each_tap(p, first_row + r, |col, off| {
                if let Some(o) = off {
                    for (d, &s) in dx[o..o + cin].iter_mut().zip(&row[col..col + cin]) {
                        *d += s;
                    }
                }
            });
        }
    }

    fn check_lengths(&self, x: usize, w: usize) -> Result<()> {
        self.validate()?;
        if self.in_dims.len() > 8 {
            return Err(HcnnError::Shape("at most 8 convolved axes".into()));
        }
        if x != self.input_len() || w != self.filter_len() {
            return Err(HcnnError::Shape(format!(
                "lowered conv expects input {} / filter {}, got {x} / {w}",
                self.input_len(),
                self.filter_len()
            )));
        }
        Ok(())
    }

    pub fn forward<T: Element>(&self, x: &[T], w: &[T]) -> Result<Vec<T>> {
        self.check_lengths(x.len(), w.len())?;
        let p = self.plan();
        let mut out = vec![T::zero(); p.rows * self.cout];
        out.par_chunks_mut(p.block_rows * self.cout)
            .enumerate()
            .for_each(|(b, chunk)| {
                let rows = chunk.len() / self.cout;
                let mut patch = vec![T::zero(); rows * p.cols];
                self.fill_patch(&p, x, b * p.block_rows, &mut patch);
                gemm(
                    rows,
                    p.cols,
                    self.cout,
                    &patch,
                    (p.cols, 1),
                    w,
                    (1, p.cols),
                    T::zero(),
                    chunk,
                );
            });
        Ok(out)
    }

    /// Returns `(dx, dw)` for upstream gradient `dy`. Either can be skipped.
    pub fn backward<T: Element>(
        &self,
        x: &[T],
        w: &[T],
        dy: &[T],
        need_dx: bool,
        need_dw: bool,
    ) -> Result<(Option<Vec<T>>, Option<Vec<T>>)> {
        self.check_lengths(x.len(), w.len())?;
        let p = self.plan();
        if dy.len() != p.rows * self.cout {
            return Err(HcnnError::Shape(format!(
                "upstream gradient has {} elements, expected {}",
                dy.len(),
                p.rows * self.cout
            )));
        }
        let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
        let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
        let n_blocks = p.rows.div_ceil(p.block_rows);
        let wave = rayon::current_num_threads().max(1);
        let mut start = 0;
        while start < n_blocks {
            let end = (start + wave).min(n_blocks);
            let parts: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (start..end)
                .into_par_iter()
                .map(|b| {
                    let r0 = b * p.block_rows;
                    let rows = p.block_rows.min(p.rows - r0);
                    let dyb = &dy[r0 * self.cout..(r0 + rows) * self.cout];
                    let dwp = need_dw.then(|| {
                        let mut patch = vec![T::zero(); rows * p.cols];
                        self.fill_patch(&p, x, r0, &mut patch);
                        let mut part = vec![T::zero(); w.len()];
                        gemm(
                            self.cout,
                            rows,
                            p.cols,
                            dyb,
                            (1, self.cout),
                            &patch,
                            (p.cols, 1),
                            T::zero(),
                            &mut part,
                        );
                        part
                    });
                    let dpatch = need_dx.then(|| {
                        let mut dpatch = vec![T::zero(); rows * p.cols];
                        gemm(
                            rows,
                            self.cout,
                            p.cols,
                            dyb,
                            (self.cout, 1),
                            w,
                            (p.cols, 1),
                            T::zero(),
                            &mut dpatch,
                        );
                        dpatch
                    });
                    (dpatch, dwp)
                })
                .collect();
            for (offset, (dpatch, dwp)) in parts.into_iter().enumerate() {
                let b = start + offset;
                if let (Some(dx), Some(dpatch)) = (dx.as_mut(), dpatch) {
                    self.scatter_patch(&p, &dpatch, b * p.block_rows, dx);
                }
                if let (Some(dw), Some(part)) = (dw.as_mut(), dwp) {
                    for (d, s) in dw.iter_mut().zip(part) {
                        *d += s;
                    }
                }
            }
            start = end;
        }
        Ok((dx, dw))
    }
}
