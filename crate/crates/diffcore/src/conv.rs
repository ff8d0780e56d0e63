//! im2col-based kernels for "same"-padded strided convolution and its adjoint.
//!
//! Layout is channels-last: activations `[batch, height, width, channels]`,
//! kernels `[kh, kw, c_in, c_out]`. Padding follows the usual "same" rule: the
//! output is `ceil(in / stride)` and the total padding
//! `max((out - 1) * stride + k - in, 0)` is split with the smaller half first.

use crate::scalar::{gemm, Scalar};

/// Geometry of one convolution, seen from its wide (input) side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub h_in: usize,
    pub w_in: usize,
    pub c_in: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

fn same_padding(input: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(input);
    (out, total / 2)
}

impl ConvGeom {
    pub fn same(
        h_in: usize,
        w_in: usize,
        c_in: usize,
        c_out: usize,
        (kh, kw): (usize, usize),
        (sh, sw): (usize, usize),
    ) -> Self {
        let (h_out, pad_top) = same_padding(h_in, kh, sh);
        let (w_out, pad_left) = same_padding(w_in, kw, sw);
        ConvGeom { h_in, w_in, c_in, h_out, w_out, c_out, kh, kw, sh, sw, pad_top, pad_left }
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c_in
    }

    pub fn out_positions(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn in_len(&self) -> usize {
        self.h_in * self.w_in * self.c_in
    }

    pub fn out_len(&self) -> usize {
        self.h_out * self.w_out * self.c_out
    }

    /// Input row/col for an output position and kernel tap, `None` in the padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.sh + ky).checked_sub(self.pad_top)?;
        let ix = (ox * self.sw + kx).checked_sub(self.pad_left)?;
        (iy < self.h_in && ix < self.w_in).then_some((iy, ix))
    }
}

/// Gather one sample into a `[out_positions, patch_len]` matrix.
pub fn im2col<T: Scalar>(g: &ConvGeom, src: &[T], col: &mut [T]) {
    debug_assert_eq!(src.len(), g.in_len());
    debug_assert_eq!(col.len(), g.out_positions() * g.patch_len());
    let patch = g.patch_len();
    let ci = g.c_in;
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let row = &mut col[(oy * g.w_out + ox) * patch..][..patch];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let dst = &mut row[(ky * g.kw + kx) * ci..][..ci];
                    match g.source(oy, ox, ky, kx) {
                        Some((iy, ix)) => dst.copy_from_slice(&src[(iy * g.w_in + ix) * ci..][..ci]),
                        None => dst.fill(T::zero()),
                    }
                }
            }
        }
    }
}

/// Scatter-add a `[out_positions, patch_len]` matrix back onto one sample.
pub fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], dst: &mut [T]) {
    debug_assert_eq!(dst.len(), g.in_len());
    let patch = g.patch_len();
    let ci = g.c_in;
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let row = &col[(oy * g.w_out + ox) * patch..][..patch];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                        let d = &mut dst[(iy * g.w_in + ix) * ci..][..ci];
                        let s = &row[(ky * g.kw + kx) * ci..][..ci];
                        for (a, &b) in d.iter_mut().zip(s) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of a whole batch: `x [B, h_in, w_in, c_in]` to `[B, h_out, w_out, c_out]`.
pub fn conv_forward<T: Scalar>(g: &ConvGeom, batch: usize, x: &[T], kernel: &[T]) -> Vec<T> {
    let (p, kk, co) = (g.out_positions(), g.patch_len(), g.c_out);
    let mut out = vec![T::zero(); batch * g.out_len()];
    let mut col = vec![T::zero(); p * kk];
    for b in 0..batch {
        im2col(g, &x[b * g.in_len()..][..g.in_len()], &mut col);
        gemm(p, kk, co, &col, false, kernel, false, &mut out[b * g.out_len()..][..g.out_len()], false);
    }
    out
}

/// Adjoint of [`conv_forward`] with respect to its input: maps `[B, out]` back to `[B, in]`.
pub fn conv_adjoint<T: Scalar>(g: &ConvGeom, batch: usize, dy: &[T], kernel: &[T]) -> Vec<T> {
    let (p, kk, co) = (g.out_positions(), g.patch_len(), g.c_out);
    let mut dx = vec![T::zero(); batch * g.in_len()];
    let mut col = vec![T::zero(); p * kk];
    for b in 0..batch {
        gemm(p, co, kk, &dy[b * g.out_len()..][..g.out_len()], false, kernel, true, &mut col, false);
        col2im(g, &col, &mut dx[b * g.in_len()..][..g.in_len()]);
    }
    dx
}

/// Kernel gradient `sum_b im2col(x_b)^T * dy_b`, shape `[patch_len, c_out]`.
pub fn conv_kernel_grad<T: Scalar>(g: &ConvGeom, batch: usize, x: &[T], dy: &[T]) -> Vec<T> {
    let (p, kk, co) = (g.out_positions(), g.patch_len(), g.c_out);
    let mut dk = vec![T::zero(); kk * co];
    let mut col = vec![T::zero(); p * kk];
    for b in 0..batch {
        im2col(g, &x[b * g.in_len()..][..g.in_len()], &mut col);
        gemm(kk, p, co, &col, true, &dy[b * g.out_len()..][..g.out_len()], false, &mut dk, true);
    }
    dk
}
