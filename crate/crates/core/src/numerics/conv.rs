//! im2col-based 2D cross-correlation kernels.

use super::scalar::gemm;
use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kw) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds `input` ([C, H, W]) into a `[C*kh*kw, OH*OW]` patch matrix.
fn im2col<T: Scalar>(g: &ConvGeometry, input: &[T]) -> Vec<T> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let p = oh * ow;
    let mut cols = vec![T::zero(); g.patch_len() * p];
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds a patch-matrix gradient back onto the input grid (adjoint of `im2col`).
fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], out: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let p = oh * ow;
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            plane[base + ix as usize] = plane[base + ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeometry, input: &[T], kernel: &[T]) -> Vec<T> {
    let cols = im2col(g, input);
    let mut out = vec![T::zero(); g.filters * g.out_len()];
    gemm(
        g.filters,
        g.patch_len(),
        g.out_len(),
        kernel,
        false,
        &cols,
        false,
        T::zero(),
        &mut out,
    );
    out
}

/// Returns `(d input, d kernel)` for an upstream gradient over the output.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (pl, ol) = (g.patch_len(), g.out_len());
    let grad_kernel = need_kernel.then(|| {
        let cols = im2col(g, input);
        let mut gk = vec![T::zero(); g.filters * pl];
        gemm(g.filters, ol, pl, grad_out, false, &cols, true, T::zero(), &mut gk);
        gk
    });
    let grad_input = need_input.then(|| {
        let mut gcols = vec![T::zero(); pl * ol];
        gemm(pl, g.filters, ol, kernel, true, grad_out, false, T::zero(), &mut gcols);
        let mut gi = vec![T::zero(); g.channels * g.height * g.width];
        col2im(g, &gcols, &mut gi);
        gi
    });
    (grad_input, grad_kernel)
}
