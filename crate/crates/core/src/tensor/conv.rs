//! 2-D convolution (cross-correlation convention) via im2col + matmul.

use super::ops::{mat_mul, transpose_vec};
use super::{Result, Tensor, TensorError};
use crate::elem::Elem;

/// Unfold `x` (C×H×W) into a (C*kh*kw) × (oh*ow) column matrix.
fn im2col<E: Elem>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let mut cols = vec![E::zero(); c * kh * kw * oh * ow];
    let ncols = oh * ow;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[row * ncols + oy * ow + ox] =
                            x[(ch * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Fold a column-matrix gradient back onto the padded input, accumulating
/// overlaps in a fixed order.
#[allow(clippy::too_many_arguments)]
fn col2im<E: Elem>(
    cols: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let mut x = vec![E::zero(); c * h * w];
    let ncols = oh * ow;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = (ch * h + iy as usize) * w + ix as usize;
                        x[idx] = x[idx] + cols[row * ncols + oy * ow + ox];
                    }
                }
            }
        }
    }
    x
}

impl<E: Elem> Tensor<E> {
    /// Convolve `self` (C_in×H×W) with `weight` (C_out×C_in×kh×kw).
    ///
    /// Output spatial size is `floor((H + 2*pad - kh) / stride) + 1` (and the
    /// same for width). Differentiable with respect to both input and weight.
    pub fn conv2d(&self, weight: &Tensor<E>, stride: usize, padding: usize) -> Result<Tensor<E>> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 3 || ws.len() != 4 || xs[0] != ws[1] {
            return Err(TensorError::Dimension {
                op: "conv2d",
                detail: format!("input {xs:?} vs weight {ws:?}"),
            });
        }
        if stride < 1 {
            return Err(TensorError::Contract {
                op: "conv2d",
                detail: "stride must be >= 1".into(),
            });
        }
        let (c_in, h, w) = (xs[0], xs[1], xs[2]);
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(TensorError::Dimension {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})"),
            });
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let k = c_in * kh * kw;
        let cols = im2col(&self.data_ref(), c_in, h, w, kh, kw, stride, padding, oh, ow);
        let out = mat_mul(&weight.data_ref(), c_out, k, &cols, oh * ow);
        Tensor::from_op(
            "conv2d",
            vec![c_out, oh, ow],
            out,
            vec![self.clone(), weight.clone()],
            Box::new(move |node, g| {
                let x = &node.inner.parents[0];
                let wt = &node.inner.parents[1];
                if wt.requires_grad() {
                    // dW = G_mat * cols^T
                    let cols =
                        im2col(&x.data_ref(), c_in, h, w, kh, kw, stride, padding, oh, ow);
                    let cols_t = transpose_vec(&cols, k, oh * ow);
                    let dw = mat_mul(g, c_out, oh * ow, &cols_t, k);
                    wt.accumulate_grad(&dw);
                }
                if x.requires_grad() {
                    // dX = col2im(W^T * G_mat)
                    let wt_t = transpose_vec(&wt.data_ref(), c_out, k);
                    let dcols = mat_mul(&wt_t, k, c_out, g, oh * ow);
                    let dx = col2im(&dcols, c_in, h, w, kh, kw, stride, padding, oh, ow);
                    x.accumulate_grad(&dx);
                }
            }),
        )
    }
}
