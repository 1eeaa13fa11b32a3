//! Bilinear resampling with half-pixel centers and edge clamping.
//!
//! Source coordinate for output index `i` is `(i + 0.5) * in / out - 0.5`,
//! clamped to the valid range. When the output size equals the input size
//! this is an exact identity.

use super::{Result, Tensor, TensorError};
use crate::elem::Elem;

/// For one axis, precompute (low index, high index, high weight) per output
/// position. Weights are computed in f64 on both the forward and backward
/// paths so they agree exactly.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = (i as f64 + 0.5) * scale - 0.5;
            let src = src.clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

impl<E: Elem> Tensor<E> {
    /// Resize a C×H×W tensor to C×out_h×out_w per channel.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor<E>> {
        let sh = self.shape();
        if sh.len() != 3 {
            return Err(TensorError::Dimension {
                op: "bilinear_resize",
                detail: format!("expected C×H×W, got {sh:?}"),
            });
        }
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::Dimension {
                op: "bilinear_resize",
                detail: "output sizes must be >= 1".into(),
            });
        }
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        if h == out_h && w == out_w {
            // Exact identity, including bit pattern.
            let data = self.to_vec();
            return Tensor::from_op(
                "bilinear_resize",
                sh.to_vec(),
                data,
                vec![self.clone()],
                Box::new(|node, g| {
                    let p = &node.inner.parents[0];
                    if p.requires_grad() {
                        p.accumulate_grad(g);
                    }
                }),
            );
        }
        let ys = axis_taps(h, out_h);
        let xs = axis_taps(w, out_w);
        let mut out = vec![E::zero(); c * out_h * out_w];
        {
            let src = self.data_ref();
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let v00 = plane[y0 * w + x0].to_f64();
                        let v01 = plane[y0 * w + x1].to_f64();
                        let v10 = plane[y1 * w + x0].to_f64();
                        let v11 = plane[y1 * w + x1].to_f64();
                        let top = v00 * (1.0 - fx) + v01 * fx;
                        let bot = v10 * (1.0 - fx) + v11 * fx;
                        out[(ch * out_h + oy) * out_w + ox] =
                            E::from_f64(top * (1.0 - fy) + bot * fy);
                    }
                }
            }
        }
        Tensor::from_op(
            "bilinear_resize",
            vec![c, out_h, out_w],
            out,
            vec![self.clone()],
            Box::new(move |node, g| {
                let p = &node.inner.parents[0];
                if p.requires_grad() {
                    let ys = axis_taps(h, out_h);
                    let xs = axis_taps(w, out_w);
                    let mut dx = vec![E::zero(); c * h * w];
                    for ch in 0..c {
                        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                                let gv = g[(ch * out_h + oy) * out_w + ox].to_f64();
                                let base = ch * h * w;
                                let acc = |dx: &mut Vec<E>, idx: usize, wgt: f64| {
                                    dx[idx] = dx[idx] + E::from_f64(gv * wgt);
                                };
                                acc(&mut dx, base + y0 * w + x0, (1.0 - fy) * (1.0 - fx));
                                acc(&mut dx, base + y0 * w + x1, (1.0 - fy) * fx);
                                acc(&mut dx, base + y1 * w + x0, fy * (1.0 - fx));
                                acc(&mut dx, base + y1 * w + x1, fy * fx);
                            }
                        }
                    }
                    p.accumulate_grad(&dx);
                }
            }),
        )
    }
}
