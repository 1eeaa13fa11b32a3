//! Differentiable tensor operations.
//!
//! Broadcasting is restricted to exact-shape and scalar cases so every
//! backward rule stays auditable.

use ndarray::ArrayView2;

use super::{Result, Tensor, TensorError};
use crate::elem::Elem;

/// Row-major matrix product via `ndarray` (single-threaded, deterministic).
pub(crate) fn mat_mul<E: Elem>(a: &[E], m: usize, k: usize, b: &[E], n: usize) -> Vec<E> {
    let a = ArrayView2::from_shape((m, k), a).expect("mat_mul lhs shape");
    let b = ArrayView2::from_shape((k, n), b).expect("mat_mul rhs shape");
    a.dot(&b).into_raw_vec_and_offset().0
}

pub(crate) fn transpose_vec<E: Elem>(a: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn check_same_shape<E: Elem>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Dimension {
            op,
            detail: format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        });
    }
    Ok(())
}

impl<E: Elem> Tensor<E> {
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        check_same_shape("add", self, other)?;
        let data: Vec<E> = {
            let a = self.data_ref();
            let b = other.data_ref();
            a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect()
        };
        Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|node, g| {
                for p in &node.inner.parents {
                    if p.requires_grad() {
                        p.accumulate_grad(g);
                    }
                }
            }),
        )
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        check_same_shape("sub", self, other)?;
        let data: Vec<E> = {
            let a = self.data_ref();
            let b = other.data_ref();
            a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect()
        };
        Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|node, g| {
                let (a, b) = (&node.inner.parents[0], &node.inner.parents[1]);
                if a.requires_grad() {
                    a.accumulate_grad(g);
                }
                if b.requires_grad() {
                    let neg: Vec<E> = g.iter().map(|&v| -v).collect();
                    b.accumulate_grad(&neg);
                }
            }),
        )
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        check_same_shape("mul", self, other)?;
        let data: Vec<E> = {
            let a = self.data_ref();
            let b = other.data_ref();
            a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect()
        };
        Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|node, g| {
                let (a, b) = (&node.inner.parents[0], &node.inner.parents[1]);
                if a.requires_grad() {
                    let bd = b.data_ref();
                    let c: Vec<E> = g.iter().zip(bd.iter()).map(|(&gv, &bv)| gv * bv).collect();
                    a.accumulate_grad(&c);
                }
                if b.requires_grad() {
                    let ad = a.data_ref();
                    let c: Vec<E> = g.iter().zip(ad.iter()).map(|(&gv, &av)| gv * av).collect();
                    b.accumulate_grad(&c);
                }
            }),
        )
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, c: E) -> Result<Tensor<E>> {
        let data: Vec<E> = self.data_ref().iter().map(|&x| x * c).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |node, g| {
                let p = &node.inner.parents[0];
                if p.requires_grad() {
                    let c2: Vec<E> = g.iter().map(|&v| v * c).collect();
                    p.accumulate_grad(&c2);
                }
            }),
        )
    }

    pub fn add_scalar(&self, c: E) -> Result<Tensor<E>> {
        let data: Vec<E> = self.data_ref().iter().map(|&x| x + c).collect();
        Tensor::from_op(
            "add_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|node, g| {
                let p = &node.inner.parents[0];
                if p.requires_grad() {
                    p.accumulate_grad(g);
                }
            }),
        )
    }

    /// ReLU; the subgradient at exactly zero is zero.
    pub fn relu(&self) -> Result<Tensor<E>> {
        let data: Vec<E> = self
            .data_ref()
            .iter()
            .map(|&x| if x > E::zero() { x } else { E::zero() })
            .collect();
        Tensor::from_op(
            "relu",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|node, g| {
                let p = &node.inner.parents[0];
                if p.requires_grad() {
                    let pd = p.data_ref();
                    let c: Vec<E> = g
                        .iter()
                        .zip(pd.iter())
                        .map(|(&gv, &x)| if x > E::zero() { gv } else { E::zero() })
                        .collect();
                    p.accumulate_grad(&c);
                }
            }),
        )
    }

    /// |x|; the subgradient at exactly zero is zero.
    pub fn abs(&self) -> Result<Tensor<E>> {
        let data: Vec<E> = self.data_ref().iter().map(|&x| x.abs()).collect();
        Tensor::from_op(
            "abs",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|node, g| {
                let p = &node.inner.parents[0];
                if p.requires_grad() {
                    let pd = p.data_ref();
                    let c: Vec<E> = g
                        .iter()
                        .zip(pd.iter())
                        .map(|(&gv, &x)| {
                            if x > E::zero() {
                                gv
                            } else if x < E::zero() {
                                -gv
                            } else {
                                E::zero()
                            }
                        })
                        .collect();
                    p.accumulate_grad(&c);
                }
            }),
        )
    }

    /// Sum of all elements, as a `[1]`-shaped tensor.
    pub fn sum(&self) -> Result<Tensor<E>> {
        let mut acc = E::zero();
        for &v in self.data_ref().iter() {
            acc = acc + v;
        }
        Tensor::from_op(
            "sum",
            vec![1],
            vec![acc],
            vec![self.clone()],
            Box::new(|node, g| {
                let p = &node.inner.parents[0];
                if p.requires_grad() {
                    let c = vec![g[0]; p.numel()];
                    p.accumulate_grad(&c);
                }
            }),
        )
    }

    pub fn mean(&self) -> Result<Tensor<E>> {
        let n = E::from_f64(self.numel() as f64);
        self.sum()?.scale(E::one() / n)
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let (ash, bsh) = (self.shape(), other.shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(TensorError::Dimension {
                op: "matmul",
                detail: format!("incompatible shapes {ash:?} x {bsh:?}"),
            });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let data = mat_mul(&self.data_ref(), m, k, &other.data_ref(), n);
        Tensor::from_op(
            "matmul",
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |node, g| {
                let (a, b) = (&node.inner.parents[0], &node.inner.parents[1]);
                if a.requires_grad() {
                    // dA = G * B^T
                    let bt = transpose_vec(&b.data_ref(), k, n);
                    let da = mat_mul(g, m, n, &bt, k);
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    // dB = A^T * G
                    let at = transpose_vec(&a.data_ref(), m, k);
                    let db = mat_mul(&at, k, m, g, n);
                    b.accumulate_grad(&db);
                }
            }),
        )
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor<E>> {
        let sh = self.shape();
        if sh.len() != 2 {
            return Err(TensorError::Dimension {
                op: "transpose",
                detail: format!("expected rank 2, got {sh:?}"),
            });
        }
        let (r, c) = (sh[0], sh[1]);
        let data = transpose_vec(&self.data_ref(), r, c);
        Tensor::from_op(
            "transpose",
            vec![c, r],
            data,
            vec![self.clone()],
            Box::new(move |node, g| {
                let p = &node.inner.parents[0];
                if p.requires_grad() {
                    p.accumulate_grad(&transpose_vec(g, c, r));
                }
            }),
        )
    }

    /// View with a new shape over the same (copied) contents.
    pub fn reshape(&self, new_shape: Vec<usize>) -> Result<Tensor<E>> {
        if new_shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::Dimension {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", self.shape(), new_shape),
            });
        }
        let data = self.to_vec();
        Tensor::from_op(
            "reshape",
            new_shape,
            data,
            vec![self.clone()],
            Box::new(|node, g| {
                let p = &node.inner.parents[0];
                if p.requires_grad() {
                    p.accumulate_grad(g);
                }
            }),
        )
    }

    /// Broadcast-add a rank-1 bias over the last axis.
    pub fn add_row(&self, bias: &Tensor<E>) -> Result<Tensor<E>> {
        let d = *self.shape().last().unwrap();
        if bias.shape() != [d] {
            return Err(TensorError::Dimension {
                op: "add_row",
                detail: format!("bias {:?} vs last axis {}", bias.shape(), d),
            });
        }
        let data: Vec<E> = {
            let x = self.data_ref();
            let b = bias.data_ref();
            x.iter()
                .enumerate()
                .map(|(i, &v)| v + b[i % d])
                .collect()
        };
        Tensor::from_op(
            "add_row",
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |node, g| {
                let (x, b) = (&node.inner.parents[0], &node.inner.parents[1]);
                if x.requires_grad() {
                    x.accumulate_grad(g);
                }
                if b.requires_grad() {
                    let mut db = vec![E::zero(); d];
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % d] = db[i % d] + gv;
                    }
                    b.accumulate_grad(&db);
                }
            }),
        )
    }

    /// Broadcast-add a rank-1 bias over the first axis of a C×H×W tensor
    /// (one bias value per channel).
    pub fn add_channel(&self, bias: &Tensor<E>) -> Result<Tensor<E>> {
        let sh = self.shape();
        if sh.len() != 3 || bias.shape() != [sh[0]] {
            return Err(TensorError::Dimension {
                op: "add_channel",
                detail: format!("input {:?} vs bias {:?}", sh, bias.shape()),
            });
        }
        let plane = sh[1] * sh[2];
        let data: Vec<E> = {
            let x = self.data_ref();
            let b = bias.data_ref();
            x.iter()
                .enumerate()
                .map(|(i, &v)| v + b[i / plane])
                .collect()
        };
        Tensor::from_op(
            "add_channel",
            sh.to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |node, g| {
                let (x, b) = (&node.inner.parents[0], &node.inner.parents[1]);
                if x.requires_grad() {
                    x.accumulate_grad(g);
                }
                if b.requires_grad() {
                    let nc = b.numel();
                    let mut db = vec![E::zero(); nc];
                    for (i, &gv) in g.iter().enumerate() {
                        db[i / plane] = db[i / plane] + gv;
                    }
                    b.accumulate_grad(&db);
                }
            }),
        )
    }

    /// Concatenate along the first axis; trailing dimensions must agree.
    pub fn concat0(parts: &[Tensor<E>]) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(TensorError::Contract {
                op: "concat0",
                detail: "no tensors to concatenate".into(),
            });
        }
        let tail = &parts[0].shape()[1..];
        let mut rows = 0;
        for p in parts {
            if &p.shape()[1..] != tail {
                return Err(TensorError::Dimension {
                    op: "concat0",
                    detail: format!("trailing dims {:?} vs {:?}", &p.shape()[1..], tail),
                });
            }
            rows += p.shape()[0];
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in parts {
            data.extend_from_slice(&p.data_ref());
        }
        Tensor::from_op(
            "concat0",
            shape,
            data,
            parts.to_vec(),
            Box::new(|node, g| {
                let mut off = 0;
                for p in &node.inner.parents {
                    let n = p.numel();
                    if p.requires_grad() {
                        p.accumulate_grad(&g[off..off + n]);
                    }
                    off += n;
                }
            }),
        )
    }

    /// Slice `len` entries along the first axis starting at `start`.
    pub fn slice0(&self, start: usize, len: usize) -> Result<Tensor<E>> {
        let sh = self.shape();
        if start + len > sh[0] || len == 0 {
            return Err(TensorError::Dimension {
                op: "slice0",
                detail: format!("slice [{start}, {start}+{len}) out of {} rows", sh[0]),
            });
        }
        let stride: usize = sh[1..].iter().product();
        let data = self.data_ref()[start * stride..(start + len) * stride].to_vec();
        let mut shape = vec![len];
        shape.extend_from_slice(&sh[1..]);
        Tensor::from_op(
            "slice0",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |node, g| {
                let p = &node.inner.parents[0];
                if p.requires_grad() {
                    let mut dg = vec![E::zero(); p.numel()];
                    dg[start * stride..start * stride + g.len()].copy_from_slice(g);
                    p.accumulate_grad(&dg);
                }
            }),
        )
    }

    /// Column slice of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor<E>> {
        let sh = self.shape();
        if sh.len() != 2 || start + len > sh[1] || len == 0 {
            return Err(TensorError::Dimension {
                op: "slice_cols",
                detail: format!("cols [{start}, {start}+{len}) of shape {sh:?}"),
            });
        }
        let (rows, cols) = (sh[0], sh[1]);
        let mut data = Vec::with_capacity(rows * len);
        {
            let src = self.data_ref();
            for r in 0..rows {
                data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
            }
        }
        Tensor::from_op(
            "slice_cols",
            vec![rows, len],
            data,
            vec![self.clone()],
            Box::new(move |node, g| {
                let p = &node.inner.parents[0];
                if p.requires_grad() {
                    let mut dg = vec![E::zero(); rows * cols];
                    for r in 0..rows {
                        dg[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    p.accumulate_grad(&dg);
                }
            }),
        )
    }

    /// Concatenate 2-D tensors along columns; row counts must agree.
    pub fn concat_cols(parts: &[Tensor<E>]) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(TensorError::Contract {
                op: "concat_cols",
                detail: "no tensors to concatenate".into(),
            });
        }
        let rows = parts[0].shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for p in parts {
            let sh = p.shape();
            if sh.len() != 2 || sh[0] != rows {
                return Err(TensorError::Dimension {
                    op: "concat_cols",
                    detail: format!("expected {rows} rows, got {sh:?}"),
                });
            }
            widths.push(sh[1]);
            total += sh[1];
        }
        let mut data = Vec::with_capacity(rows * total);
        {
            let srcs: Vec<_> = parts.iter().map(|p| p.data_ref()).collect();
            for r in 0..rows {
                for (p, w) in srcs.iter().zip(&widths) {
                    data.extend_from_slice(&p[r * w..(r + 1) * w]);
                }
            }
        }
        Tensor::from_op(
            "concat_cols",
            vec![rows, total],
            data,
            parts.to_vec(),
            Box::new(move |node, g| {
                let mut col_off = 0;
                for (p, &w) in node.inner.parents.iter().zip(&widths) {
                    if p.requires_grad() {
                        let mut dg = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dg.extend_from_slice(&g[r * total + col_off..r * total + col_off + w]);
                        }
                        p.accumulate_grad(&dg);
                    }
                    col_off += w;
                }
            }),
        )
    }

    /// Softmax over the last axis, computed with max-subtraction.
    pub fn softmax(&self) -> Result<Tensor<E>> {
        let d = *self.shape().last().unwrap();
        let mut data = self.to_vec();
        for row in data.chunks_mut(d) {
            let mut mx = row[0];
            for &v in row.iter() {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = E::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        Tensor::from_op(
            "softmax",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |node, g| {
                let p = &node.inner.parents[0];
                if p.requires_grad() {
                    let y = node.data_ref();
                    let mut dx = vec![E::zero(); y.len()];
                    for r in 0..y.len() / d {
                        let ys = &y[r * d..(r + 1) * d];
                        let gs = &g[r * d..(r + 1) * d];
                        let mut dot = E::zero();
                        for (yv, gv) in ys.iter().zip(gs) {
                            dot = dot + *yv * *gv;
                        }
                        for i in 0..d {
                            dx[r * d + i] = ys[i] * (gs[i] - dot);
                        }
                    }
                    p.accumulate_grad(&dx);
                }
            }),
        )
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&self, gamma: &Tensor<E>, beta: &Tensor<E>, eps: E) -> Result<Tensor<E>> {
        let d = *self.shape().last().unwrap();
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(TensorError::Dimension {
                op: "layer_norm",
                detail: format!(
                    "gamma {:?} / beta {:?} vs last axis {}",
                    gamma.shape(),
                    beta.shape(),
                    d
                ),
            });
        }
        if eps <= E::zero() {
            return Err(TensorError::Contract {
                op: "layer_norm",
                detail: "eps must be positive".into(),
            });
        }
        let dn = E::from_f64(d as f64);
        let mut data = self.to_vec();
        {
            let gam = gamma.data_ref();
            let bet = beta.data_ref();
            for row in data.chunks_mut(d) {
                let mut mean = E::zero();
                for &v in row.iter() {
                    mean = mean + v;
                }
                mean = mean / dn;
                let mut var = E::zero();
                for &v in row.iter() {
                    let c = v - mean;
                    var = var + c * c;
                }
                var = var / dn;
                let inv = E::one() / (var + eps).sqrt();
                for (i, v) in row.iter_mut().enumerate() {
                    *v = gam[i] * ((*v - mean) * inv) + bet[i];
                }
            }
        }
        Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |node, g| {
                let x = &node.inner.parents[0];
                let gamma = &node.inner.parents[1];
                let beta = &node.inner.parents[2];
                let xd = x.data_ref();
                let gam = gamma.data_ref();
                let rows = xd.len() / d;
                let mut dx = vec![E::zero(); xd.len()];
                let mut dgamma = vec![E::zero(); d];
                let mut dbeta = vec![E::zero(); d];
                for r in 0..rows {
                    let xs = &xd[r * d..(r + 1) * d];
                    let gs = &g[r * d..(r + 1) * d];
                    let mut mean = E::zero();
                    for &v in xs {
                        mean = mean + v;
                    }
                    mean = mean / dn;
                    let mut var = E::zero();
                    for &v in xs {
                        let c = v - mean;
                        var = var + c * c;
                    }
                    var = var / dn;
                    let inv = E::one() / (var + eps).sqrt();
                    // dxhat = g * gamma; standard layer-norm backward.
                    let mut sum_dxhat = E::zero();
                    let mut sum_dxhat_xhat = E::zero();
                    let mut xhat = vec![E::zero(); d];
                    let mut dxhat = vec![E::zero(); d];
                    for i in 0..d {
                        xhat[i] = (xs[i] - mean) * inv;
                        dxhat[i] = gs[i] * gam[i];
                        sum_dxhat = sum_dxhat + dxhat[i];
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat[i] * xhat[i];
                        dgamma[i] = dgamma[i] + gs[i] * xhat[i];
                        dbeta[i] = dbeta[i] + gs[i];
                    }
                    for i in 0..d {
                        dx[r * d + i] = inv / dn
                            * (dn * dxhat[i] - sum_dxhat - xhat[i] * sum_dxhat_xhat);
                    }
                }
                if x.requires_grad() {
                    x.accumulate_grad(&dx);
                }
                if gamma.requires_grad() {
                    gamma.accumulate_grad(&dgamma);
                }
                if beta.requires_grad() {
                    beta.accumulate_grad(&dbeta);
                }
            }),
        )
    }
}
