//! Central finite-difference gradient oracle.

use super::{Result, Tensor, TensorError};
use crate::elem::Elem;

/// Central-difference gradient of a deterministic scalar function at `x`:
/// `(f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps)` per element.
///
/// Independent of the reverse-mode path: it only evaluates `f` forward.
pub fn finite_diff_grad<E, F>(f: F, x: &Tensor<E>, eps: f64) -> Result<Vec<f64>>
where
    E: Elem,
    F: Fn(&Tensor<E>) -> Result<Tensor<E>>,
{
    if eps <= 0.0 {
        return Err(TensorError::Contract {
            op: "finite_diff_grad",
            detail: "eps must be positive".into(),
        });
    }
    let base = x.to_vec();
    let shape = x.shape().to_vec();
    let eval = |data: Vec<E>| -> Result<f64> {
        let t = Tensor::from_vec(shape.clone(), data)?;
        let out = f(&t)?;
        if out.numel() != 1 {
            return Err(TensorError::Contract {
                op: "finite_diff_grad",
                detail: "f must return a scalar".into(),
            });
        }
        Ok(out.item().to_f64())
    };
    let mut grad = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] = E::from_f64(plus[i].to_f64() + eps);
        let mut minus = base.clone();
        minus[i] = E::from_f64(minus[i].to_f64() - eps);
        grad.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }
    Ok(grad)
}
