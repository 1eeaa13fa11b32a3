//! Shared helpers for the gradient-oracle and acceptance suites.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use msfpt_core::tensor::Result as TensorResult;
use msfpt_core::{finite_diff_grad, Tensor};

pub const FD_EPS: f64 = 1e-4;
pub const OP_TOL: f64 = 1e-4;
pub const SEEDS: u64 = 20;

/// Relative error with a unit floor, so tiny gradients are compared
/// absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1.0, f64::max(a.abs(), b.abs()))
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero, for ops with a kink at the origin.
pub fn rand_vec_off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.05..1.0);
            if rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

pub fn const_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), rand_vec(rng, n, -1.0, 1.0)).unwrap()
}

/// Compare reverse-mode gradients of a scalar-valued `f` against central
/// finite differences at every input coordinate. Returns the max relative
/// error.
pub fn grad_gap<F>(f: &F, data: Vec<f64>, shape: &[usize]) -> f64
where
    F: Fn(&Tensor<f64>) -> TensorResult<Tensor<f64>>,
{
    let x = Tensor::leaf(shape.to_vec(), data, true).unwrap();
    let y = f(&x).unwrap();
    assert_eq!(y.numel(), 1, "oracle functions must return scalars");
    y.backward().unwrap();
    let analytic = x.grad().expect("input must receive a gradient");
    let numeric = finite_diff_grad(f, &x, FD_EPS).unwrap();
    analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Run `grad_gap` over `SEEDS` random inputs drawn in [-1, 1); panics if
/// any seed exceeds `OP_TOL`.
pub fn check_op<F, G>(name: &str, shape: &[usize], make_f: G)
where
    F: Fn(&Tensor<f64>) -> TensorResult<Tensor<f64>>,
    G: Fn(&mut ChaCha8Rng) -> F,
{
    check_op_with(name, shape, make_f, |rng, n| rand_vec(rng, n, -1.0, 1.0));
}

/// Like [`check_op`], but with a custom input distribution (for kinked ops).
pub fn check_op_with<F, G, D>(name: &str, shape: &[usize], make_f: G, draw: D)
where
    F: Fn(&Tensor<f64>) -> TensorResult<Tensor<f64>>,
    G: Fn(&mut ChaCha8Rng) -> F,
    D: Fn(&mut ChaCha8Rng, usize) -> Vec<f64>,
{
    let n: usize = shape.iter().product();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = make_f(&mut rng);
        let data = draw(&mut rng, n);
        let gap = grad_gap(&f, data, shape);
        assert!(
            gap < OP_TOL,
            "{name}: max relative gradient error {gap:.3e} at seed {seed} (tol {OP_TOL:.0e})"
        );
    }
}

/// Scalar projection with random fixed weights, so upstream gradients are
/// non-uniform.
pub fn weighted_sum(t: &Tensor<f64>, w: &Tensor<f64>) -> TensorResult<Tensor<f64>> {
    t.mul(w)?.sum()
}
