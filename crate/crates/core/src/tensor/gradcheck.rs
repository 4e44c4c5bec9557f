//! Finite-difference verification of analytic gradients.

use super::{backward, no_grad, Tensor};

/// Compare the analytic gradient of a scalar-valued `f` at `x` against
/// central differences with step `eps`, over every element of `x`.
///
/// Returns the maximum over elements of
/// `|analytic - central| / max(1, |analytic|)`. Any NaN encountered in the
/// analytic or numeric path is reported as NaN, which fails every `< tol`
/// comparison.
pub fn grad_check(f: impl Fn(&Tensor) -> Tensor, x: &Tensor, eps: f64) -> f64 {
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_sampled(f, x, eps, &coords)
}

/// [`grad_check`] restricted to the given coordinates of `x`; used where a
/// full sweep over a large input would dominate runtime.
pub fn grad_check_sampled(
    f: impl Fn(&Tensor) -> Tensor,
    x: &Tensor,
    eps: f64,
    coords: &[usize],
) -> f64 {
    let leaf = x.requires_grad(true);
    let out = f(&leaf);
    assert!(out.is_scalar(), "grad_check requires a scalar-valued function");
    if backward(&out).is_err() {
        return f64::NAN;
    }
    let analytic = match leaf.grad() {
        Some(g) => g,
        // No gradient path at all: treat as identically zero.
        None => vec![0.0; x.numel()],
    };

    let base = x.data().to_vec();
    let shape = x.shape().to_vec();
    let mut worst: f64 = 0.0;
    for &i in coords {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = eval_scalar(&f, shape.clone(), plus);
        let fm = eval_scalar(&f, shape.clone(), minus);
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        if !a.is_finite() || !numeric.is_finite() {
            return f64::NAN;
        }
        let err = (a - numeric).abs() / a.abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}

fn eval_scalar(f: &impl Fn(&Tensor) -> Tensor, shape: Vec<usize>, data: Vec<f64>) -> f64 {
    no_grad(|| {
        let t = Tensor::from_vec(shape, data).expect("grad_check perturbation");
        f(&t).item()
    })
}
