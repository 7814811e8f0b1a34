//! Central finite differences — the independent gradient oracle.

use super::{backward, Element, Tensor};
use crate::error::{Error, Result};

/// Default perturbation for 64-bit checks: near the cube root of machine
/// epsilon, balancing truncation against round-off.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()).max(1e-8))
}

/// Elementwise maximum relative error between two gradient arrays.
pub fn max_rel_err<T: Element>(a: &[T], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| rel_err(x.to_f64(), y))
        .fold(0.0, f64::max)
}

/// Central-difference gradient of a deterministic scalar-valued function
/// `f` with respect to the leaf `x`: per element,
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn finite_diff_grad<T, F>(mut f: F, x: &Tensor<T>, eps: f64) -> Result<Vec<f64>>
where
    T: Element,
    F: FnMut(&Tensor<T>) -> Result<Tensor<T>>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument {
            op: "finite_diff_grad",
            detail: format!("eps must be positive, got {eps}"),
        });
    }
    let base = x.to_vec();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] = T::from_f64(plus[i].to_f64() + eps);
        let mut minus = base.clone();
        minus[i] = T::from_f64(minus[i].to_f64() - eps);
        let fp = eval_scalar(&mut f, x.shape(), plus)?;
        let fm = eval_scalar(&mut f, x.shape(), minus)?;
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    Ok(grad)
}

fn eval_scalar<T, F>(f: &mut F, shape: &[usize], data: Vec<T>) -> Result<f64>
where
    T: Element,
    F: FnMut(&Tensor<T>) -> Result<Tensor<T>>,
{
    let t = Tensor::from_vec(shape, data)?;
    let out = f(&t)?;
    if out.numel() != 1 {
        return Err(Error::InvalidShape {
            op: "finite_diff_grad",
            detail: format!("f must be scalar-valued, got shape {:?}", out.shape()),
        });
    }
    Ok(out.item()?.to_f64())
}

/// Compare reverse-mode gradients of a scalar-valued graph against central
/// finite differences for each listed leaf. `f` receives the leaves in the
/// order given and must rebuild the graph from them. Returns the maximum
/// relative error over all leaves and elements.
pub fn check_gradients<T, F>(mut f: F, leaves: &[Tensor<T>], eps: f64) -> Result<f64>
where
    T: Element,
    F: FnMut(&[Tensor<T>]) -> Result<Tensor<T>>,
{
    let out = f(leaves)?;
    if out.numel() != 1 {
        return Err(Error::InvalidShape {
            op: "check_gradients",
            detail: format!("graph must be scalar-valued, got {:?}", out.shape()),
        });
    }
    let seed = Tensor::full(out.shape(), T::ONE)?;
    let grads = backward(&out, &seed)?;

    let mut worst = 0.0f64;
    for (li, leaf) in leaves.iter().enumerate() {
        if !leaf.requires_grad() {
            continue;
        }
        let analytic = grads
            .get(leaf)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![T::ZERO; leaf.numel()]);
        let numeric = finite_diff_grad(
            |replacement| {
                let mut inputs: Vec<Tensor<T>> = leaves.to_vec();
                inputs[li] = replacement.clone();
                f(&inputs)
            },
            leaf,
            eps,
        )?;
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    Ok(worst)
}
