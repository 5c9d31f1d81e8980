use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};

pub(crate) fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Cosine similarity; errors on a zero-norm argument.
pub(crate) fn cosine(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> Result<f64> {
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroCosine);
    }
    Ok(u.dot(&v) / (nu * nv))
}

/// d cos(u, v) / du, given the cosine value.
pub(crate) fn cosine_grad(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>, cos: f64) -> Array1<f64> {
    let (nu, nv) = (norm(u), norm(v));
    &v / (nu * nv) - &u * (cos / (nu * nu))
}

pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Vector-Jacobian product of softmax: `p * (g - <p, g>)`.
pub(crate) fn softmax_backward(p: &[f64], grad: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(grad).map(|(a, b)| a * b).sum();
    p.iter().zip(grad).map(|(a, g)| a * (g - inner)).collect()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
