//! Elementwise and vector functions shared by the plain API and the tape.

use crate::error::{shape_err, Error, Result};
use crate::numerics::tensor::{dot, norm};

/// Norm below which a vector is treated as zero by [`cosine`].
pub const COSINE_EPS: f64 = 1e-12;

fn check_finite(x: &[f64], context: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context.to_string()))
    }
}

/// Stable softmax of one row.
pub fn softmax_row(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Empty("softmax_row".into()));
    }
    check_finite(x, "softmax_row")?;
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Max-subtracted softmax, in place. `x` must be non-empty and finite.
pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in x.iter_mut() {
        *v /= total;
    }
}

pub fn softplus(x: &[f64]) -> Result<Vec<f64>> {
    check_finite(x, "softplus")?;
    Ok(x.iter().map(|&v| softplus_scalar(v)).collect())
}

/// `ln(1 + e^x)` without overflow for large `|x|`.
pub(crate) fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(shape_err(format!("cosine of lengths {} and {}", u.len(), v.len())));
    }
    check_finite(u, "cosine")?;
    check_finite(v, "cosine")?;
    let (nu, nv) = (norm(u), norm(v));
    if nu <= COSINE_EPS || nv <= COSINE_EPS {
        return Err(Error::ZeroNorm("cosine".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}
