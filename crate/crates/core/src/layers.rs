//! Layer forward/backward kernels with explicit caches.
//!
//! Each forward returns the cache its backward consumes; a cache is moved
//! into exactly one backward call. Backward passes are exact analytic
//! gradients, checked against central finite differences in the test suite.

use crate::error::{Result, SpclError};
use crate::tensor::Tensor2;

/// Norm threshold below which l2 normalization is considered degenerate.
pub const NORM_EPSILON: f64 = 1e-12;

/// LayerNorm variance stabilizer.
pub const LAYER_NORM_EPSILON: f64 = 1e-5;

fn check_finite(name: &str, data: &[f64]) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(SpclError::Numeric(format!("non-finite input to {name}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Affine: y = x·Wᵀ + b
// ---------------------------------------------------------------------------

pub struct AffineCache {
    x: Tensor2,
    w: Tensor2,
}

pub fn affine(x: &Tensor2, w: &Tensor2, b: &[f64]) -> Result<(Tensor2, AffineCache)> {
    if x.cols() != w.cols() || b.len() != w.rows() {
        return Err(SpclError::Dimension(format!(
            "affine: x {}x{}, w {}x{}, b {}",
            x.rows(),
            x.cols(),
            w.rows(),
            w.cols(),
            b.len()
        )));
    }
    check_finite("affine", x.data())?;
    let mut y = x.matmul_nt(w);
    for r in 0..y.rows() {
        let row = y.row_mut(r);
        for (v, bias) in row.iter_mut().zip(b) {
            *v += bias;
        }
    }
    Ok((y, AffineCache { x: x.clone(), w: w.clone() }))
}

/// Returns (dx, dw, db).
pub fn affine_backward(cache: AffineCache, dy: &Tensor2) -> Result<(Tensor2, Tensor2, Vec<f64>)> {
    if dy.rows() != cache.x.rows() || dy.cols() != cache.w.rows() {
        return Err(SpclError::Dimension(format!(
            "affine_backward: dy {}x{} vs batch {} out {}",
            dy.rows(),
            dy.cols(),
            cache.x.rows(),
            cache.w.rows()
        )));
    }
    let dx = dy.matmul_nn(&cache.w);
    let dw = dy.matmul_tn(&cache.x);
    let db = dy.col_sums();
    Ok((dx, dw, db))
}

// ---------------------------------------------------------------------------
// GELU, exact-erf form: y = 0.5·x·(1 + erf(x/√2))
// ---------------------------------------------------------------------------

pub struct GeluCache {
    x: Tensor2,
}

pub fn gelu(x: &Tensor2) -> Result<(Tensor2, GeluCache)> {
    check_finite("gelu", x.data())?;
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = 0.5 * *v * (1.0 + libm::erf(*v / std::f64::consts::SQRT_2));
    }
    Ok((y, GeluCache { x: x.clone() }))
}

pub fn gelu_backward(cache: GeluCache, dy: &Tensor2) -> Result<Tensor2> {
    if (dy.rows(), dy.cols()) != (cache.x.rows(), cache.x.cols()) {
        return Err(SpclError::Dimension("gelu_backward: shape mismatch".into()));
    }
    let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let mut dx = cache.x;
    for (v, &g) in dx.data_mut().iter_mut().zip(dy.data()) {
        let x = *v;
        let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
        let pdf = inv_sqrt_2pi * (-0.5 * x * x).exp();
        *v = g * (cdf + x * pdf);
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// LayerNorm over each row, then affine by gamma/beta
// ---------------------------------------------------------------------------

pub struct LayerNormCache {
    xhat: Tensor2,
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
}

pub fn layer_norm(
    x: &Tensor2,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Tensor2, LayerNormCache)> {
    if gamma.len() != x.cols() || beta.len() != x.cols() {
        return Err(SpclError::Dimension(format!(
            "layer_norm: {} cols vs gamma {} beta {}",
            x.cols(),
            gamma.len(),
            beta.len()
        )));
    }
    if eps <= 0.0 {
        return Err(SpclError::Argument("layer_norm epsilon must be positive".into()));
    }
    check_finite("layer_norm", x.data())?;
    let n = x.cols() as f64;
    let mut y = Tensor2::zeros(x.rows(), x.cols());
    let mut xhat = Tensor2::zeros(x.rows(), x.cols());
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std.push(istd);
        for c in 0..x.cols() {
            let xh = (row[c] - mean) * istd;
            *xhat.at_mut(r, c) = xh;
            *y.at_mut(r, c) = gamma[c] * xh + beta[c];
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std, gamma: gamma.to_vec() }))
}

/// Returns (dx, dgamma, dbeta).
pub fn layer_norm_backward(
    cache: LayerNormCache,
    dy: &Tensor2,
) -> Result<(Tensor2, Vec<f64>, Vec<f64>)> {
    let (rows, cols) = (cache.xhat.rows(), cache.xhat.cols());
    if (dy.rows(), dy.cols()) != (rows, cols) {
        return Err(SpclError::Dimension("layer_norm_backward: shape mismatch".into()));
    }
    let n = cols as f64;
    let mut dx = Tensor2::zeros(rows, cols);
    let mut dgamma = vec![0.0; cols];
    let mut dbeta = vec![0.0; cols];
    for r in 0..rows {
        let xh = cache.xhat.row(r);
        let dyr = dy.row(r);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for c in 0..cols {
            dgamma[c] += dyr[c] * xh[c];
            dbeta[c] += dyr[c];
            let dxhat = dyr[c] * cache.gamma[c];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xh[c];
        }
        let istd = cache.inv_std[r];
        for c in 0..cols {
            let dxhat = dyr[c] * cache.gamma[c];
            *dx.at_mut(r, c) = istd * (dxhat - sum_dxhat / n - xh[c] * sum_dxhat_xhat / n);
        }
    }
    Ok((dx, dgamma, dbeta))
}

// ---------------------------------------------------------------------------
// Row-wise L2 normalization: u = v / ‖v‖₂
// ---------------------------------------------------------------------------

pub struct L2NormalizeCache {
    unit: Tensor2,
    norms: Vec<f64>,
}

pub fn l2_normalize_rows(v: &Tensor2) -> Result<(Tensor2, L2NormalizeCache)> {
    check_finite("l2_normalize", v.data())?;
    let mut unit = v.clone();
    let mut norms = Vec::with_capacity(v.rows());
    for r in 0..v.rows() {
        let row = unit.row_mut(r);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= NORM_EPSILON {
            return Err(SpclError::DegenerateEmbedding { norm, threshold: NORM_EPSILON });
        }
        for x in row.iter_mut() {
            *x /= norm;
        }
        norms.push(norm);
    }
    Ok((unit.clone(), L2NormalizeCache { unit, norms }))
}

/// dv = (du − u·(u·du)) / ‖v‖, row by row.
pub fn l2_normalize_backward(cache: L2NormalizeCache, du: &Tensor2) -> Result<Tensor2> {
    let (rows, cols) = (cache.unit.rows(), cache.unit.cols());
    if (du.rows(), du.cols()) != (rows, cols) {
        return Err(SpclError::Dimension("l2_normalize_backward: shape mismatch".into()));
    }
    let mut dv = Tensor2::zeros(rows, cols);
    for r in 0..rows {
        let u = cache.unit.row(r);
        let dur = du.row(r);
        let dot: f64 = u.iter().zip(dur).map(|(a, b)| a * b).sum();
        let inv = 1.0 / cache.norms[r];
        for c in 0..cols {
            *dv.at_mut(r, c) = (dur[c] - u[c] * dot) * inv;
        }
    }
    Ok(dv)
}
