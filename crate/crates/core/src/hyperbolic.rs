//! Lorentz-model geometry and the exponential distance regularizer.
//!
//! Euclidean representations `z ∈ R^d` are lifted onto the upper sheet of
//! the hyperboloid `{x : <x,x>_L = -β, x₀ > 0}` by `z ↦ (√(β + ‖z‖²), z)`.
//! Two lifted points are compared with the squared Lorentzian distance
//! `-2β - 2<Lp, Lg>_L`, and the regularizer is `exp(dist / σ)`.

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

/// A point on the hyperboloid, time-like coordinate first.
#[derive(Clone, Debug, PartialEq)]
pub struct LorentzPoint {
    coords: Vec<f64>,
    beta: f64,
}

impl LorentzPoint {
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Time-like coordinate `x₀`.
    pub fn time(&self) -> f64 {
        self.coords[0]
    }

    pub fn spatial(&self) -> &[f64] {
        &self.coords[1..]
    }
}

/// `<x, y>_L = -x₀y₀ + Σ xᵢyᵢ`.
pub fn lorentz_inner(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "Lorentz vectors of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Shape("Lorentz vectors need at least 2 coordinates".into()));
    }
    Ok(-x[0] * y[0] + dot(&x[1..], &y[1..]))
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    Ok(())
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

pub fn lift(z: &[f64], beta: f64) -> Result<LorentzPoint> {
    check_beta(beta)?;
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("representation to lift".into()));
    }
    let mut coords = Vec::with_capacity(z.len() + 1);
    coords.push((beta + dot(z, z)).sqrt());
    coords.extend_from_slice(z);
    Ok(LorentzPoint { coords, beta })
}

/// Squared Lorentzian distance, clamped below at zero.
pub fn sq_lorentz_dist(lp: &LorentzPoint, lg: &LorentzPoint) -> Result<f64> {
    if lp.beta != lg.beta {
        return Err(Error::Config(format!(
            "points live on different hyperboloids (beta {} vs {})",
            lp.beta, lg.beta
        )));
    }
    // Evaluated as <Lp - Lg, Lp - Lg>_L, which equals -2β - 2<Lp, Lg>_L on the
    // hyperboloid but avoids the cancellation of the expanded form.
    let diff: Vec<f64> = lp.coords.iter().zip(&lg.coords).map(|(a, b)| a - b).collect();
    Ok(lorentz_inner(&diff, &diff)?.max(0.0))
}

/// `exp(‖lift(zp) - lift(zg)‖²_L / σ)` for a single pair of representations.
pub fn regularizer(zp: &[f64], zg: &[f64], beta: f64, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    let d = sq_lorentz_dist(&lift(zp, beta)?, &lift(zg, beta)?)?;
    Ok((d / sigma).exp())
}

/// Gradient of [`regularizer`] w.r.t. `zp` with `zg` held fixed.
///
/// With `x₀ = √(β+‖zp‖²)` and `y₀ = √(β+‖zg‖²)` the distance is
/// `-2β + 2x₀y₀ - 2 zp·zg`, so `∂R/∂zp = (R/σ)(2y₀ zp/x₀ - 2zg)`.
pub fn regularizer_grad_wrt_zp(zp: &[f64], zg: &[f64], beta: f64, sigma: f64) -> Result<Vec<f64>> {
    check_sigma(sigma)?;
    let lp = lift(zp, beta)?;
    let lg = lift(zg, beta)?;
    let r = (sq_lorentz_dist(&lp, &lg)? / sigma).exp();
    let ratio = lg.time() / lp.time();
    Ok(zp
        .iter()
        .zip(zg)
        .map(|(p, g)| r / sigma * (2.0 * ratio * p - 2.0 * g))
        .collect())
}

/// Per-sample regularizer averaged over a batch of representations, and its
/// gradient w.r.t. the local representation matrix (already divided by the
/// batch size).
pub fn batch_regularizer(zp: &Matrix, zg: &Matrix, beta: f64, sigma: f64) -> Result<(f64, Matrix)> {
    if zp.shape() != zg.shape() {
        return Err(Error::Shape(format!(
            "local representation {:?} vs global {:?}",
            zp.shape(),
            zg.shape()
        )));
    }
    let n = zp.rows() as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(zp.rows(), zp.cols());
    for r in 0..zp.rows() {
        value += regularizer(zp.row(r), zg.row(r), beta, sigma)?;
        let g = regularizer_grad_wrt_zp(zp.row(r), zg.row(r), beta, sigma)?;
        for (dst, v) in grad.row_mut(r).iter_mut().zip(g) {
            *dst = v / n;
        }
    }
    Ok((value / n, grad))
}
