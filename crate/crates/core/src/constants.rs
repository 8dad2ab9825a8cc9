//! Gamma function and the normalisation constants of the s-Dirichlet energy,
//! the fractional Poisson kernel and the weighted extension energy.

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{domain, Result};
use crate::quadrature;

/// Gamma function for positive arguments.
pub fn gamma_fn(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(domain(format!("gamma_fn requires x > 0, got {x}")));
    }
    Ok(statrs::function::gamma::gamma(x))
}

fn check_order(s: f64) -> Result<()> {
    if !(s > 0.0 && s < 1.0) {
        return Err(domain(format!("s must lie in (0,1), got {s}")));
    }
    Ok(())
}

fn check_dim(n: usize) -> Result<()> {
    if n == 0 {
        return Err(domain("spatial dimension must be at least 1"));
    }
    Ok(())
}

/// γ_{n,s} = s 2^{2s} π^{-n/2} Γ((n+2s)/2) / Γ(1-s).
pub fn gamma_ns(n: usize, s: f64) -> Result<f64> {
    check_dim(n)?;
    check_order(s)?;
    let nf = n as f64;
    Ok(s * 2f64.powf(2.0 * s) * PI.powf(-nf / 2.0) * gamma_fn((nf + 2.0 * s) / 2.0)? / gamma_fn(1.0 - s)?)
}

/// σ_{n,s} = π^{-n/2} Γ((n+2s)/2) / Γ(s), the Poisson kernel constant.
pub fn sigma_ns(n: usize, s: f64) -> Result<f64> {
    check_dim(n)?;
    check_order(s)?;
    let nf = n as f64;
    Ok(PI.powf(-nf / 2.0) * gamma_fn((nf + 2.0 * s) / 2.0)? / gamma_fn(s)?)
}

/// δ_s = 2^{2s-1} Γ(s) / Γ(1-s).
pub fn delta_s(s: f64) -> Result<f64> {
    check_order(s)?;
    Ok(2f64.powf(2.0 * s - 1.0) * gamma_fn(s)? / gamma_fn(1.0 - s)?)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct AlphaPair {
    pub quadrature: f64,
    pub closed_form: f64,
}

/// α_{n,s} = ∫_{R^{n-1}} (1+|x'|²)^{-(n+2s)/2} dx', by radial quadrature and as γ_{1,s}/γ_{n,s}.
pub fn alpha_ns(n: usize, s: f64) -> Result<AlphaPair> {
    if n < 2 {
        return Err(domain("alpha_ns requires n >= 2"));
    }
    check_order(s)?;
    let nf = n as f64;
    let k = nf - 1.0;
    let sphere = 2.0 * PI.powf(k / 2.0) / gamma_fn(k / 2.0)?;
    let expo = -(nf + 2.0 * s) / 2.0;
    let (radial, _) = quadrature::integrate_to_infinity(|r| r.powf(k - 1.0) * (1.0 + r * r).powf(expo), 0.0, 1e-11);
    Ok(AlphaPair {
        quadrature: sphere * radial,
        closed_form: gamma_ns(1, s)? / gamma_ns(n, s)?,
    })
}

/// Surface area of the unit sphere S^{n-1} in R^n.
pub fn sphere_area(n: usize) -> f64 {
    let nf = n as f64;
    2.0 * PI.powf(nf / 2.0) / statrs::function::gamma::gamma(nf / 2.0)
}

/// Dimension/order parameters with every derived constant.
#[derive(Clone, Debug, Serialize)]
pub struct FracParams {
    pub n: usize,
    pub s: f64,
    pub d: usize,
    pub gamma_ns: f64,
    pub sigma_ns: f64,
    pub delta_s: f64,
    pub a: f64,
}

impl FracParams {
    pub fn new(n: usize, s: f64, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(domain("target dimension d must be at least 1"));
        }
        Ok(Self {
            n,
            s,
            d,
            gamma_ns: gamma_ns(n, s)?,
            sigma_ns: sigma_ns(n, s)?,
            delta_s: delta_s(s)?,
            a: 1.0 - 2.0 * s,
        })
    }
}
