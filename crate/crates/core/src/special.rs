//! Standard-normal density and distribution function.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Standard normal pdf.
#[inline]
pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Standard normal cdf, `Φ(z) = erfc(-z/√2)/2`.
///
/// Going through `erfc` keeps full relative precision in the lower tail.
#[inline]
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for strictly positive `y`.
pub fn softplus_inv(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Mean and variance of `max(0, z)` for `z ~ N(mean, var)`.
///
/// With `var == 0` this is the deterministic ReLU.
pub fn relu_moments(mean: f64, var: f64) -> (f64, f64) {
    let p = ReluPartials::at(mean, var);
    (p.mean, p.var)
}

/// Rectified-Gaussian moments together with their partial derivatives.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ReluPartials {
    pub mean: f64,
    pub var: f64,
    pub dmean_dm: f64,
    pub dmean_dv: f64,
    pub dvar_dm: f64,
    pub dvar_dv: f64,
}

impl ReluPartials {
    pub(crate) fn at(m: f64, v: f64) -> Self {
        if v <= 0.0 {
            let on = if m > 0.0 { 1.0 } else { 0.0 };
            return Self {
                mean: m.max(0.0),
                var: 0.0,
                dmean_dm: on,
                dmean_dv: 0.0,
                dvar_dm: 0.0,
                dvar_dv: 0.0,
            };
        }
        let s = v.sqrt();
        let a = m / s;
        if a > 8.5 {
            // Φ(a) = 1 and φ(a) = 0 to double precision.
            return Self {
                mean: m,
                var: v,
                dmean_dm: 1.0,
                dmean_dv: 0.0,
                dvar_dm: 0.0,
                dvar_dv: 1.0,
            };
        }
        let cdf = norm_cdf(a);
        let pdf = norm_pdf(a);
        let mean = m * cdf + s * pdf;
        let second = (m * m + v) * cdf + m * s * pdf;
        let var = (second - mean * mean).max(0.0);
        Self {
            mean,
            var,
            dmean_dm: cdf,
            dmean_dv: pdf / (2.0 * s),
            dvar_dm: 2.0 * mean * (1.0 - cdf),
            dvar_dv: cdf - mean * pdf / s,
        }
    }
}
