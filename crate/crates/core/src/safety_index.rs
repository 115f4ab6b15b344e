//! First-order safety index for a single circular obstacle at the origin.
//!
//! `phi = sigma + d_min^2 - d^2 - 2 k d ddot`, where `d` is the distance to the
//! obstacle and `ddot` its rate. The time derivative of `phi` is affine in the
//! control; the trigonometric parts are collected in four terms
//! [`AlphaTerms`], which also form the monomial basis of the sum-of-squares
//! certificate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{Control, State, VaryingParams};

/// Default strict-decrease rate.
pub const DEFAULT_ETA: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("state coincides with the obstacle center (d = 0) at ({px}, {py})")]
pub struct DegeneratePosition {
    pub px: f64,
    pub py: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyIndexParam {
    pub k: f64,
    /// Additive discrete-time margin.
    #[serde(default)]
    pub sigma: f64,
    pub d_min: f64,
    pub eta: f64,
}

impl SafetyIndexParam {
    pub fn new(k: f64) -> Self {
        Self { k, sigma: 0.0, d_min: 1.0, eta: DEFAULT_ETA }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn with_d_min(mut self, d_min: f64) -> Self {
        self.d_min = d_min;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaTerms {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
}

fn checked_distance(s: &State) -> Result<f64, DegeneratePosition> {
    let d = s.distance();
    if d > 0.0 {
        Ok(d)
    } else {
        Err(DegeneratePosition { px: s.px, py: s.py })
    }
}

pub fn phi0(s: &State, d_min: f64) -> Result<f64, DegeneratePosition> {
    let d = checked_distance(s)?;
    Ok(d_min * d_min - d * d)
}

/// Rate of change of the obstacle distance along the position kinematics,
/// `(v a4 - v_l a3) / d`.
pub fn d_dot(s: &State) -> Result<f64, DegeneratePosition> {
    let d = checked_distance(s)?;
    let (sin, cos) = s.theta.sin_cos();
    let a3 = s.px * sin - s.py * cos;
    let a4 = s.px * cos + s.py * sin;
    Ok((s.v * a4 - s.vl * a3) / d)
}

pub fn phi(s: &State, p: &SafetyIndexParam) -> Result<f64, DegeneratePosition> {
    let d = checked_distance(s)?;
    let dd = d_dot(s)?;
    Ok(p.sigma + p.d_min * p.d_min - d * d - 2.0 * p.k * d * dd)
}

pub fn alphas(s: &State, rho: &VaryingParams, k: f64) -> AlphaTerms {
    let (sin, cos) = s.theta.sin_cos();
    let (e3, e4, e5) = (rho.e(3), rho.e(4), rho.e(5));
    let along = k * e3 + s.v - k * e5 * s.vl;
    let across = k * e4 + s.vl + k * e5 * s.v;
    AlphaTerms {
        a1: cos * along - sin * across,
        a2: cos * across + sin * along,
        a3: s.px * sin - s.py * cos,
        a4: s.px * cos + s.py * sin,
    }
}

/// The bracket multiplying `-2 k u_j` in `phi_dot` for input channel `col`
/// (3 = a, 4 = a_l, 5 = omega).
pub(crate) fn control_bracket(s: &State, al: &AlphaTerms, rho: &VaryingParams, col: usize) -> f64 {
    -al.a3 * (rho.g(4, col) + rho.g(5, col) * s.v) + al.a4 * (rho.g(3, col) - rho.g(5, col) * s.vl)
}

/// Time derivative of `phi` (the margin is constant and drops out).
pub fn phi_dot(s: &State, u: &Control, rho: &VaryingParams, k: f64) -> f64 {
    let al = alphas(s, rho, k);
    let drift = -2.0 * k * s.v * s.v - 2.0 * k * s.vl * s.vl - 2.0 * s.px * al.a1 - 2.0 * s.py * al.a2;
    let u = u.to_array();
    (0..3).fold(drift, |acc, j| acc - 2.0 * k * u[j] * control_bracket(s, &al, rho, j + 3))
}
