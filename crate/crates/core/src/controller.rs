//! Nominal LQR tracking, worst-case `φ̇` over the control box and the QP
//! safety filter.

use nalgebra::{DMatrix, SMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{wrap_angle, Bounds, Control, State, VaryingParams};
use crate::riccati::{solve_care, RiccatiError};
use crate::safety_index::{alphas, control_bracket, phi, DegeneratePosition, SafetyIndexParam};

/// `φ̇(s, u) = c0 + ca·a + cal·a_l + cw·ω`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlAffineCoeffs {
    pub c0: f64,
    pub ca: f64,
    pub cal: f64,
    pub cw: f64,
}

impl ControlAffineCoeffs {
    pub fn coeffs(&self) -> [f64; 3] {
        [self.ca, self.cal, self.cw]
    }

    pub fn eval(&self, u: &Control) -> f64 {
        self.c0 + self.ca * u.a + self.cal * u.al + self.cw * u.omega
    }
}

pub fn affine_coeffs(s: &State, rho: &VaryingParams, k: f64) -> ControlAffineCoeffs {
    let al = alphas(s, rho, k);
    let c0 = -2.0 * k * (s.v * s.v + s.vl * s.vl) - 2.0 * (s.px * al.a1 + s.py * al.a2);
    let c = |col| -2.0 * k * control_bracket(s, &al, rho, col);
    ControlAffineCoeffs { c0, ca: c(3), cal: c(4), cw: c(5) }
}

/// Minimum of `φ̇` over the box and the vertex attaining it. A zero
/// coefficient selects 0 for its channel.
pub fn phi_dot_min(s: &State, rho: &VaryingParams, k: f64, b: &Bounds) -> (f64, Control) {
    minimize_over_box(&affine_coeffs(s, rho, k), b)
}

fn minimize_over_box(c: &ControlAffineCoeffs, b: &Bounds) -> (f64, Control) {
    let (lo, hi) = (b.u_lo.to_array(), b.u_hi.to_array());
    let u: [f64; 3] = std::array::from_fn(|i| {
        let ci = c.coeffs()[i];
        if ci < 0.0 {
            hi[i]
        } else if ci > 0.0 {
            lo[i]
        } else {
            0.0
        }
    });
    let u = Control::from_array(u);
    (c.eval(&u), u)
}

pub fn check_fi_feasible(s: &State, rho: &VaryingParams, p: &SafetyIndexParam, b: &Bounds) -> bool {
    match phi(s, p) {
        Ok(v) if v >= 0.0 => true,
        Ok(_) => phi_dot_min(s, rho, p.k, b).0 <= 0.0,
        Err(_) => false,
    }
}

pub fn check_ftc_feasible(s: &State, rho: &VaryingParams, p: &SafetyIndexParam, b: &Bounds) -> bool {
    match phi(s, p) {
        Ok(v) if v < 0.0 => true,
        Ok(_) => phi_dot_min(s, rho, p.k, b).0 < -p.eta,
        Err(_) => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum QpError {
    /// No control in the box reaches `φ̇ ≤ −η`; carries the minimizing vertex.
    #[error("safe set unreachable: min phi_dot = {min_phi_dot:.4e} > -eta")]
    Infeasible { min_phi_dot: f64, u_star: Control },
    #[error("safety index undefined at the obstacle center")]
    Degenerate(#[from] DegeneratePosition),
}

/// Filtered control together with whether the constraint was active.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterOutput {
    pub u: Control,
    pub phi: f64,
    pub phi_dot: f64,
    pub active: bool,
}

/// `argmin ‖u − u_nom‖²` over the box intersected with `φ̇ ≤ −η`, enforced
/// only when `φ ≥ 0`.
pub fn safe_qp(
    s: &State,
    u_nom: Control,
    rho: &VaryingParams,
    p: &SafetyIndexParam,
    b: &Bounds,
) -> Result<Control, QpError> {
    safe_filter(s, u_nom, rho, p, b).map(|o| o.u)
}

pub fn safe_filter(
    s: &State,
    u_nom: Control,
    rho: &VaryingParams,
    p: &SafetyIndexParam,
    b: &Bounds,
) -> Result<FilterOutput, QpError> {
    let phi_val = phi(s, p)?;
    let coeffs = affine_coeffs(s, rho, p.k);
    let clamped = b.clamp(u_nom);
    if phi_val < 0.0 {
        return Ok(FilterOutput { u: clamped, phi: phi_val, phi_dot: coeffs.eval(&clamped), active: false });
    }
    let u = project_box_halfspace(&coeffs, -p.eta, u_nom, b)?;
    Ok(FilterOutput { u, phi: phi_val, phi_dot: coeffs.eval(&u), active: u != clamped })
}

/// Euclidean projection of `u_nom` onto `{u ∈ box : c0 + c·u ≤ bound}`.
///
/// The KKT point is `u(λ) = clamp(u_nom − λc)` with `λ ≥ 0`; `c·u(λ)` is
/// piecewise linear and nonincreasing in `λ`, so the root is found exactly by
/// walking its breakpoints.
pub fn project_box_halfspace(
    coeffs: &ControlAffineCoeffs,
    bound: f64,
    u_nom: Control,
    b: &Bounds,
) -> Result<Control, QpError> {
    let (min_val, u_star) = minimize_over_box(coeffs, b);
    if min_val > bound {
        return Err(QpError::Infeasible { min_phi_dot: min_val, u_star });
    }
    let clamped = b.clamp(u_nom);
    if coeffs.eval(&clamped) <= bound {
        return Ok(clamped);
    }

    let c = coeffs.coeffs();
    let n = u_nom.to_array();
    let (lo, hi) = (b.u_lo.to_array(), b.u_hi.to_array());
    let at = |lambda: f64| -> [f64; 3] { std::array::from_fn(|i| (n[i] - lambda * c[i]).clamp(lo[i], hi[i])) };
    let value = |u: &[f64; 3]| coeffs.c0 + (0..3).map(|i| c[i] * u[i]).sum::<f64>();

    let mut breaks: Vec<f64> = (0..3)
        .filter(|&i| c[i] != 0.0)
        .flat_map(|i| [(n[i] - lo[i]) / c[i], (n[i] - hi[i]) / c[i]])
        .filter(|l| *l > 0.0)
        .collect();
    breaks.sort_by(f64::total_cmp);

    let mut prev_l = 0.0;
    let mut prev_v = value(&at(0.0));
    for &l in &breaks {
        let v = value(&at(l));
        if v <= bound {
            // linear on [prev_l, l]
            let t = if prev_v == v { 1.0 } else { (prev_v - bound) / (prev_v - v) };
            let mut lambda = prev_l + t * (l - prev_l);
            // roundoff can leave the point a few ulps outside
            let mut nudge = f64::EPSILON * lambda.max(f64::MIN_POSITIVE);
            while value(&at(lambda)) > bound && lambda < l {
                lambda = (lambda + nudge).min(l);
                nudge *= 2.0;
            }
            return Ok(Control::from_array(at(lambda)));
        }
        prev_l = l;
        prev_v = v;
    }
    // all active channels saturated: only reachable through roundoff
    Ok(u_star)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalSpec {
    pub x_goal: f64,
    pub y_goal: f64,
    #[serde(default)]
    pub heading_goal: Option<f64>,
    pub tolerance: f64,
}

impl GoalSpec {
    pub fn new(x_goal: f64, y_goal: f64, tolerance: f64) -> Self {
        Self { x_goal, y_goal, heading_goal: None, tolerance }
    }

    pub fn distance(&self, s: &State) -> f64 {
        (s.px - self.x_goal).hypot(s.py - self.y_goal)
    }

    pub fn reached(&self, s: &State) -> bool {
        self.distance(s) <= self.tolerance
    }

    /// Tracking error `s − s_goal`, with a free heading when none is given.
    fn error(&self, s: &State) -> [f64; 5] {
        let eth = self.heading_goal.map_or(0.0, |h| wrap_angle(s.theta - h));
        [s.px - self.x_goal, s.py - self.y_goal, s.v, s.vl, eth]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LqrWeights {
    pub q: [f64; 5],
    pub r: [f64; 3],
}

impl Default for LqrWeights {
    fn default() -> Self {
        Self { q: [10.0, 10.0, 1.0, 1.0, 2.0], r: [0.1, 0.1, 0.1] }
    }
}

pub type LqrGain = SMatrix<f64, 3, 5>;

/// Nominal-model linearization about heading `theta` with zero velocity.
pub fn linearize(theta: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (sin, cos) = theta.sin_cos();
    let mut a = DMatrix::zeros(5, 5);
    a[(0, 2)] = cos;
    a[(0, 3)] = -sin;
    a[(1, 2)] = sin;
    a[(1, 3)] = cos;
    let mut b = DMatrix::zeros(5, 3);
    for i in 0..3 {
        b[(2 + i, i)] = 1.0;
    }
    (a, b)
}

pub fn lqr_gain(theta: f64, w: &LqrWeights) -> Result<LqrGain, RiccatiError> {
    let (a, b) = linearize(theta);
    let q = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&w.q));
    let r = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&w.r));
    let sol = solve_care(&a, &b, &q, &r)?;
    Ok(LqrGain::from_iterator(sol.k.iter().copied()))
}

/// Saturated PD toward the goal in the body frame.
pub fn pd_fallback(s: &State, goal: &GoalSpec, b: &Bounds) -> Control {
    let (sin, cos) = s.theta.sin_cos();
    let (ex, ey) = (goal.x_goal - s.px, goal.y_goal - s.py);
    let fwd = cos * ex + sin * ey;
    let lat = -sin * ex + cos * ey;
    let eth = goal.heading_goal.map_or(0.0, |h| wrap_angle(h - s.theta));
    b.clamp(Control::new(4.0 * fwd - 4.0 * s.v, 4.0 * lat - 4.0 * s.vl, 2.0 * eth))
}

pub fn lqr_nominal(s: &State, goal: &GoalSpec, w: &LqrWeights, b: &Bounds) -> Control {
    match lqr_gain(s.theta, w) {
        Ok(k) => apply_gain(&k, s, goal, b),
        Err(e) => {
            log::warn!("LQR failed ({e}); using PD fallback");
            pd_fallback(s, goal, b)
        }
    }
}

fn apply_gain(k: &LqrGain, s: &State, goal: &GoalSpec, b: &Bounds) -> Control {
    let e = nalgebra::Vector5::from(goal.error(s));
    let u = -(k * e);
    b.clamp(Control::new(u[0], u[1], u[2]))
}

/// LQR controller caching its gain until the heading drifts past
/// `relinearize` radians from the last linearization.
#[derive(Debug, Clone)]
pub struct LqrController {
    pub weights: LqrWeights,
    pub relinearize: f64,
    cache: Option<(f64, LqrGain)>,
}

impl LqrController {
    pub fn new(weights: LqrWeights) -> Self {
        Self { weights, relinearize: 0.2, cache: None }
    }

    pub fn control(&mut self, s: &State, goal: &GoalSpec, b: &Bounds) -> Control {
        let stale = match self.cache {
            Some((th, _)) => wrap_angle(s.theta - th).abs() > self.relinearize,
            None => true,
        };
        if stale {
            match lqr_gain(s.theta, &self.weights) {
                Ok(k) => self.cache = Some((s.theta, k)),
                Err(e) => {
                    log::warn!("LQR failed ({e}); using PD fallback");
                    self.cache = None;
                    return pd_fallback(s, goal, b);
                }
            }
        }
        let (_, k) = self.cache.expect("gain cached");
        apply_gain(&k, s, goal, b)
    }
}
