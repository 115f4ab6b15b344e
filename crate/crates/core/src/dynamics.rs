//! Parameter-varying extended unicycle.
//!
//! The state is `[p_x, p_y, v, v_l, theta]`: planar position relative to the
//! active obstacle, longitudinal and lateral body velocity, and yaw. Inputs are
//! `[a, a_l, omega]`. The varying parameters scale and offset the three input
//! channels:
//!
//! ```text
//! xdot = f(x) + A_g g(x) u + eps
//! ```
//!
//! with `A_f = I`, the top two rows of `A_g` fixed to identity rows and the top
//! two entries of `eps` fixed to zero.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix5x3, Vector3, Vector5};
use serde::{Deserialize, Serialize};

/// Control period of the deployed safe controller (30 Hz).
pub const CONTROL_DT: f64 = 1.0 / 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct State {
    pub px: f64,
    pub py: f64,
    pub v: f64,
    pub vl: f64,
    pub theta: f64,
}

impl State {
    pub fn new(px: f64, py: f64, v: f64, vl: f64, theta: f64) -> Self {
        Self { px, py, v, vl, theta }
    }

    pub fn to_vector(self) -> Vector5<f64> {
        Vector5::new(self.px, self.py, self.v, self.vl, self.theta)
    }

    pub fn from_vector(x: &Vector5<f64>) -> Self {
        Self::new(x[0], x[1], x[2], x[3], x[4])
    }

    /// Distance to the obstacle at the origin.
    pub fn distance(&self) -> f64 {
        self.px.hypot(self.py)
    }

    /// Same state with `theta` wrapped into `(-pi, pi]`.
    pub fn wrapped(mut self) -> Self {
        self.theta = wrap_angle(self.theta);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    pub a: f64,
    pub al: f64,
    pub omega: f64,
}

impl Control {
    pub const ZERO: Control = Control { a: 0.0, al: 0.0, omega: 0.0 };

    pub fn new(a: f64, al: f64, omega: f64) -> Self {
        Self { a, al, omega }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.a, self.al, self.omega]
    }

    pub fn from_array(u: [f64; 3]) -> Self {
        Self::new(u[0], u[1], u[2])
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.a, self.al, self.omega)
    }
}

/// Identified input gains (`gain[r][c]` is `rho^g_{r+3, c+3}`) and drift
/// offsets (`drift[r]` is `rho^eps_{r+3}`).
///
/// Serialized as a flat array `[g33, g34, g35, g43, g44, g45, g53, g54, g55, e3, e4, e5]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 12]", into = "[f64; 12]")]
pub struct VaryingParams {
    pub gain: [[f64; 3]; 3],
    pub drift: [f64; 3],
}

impl VaryingParams {
    /// Nominal model: identity gain block, zero drift.
    pub fn identity() -> Self {
        Self {
            gain: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            drift: [0.0; 3],
        }
    }

    /// `rho^g_{row, col}` with the 1-based indices used for the 5x5 `A_g`
    /// (`row`, `col` in `3..=5`).
    pub fn g(&self, row: usize, col: usize) -> f64 {
        self.gain[row - 3][col - 3]
    }

    /// `rho^eps_{row}` for `row` in `3..=5`.
    pub fn e(&self, row: usize) -> f64 {
        self.drift[row - 3]
    }

    pub fn gain_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.gain[r][c])
    }

    pub fn to_array(self) -> [f64; 12] {
        let g = self.gain;
        let e = self.drift;
        [
            g[0][0], g[0][1], g[0][2], g[1][0], g[1][1], g[1][2], g[2][0], g[2][1], g[2][2], e[0],
            e[1], e[2],
        ]
    }

    pub fn from_array(a: [f64; 12]) -> Self {
        Self {
            gain: [[a[0], a[1], a[2]], [a[3], a[4], a[5]], [a[6], a[7], a[8]]],
            drift: [a[9], a[10], a[11]],
        }
    }
}

impl From<[f64; 12]> for VaryingParams {
    fn from(a: [f64; 12]) -> Self {
        Self::from_array(a)
    }
}

impl From<VaryingParams> for [f64; 12] {
    fn from(p: VaryingParams) -> Self {
        p.to_array()
    }
}

/// Parameters identified for the three payloads carried in the hardware
/// experiments (empty basket, 3.5 kg, 5.9 kg).
pub mod payloads {
    use super::VaryingParams;

    pub const LABELS: [&str; 3] = ["0.0", "3.5", "5.9"];

    pub fn kg_0_0() -> VaryingParams {
        VaryingParams {
            gain: [
                [0.08177, 0.05700, -0.00152],
                [0.00742, 0.12048, 0.00241],
                [-0.00166, 0.00444, 0.70741],
            ],
            drift: [-0.13288, 0.23156, 0.01311],
        }
    }

    pub fn kg_3_5() -> VaryingParams {
        VaryingParams {
            gain: [
                [0.11144, 0.02731, 0.00278],
                [0.03285, 0.13207, 0.00682],
                [-0.00121, 0.00207, 0.68546],
            ],
            drift: [-0.24451, 0.10565, 0.01923],
        }
    }

    pub fn kg_5_9() -> VaryingParams {
        VaryingParams {
            gain: [
                [0.12088, 0.00613, 0.00498],
                [0.04936, 0.10012, -0.03498],
                [0.00031, -0.00129, 0.66063],
            ],
            drift: [-0.44301, 0.09005, 0.02785],
        }
    }

    pub fn by_label(label: &str) -> Option<VaryingParams> {
        match label {
            "0.0" => Some(kg_0_0()),
            "3.5" => Some(kg_3_5()),
            "5.9" => Some(kg_5_9()),
            _ => None,
        }
    }
}

/// State limits of the certificate domain, obstacle clearance and the
/// control box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub d_min: f64,
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "V")]
    pub v: f64,
    #[serde(rename = "V_l")]
    pub vl: f64,
    pub u_lo: Control,
    pub u_hi: Control,
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            d_min: 1.0,
            l: 1.0,
            v: 1.3,
            vl: 0.7,
            u_lo: Control::new(-15.0, -15.0, -2.0),
            u_hi: Control::new(15.0, 15.0, 2.0),
        }
    }
}

impl Bounds {
    /// Componentwise projection onto the control box.
    pub fn clamp(&self, u: Control) -> Control {
        Control::new(
            u.a.clamp(self.u_lo.a, self.u_hi.a),
            u.al.clamp(self.u_lo.al, self.u_hi.al),
            u.omega.clamp(self.u_lo.omega, self.u_hi.omega),
        )
    }

    pub fn contains(&self, u: Control) -> bool {
        let (lo, hi, u) = (self.u_lo.to_array(), self.u_hi.to_array(), u.to_array());
        (0..3).all(|i| lo[i] <= u[i] && u[i] <= hi[i])
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

/// Drift of the nominal extended unicycle.
pub fn eval_f(s: &State) -> Vector5<f64> {
    let (sin, cos) = s.theta.sin_cos();
    Vector5::new(
        s.v * cos - s.vl * sin,
        s.v * sin + s.vl * cos,
        0.0,
        0.0,
        0.0,
    )
}

/// Input matrix of the nominal extended unicycle (state independent).
pub fn eval_g(_s: &State) -> Matrix5x3<f64> {
    let mut g = Matrix5x3::zeros();
    g[(2, 0)] = 1.0;
    g[(3, 1)] = 1.0;
    g[(4, 2)] = 1.0;
    g
}

/// Time derivative of the state under the varying dynamics.
pub fn eval_xdot(s: &State, u: &Control, rho: &VaryingParams) -> Vector5<f64> {
    let mut xdot = eval_f(s);
    let u = u.to_array();
    for r in 0..3 {
        xdot[r + 2] = rho.gain[r][0] * u[0] + rho.gain[r][1] * u[1] + rho.gain[r][2] * u[2]
            + rho.drift[r];
    }
    xdot
}

/// One classical RK4 step with the control held constant. The heading of the
/// result is wrapped into `(-pi, pi]`.
pub fn step_rk4(s: &State, u: &Control, rho: &VaryingParams, dt: f64) -> State {
    debug_assert!(dt > 0.0);
    let x0 = s.to_vector();
    let deriv = |x: &Vector5<f64>| eval_xdot(&State::from_vector(x), u, rho);
    let k1 = deriv(&x0);
    let k2 = deriv(&(x0 + k1 * (dt / 2.0)));
    let k3 = deriv(&(x0 + k2 * (dt / 2.0)));
    let k4 = deriv(&(x0 + k3 * dt));
    let x1 = x0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    State::from_vector(&x1).wrapped()
}

/// Holds `u` over `dt`, integrating with `substeps` equal RK4 steps.
pub fn integrate(s: &State, u: &Control, rho: &VaryingParams, dt: f64, substeps: usize) -> State {
    let n = substeps.max(1);
    let h = dt / n as f64;
    (0..n).fold(*s, |x, _| step_rk4(&x, u, rho, h))
}
