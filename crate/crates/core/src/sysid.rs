//! Identification of the payload-dependent gains and drifts from logged
//! trajectories.
//!
//! Velocity commands are turned back into the accelerations the robot was
//! asked for, velocity derivatives are taken per control interval, and each
//! of the three dynamic rows is fitted by ordinary least squares against
//! `[a, a_l, ω, 1]`.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{eval_xdot, integrate, Control, State, VaryingParams, CONTROL_DT};

pub const MIN_FIT_ROWS: usize = 40;
pub const DEFAULT_FRAC: f64 = 0.08;

#[derive(Debug, Error)]
pub enum SysidError {
    #[error("malformed log: {0}")]
    Parse(String),
    #[error("time not strictly increasing at row {row}")]
    NonIncreasingTime { row: usize },
    #[error("need at least {needed} rows, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("regressors are rank deficient for the {row} row (weak directions: {directions})")]
    IllConditioned { row: &'static str, directions: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for SysidError {
    fn from(e: csv::Error) -> Self {
        SysidError::Parse(e.to_string())
    }
}

/// One logged sample. `w` is the measured yaw rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t: f64,
    pub px: f64,
    pub py: f64,
    pub theta: f64,
    pub v: f64,
    pub vl: f64,
    pub w: f64,
    pub v_cmd: f64,
    pub vl_cmd: f64,
    pub w_cmd: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryLog {
    pub rows: Vec<LogRow>,
}

impl TrajectoryLog {
    pub fn validate(&self) -> Result<(), SysidError> {
        for (i, w) in self.rows.windows(2).enumerate() {
            if !(w[1].t > w[0].t) {
                return Err(SysidError::NonIncreasingTime { row: i + 1 });
            }
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, SysidError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let rows = rdr.deserialize().collect::<Result<Vec<LogRow>, _>>()?;
        let log = Self { rows };
        log.validate()?;
        Ok(log)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SysidError> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), SysidError> {
        let mut wtr = csv::Writer::from_writer(writer);
        if self.rows.is_empty() {
            wtr.write_record(["t", "px", "py", "theta", "v", "vl", "w", "v_cmd", "vl_cmd", "w_cmd"])?;
        }
        for r in &self.rows {
            wtr.serialize(r)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SysidError> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Accelerations implied by `v_cmd = v + a·dt`; yaw-rate commands pass
/// through.
pub fn invert_commands(log: &TrajectoryLog) -> Result<Vec<Control>, SysidError> {
    log.validate()?;
    Ok(log
        .rows
        .iter()
        .map(|r| Control::new((r.v_cmd - r.v) / CONTROL_DT, (r.vl_cmd - r.vl) / CONTROL_DT, r.w_cmd))
        .collect())
}

/// Single-pass LOWESS: local linear fit with tricube weights over the
/// `⌈frac·N⌉` nearest samples in `t`. `t` must be sorted.
pub fn lowess(t: &[f64], y: &[f64], frac: f64) -> Result<Vec<f64>, SysidError> {
    let n = t.len();
    if n != y.len() {
        return Err(SysidError::Parse("series length mismatch".into()));
    }
    if n < 5 {
        return Err(SysidError::InsufficientData { needed: 5, got: n });
    }
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(SysidError::Parse(format!("frac must be in (0, 1], got {frac}")));
    }
    let q = ((frac * n as f64).ceil() as usize).clamp(2, n);
    let mut lo = 0;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        while lo + q < n && t[lo + q] - t[i] < t[i] - t[lo] {
            lo += 1;
        }
        let window = lo..lo + q;
        let h = (t[i] - t[lo]).max(t[lo + q - 1] - t[i]);
        let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for j in window {
            let u = if h > 0.0 { (t[j] - t[i]).abs() / h } else { 0.0 };
            let w = (1.0 - u.powi(3)).max(0.0).powi(3);
            let x = t[j] - t[i];
            sw += w;
            sx += w * x;
            sy += w * y[j];
            sxx += w * x * x;
            sxy += w * x * y[j];
        }
        // intercept of the weighted line through (x = t - t_i)
        let det = sw * sxx - sx * sx;
        let fit = if det.abs() > 1e-12 * sw * sxx.max(f64::MIN_POSITIVE) {
            (sxx * sy - sx * sxy) / det
        } else {
            sy / sw
        };
        out.push(fit);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub rho: VaryingParams,
    /// Coefficient of determination for the `v̇`, `v̇_l`, `θ̇` regressions.
    pub r2_per_row: [f64; 3],
    pub residual_norms: [f64; 3],
    pub n_samples: usize,
    pub frac: Option<f64>,
}

impl FitResult {
    pub fn mean_r2(&self) -> f64 {
        self.r2_per_row.iter().sum::<f64>() / 3.0
    }
}

pub fn r_squared(y: &[f64], fitted: &[f64]) -> f64 {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(fitted).map(|(a, b)| (a - b).powi(2)).sum();
    if ss_tot == 0.0 {
        if ss_res == 0.0 { 1.0 } else { f64::NEG_INFINITY }
    } else {
        1.0 - ss_res / ss_tot
    }
}

const REGRESSOR_NAMES: [&str; 4] = ["a", "a_l", "omega", "1"];
const ROW_NAMES: [&str; 3] = ["v", "v_l", "theta"];

struct RowFit {
    coef: [f64; 4],
    r2: f64,
    residual: f64,
}

fn ols(x: &DMatrix<f64>, y: &DVector<f64>, row: usize) -> Result<RowFit, SysidError> {
    // column scaling so the rank test is unit-free
    let scales: Vec<f64> = x.column_iter().map(|c| c.norm().max(f64::MIN_POSITIVE)).collect();
    let mut xs = x.clone();
    for (j, mut c) in xs.column_iter_mut().enumerate() {
        c /= scales[j];
    }
    let svd = xs.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let weak: Vec<usize> = (0..4).filter(|&i| svd.singular_values[i] < 1e-8 * smax).collect();
    if !weak.is_empty() {
        let v_t = svd.v_t.as_ref().expect("v_t computed");
        let mut names: Vec<&str> = Vec::new();
        for &i in &weak {
            for j in 0..4 {
                if v_t[(i, j)].abs() > 0.1 && !names.contains(&REGRESSOR_NAMES[j]) {
                    names.push(REGRESSOR_NAMES[j]);
                }
            }
        }
        return Err(SysidError::IllConditioned { row: ROW_NAMES[row], directions: names.join(", ") });
    }
    let beta = svd.solve(y, 0.0).map_err(|e| SysidError::Parse(e.to_string()))?;
    let coef: [f64; 4] = std::array::from_fn(|j| beta[j] / scales[j]);
    let fitted = x * DVector::from_column_slice(&coef);
    let r2 = r_squared(y.as_slice(), fitted.as_slice());
    Ok(RowFit { coef, r2, residual: (y - fitted).norm() })
}

/// Fits the gains and drifts. With `frac = None` the log is used raw,
/// which recovers noiseless data essentially exactly; otherwise velocity
/// signals, derivatives and regressors are LOWESS-smoothed with `frac`.
pub fn fit_params(log: &TrajectoryLog, frac: Option<f64>) -> Result<FitResult, SysidError> {
    let n = log.rows.len();
    if n < MIN_FIT_ROWS {
        return Err(SysidError::InsufficientData { needed: MIN_FIT_ROWS, got: n });
    }
    let u = invert_commands(log)?;
    let t: Vec<f64> = log.rows.iter().map(|r| r.t).collect();
    let col = |f: fn(&LogRow) -> f64| log.rows.iter().map(f).collect::<Vec<_>>();
    let smooth = |y: Vec<f64>, tt: &[f64]| -> Result<Vec<f64>, SysidError> {
        match frac {
            Some(f) => lowess(tt, &y, f),
            None => Ok(y),
        }
    };

    // per-interval derivatives, aligned with the held command of that interval
    let m = n - 1;
    let t_mid: Vec<f64> = t.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let diff = |y: &[f64]| -> Vec<f64> { (0..m).map(|i| (y[i + 1] - y[i]) / (t[i + 1] - t[i])).collect() };
    let v = smooth(col(|r| r.v), &t)?;
    let vl = smooth(col(|r| r.vl), &t)?;
    let targets = [
        smooth(diff(&v), &t_mid)?,
        smooth(diff(&vl), &t_mid)?,
        smooth(col(|r| r.w)[..m].to_vec(), &t[..m])?,
    ];
    let regressors = [
        smooth(u[..m].iter().map(|c| c.a).collect(), &t[..m])?,
        smooth(u[..m].iter().map(|c| c.al).collect(), &t[..m])?,
        smooth(u[..m].iter().map(|c| c.omega).collect(), &t[..m])?,
    ];
    let x = DMatrix::from_fn(m, 4, |i, j| if j < 3 { regressors[j][i] } else { 1.0 });

    let mut rho = VaryingParams::identity();
    let mut r2 = [0.0; 3];
    let mut res = [0.0; 3];
    for row in 0..3 {
        let fit = ols(&x, &DVector::from_column_slice(&targets[row]), row)?;
        rho.gain[row] = [fit.coef[0], fit.coef[1], fit.coef[2]];
        rho.drift[row] = fit.coef[3];
        r2[row] = fit.r2;
        res[row] = fit.residual;
    }
    Ok(FitResult { rho, r2_per_row: r2, residual_norms: res, n_samples: m, frac })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommandSample {
    pub t: f64,
    pub v_cmd: f64,
    pub vl_cmd: f64,
    pub w_cmd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExcitationSpec {
    /// Peak amplitude per channel (m/s, m/s, rad/s).
    pub amps: [f64; 3],
    /// Hz, shared by the channels.
    pub freqs: [f64; 3],
}

impl Default for ExcitationSpec {
    fn default() -> Self {
        Self { amps: [1.0, 0.3, 1.75], freqs: [0.2, 0.5, 0.9] }
    }
}

/// Sum of sinusoids per channel, each term scaled so the peak never
/// exceeds the channel amplitude. Phases differ per channel.
pub fn generate_excitation(duration: f64, spec: &ExcitationSpec) -> Vec<CommandSample> {
    let steps = (duration / CONTROL_DT).round().max(0.0) as usize;
    let nf = spec.freqs.len() as f64;
    let channel = |c: usize, t: f64| {
        spec.freqs
            .iter()
            .enumerate()
            .map(|(j, f)| {
                let phase = 2.0 * PI * ((c + 1) * (j + 2)) as f64 / 7.0;
                (2.0 * PI * f * t + phase).sin()
            })
            .sum::<f64>()
            * spec.amps[c]
            / nf
    };
    (0..steps)
        .map(|i| {
            let t = i as f64 * CONTROL_DT;
            CommandSample { t, v_cmd: channel(0, t), vl_cmd: channel(1, t), w_cmd: channel(2, t) }
        })
        .collect()
}

/// Runs the commanded schedule through the dynamics with parameters `rho`
/// and records it, adding Gaussian noise of standard deviation `noise` to
/// the measured velocities and yaw rate.
pub fn synthesize_log(rho: &VaryingParams, schedule: &[CommandSample], noise: f64, seed: u64) -> TrajectoryLog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite sigma");
    let mut draw = || if noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
    let mut s = State::default();
    let mut rows = Vec::with_capacity(schedule.len());
    for c in schedule {
        let (v_meas, vl_meas) = (s.v + draw(), s.vl + draw());
        let u = Control::new((c.v_cmd - v_meas) / CONTROL_DT, (c.vl_cmd - vl_meas) / CONTROL_DT, c.w_cmd);
        let w = eval_xdot(&s, &u, rho)[4] + draw();
        rows.push(LogRow {
            t: c.t,
            px: s.px,
            py: s.py,
            theta: s.theta,
            v: v_meas,
            vl: vl_meas,
            w,
            v_cmd: c.v_cmd,
            vl_cmd: c.vl_cmd,
            w_cmd: c.w_cmd,
        });
        s = integrate(&s, &u, rho, CONTROL_DT, 4);
    }
    TrajectoryLog { rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::payloads;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn uniform_t(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 * CONTROL_DT).collect()
    }

    #[test]
    fn inversion_arithmetic() {
        let mut row = LogRow { t: 0.0, px: 0.0, py: 0.0, theta: 0.0, v: 0.4, vl: 0.0, w: 0.0, v_cmd: 0.5, vl_cmd: 0.0, w_cmd: 0.3 };
        let log = TrajectoryLog { rows: vec![row] };
        let u = invert_commands(&log).unwrap();
        assert_abs_diff_eq!(u[0].a, 3.0, epsilon = 1e-12);
        assert_eq!(u[0].al, 0.0);
        assert_eq!(u[0].omega, 0.3);
        row.v_cmd = row.v;
        assert_eq!(invert_commands(&TrajectoryLog { rows: vec![row] }).unwrap()[0].a, 0.0);
    }

    #[test]
    fn inversion_roundtrip() {
        let v = 0.37;
        let a = -4.25;
        let v_cmd = v + a * CONTROL_DT;
        let row = LogRow { t: 0.0, px: 0.0, py: 0.0, theta: 0.0, v, vl: 0.0, w: 0.0, v_cmd, vl_cmd: 0.0, w_cmd: 0.0 };
        let back = invert_commands(&TrajectoryLog { rows: vec![row] }).unwrap()[0].a;
        assert_abs_diff_eq!(back, a, epsilon = 1e-12);
    }

    #[test]
    fn non_increasing_time_is_rejected() {
        let csv = "t,px,py,theta,v,vl,w,v_cmd,vl_cmd,w_cmd\n0,0,0,0,0,0,0,0,0,0\n0,0,0,0,0,0,0,0,0,0\n";
        assert!(matches!(
            TrajectoryLog::read_csv(csv.as_bytes()),
            Err(SysidError::NonIncreasingTime { row: 1 })
        ));
        assert!(matches!(TrajectoryLog::read_csv("t,px\n0,zz\n".as_bytes()), Err(SysidError::Parse(_))));
    }

    #[test]
    fn csv_roundtrip() {
        let log = synthesize_log(&payloads::kg_3_5(), &generate_excitation(2.0, &ExcitationSpec::default()), 0.02, 1);
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,px,py,theta,v,vl,w,v_cmd,vl_cmd,w_cmd\n"));
        assert_eq!(TrajectoryLog::read_csv(buf.as_slice()).unwrap(), log);
    }

    #[test]
    fn lowess_constant_and_line() {
        let t = uniform_t(50);
        let c = vec![2.5; 50];
        for (a, b) in lowess(&t, &c, 0.2).unwrap().iter().zip(&c) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let line: Vec<f64> = t.iter().map(|x| 3.0 * x - 1.0).collect();
        let s = lowess(&t, &line, 0.1).unwrap();
        for (a, b) in s.iter().zip(&line) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
        let again = lowess(&t, &s, 0.1).unwrap();
        for (a, b) in again.iter().zip(&s) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn lowess_reduces_noise() {
        let t = uniform_t(600);
        let clean: Vec<f64> = t.iter().map(|x| (2.0 * PI * 0.2 * x).sin()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let normal = Normal::new(0.0, 0.2).unwrap();
        let noisy: Vec<f64> = clean.iter().map(|c| c + normal.sample(&mut rng)).collect();
        let rms = |a: &[f64]| (a.iter().zip(&clean).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
        let smoothed = lowess(&t, &noisy, 0.1).unwrap();
        assert!(rms(&smoothed) < rms(&noisy));
    }

    #[test]
    fn lowess_needs_five_points() {
        assert!(matches!(lowess(&[0.0, 1.0], &[0.0, 1.0], 0.5), Err(SysidError::InsufficientData { .. })));
    }

    #[test]
    fn r_squared_hand_computed() {
        let y = [1.0, 2.0, 3.0, 4.0, 5.0];
        let f = [1.1, 1.9, 3.2, 3.8, 5.0];
        // ss_tot = 10, ss_res = 0.01 + 0.01 + 0.04 + 0.04 = 0.10
        assert_abs_diff_eq!(r_squared(&y, &f), 0.99, epsilon = 1e-12);
        assert_eq!(r_squared(&y, &y), 1.0);
    }

    #[test]
    fn excitation_bounds_and_rank() {
        let spec = ExcitationSpec::default();
        assert!(generate_excitation(0.0, &spec).is_empty());
        let sched = generate_excitation(20.0, &spec);
        assert_eq!(sched.len(), 600);
        for c in &sched {
            assert!(c.v_cmd.abs() <= 1.0 && c.vl_cmd.abs() <= 0.3 && c.w_cmd.abs() <= 1.75);
        }
        let x = DMatrix::from_fn(sched.len(), 4, |i, j| match j {
            0 => sched[i].v_cmd,
            1 => sched[i].vl_cmd,
            2 => sched[i].w_cmd,
            _ => 1.0,
        });
        assert_eq!(x.rank(1e-8), 4);
    }

    #[test]
    fn noiseless_fit_recovers_parameters() {
        let rho = payloads::kg_3_5();
        let log = synthesize_log(&rho, &generate_excitation(30.0, &ExcitationSpec::default()), 0.0, 0);
        let fit = fit_params(&log, None).unwrap();
        for (est, truth) in fit.rho.to_array().iter().zip(rho.to_array()) {
            assert!((est - truth).abs() <= 1e-6 * truth.abs().max(1e-3), "{est} vs {truth}");
        }
        assert!(fit.r2_per_row.iter().all(|&r| r >= 0.99));
    }

    #[test]
    fn constant_commands_are_ill_conditioned() {
        let sched: Vec<CommandSample> =
            (0..300).map(|i| CommandSample { t: i as f64 * CONTROL_DT, v_cmd: 0.5, vl_cmd: 0.1, w_cmd: 0.2 }).collect();
        let log = synthesize_log(&payloads::kg_0_0(), &sched, 0.0, 0);
        match fit_params(&log, None) {
            Err(SysidError::IllConditioned { directions, .. }) => assert!(directions.contains("omega")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn short_log_is_rejected() {
        let log = synthesize_log(&payloads::kg_0_0(), &generate_excitation(0.5, &ExcitationSpec::default()), 0.0, 0);
        assert!(matches!(fit_params(&log, None), Err(SysidError::InsufficientData { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn noiseless_identifiability(jitter in prop::array::uniform12(-0.2f64..0.2)) {
            let base = payloads::kg_5_9().to_array();
            let mut arr = base;
            for (a, j) in arr.iter_mut().zip(jitter) {
                *a += j * a.abs().max(0.05);
            }
            let rho = VaryingParams::from_array(arr);
            let log = synthesize_log(&rho, &generate_excitation(20.0, &ExcitationSpec::default()), 0.0, 0);
            let fit = fit_params(&log, None).unwrap();
            for (est, truth) in fit.rho.to_array().iter().zip(arr) {
                prop_assert!((est - truth).abs() <= 1e-6 * truth.abs().max(1e-2));
            }
        }
    }
}
