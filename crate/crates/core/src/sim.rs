//! Obstacle-course simulation: LQR nominal control filtered by the safety
//! QP, one obstacle per leg, payload (and in adapted mode, safety index)
//! switched at each goal.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, CourseSpec, ExperimentConfig, Mode};
use crate::controller::{safe_filter, GoalSpec, LqrController, QpError};
use crate::dynamics::{integrate, Bounds, State, VaryingParams};
use crate::safety_index::SafetyIndexParam;

/// Additive margin that pads the unsafe radius by `delta_d_max`:
/// `d_min² + σ = (d_min + Δ)²`.
pub fn sigma_dt(delta_d_max: f64, d_min: f64) -> f64 {
    delta_d_max * delta_d_max + 2.0 * delta_d_max * d_min
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// `d < d_min`.
    Collision,
    /// `d < d_min + Δd_max`.
    PaddedViolation,
    /// No admissible control reaches `φ̇ ≤ −η`; the minimizing vertex was applied.
    QpInfeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub leg: usize,
    pub kind: EventKind,
    pub d: f64,
    pub phi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub t: f64,
    pub leg: usize,
    /// Global position.
    pub x: f64,
    pub y: f64,
    /// Position relative to the active obstacle.
    pub px: f64,
    pub py: f64,
    pub v: f64,
    pub vl: f64,
    pub theta: f64,
    pub d: f64,
    pub a_nom: f64,
    pub al_nom: f64,
    pub w_nom: f64,
    pub a: f64,
    pub al: f64,
    pub w: f64,
    pub phi: f64,
    /// `φ̇` predicted by the controller's model for the applied control.
    pub phi_dot: f64,
    pub filter_active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegSummary {
    pub leg: usize,
    pub payload: String,
    pub k: f64,
    pub min_distance: f64,
    pub goal_reached: bool,
    pub collision: bool,
    pub padded_violation: bool,
    pub qp_infeasible_steps: usize,
}

impl LegSummary {
    pub fn failed(&self) -> bool {
        self.collision || self.padded_violation || self.qp_infeasible_steps > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub course: String,
    pub mode: Mode,
    pub rows: Vec<StepRow>,
    pub legs: Vec<LegSummary>,
    pub events: Vec<Event>,
    pub obstacles: Vec<[f64; 2]>,
    pub d_min: f64,
    pub padded_radius: f64,
}

impl RunRecord {
    pub fn has_safety_failure(&self) -> bool {
        !self.events.is_empty()
    }

    pub fn collisions(&self) -> usize {
        self.events.iter().filter(|e| e.kind == EventKind::Collision).count()
    }

    /// Percentage of legs without a failure event.
    pub fn success_percent(&self) -> f64 {
        if self.legs.is_empty() {
            return 100.0;
        }
        100.0 * self.legs.iter().filter(|l| !l.failed()).count() as f64 / self.legs.len() as f64
    }
}

/// Largest change of obstacle distance between consecutive control steps
/// of the same leg.
pub fn measure_delta_d_max(rec: &RunRecord) -> f64 {
    rec.rows
        .windows(2)
        .filter(|w| w[0].leg == w[1].leg)
        .map(|w| (w[1].d - w[0].d).abs())
        .fold(0.0, f64::max)
}

/// Plant and controller-model parameters and the safety index for one leg.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LegSetup {
    pub plant: VaryingParams,
    pub model: VaryingParams,
    pub index: SafetyIndexParam,
}

pub fn leg_setup(cfg: &ExperimentConfig, payload: &str, mode: Mode) -> Result<LegSetup, ConfigError> {
    let carried = cfg.payload(payload)?;
    let believed = match mode {
        Mode::Adapted => carried,
        Mode::NonAdapted => cfg.baseline_payload()?,
    };
    let sigma = sigma_dt(cfg.sim.delta_d_max * cfg.sim.safety_factor, cfg.bounds.d_min);
    let mut index = SafetyIndexParam::new(believed.k).with_sigma(sigma).with_d_min(cfg.bounds.d_min);
    index.eta = cfg.eta;
    Ok(LegSetup { plant: carried.rho, model: believed.rho, index })
}

/// Clips the goal so the position error seen by the LQR is at most `max_err`.
fn clipped_goal(s: &State, goal: &GoalSpec, max_err: f64) -> GoalSpec {
    let (ex, ey) = (goal.x_goal - s.px, goal.y_goal - s.py);
    let n = ex.hypot(ey);
    if n <= max_err || max_err <= 0.0 {
        return *goal;
    }
    GoalSpec { x_goal: s.px + ex * max_err / n, y_goal: s.py + ey * max_err / n, ..*goal }
}

/// The robot's own velocity limiter: body velocities saturate at the
/// domain bounds.
fn limit_speed(s: State, b: &Bounds) -> State {
    State { v: s.v.clamp(-b.v, b.v), vl: s.vl.clamp(-b.vl, b.vl), ..s }
}

struct Tracker {
    padded: f64,
    d_min: f64,
    in_collision: bool,
    in_padded: bool,
    in_infeasible: bool,
}

impl Tracker {
    fn observe(&mut self, t: f64, leg: usize, d: f64, phi: f64, infeasible: bool, events: &mut Vec<Event>, sum: &mut LegSummary) {
        let mut edge = |flag: &mut bool, now: bool, kind| {
            if now && !*flag {
                events.push(Event { t, leg, kind, d, phi });
            }
            *flag = now;
        };
        edge(&mut self.in_collision, d < self.d_min, EventKind::Collision);
        edge(&mut self.in_padded, d < self.padded, EventKind::PaddedViolation);
        edge(&mut self.in_infeasible, infeasible, EventKind::QpInfeasible);
        sum.min_distance = sum.min_distance.min(d);
        sum.collision |= d < self.d_min;
        sum.padded_violation |= d < self.padded;
        sum.qp_infeasible_steps += infeasible as usize;
    }
}

pub fn run_course(cfg: &ExperimentConfig, course: &CourseSpec, mode: Mode) -> Result<RunRecord, ConfigError> {
    let b: Bounds = cfg.bounds;
    let sim = cfg.sim;
    let padded = b.d_min + sim.delta_d_max;
    let mut rec = RunRecord {
        course: course.name.clone(),
        mode,
        rows: Vec::new(),
        legs: Vec::new(),
        events: Vec::new(),
        obstacles: course.legs.iter().map(|l| l.obstacle).collect(),
        d_min: b.d_min,
        padded_radius: padded,
    };
    let mut tracker = Tracker { padded, d_min: b.d_min, in_collision: false, in_padded: false, in_infeasible: false };
    let mut lqr = LqrController::new(cfg.controller);
    // global frame
    let mut s = State::new(course.start.x, course.start.y, 0.0, 0.0, course.start.theta);
    let mut t = 0.0;

    for (i, leg) in course.legs.iter().enumerate() {
        let setup = leg_setup(cfg, &leg.payload, mode)?;
        let [ox, oy] = leg.obstacle;
        let goal = GoalSpec::new(leg.goal[0] - ox, leg.goal[1] - oy, sim.goal_tolerance);
        let mut summary = LegSummary {
            leg: i,
            payload: leg.payload.clone(),
            k: setup.index.k,
            min_distance: f64::INFINITY,
            goal_reached: false,
            collision: false,
            padded_violation: false,
            qp_infeasible_steps: 0,
        };
        let max_steps = (sim.leg_timeout / sim.dt).ceil() as usize;
        let dwell_steps = (leg.dwell / sim.dt).round() as usize;
        let mut dwell_left: Option<usize> = None;

        for step in 0..=max_steps + dwell_steps {
            let rel = State { px: s.px - ox, py: s.py - oy, ..s };
            let d = rel.distance();
            if dwell_left.is_none() && goal.reached(&rel) {
                summary.goal_reached = true;
                dwell_left = Some(dwell_steps);
            }
            if dwell_left == Some(0) {
                break;
            }
            if dwell_left.is_none() && step >= max_steps {
                break;
            }

            let u_nom = lqr.control(&rel, &clipped_goal(&rel, &goal, sim.max_tracking_error), &b);
            let (u, phi, phi_dot, active, infeasible) = match safe_filter(&rel, u_nom, &setup.model, &setup.index, &b) {
                Ok(out) => (out.u, out.phi, out.phi_dot, out.active, false),
                Err(QpError::Infeasible { min_phi_dot, u_star }) => {
                    let phi = crate::safety_index::phi(&rel, &setup.index).unwrap_or(f64::NAN);
                    (u_star, phi, min_phi_dot, true, true)
                }
                Err(QpError::Degenerate(_)) => (b.clamp(u_nom), f64::NAN, f64::NAN, false, false),
            };
            tracker.observe(t, i, d, phi, infeasible, &mut rec.events, &mut summary);
            rec.rows.push(StepRow {
                t,
                leg: i,
                x: s.px,
                y: s.py,
                px: rel.px,
                py: rel.py,
                v: s.v,
                vl: s.vl,
                theta: s.theta,
                d,
                a_nom: u_nom.a,
                al_nom: u_nom.al,
                w_nom: u_nom.omega,
                a: u.a,
                al: u.al,
                w: u.omega,
                phi,
                phi_dot,
                filter_active: active,
            });

            s = limit_speed(integrate(&s, &u, &setup.plant, sim.dt, sim.substeps), &b);
            t += sim.dt;
            if let Some(n) = dwell_left.as_mut() {
                *n -= 1;
            }
        }
        if !summary.goal_reached {
            log::warn!("{}: leg {i} timed out", course.name);
        }
        rec.legs.push(summary);
    }
    Ok(rec)
}

pub fn run_all(cfg: &ExperimentConfig, mode: Mode) -> Result<Vec<RunRecord>, ConfigError> {
    cfg.courses.iter().map(|c| run_course(cfg, c, mode)).collect()
}

const TRAJECTORY_HEADER: [&str; 19] = [
    "t", "leg", "x", "y", "px", "py", "v", "vl", "theta", "d", "a_nom", "al_nom", "w_nom", "a", "al", "w", "phi",
    "phi_dot", "filter_active",
];

pub fn write_trajectory_csv<W: io::Write>(rec: &RunRecord, w: W) -> csv::Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wtr.write_record(TRAJECTORY_HEADER)?;
    for r in &rec.rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_trajectory_csv<R: io::Read>(r: R) -> csv::Result<Vec<StepRow>> {
    csv::Reader::from_reader(r).deserialize().collect()
}

/// Table of per-leg outcomes, one block per run.
pub fn summary_table(records: &[RunRecord]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:<12} {:>3} {:>7} {:>8} {:>6} {:>9} {:>7} {:>7} {:>7}",
        "course", "mode", "leg", "payload", "k", "goal", "min_d", "collide", "padded", "qp_inf"
    );
    for rec in records {
        for l in &rec.legs {
            let _ = writeln!(
                out,
                "{:<10} {:<12} {:>3} {:>7} {:>8.5} {:>6} {:>9.4} {:>7} {:>7} {:>7}",
                rec.course,
                rec.mode.to_string(),
                l.leg + 1,
                l.payload,
                l.k,
                if l.goal_reached { "yes" } else { "no" },
                l.min_distance,
                l.collision as u8,
                l.padded_violation as u8,
                l.qp_infeasible_steps
            );
        }
        let _ = writeln!(out, "{:<10} {:<12} success {:.0}%", rec.course, rec.mode.to_string(), rec.success_percent());
    }
    out
}

/// Writes `trajectory.csv`, `events.json`, `summary.json`, `phase.csv`
/// (φ vs φ̇) and `path.csv` (x-y path plus sampled unsafe and padded circles).
pub fn emit_outputs(rec: &RunRecord, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    write_trajectory_csv(rec, fs::File::create(dir.join("trajectory.csv"))?).map_err(io::Error::other)?;
    fs::write(dir.join("events.json"), serde_json::to_string_pretty(&rec.events)?)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&rec.legs)?)?;
    fs::write(dir.join("summary.txt"), summary_table(std::slice::from_ref(rec)))?;

    let mut phase = String::from("t,leg,phi,phi_dot\n");
    for r in &rec.rows {
        let _ = writeln!(phase, "{},{},{},{}", r.t, r.leg, r.phi, r.phi_dot);
    }
    fs::write(dir.join("phase.csv"), phase)?;

    let mut path = String::from("kind,leg,x,y\n");
    for r in &rec.rows {
        let _ = writeln!(path, "path,{},{},{}", r.leg, r.x, r.y);
    }
    for (leg, [ox, oy]) in rec.obstacles.iter().enumerate() {
        for (kind, radius) in [("unsafe", rec.d_min), ("padded", rec.padded_radius)] {
            for j in 0..=64 {
                let a = std::f64::consts::TAU * j as f64 / 64.0;
                let _ = writeln!(path, "{kind},{leg},{},{}", ox + radius * a.cos(), oy + radius * a.sin());
            }
        }
    }
    fs::write(dir.join("path.csv"), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{LegSpec, Pose};
    use approx::assert_abs_diff_eq;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig::builtin()
    }

    #[test]
    fn sigma_dt_values() {
        assert_abs_diff_eq!(sigma_dt(0.375, 1.0), 0.890625, epsilon = 1e-15);
        assert_eq!(sigma_dt(0.0, 1.0), 0.0);
        for (dd, dm) in [(0.0492, 1.0), (0.3, 0.5), (1.2, 2.0)] {
            assert_abs_diff_eq!(dm * dm + sigma_dt(dd, dm), (dm + dd) * (dm + dd), epsilon = 1e-12);
        }
    }

    fn single_leg(obstacle: [f64; 2], goal: [f64; 2]) -> CourseSpec {
        CourseSpec {
            name: "t".into(),
            start: Pose { x: 0.0, y: 0.0, theta: 0.0 },
            legs: vec![LegSpec { obstacle, goal, payload: "0.0".into(), dwell: 1.0 }],
        }
    }

    #[test]
    fn far_obstacle_leaves_nominal_untouched() {
        let c = cfg();
        let rec = run_course(&c, &single_leg([0.0, 50.0], [3.0, 0.0]), Mode::Adapted).unwrap();
        assert!(!rec.rows.is_empty());
        for r in &rec.rows {
            assert!(!r.filter_active);
            assert_eq!((r.a, r.al, r.w), (r.a_nom, r.al_nom, r.w_nom));
        }
        assert!(rec.legs[0].goal_reached);
        assert!(rec.events.is_empty());
    }

    #[test]
    fn goal_progress_without_filter() {
        let c = cfg();
        let rec = run_course(&c, &single_leg([0.0, 50.0], [4.0, 1.0]), Mode::Adapted).unwrap();
        let dist: Vec<f64> = rec.rows.iter().map(|r| (r.x - 4.0).hypot(r.y - 1.0)).collect();
        // eventually decreasing: the tail is below the start and below its first half
        let n = dist.len();
        assert!(dist[n - 1] < dist[0]);
        assert!(dist[n - 1] <= c.sim.goal_tolerance + 1e-9);
    }

    #[test]
    fn runs_are_deterministic() {
        let c = cfg();
        let a = run_course(&c, &c.courses[0], Mode::NonAdapted).unwrap();
        let b = run_course(&c, &c.courses[0], Mode::NonAdapted).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn per_step_motion_is_bounded() {
        let c = cfg();
        for course in &c.courses {
            let rec = run_course(&c, course, Mode::Adapted).unwrap();
            for r in &rec.rows {
                assert!(r.v.abs() <= c.bounds.v + 1e-6 && r.vl.abs() <= c.bounds.vl + 1e-6, "{r:?}");
            }
            let bound = (c.bounds.v.powi(2) + c.bounds.vl.powi(2)).sqrt() * c.sim.dt;
            assert!(measure_delta_d_max(&rec) <= bound + 1e-3);
        }
    }

    #[test]
    fn delta_d_of_stationary_and_radial_runs() {
        let mut rec = run_course(&cfg(), &single_leg([0.0, 50.0], [0.0, 0.0]), Mode::Adapted).unwrap();
        rec.rows = (0..10).map(|i| StepRow { t: i as f64 / 30.0, ..rec.rows[0] }).collect();
        assert_eq!(measure_delta_d_max(&rec), 0.0);
        let speed = 0.9;
        let dt = 1.0 / 30.0;
        rec.rows = (0..10)
            .map(|i| StepRow { d: 2.0 + speed * dt * i as f64, t: dt * i as f64, ..rec.rows[0] })
            .collect();
        assert_abs_diff_eq!(measure_delta_d_max(&rec), speed * dt, epsilon = 1e-12);
    }

    #[test]
    fn min_distance_matches_rows() {
        let c = cfg();
        let rec = run_course(&c, &c.courses[1], Mode::Adapted).unwrap();
        for l in &rec.legs {
            let m = rec.rows.iter().filter(|r| r.leg == l.leg).map(|r| r.d).fold(f64::INFINITY, f64::min);
            assert_eq!(l.min_distance, m);
        }
    }

    #[test]
    fn success_percentage_counts_clean_legs() {
        let c = cfg();
        let mut rec = run_course(&c, &c.courses[0], Mode::Adapted).unwrap();
        for l in rec.legs.iter_mut() {
            l.collision = false;
            l.padded_violation = false;
            l.qp_infeasible_steps = 0;
        }
        rec.legs[1].padded_violation = true;
        assert_abs_diff_eq!(rec.success_percent(), 200.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_record_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let rec = RunRecord {
            course: "empty".into(),
            mode: Mode::Adapted,
            rows: vec![],
            legs: vec![],
            events: vec![],
            obstacles: vec![],
            d_min: 1.0,
            padded_radius: 1.05,
        };
        emit_outputs(&rec, dir.path()).unwrap();
        let csv = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
        assert_eq!(csv.trim_end(), TRAJECTORY_HEADER.join(","));
        assert_eq!(fs::read_to_string(dir.path().join("events.json")).unwrap().trim(), "[]");
    }

    #[test]
    fn trajectory_csv_roundtrip_is_exact() {
        let c = cfg();
        let rec = run_course(&c, &c.courses[2], Mode::NonAdapted).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&rec, &mut buf).unwrap();
        let back = read_trajectory_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), rec.rows.len());
        for (a, b) in back.iter().zip(&rec.rows) {
            assert_eq!(a.x.to_bits(), b.x.to_bits());
            assert_eq!(a.phi_dot.to_bits(), b.phi_dot.to_bits());
            assert_eq!(a, b);
        }
    }
}
