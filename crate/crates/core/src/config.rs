//! Experiment configuration: payloads, courses, controller and simulator
//! settings. One JSON document per experiment.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::LqrWeights;
use crate::dynamics::{Bounds, VaryingParams, CONTROL_DT};
use crate::safety_index::DEFAULT_ETA;
use crate::synthesis::DgaConfig;

/// Shipped default experiment (three courses, the three identified payloads).
pub const DEFAULT_CONFIG_JSON: &str = include_str!("../../../configs/default.json");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid config JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown payload label {0:?}")]
    UnknownPayload(String),
    #[error("malformed config: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Each payload runs with its own gain `k` and a model of its own dynamics.
    #[default]
    Adapted,
    /// The baseline payload's `k` and model are kept for every leg.
    NonAdapted,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Adapted => "adapted",
            Mode::NonAdapted => "non-adapted",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayloadSpec {
    pub label: String,
    pub rho: VaryingParams,
    /// Safety-index gain used for this payload in adapted mode.
    pub k: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

fn default_dwell() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegSpec {
    /// Global frame, m.
    pub obstacle: [f64; 2],
    pub goal: [f64; 2],
    /// Payload carried during this leg.
    pub payload: String,
    #[serde(default = "default_dwell")]
    pub dwell: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CourseSpec {
    pub name: String,
    pub start: Pose,
    pub legs: Vec<LegSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt: f64,
    pub substeps: usize,
    pub goal_tolerance: f64,
    /// Per leg, s.
    pub leg_timeout: f64,
    /// Largest per-step position change used for the discrete-time margin.
    pub delta_d_max: f64,
    /// Scales `delta_d_max` inside the safety index margin only.
    pub safety_factor: f64,
    /// Position error fed to the LQR is clipped to this norm, m.
    pub max_tracking_error: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: CONTROL_DT,
            substeps: 10,
            goal_tolerance: 0.5,
            leg_timeout: 40.0,
            delta_d_max: 0.0492,
            safety_factor: 1.5,
            max_tracking_error: 1.0,
        }
    }
}

fn default_samples() -> usize {
    1000
}

fn default_eta() -> f64 {
    DEFAULT_ETA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub payloads: Vec<PayloadSpec>,
    /// Label of the payload whose index the non-adapted mode keeps.
    pub baseline: String,
    pub courses: Vec<CourseSpec>,
    #[serde(default)]
    pub controller: LqrWeights,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub bounds: Bounds,
    #[serde(default)]
    pub dga: DgaConfig,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_samples")]
    pub feasibility_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
}

impl ExperimentConfig {
    pub fn builtin() -> Self {
        Self::from_json(DEFAULT_CONFIG_JSON).expect("shipped config is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn payload(&self, label: &str) -> Result<&PayloadSpec, ConfigError> {
        self.payloads
            .iter()
            .find(|p| p.label == label)
            .ok_or_else(|| ConfigError::UnknownPayload(label.to_string()))
    }

    pub fn baseline_payload(&self) -> Result<&PayloadSpec, ConfigError> {
        self.payload(&self.baseline)
    }

    pub fn course(&self, name: &str) -> Option<&CourseSpec> {
        self.courses.iter().find(|c| c.name == name)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.baseline_payload()?;
        let bad = |m: String| Err(ConfigError::Malformed(m));
        if !(self.sim.dt > 0.0) || self.sim.substeps == 0 {
            return bad("dt must be positive and substeps nonzero".into());
        }
        if !(self.sim.goal_tolerance > 0.0) {
            return bad("goal tolerance must be positive".into());
        }
        for c in &self.courses {
            if c.legs.is_empty() {
                return bad(format!("course {:?} has no legs", c.name));
            }
            let mut from = [c.start.x, c.start.y];
            for (i, leg) in c.legs.iter().enumerate() {
                self.payload(&leg.payload)?;
                let near = |p: [f64; 2]| (p[0] - leg.obstacle[0]).hypot(p[1] - leg.obstacle[1]) < 1e-9;
                if near(from) || near(leg.goal) {
                    return bad(format!("course {:?} leg {i}: obstacle coincides with start or goal", c.name));
                }
                if leg.dwell < 0.0 {
                    return bad(format!("course {:?} leg {i}: negative dwell", c.name));
                }
                from = leg.goal;
            }
        }
        Ok(())
    }
}
