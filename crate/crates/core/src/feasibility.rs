//! Sampled forward-invariance (FI) and finite-time-convergence (FTC)
//! feasibility of a safety index.

use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{check_fi_feasible, check_ftc_feasible};
use crate::dynamics::{Bounds, State, VaryingParams};
use crate::safety_index::SafetyIndexParam;

/// Uniform samples over the position/velocity boxes and headings in
/// `(−π, π]`, rejecting positions inside the clearance radius.
pub fn sample_states(n: usize, b: &Bounds, seed: u64) -> Vec<State> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let px = rng.gen_range(-b.l..=b.l);
        let py = rng.gen_range(-b.l..=b.l);
        let v = rng.gen_range(-b.v..=b.v);
        let vl = rng.gen_range(-b.vl..=b.vl);
        // negating [−π, π) gives (−π, π]
        let theta = -rng.gen_range(-PI..PI);
        if px * px + py * py >= b.d_min * b.d_min {
            out.push(State::new(px, py, v, vl, theta));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FeasibilityMode {
    Fi,
    Ftc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub state: State,
    pub mode: FeasibilityMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub n_samples: usize,
    pub fi_pass: usize,
    pub ftc_pass: usize,
    pub failures: Vec<FailureRecord>,
    pub seed: u64,
    pub k: f64,
    #[serde(default)]
    pub label: Option<String>,
}

fn percent(pass: usize, n: usize) -> f64 {
    if n == 0 {
        return 100.0;
    }
    (1000.0 * pass as f64 / n as f64).round() / 10.0
}

impl FeasibilityReport {
    /// Rounded to one decimal.
    pub fn fi_percent(&self) -> f64 {
        percent(self.fi_pass, self.n_samples)
    }

    pub fn ftc_percent(&self) -> f64 {
        percent(self.ftc_pass, self.n_samples)
    }

    pub fn fully_feasible(&self) -> bool {
        self.fi_pass == self.n_samples && self.ftc_pass == self.n_samples
    }
}

pub fn run_feasibility(
    p: &SafetyIndexParam,
    rho: &VaryingParams,
    b: &Bounds,
    n: usize,
    seed: u64,
) -> FeasibilityReport {
    let mut report = FeasibilityReport {
        n_samples: n,
        fi_pass: 0,
        ftc_pass: 0,
        failures: Vec::new(),
        seed,
        k: p.k,
        label: None,
    };
    for s in sample_states(n, b, seed) {
        if check_fi_feasible(&s, rho, p, b) {
            report.fi_pass += 1;
        } else {
            report.failures.push(FailureRecord { state: s, mode: FeasibilityMode::Fi });
        }
        if check_ftc_feasible(&s, rho, p, b) {
            report.ftc_pass += 1;
        } else {
            report.failures.push(FailureRecord { state: s, mode: FeasibilityMode::Ftc });
        }
    }
    report
}

/// Side-by-side FI/FTC percentages, one column per report.
pub struct FeasibilityTable<'a>(pub &'a [FeasibilityReport]);

impl fmt::Display for FeasibilityTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let header = |r: &FeasibilityReport| r.label.clone().unwrap_or_else(|| format!("k={:.5}", r.k));
        let width = self.0.iter().map(|r| header(r).len()).max().unwrap_or(0).max(8);
        let n = self.0.first().map_or(0, |r| r.n_samples);
        write!(f, "{:<18}", "")?;
        for r in self.0 {
            write!(f, " {:>width$}", header(r))?;
        }
        writeln!(f)?;
        for (name, get) in [
            (format!("FI ({n} states)"), FeasibilityReport::fi_percent as fn(&FeasibilityReport) -> f64),
            (format!("FTC ({n} states)"), FeasibilityReport::ftc_percent),
        ] {
            write!(f, "{name:<18}")?;
            for r in self.0 {
                write!(f, " {:>width$}", format!("{:.1}%", get(r)))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
