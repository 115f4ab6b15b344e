//! Determinant gradient ascent (DGA) on the smallest principal minors.
//!
//! Each iteration finds, for every Gram matrix `Q_i`, the subset `I_i*` of its
//! lowest principal minor and differentiates `det [Q_i]_{I_i*, I_i*}` by
//! central finite differences. The multipliers of block `i` follow their own
//! minor; the shared gain `k` follows the average over the blocks. Both
//! learning rates decay geometrically with the iteration count and every
//! parameter is projected back onto `[0, inf)` after the update.
//!
//! The loop is generic over [`GramFamily`] so the same ascent drives the
//! certificate problem and small test families.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{Bounds, VaryingParams};
use crate::sos::{
    min_principal_minor, minor, CertificateModel, CertificatePoint, GramMatrix, MultiplierVector,
    SignAssignment, Subset, NUM_ASSIGNMENTS, NUM_CONSTRAINTS,
};

/// Parameterized family of eight Gram matrices sharing one gain `k`.
pub trait GramFamily {
    fn gram(&self, block: usize, k: f64, p: &MultiplierVector) -> GramMatrix;
}

impl GramFamily for CertificateModel {
    fn gram(&self, block: usize, k: f64, p: &MultiplierVector) -> GramMatrix {
        CertificateModel::gram(self, SignAssignment::from_index(block), k, p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgaConfig {
    pub lr_theta: f64,
    pub lr_p: f64,
    pub discount: f64,
    /// Minimum principal minor every Gram matrix must reach.
    pub target: f64,
    pub max_iters: usize,
    pub fd_step: f64,
    pub seed: u64,
}

impl Default for DgaConfig {
    fn default() -> Self {
        Self {
            lr_theta: 1e-3,
            lr_p: 1e-3,
            discount: 0.99,
            target: 1e-4,
            max_iters: 2000,
            fd_step: 1e-6,
            seed: 0,
        }
    }
}

/// Starting point used when synthesis is not given one.
pub const HEURISTIC_K: f64 = 0.5;
pub const HEURISTIC_MULTIPLIER: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gradient {
    pub dk: f64,
    pub dp: [[f64; NUM_CONSTRAINTS]; NUM_ASSIGNMENTS],
    /// Lowest minor of each block at the evaluation point.
    pub minors: [f64; NUM_ASSIGNMENTS],
    pub active: [Subset; NUM_ASSIGNMENTS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgaRecord {
    pub iter: usize,
    pub k: f64,
    pub min_minors: [f64; NUM_ASSIGNMENTS],
    pub active: [Subset; NUM_ASSIGNMENTS],
    /// Size of the update applied after this record (0 on the final record).
    pub step_k: f64,
    pub step_p: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DgaTrace {
    pub records: Vec<DgaRecord>,
    pub duration: Duration,
}

impl DgaTrace {
    /// Number of updates applied.
    pub fn iterations(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    /// `iter,k,min_minor_1..8,wall_ms`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,k");
        for i in 1..=NUM_ASSIGNMENTS {
            out.push_str(&format!(",min_minor_{i}"));
        }
        out.push_str(",wall_ms\n");
        for r in &self.records {
            out.push_str(&format!("{},{}", r.iter, r.k));
            for m in r.min_minors {
                out.push_str(&format!(",{m}"));
            }
            out.push_str(&format!(",{}\n", r.wall_ms));
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error(
        "no certificate after {iterations} iterations: best minimum minor {best_min_minor:.3e} \
         (target {target:.1e}) at k = {}", best.k
    )]
    NonConvergence {
        best: Box<CertificatePoint>,
        best_min_minor: f64,
        target: f64,
        iterations: usize,
        trace: Box<DgaTrace>,
    },
}

fn scaled_step(cfg: &DgaConfig, x: f64) -> f64 {
    cfg.fd_step * x.abs().max(1.0)
}

/// Central finite-difference gradient of each block's lowest principal minor.
pub fn fd_gradient<F: GramFamily>(family: &F, cp: &CertificatePoint, cfg: &DgaConfig) -> Gradient {
    let mut dk = 0.0;
    let mut dp = [[0.0; NUM_CONSTRAINTS]; NUM_ASSIGNMENTS];
    let mut minors = [0.0; NUM_ASSIGNMENTS];
    let mut active = [Subset(1); NUM_ASSIGNMENTS];

    for block in 0..NUM_ASSIGNMENTS {
        let p = &cp.multipliers[block];
        let (m, subset) = min_principal_minor(&family.gram(block, cp.k, p));
        minors[block] = m;
        active[block] = subset;
        let objective = |k: f64, p: &MultiplierVector| minor(&family.gram(block, k, p), subset);

        let h = scaled_step(cfg, cp.k);
        dk += (objective(cp.k + h, p) - objective(cp.k - h, p)) / (2.0 * h);

        for n in 0..NUM_CONSTRAINTS {
            let h = scaled_step(cfg, p.0[n]);
            let mut hi = *p;
            let mut lo = *p;
            hi.0[n] += h;
            lo.0[n] -= h;
            dp[block][n] = (objective(cp.k, &hi) - objective(cp.k, &lo)) / (2.0 * h);
        }
    }
    Gradient { dk: dk / NUM_ASSIGNMENTS as f64, dp, minors, active }
}

/// Applies one discounted ascent step and projects onto the nonnegative
/// orthant.
pub fn apply_update(cp: &CertificatePoint, grad: &Gradient, cfg: &DgaConfig, iter: usize) -> CertificatePoint {
    let decay = cfg.discount.powi(iter as i32);
    let lr_k = cfg.lr_theta * decay;
    let lr_p = cfg.lr_p * decay;
    let mut next = *cp;
    next.k = (cp.k + lr_k * grad.dk).max(0.0);
    for (m, g) in next.multipliers.iter_mut().zip(grad.dp.iter()) {
        for (p, d) in m.0.iter_mut().zip(g.iter()) {
            *p = (*p + lr_p * d).max(0.0);
        }
    }
    next
}

pub fn dga_step<F: GramFamily>(family: &F, cp: &CertificatePoint, cfg: &DgaConfig, iter: usize) -> CertificatePoint {
    apply_update(cp, &fd_gradient(family, cp, cfg), cfg, iter)
}

fn step_sizes(a: &CertificatePoint, b: &CertificatePoint) -> (f64, f64) {
    let dp = a
        .multipliers
        .iter()
        .zip(b.multipliers.iter())
        .flat_map(|(x, y)| x.0.iter().zip(y.0.iter()).map(|(p, q)| (p - q).powi(2)))
        .sum::<f64>()
        .sqrt();
    ((a.k - b.k).abs(), dp)
}

/// Ascends from `init` until every block's lowest minor reaches
/// `cfg.target` or `cfg.max_iters` updates have been applied.
pub fn run_dga<F: GramFamily>(
    family: &F,
    init: CertificatePoint,
    cfg: &DgaConfig,
) -> Result<(CertificatePoint, DgaTrace), SynthesisError> {
    let start = Instant::now();
    let mut trace = DgaTrace::default();
    let mut cp = init;
    let mut best = (init, f64::NEG_INFINITY);

    for iter in 0..=cfg.max_iters {
        let grad = fd_gradient(family, &cp, cfg);
        let lowest = grad.minors.iter().copied().fold(f64::INFINITY, f64::min);
        if lowest > best.1 {
            best = (cp, lowest);
        }
        let mut record = DgaRecord {
            iter,
            k: cp.k,
            min_minors: grad.minors,
            active: grad.active,
            step_k: 0.0,
            step_p: 0.0,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        if lowest >= cfg.target {
            trace.records.push(record);
            trace.duration = start.elapsed();
            return Ok((cp, trace));
        }
        if iter == cfg.max_iters {
            trace.records.push(record);
            break;
        }
        let next = apply_update(&cp, &grad, cfg, iter);
        (record.step_k, record.step_p) = step_sizes(&next, &cp);
        trace.records.push(record);
        cp = next;
    }

    trace.duration = start.elapsed();
    log::warn!(
        "DGA stopped after {} iterations with minimum minor {:.3e}",
        cfg.max_iters,
        best.1
    );
    Err(SynthesisError::NonConvergence {
        best: Box::new(best.0),
        best_min_minor: best.1,
        target: cfg.target,
        iterations: cfg.max_iters,
        trace: Box::new(trace),
    })
}

/// Re-certifies a point for new dynamics parameters by local ascent from
/// the previous certificate. The learning-rate discount restarts at zero.
pub fn adapt(
    cp_prev: &CertificatePoint,
    rho_new: &VaryingParams,
    bounds: &Bounds,
    cfg: &DgaConfig,
) -> Result<(CertificatePoint, DgaTrace), SynthesisError> {
    run_dga(&CertificateModel::new(*rho_new, *bounds), *cp_prev, cfg)
}

pub fn heuristic_start() -> CertificatePoint {
    CertificatePoint::uniform(HEURISTIC_K, HEURISTIC_MULTIPLIER)
}

/// Full synthesis: the same ascent started from `init` or, without one,
/// from [`heuristic_start`].
pub fn synthesize(
    rho: &VaryingParams,
    bounds: &Bounds,
    cfg: &DgaConfig,
    init: Option<CertificatePoint>,
) -> Result<(CertificatePoint, DgaTrace), SynthesisError> {
    run_dga(&CertificateModel::new(*rho, *bounds), init.unwrap_or_else(heuristic_start), cfg)
}
