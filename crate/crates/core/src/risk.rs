//! Collision probability between temporally aligned flow tubes.
//!
//! The per-step kernel is `P(|D| <= r)` for `D ~ N(mu, S)`, the difference
//! of two independent Gaussian positions. After whitening by the Cholesky
//! factor of `S` the disc becomes an ellipse `E` and the probability is the
//! standard-normal mass of `E`. That mass is evaluated as a boundary
//! integral: the field `F(p) = (1 - exp(-|p|^2 / 2)) / (2 pi |p|^2) p` is
//! smooth and has divergence equal to the standard normal density, so the
//! flux of `F` through the ellipse boundary is the mass. The integrand is
//! periodic and analytic in the boundary parameter, so the trapezoid rule
//! converges geometrically; the node count is doubled until successive
//! estimates agree.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use thiserror::Error;

use crate::dynamics::{sym_eigenvalues, Gaussian2, PSD_TOL};
use crate::intent::AgentPrediction;
use crate::pft::Pft;

/// Whitened distance beyond which the mass is below 3e-16 and is reported as 0 (or 1).
const TAIL_CUTOFF: f64 = 8.5;
const CONVERGENCE_TOL: f64 = 1e-11;
const MAX_NODES: usize = 1 << 20;
/// Covariances flatter than this are integrated as a one-dimensional spread.
const RANK_ONE_RATIO: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiskError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("tubes are not aligned: dt {0} vs {1}")]
    Alignment(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// `1 - prod(1 - p_k)`
    #[default]
    Independent,
    /// `min(1, sum p_k)`, conservative.
    UnionBound,
}

impl Aggregation {
    pub fn combine(&self, per_step: &[f64]) -> f64 {
        match self {
            Aggregation::Independent => 1.0 - per_step.iter().map(|p| 1.0 - p).product::<f64>(),
            Aggregation::UnionBound => per_step.iter().sum::<f64>().min(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskProfile {
    pub per_step: Vec<f64>,
    pub total: f64,
}

/// Probability that two independent Gaussian positions are within `r`.
pub fn step_collision_prob(a: &Gaussian2, b: &Gaussian2, r: f64) -> Result<f64, RiskError> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(RiskError::InvalidInput(format!("radius must be positive, got {r}")));
    }
    let mu = a.mean - b.mean;
    let cov = a.cov + b.cov;
    disc_probability(&mu, &cov, r)
}

/// `P(|D| <= r)` for `D ~ N(mu, cov)`.
pub fn disc_probability(mu: &Vector2<f64>, cov: &Matrix2<f64>, r: f64) -> Result<f64, RiskError> {
    if !mu.iter().chain(cov.iter()).all(|v| v.is_finite()) {
        return Err(RiskError::InvalidInput("non-finite gaussian".into()));
    }
    let s = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    let (lo, hi) = sym_eigenvalues(cov);
    if lo < -PSD_TOL || (cov[(0, 1)] - cov[(1, 0)]).abs() > PSD_TOL * (1.0 + cov.abs().max()) {
        return Err(RiskError::InvalidInput(format!("covariance sum is not PSD (min eigenvalue {lo})")));
    }
    let dist = mu.norm();
    // Point mass (or numerically so): no uncertainty to integrate.
    let jitter = 1e-12 * (1.0 + hi);
    if hi <= jitter {
        return Ok(if dist <= r { 1.0 } else { 0.0 });
    }
    let sd_max = hi.sqrt();
    if (dist - r) / sd_max > TAIL_CUTOFF {
        return Ok(0.0);
    }
    if (r - dist) / sd_max > TAIL_CUTOFF {
        return Ok(1.0);
    }
    if lo <= RANK_ONE_RATIO * hi {
        return Ok(line_probability(mu, cov, hi, r));
    }
    // S = L L^T, L lower triangular; W = L^{-1}
    let l11 = cov[(0, 0)].sqrt();
    let l21 = s / l11;
    let l22 = (cov[(1, 1)] - l21 * l21).max(lo * 0.5).sqrt();
    let w11 = 1.0 / l11;
    let w21 = -l21 / (l11 * l22);
    let w22 = 1.0 / l22;
    let whiten = |v: Vector2<f64>| Vector2::new(w11 * v.x, w21 * v.x + w22 * v.y);
    // Boundary p(t) = W (r u(t) - mu), p'(t) = r W u'(t); W has positive
    // determinant so orientation stays counter-clockwise.
    let c = whiten(-mu);
    let col0 = whiten(Vector2::new(r, 0.0));
    let col1 = whiten(Vector2::new(0.0, r));
    let integrand = |t: f64| {
        let (st, ct) = t.sin_cos();
        let p = c + col0 * ct + col1 * st;
        let dp = col1 * ct - col0 * st;
        let cross = p.x * dp.y - p.y * dp.x;
        let q = p.norm_squared();
        let g = if q < 1e-300 { 0.5 } else { -(-0.5 * q).exp_m1() / q };
        g * cross / (2.0 * PI)
    };
    // Start fine enough that the node spacing along the whitened boundary is
    // below a quarter of a standard deviation.
    let perimeter = 2.0 * PI * r / lo.sqrt();
    let mut n = ((perimeter / 0.25).ceil() as usize).next_power_of_two().clamp(64, MAX_NODES);
    let h = |n: usize| 2.0 * PI / n as f64;
    let mut sum: f64 = (0..n).map(|k| integrand(k as f64 * h(n))).sum();
    let mut estimate = sum * h(n);
    while n < MAX_NODES {
        let hn = h(2 * n);
        let added: f64 = (0..n).map(|k| integrand((2 * k + 1) as f64 * hn)).sum();
        sum += added;
        n *= 2;
        let next = sum * hn;
        let done = (next - estimate).abs() < CONVERGENCE_TOL;
        estimate = next;
        if done {
            break;
        }
    }
    Ok(estimate.clamp(0.0, 1.0))
}

/// Mass of the chord cut by the disc when all variance lies along one axis.
fn line_probability(mu: &Vector2<f64>, cov: &Matrix2<f64>, var: f64, r: f64) -> f64 {
    let (a, b, d) = (cov[(0, 0)], 0.5 * (cov[(0, 1)] + cov[(1, 0)]), cov[(1, 1)]);
    let u = Vector2::new(b, var - a);
    let v = Vector2::new(var - d, b);
    let axis = if u.norm_squared() >= v.norm_squared() { u } else { v };
    let axis = if axis.norm_squared() > 0.0 {
        axis.normalize()
    } else if a >= d {
        Vector2::x()
    } else {
        Vector2::y()
    };
    let along = mu.dot(&axis);
    let disc = along * along - mu.norm_squared() + r * r;
    if disc < 0.0 {
        return 0.0;
    }
    let sd = var.sqrt();
    let phi = |s: f64| 0.5 * (1.0 + erf(s / (sd * std::f64::consts::SQRT_2)));
    (phi(-along + disc.sqrt()) - phi(-along - disc.sqrt())).clamp(0.0, 1.0)
}

/// Per-step collision probabilities over the common prefix of two tubes.
pub fn pft_collision_risk(
    ego: &Pft,
    agent: &Pft,
    r_ego: f64,
    r_agent: f64,
    aggregation: Aggregation,
) -> Result<RiskProfile, RiskError> {
    if (ego.dt - agent.dt).abs() > 1e-9 {
        return Err(RiskError::Alignment(ego.dt, agent.dt));
    }
    let r = r_ego + r_agent;
    let per_step = ego
        .steps
        .iter()
        .zip(&agent.steps)
        .map(|(a, b)| step_collision_prob(a, b, r))
        .collect::<Result<Vec<_>, _>>()?;
    let total = aggregation.combine(&per_step);
    Ok(RiskProfile { per_step, total })
}

/// Expected tube-pair risk under the agent's maneuver mixture.
pub fn mixture_risk(
    ego: &Pft,
    prediction: &AgentPrediction,
    r_ego: f64,
    r_agent: f64,
    aggregation: Aggregation,
) -> Result<f64, RiskError> {
    let total = prediction.total_weight();
    if (total - 1.0).abs() > 1e-9 {
        return Err(RiskError::InvalidInput(format!("prediction weights sum to {total}")));
    }
    let mut risk = 0.0;
    for c in &prediction.components {
        risk += c.weight * pft_collision_risk(ego, &c.tube, r_ego, r_agent, aggregation)?.total;
    }
    Ok(risk.clamp(0.0, 1.0))
}
