//! Bayesian maneuver recognition against a flow-tube library, and the
//! resulting multi-modal motion prediction for an agent vehicle.

use std::collections::BTreeMap;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::VehicleState;
use crate::pft::{pft_loglik, ManeuverLibrary, Pft, PftError};

/// Mixture components lighter than this are dropped from predictions.
pub const PRUNE_WEIGHT: f64 = 1e-4;
/// Matches a 0.5 m detection noise std.
pub const DEFAULT_OBS_NOISE: f64 = 0.25;

#[derive(Debug, Error)]
pub enum IntentError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Pft(#[from] PftError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManeuverPosterior {
    pub probs: BTreeMap<String, f64>,
}

impl ManeuverPosterior {
    pub fn from_library_order(library: &ManeuverLibrary, probs: &[f64]) -> Self {
        Self {
            probs: library.ids().map(String::from).zip(probs.iter().copied()).collect(),
        }
    }

    /// Probabilities in library order; labels the library lacks are an error.
    pub fn to_library_order(&self, library: &ManeuverLibrary) -> Result<Vec<f64>, IntentError> {
        if let Some(bad) = self.probs.keys().find(|k| library.index_of(k).is_none()) {
            return Err(IntentError::InvalidInput(format!("unknown maneuver {bad:?} in posterior")));
        }
        let v: Vec<f64> = library
            .ids()
            .map(|id| self.probs.get(id).copied().unwrap_or(0.0))
            .collect();
        let total: f64 = v.iter().sum();
        if (total - 1.0).abs() > 1e-9 || v.iter().any(|p| *p < 0.0) {
            return Err(IntentError::InvalidInput(format!("posterior not normalized (sum {total})")));
        }
        Ok(v)
    }

    pub fn get(&self, id: &str) -> f64 {
        self.probs.get(id).copied().unwrap_or(0.0)
    }

    /// Most probable label; ties go to the lexicographically smaller id.
    pub fn argmax(&self) -> Option<&str> {
        let mut best: Option<(&str, f64)> = None;
        for (id, p) in &self.probs {
            if best.is_none_or(|(_, bp)| *p > bp) {
                best = Some((id, *p));
            }
        }
        best.map(|(id, _)| id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub posterior: ManeuverPosterior,
    /// Every hypothesis had zero likelihood; the posterior is the prior.
    pub degenerate: bool,
}

/// Normalized posterior weights `prior_k * exp(loglik_k)` via log-sum-exp.
/// Returns `None` when no hypothesis has positive mass.
pub fn normalize_log_weights(log_w: &[f64]) -> Option<Vec<f64>> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Some(w.into_iter().map(|x| x / total).collect())
}

/// Posterior over library maneuvers given positions observed in the agent's
/// start frame (element `k` observed `(k + 1) * dt` after the start).
pub fn classify_maneuver(
    library: &ManeuverLibrary,
    prefix: &[Vector2<f64>],
    obs_noise: f64,
) -> Result<Classification, IntentError> {
    let probs = classify_probs(library, prefix, obs_noise)?;
    Ok(match probs {
        Some(p) => Classification {
            posterior: ManeuverPosterior::from_library_order(library, &p),
            degenerate: false,
        },
        None => Classification {
            posterior: ManeuverPosterior::from_library_order(library, &library.prior()),
            degenerate: true,
        },
    })
}

/// Library-ordered variant of [`classify_maneuver`]; `None` flags
/// degenerate evidence.
pub fn classify_probs(
    library: &ManeuverLibrary,
    prefix: &[Vector2<f64>],
    obs_noise: f64,
) -> Result<Option<Vec<f64>>, IntentError> {
    classify_with_prior(library, &library.prior(), prefix, obs_noise)
}

/// [`classify_probs`] with an explicit prior in library order.
pub fn classify_with_prior(
    library: &ManeuverLibrary,
    prior: &[f64],
    prefix: &[Vector2<f64>],
    obs_noise: f64,
) -> Result<Option<Vec<f64>>, IntentError> {
    if prior.len() != library.len() {
        return Err(IntentError::InvalidInput("prior length differs from library".into()));
    }
    if prefix.len() > library.shortest_tube() {
        return Err(IntentError::InvalidInput(format!(
            "prefix of {} points exceeds shortest tube ({})",
            prefix.len(),
            library.shortest_tube()
        )));
    }
    let mut log_w = Vec::with_capacity(library.len());
    for (e, p) in library.entries().iter().zip(prior) {
        let ll = pft_loglik(&e.tube, prefix, obs_noise)?;
        log_w.push(if *p > 0.0 { p.ln() + ll } else { f64::NEG_INFINITY });
    }
    Ok(normalize_log_weights(&log_w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionComponent {
    pub maneuver: String,
    pub weight: f64,
    pub tube: Pft,
}

/// World-frame mixture of tubes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentPrediction {
    pub components: Vec<PredictionComponent>,
}

impl AgentPrediction {
    pub fn total_weight(&self) -> f64 {
        self.components.iter().map(|c| c.weight).sum()
    }
}

/// Places every library tube at `anchor`, truncated to `horizon_steps`.
pub fn predict_agent(
    library: &ManeuverLibrary,
    posterior: &ManeuverPosterior,
    anchor: &VehicleState,
    horizon_steps: usize,
) -> Result<AgentPrediction, IntentError> {
    let probs = posterior.to_library_order(library)?;
    predict_agent_window(library, &probs, anchor, 0, horizon_steps, &Matrix2::zeros())
}

/// Prediction over tube steps `[start, start + len)`, with `anchor_cov`
/// added to every step to account for uncertainty in the anchor position.
pub fn predict_agent_window(
    library: &ManeuverLibrary,
    probs: &[f64],
    anchor: &VehicleState,
    start: usize,
    len: usize,
    anchor_cov: &Matrix2<f64>,
) -> Result<AgentPrediction, IntentError> {
    if probs.len() != library.len() {
        return Err(IntentError::InvalidInput("posterior length differs from library".into()));
    }
    if start + len > library.shortest_tube() {
        return Err(IntentError::InvalidInput(format!(
            "prediction window ends at step {} but shortest tube has {}",
            start + len,
            library.shortest_tube()
        )));
    }
    if len == 0 {
        return Err(IntentError::InvalidInput("empty prediction horizon".into()));
    }
    let kept: f64 = probs.iter().filter(|p| **p >= PRUNE_WEIGHT).sum();
    if !(kept > 0.0) {
        return Err(IntentError::InvalidInput("posterior has no component above the prune weight".into()));
    }
    let mut components = Vec::new();
    for (e, p) in library.entries().iter().zip(probs) {
        if *p < PRUNE_WEIGHT {
            continue;
        }
        components.push(PredictionComponent {
            maneuver: e.id.clone(),
            weight: p / kept,
            tube: component_tube(&e.tube, anchor, start, len, anchor_cov)?,
        });
    }
    Ok(AgentPrediction { components })
}

/// One library tube placed at `anchor` over steps `[start, start + len)`.
pub fn component_tube(
    tube: &Pft,
    anchor: &VehicleState,
    start: usize,
    len: usize,
    anchor_cov: &Matrix2<f64>,
) -> Result<Pft, IntentError> {
    let placed = tube.window(start, len)?.anchored(&anchor.pose());
    Ok(if anchor_cov.iter().any(|v| *v != 0.0) {
        placed.inflated(anchor_cov)
    } else {
        placed
    })
}
