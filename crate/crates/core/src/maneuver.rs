//! Ego motion model generator: micro / maneuver / macro actions, nominal
//! controls from reference tracking, and ego tubes by Monte Carlo
//! propagation of control noise.

use std::collections::BTreeMap;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    fit_gaussian, wrap_angle, Control, DynamicsError, NoiseModel, Pose, VehicleModel, VehicleState,
};
use crate::pft::{Pft, TubeFrame, COV_REGULARIZATION};

/// Fewer samples than this give covariance estimates too noisy for risk checks.
pub const MIN_TUBE_SAMPLES: usize = 50;
pub const DEFAULT_TUBE_SAMPLES: usize = 500;

#[derive(Debug, Error)]
pub enum ManeuverError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("maneuver infeasible: {0}")]
    Infeasible(String),
    #[error("unknown maneuver {0:?}")]
    MissingManeuver(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MicroKind {
    Accelerate,
    Decelerate,
    Maintain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicroAction {
    pub kind: MicroKind,
    /// m/s^2, never negative; the kind carries the sign.
    pub magnitude: f64,
    pub duration_steps: usize,
}

impl MicroAction {
    pub fn new(kind: MicroKind, magnitude: f64, duration_steps: usize) -> Result<Self, ManeuverError> {
        if !(magnitude >= 0.0) || (kind == MicroKind::Maintain && magnitude != 0.0) {
            return Err(ManeuverError::InvalidInput(format!("bad magnitude {magnitude} for {kind:?}")));
        }
        Ok(Self {
            kind,
            magnitude,
            duration_steps,
        })
    }

    pub fn signed_accel(&self) -> f64 {
        match self.kind {
            MicroKind::Accelerate => self.magnitude,
            MicroKind::Decelerate => -self.magnitude,
            MicroKind::Maintain => 0.0,
        }
    }
}

/// Parameters of one catalog entry, independent of where it is executed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManeuverTemplate {
    pub id: String,
    /// Signed lane-change distance, positive to the left.
    #[serde(default)]
    pub lateral_offset: f64,
    pub micro_sequence: Vec<MicroAction>,
}

impl ManeuverTemplate {
    pub fn simple(id: &str, kind: MicroKind, magnitude: f64, lateral_offset: f64, duration_steps: usize) -> Self {
        Self {
            id: id.into(),
            lateral_offset,
            micro_sequence: vec![MicroAction {
                kind,
                magnitude,
                duration_steps,
            }],
        }
    }

    pub fn duration_steps(&self) -> usize {
        self.micro_sequence.iter().map(|m| m.duration_steps).sum()
    }

    /// Speed reached after the micro sequence, clamped to `[0, speed_limit]`.
    pub fn target_speed(&self, v0: f64, dt: f64, speed_limit: f64) -> f64 {
        let dv: f64 = self
            .micro_sequence
            .iter()
            .map(|m| m.signed_accel() * m.duration_steps as f64 * dt)
            .sum();
        (v0 + dv).clamp(0.0, speed_limit.max(0.0))
    }

    pub fn validate(&self) -> Result<(), ManeuverError> {
        if self.id.is_empty() {
            return Err(ManeuverError::InvalidInput("maneuver id is empty".into()));
        }
        if self.micro_sequence.is_empty() {
            return Err(ManeuverError::InvalidInput(format!("{}: empty micro sequence", self.id)));
        }
        for m in &self.micro_sequence {
            MicroAction::new(m.kind, m.magnitude, m.duration_steps)?;
        }
        if self.duration_steps() < 2 {
            return Err(ManeuverError::InvalidInput(format!("{}: needs at least 2 steps", self.id)));
        }
        if !self.lateral_offset.is_finite() {
            return Err(ManeuverError::InvalidInput(format!("{}: non-finite offset", self.id)));
        }
        Ok(())
    }
}

/// The catalog offered at every decision epoch unless a scenario overrides it.
pub fn default_catalog(duration_steps: usize) -> Vec<ManeuverTemplate> {
    vec![
        ManeuverTemplate::simple("accelerate", MicroKind::Accelerate, 1.5, 0.0, duration_steps),
        ManeuverTemplate::simple("decelerate", MicroKind::Decelerate, 1.5, 0.0, duration_steps),
        ManeuverTemplate::simple("maintain", MicroKind::Maintain, 0.0, 0.0, duration_steps),
        ManeuverTemplate::simple("merge_left", MicroKind::Maintain, 0.0, 3.5, duration_steps),
        ManeuverTemplate::simple("merge_right", MicroKind::Maintain, 0.0, -3.5, duration_steps),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManeuverAction {
    pub id: String,
    pub micro_sequence: Vec<MicroAction>,
    pub lateral_offset: f64,
    pub duration_steps: usize,
    pub nominal_controls: Vec<Control>,
    /// World-frame tube anchored at the execution start.
    pub tube: Pft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroAction {
    pub id: String,
    pub maneuver_sequence: Vec<String>,
}

/// Resolves a macro into its concrete maneuvers, in order.
pub fn expand_macro<T: Clone>(macro_action: &MacroAction, catalog: &BTreeMap<String, T>) -> Result<Vec<T>, ManeuverError> {
    if macro_action.maneuver_sequence.is_empty() {
        return Err(ManeuverError::InvalidInput(format!("macro {} is empty", macro_action.id)));
    }
    macro_action
        .maneuver_sequence
        .iter()
        .map(|id| {
            catalog
                .get(id)
                .cloned()
                .ok_or_else(|| ManeuverError::MissingManeuver(id.clone()))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSpec {
    pub lateral_offset: f64,
    pub target_speed: f64,
    pub duration_steps: usize,
    /// Steps over which the lateral shift and speed ramp happen; the rest is
    /// steady. Defaults to the whole duration.
    pub transition_steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub curvature: f64,
}

impl ReferencePoint {
    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }
}

/// Reference in the initial vehicle frame.
pub fn make_reference(spec: &ReferenceSpec, initial: &VehicleState, dt: f64) -> Result<Vec<ReferencePoint>, ManeuverError> {
    make_reference_along(spec, initial, initial.heading, dt)
}

/// Quintic lateral shift (zero lateral velocity and acceleration at both
/// ends) over a linear longitudinal speed ramp, laid out along
/// `axis_heading` from the initial position. Returns `duration_steps + 1`
/// points.
pub fn make_reference_along(
    spec: &ReferenceSpec,
    initial: &VehicleState,
    axis_heading: f64,
    dt: f64,
) -> Result<Vec<ReferencePoint>, ManeuverError> {
    if spec.duration_steps < 2 {
        return Err(ManeuverError::InvalidInput("reference needs at least 2 steps".into()));
    }
    if !(spec.target_speed >= 0.0) || !spec.target_speed.is_finite() {
        return Err(ManeuverError::InvalidInput(format!("target speed {} must be >= 0", spec.target_speed)));
    }
    if !(dt > 0.0) {
        return Err(ManeuverError::InvalidInput("dt must be positive".into()));
    }
    initial.validate()?;
    let transition = spec.transition_steps.unwrap_or(spec.duration_steps).clamp(1, spec.duration_steps);
    let tt = transition as f64 * dt;
    let (v0, v1, off) = (initial.speed, spec.target_speed, spec.lateral_offset);
    let a_lon = (v1 - v0) / tt;
    let frame = Pose {
        x: initial.x,
        y: initial.y,
        heading: axis_heading,
    };
    let points = (0..=spec.duration_steps)
        .map(|k| {
            let t = k as f64 * dt;
            let tau = t.min(tt);
            let s = tau / tt;
            let ramping = t < tt;
            let (s2, s3) = (s * s, s * s * s);
            let d = off * (10.0 * s3 - 15.0 * s3 * s + 6.0 * s3 * s2);
            let (dd, ddd) = if ramping {
                (
                    off * (30.0 * s2 - 60.0 * s3 + 30.0 * s2 * s2) / tt,
                    off * (60.0 * s - 180.0 * s2 + 120.0 * s3) / (tt * tt),
                )
            } else {
                (0.0, 0.0)
            };
            let lon = v0 * tau + 0.5 * a_lon * tau * tau + v1 * (t - tau);
            let v_lon = if ramping { v0 + a_lon * tau } else { v1 };
            let acc_lon = if ramping { a_lon } else { 0.0 };
            let speed = v_lon.hypot(dd);
            let curvature = if speed > 1e-9 {
                (v_lon * ddd - dd * acc_lon) / speed.powi(3)
            } else {
                0.0
            };
            let p = frame.to_world(&Vector2::new(lon, d));
            ReferencePoint {
                t,
                x: p.x,
                y: p.y,
                heading: wrap_angle(axis_heading + dd.atan2(v_lon)),
                speed,
                curvature,
            }
        })
        .collect();
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingGains {
    /// 1/s applied to the speed error.
    pub speed: f64,
    /// 1/s applied to the predicted lateral error through the heading target.
    pub lateral: f64,
}

impl Default for TrackingGains {
    fn default() -> Self {
        Self {
            speed: 5.0,
            lateral: 2.0,
        }
    }
}

/// Saturating feedback tracking of a reference on the nominal model. The
/// returned controls, rolled out from `initial`, reproduce the closed-loop
/// trajectory exactly.
pub fn track_reference(
    reference: &[ReferencePoint],
    initial: &VehicleState,
    model: &VehicleModel,
    gains: &TrackingGains,
    dt: f64,
) -> Result<Vec<Control>, ManeuverError> {
    if reference.len() < 2 {
        return Err(ManeuverError::InvalidInput("reference needs at least 2 points".into()));
    }
    initial.validate()?;
    check_envelope(reference, model, dt)?;
    let mut s = *initial;
    let mut controls = Vec::with_capacity(reference.len() - 1);
    for w in reference.windows(2) {
        let c = tracking_control(&s, &w[0], &w[1], model, gains, dt);
        s = model.step_unchecked(&s, &c, dt);
        controls.push(c);
    }
    Ok(controls)
}

/// One step of the tracking law, steering toward `next` from state `s`.
pub fn tracking_control(
    s: &VehicleState,
    current: &ReferencePoint,
    next: &ReferencePoint,
    model: &VehicleModel,
    gains: &TrackingGains,
    dt: f64,
) -> Control {
    let a_ff = (next.speed - current.speed) / dt;
    let accel = a_ff + gains.speed * (current.speed - s.speed);
    // Euler moves position along the current heading, so steering only
    // affects where the vehicle goes from the next step on.
    let (sin, cos) = s.heading.sin_cos();
    let predicted = Vector2::new(s.x + s.speed * cos * dt, s.y + s.speed * sin * dt);
    let normal = Vector2::new(-next.heading.sin(), next.heading.cos());
    let lateral_err = (predicted - next.position()).dot(&normal);
    let v = s.speed.max(1.0);
    let desired = next.heading + next.curvature * next.speed * dt - (gains.lateral * lateral_err / v).atan();
    let steer = if s.speed > 1e-6 {
        (model.wheelbase * wrap_angle(desired - s.heading) / (s.speed * dt)).atan()
    } else {
        0.0
    };
    model.limits.clamp(Control { accel, steer })
}

/// Rejects references whose sustained acceleration or curvature the
/// vehicle cannot produce.
fn check_envelope(reference: &[ReferencePoint], model: &VehicleModel, dt: f64) -> Result<(), ManeuverError> {
    let first = reference[0];
    let last = reference[reference.len() - 1];
    let span = (reference.len() - 1) as f64 * dt;
    let mean_accel = (last.speed - first.speed) / span;
    if mean_accel.abs() > model.limits.accel_max + 1e-9 {
        return Err(ManeuverError::Infeasible(format!(
            "needs {mean_accel:.2} m/s^2 on average, limit {}",
            model.limits.accel_max
        )));
    }
    for p in reference {
        let steer = (model.wheelbase * p.curvature).atan();
        if steer.abs() > model.limits.steer_max + 1e-9 {
            return Err(ManeuverError::Infeasible(format!(
                "curvature {:.3} at t={:.1}s needs steer {steer:.3} rad",
                p.curvature, p.t
            )));
        }
    }
    Ok(())
}

/// Monte Carlo tube over the given control sequence; one step per control.
pub fn generate_pft(
    model: &VehicleModel,
    initial: &VehicleState,
    controls: &[Control],
    noise: &NoiseModel,
    dt: f64,
    n: usize,
    seed: u64,
) -> Result<Pft, ManeuverError> {
    if n < MIN_TUBE_SAMPLES {
        return Err(ManeuverError::InvalidInput(format!(
            "need at least {MIN_TUBE_SAMPLES} samples, got {n}"
        )));
    }
    let samples = model.propagate_samples(initial, controls, noise, dt, n, seed)?;
    let mut steps = Vec::with_capacity(controls.len());
    let mut mean_speed = Vec::with_capacity(controls.len());
    let mut column = Vec::with_capacity(n);
    for k in 1..=controls.len() {
        column.clear();
        column.extend(samples.iter().map(|t| t[k].position()));
        steps.push(fit_gaussian(&column, COV_REGULARIZATION));
        mean_speed.push(samples.iter().map(|t| t[k].speed).sum::<f64>() / n as f64);
    }
    Pft::new(dt, steps, mean_speed, TubeFrame::World).map_err(|e| ManeuverError::InvalidInput(e.to_string()))
}

/// Everything needed to turn a template into a concrete action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorConfig {
    pub model: VehicleModel,
    pub gains: TrackingGains,
    pub noise: NoiseModel,
    pub dt: f64,
    pub samples: usize,
    pub speed_limit: f64,
}

/// Nominal plan of a template from `initial`: reference, tracked controls
/// and their deterministic rollout. No sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalPlan {
    pub controls: Vec<Control>,
    pub rollout: Vec<VehicleState>,
}

/// Plans the template with the lane-change measured along `axis_heading`;
/// `lateral_offset` overrides the template's offset (e.g. to re-centre in
/// the target lane).
pub fn plan_nominal(
    template: &ManeuverTemplate,
    initial: &VehicleState,
    axis_heading: f64,
    lateral_offset: f64,
    cfg: &GeneratorConfig,
) -> Result<NominalPlan, ManeuverError> {
    template.validate()?;
    let spec = ReferenceSpec {
        lateral_offset,
        target_speed: template.target_speed(initial.speed, cfg.dt, cfg.speed_limit),
        duration_steps: template.duration_steps(),
        transition_steps: None,
    };
    let reference = make_reference_along(&spec, initial, axis_heading, cfg.dt)?;
    let controls = track_reference(&reference, initial, &cfg.model, &cfg.gains, cfg.dt)?;
    let rollout = cfg.model.rollout(initial, &controls, cfg.dt)?;
    Ok(NominalPlan { controls, rollout })
}

/// Full action: nominal controls plus a sampled tube.
pub fn build_maneuver(
    template: &ManeuverTemplate,
    initial: &VehicleState,
    axis_heading: f64,
    lateral_offset: f64,
    cfg: &GeneratorConfig,
    seed: u64,
) -> Result<ManeuverAction, ManeuverError> {
    let plan = plan_nominal(template, initial, axis_heading, lateral_offset, cfg)?;
    let tube = generate_pft(&cfg.model, initial, &plan.controls, &cfg.noise, cfg.dt, cfg.samples, seed)?;
    Ok(ManeuverAction {
        id: template.id.clone(),
        micro_sequence: template.micro_sequence.clone(),
        lateral_offset: template.lateral_offset,
        duration_steps: template.duration_steps(),
        nominal_controls: plan.controls,
        tube,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const DT: f64 = 0.1;

    fn rms_error(reference: &[ReferencePoint], states: &[VehicleState]) -> f64 {
        let se: f64 = reference
            .iter()
            .zip(states)
            .map(|(r, s)| (r.position() - s.position()).norm_squared())
            .sum();
        (se / reference.len() as f64).sqrt()
    }

    #[test]
    fn null_maneuver_is_straight() {
        let s0 = VehicleState::new(0.0, 0.0, 0.0, 10.0);
        let spec = ReferenceSpec {
            lateral_offset: 0.0,
            target_speed: 10.0,
            duration_steps: 30,
            transition_steps: None,
        };
        let r = make_reference(&spec, &s0, DT).unwrap();
        assert_eq!(r.len(), 31);
        for (k, p) in r.iter().enumerate() {
            assert!((p.x - k as f64).abs() < 1e-12);
            assert_eq!(p.y, 0.0);
            assert_eq!(p.speed, 10.0);
        }
        let c = track_reference(&r, &s0, &VehicleModel::default(), &TrackingGains::default(), DT).unwrap();
        assert!(c.iter().all(|c| c.accel.abs() < 1e-6 && c.steer.abs() < 1e-6));
    }

    #[test]
    fn quintic_boundary_conditions() {
        let s0 = VehicleState::new(0.0, 0.0, 0.0, 10.0);
        let spec = ReferenceSpec {
            lateral_offset: 3.5,
            target_speed: 10.0,
            duration_steps: 30,
            transition_steps: None,
        };
        let r = make_reference(&spec, &s0, DT).unwrap();
        let (first, last) = (r[0], *r.last().unwrap());
        assert!((last.y - 3.5).abs() < 1e-12);
        // heading carries lateral velocity and curvature lateral acceleration
        for p in [first, last] {
            assert!(p.heading.abs() < 1e-12);
            assert!(p.curvature.abs() < 1e-12);
        }
        // finite differences agree to first order in the step
        let h = 1e-4;
        let fine = make_reference(&ReferenceSpec { duration_steps: 30_000, ..spec }, &s0, h).unwrap();
        let n = fine.len() - 1;
        assert!(((fine[1].y - fine[0].y) / h).abs() < 1e-6);
        assert!(((fine[n].y - fine[n - 1].y) / h).abs() < 1e-6);
        assert!(((fine[2].y - 2.0 * fine[1].y + fine[0].y) / (h * h)).abs() < 1e-2);
    }

    #[test]
    fn halving_duration_doubles_peak_lateral_velocity() {
        let s0 = VehicleState::new(0.0, 0.0, 0.0, 10.0);
        let peak = |steps: usize| {
            let r = make_reference(
                &ReferenceSpec {
                    lateral_offset: 3.5,
                    target_speed: 10.0,
                    duration_steps: steps,
                    transition_steps: None,
                },
                &s0,
                0.001,
            )
            .unwrap();
            assert!((r.last().unwrap().y - 3.5).abs() < 1e-9);
            r.windows(2).map(|w| (w[1].y - w[0].y) / 0.001).fold(0.0, f64::max)
        };
        let (long, short) = (peak(3000), peak(1500));
        // closed form: 15/8 * offset / T
        assert!((long - 15.0 / 8.0 * 3.5 / 3.0).abs() < 1e-3);
        assert!((short / long - 2.0).abs() < 1e-3);
    }

    #[test]
    fn rejects_negative_target_speed() {
        let s0 = VehicleState::new(0.0, 0.0, 0.0, 10.0);
        let spec = ReferenceSpec {
            lateral_offset: 0.0,
            target_speed: -1.0,
            duration_steps: 30,
            transition_steps: None,
        };
        assert!(matches!(make_reference(&spec, &s0, DT), Err(ManeuverError::InvalidInput(_))));
    }

    #[test]
    fn speed_step_saturates_then_settles() {
        let model = VehicleModel::default();
        let s0 = VehicleState::new(0.0, 0.0, 0.0, 10.0);
        let r = make_reference(
            &ReferenceSpec {
                lateral_offset: 0.0,
                target_speed: 12.0,
                duration_steps: 30,
                transition_steps: Some(1),
            },
            &s0,
            DT,
        )
        .unwrap();
        let c = track_reference(&r, &s0, &model, &TrackingGains::default(), DT).unwrap();
        assert_eq!(c[0].accel, model.limits.accel_max);
        let roll = model.rollout(&s0, &c, DT).unwrap();
        assert!((roll.last().unwrap().speed - 12.0).abs() < 0.1);
        assert!(c.iter().all(|c| model.limits.contains(c)));
    }

    #[test]
    fn lane_change_tracks_within_tolerance() {
        let model = VehicleModel::default();
        let s0 = VehicleState::new(0.0, 0.0, 0.0, 10.0);
        let r = make_reference(
            &ReferenceSpec {
                lateral_offset: 3.5,
                target_speed: 10.0,
                duration_steps: 30,
                transition_steps: None,
            },
            &s0,
            DT,
        )
        .unwrap();
        let c = track_reference(&r, &s0, &model, &TrackingGains::default(), DT).unwrap();
        let roll = model.rollout(&s0, &c, DT).unwrap();
        let rms = rms_error(&r, &roll);
        assert!(rms <= 0.3, "rms {rms}");
        assert!((roll.last().unwrap().y - 3.5).abs() < 0.3);
    }

    #[test]
    fn infeasible_reference_is_rejected() {
        let model = VehicleModel::default();
        let s0 = VehicleState::new(0.0, 0.0, 0.0, 10.0);
        let fast = make_reference(
            &ReferenceSpec {
                lateral_offset: 0.0,
                target_speed: 30.0,
                duration_steps: 30,
                transition_steps: None,
            },
            &s0,
            DT,
        )
        .unwrap();
        assert!(matches!(
            track_reference(&fast, &s0, &model, &TrackingGains::default(), DT),
            Err(ManeuverError::Infeasible(_))
        ));
        let slow = VehicleState::new(0.0, 0.0, 0.0, 0.5);
        let sharp = make_reference(
            &ReferenceSpec {
                lateral_offset: 3.5,
                target_speed: 0.5,
                duration_steps: 10,
                transition_steps: None,
            },
            &slow,
            DT,
        )
        .unwrap();
        assert!(matches!(
            track_reference(&sharp, &slow, &model, &TrackingGains::default(), DT),
            Err(ManeuverError::Infeasible(_))
        ));
    }

    #[test]
    fn zero_noise_tube_is_the_rollout() {
        let model = VehicleModel::default();
        let s0 = VehicleState::new(2.0, 1.0, 0.2, 8.0);
        let controls: Vec<_> = (0..30).map(|k| Control::new(0.5, 0.01 * (k as f64).sin())).collect();
        let tube = generate_pft(&model, &s0, &controls, &NoiseModel::ZERO, DT, 60, 1).unwrap();
        let roll = model.rollout(&s0, &controls, DT).unwrap();
        assert_eq!(tube.len(), 30);
        for (g, s) in tube.steps.iter().zip(&roll[1..]) {
            assert!((g.mean - s.position()).norm() < 1e-9);
            assert!((g.cov[(0, 0)] - COV_REGULARIZATION).abs() < 1e-12);
            assert!(g.cov[(0, 1)].abs() < 1e-12);
        }
        assert!(generate_pft(&model, &s0, &controls, &NoiseModel::ZERO, DT, 49, 1).is_err());
    }

    #[test]
    fn tube_spread_grows_along_straight_drive() {
        let model = VehicleModel::default();
        let s0 = VehicleState::new(0.0, 0.0, 0.0, 10.0);
        let controls = vec![Control::default(); 30];
        let noise = NoiseModel {
            sigma_accel: 0.3,
            sigma_steer: 0.01,
        };
        let tube = generate_pft(&model, &s0, &controls, &noise, DT, 10_000, 3).unwrap();
        let traces: Vec<f64> = tube.steps.iter().map(|g| g.cov.trace()).collect();
        assert!(traces.windows(2).all(|w| w[1] >= w[0]), "{traces:?}");
        let again = generate_pft(&model, &s0, &controls, &noise, DT, 10_000, 3).unwrap();
        assert_eq!(tube, again);
    }

    #[test]
    fn tube_means_converge_with_samples() {
        let model = VehicleModel::default();
        let s0 = VehicleState::new(0.0, 0.0, 0.0, 10.0);
        let controls = vec![Control::new(0.5, 0.02); 30];
        let noise = NoiseModel {
            sigma_accel: 0.5,
            sigma_steer: 0.05,
        };
        // average drift over several seeds so the comparison is not at the mercy of one draw
        let drift = |n_small: usize, n_big: usize| -> f64 {
            (0..8u64)
                .map(|seed| {
                    let a = generate_pft(&model, &s0, &controls, &noise, DT, n_small, seed).unwrap();
                    let b = generate_pft(&model, &s0, &controls, &noise, DT, n_big, seed + 100).unwrap();
                    (a.steps[29].mean - b.steps[29].mean).norm()
                })
                .sum::<f64>()
                / 8.0
        };
        let d1 = drift(100, 1000);
        let d2 = drift(1000, 10_000);
        assert!(d2 < d1, "{d1} then {d2}");
    }

    #[test]
    fn macro_expansion() {
        let catalog: BTreeMap<String, ManeuverTemplate> = default_catalog(30)
            .into_iter()
            .chain([ManeuverTemplate::simple("keep_lane_fast", MicroKind::Accelerate, 1.0, 0.0, 30)])
            .map(|t| (t.id.clone(), t))
            .collect();
        let pass = MacroAction {
            id: "pass_front_vehicle".into(),
            maneuver_sequence: vec!["merge_left".into(), "keep_lane_fast".into(), "merge_right".into()],
        };
        let parts = expand_macro(&pass, &catalog).unwrap();
        assert_eq!(
            parts.iter().map(|p| p.id.as_str()).collect::<Vec<_>>(),
            ["merge_left", "keep_lane_fast", "merge_right"]
        );
        assert_eq!(parts.iter().map(|p| p.duration_steps()).sum::<usize>(), 90);
        let single = MacroAction {
            id: "m".into(),
            maneuver_sequence: vec!["maintain".into()],
        };
        assert_eq!(expand_macro(&single, &catalog).unwrap(), vec![catalog["maintain"].clone()]);
        let empty: BTreeMap<String, ManeuverTemplate> = BTreeMap::new();
        assert!(matches!(expand_macro(&pass, &empty), Err(ManeuverError::MissingManeuver(_))));
    }

    #[test]
    fn built_maneuver_respects_limits() {
        let cfg = GeneratorConfig {
            model: VehicleModel::default(),
            gains: TrackingGains::default(),
            noise: NoiseModel {
                sigma_accel: 0.2,
                sigma_steer: 0.01,
            },
            dt: DT,
            samples: 200,
            speed_limit: 20.0,
        };
        let s0 = VehicleState::new(0.0, 0.0, 0.0, 10.0);
        for t in default_catalog(30) {
            let a = build_maneuver(&t, &s0, 0.0, t.lateral_offset, &cfg, 5).unwrap();
            assert_eq!(a.nominal_controls.len(), a.duration_steps);
            assert_eq!(a.tube.len(), a.duration_steps);
            assert!(a.nominal_controls.iter().all(|c| cfg.model.limits.contains(c)));
            let end = cfg.model.rollout(&s0, &a.nominal_controls, DT).unwrap();
            assert!((end.last().unwrap().y - t.lateral_offset).abs() < 0.3, "{}", t.id);
        }
    }

    #[test]
    fn micro_action_validation() {
        assert!(MicroAction::new(MicroKind::Maintain, 1.0, 10).is_err());
        assert!(MicroAction::new(MicroKind::Accelerate, -1.0, 10).is_err());
        assert_eq!(MicroAction::new(MicroKind::Decelerate, 2.0, 10).unwrap().signed_accel(), -2.0);
    }
}
