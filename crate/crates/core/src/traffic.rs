//! Scripted traffic: agents track a chain of maneuver references under
//! control noise, and maneuver libraries are learned from synthetic
//! demonstrations of the same behavior.

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{NoiseModel, VehicleModel, VehicleState};
use crate::maneuver::{
    make_reference_along, tracking_control, ManeuverError, ManeuverTemplate, MicroKind, ReferencePoint, ReferenceSpec,
    TrackingGains,
};
use crate::pft::{fit_pft, LibraryEntry, ManeuverLibrary, PftError, Trajectory};

/// Deterministic seed derivation from structured labels.
pub fn derive_seed<T: Hash>(parts: T) -> u64 {
    let mut h = DefaultHasher::new();
    parts.hash(&mut h);
    h.finish()
}

/// How other traffic behaves: its maneuver repertoire, noise and the
/// demonstration budget for learning its tubes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentBehavior {
    pub maneuvers: Vec<ManeuverTemplate>,
    pub noise: NoiseModel,
    pub gains: TrackingGains,
    /// Length of learned tubes.
    pub tube_steps: usize,
    /// Demonstrations per maneuver.
    pub demos: usize,
    /// Libraries are learned per speed class of this width.
    pub speed_resolution: f64,
    pub speed_limit: f64,
}

pub const KEEP_LANE: &str = "keep_lane";

impl Default for AgentBehavior {
    fn default() -> Self {
        let d = 30;
        Self {
            maneuvers: vec![
                ManeuverTemplate::simple("accelerate", MicroKind::Accelerate, 1.5, 0.0, d),
                ManeuverTemplate::simple("decelerate", MicroKind::Decelerate, 1.5, 0.0, d),
                ManeuverTemplate::simple(KEEP_LANE, MicroKind::Maintain, 0.0, 0.0, d),
                ManeuverTemplate::simple("merge_left", MicroKind::Maintain, 0.0, 3.5, d),
                ManeuverTemplate::simple("merge_right", MicroKind::Maintain, 0.0, -3.5, d),
            ],
            noise: NoiseModel {
                sigma_accel: 0.3,
                sigma_steer: 0.01,
            },
            gains: TrackingGains::default(),
            tube_steps: 150,
            demos: 60,
            speed_resolution: 0.5,
            speed_limit: 30.0,
        }
    }
}

impl AgentBehavior {
    pub fn template(&self, id: &str) -> Option<&ManeuverTemplate> {
        self.maneuvers.iter().find(|m| m.id == id)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.template(KEEP_LANE).is_none() {
            return Err(format!("agent maneuvers must include {KEEP_LANE:?}"));
        }
        for m in &self.maneuvers {
            m.validate().map_err(|e| e.to_string())?;
        }
        self.noise.validate().map_err(|e| e.to_string())?;
        if self.tube_steps < 2 || self.demos < 2 {
            return Err("tube_steps and demos must be at least 2".into());
        }
        if !(self.speed_resolution > 0.0) {
            return Err("speed_resolution must be positive".into());
        }
        Ok(())
    }

    /// Reference for the scripted maneuvers followed by lane keeping, at
    /// least `steps` long, laid along `axis` from `start`. The first
    /// maneuver also removes `to_center` of lateral offset.
    pub fn script_reference(
        &self,
        script: &[String],
        start: &VehicleState,
        axis: f64,
        to_center: f64,
        steps: usize,
        dt: f64,
    ) -> Result<Vec<ReferencePoint>, ManeuverError> {
        let keep = self.template(KEEP_LANE).ok_or_else(|| ManeuverError::MissingManeuver(KEEP_LANE.into()))?;
        let mut out: Vec<ReferencePoint> = Vec::with_capacity(steps + 1);
        let mut state = *start;
        let mut offset = to_center;
        let mut i = 0;
        while out.len() < steps + 1 {
            let t = match script.get(i) {
                Some(id) => self.template(id).ok_or_else(|| ManeuverError::MissingManeuver(id.clone()))?,
                None => keep,
            };
            i += 1;
            let spec = ReferenceSpec {
                lateral_offset: t.lateral_offset + offset,
                target_speed: t.target_speed(state.speed, dt, self.speed_limit),
                duration_steps: t.duration_steps(),
                transition_steps: None,
            };
            offset = 0.0;
            let t0 = out.last().map_or(0.0, |p| p.t);
            let piece = make_reference_along(&spec, &state, axis, dt)?;
            let last = *piece.last().unwrap();
            let skip = usize::from(!out.is_empty());
            out.extend(piece.into_iter().skip(skip).map(|p| ReferencePoint { t: p.t + t0, ..p }));
            state = VehicleState::new(last.x, last.y, last.heading, last.speed);
        }
        out.truncate(steps + 1);
        Ok(out)
    }
}

/// Closed-loop follower of a precomputed reference with noisy actuation.
#[derive(Debug, Clone)]
pub struct ScriptedDriver {
    pub reference: Vec<ReferencePoint>,
    pub model: VehicleModel,
    pub gains: TrackingGains,
    pub noise: NoiseModel,
    step: usize,
    rng: ChaCha8Rng,
}

impl ScriptedDriver {
    pub fn new(reference: Vec<ReferencePoint>, model: VehicleModel, gains: TrackingGains, noise: NoiseModel, seed: u64) -> Self {
        Self {
            reference,
            model,
            gains,
            noise,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Advances one step; past the end of the reference the last point is
    /// held with its speed extrapolated straight ahead.
    pub fn advance(&mut self, s: &VehicleState, dt: f64) -> VehicleState {
        let n = self.reference.len();
        let (cur, next) = if self.step + 1 < n {
            (self.reference[self.step], self.reference[self.step + 1])
        } else {
            let last = self.reference[n - 1];
            let k = (self.step + 1 - (n - 1)) as f64;
            let (sn, cs) = last.heading.sin_cos();
            let shift = |m: f64| ReferencePoint {
                x: last.x + cs * last.speed * dt * m,
                y: last.y + sn * last.speed * dt * m,
                curvature: 0.0,
                ..last
            };
            (shift(k - 1.0), shift(k))
        };
        self.step += 1;
        let c = tracking_control(s, &cur, &next, &self.model, &self.gains, dt);
        let na = Normal::new(0.0, self.noise.sigma_accel).unwrap();
        let ns = Normal::new(0.0, self.noise.sigma_steer).unwrap();
        let noisy = crate::dynamics::Control::new(c.accel + na.sample(&mut self.rng), c.steer + ns.sample(&mut self.rng));
        self.model.step_unchecked(s, &self.model.limits.clamp(noisy), dt)
    }
}

/// Learns one tube per maneuver from noisy closed-loop demonstrations
/// starting at `speed` in the start frame.
pub fn learn_agent_library(
    behavior: &AgentBehavior,
    model: &VehicleModel,
    speed: f64,
    dt: f64,
    seed: u64,
) -> Result<ManeuverLibrary, PftError> {
    let start = VehicleState::new(0.0, 0.0, 0.0, speed);
    let mut tubes = Vec::with_capacity(behavior.maneuvers.len());
    for (mi, m) in behavior.maneuvers.iter().enumerate() {
        let reference = behavior
            .script_reference(std::slice::from_ref(&m.id), &start, 0.0, 0.0, behavior.tube_steps, dt)
            .map_err(|e| PftError::InvalidInput(e.to_string()))?;
        let mut trajs = Vec::with_capacity(behavior.demos);
        for j in 0..behavior.demos {
            let mut driver = ScriptedDriver::new(
                reference.clone(),
                *model,
                behavior.gains,
                behavior.noise,
                derive_seed((seed, "demo", mi, j)),
            );
            let mut states = Vec::with_capacity(behavior.tube_steps + 1);
            let mut s = start;
            states.push(s);
            for _ in 0..behavior.tube_steps {
                s = driver.advance(&s, dt);
                states.push(s);
            }
            trajs.push(Trajectory::from_states(&states, dt)?);
        }
        tubes.push(LibraryEntry {
            id: m.id.clone(),
            prior: 1.0 / behavior.maneuvers.len() as f64,
            tube: fit_pft(&trajs, behavior.tube_steps, dt)?,
        });
    }
    ManeuverLibrary::new(tubes)
}

/// Libraries per speed class, learned on first use and shared between
/// episodes. Contents depend only on the behavior, model, dt and seed.
#[derive(Debug)]
pub struct LibraryBank {
    pub behavior: AgentBehavior,
    pub model: VehicleModel,
    pub dt: f64,
    pub seed: u64,
    cache: Mutex<BTreeMap<i64, Arc<ManeuverLibrary>>>,
}

impl LibraryBank {
    pub fn new(behavior: AgentBehavior, model: VehicleModel, dt: f64, seed: u64) -> Self {
        Self {
            behavior,
            model,
            dt,
            seed,
            cache: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn class_of(&self, speed: f64) -> i64 {
        (speed.max(0.0) / self.behavior.speed_resolution).round() as i64
    }

    pub fn get(&self, class: i64) -> Result<Arc<ManeuverLibrary>, PftError> {
        if let Some(lib) = self.cache.lock().unwrap().get(&class) {
            return Ok(Arc::clone(lib));
        }
        let speed = class as f64 * self.behavior.speed_resolution;
        let lib = Arc::new(learn_agent_library(
            &self.behavior,
            &self.model,
            speed,
            self.dt,
            derive_seed((self.seed, class)),
        )?);
        Ok(Arc::clone(self.cache.lock().unwrap().entry(class).or_insert(lib)))
    }
}
