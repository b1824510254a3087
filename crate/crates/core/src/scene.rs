//! World snapshot, simulated range sensor with occlusion, simulated V2V
//! channel and Gaussian position tracks.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix2, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{gaussian_fuse, Gaussian2, VehicleState};

pub const DEFAULT_STALE_LIMIT: u64 = 20;
/// Smallest measurement variance used in fusion, so exact sensors stay
/// well-conditioned.
pub const MIN_MEASUREMENT_VAR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("invalid sensor config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldObject {
    pub id: String,
    pub state: VehicleState,
    pub footprint_radius: f64,
    #[serde(default)]
    pub v2v_equipped: bool,
}

pub fn validate_world(objects: &[WorldObject]) -> Result<(), SceneError> {
    let mut ids = BTreeSet::new();
    for o in objects {
        if !(o.footprint_radius > 0.0) || !o.footprint_radius.is_finite() {
            return Err(SceneError::InvalidWorld(format!("{}: footprint_radius must be > 0", o.id)));
        }
        if !o.state.is_finite() {
            return Err(SceneError::InvalidWorld(format!("{}: non-finite state", o.id)));
        }
        if !ids.insert(o.id.as_str()) {
            return Err(SceneError::InvalidWorld(format!("duplicate object id {:?}", o.id)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorConfig {
    pub range: f64,
    pub pos_noise_std: f64,
    pub v2v_range: f64,
    pub v2v_pos_noise_std: f64,
    pub occlusion_enabled: bool,
    pub v2v_enabled: bool,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            range: 150.0,
            pos_noise_std: 0.3,
            v2v_range: 300.0,
            v2v_pos_noise_std: 0.5,
            occlusion_enabled: true,
            v2v_enabled: true,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        for (name, v) in [
            ("range", self.range),
            ("pos_noise_std", self.pos_noise_std),
            ("v2v_range", self.v2v_range),
            ("v2v_pos_noise_std", self.v2v_pos_noise_std),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(SceneError::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Sensor,
    V2v,
}

/// A noisy position report of one object, from either channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub object_id: String,
    pub position: Vector2<f64>,
    pub noise_std: f64,
    pub speed: f64,
    pub heading: f64,
    pub source: Source,
}

impl Measurement {
    pub fn gaussian(&self) -> Gaussian2 {
        Gaussian2::isotropic(self.position.x, self.position.y, (self.noise_std * self.noise_std).max(MIN_MEASUREMENT_VAR))
    }
}

/// Distance from `p` to the segment `a`-`b`.
pub fn segment_point_distance(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (a + ab * t - p).norm()
}

/// True when some object other than `target` blocks the line of sight.
pub fn is_occluded(objects: &[WorldObject], ego: &VehicleState, target: usize) -> bool {
    let (from, to) = (ego.position(), objects[target].state.position());
    objects
        .iter()
        .enumerate()
        .any(|(i, o)| i != target && segment_point_distance(&from, &to, &o.state.position()) <= o.footprint_radius)
}

fn noisy(rng: &mut ChaCha8Rng, p: Vector2<f64>, std: f64) -> Vector2<f64> {
    let (zx, zy): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
    p + Vector2::new(zx, zy) * std
}

/// Onboard detections: in range and, if enabled, not occluded.
pub fn sense(objects: &[WorldObject], ego: &VehicleState, cfg: &SensorConfig, seed: u64) -> Vec<Measurement> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin = ego.position();
    (0..objects.len())
        .filter(|&i| {
            (objects[i].state.position() - origin).norm() <= cfg.range
                && !(cfg.occlusion_enabled && is_occluded(objects, ego, i))
        })
        .map(|i| {
            let o = &objects[i];
            Measurement {
                object_id: o.id.clone(),
                position: noisy(&mut rng, o.state.position(), cfg.pos_noise_std),
                noise_std: cfg.pos_noise_std,
                speed: o.state.speed,
                heading: o.state.heading,
                source: Source::Sensor,
            }
        })
        .collect()
}

/// Messages from equipped objects within V2V range; occlusion plays no part.
pub fn v2v_receive(objects: &[WorldObject], ego: &VehicleState, cfg: &SensorConfig, seed: u64) -> Vec<Measurement> {
    if !cfg.v2v_enabled {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin = ego.position();
    objects
        .iter()
        .filter(|o| o.v2v_equipped && (o.state.position() - origin).norm() <= cfg.v2v_range)
        .map(|o| Measurement {
            object_id: o.id.clone(),
            position: noisy(&mut rng, o.state.position(), cfg.v2v_pos_noise_std),
            noise_std: cfg.v2v_pos_noise_std,
            speed: o.state.speed,
            heading: o.state.heading,
            source: Source::V2v,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub object_id: String,
    pub position: Gaussian2,
    pub speed_estimate: f64,
    pub heading_estimate: f64,
    pub last_seen: u64,
    /// Timestep the position estimate refers to.
    pub stamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub stale_limit: u64,
    pub dt: f64,
    /// Position variance growth in m^2/s while predicting.
    pub process_noise: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            stale_limit: DEFAULT_STALE_LIMIT,
            dt: crate::dynamics::DEFAULT_DT,
            process_noise: 0.5,
        }
    }
}

impl Track {
    /// Constant-velocity prediction of the position to timestep `t`.
    pub fn predicted(&self, t: u64, cfg: &TrackerConfig) -> Track {
        if t <= self.stamp {
            return self.clone();
        }
        let elapsed = (t - self.stamp) as f64 * cfg.dt;
        let (s, c) = self.heading_estimate.sin_cos();
        let mean = self.position.mean + Vector2::new(c, s) * (self.speed_estimate * elapsed);
        let cov = self.position.cov + Matrix2::identity() * (cfg.process_noise * elapsed);
        Track {
            position: Gaussian2 { mean, cov },
            stamp: t,
            ..self.clone()
        }
    }
}

/// Fuses this step's measurements into the tracks, opens tracks for new
/// ids and drops those unseen for more than `stale_limit` steps. Output is
/// sorted by id and every position refers to timestep `t`.
pub fn update_tracks(
    tracks: &[Track],
    detections: &[Measurement],
    messages: &[Measurement],
    t: u64,
    cfg: &TrackerConfig,
) -> Vec<Track> {
    let mut by_id: BTreeMap<String, Track> = tracks
        .iter()
        .map(|tr| (tr.object_id.clone(), tr.predicted(t, cfg)))
        .collect();
    for m in detections.iter().chain(messages) {
        let z = m.gaussian();
        match by_id.get_mut(&m.object_id) {
            Some(tr) => {
                // a singular sum only happens with two exact estimates; keep the track
                if let Ok(fused) = gaussian_fuse(&tr.position, &z) {
                    tr.position = fused;
                }
                tr.speed_estimate = m.speed;
                tr.heading_estimate = m.heading;
                tr.last_seen = t;
            }
            None => {
                by_id.insert(
                    m.object_id.clone(),
                    Track {
                        object_id: m.object_id.clone(),
                        position: z,
                        speed_estimate: m.speed,
                        heading_estimate: m.heading,
                        last_seen: t,
                        stamp: t,
                    },
                );
            }
        }
    }
    by_id
        .into_values()
        .filter(|tr| t.saturating_sub(tr.last_seen) <= cfg.stale_limit)
        .collect()
}
