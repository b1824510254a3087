//! Probabilistic flow tubes: per-step Gaussian position envelopes of a
//! maneuver, fitted from demonstrations and expressed in the frame of the
//! maneuver's start pose.
//!
//! Tube index `k` describes the position `(k + 1) * dt` seconds after the
//! maneuver started; the start pose itself is the frame origin and is not
//! stored.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix2, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{fit_gaussian, wrap_angle, Gaussian2, Pose, VehicleState};

/// Added to every fitted covariance.
pub const COV_REGULARIZATION: f64 = 1e-6;
pub const LIBRARY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PftError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("insufficient data: need at least {needed} trajectories, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedState {
    pub t: f64,
    #[serde(flatten)]
    pub state: VehicleState,
}

/// A demonstration: at least two samples with strictly increasing times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    samples: Vec<TimedState>,
}

impl Trajectory {
    pub fn new(samples: Vec<TimedState>) -> Result<Self, PftError> {
        if samples.len() < 2 {
            return Err(PftError::InvalidInput("trajectory needs at least 2 samples".into()));
        }
        for w in samples.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(PftError::InvalidInput(format!(
                    "sample times must strictly increase ({} then {})",
                    w[0].t, w[1].t
                )));
            }
        }
        if samples.iter().any(|s| !s.t.is_finite() || !s.state.is_finite()) {
            return Err(PftError::InvalidInput("non-finite trajectory sample".into()));
        }
        Ok(Self { samples })
    }

    /// Builds a trajectory from states spaced `dt` apart starting at t = 0.
    pub fn from_states(states: &[VehicleState], dt: f64) -> Result<Self, PftError> {
        Self::new(
            states
                .iter()
                .enumerate()
                .map(|(k, s)| TimedState {
                    t: k as f64 * dt,
                    state: *s,
                })
                .collect(),
        )
    }

    pub fn samples(&self) -> &[TimedState] {
        &self.samples
    }

    pub fn duration(&self) -> f64 {
        self.samples[self.samples.len() - 1].t - self.samples[0].t
    }

    pub fn start(&self) -> &VehicleState {
        &self.samples[0].state
    }

    /// State at absolute time `t`, interpolated linearly (heading along the
    /// shorter arc). Times outside the trajectory clamp to the endpoints.
    pub fn interpolate(&self, t: f64) -> VehicleState {
        let s = &self.samples;
        if t <= s[0].t {
            return s[0].state;
        }
        if t >= s[s.len() - 1].t {
            return s[s.len() - 1].state;
        }
        let hi = s.partition_point(|p| p.t <= t);
        let (a, b) = (&s[hi - 1], &s[hi]);
        let u = (t - a.t) / (b.t - a.t);
        let lerp = |x: f64, y: f64| x + u * (y - x);
        let dh = wrap_angle(b.state.heading - a.state.heading);
        VehicleState::new(
            lerp(a.state.x, b.state.x),
            lerp(a.state.y, b.state.y),
            a.state.heading + u * dh,
            lerp(a.state.speed, b.state.speed),
        )
    }
}

/// Resamples `traj` at `steps + 1` uniformly spaced instants covering its
/// whole duration.
pub fn resample_trajectory(traj: &Trajectory, steps: usize) -> Result<Vec<VehicleState>, PftError> {
    if steps == 0 {
        return Err(PftError::InvalidInput("step count must be at least 1".into()));
    }
    let duration = traj.duration();
    if !(duration > 0.0) {
        return Err(PftError::InvalidInput("trajectory has zero duration".into()));
    }
    let t0 = traj.samples[0].t;
    let last = traj.samples.len() - 1;
    Ok((0..=steps)
        .map(|k| match k {
            0 => traj.samples[0].state,
            k if k == steps => traj.samples[last].state,
            k => traj.interpolate(t0 + k as f64 * duration / steps as f64),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TubeFrame {
    /// Start pose at the origin, heading along +x.
    ManeuverStart,
    World,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pft {
    pub dt: f64,
    pub steps: Vec<Gaussian2>,
    pub mean_speed: Vec<f64>,
    pub frame: TubeFrame,
}

impl Pft {
    pub fn new(dt: f64, steps: Vec<Gaussian2>, mean_speed: Vec<f64>, frame: TubeFrame) -> Result<Self, PftError> {
        let tube = Self {
            dt,
            steps,
            mean_speed,
            frame,
        };
        tube.validate()?;
        Ok(tube)
    }

    pub fn validate(&self) -> Result<(), PftError> {
        if !(self.dt > 0.0) {
            return Err(PftError::InvalidInput(format!("tube dt must be positive, got {}", self.dt)));
        }
        if self.steps.is_empty() {
            return Err(PftError::InvalidInput("tube has no steps".into()));
        }
        if self.steps.len() != self.mean_speed.len() {
            return Err(PftError::InvalidInput("mean_speed length differs from steps".into()));
        }
        for (k, g) in self.steps.iter().enumerate() {
            g.validate()
                .map_err(|e| PftError::InvalidInput(format!("tube step {k}: {e}")))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Rigidly places a start-frame tube at `anchor` in the world.
    pub fn anchored(&self, anchor: &Pose) -> Pft {
        Pft {
            dt: self.dt,
            steps: self.steps.iter().map(|g| g.to_world(anchor)).collect(),
            mean_speed: self.mean_speed.clone(),
            frame: TubeFrame::World,
        }
    }

    /// Sub-tube of `len` steps beginning at `start`.
    pub fn window(&self, start: usize, len: usize) -> Result<Pft, PftError> {
        if start + len > self.len() || len == 0 {
            return Err(PftError::InvalidInput(format!(
                "window [{start}, {}) outside tube of length {}",
                start + len,
                self.len()
            )));
        }
        Ok(Pft {
            dt: self.dt,
            steps: self.steps[start..start + len].to_vec(),
            mean_speed: self.mean_speed[start..start + len].to_vec(),
            frame: self.frame,
        })
    }

    /// Adds the same covariance to every step.
    pub fn inflated(&self, extra: &Matrix2<f64>) -> Pft {
        Pft {
            steps: self.steps.iter().map(|g| g.inflated(extra)).collect(),
            ..self.clone()
        }
    }
}

/// Fits a tube to demonstrations: each is resampled to `steps + 1` points,
/// moved into its own start frame, and each step gets the sample mean and
/// unbiased sample covariance of the aligned positions.
pub fn fit_pft(trajs: &[Trajectory], steps: usize, dt: f64) -> Result<Pft, PftError> {
    if trajs.len() < 2 {
        return Err(PftError::InsufficientData {
            needed: 2,
            got: trajs.len(),
        });
    }
    if !(dt > 0.0) {
        return Err(PftError::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    let aligned: Vec<Vec<VehicleState>> = trajs
        .iter()
        .map(|t| {
            let pts = resample_trajectory(t, steps)?;
            let frame = pts[0].pose();
            Ok(pts.iter().map(|s| frame.state_to_local(s)).collect())
        })
        .collect::<Result<_, PftError>>()?;
    let m = aligned.len() as f64;
    let mut tube = Vec::with_capacity(steps);
    let mut speeds = Vec::with_capacity(steps);
    let mut column = Vec::with_capacity(aligned.len());
    for k in 1..=steps {
        column.clear();
        column.extend(aligned.iter().map(|a| a[k].position()));
        tube.push(fit_gaussian(&column, COV_REGULARIZATION));
        speeds.push(aligned.iter().map(|a| a[k].speed).sum::<f64>() / m);
    }
    Pft::new(dt, tube, speeds, TubeFrame::ManeuverStart)
}

/// Sum over aligned steps of log N(prefix_k; mean_k, cov_k + obs_noise I).
pub fn pft_loglik(pft: &Pft, prefix: &[Vector2<f64>], obs_noise: f64) -> Result<f64, PftError> {
    if prefix.len() > pft.len() {
        return Err(PftError::InvalidInput(format!(
            "prefix of {} points is longer than the {}-step tube",
            prefix.len(),
            pft.len()
        )));
    }
    if !(obs_noise >= 0.0) {
        return Err(PftError::InvalidInput("observation noise must be non-negative".into()));
    }
    Ok(prefix
        .iter()
        .zip(&pft.steps)
        .map(|(p, g)| g.log_density(p, obs_noise))
        .sum())
}

/// One independent draw per tube step.
pub fn sample_pft(pft: &Pft, seed: u64) -> Vec<Vector2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pft.steps
        .iter()
        .map(|g| {
            let l = cholesky_psd(&g.cov);
            let z = Vector2::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
            g.mean + l * z
        })
        .collect()
}

/// Lower Cholesky factor, treating tiny negative pivots as zero.
pub(crate) fn cholesky_psd(c: &Matrix2<f64>) -> Matrix2<f64> {
    let l11 = c[(0, 0)].max(0.0).sqrt();
    let l21 = if l11 > 0.0 { c[(1, 0)] / l11 } else { 0.0 };
    let l22 = (c[(1, 1)] - l21 * l21).max(0.0).sqrt();
    Matrix2::new(l11, 0.0, l21, l22)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryEntry {
    pub id: String,
    pub prior: f64,
    pub tube: Pft,
}

/// Named maneuver tubes plus a prior over them, kept sorted by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LibraryDoc", into = "LibraryDoc")]
pub struct ManeuverLibrary {
    entries: Vec<LibraryEntry>,
}

#[derive(Serialize, Deserialize)]
struct LibraryDoc {
    schema_version: u32,
    maneuvers: Vec<LibraryEntry>,
}

impl TryFrom<LibraryDoc> for ManeuverLibrary {
    type Error = PftError;
    fn try_from(doc: LibraryDoc) -> Result<Self, PftError> {
        if doc.schema_version != LIBRARY_SCHEMA_VERSION {
            return Err(PftError::InvalidInput(format!(
                "unsupported library schema_version {}",
                doc.schema_version
            )));
        }
        ManeuverLibrary::new(doc.maneuvers)
    }
}

impl From<ManeuverLibrary> for LibraryDoc {
    fn from(lib: ManeuverLibrary) -> Self {
        LibraryDoc {
            schema_version: LIBRARY_SCHEMA_VERSION,
            maneuvers: lib.entries,
        }
    }
}

impl ManeuverLibrary {
    pub fn new(mut entries: Vec<LibraryEntry>) -> Result<Self, PftError> {
        if entries.is_empty() {
            return Err(PftError::InvalidInput("empty maneuver library".into()));
        }
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(PftError::InvalidInput(format!("duplicate maneuver id {:?}", e.id)));
            }
            if !(e.prior >= 0.0) {
                return Err(PftError::InvalidInput(format!("negative prior for {:?}", e.id)));
            }
            e.tube.validate()?;
        }
        let total: f64 = entries.iter().map(|e| e.prior).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(PftError::InvalidInput(format!("prior sums to {total}, expected 1")));
        }
        let dt = entries[0].tube.dt;
        if entries.iter().any(|e| (e.tube.dt - dt).abs() > 1e-12) {
            return Err(PftError::InvalidInput("library tubes disagree on dt".into()));
        }
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(Self { entries })
    }

    /// Library with a uniform prior.
    pub fn uniform(tubes: Vec<(String, Pft)>) -> Result<Self, PftError> {
        let p = 1.0 / tubes.len().max(1) as f64;
        Self::new(
            tubes
                .into_iter()
                .map(|(id, tube)| LibraryEntry { id, prior: p, tube })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[LibraryEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.entries.binary_search_by(|e| e.id.as_str().cmp(id)).ok()
    }

    pub fn get(&self, id: &str) -> Option<&LibraryEntry> {
        self.index_of(id).map(|i| &self.entries[i])
    }

    pub fn dt(&self) -> f64 {
        self.entries[0].tube.dt
    }

    pub fn shortest_tube(&self) -> usize {
        self.entries.iter().map(|e| e.tube.len()).min().unwrap_or(0)
    }

    pub fn prior(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.prior).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("library serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PftError> {
        serde_json::from_str(text).map_err(|e| PftError::Parse {
            path: "<library>".into(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, PftError> {
        let text = fs::read_to_string(path).map_err(|source| PftError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| PftError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct CsvRow {
    t: f64,
    x: f64,
    y: f64,
    heading: f64,
    speed: f64,
}

/// Reads a demonstration with header `t,x,y,heading,speed`.
pub fn read_trajectory_csv(path: &Path) -> Result<Trajectory, PftError> {
    let parse_err = |message: String| PftError::Parse {
        path: path.display().to_string(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(e.to_string()))?;
    let headers = reader.headers().map_err(|e| parse_err(e.to_string()))?.clone();
    let expected = ["t", "x", "y", "heading", "speed"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(parse_err(format!("expected header t,x,y,heading,speed, got {:?}", headers)));
    }
    let mut samples = Vec::new();
    for row in reader.deserialize::<CsvRow>() {
        let r = row.map_err(|e| parse_err(e.to_string()))?;
        samples.push(TimedState {
            t: r.t,
            state: VehicleState::new(r.x, r.y, r.heading, r.speed),
        });
    }
    Trajectory::new(samples).map_err(|e| parse_err(e.to_string()))
}

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<(), PftError> {
    let io_err = |e: csv::Error| PftError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    for s in traj.samples() {
        w.serialize(CsvRow {
            t: s.t,
            x: s.state.x,
            y: s.state.y,
            heading: s.state.heading,
            speed: s.state.speed,
        })
        .map_err(io_err)?;
    }
    w.flush().map_err(|source| PftError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Learns a library from `dir/<maneuver id>/*.csv`, one tube per
/// subdirectory, with a uniform prior.
pub fn learn_library(dir: &Path, steps: usize, dt: f64) -> Result<ManeuverLibrary, PftError> {
    let io_err = |source| PftError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut groups: Vec<_> = fs::read_dir(dir)
        .map_err(io_err)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .collect();
    groups.sort_by_key(|e| e.file_name());
    let mut tubes = Vec::new();
    for group in groups {
        let id = group.file_name().to_string_lossy().into_owned();
        let mut files: Vec<_> = fs::read_dir(group.path())
            .map_err(io_err)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        let trajs = files
            .iter()
            .map(|f| read_trajectory_csv(f))
            .collect::<Result<Vec<_>, _>>()?;
        tubes.push((id, fit_pft(&trajs, steps, dt)?));
    }
    if tubes.is_empty() {
        return Err(PftError::InvalidInput(format!("no maneuver directories under {}", dir.display())));
    }
    ManeuverLibrary::uniform(tubes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn line(v: f64, heading: f64, n: usize, dt: f64) -> Trajectory {
        let states: Vec<_> = (0..n)
            .map(|k| {
                let d = v * k as f64 * dt;
                VehicleState::new(d * heading.cos(), d * heading.sin(), heading, v)
            })
            .collect();
        Trajectory::from_states(&states, dt).unwrap()
    }

    #[test]
    fn resample_straight_line_is_equally_spaced() {
        let traj = line(10.0, 0.0, 31, 0.1);
        let pts = resample_trajectory(&traj, 6).unwrap();
        assert_eq!(pts.len(), 7);
        for (k, p) in pts.iter().enumerate() {
            assert!((p.x - 5.0 * k as f64).abs() < 1e-9, "{k}: {}", p.x);
            assert_eq!(p.y, 0.0);
        }
    }

    #[test]
    fn resample_single_step_gives_endpoints() {
        let traj = line(3.0, 0.4, 11, 0.1);
        let pts = resample_trajectory(&traj, 1).unwrap();
        assert_eq!(pts, vec![traj.samples()[0].state, traj.samples()[10].state]);
    }

    #[test]
    fn resample_quadratic_within_second_order() {
        // x(t) = t^2 sampled every 10 ms on [0, 3]
        let dense: Vec<_> = (0..=300)
            .map(|k| {
                let t = k as f64 * 0.01;
                TimedState {
                    t,
                    state: VehicleState::new(t * t, 0.0, 0.0, 2.0 * t),
                }
            })
            .collect();
        let traj = Trajectory::new(dense).unwrap();
        let pts = resample_trajectory(&traj, 10).unwrap();
        for (k, p) in pts.iter().enumerate() {
            let t = 0.3 * k as f64;
            // linear interpolation error of t^2 is at most h^2/4 with h = 0.01
            assert!((p.x - t * t).abs() <= 0.01f64.powi(2) / 4.0 + 1e-12);
        }
    }

    #[test]
    fn resample_rejects_degenerate() {
        let traj = line(1.0, 0.0, 3, 0.1);
        assert!(resample_trajectory(&traj, 0).is_err());
        assert!(Trajectory::new(vec![]).is_err());
        let s = VehicleState::new(0.0, 0.0, 0.0, 0.0);
        assert!(Trajectory::new(vec![TimedState { t: 1.0, state: s }, TimedState { t: 1.0, state: s }]).is_err());
    }

    #[test]
    fn heading_interpolates_along_short_arc() {
        let a = VehicleState::new(0.0, 0.0, PI - 0.1, 1.0);
        let b = VehicleState::new(1.0, 0.0, -PI + 0.1, 1.0);
        let traj = Trajectory::from_states(&[a, b], 1.0).unwrap();
        let mid = traj.interpolate(0.5);
        assert!((mid.heading.abs() - PI).abs() < 1e-9);
    }

    #[test]
    fn identical_demos_give_minimal_tube() {
        let traj = line(8.0, 0.3, 31, 0.1);
        let tube = fit_pft(&[traj.clone(), traj.clone(), traj], 30, 0.1).unwrap();
        assert_eq!(tube.len(), 30);
        for (k, g) in tube.steps.iter().enumerate() {
            let expected = 0.8 * (k + 1) as f64;
            assert!((g.mean.x - expected).abs() < 1e-9);
            assert!(g.mean.y.abs() < 1e-9);
            assert!((g.cov - Matrix2::identity() * COV_REGULARIZATION).abs().max() < 1e-15);
        }
        assert!(tube.mean_speed.iter().all(|v| (v - 8.0).abs() < 1e-12));
    }

    #[test]
    fn mirrored_demos_have_axis_means() {
        let make = |sign: f64| {
            let states: Vec<_> = (0..21)
                .map(|k| {
                    let t = k as f64 * 0.1;
                    VehicleState::new(5.0 * t, sign * 0.3 * t * t, 0.0, 5.0)
                })
                .collect();
            Trajectory::from_states(&states, 0.1).unwrap()
        };
        let tube = fit_pft(&[make(1.0), make(-1.0)], 20, 0.1).unwrap();
        assert!(tube.steps.iter().all(|g| g.mean.y.abs() < 1e-12));
        assert!(tube.steps.last().unwrap().cov[(1, 1)] > 0.1);
    }

    #[test]
    fn fit_needs_two_demos() {
        let traj = line(1.0, 0.0, 5, 0.1);
        assert!(matches!(
            fit_pft(&[traj], 4, 0.1),
            Err(PftError::InsufficientData { needed: 2, got: 1 })
        ));
    }

    fn hand_tube() -> Pft {
        Pft::new(
            0.1,
            vec![
                Gaussian2::new(Vector2::new(1.0, 0.0), Matrix2::new(0.5, 0.1, 0.1, 0.3)).unwrap(),
                Gaussian2::new(Vector2::new(2.0, 0.5), Matrix2::new(0.8, 0.0, 0.0, 0.4)).unwrap(),
                Gaussian2::new(Vector2::new(3.0, 1.0), Matrix2::new(1.0, -0.2, -0.2, 0.6)).unwrap(),
            ],
            vec![10.0; 3],
            TubeFrame::ManeuverStart,
        )
        .unwrap()
    }

    /// Independent bivariate normal log-density written out longhand.
    fn bvn_logpdf(x: f64, y: f64, mx: f64, my: f64, sxx: f64, sxy: f64, syy: f64) -> f64 {
        let sx = sxx.sqrt();
        let sy = syy.sqrt();
        let rho = sxy / (sx * sy);
        let zx = (x - mx) / sx;
        let zy = (y - my) / sy;
        let q = (zx * zx - 2.0 * rho * zx * zy + zy * zy) / (1.0 - rho * rho);
        -(2.0 * PI * sx * sy * (1.0 - rho * rho).sqrt()).ln() - 0.5 * q
    }

    #[test]
    fn loglik_matches_density_oracle() {
        let tube = hand_tube();
        let prefix = [Vector2::new(1.2, -0.3), Vector2::new(1.7, 0.9), Vector2::new(3.5, 0.2)];
        let noise = 0.25;
        let expected: f64 = prefix
            .iter()
            .zip(&tube.steps)
            .map(|(p, g)| {
                bvn_logpdf(
                    p.x,
                    p.y,
                    g.mean.x,
                    g.mean.y,
                    g.cov[(0, 0)] + noise,
                    g.cov[(0, 1)],
                    g.cov[(1, 1)] + noise,
                )
            })
            .sum();
        let got = pft_loglik(&tube, &prefix, noise).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert_eq!(pft_loglik(&tube, &[], noise).unwrap(), 0.0);
        assert!(pft_loglik(&tube, &[Vector2::zeros(); 4], noise).is_err());
    }

    #[test]
    fn loglik_maximal_on_means() {
        let tube = hand_tube();
        let on: Vec<_> = tube.steps.iter().map(|g| g.mean).collect();
        let best = pft_loglik(&tube, &on, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let off: Vec<_> = on
                .iter()
                .map(|m| {
                    let (a, b): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
                    m + Vector2::new(a, b)
                })
                .collect();
            assert!(pft_loglik(&tube, &off, 0.1).unwrap() <= best);
        }
    }

    #[test]
    fn sampling_is_seeded_and_tight_for_minimal_tube() {
        let traj = line(5.0, 0.0, 11, 0.1);
        let tube = fit_pft(&[traj.clone(), traj], 10, 0.1).unwrap();
        let a = sample_pft(&tube, 5);
        assert_eq!(a, sample_pft(&tube, 5));
        assert_ne!(a, sample_pft(&tube, 6));
        for (p, g) in a.iter().zip(&tube.steps) {
            assert!((p - g.mean).norm() <= 3.0 * 2f64.sqrt() * COV_REGULARIZATION.sqrt());
        }
    }

    #[test]
    fn sample_moments_converge() {
        let tube = hand_tube();
        let n = 100_000;
        let draws: Vec<_> = (0..n).map(|s| sample_pft(&tube, s as u64)[2]).collect();
        let g = &tube.steps[2];
        let fit = fit_gaussian(&draws, 0.0);
        let se_x = (g.cov[(0, 0)] / n as f64).sqrt();
        let se_y = (g.cov[(1, 1)] / n as f64).sqrt();
        assert!((fit.mean.x - g.mean.x).abs() < 3.0 * se_x);
        assert!((fit.mean.y - g.mean.y).abs() < 3.0 * se_y);
        // var of a sample variance entry is about 2 s^4 / n
        for (i, j) in [(0, 0), (1, 1), (0, 1)] {
            let se = ((g.cov[(i, i)] * g.cov[(j, j)] + g.cov[(i, j)].powi(2)) / n as f64).sqrt();
            assert!((fit.cov[(i, j)] - g.cov[(i, j)]).abs() < 3.0 * se, "cov {i}{j}");
        }
    }

    #[test]
    fn library_validation_and_json() {
        let tube = hand_tube();
        let lib = ManeuverLibrary::new(vec![
            LibraryEntry {
                id: "b".into(),
                prior: 0.4,
                tube: tube.clone(),
            },
            LibraryEntry {
                id: "a".into(),
                prior: 0.6,
                tube: tube.clone(),
            },
        ])
        .unwrap();
        assert_eq!(lib.ids().collect::<Vec<_>>(), vec!["a", "b"]);
        let back = ManeuverLibrary::from_json(&lib.to_json()).unwrap();
        assert_eq!(back, lib);
        let bad = ManeuverLibrary::new(vec![LibraryEntry {
            id: "a".into(),
            prior: 0.5,
            tube,
        }]);
        assert!(bad.is_err());
    }

    #[test]
    fn csv_round_trip_and_learn() {
        let dir = tempfile::tempdir().unwrap();
        for (id, heading) in [("left", 0.2), ("straight", 0.0)] {
            let sub = dir.path().join(id);
            fs::create_dir(&sub).unwrap();
            for k in 0..3 {
                let traj = line(5.0 + k as f64, heading, 11, 0.1);
                write_trajectory_csv(&sub.join(format!("demo{k}.csv")), &traj).unwrap();
            }
        }
        let back = read_trajectory_csv(&dir.path().join("left/demo0.csv")).unwrap();
        assert_eq!(back.samples().len(), 11);
        let lib = learn_library(dir.path(), 10, 0.1).unwrap();
        assert_eq!(lib.ids().collect::<Vec<_>>(), vec!["left", "straight"]);
        // start-frame tubes: both demos go straight ahead of their own start pose
        let left = &lib.get("left").unwrap().tube;
        assert!(left.steps.iter().all(|g| g.mean.y.abs() < 1e-9));
    }

    #[test]
    fn csv_rejects_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "time,x,y,heading,speed\n0,0,0,0,0\n1,1,0,0,1\n").unwrap();
        assert!(matches!(read_trajectory_csv(&p), Err(PftError::Parse { .. })));
    }

    proptest! {
        #[test]
        fn fit_is_invariant_to_rigid_motion(dx in -50.0..50.0f64, dy in -50.0..50.0f64, th in -3.1..3.1f64, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let demos: Vec<Trajectory> = (0..4).map(|_| {
                let z1: f64 = StandardNormal.sample(&mut rng);
                let curv = 0.05 * z1;
                let z2: f64 = StandardNormal.sample(&mut rng);
                let v = 8.0 + z2;
                let mut s = VehicleState::new(3.0, -1.0, 0.2, v);
                let mut states = vec![s];
                for _ in 0..15 {
                    s = VehicleState::new(s.x + v * s.heading.cos() * 0.1, s.y + v * s.heading.sin() * 0.1, s.heading + curv, v);
                    states.push(s);
                }
                Trajectory::from_states(&states, 0.1).unwrap()
            }).collect();
            let pose = Pose { x: dx, y: dy, heading: th };
            let moved: Vec<Trajectory> = demos.iter().map(|t| Trajectory::new(t.samples().iter().map(|s| TimedState { t: s.t, state: pose.state_to_world(&s.state) }).collect()).unwrap()).collect();
            let a = fit_pft(&demos, 15, 0.1).unwrap();
            let b = fit_pft(&moved, 15, 0.1).unwrap();
            for (ga, gb) in a.steps.iter().zip(&b.steps) {
                prop_assert!((ga.mean - gb.mean).norm() < 1e-7);
                prop_assert!((ga.cov - gb.cov).abs().max() < 1e-7);
                prop_assert!(ga.eigenvalues().0 >= COV_REGULARIZATION - 1e-12);
            }
        }

        #[test]
        fn loglik_unimodal_along_rays(angle in 0.0..6.28f64, step in 0.01..0.5f64) {
            let tube = hand_tube();
            let dir = Vector2::new(angle.cos(), angle.sin());
            let mut prev = f64::INFINITY;
            for i in 0..40 {
                let off = dir * (step * i as f64);
                let prefix: Vec<_> = tube.steps.iter().map(|g| g.mean + off).collect();
                let ll = pft_loglik(&tube, &prefix, 0.2).unwrap();
                prop_assert!(ll <= prev + 1e-12);
                prev = ll;
            }
        }
    }
}
