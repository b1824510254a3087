//! Vehicle kinematics, disturbance propagation and 2-D Gaussian utilities.
//!
//! Everything in here is a plain value type. Randomised operations take an
//! explicit seed so a caller can reproduce any rollout bit for bit.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_WHEELBASE: f64 = 2.7;
pub const DEFAULT_DT: f64 = 0.1;
/// Eigenvalues above `-PSD_TOL` count as non-negative.
pub const PSD_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("gaussian fusion failed: covariance sum is singular")]
    FusionFailure,
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, heading: f64, speed: f64) -> Self {
        Self {
            x,
            y,
            heading: wrap_angle(heading),
            speed: speed.max(0.0),
        }
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn pose(&self) -> Pose {
        Pose {
            x: self.x,
            y: self.y,
            heading: self.heading,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.heading.is_finite() && self.speed.is_finite()
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !self.is_finite() {
            return Err(DynamicsError::InvalidInput(format!("non-finite state {self:?}")));
        }
        if self.speed < 0.0 {
            return Err(DynamicsError::InvalidInput(format!("negative speed {}", self.speed)));
        }
        Ok(())
    }
}

/// A rigid 2-D frame: origin plus heading of the x axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        x: 0.0,
        y: 0.0,
        heading: 0.0,
    };

    pub fn rotation(&self) -> Matrix2<f64> {
        let (s, c) = self.heading.sin_cos();
        Matrix2::new(c, -s, s, c)
    }

    /// Maps a point expressed in this frame into the parent frame.
    pub fn to_world(&self, local: &Vector2<f64>) -> Vector2<f64> {
        self.rotation() * local + Vector2::new(self.x, self.y)
    }

    /// Maps a parent-frame point into this frame.
    pub fn to_local(&self, world: &Vector2<f64>) -> Vector2<f64> {
        self.rotation().transpose() * (world - Vector2::new(self.x, self.y))
    }

    pub fn state_to_local(&self, s: &VehicleState) -> VehicleState {
        let p = self.to_local(&s.position());
        VehicleState::new(p.x, p.y, s.heading - self.heading, s.speed)
    }

    pub fn state_to_world(&self, s: &VehicleState) -> VehicleState {
        let p = self.to_world(&s.position());
        VehicleState::new(p.x, p.y, s.heading + self.heading, s.speed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    pub accel: f64,
    pub steer: f64,
}

impl Control {
    pub fn new(accel: f64, steer: f64) -> Self {
        Self { accel, steer }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlLimits {
    pub accel_max: f64,
    pub steer_max: f64,
}

impl Default for ControlLimits {
    fn default() -> Self {
        Self {
            accel_max: 3.0,
            steer_max: 0.5,
        }
    }
}

impl ControlLimits {
    pub fn clamp(&self, c: Control) -> Control {
        Control {
            accel: c.accel.clamp(-self.accel_max, self.accel_max),
            steer: c.steer.clamp(-self.steer_max, self.steer_max),
        }
    }

    pub fn contains(&self, c: &Control) -> bool {
        c.accel.abs() <= self.accel_max + 1e-9 && c.steer.abs() <= self.steer_max + 1e-9
    }
}

/// Std of the additive Gaussian noise applied to each commanded control.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma_accel: f64,
    pub sigma_steer: f64,
}

impl NoiseModel {
    pub const ZERO: NoiseModel = NoiseModel {
        sigma_accel: 0.0,
        sigma_steer: 0.0,
    };

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.sigma_accel >= 0.0 && self.sigma_steer >= 0.0)
            || !self.sigma_accel.is_finite()
            || !self.sigma_steer.is_finite()
        {
            return Err(DynamicsError::InvalidInput(format!("bad noise model {self:?}")));
        }
        Ok(())
    }
}

/// Kinematic bicycle with forward-Euler integration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleModel {
    pub wheelbase: f64,
    pub limits: ControlLimits,
}

impl Default for VehicleModel {
    fn default() -> Self {
        Self {
            wheelbase: DEFAULT_WHEELBASE,
            limits: ControlLimits::default(),
        }
    }
}

impl VehicleModel {
    pub fn step(&self, state: &VehicleState, control: &Control, dt: f64) -> Result<VehicleState, DynamicsError> {
        if !state.is_finite() || !control.accel.is_finite() || !control.steer.is_finite() {
            return Err(DynamicsError::InvalidInput("non-finite state or control".into()));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(DynamicsError::InvalidInput(format!("dt must be positive, got {dt}")));
        }
        if !self.limits.contains(control) {
            return Err(DynamicsError::InvalidInput(format!("control {control:?} outside limits")));
        }
        Ok(self.step_unchecked(state, control, dt))
    }

    /// The Euler update without validation; used in hot sampling loops.
    #[inline]
    pub fn step_unchecked(&self, s: &VehicleState, c: &Control, dt: f64) -> VehicleState {
        let (sin, cos) = s.heading.sin_cos();
        VehicleState {
            x: s.x + s.speed * cos * dt,
            y: s.y + s.speed * sin * dt,
            heading: wrap_angle(s.heading + s.speed / self.wheelbase * c.steer.tan() * dt),
            speed: (s.speed + c.accel * dt).max(0.0),
        }
    }

    /// Deterministic rollout; output has `controls.len() + 1` states.
    pub fn rollout(&self, initial: &VehicleState, controls: &[Control], dt: f64) -> Result<Vec<VehicleState>, DynamicsError> {
        let mut out = Vec::with_capacity(controls.len() + 1);
        out.push(*initial);
        let mut s = *initial;
        for c in controls {
            s = self.step(&s, c, dt)?;
            out.push(s);
        }
        Ok(out)
    }

    /// Samples `n` trajectories, perturbing every control with independent
    /// Gaussian noise (then saturating at the limits) before each step.
    pub fn propagate_samples(
        &self,
        state: &VehicleState,
        controls: &[Control],
        noise: &NoiseModel,
        dt: f64,
        n: usize,
        seed: u64,
    ) -> Result<Vec<Vec<VehicleState>>, DynamicsError> {
        if n == 0 {
            return Err(DynamicsError::InvalidInput("sample count must be at least 1".into()));
        }
        if controls.is_empty() {
            return Err(DynamicsError::InvalidInput("empty control sequence".into()));
        }
        noise.validate()?;
        state.validate()?;
        if !(dt > 0.0) {
            return Err(DynamicsError::InvalidInput(format!("dt must be positive, got {dt}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut traj = Vec::with_capacity(controls.len() + 1);
            let mut s = *state;
            traj.push(s);
            for c in controls {
                let za: f64 = std_normal.sample(&mut rng);
                let zs: f64 = std_normal.sample(&mut rng);
                let noisy = self.limits.clamp(Control {
                    accel: c.accel + noise.sigma_accel * za,
                    steer: c.steer + noise.sigma_steer * zs,
                });
                s = self.step_unchecked(&s, &noisy, dt);
                traj.push(s);
            }
            out.push(traj);
        }
        Ok(out)
    }
}

/// Bivariate normal over positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "Gaussian2Repr", try_from = "Gaussian2Repr")]
pub struct Gaussian2 {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
}

#[derive(Serialize, Deserialize)]
struct Gaussian2Repr {
    mean: [f64; 2],
    cov: [[f64; 2]; 2],
}

impl From<Gaussian2> for Gaussian2Repr {
    fn from(g: Gaussian2) -> Self {
        Self {
            mean: [g.mean.x, g.mean.y],
            cov: [[g.cov[(0, 0)], g.cov[(0, 1)]], [g.cov[(1, 0)], g.cov[(1, 1)]]],
        }
    }
}

impl TryFrom<Gaussian2Repr> for Gaussian2 {
    type Error = DynamicsError;
    fn try_from(r: Gaussian2Repr) -> Result<Self, Self::Error> {
        let g = Gaussian2 {
            mean: Vector2::new(r.mean[0], r.mean[1]),
            cov: Matrix2::new(r.cov[0][0], r.cov[0][1], r.cov[1][0], r.cov[1][1]),
        };
        g.validate()?;
        Ok(g)
    }
}

impl Gaussian2 {
    pub fn new(mean: Vector2<f64>, cov: Matrix2<f64>) -> Result<Self, DynamicsError> {
        let g = Self { mean, cov };
        g.validate()?;
        Ok(g)
    }

    pub fn isotropic(mx: f64, my: f64, var: f64) -> Self {
        Self {
            mean: Vector2::new(mx, my),
            cov: Matrix2::identity() * var,
        }
    }

    pub fn eigenvalues(&self) -> (f64, f64) {
        sym_eigenvalues(&self.cov)
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !self.mean.iter().chain(self.cov.iter()).all(|v| v.is_finite()) {
            return Err(DynamicsError::InvalidInput("non-finite gaussian".into()));
        }
        let asym = (self.cov[(0, 1)] - self.cov[(1, 0)]).abs();
        if asym > PSD_TOL * (1.0 + self.cov.abs().max()) {
            return Err(DynamicsError::InvalidInput("covariance not symmetric".into()));
        }
        let (lo, _) = self.eigenvalues();
        if lo < -PSD_TOL {
            return Err(DynamicsError::InvalidInput(format!("covariance not PSD (min eigenvalue {lo})")));
        }
        Ok(())
    }

    /// Rigid transform from a local frame into its parent: mean mapped,
    /// covariance rotated as R S R^T.
    pub fn to_world(&self, frame: &Pose) -> Gaussian2 {
        let r = frame.rotation();
        Gaussian2 {
            mean: frame.to_world(&self.mean),
            cov: symmetrize(&(r * self.cov * r.transpose())),
        }
    }

    pub fn to_local(&self, frame: &Pose) -> Gaussian2 {
        let rt = frame.rotation().transpose();
        Gaussian2 {
            mean: frame.to_local(&self.mean),
            cov: symmetrize(&(rt * self.cov * rt.transpose())),
        }
    }

    pub fn inflated(&self, extra: &Matrix2<f64>) -> Gaussian2 {
        Gaussian2 {
            mean: self.mean,
            cov: symmetrize(&(self.cov + extra)),
        }
    }

    /// Log-density at `x` of this Gaussian with `extra_var * I` added to the covariance.
    pub fn log_density(&self, x: &Vector2<f64>, extra_var: f64) -> f64 {
        let s = self.cov + Matrix2::identity() * extra_var;
        let det = s[(0, 0)] * s[(1, 1)] - s[(0, 1)] * s[(1, 0)];
        if !(det > 0.0) {
            return f64::NEG_INFINITY;
        }
        let d = x - self.mean;
        // inverse of a 2x2 via adjugate
        let q = (s[(1, 1)] * d.x * d.x - (s[(0, 1)] + s[(1, 0)]) * d.x * d.y + s[(0, 0)] * d.y * d.y) / det;
        -0.5 * q - 0.5 * det.ln() - (2.0 * PI).ln()
    }
}

pub fn symmetrize(m: &Matrix2<f64>) -> Matrix2<f64> {
    let off = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    Matrix2::new(m[(0, 0)], off, off, m[(1, 1)])
}

/// Eigenvalues (ascending) of a symmetric 2x2 matrix.
pub fn sym_eigenvalues(m: &Matrix2<f64>) -> (f64, f64) {
    let a = m[(0, 0)];
    let d = m[(1, 1)];
    let b = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    let mid = 0.5 * (a + d);
    let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    (mid - rad, mid + rad)
}

/// Product-of-Gaussians (Kalman measurement) update of `a` by `b`.
pub fn gaussian_fuse(a: &Gaussian2, b: &Gaussian2) -> Result<Gaussian2, DynamicsError> {
    let sum = a.cov + b.cov;
    let det = sum.determinant();
    let scale = sum.abs().max().max(f64::MIN_POSITIVE);
    if !(det.abs() > 1e-300) || det.abs() < 1e-14 * scale * scale {
        return Err(DynamicsError::FusionFailure);
    }
    let inv = sum.try_inverse().ok_or(DynamicsError::FusionFailure)?;
    let gain = a.cov * inv;
    let mean = a.mean + gain * (b.mean - a.mean);
    // a.cov (a+b)^-1 b.cov is the symmetric form of a.cov - a.cov (a+b)^-1 a.cov
    let cov = symmetrize(&(a.cov * inv * b.cov));
    Ok(Gaussian2 { mean, cov })
}

/// Sample mean and unbiased covariance of a point cloud, plus `reg * I`.
pub fn fit_gaussian(points: &[Vector2<f64>], reg: f64) -> Gaussian2 {
    let m = points.len() as f64;
    let mean = points.iter().fold(Vector2::zeros(), |acc, p| acc + p) / m;
    let mut cov = Matrix2::zeros();
    if points.len() > 1 {
        for p in points {
            let d = p - mean;
            cov += d * d.transpose();
        }
        cov /= m - 1.0;
    }
    Gaussian2 {
        mean,
        cov: symmetrize(&cov) + Matrix2::identity() * reg,
    }
}
