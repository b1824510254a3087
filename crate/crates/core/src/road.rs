//! Lane geometry: polyline centerlines, projection, and lane-relative
//! queries used for maneuver gating.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::wrap_angle;

#[derive(Debug, Error)]
pub enum RoadError {
    #[error("invalid lane {lane}: {message}")]
    InvalidLane { lane: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    /// Points in travel direction.
    pub centerline: Vec<[f64; 2]>,
    pub width: f64,
}

/// Closest point of a lane to a query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub point: Vector2<f64>,
    /// Signed distance of the query from the centerline, left positive.
    pub lateral: f64,
    /// Tangent heading of the centerline at `point`.
    pub heading: f64,
}

impl Lane {
    pub fn straight(from: [f64; 2], to: [f64; 2], width: f64) -> Self {
        Self {
            centerline: vec![from, to],
            width,
        }
    }

    fn validate(&self, lane: usize) -> Result<(), RoadError> {
        let bad = |message: &str| RoadError::InvalidLane {
            lane,
            message: message.into(),
        };
        if self.centerline.len() < 2 {
            return Err(bad("centerline needs at least two points"));
        }
        if !(self.width > 0.0) || !self.width.is_finite() {
            return Err(bad("width must be positive"));
        }
        for w in self.centerline.windows(2) {
            if !(w[0].iter().chain(&w[1]).all(|v| v.is_finite())) {
                return Err(bad("non-finite centerline point"));
            }
            if (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]) < 1e-6 {
                return Err(bad("repeated centerline point"));
            }
        }
        Ok(())
    }

    /// Projection onto the centerline; the end segments extend indefinitely.
    pub fn project(&self, p: &Vector2<f64>) -> Projection {
        let n = self.centerline.len() - 1;
        let mut best: Option<(f64, Projection)> = None;
        for i in 0..n {
            let a = Vector2::from(self.centerline[i]);
            let b = Vector2::from(self.centerline[i + 1]);
            let ab = b - a;
            let mut t = (p - a).dot(&ab) / ab.norm_squared();
            if i > 0 {
                t = t.max(0.0);
            }
            if i < n - 1 {
                t = t.min(1.0);
            }
            let q = a + ab * t;
            let dist = (p - q).norm();
            if best.as_ref().is_none_or(|(d, _)| dist < *d) {
                let dir = ab / ab.norm();
                let rel = p - q;
                best = Some((
                    dist,
                    Projection {
                        point: q,
                        lateral: dir.x * rel.y - dir.y * rel.x,
                        heading: dir.y.atan2(dir.x),
                    },
                ));
            }
        }
        best.unwrap().1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub lanes: Vec<Lane>,
}

/// Where a vehicle sits relative to the road, in its own travel direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LanePosition {
    pub lane: usize,
    /// Lane tangent turned to within a right angle of the vehicle heading.
    pub axis_heading: f64,
    /// Signed lateral distance from the vehicle to the lane center, left
    /// positive along the axis; steering by this re-centers the vehicle.
    pub to_center: f64,
}

impl Road {
    pub fn new(lanes: Vec<Lane>) -> Result<Self, RoadError> {
        for (i, l) in lanes.iter().enumerate() {
            l.validate(i)?;
        }
        Ok(Self { lanes })
    }

    pub fn validate(&self) -> Result<(), RoadError> {
        for (i, l) in self.lanes.iter().enumerate() {
            l.validate(i)?;
        }
        Ok(())
    }

    /// Nearest lane; `None` on a road without lanes.
    pub fn locate(&self, p: &Vector2<f64>, heading: f64) -> Option<LanePosition> {
        let (lane, proj) = self
            .lanes
            .iter()
            .enumerate()
            .map(|(i, l)| (i, l.project(p)))
            .min_by(|a, b| a.1.lateral.abs().total_cmp(&b.1.lateral.abs()))?;
        let axis = aligned(proj.heading, heading);
        Some(LanePosition {
            lane,
            axis_heading: axis,
            to_center: lateral_along(axis, &(proj.point - p)),
        })
    }

    /// Lateral distance to the center of the adjacent lane on the given
    /// side (`+1` left, `-1` right) of the vehicle's current lane.
    pub fn neighbor_offset(&self, p: &Vector2<f64>, heading: f64, side: i32) -> Option<f64> {
        let here = self.locate(p, heading)?;
        let width = self.lanes[here.lane].width;
        let center = p + normal(here.axis_heading) * here.to_center;
        self.lanes
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != here.lane)
            .filter_map(|(_, l)| {
                let q = l.project(&center).point;
                let shift = lateral_along(here.axis_heading, &(q - center));
                let wanted = side as f64 * shift;
                let spacing = 0.5 * (width + l.width);
                (wanted > 0.5 * spacing && wanted < 1.5 * spacing).then_some((wanted, shift))
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, shift)| shift + here.to_center)
    }
}

fn normal(heading: f64) -> Vector2<f64> {
    Vector2::new(-heading.sin(), heading.cos())
}

fn lateral_along(heading: f64, v: &Vector2<f64>) -> f64 {
    normal(heading).dot(v)
}

/// `tangent` or its reverse, whichever is closer to `heading`.
fn aligned(tangent: f64, heading: f64) -> f64 {
    if wrap_angle(heading - tangent).abs() <= std::f64::consts::FRAC_PI_2 {
        tangent
    } else {
        wrap_angle(tangent + std::f64::consts::PI)
    }
}
