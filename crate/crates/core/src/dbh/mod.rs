//! Diameter-at-breast-height estimation: slice extraction, axis finding,
//! algebraic circle fitting, non-linear cylinder refinement, RANSAC and
//! multi-band voting.

mod axis;
mod circle;
mod nls;
mod pipeline;
mod ransac;

use nalgebra::{Unit, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Point, Vector};

pub use axis::{axis_lls, project_to_plane};
pub use circle::hyper_circle_fit;
pub use nls::{cylinder_nls, NlsFit, NlsOptions, MAX_RADIUS, MIN_RADIUS};
pub use pipeline::{
    estimate_dbh, estimate_tree, estimate_trees, extract_slice, extract_slice_with_normals, mix_seed, vote, AxisMode, BandFit, DbhEstimate,
    EstimateRecord, EstimateStatus, EstimationConfig, MethodChain, RefineMode, TreeRecord, Voting, BREAST_HEIGHT,
};
pub use ransac::{ransac_cylinder, RansacFit};

/// Infinite cylinder `(a, c, r)` in canonical form: `‖a‖ = 1`, `a_z ≥ 0`
/// and `a·c = 0`, i.e. `c` is the axis point closest to the origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cylinder {
    axis: Unit<Vector>,
    point: Point,
    radius: f64,
}

impl Cylinder {
    /// Canonicalizes `axis` and `point`; `radius` must be positive and finite.
    pub fn new(axis: Vector, point: Point, radius: f64) -> Result<Self> {
        let norm = axis.norm();
        if !(norm > 0.0 && norm.is_finite()) || !point.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("cylinder axis/point must be finite and non-zero".into()));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::Validation(format!("cylinder radius must be positive, got {radius}")));
        }
        let mut a = axis / norm;
        let flip = match a.iter().find(|v| **v != 0.0) {
            _ if a.z != 0.0 => a.z < 0.0,
            Some(first) => *first < 0.0,
            None => false,
        };
        if flip {
            a = -a;
        }
        let c = point - a * a.dot(&point.coords);
        Ok(Cylinder {
            axis: Unit::new_unchecked(a),
            point: c,
            radius,
        })
    }

    pub fn axis(&self) -> &Unit<Vector> {
        &self.axis
    }

    pub fn point(&self) -> &Point {
        &self.point
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn diameter(&self) -> f64 {
        2.0 * self.radius
    }

    /// Signed distance to the surface: `‖(p − c) × a‖ − r`.
    pub fn distance(&self, p: &Point) -> f64 {
        (p - self.point).cross(&self.axis).norm() - self.radius
    }

    /// Angle between the two axes, ignoring direction, in radians.
    pub fn axis_angle_to(&self, other: &Vector) -> f64 {
        let cos = self.axis.dot(&other.normalize()).abs().min(1.0);
        cos.acos()
    }
}

/// Circle in a 2D plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Circle2D {
    pub center: Vector2<f64>,
    pub radius: f64,
}

impl Circle2D {
    pub fn new(center: Vector2<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) || !center.iter().all(|v| v.is_finite()) {
            return Err(Error::DegenerateFit(format!("invalid circle radius {radius}")));
        }
        Ok(Circle2D { center, radius })
    }

    pub fn distance(&self, p: &Vector2<f64>) -> f64 {
        (p - self.center).norm() - self.radius
    }
}
