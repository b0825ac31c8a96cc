//! Geometric value types and point-cloud primitives.

mod kdtree;
mod normals;
mod voxel;

use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use kdtree::{knn, KdTree};
pub use normals::{estimate_normals, NormalEstimate};
#[cfg(test)]
pub(crate) use voxel::cell_of;
pub use voxel::voxel_downsample;

pub type Point = nalgebra::Point3<f64>;
pub type Vector = Vector3<f64>;

const UNIT_TOLERANCE: f64 = 1e-6;
const ORTHONORMAL_TOLERANCE: f64 = 1e-9;

/// An ordered set of 3D points (meters), optionally with one unit normal per point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    normals: Option<Vec<Vector>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        check_finite(&points)?;
        Ok(PointCloud { points, normals: None })
    }

    pub fn with_normals(points: Vec<Point>, normals: Vec<Vector>) -> Result<Self> {
        check_finite(&points)?;
        if normals.len() != points.len() {
            return Err(Error::Validation(format!("{} normals for {} points", normals.len(), points.len())));
        }
        for (i, n) in normals.iter().enumerate() {
            if !n.iter().all(|v| v.is_finite()) || (n.norm() - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::Validation(format!(
                    "normal {i} is not a finite unit vector (norm {})",
                    n.norm()
                )));
            }
        }
        Ok(PointCloud {
            points,
            normals: Some(normals),
        })
    }

    /// Builds a cloud from values already known to satisfy the invariants.
    pub(crate) fn from_parts(points: Vec<Point>, normals: Option<Vec<Vector>>) -> Self {
        debug_assert!(normals.as_ref().is_none_or(|n| n.len() == points.len()));
        PointCloud { points, normals }
    }

    pub fn from_xyz(coords: &[[f64; 3]]) -> Result<Self> {
        Self::new(coords.iter().map(|c| Point::new(c[0], c[1], c[2])).collect())
    }

    pub fn empty() -> Self {
        PointCloud::default()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vector]> {
        self.normals.as_deref()
    }

    pub fn has_normals(&self) -> bool {
        self.normals.is_some()
    }

    pub fn into_parts(self) -> (Vec<Point>, Option<Vec<Vector>>) {
        (self.points, self.normals)
    }

    pub fn without_normals(&self) -> PointCloud {
        PointCloud::from_parts(self.points.clone(), None)
    }

    /// Subset in the order given by `indices`.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let normals = self.normals.as_ref().map(|n| indices.iter().map(|&i| n[i]).collect());
        PointCloud::from_parts(points, normals)
    }

    /// Keeps the points for which `keep` returns true.
    pub fn filter(&self, mut keep: impl FnMut(usize, &Point) -> bool) -> PointCloud {
        let indices: Vec<usize> = self
            .points
            .iter()
            .enumerate()
            .filter(|(i, p)| keep(*i, p))
            .map(|(i, _)| i)
            .collect();
        self.select(&indices)
    }

    pub fn transformed(&self, transform: &RigidTransform) -> PointCloud {
        let points = self.points.iter().map(|p| transform.transform_point(p)).collect();
        let normals = self
            .normals
            .as_ref()
            .map(|n| n.iter().map(|v| transform.transform_vector(v)).collect());
        PointCloud::from_parts(points, normals)
    }

    /// Appends `other`; normals survive only if both clouds carry them. An
    /// empty cloud merges as the other one unchanged.
    pub fn merged(&self, other: &PointCloud) -> PointCloud {
        if self.is_empty() {
            return other.clone();
        }
        if other.is_empty() {
            return self.clone();
        }
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        let normals = match (&self.normals, &other.normals) {
            (Some(a), Some(b)) => {
                let mut n = a.clone();
                n.extend_from_slice(b);
                Some(n)
            }
            _ => None,
        };
        PointCloud::from_parts(points, normals)
    }

    pub fn centroid(&self) -> Option<Point> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Vector::zeros(), |acc, p| acc + p.coords);
        Some(Point::from(sum / self.points.len() as f64))
    }

    /// Axis-aligned bounds, `None` for an empty cloud.
    pub fn bounds(&self) -> Option<BoundingBox> {
        let first = self.points.first()?;
        let (mut min, mut max) = (*first, *first);
        for p in &self.points[1..] {
            for k in 0..3 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        Some(BoundingBox { min, max })
    }
}

fn check_finite(points: &[Point]) -> Result<()> {
    match points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
        Some(i) => Err(Error::Validation(format!("point {i} has a non-finite coordinate"))),
        None => Ok(()),
    }
}

/// A rigid motion in SE(3): `x ↦ R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    rotation: Rotation3<f64>,
    translation: Vector,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Rotation3::identity(),
            translation: Vector::zeros(),
        }
    }

    /// Validates that `rotation` is orthonormal with determinant +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::Validation("non-finite transform".into()));
        }
        let gram = rotation.transpose() * rotation;
        let off = (gram - Matrix3::identity()).abs().max();
        if off > ORTHONORMAL_TOLERANCE || (rotation.determinant() - 1.0).abs() > ORTHONORMAL_TOLERANCE {
            return Err(Error::Validation("rotation is not orthonormal with determinant +1".into()));
        }
        Ok(RigidTransform {
            rotation: Rotation3::from_matrix_unchecked(rotation),
            translation,
        })
    }

    pub fn from_rotation(rotation: Rotation3<f64>, translation: Vector) -> Self {
        RigidTransform { rotation, translation }
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, translation: Vector) -> Self {
        Self::from_rotation(q.to_rotation_matrix(), translation)
    }

    pub fn from_translation(translation: Vector) -> Self {
        Self::from_rotation(Rotation3::identity(), translation)
    }

    /// Rotation about +z by `yaw` radians followed by `translation`.
    pub fn from_yaw(yaw: f64, translation: Vector) -> Self {
        Self::from_rotation(Rotation3::from_axis_angle(&Vector::z_axis(), yaw), translation)
    }

    /// Exponential map of a twist `(ω, t)`: rotation by the axis-angle `ω`, then `t`.
    pub fn from_axis_angle(omega: Vector, translation: Vector) -> Self {
        Self::from_rotation(Rotation3::new(omega), translation)
    }

    pub fn rotation(&self) -> &Rotation3<f64> {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> &Matrix3<f64> {
        self.rotation.matrix()
    }

    pub fn translation(&self) -> &Vector {
        &self.translation
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&self.rotation)
    }

    pub fn yaw(&self) -> f64 {
        let m = self.rotation.matrix();
        m[(1, 0)].atan2(m[(0, 0)])
    }

    pub fn inverse(&self) -> Self {
        let rotation = self.rotation.inverse();
        RigidTransform {
            rotation,
            translation: -(rotation * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Point) -> Point {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector) -> Vector {
        self.rotation * v
    }

    /// Rotation angle of the transform in radians, in `[0, π]`.
    pub fn angle(&self) -> f64 {
        let m = self.rotation.matrix();
        let cos = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        let skew = Vector::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
        (skew.norm() / 2.0).atan2(cos)
    }

    /// Translation and rotation distance between two poses: `(|Δt| m, ∠ΔR rad)`.
    pub fn distance_to(&self, other: &RigidTransform) -> (f64, f64) {
        let delta = self.inverse().compose(other);
        ((self.translation - other.translation).norm(), delta.angle())
    }

    /// Re-projects the rotation onto SO(3), removing accumulated round-off.
    pub fn renormalized(&self) -> Self {
        let mut rotation = self.rotation;
        rotation.renormalize();
        RigidTransform {
            rotation,
            translation: self.translation,
        }
    }
}

impl std::ops::Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

/// Axis-aligned box, `min ≤ max` componentwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    min: Point,
    max: Point,
}

impl BoundingBox {
    pub fn new(min: Point, max: Point) -> Result<Self> {
        if !(min.iter().chain(max.iter()).all(|v| v.is_finite())) {
            return Err(Error::Validation("non-finite bounding box".into()));
        }
        if (0..3).any(|k| min[k] > max[k]) {
            return Err(Error::Validation(format!("bounding box min {min:?} exceeds max {max:?}")));
        }
        Ok(BoundingBox { min, max })
    }

    pub fn min(&self) -> &Point {
        &self.min
    }

    pub fn max(&self) -> &Point {
        &self.max
    }

    pub fn center(&self) -> Point {
        nalgebra::center(&self.min, &self.max)
    }

    pub fn contains(&self, p: &Point) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn contains_xy(&self, p: &Point) -> bool {
        (0..2).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn expanded(&self, margin: f64) -> BoundingBox {
        let m = Vector::repeat(margin.max(0.0));
        BoundingBox {
            min: self.min - m,
            max: self.max + m,
        }
    }
}

/// Orthonormal basis `(u, v)` of the plane perpendicular to `axis`, with
/// `u × v = axis`. The helper direction is the coordinate axis least aligned
/// with `axis` (lowest index on ties), so `(0,0,1)` yields `u = x̂, v = ŷ`.
pub fn plane_basis(axis: &Unit<Vector>) -> (Vector, Vector) {
    let a = axis.as_ref();
    let mut k = 0;
    for i in 1..3 {
        if a[i].abs() < a[k].abs() {
            k = i;
        }
    }
    let mut helper = Vector::zeros();
    helper[k] = 1.0;
    let u = (helper - a * a.dot(&helper)).normalize();
    let v = a.cross(&u);
    (u, v)
}
