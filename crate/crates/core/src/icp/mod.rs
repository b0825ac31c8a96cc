//! Sequential scan-to-map registration seeded by odometry.

mod mapper;
mod register;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::RigidTransform;
use crate::io::StampedPoses;

pub use mapper::{build_map, input_filters, FailurePolicy, MapOptions, MapResult, ScanStatus};
pub use register::{icp_register, icp_register_detailed, Registration};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Stop once a step moves less than this (meters) ...
    pub translation_tolerance: f64,
    /// ... and rotates less than this (radians).
    pub rotation_tolerance: f64,
    /// Fraction of correspondences kept, smallest residuals first.
    pub trim_ratio: f64,
    pub max_correspondence_distance: f64,
    /// Neighbours per normal estimate in the input filters.
    pub normal_neighbors: usize,
    pub min_range: f64,
    pub max_range: f64,
    /// Voxel edge for thinning the reading before registration; `None` keeps
    /// every point. The map always receives the full filtered scan.
    pub reading_voxel_edge: Option<f64>,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            max_iterations: 40,
            translation_tolerance: 0.001,
            rotation_tolerance: 0.05f64.to_radians(),
            trim_ratio: 0.85,
            max_correspondence_distance: 1.0,
            normal_neighbors: 15,
            min_range: 0.5,
            max_range: 100.0,
            reading_voxel_edge: Some(0.05),
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("translation_tolerance", self.translation_tolerance),
            ("rotation_tolerance", self.rotation_tolerance),
            ("trim_ratio", self.trim_ratio),
            ("max_correspondence_distance", self.max_correspondence_distance),
            ("max_range", self.max_range),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.trim_ratio > 1.0 {
            return Err(Error::Config(format!("trim_ratio must be <= 1, got {}", self.trim_ratio)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be >= 1".into()));
        }
        if self.normal_neighbors < 3 {
            return Err(Error::Config(format!(
                "normal_neighbors must be >= 3, got {}",
                self.normal_neighbors
            )));
        }
        if !(self.min_range >= 0.0 && self.min_range < self.max_range) {
            return Err(Error::Config(format!(
                "range limits [{}, {}] are invalid",
                self.min_range, self.max_range
            )));
        }
        if let Some(e) = self.reading_voxel_edge {
            if !(e > 0.0 && e.is_finite()) {
                return Err(Error::Config(format!("reading_voxel_edge must be positive, got {e}")));
            }
        }
        Ok(())
    }
}

/// Poses with strictly increasing timestamps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    timestamps: Vec<f64>,
    poses: Vec<RigidTransform>,
}

/// Odometry poses in the odometry frame, same invariants as [`Trajectory`].
pub type OdometrySequence = Trajectory;

impl Trajectory {
    pub fn new(timestamps: Vec<f64>, poses: Vec<RigidTransform>) -> Result<Self> {
        if timestamps.len() != poses.len() {
            return Err(Error::CountMismatch {
                what_a: "timestamps",
                count_a: timestamps.len(),
                what_b: "poses",
                count_b: poses.len(),
            });
        }
        if let Some(bad) = timestamps.iter().find(|t| !t.is_finite()) {
            return Err(Error::Validation(format!("non-finite timestamp {bad}")));
        }
        if timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation("timestamps must be strictly increasing".into()));
        }
        Ok(Trajectory { timestamps, poses })
    }

    /// Poses stamped `0, 1, 2, ...` seconds.
    pub fn from_poses(poses: Vec<RigidTransform>) -> Self {
        Trajectory {
            timestamps: (0..poses.len()).map(|i| i as f64).collect(),
            poses,
        }
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn poses(&self) -> &[RigidTransform] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn last(&self) -> Option<&RigidTransform> {
        self.poses.last()
    }
}

impl TryFrom<StampedPoses> for Trajectory {
    type Error = Error;

    fn try_from(s: StampedPoses) -> Result<Self> {
        Trajectory::new(s.timestamps, s.poses)
    }
}

impl From<Trajectory> for StampedPoses {
    fn from(t: Trajectory) -> Self {
        StampedPoses {
            timestamps: t.timestamps,
            poses: t.poses,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trajectory_invariants() {
        let p = RigidTransform::identity();
        assert!(Trajectory::new(vec![0.0, 1.0], vec![p, p]).is_ok());
        assert!(matches!(Trajectory::new(vec![0.0], vec![p, p]), Err(Error::CountMismatch { .. })));
        assert!(Trajectory::new(vec![1.0, 1.0], vec![p, p]).is_err());
        assert!(Trajectory::new(vec![f64::NAN], vec![p]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(IcpConfig::default().validate().is_ok());
        for bad in [
            IcpConfig {
                trim_ratio: 1.5,
                ..Default::default()
            },
            IcpConfig {
                trim_ratio: 0.0,
                ..Default::default()
            },
            IcpConfig {
                max_iterations: 0,
                ..Default::default()
            },
            IcpConfig {
                min_range: 5.0,
                max_range: 1.0,
                ..Default::default()
            },
            IcpConfig {
                translation_tolerance: -1.0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
