use serde::{Deserialize, Serialize};

use super::{icp_register_detailed, IcpConfig, OdometrySequence, Trajectory};
use crate::error::{Error, Result};
use crate::geom::{estimate_normals, voxel_downsample, Point, PointCloud, RigidTransform};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailurePolicy {
    /// Keep the odometry-predicted pose for the scan and continue.
    #[default]
    Fallback,
    Abort,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScanStatus {
    Registered,
    /// Registration failed; the odometry prediction was used.
    OdometryFallback,
    /// Nothing survived the input filters; the scan added no points.
    Empty,
}

#[derive(Clone, Debug)]
pub struct MapOptions {
    /// Map voxel edge in meters.
    pub cell_edge: f64,
    pub policy: FailurePolicy,
    /// Pose of the first scan; identity puts the map in the first scan's frame.
    pub initial_pose: RigidTransform,
    /// Hook for removing dynamic elements from each scan before the other
    /// filters; `None` keeps every point.
    pub dynamic_filter: Option<fn(&PointCloud) -> PointCloud>,
}

impl Default for MapOptions {
    fn default() -> Self {
        MapOptions {
            cell_edge: 0.02,
            policy: FailurePolicy::Fallback,
            initial_pose: RigidTransform::identity(),
            dynamic_filter: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MapResult {
    pub map: PointCloud,
    pub trajectory: Trajectory,
    pub statuses: Vec<ScanStatus>,
}

/// Range filter followed by normal estimation with the sensor origin as the
/// viewpoint. Points whose neighbourhood is degenerate lose their normal and
/// are dropped.
pub fn input_filters(scan: &PointCloud, q: usize, range: (f64, f64)) -> Result<PointCloud> {
    let (lo, hi) = range;
    let kept = scan.without_normals().filter(|_, p| {
        let r = p.coords.norm();
        r >= lo && r <= hi
    });
    if kept.is_empty() {
        return Err(Error::EmptyScan);
    }
    if kept.len() < q {
        return Err(Error::InsufficientPoints {
            needed: q,
            got: kept.len(),
        });
    }
    let filtered = estimate_normals(&kept, q, &Point::origin())?.into_valid();
    if filtered.is_empty() {
        return Err(Error::EmptyScan);
    }
    Ok(filtered)
}

/// Builds a map by registering each scan against the map accumulated so far.
///
/// The pose guess for scan `i` applies the odometry increment
/// `O[i-1]⁻¹ O[i]` in the frame of the previous estimate:
/// `T̂[i] = T[i-1] · O[i-1]⁻¹ · O[i]`. ICP refines it, the registered scan is
/// merged into the map and the map is thinned to one point per voxel.
pub fn build_map(scans: &[PointCloud], odometry: &OdometrySequence, config: &IcpConfig, options: &MapOptions) -> Result<MapResult> {
    config.validate()?;
    if !(options.cell_edge > 0.0 && options.cell_edge.is_finite()) {
        return Err(Error::Config(format!("map cell edge must be positive, got {}", options.cell_edge)));
    }
    if scans.len() != odometry.len() {
        return Err(Error::CountMismatch {
            what_a: "scans",
            count_a: scans.len(),
            what_b: "odometry poses",
            count_b: odometry.len(),
        });
    }
    if scans.is_empty() {
        return Err(Error::Validation("no scans to map".into()));
    }
    let odom = odometry.poses();
    let range = (config.min_range, config.max_range);

    let mut map = PointCloud::empty();
    let mut poses: Vec<RigidTransform> = Vec::with_capacity(scans.len());
    let mut statuses = Vec::with_capacity(scans.len());

    for (i, scan) in scans.iter().enumerate() {
        let predicted = if i == 0 {
            options.initial_pose
        } else {
            poses[i - 1].compose(&odom[i - 1].inverse().compose(&odom[i]))
        };
        let raw = match options.dynamic_filter {
            Some(f) => f(scan),
            None => scan.clone(),
        };
        let filtered = match input_filters(&raw, config.normal_neighbors, range) {
            Ok(f) => f,
            Err(e) => {
                if options.policy == FailurePolicy::Abort {
                    return Err(e);
                }
                poses.push(predicted);
                statuses.push(ScanStatus::Empty);
                continue;
            }
        };

        let (pose, status) = if i == 0 || map.is_empty() {
            let status = if i == 0 {
                ScanStatus::Registered
            } else {
                ScanStatus::OdometryFallback
            };
            (predicted, status)
        } else {
            let reading = match config.reading_voxel_edge {
                Some(edge) => voxel_downsample(&filtered, edge)?,
                None => filtered.clone(),
            };
            match icp_register_detailed(&reading, &map, &predicted, config) {
                Ok(r) => (r.transform, ScanStatus::Registered),
                Err(e) if options.policy == FailurePolicy::Abort => return Err(e),
                Err(_) => (predicted, ScanStatus::OdometryFallback),
            }
        };
        map = voxel_downsample(&map.merged(&filtered.transformed(&pose)), options.cell_edge)?;
        poses.push(pose);
        statuses.push(status);
    }

    let trajectory = Trajectory::new(odometry.timestamps().to_vec(), poses)?;
    Ok(MapResult { map, trajectory, statuses })
}
