use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dbh::mix_seed;
use crate::error::{Error, Result};
use crate::geom::{Point, PointCloud, RigidTransform, Vector};
use crate::icp::Trajectory;

const ODOMETRY_STREAM: u64 = u64::MAX;

/// A spinning multi-beam lidar reduced to an angular grid: each
/// (azimuth, elevation) bin returns the nearest scene point inside it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorModel {
    /// Radians.
    pub azimuth_resolution: f64,
    /// Radians.
    pub elevation_resolution: f64,
    pub min_elevation: f64,
    pub max_elevation: f64,
    pub min_range: f64,
    pub max_range: f64,
    /// Standard deviation of the range error, meters.
    pub range_noise: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        SensorModel {
            azimuth_resolution: 0.2f64.to_radians(),
            elevation_resolution: 0.4f64.to_radians(),
            min_elevation: (-40f64).to_radians(),
            max_elevation: 40f64.to_radians(),
            min_range: 0.3,
            max_range: 30.0,
            range_noise: 0.0,
        }
    }
}

impl SensorModel {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("azimuth_resolution", self.azimuth_resolution),
            ("elevation_resolution", self.elevation_resolution),
            ("max_range", self.max_range),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.min_elevation < self.max_elevation)
            || self.min_elevation < -std::f64::consts::FRAC_PI_2
            || self.max_elevation > std::f64::consts::FRAC_PI_2
        {
            return Err(Error::Config(format!(
                "elevation limits [{}, {}] are invalid",
                self.min_elevation, self.max_elevation
            )));
        }
        if !(self.min_range >= 0.0 && self.min_range < self.max_range) {
            return Err(Error::Config(format!(
                "range limits [{}, {}] are invalid",
                self.min_range, self.max_range
            )));
        }
        if !(self.range_noise >= 0.0 && self.range_noise.is_finite()) {
            return Err(Error::Config(format!("range_noise must be >= 0, got {}", self.range_noise)));
        }
        Ok(())
    }

    fn azimuth_bins(&self) -> usize {
        (std::f64::consts::TAU / self.azimuth_resolution).ceil() as usize
    }

    fn elevation_bins(&self) -> usize {
        ((self.max_elevation - self.min_elevation) / self.elevation_resolution).ceil() as usize
    }

    /// Angular bin of a sensor-frame point, or `None` outside the field of view.
    fn bin(&self, p: &Point) -> Option<(usize, f64)> {
        let r = p.coords.norm();
        if r < self.min_range || r > self.max_range {
            return None;
        }
        let el = (p.z / r).asin();
        if el < self.min_elevation || el >= self.max_elevation {
            return None;
        }
        let az = p.y.atan2(p.x) + std::f64::consts::PI;
        let n_az = self.azimuth_bins();
        let ia = ((az / self.azimuth_resolution) as usize).min(n_az - 1);
        let ie = (((el - self.min_elevation) / self.elevation_resolution) as usize).min(self.elevation_bins() - 1);
        Some((ie * n_az + ia, r))
    }
}

/// Per-step odometry corruption. Each increment is followed by a Gaussian
/// perturbation plus a constant bias, both expressed in the sensor frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdometryNoise {
    pub translation_sigma: f64,
    /// Radians.
    pub yaw_sigma: f64,
    /// Added to every step, meters along the sensor x axis.
    pub translation_drift: f64,
    /// Added to every step, radians.
    pub yaw_drift: f64,
}

impl OdometryNoise {
    pub fn validate(&self) -> Result<()> {
        let all = [("translation_sigma", self.translation_sigma), ("yaw_sigma", self.yaw_sigma)];
        for (name, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !self.translation_drift.is_finite() || !self.yaw_drift.is_finite() {
            return Err(Error::Config("odometry drift must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedScans {
    /// One cloud per pose, in the sensor frame.
    pub scans: Vec<PointCloud>,
    pub exact: Trajectory,
    pub noisy: Trajectory,
    /// `true` where a pose saw nothing.
    pub empty: Vec<bool>,
}

/// Scans `scene` from every pose of `path`.
///
/// Occlusion is approximated per angular bin: only the nearest point in each
/// (azimuth, elevation) cell is returned, then moved along its ray by
/// Gaussian range noise. The exact odometry is `path` itself; the noisy copy
/// accumulates `noise` on every increment.
pub fn simulate_scans(
    scene: &PointCloud,
    path: &Trajectory,
    sensor: &SensorModel,
    noise: &OdometryNoise,
    seed: u64,
) -> Result<SimulatedScans> {
    if path.is_empty() {
        return Err(Error::Validation("sensor path has no poses".into()));
    }
    sensor.validate()?;
    noise.validate()?;

    let scans: Vec<PointCloud> = path
        .poses()
        .par_iter()
        .enumerate()
        .map(|(i, pose)| scan_from(scene, pose, sensor, mix_seed(seed, i as u64)))
        .collect();
    let empty = scans.iter().map(PointCloud::is_empty).collect();
    let noisy = corrupt(path, noise, mix_seed(seed, ODOMETRY_STREAM))?;
    Ok(SimulatedScans {
        scans,
        exact: path.clone(),
        noisy,
        empty,
    })
}

fn scan_from(scene: &PointCloud, pose: &RigidTransform, sensor: &SensorModel, seed: u64) -> PointCloud {
    let to_sensor = pose.inverse();
    let cells = sensor.azimuth_bins() * sensor.elevation_bins();
    let mut nearest: Vec<(f64, usize)> = vec![(f64::INFINITY, usize::MAX); cells];
    let local: Vec<Point> = scene.points().iter().map(|p| to_sensor.transform_point(p)).collect();
    for (i, p) in local.iter().enumerate() {
        if let Some((cell, r)) = sensor.bin(p) {
            if r < nearest[cell].0 {
                nearest[cell] = (r, i);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let range = Normal::new(0.0, sensor.range_noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let points = nearest
        .into_iter()
        .filter(|(r, _)| r.is_finite())
        .filter_map(|(r, i)| {
            let p = local[i];
            if sensor.range_noise == 0.0 {
                return Some(p);
            }
            let noisy = r + range.sample(&mut rng);
            (noisy >= sensor.min_range && noisy <= sensor.max_range).then(|| Point::from(p.coords * (noisy / r)))
        })
        .collect();
    PointCloud::from_parts(points, None)
}

fn corrupt(path: &Trajectory, noise: &OdometryNoise, seed: u64) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Normal::new(0.0, noise.translation_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let y = Normal::new(0.0, noise.yaw_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let exact = path.poses();
    let mut poses = Vec::with_capacity(exact.len());
    poses.push(exact[0]);
    for i in 1..exact.len() {
        let step = exact[i - 1].inverse().compose(&exact[i]);
        let mut dx = noise.translation_drift;
        let mut dy = 0.0;
        let mut yaw = noise.yaw_drift;
        if noise.translation_sigma > 0.0 {
            dx += t.sample(&mut rng);
            dy += t.sample(&mut rng);
        }
        if noise.yaw_sigma > 0.0 {
            yaw += y.sample(&mut rng);
        }
        let error = RigidTransform::from_yaw(yaw, Vector::new(dx, dy, 0.0));
        poses.push(poses[i - 1].compose(&step).compose(&error));
    }
    Trajectory::new(path.timestamps().to_vec(), poses)
}

/// Back-and-forth lanes at the given `y` values, traversed alternately
/// towards `+x` and `-x` between `x_range`, with poses every `step` meters at
/// height `z` facing the direction of travel. Consecutive lanes are joined by
/// a straight leg along `y`.
pub fn serpentine_path(lanes: &[f64], x_range: (f64, f64), step: f64, z: f64) -> Result<Trajectory> {
    if lanes.is_empty() || !(step > 0.0 && step.is_finite()) || !(x_range.0 < x_range.1) {
        return Err(Error::Config("serpentine path needs lanes, a positive step and x0 < x1".into()));
    }
    let (x0, x1) = x_range;
    let n = ((x1 - x0) / step).round().max(1.0) as usize;
    let mut poses = Vec::new();
    for (k, &y) in lanes.iter().enumerate() {
        let forward = k % 2 == 0;
        let yaw = if forward { 0.0 } else { std::f64::consts::PI };
        if k > 0 {
            let prev = lanes[k - 1];
            let x = if forward { x0 } else { x1 };
            let legs = ((y - prev).abs() / step).round() as usize;
            let heading = if y > prev {
                std::f64::consts::FRAC_PI_2
            } else {
                -std::f64::consts::FRAC_PI_2
            };
            for j in 1..legs {
                let yj = prev + (y - prev) * j as f64 / legs as f64;
                poses.push(RigidTransform::from_yaw(heading, Vector::new(x, yj, z)));
            }
        }
        for j in 0..=n {
            let s = j as f64 / n as f64;
            let x = if forward { x0 + s * (x1 - x0) } else { x1 - s * (x1 - x0) };
            poses.push(RigidTransform::from_yaw(yaw, Vector::new(x, y, z)));
        }
    }
    Ok(Trajectory::from_poses(poses))
}
