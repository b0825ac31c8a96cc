//! Synthetic ground truth: parametric stems, terrain, clutter and a simple
//! lidar scan simulator.

mod scanner;
mod scene;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dbh::{Cylinder, BREAST_HEIGHT};
use crate::error::{Error, Result};
use crate::geom::{plane_basis, Point, PointCloud, Vector};

pub use scanner::{serpentine_path, simulate_scans, OdometryNoise, SensorModel, SimulatedScans};
pub use scene::{benchmark_stand, generate_scene, plane_patch, Clutter, GroundPlane, Scene, SceneSpec};

/// Half of the thickest slice the estimators use; stems must reach above
/// breast height by at least this much.
pub const SLICE_REACH: f64 = 0.3;

/// One stem: a tilted, linearly tapered cylinder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    /// Axis point at ground level.
    pub base: [f64; 3],
    /// Diameter at breast height, meters.
    pub dbh: f64,
    /// Angle between the axis and vertical, radians.
    #[serde(default)]
    pub tilt: f64,
    /// Direction the stem leans towards, radians from +x.
    #[serde(default)]
    pub tilt_azimuth: f64,
    /// Radius decrease per meter of height.
    #[serde(default)]
    pub taper: f64,
    /// Vertical extent above the base, meters.
    pub height: f64,
    /// Standard deviation of radial bark displacement, meters.
    #[serde(default)]
    pub bark_sigma: f64,
    /// Sampled angular sector, degrees.
    #[serde(default = "full_arc")]
    pub visible_arc_deg: f64,
    /// Centre of the sampled sector, radians in the stem's cross-section basis.
    #[serde(default)]
    pub arc_center: f64,
    /// Surface points per square meter, overriding the scene-wide density.
    #[serde(default)]
    pub point_density: Option<f64>,
}

fn full_arc() -> f64 {
    360.0
}

impl StemSpec {
    pub fn vertical(base: [f64; 3], dbh: f64, height: f64) -> Self {
        StemSpec {
            base,
            dbh,
            tilt: 0.0,
            tilt_azimuth: 0.0,
            taper: 0.0,
            height,
            bark_sigma: 0.0,
            visible_arc_deg: 360.0,
            arc_center: 0.0,
            point_density: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if !(self.dbh > 0.0 && self.dbh.is_finite()) {
            return bad(format!("stem dbh must be positive, got {}", self.dbh));
        }
        if !(0.0..=360.0).contains(&self.visible_arc_deg) {
            return bad(format!("visible arc must lie in [0, 360], got {}", self.visible_arc_deg));
        }
        if !(self.height > BREAST_HEIGHT + SLICE_REACH) {
            return bad(format!(
                "stem height must exceed {}, got {}",
                BREAST_HEIGHT + SLICE_REACH,
                self.height
            ));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.tilt) {
            return bad(format!("stem tilt must lie in [0, π/2), got {}", self.tilt));
        }
        if !(self.bark_sigma >= 0.0) || !self.taper.is_finite() || !self.base.iter().all(|v| v.is_finite()) {
            return bad("stem parameters must be finite and bark sigma non-negative".into());
        }
        if let Some(d) = self.point_density {
            if !(d > 0.0 && d.is_finite()) {
                return bad(format!("stem point density must be positive, got {d}"));
            }
        }
        if self.radius_at_height(self.height) <= 0.0 {
            return bad("taper makes the radius vanish below the stem top".into());
        }
        Ok(())
    }

    pub fn axis(&self) -> Vector {
        let (s, c) = self.tilt.sin_cos();
        Vector::new(s * self.tilt_azimuth.cos(), s * self.tilt_azimuth.sin(), c)
    }

    /// Axial length from base to top.
    pub fn length(&self) -> f64 {
        self.height / self.tilt.cos()
    }

    /// Radius at `z` meters above the base.
    pub fn radius_at_height(&self, z: f64) -> f64 {
        self.dbh / 2.0 - self.taper * (z - BREAST_HEIGHT)
    }

    /// The stem's cylinder at breast height.
    pub fn truth(&self) -> Cylinder {
        let axis = self.axis();
        let point = Point::from(self.base) + axis * (BREAST_HEIGHT / self.tilt.cos());
        Cylinder::new(axis, point, self.dbh / 2.0).expect("validated stem")
    }
}

/// Samples `spec`'s surface at `density` points per square meter.
///
/// Points are uniform over the visible sector and the axial length, each
/// displaced radially by Gaussian bark noise. Returns the points and the
/// exact cylinder at breast height.
pub fn generate_stem_cloud(spec: &StemSpec, density: f64, seed: u64) -> Result<(PointCloud, Cylinder)> {
    spec.validate()?;
    if !(density > 0.0 && density.is_finite()) {
        return Err(Error::Config(format!("point density must be positive, got {density}")));
    }
    let axis = spec.axis();
    let (u, v) = plane_basis(&nalgebra::Unit::new_unchecked(axis));
    let arc = spec.visible_arc_deg.to_radians();
    let length = spec.length();
    let mean_radius = spec.radius_at_height(spec.height / 2.0);
    let count = (density * arc * mean_radius * length).round() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bark = Normal::new(0.0, spec.bark_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let base = Point::from(spec.base);
    let points: Vec<Point> = (0..count)
        .map(|_| {
            let s = rng.random_range(0.0..length);
            let theta = spec.arc_center + (rng.random::<f64>() - 0.5) * arc;
            let mut r = spec.radius_at_height(s * spec.tilt.cos());
            if spec.bark_sigma > 0.0 {
                r += bark.sample(&mut rng);
            }
            base + axis * s + (u * theta.cos() + v * theta.sin()) * r
        })
        .collect();
    Ok((PointCloud::new(points)?, spec.truth()))
}
