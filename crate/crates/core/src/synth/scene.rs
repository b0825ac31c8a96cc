use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_stem_cloud, StemSpec};
use crate::dbh::{mix_seed, Cylinder, TreeRecord};
use crate::error::{Error, Result};
use crate::geom::{Point, PointCloud, Vector};

/// Clutter points start this far above the ground.
const CLUTTER_FLOOR: f64 = 1.0;
/// Seed streams for entities other than stems.
const GROUND_STREAM: u64 = u64::MAX;
const CLUTTER_STREAM: u64 = 1 << 32;

/// Ground surface `z = offset + slope[0]·x + slope[1]·y`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundPlane {
    pub slope: [f64; 2],
    #[serde(default)]
    pub offset: f64,
}

impl GroundPlane {
    pub fn height(&self, x: f64, y: f64) -> f64 {
        self.offset + self.slope[0] * x + self.slope[1] * y
    }
}

/// Random branch and noise points inside each tree's box, above 1 m.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Clutter {
    None,
    /// Points per cubic meter of box volume.
    PerCubicMeter(f64),
    /// Count relative to the tree's stem points in the same height range.
    FractionOfStem(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub stems: Vec<StemSpec>,
    #[serde(default)]
    pub ground: GroundPlane,
    /// Standard deviation of ground elevation noise, meters.
    #[serde(default)]
    pub ground_roughness: f64,
    /// Ground points per square meter.
    pub ground_density: f64,
    /// Stem surface points per square meter.
    pub stem_density: f64,
    #[serde(default = "no_clutter")]
    pub clutter: Clutter,
    /// Ground extends this far beyond the outermost stems.
    #[serde(default = "default_margin")]
    pub ground_margin: f64,
    /// Horizontal padding of tree boxes around the stem footprint.
    #[serde(default = "default_box_margin")]
    pub box_margin: f64,
    pub seed: u64,
}

fn no_clutter() -> Clutter {
    Clutter::None
}

fn default_margin() -> f64 {
    4.0
}

fn default_box_margin() -> f64 {
    0.15
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    /// One record per stem, ids `1..=n` in `stems` order, with truth DBH.
    pub trees: Vec<TreeRecord>,
    pub truths: Vec<Cylinder>,
    pub ground: GroundPlane,
    /// Per-point label: stem index for stem and clutter points, `None` for ground.
    pub labels: Vec<Option<usize>>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stems.is_empty() {
            return Err(Error::Validation("scene needs at least one stem".into()));
        }
        for s in &self.stems {
            s.validate()?;
        }
        let non_negative = [
            ("ground_roughness", self.ground_roughness),
            ("ground_density", self.ground_density),
            ("ground_margin", self.ground_margin),
            ("box_margin", self.box_margin),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.stem_density > 0.0 && self.stem_density.is_finite()) {
            return Err(Error::Config(format!("stem_density must be positive, got {}", self.stem_density)));
        }
        match self.clutter {
            Clutter::PerCubicMeter(v) | Clutter::FractionOfStem(v) if !(v >= 0.0 && v.is_finite()) => {
                Err(Error::Config(format!("clutter amount must be >= 0, got {v}")))
            }
            _ => Ok(()),
        }
    }
}

/// Materializes a scene: stems standing on the ground plane (their base z is
/// replaced by the ground height), ground points, and clutter. Every stem,
/// the ground and every clutter box draw from their own seed stream, so the
/// output does not depend on evaluation order.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let stems: Vec<StemSpec> = spec
        .stems
        .iter()
        .map(|s| StemSpec {
            base: [s.base[0], s.base[1], spec.ground.height(s.base[0], s.base[1])],
            ..s.clone()
        })
        .collect();

    let generated: Vec<(PointCloud, Cylinder)> = stems
        .par_iter()
        .enumerate()
        .map(|(k, s)| generate_stem_cloud(s, s.point_density.unwrap_or(spec.stem_density), mix_seed(spec.seed, k as u64)))
        .collect::<Result<_>>()?;

    let trees: Vec<TreeRecord> = stems.iter().enumerate().map(|(k, s)| tree_record(k, s, spec.box_margin)).collect();

    let clutter: Vec<Vec<Point>> = trees
        .par_iter()
        .zip(&generated)
        .enumerate()
        .map(|(k, (tree, (stem, _)))| {
            let ground = stems[k].base[2];
            clutter_points(tree, stem, ground, spec.clutter, mix_seed(spec.seed, CLUTTER_STREAM + k as u64))
        })
        .collect();

    let ground = ground_points(spec, &stems);

    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (k, ((stem, _), extra)) in generated.iter().zip(&clutter).enumerate() {
        points.extend_from_slice(stem.points());
        points.extend_from_slice(extra);
        labels.extend(std::iter::repeat_n(Some(k), stem.len() + extra.len()));
    }
    labels.extend(std::iter::repeat_n(None, ground.len()));
    points.extend(ground);

    Ok(Scene {
        cloud: PointCloud::new(points)?,
        trees,
        truths: generated.into_iter().map(|(_, c)| c).collect(),
        ground: spec.ground,
        labels,
    })
}

fn tree_record(k: usize, s: &StemSpec, margin: f64) -> TreeRecord {
    let top = Point::from(s.base) + s.axis() * s.length();
    let r = s.radius_at_height(0.0).max(s.radius_at_height(s.height)) + 3.0 * s.bark_sigma + margin;
    let base = Point::from(s.base);
    TreeRecord {
        id: k as u64 + 1,
        box_min: [base.x.min(top.x) - r, base.y.min(top.y) - r, base.z - 0.5],
        box_max: [base.x.max(top.x) + r, base.y.max(top.y) + r, top.z + 0.5],
        truth_dbh_m: Some(s.dbh),
        species: None,
    }
}

fn clutter_points(tree: &TreeRecord, stem: &PointCloud, ground: f64, clutter: Clutter, seed: u64) -> Vec<Point> {
    let floor = ground + CLUTTER_FLOOR;
    let (lo, hi) = (tree.box_min, tree.box_max);
    if hi[2] <= floor {
        return Vec::new();
    }
    let volume = (hi[0] - lo[0]) * (hi[1] - lo[1]) * (hi[2] - floor);
    let count = match clutter {
        Clutter::None => 0,
        Clutter::PerCubicMeter(d) => (d * volume).round() as usize,
        Clutter::FractionOfStem(f) => (f * stem.points().iter().filter(|p| p.z >= floor).count() as f64).round() as usize,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            Point::new(
                rng.random_range(lo[0]..hi[0]),
                rng.random_range(lo[1]..hi[1]),
                rng.random_range(floor..hi[2]),
            )
        })
        .collect()
}

fn ground_points(spec: &SceneSpec, stems: &[StemSpec]) -> Vec<Point> {
    let m = spec.ground_margin;
    let xs = stems.iter().map(|s| s.base[0]);
    let ys = stems.iter().map(|s| s.base[1]);
    let (x0, x1) = (
        xs.clone().fold(f64::INFINITY, f64::min) - m,
        xs.fold(f64::NEG_INFINITY, f64::max) + m,
    );
    let (y0, y1) = (
        ys.clone().fold(f64::INFINITY, f64::min) - m,
        ys.fold(f64::NEG_INFINITY, f64::max) + m,
    );
    let count = (spec.ground_density * (x1 - x0) * (y1 - y0)).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, GROUND_STREAM));
    let noise = Normal::new(0.0, spec.ground_roughness.max(f64::MIN_POSITIVE)).expect("finite sigma");
    (0..count)
        .map(|_| {
            let (x, y) = (rng.random_range(x0..=x1), rng.random_range(y0..=y1));
            let mut z = spec.ground.height(x, y);
            if spec.ground_roughness > 0.0 {
                z += noise.sample(&mut rng);
            }
            Point::new(x, y, z)
        })
        .collect()
}

/// Uniform points on the parallelogram `origin + s·e1 + t·e2`, `s, t ∈ [0, 1]`.
pub fn plane_patch(origin: Point, e1: Vector, e2: Vector, density: f64, seed: u64) -> PointCloud {
    let area = e1.cross(&e2).norm();
    let count = (density * area).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..count)
        .map(|_| origin + e1 * rng.random::<f64>() + e2 * rng.random::<f64>())
        .collect();
    PointCloud::from_parts(pts, None)
}

/// The 25-stem benchmark stand: a 5 × 5 grid at 4 m spacing with DBH
/// 0.15-0.45 m, small random tilt and taper, 1 cm bark noise and clutter
/// amounting to 20% of the stem points above 1 m.
pub fn benchmark_stand(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xBE7C));
    let tilt = Normal::new(0.0, 3f64.to_radians()).expect("finite sigma");
    let stems = (0..25)
        .map(|k| {
            let (i, j) = ((k % 5) as f64, (k / 5) as f64);
            StemSpec {
                base: [4.0 * i, 4.0 * j, 0.0],
                dbh: rng.random_range(0.15..0.45),
                tilt: f64::min(tilt.sample(&mut rng).abs(), 10f64.to_radians()),
                tilt_azimuth: rng.random_range(0.0..std::f64::consts::TAU),
                taper: rng.random_range(0.0..0.015),
                height: 6.0,
                bark_sigma: 0.01,
                visible_arc_deg: 360.0,
                arc_center: 0.0,
                point_density: None,
            }
        })
        .collect();
    SceneSpec {
        stems,
        ground: GroundPlane::default(),
        ground_roughness: 0.01,
        ground_density: 400.0,
        stem_density: 2500.0,
        clutter: Clutter::FractionOfStem(0.2),
        ground_margin: 4.0,
        box_margin: 0.15,
        seed,
    }
}
