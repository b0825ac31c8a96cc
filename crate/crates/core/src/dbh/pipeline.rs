use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{axis_lls, ransac_cylinder};
use crate::dtm::RasterDtm;
use crate::error::{Error, Result};
use crate::geom::{estimate_normals, BoundingBox, Point, PointCloud, Vector};

/// Breast height above local ground, in meters.
pub const BREAST_HEIGHT: f64 = 1.3;

/// Extra height kept around a slice when estimating normals, so that points
/// near the slice edges see a two-sided neighbourhood.
const NORMALS_MARGIN: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AxisMode {
    /// Least-squares axis from surface normals.
    Lls,
    /// Axis assumed to be `(0, 0, 1)`.
    Vertical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefineMode {
    None,
    Nls,
    /// Non-linear fit with the normals-alignment penalty.
    Nlsn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Voting {
    Median,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    pub axis_mode: AxisMode,
    pub refine_mode: RefineMode,
    pub voting: Voting,
    /// Neighbours per normal estimate (`q`).
    pub normal_neighbors: usize,
    /// Number of sub-slices fitted independently (`n_cyls`).
    pub band_count: usize,
    /// Slice thickness `h` in meters.
    pub slice_thickness: f64,
    /// RANSAC inlier tolerance `ε` in meters.
    pub ransac_tolerance: f64,
    /// `λ` of the normals penalty.
    pub normals_weight: f64,
    pub ransac_iterations: usize,
    /// Minimum points per band, and minimum RANSAC inliers.
    pub min_points: usize,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            axis_mode: AxisMode::Vertical,
            refine_mode: RefineMode::Nls,
            voting: Voting::Median,
            normal_neighbors: 15,
            band_count: 5,
            slice_thickness: 0.6,
            ransac_tolerance: 0.02,
            normals_weight: 1.0,
            ransac_iterations: 200,
            min_points: 20,
        }
    }
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.slice_thickness > 0.0 && self.slice_thickness.is_finite()) {
            return fail(format!("slice_thickness must be > 0, got {}", self.slice_thickness));
        }
        if !(self.ransac_tolerance > 0.0 && self.ransac_tolerance.is_finite()) {
            return fail(format!("ransac_tolerance must be > 0, got {}", self.ransac_tolerance));
        }
        if self.band_count == 0 {
            return fail("band_count must be >= 1".into());
        }
        if !(self.normals_weight >= 0.0 && self.normals_weight.is_finite()) {
            return fail(format!("normals_weight must be >= 0, got {}", self.normals_weight));
        }
        if self.normal_neighbors < 3 {
            return fail(format!("normal_neighbors must be >= 3, got {}", self.normal_neighbors));
        }
        if self.ransac_iterations == 0 {
            return fail("ransac_iterations must be >= 1".into());
        }
        let floor = if self.refine_mode == RefineMode::None { 3 } else { 5 };
        if self.min_points < floor {
            return fail(format!("min_points must be >= {floor} for this method, got {}", self.min_points));
        }
        Ok(())
    }

    pub fn method(&self) -> MethodChain {
        MethodChain {
            axis: self.axis_mode,
            refine: self.refine_mode,
        }
    }

    /// Whether the chain consumes surface normals (LLS axis or NLSN).
    pub fn needs_normals(&self) -> bool {
        self.method().needs_normals()
    }
}

/// Axis mode plus refinement; the circle fit is always Hyper.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MethodChain {
    pub axis: AxisMode,
    pub refine: RefineMode,
}

impl MethodChain {
    /// The six chains compared in the evaluation, in table order.
    pub const ALL: [MethodChain; 6] = [
        MethodChain {
            axis: AxisMode::Lls,
            refine: RefineMode::None,
        },
        MethodChain {
            axis: AxisMode::Vertical,
            refine: RefineMode::None,
        },
        MethodChain {
            axis: AxisMode::Lls,
            refine: RefineMode::Nls,
        },
        MethodChain {
            axis: AxisMode::Vertical,
            refine: RefineMode::Nls,
        },
        MethodChain {
            axis: AxisMode::Lls,
            refine: RefineMode::Nlsn,
        },
        MethodChain {
            axis: AxisMode::Vertical,
            refine: RefineMode::Nlsn,
        },
    ];

    pub fn needs_normals(&self) -> bool {
        self.axis == AxisMode::Lls || self.refine == RefineMode::Nlsn
    }

    pub fn name(&self) -> &'static str {
        match (self.axis, self.refine) {
            (AxisMode::Lls, RefineMode::None) => "A_LLS",
            (AxisMode::Vertical, RefineMode::None) => "A_N",
            (AxisMode::Lls, RefineMode::Nls) => "A_LLS+C_NLS",
            (AxisMode::Vertical, RefineMode::Nls) => "A_N+C_NLS",
            (AxisMode::Lls, RefineMode::Nlsn) => "A_LLS+C_NLSN",
            (AxisMode::Vertical, RefineMode::Nlsn) => "A_N+C_NLSN",
        }
    }

    /// Accepts the names produced by [`MethodChain::name`], case-insensitive,
    /// with an optional `+H` for the circle fit.
    pub fn parse(s: &str) -> Option<MethodChain> {
        let cleaned: String = s
            .to_ascii_uppercase()
            .split('+')
            .map(str::trim)
            .filter(|part| *part != "H" && *part != "HYPER")
            .collect::<Vec<_>>()
            .join("+");
        MethodChain::ALL.into_iter().find(|m| m.name() == cleaned)
    }

    pub fn apply(&self, config: EstimationConfig) -> EstimationConfig {
        EstimationConfig {
            axis_mode: self.axis,
            refine_mode: self.refine,
            ..config
        }
    }
}

impl fmt::Display for MethodChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodChain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodChain::parse(s).ok_or_else(|| Error::Config(format!("unknown method chain {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateStatus {
    Ok,
    EmptySlice,
    InsufficientPoints,
    DegenerateAxis,
    NoFit,
}

impl EstimateStatus {
    pub fn is_ok(&self) -> bool {
        *self == EstimateStatus::Ok
    }
}

/// Per-band outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandFit {
    pub points: usize,
    pub diameter: Option<f64>,
    pub inliers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DbhEstimate {
    /// Voted diameter in meters; `None` unless `status` is `Ok`.
    pub diameter: Option<f64>,
    pub bands: Vec<BandFit>,
    pub status: EstimateStatus,
}

impl DbhEstimate {
    pub fn failed(status: EstimateStatus) -> Self {
        DbhEstimate {
            diameter: None,
            bands: Vec::new(),
            status,
        }
    }

    pub fn band_diameters(&self) -> Vec<Option<f64>> {
        self.bands.iter().map(|b| b.diameter).collect()
    }

    pub fn inlier_counts(&self) -> Vec<usize> {
        self.bands.iter().map(|b| b.inliers).collect()
    }
}

/// One segmented tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeRecord {
    pub id: u64,
    pub box_min: [f64; 3],
    pub box_max: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_dbh_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub species: Option<String>,
}

impl TreeRecord {
    pub fn bounding_box(&self) -> Result<BoundingBox> {
        BoundingBox::new(Point::from(self.box_min), Point::from(self.box_max))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub id: u64,
    pub diameter_m: Option<f64>,
    pub status: EstimateStatus,
    pub per_band_diameters: Vec<Option<f64>>,
    pub inlier_counts: Vec<usize>,
}

impl EstimateRecord {
    pub fn new(id: u64, estimate: &DbhEstimate) -> Self {
        EstimateRecord {
            id,
            diameter_m: estimate.diameter,
            status: estimate.status,
            per_band_diameters: estimate.band_diameters(),
            inlier_counts: estimate.inlier_counts(),
        }
    }
}

/// Points of `map` inside `bounds` whose height lies within `h/2` of breast
/// height above the ground at the box centre. Normals are carried along.
pub fn extract_slice(map: &PointCloud, bounds: &BoundingBox, dtm: &RasterDtm, h: f64, min_points: usize) -> Result<PointCloud> {
    let (lo, hi) = slice_range(bounds, dtm, h)?;
    let slice = map.filter(|_, p| bounds.contains(p) && p.z >= lo && p.z <= hi);
    if slice.len() < min_points.max(1) {
        return Err(Error::EmptySlice {
            needed: min_points.max(1),
            got: slice.len(),
        });
    }
    Ok(slice)
}

/// Like [`extract_slice`], but normals are recomputed with `q` neighbours
/// from the tree's points in a slightly taller window, replacing any normals
/// the map carried.
pub fn extract_slice_with_normals(
    map: &PointCloud,
    bounds: &BoundingBox,
    dtm: &RasterDtm,
    h: f64,
    q: usize,
    min_points: usize,
) -> Result<PointCloud> {
    let (lo, hi) = slice_range(bounds, dtm, h)?;
    let region = map
        .without_normals()
        .filter(|_, p| bounds.contains(p) && p.z >= lo - NORMALS_MARGIN && p.z <= hi + NORMALS_MARGIN);
    let inside = |p: &Point| p.z >= lo && p.z <= hi;
    let count = region.points().iter().filter(|p| inside(p)).count();
    if count < min_points.max(1) {
        return Err(Error::EmptySlice {
            needed: min_points.max(1),
            got: count,
        });
    }
    let viewpoint = region.centroid().unwrap_or_else(Point::origin);
    let estimate = estimate_normals(&region, q.min(region.len()).max(3), &viewpoint)?;
    let valid = estimate.valid;
    Ok(estimate.cloud.filter(|i, p| valid[i] && inside(p)))
}

fn slice_range(bounds: &BoundingBox, dtm: &RasterDtm, h: f64) -> Result<(f64, f64)> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!("slice thickness must be > 0, got {h}")));
    }
    let c = bounds.center();
    let centre = dtm.ground_height(c.x, c.y) + BREAST_HEIGHT;
    Ok((centre - h / 2.0, centre + h / 2.0))
}

/// Splits `slice` into `band_count` equal-thickness bands along the stem
/// axis, fits each band with RANSAC and votes on the diameters.
///
/// Bands span the observed extent of the slice along the axis: height for
/// the vertical axis, or the coordinate along the normals-derived axis of
/// the whole slice. Normals are estimated from the slice itself when needed
/// and absent. Bands with fewer than `min_points` points, or whose fit
/// fails, do not vote.
pub fn estimate_dbh(slice: &PointCloud, config: &EstimationConfig, seed: u64) -> DbhEstimate {
    if slice.len() < config.min_points.max(1) {
        return DbhEstimate::failed(EstimateStatus::EmptySlice);
    }
    let owned;
    let slice = if config.needs_normals() && !slice.has_normals() {
        if slice.len() < config.normal_neighbors.max(3) {
            return DbhEstimate::failed(EstimateStatus::InsufficientPoints);
        }
        let viewpoint = slice.centroid().unwrap_or_else(Point::origin);
        match estimate_normals(slice, config.normal_neighbors, &viewpoint) {
            Ok(est) => {
                owned = est.into_valid();
                &owned
            }
            Err(_) => return DbhEstimate::failed(EstimateStatus::InsufficientPoints),
        }
    } else {
        slice
    };

    let direction = match config.axis_mode {
        AxisMode::Vertical => Vector::z(),
        AxisMode::Lls => match slice.normals().map(axis_lls) {
            Some(Ok(a)) => a.into_inner(),
            _ => return DbhEstimate::failed(EstimateStatus::DegenerateAxis),
        },
    };
    let coords: Vec<f64> = slice.points().iter().map(|p| p.coords.dot(&direction)).collect();
    let lo = coords.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = coords.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n_bands = config.band_count.max(1);
    let width = (hi - lo) / n_bands as f64;

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_bands];
    for (i, t) in coords.iter().enumerate() {
        let band = if width > 0.0 {
            (((t - lo) / width).floor() as usize).min(n_bands - 1)
        } else {
            0
        };
        members[band].push(i);
    }

    let bands: Vec<BandFit> = members
        .iter()
        .enumerate()
        .map(|(b, idx)| {
            let mut fit = BandFit {
                points: idx.len(),
                diameter: None,
                inliers: 0,
            };
            if idx.len() >= config.min_points {
                if let Ok(r) = ransac_cylinder(&slice.select(idx), config, mix_seed(seed, b as u64)) {
                    fit.diameter = Some(r.cylinder.diameter());
                    fit.inliers = r.inliers.len();
                }
            }
            fit
        })
        .collect();

    let diameters: Vec<f64> = bands.iter().filter_map(|b| b.diameter).collect();
    let status = if !diameters.is_empty() {
        EstimateStatus::Ok
    } else if bands.iter().all(|b| b.points < config.min_points) {
        EstimateStatus::InsufficientPoints
    } else {
        EstimateStatus::NoFit
    };
    DbhEstimate {
        diameter: vote(&diameters, config.voting),
        bands,
        status,
    }
}

/// Slice extraction plus [`estimate_dbh`] for one tree. Failures are
/// reported through the status, never as errors.
pub fn estimate_tree(map: &PointCloud, bounds: &BoundingBox, dtm: &RasterDtm, config: &EstimationConfig, seed: u64) -> DbhEstimate {
    let slice = if config.needs_normals() {
        extract_slice_with_normals(map, bounds, dtm, config.slice_thickness, config.normal_neighbors, config.min_points)
    } else {
        extract_slice(map, bounds, dtm, config.slice_thickness, config.min_points).map(|s| s.without_normals())
    };
    match slice {
        Ok(slice) => estimate_dbh(&slice, config, seed),
        Err(_) => DbhEstimate::failed(EstimateStatus::EmptySlice),
    }
}

/// Median (mean of the middle pair for even counts) or mean.
/// [`estimate_tree`] for every record, in parallel; tree `id` draws from
/// seed stream `mix_seed(seed, id)`.
pub fn estimate_trees(map: &PointCloud, trees: &[TreeRecord], dtm: &RasterDtm, config: &EstimationConfig, seed: u64) -> Vec<DbhEstimate> {
    trees
        .par_iter()
        .map(|t| match t.bounding_box() {
            Ok(bounds) => estimate_tree(map, &bounds, dtm, config, mix_seed(seed, t.id)),
            Err(_) => DbhEstimate::failed(EstimateStatus::EmptySlice),
        })
        .collect()
}

pub fn vote(values: &[f64], voting: Voting) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    match voting {
        Voting::Mean => Some(values.iter().sum::<f64>() / values.len() as f64),
        Voting::Median => {
            let mut v = values.to_vec();
            v.sort_by(f64::total_cmp);
            let m = v.len() / 2;
            Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
        }
    }
}

/// Derives an independent stream seed from `seed` and `stream` (SplitMix64
/// finalizer).
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
