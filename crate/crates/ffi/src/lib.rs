//! C ABI for `dbhmap`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`, `*_load`
//! or `*_build` functions and released with the matching `*_free`. Every
//! fallible call returns a [`DbhmapStatus`]; on failure the message is kept
//! per thread and read with [`dbhmap_last_error_message`]. Panics are caught
//! and reported as [`DbhmapStatus::Panic`].
//!
//! Poses are passed as 7 doubles `tx, ty, tz, qx, qy, qz, qw`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dbhmap::dbh::{estimate_tree, EstimateStatus, EstimationConfig, MethodChain, Voting};
use dbhmap::dtm::{build_dtm, DtmConfig, RasterDtm};
use dbhmap::geom::{BoundingBox, Point, PointCloud, RigidTransform, Vector};
use dbhmap::icp::{build_map, IcpConfig, MapOptions, Trajectory};
use dbhmap::io::{load_cloud, save_cloud, CloudFormat};
use dbhmap::metrics::{compute_metrics, TreeObservation};
use dbhmap::Error;
use nalgebra::{Quaternion, UnitQuaternion};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DbhmapStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidConfig = 2,
    Io = 3,
    Parse = 4,
    InvalidData = 5,
    InsufficientData = 6,
    Processing = 7,
    Panic = 8,
}

/// Outcome of one tree, mirroring the library's estimate status.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DbhmapEstimateStatus {
    Ok = 0,
    EmptySlice = 1,
    InsufficientPoints = 2,
    DegenerateAxis = 3,
    NoFit = 4,
}

/// Method chains, in the order `A_LLS`, `A_N`, `A_LLS+C_NLS`, `A_N+C_NLS`,
/// `A_LLS+C_NLSN`, `A_N+C_NLSN`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DbhmapMethod {
    AxisLls = 0,
    AxisVertical = 1,
    AxisLlsNls = 2,
    AxisVerticalNls = 3,
    AxisLlsNlsn = 4,
    AxisVerticalNlsn = 5,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DbhmapEstimationParams {
    /// A `DbhmapMethod` value.
    pub method: u32,
    /// Normal-estimation neighbours.
    pub q: usize,
    pub n_cyls: usize,
    /// Slice thickness, meters.
    pub h: f64,
    /// RANSAC inlier tolerance, meters.
    pub epsilon: f64,
    /// Non-zero votes with the mean instead of the median.
    pub mean_voting: i32,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DbhmapEstimate {
    /// Meters; NaN when the tree failed.
    pub diameter_m: f64,
    pub status: DbhmapEstimateStatus,
    /// Bands that produced a fit.
    pub fitted_bands: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DbhmapMetrics {
    /// NaN when every considered observation failed.
    pub rmse_cm: f64,
    pub bias_cm: f64,
    pub fail_rate: f64,
    pub n_total: usize,
    pub n_failed: usize,
    pub n_excluded: usize,
}

pub struct DbhmapCloud(PointCloud);

pub struct DbhmapDtm(RasterDtm);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DbhmapStatus {
    match e {
        Error::Config(_) => DbhmapStatus::InvalidConfig,
        Error::Io { .. } => DbhmapStatus::Io,
        Error::Parse { .. } | Error::Json(_) | Error::Csv(_) => DbhmapStatus::Parse,
        Error::Validation(_) | Error::CountMismatch { .. } => DbhmapStatus::InvalidData,
        Error::InsufficientPoints { .. } | Error::EmptyScan | Error::EmptySlice { .. } | Error::EmptyReport => {
            DbhmapStatus::InsufficientData
        }
        _ => DbhmapStatus::Processing,
    }
}

enum Failure {
    Null,
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DbhmapStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DbhmapStatus::Ok
        }
        Ok(Err(Failure::Null)) => {
            set_error("null pointer argument".into());
            DbhmapStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            DbhmapStatus::Panic
        }
    }
}

unsafe fn non_null<'a, T>(p: *const T) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null)
}

unsafe fn slice<'a, T>(p: *const T, n: usize) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null);
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    let s = non_null(p).map(|_| CStr::from_ptr(p))?;
    let s = s
        .to_str()
        .map_err(|_| Failure::Lib(Error::Config("path is not valid UTF-8".into())))?;
    Ok(Path::new(s))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null);
    }
    out.write(value);
    Ok(())
}

fn pose_from(v: &[f64]) -> Result<RigidTransform, Failure> {
    let q = Quaternion::new(v[6], v[3], v[4], v[5]);
    if !v.iter().all(|x| x.is_finite()) || (q.norm() - 1.0).abs() > 1e-3 {
        return Err(Error::Validation(format!("pose {v:?} is not finite with a unit quaternion")).into());
    }
    Ok(RigidTransform::from_quaternion(
        UnitQuaternion::from_quaternion(q),
        Vector::new(v[0], v[1], v[2]),
    ))
}

fn pose_into(p: &RigidTransform, out: &mut [f64]) {
    let t = p.translation();
    let q = p.quaternion();
    out.copy_from_slice(&[t.x, t.y, t.z, q.i, q.j, q.k, q.w]);
}

/// Message of the last failed call on this thread, or NULL after a success.
/// Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn dbhmap_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version, static.
#[no_mangle]
pub extern "C" fn dbhmap_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Cloud from `n` points stored as `x, y, z` triples.
#[no_mangle]
pub unsafe extern "C" fn dbhmap_cloud_new(xyz: *const f64, n: usize, out: *mut *mut DbhmapCloud) -> DbhmapStatus {
    guard(|| {
        let coords = slice(xyz, n * 3)?;
        let triples: Vec<[f64; 3]> = coords.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let cloud = PointCloud::from_xyz(&triples)?;
        write_out(out, Box::into_raw(Box::new(DbhmapCloud(cloud))))
    })
}

/// Reads a `.ply` or `.csv` cloud.
#[no_mangle]
pub unsafe extern "C" fn dbhmap_cloud_load(path: *const c_char, out: *mut *mut DbhmapCloud) -> DbhmapStatus {
    guard(|| {
        let path = path_arg(path)?;
        let cloud = load_cloud(path, CloudFormat::from_path(path)?)?;
        write_out(out, Box::into_raw(Box::new(DbhmapCloud(cloud))))
    })
}

/// Writes a `.ply` or `.csv` cloud.
#[no_mangle]
pub unsafe extern "C" fn dbhmap_cloud_save(cloud: *const DbhmapCloud, path: *const c_char) -> DbhmapStatus {
    guard(|| {
        let cloud = non_null(cloud)?;
        let path = path_arg(path)?;
        save_cloud(path, &cloud.0, CloudFormat::from_path(path)?)?;
        Ok(())
    })
}

/// Number of points; 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn dbhmap_cloud_len(cloud: *const DbhmapCloud) -> usize {
    cloud.as_ref().map_or(0, |c| c.0.len())
}

/// Copies up to `capacity` points as `x, y, z` triples into `xyz` and
/// stores the number copied in `written`.
#[no_mangle]
pub unsafe extern "C" fn dbhmap_cloud_points(
    cloud: *const DbhmapCloud,
    xyz: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> DbhmapStatus {
    guard(|| {
        let cloud = non_null(cloud)?;
        let n = cloud.0.len().min(capacity);
        if n > 0 {
            if xyz.is_null() {
                return Err(Failure::Null);
            }
            let dst = std::slice::from_raw_parts_mut(xyz, n * 3);
            for (d, p) in dst.chunks_exact_mut(3).zip(cloud.0.points()) {
                d.copy_from_slice(&[p.x, p.y, p.z]);
            }
        }
        write_out(written, n)
    })
}

#[no_mangle]
pub unsafe extern "C" fn dbhmap_cloud_free(cloud: *mut DbhmapCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// Registers `n` scans into one map with default ICP settings.
///
/// `odometry` holds `n` poses; the first one anchors the map frame. The
/// refined poses are written to `poses_out` (`n` poses) when it is not NULL.
#[no_mangle]
pub unsafe extern "C" fn dbhmap_map_build(
    scans: *const *const DbhmapCloud,
    n: usize,
    odometry: *const f64,
    map_out: *mut *mut DbhmapCloud,
    poses_out: *mut f64,
) -> DbhmapStatus {
    guard(|| {
        let handles = slice(scans, n)?;
        let clouds = handles
            .iter()
            .map(|h| non_null(*h).map(|c| c.0.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let raw = slice(odometry, n * 7)?;
        let poses = raw.chunks_exact(7).map(pose_from).collect::<Result<Vec<_>, _>>()?;
        if map_out.is_null() {
            return Err(Failure::Null);
        }
        let options = MapOptions {
            initial_pose: poses.first().copied().unwrap_or_else(RigidTransform::identity),
            ..MapOptions::default()
        };
        let result = build_map(&clouds, &Trajectory::from_poses(poses), &IcpConfig::default(), &options)?;
        if !poses_out.is_null() {
            let dst = std::slice::from_raw_parts_mut(poses_out, n * 7);
            for (d, p) in dst.chunks_exact_mut(7).zip(result.trajectory.poses()) {
                pose_into(p, d);
            }
        }
        write_out(map_out, Box::into_raw(Box::new(DbhmapCloud(result.map))))
    })
}

/// Terrain raster with the given cell size (meters) and height percentile.
#[no_mangle]
pub unsafe extern "C" fn dbhmap_dtm_build(
    map: *const DbhmapCloud,
    cell_size: f64,
    percentile: f64,
    out: *mut *mut DbhmapDtm,
) -> DbhmapStatus {
    guard(|| {
        let map = non_null(map)?;
        let config = DtmConfig {
            cell_size,
            percentile,
            ..DtmConfig::default()
        };
        config.validate()?;
        let dtm = build_dtm(&map.0, &config)?;
        write_out(out, Box::into_raw(Box::new(DbhmapDtm(dtm))))
    })
}

#[no_mangle]
pub unsafe extern "C" fn dbhmap_dtm_ground_height(dtm: *const DbhmapDtm, x: f64, y: f64, out: *mut f64) -> DbhmapStatus {
    guard(|| {
        let dtm = non_null(dtm)?;
        write_out(out, dtm.0.ground_height(x, y))
    })
}

#[no_mangle]
pub unsafe extern "C" fn dbhmap_dtm_free(dtm: *mut DbhmapDtm) {
    if !dtm.is_null() {
        drop(Box::from_raw(dtm));
    }
}

/// Library defaults.
#[no_mangle]
pub unsafe extern "C" fn dbhmap_estimation_params_default(out: *mut DbhmapEstimationParams) -> DbhmapStatus {
    guard(|| {
        let c = EstimationConfig::default();
        write_out(
            out,
            DbhmapEstimationParams {
                method: method_to_c(c.method()) as u32,
                q: c.normal_neighbors,
                n_cyls: c.band_count,
                h: c.slice_thickness,
                epsilon: c.ransac_tolerance,
                mean_voting: i32::from(c.voting == Voting::Mean),
            },
        )
    })
}

fn method_to_c(m: MethodChain) -> DbhmapMethod {
    let i = MethodChain::ALL.iter().position(|x| *x == m).expect("listed chain");
    [
        DbhmapMethod::AxisLls,
        DbhmapMethod::AxisVertical,
        DbhmapMethod::AxisLlsNls,
        DbhmapMethod::AxisVerticalNls,
        DbhmapMethod::AxisLlsNlsn,
        DbhmapMethod::AxisVerticalNlsn,
    ][i]
}

fn config_from(p: &DbhmapEstimationParams) -> Result<EstimationConfig, Failure> {
    let method = *MethodChain::ALL
        .get(p.method as usize)
        .ok_or_else(|| Error::Config(format!("unknown method {}", p.method)))?;
    let config = EstimationConfig {
        normal_neighbors: p.q,
        band_count: p.n_cyls,
        slice_thickness: p.h,
        ransac_tolerance: p.epsilon,
        voting: if p.mean_voting != 0 { Voting::Mean } else { Voting::Median },
        ..method.apply(EstimationConfig::default())
    };
    config.validate()?;
    Ok(config)
}

/// Estimates the DBH of the tree inside the box `box_min`..`box_max` (3
/// doubles each). A tree that cannot be fitted is not an error: the call
/// succeeds and `out` carries the failure status.
#[no_mangle]
pub unsafe extern "C" fn dbhmap_estimate_tree(
    map: *const DbhmapCloud,
    dtm: *const DbhmapDtm,
    box_min: *const f64,
    box_max: *const f64,
    params: *const DbhmapEstimationParams,
    seed: u64,
    out: *mut DbhmapEstimate,
) -> DbhmapStatus {
    guard(|| {
        let (map, dtm, params) = (non_null(map)?, non_null(dtm)?, non_null(params)?);
        let (lo, hi) = (slice(box_min, 3)?, slice(box_max, 3)?);
        let config = config_from(params)?;
        let bounds = BoundingBox::new(Point::new(lo[0], lo[1], lo[2]), Point::new(hi[0], hi[1], hi[2]))?;
        let est = estimate_tree(&map.0, &bounds, &dtm.0, &config, seed);
        let status = match est.status {
            EstimateStatus::Ok => DbhmapEstimateStatus::Ok,
            EstimateStatus::EmptySlice => DbhmapEstimateStatus::EmptySlice,
            EstimateStatus::InsufficientPoints => DbhmapEstimateStatus::InsufficientPoints,
            EstimateStatus::DegenerateAxis => DbhmapEstimateStatus::DegenerateAxis,
            EstimateStatus::NoFit => DbhmapEstimateStatus::NoFit,
        };
        write_out(
            out,
            DbhmapEstimate {
                diameter_m: est.diameter.unwrap_or(f64::NAN),
                status,
                fitted_bands: est.bands.iter().filter(|b| b.diameter.is_some()).count(),
            },
        )
    })
}

/// Scores `n` estimates against truth (meters). A NaN estimate counts as a
/// failure; observations farther than `max_distance` are excluded.
#[no_mangle]
pub unsafe extern "C" fn dbhmap_compute_metrics(
    estimates_m: *const f64,
    truths_m: *const f64,
    distances_m: *const f64,
    n: usize,
    fail_threshold: f64,
    max_distance: f64,
    out: *mut DbhmapMetrics,
) -> DbhmapStatus {
    guard(|| {
        let (est, truth, dist) = (slice(estimates_m, n)?, slice(truths_m, n)?, slice(distances_m, n)?);
        let obs: Vec<TreeObservation> = (0..n)
            .map(|i| TreeObservation {
                tree_id: i as u64,
                estimate_m: Some(est[i]).filter(|v| !v.is_nan()),
                truth_m: truth[i],
                min_distance_m: dist[i],
                species: None,
                trajectory_id: None,
            })
            .collect();
        let r = compute_metrics(&obs, fail_threshold, max_distance)?;
        write_out(
            out,
            DbhmapMetrics {
                rmse_cm: r.rmse_cm.unwrap_or(f64::NAN),
                bias_cm: r.bias_cm.unwrap_or(f64::NAN),
                fail_rate: r.fail_rate,
                n_total: r.n_total,
                n_failed: r.n_failed,
                n_excluded: r.n_excluded,
            },
        )
    })
}
