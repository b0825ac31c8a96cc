use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pipeline::{AxisMode, EstimationConfig, RefineMode};
use super::{axis_lls, cylinder_nls, hyper_circle_fit, project_to_plane, Cylinder, NlsOptions, MAX_RADIUS, MIN_RADIUS};
use crate::error::{Error, Result};
use crate::geom::{PointCloud, Vector};

/// Probability of drawing at least one all-inlier sample.
const CONFIDENCE: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RansacFit {
    pub cylinder: Cylinder,
    /// Indices into the input cloud with `|d| ≤ ε` under the final model.
    pub inliers: Vec<usize>,
    /// Candidates drawn before stopping.
    pub iterations: usize,
    /// `false` when the final refinement ran out of iterations.
    pub converged: bool,
}

/// Robust cylinder fit.
///
/// Minimal samples (3 points with a vertical axis, 9 points with the normals
/// axis) produce candidates through axis → projection → Hyper; each is scored
/// by the number of points within `ε` of its surface. The best candidate's
/// inliers are refit with the full chain, including the configured
/// non-linear refinement, and the inlier set is recomputed for the result.
/// The iteration count adapts to the observed inlier ratio and is capped by
/// `config.ransac_iterations`.
pub fn ransac_cylinder(points: &PointCloud, config: &EstimationConfig, seed: u64) -> Result<RansacFit> {
    let needed = config.min_points.max(sample_size(config.axis_mode));
    if points.len() < needed {
        return Err(Error::InsufficientPoints { needed, got: points.len() });
    }
    if config.needs_normals() && !points.has_normals() {
        return Err(Error::Validation("normals-based fitting requires normals".into()));
    }
    let n = points.len();
    let k = sample_size(config.axis_mode);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, Cylinder)> = None;
    let mut budget = config.ransac_iterations;
    let mut drawn = 0;
    while drawn < budget {
        drawn += 1;
        let subset = sample(&mut rng, n, k).into_vec();
        let Ok(candidate) = algebraic_fit(&points.select(&subset), config.axis_mode) else {
            continue;
        };
        let count = count_inliers(points, &candidate, config.ransac_tolerance);
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, candidate));
            let ratio = count as f64 / n as f64;
            budget = budget.min(adaptive_iterations(ratio, k));
        }
    }
    let Some((count, candidate)) = best else {
        return Err(Error::FitFailure {
            needed: config.min_points,
            best: 0,
        });
    };
    if count < config.min_points {
        return Err(Error::FitFailure {
            needed: config.min_points,
            best: count,
        });
    }

    let inliers = inlier_indices(points, &candidate, config.ransac_tolerance);
    let subset = points.select(&inliers);
    let (cylinder, converged) = refine(&subset, config)?;
    let inliers = inlier_indices(points, &cylinder, config.ransac_tolerance);
    if inliers.len() < config.min_points {
        return Err(Error::FitFailure {
            needed: config.min_points,
            best: inliers.len(),
        });
    }
    Ok(RansacFit {
        cylinder,
        inliers,
        iterations: drawn,
        converged,
    })
}

fn sample_size(mode: AxisMode) -> usize {
    match mode {
        AxisMode::Vertical => 3,
        AxisMode::Lls => 9,
    }
}

/// Iterations needed to draw one clean sample of size `k` with probability
/// [`CONFIDENCE`] given inlier ratio `w`.
fn adaptive_iterations(w: f64, k: usize) -> usize {
    let clean = w.powi(k as i32);
    if clean >= 1.0 {
        return 1;
    }
    if clean <= 0.0 {
        return usize::MAX;
    }
    let n = (1.0 - CONFIDENCE).ln() / (1.0 - clean).ln();
    if n.is_finite() {
        n.ceil().max(1.0) as usize
    } else {
        usize::MAX
    }
}

/// Axis → projection → Hyper.
fn algebraic_fit(points: &PointCloud, mode: AxisMode) -> Result<Cylinder> {
    let axis = match mode {
        AxisMode::Vertical => Vector::z_axis(),
        AxisMode::Lls => axis_lls(points.normals().ok_or(Error::DegenerateAxis)?)?,
    };
    let (u, v) = crate::geom::plane_basis(&axis);
    let circle = hyper_circle_fit(&project_to_plane(points, &axis))?;
    if circle.radius < MIN_RADIUS || circle.radius > MAX_RADIUS {
        return Err(Error::Divergence { radius: circle.radius });
    }
    let point = crate::geom::Point::from(u * circle.center.x + v * circle.center.y);
    Cylinder::new(axis.into_inner(), point, circle.radius)
}

fn refine(points: &PointCloud, config: &EstimationConfig) -> Result<(Cylinder, bool)> {
    let initial = algebraic_fit(points, config.axis_mode)?;
    let use_normals = match config.refine_mode {
        RefineMode::None => return Ok((initial, true)),
        RefineMode::Nls => false,
        RefineMode::Nlsn => true,
    };
    let options = NlsOptions {
        use_normals,
        normals_weight: config.normals_weight,
        ..NlsOptions::default()
    };
    let fit = cylinder_nls(points, &initial, &options)?;
    Ok((fit.cylinder, fit.converged))
}

fn count_inliers(points: &PointCloud, cylinder: &Cylinder, tolerance: f64) -> usize {
    points.points().iter().filter(|p| cylinder.distance(p).abs() <= tolerance).count()
}

fn inlier_indices(points: &PointCloud, cylinder: &Cylinder, tolerance: f64) -> Vec<usize> {
    points
        .points()
        .iter()
        .enumerate()
        .filter(|(_, p)| cylinder.distance(p).abs() <= tolerance)
        .map(|(i, _)| i)
        .collect()
}
