use nalgebra::{Matrix6, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::IcpConfig;
use crate::error::{Error, Result};
use crate::geom::{KdTree, Point, PointCloud, RigidTransform, Vector};

/// Registration needs at least this many correspondences.
const MIN_CORRESPONDENCES: usize = 10;
/// Step halvings tried before giving up on a non-improving step.
const MAX_BACKTRACKS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Registration {
    /// Maps reading coordinates into the map frame.
    pub transform: RigidTransform,
    /// Accepted steps.
    pub iterations: usize,
    pub converged: bool,
    /// Trimmed mean squared point-to-plane residual, before the first step
    /// and after every accepted one.
    pub objective: Vec<f64>,
    /// Correspondences kept after trimming at the final pose.
    pub correspondences: usize,
}

/// Point-to-plane ICP; returns the transform taking `reading` into the map.
pub fn icp_register(reading: &PointCloud, map: &PointCloud, initial: &RigidTransform, config: &IcpConfig) -> Result<RigidTransform> {
    icp_register_detailed(reading, map, initial, config).map(|r| r.transform)
}

/// [`icp_register`] with iteration diagnostics.
///
/// Each reading point is matched to its nearest map point within the
/// maximum correspondence distance; the residual is the offset projected on
/// the map normal. The `trim_ratio` fraction with the smallest residuals
/// forms the objective, minimized by Gauss-Newton steps on the pose. A step
/// is accepted only if it does not increase the objective (halving it up to
/// three times), so the objective is non-increasing.
pub fn icp_register_detailed(reading: &PointCloud, map: &PointCloud, initial: &RigidTransform, config: &IcpConfig) -> Result<Registration> {
    config.validate()?;
    let failure = |reason: String| Error::Registration { reason, initial: *initial };
    if reading.is_empty() || map.is_empty() {
        return Err(failure("empty reading or map".into()));
    }
    let normals = map.normals().ok_or_else(|| failure("map has no normals".into()))?;
    let problem = Problem {
        reading: reading.points(),
        map: map.points(),
        normals,
        tree: KdTree::from_cloud(map),
        config,
    };

    let mut pose = *initial;
    let mut current = problem.evaluate(&pose).map_err(failure)?;
    let mut objective = vec![current.objective];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < config.max_iterations {
        let Some(step) = problem.step(&pose, &current.kept) else {
            break;
        };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_BACKTRACKS {
            let delta = step * scale;
            let candidate = twist(&delta).compose(&pose);
            if let Ok(eval) = problem.evaluate(&candidate) {
                if eval.objective <= current.objective {
                    accepted = Some((candidate, eval, delta));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((candidate, eval, delta)) = accepted else {
            // No descent along the Gauss-Newton direction: at a minimum to
            // working precision.
            converged = true;
            break;
        };
        iterations += 1;
        pose = candidate.renormalized();
        current = eval;
        objective.push(current.objective);
        let moved = delta.fixed_rows::<3>(3).norm();
        let turned = delta.fixed_rows::<3>(0).norm();
        if moved < config.translation_tolerance && turned < config.rotation_tolerance {
            converged = true;
            break;
        }
    }

    Ok(Registration {
        transform: pose,
        iterations,
        converged,
        objective,
        correspondences: current.kept.len(),
    })
}

/// `exp` of a twist `(ω, t)` as used for left-multiplied pose updates.
fn twist(delta: &Vector6<f64>) -> RigidTransform {
    RigidTransform::from_axis_angle(delta.fixed_rows::<3>(0).into_owned(), delta.fixed_rows::<3>(3).into_owned())
}

struct Problem<'a> {
    reading: &'a [Point],
    map: &'a [Point],
    normals: &'a [Vector],
    tree: KdTree,
    config: &'a IcpConfig,
}

struct Evaluation {
    objective: f64,
    /// `(reading index, map index)` of the kept correspondences.
    kept: Vec<(usize, usize)>,
}

impl Problem<'_> {
    fn evaluate(&self, pose: &RigidTransform) -> std::result::Result<Evaluation, String> {
        let max = self.config.max_correspondence_distance;
        let mut matches: Vec<(f64, usize, usize)> = self
            .reading
            .par_iter()
            .enumerate()
            .filter_map(|(i, p)| {
                let q = pose.transform_point(p);
                let (j, _) = self.tree.nearest_within(&q, max)?;
                let r = (q - self.map[j]).dot(&self.normals[j]);
                Some((r * r, i, j))
            })
            .collect();
        if matches.len() < MIN_CORRESPONDENCES {
            return Err(format!(
                "{} correspondences within {max} m, need {MIN_CORRESPONDENCES}",
                matches.len()
            ));
        }
        let keep =
            ((self.config.trim_ratio * matches.len() as f64).ceil() as usize).clamp(MIN_CORRESPONDENCES.min(matches.len()), matches.len());
        matches.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        matches.truncate(keep);
        let objective = matches.iter().map(|m| m.0).sum::<f64>() / keep as f64;
        Ok(Evaluation {
            objective,
            kept: matches.into_iter().map(|(_, i, j)| (i, j)).collect(),
        })
    }

    /// Gauss-Newton twist `(ω, t)` for the current correspondences.
    fn step(&self, pose: &RigidTransform, kept: &[(usize, usize)]) -> Option<Vector6<f64>> {
        let mut jtj = Matrix6::zeros();
        let mut jtr = Vector6::zeros();
        for &(i, j) in kept {
            let q = pose.transform_point(&self.reading[i]);
            let n = self.normals[j];
            let r = (q - self.map[j]).dot(&n);
            let mut row = Vector6::zeros();
            row.fixed_rows_mut::<3>(0).copy_from(&q.coords.cross(&n));
            row.fixed_rows_mut::<3>(3).copy_from(&n);
            jtj += row * row.transpose();
            jtr += row * r;
        }
        // Pseudo-inverse keeps unconstrained directions (e.g. sliding along
        // a corridor) at zero instead of blowing up.
        let svd = jtj.svd(true, true);
        let tol = 1e-10 * svd.singular_values.max();
        let delta = svd.solve(&(-jtr), tol).ok()?;
        delta.iter().all(|v| v.is_finite()).then_some(delta)
    }
}
