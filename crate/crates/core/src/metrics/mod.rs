//! Evaluation protocol: RMSE, bias and fail rate under the 20 cm outlier
//! rule, observation-distance filtering, and the hyperparameter sweep.

mod sweep;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dbh::{EstimateRecord, TreeRecord};
use crate::dtm::percentile;
use crate::error::{Error, Result};
use crate::geom::BoundingBox;
use crate::icp::Trajectory;

pub use sweep::{sweep, SweepCell, SweepGrid, SweepInput, SweepRow, SweepTable};

/// Absolute errors above this (meters) count as failures.
pub const FAIL_THRESHOLD: f64 = 0.20;
/// Observations farther than this (meters) are excluded.
pub const MAX_DISTANCE: f64 = 10.0;

/// One tree seen along one trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeObservation {
    pub tree_id: u64,
    /// `None` when the estimator failed.
    pub estimate_m: Option<f64>,
    pub truth_m: f64,
    pub min_distance_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub species: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory_id: Option<String>,
}

impl TreeObservation {
    /// Signed error `estimate − truth` in meters, if the estimate exists.
    pub fn error(&self) -> Option<f64> {
        self.estimate_m.map(|e| e - self.truth_m)
    }

    fn validate(&self) -> Result<()> {
        if !(self.truth_m > 0.0 && self.truth_m.is_finite()) {
            return Err(Error::Validation(format!(
                "tree {}: truth DBH must be positive, got {}",
                self.tree_id, self.truth_m
            )));
        }
        if !(self.min_distance_m >= 0.0) {
            return Err(Error::Validation(format!(
                "tree {}: observation distance must be >= 0, got {}",
                self.tree_id, self.min_distance_m
            )));
        }
        if let Some(e) = self.estimate_m {
            if !e.is_finite() {
                return Err(Error::Validation(format!("tree {}: non-finite estimate", self.tree_id)));
            }
        }
        Ok(())
    }

    /// Failed estimates and errors beyond `threshold` are failures.
    fn failed(&self, threshold: f64) -> bool {
        self.error().is_none_or(|e| e.abs() > threshold)
    }
}

/// Protocol parameters shared by [`compute_metrics`] and the sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Protocol {
    pub fail_threshold: f64,
    pub max_distance: f64,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            fail_threshold: FAIL_THRESHOLD,
            max_distance: MAX_DISTANCE,
        }
    }
}

impl Protocol {
    pub fn validate(&self) -> Result<()> {
        if !(self.fail_threshold > 0.0) {
            return Err(Error::Config(format!(
                "fail_threshold must be positive, got {}",
                self.fail_threshold
            )));
        }
        if !(self.max_distance >= 0.0) {
            return Err(Error::Config(format!("max_distance must be >= 0, got {}", self.max_distance)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `None` when every remaining observation failed.
    pub rmse_cm: Option<f64>,
    pub bias_cm: Option<f64>,
    /// Failures over observations within the distance limit.
    pub fail_rate: f64,
    /// Every input observation.
    pub n_total: usize,
    pub n_failed: usize,
    pub n_excluded: usize,
}

impl MetricsReport {
    /// Observations within the distance limit.
    pub fn n_considered(&self) -> usize {
        self.n_total - self.n_excluded
    }

    /// Observations entering RMSE and bias.
    pub fn n_used(&self) -> usize {
        self.n_considered() - self.n_failed
    }
}

/// Aggregates observations into RMSE and bias (centimeters) over the
/// successful estimates.
///
/// Observations farther than `max_distance` are dropped entirely. Of the
/// rest, failed estimates and those off by more than `fail_threshold` count
/// as failures and are left out of RMSE and bias.
pub fn compute_metrics(observations: &[TreeObservation], fail_threshold: f64, max_distance: f64) -> Result<MetricsReport> {
    Protocol {
        fail_threshold,
        max_distance,
    }
    .validate()?;
    for o in observations {
        o.validate()?;
    }
    let considered: Vec<&TreeObservation> = observations.iter().filter(|o| o.min_distance_m <= max_distance).collect();
    if considered.is_empty() {
        return Err(Error::EmptyReport);
    }
    // Sorting makes the floating-point sums independent of input order.
    let mut errors: Vec<f64> = considered
        .iter()
        .filter(|o| !o.failed(fail_threshold))
        .filter_map(|o| o.error())
        .collect();
    errors.sort_by(f64::total_cmp);
    let n_failed = considered.len() - errors.len();
    let (rmse_cm, bias_cm) = if errors.is_empty() {
        (None, None)
    } else {
        let n = errors.len() as f64;
        let mse = errors.iter().map(|e| e * e).sum::<f64>() / n;
        let bias = errors.iter().sum::<f64>() / n;
        (Some(100.0 * mse.sqrt()), Some(100.0 * bias))
    };
    Ok(MetricsReport {
        rmse_cm,
        bias_cm,
        fail_rate: n_failed as f64 / considered.len() as f64,
        n_total: observations.len(),
        n_failed,
        n_excluded: observations.len() - considered.len(),
    })
}

/// Closest horizontal approach of the trajectory to the box centre.
pub fn min_observation_distance(trajectory: &Trajectory, bounds: &BoundingBox) -> Result<f64> {
    let c = bounds.center();
    trajectory
        .poses()
        .iter()
        .map(|p| {
            let t = p.translation();
            (t.x - c.x).hypot(t.y - c.y)
        })
        .min_by(f64::total_cmp)
        .ok_or_else(|| Error::Validation("trajectory has no poses".into()))
}

/// Joins estimates with their trees' truth and observation distance.
///
/// Every estimate must name a tree carrying a truth DBH. Without a
/// trajectory the observation distance is 0.
pub fn observations(
    trees: &[TreeRecord],
    estimates: &[EstimateRecord],
    trajectory: Option<&Trajectory>,
    trajectory_id: Option<&str>,
) -> Result<Vec<TreeObservation>> {
    let by_id: HashMap<u64, &TreeRecord> = trees.iter().map(|t| (t.id, t)).collect();
    estimates
        .iter()
        .map(|e| {
            let tree = by_id
                .get(&e.id)
                .ok_or_else(|| Error::Validation(format!("estimate for unknown tree {}", e.id)))?;
            let truth = tree
                .truth_dbh_m
                .ok_or_else(|| Error::Validation(format!("tree {} has no truth DBH", e.id)))?;
            let min_distance_m = match trajectory {
                Some(t) => min_observation_distance(t, &tree.bounding_box()?)?,
                None => 0.0,
            };
            Ok(TreeObservation {
                tree_id: e.id,
                estimate_m: e.diameter_m,
                truth_m: truth,
                min_distance_m,
                species: tree.species.clone(),
                trajectory_id: trajectory_id.map(str::to_owned),
            })
        })
        .collect()
}

/// Error statistics of one distance bin `[lo_m, hi_m)`, in centimeters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceBin {
    pub lo_m: f64,
    pub hi_m: f64,
    pub n: usize,
    pub n_failed: usize,
    pub median_cm: Option<f64>,
    pub iqr_cm: Option<f64>,
    pub rmse_cm: Option<f64>,
}

/// Buckets observations by minimal observation distance into bins of
/// `bin_width` starting at 0 and summarizes the signed errors of the
/// successful estimates in each. Bins up to the farthest observation are
/// always reported, empty or not.
pub fn distance_profile(observations: &[TreeObservation], bin_width: f64, fail_threshold: f64) -> Result<Vec<DistanceBin>> {
    if observations.is_empty() {
        return Err(Error::EmptyReport);
    }
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(Error::Config(format!("bin width must be positive, got {bin_width}")));
    }
    for o in observations {
        o.validate()?;
    }
    let farthest = observations.iter().map(|o| o.min_distance_m).fold(0.0, f64::max);
    let n_bins = (farthest / bin_width).floor() as usize + 1;
    let mut bins: Vec<(usize, usize, Vec<f64>)> = vec![(0, 0, Vec::new()); n_bins];
    for o in observations {
        let b = ((o.min_distance_m / bin_width).floor() as usize).min(n_bins - 1);
        bins[b].0 += 1;
        if o.failed(fail_threshold) {
            bins[b].1 += 1;
        } else if let Some(e) = o.error() {
            bins[b].2.push(100.0 * e);
        }
    }
    Ok(bins
        .into_iter()
        .enumerate()
        .map(|(b, (n, n_failed, mut errors))| {
            errors.sort_by(f64::total_cmp);
            let stats = (!errors.is_empty()).then(|| {
                let median = percentile(errors.clone(), 50.0);
                let iqr = percentile(errors.clone(), 75.0) - percentile(errors.clone(), 25.0);
                let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt();
                (median, iqr, rmse)
            });
            DistanceBin {
                lo_m: b as f64 * bin_width,
                hi_m: (b + 1) as f64 * bin_width,
                n,
                n_failed,
                median_cm: stats.map(|s| s.0),
                iqr_cm: stats.map(|s| s.1),
                rmse_cm: stats.map(|s| s.2),
            }
        })
        .collect())
}

/// CSV with header `lo_m,hi_m,n,n_failed,median_cm,iqr_cm,rmse_cm`; missing
/// statistics are empty fields.
pub fn distance_profile_csv(bins: &[DistanceBin]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for b in bins {
        w.serialize(b)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Point, RigidTransform, Vector};
    use proptest::prelude::*;

    fn obs(errors_cm: &[Option<f64>]) -> Vec<TreeObservation> {
        errors_cm
            .iter()
            .enumerate()
            .map(|(i, e)| TreeObservation {
                tree_id: i as u64,
                estimate_m: e.map(|e| 0.3 + e / 100.0),
                truth_m: 0.3,
                min_distance_m: 1.0,
                species: None,
                trajectory_id: None,
            })
            .collect()
    }

    #[test]
    fn zero_errors() {
        let r = compute_metrics(&obs(&[Some(0.0), Some(0.0)]), 0.2, 10.0).unwrap();
        assert_eq!((r.rmse_cm, r.bias_cm, r.fail_rate), (Some(0.0), Some(0.0), 0.0));
    }

    #[test]
    fn worked_example_three_minus_four() {
        let r = compute_metrics(&obs(&[Some(3.0), Some(-4.0)]), 0.2, 10.0).unwrap();
        assert!((r.rmse_cm.unwrap() - 12.5f64.sqrt()).abs() < 1e-9);
        assert!((r.bias_cm.unwrap() + 0.5).abs() < 1e-9);
        assert_eq!(r.n_failed, 0);
    }

    #[test]
    fn twenty_five_cm_error_is_a_failure() {
        let r = compute_metrics(&obs(&[Some(1.0), Some(25.0), None]), 0.2, 10.0).unwrap();
        assert!((r.fail_rate - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.rmse_cm.unwrap() - 1.0).abs() < 1e-9);
        assert!((r.bias_cm.unwrap() - 1.0).abs() < 1e-9);
        assert_eq!((r.n_total, r.n_failed, r.n_excluded, r.n_used()), (3, 2, 0, 1));
    }

    #[test]
    fn distance_exclusion_and_empty_report() {
        let mut o = obs(&[Some(1.0), Some(5.0)]);
        o[1].min_distance_m = 12.0;
        let r = compute_metrics(&o, 0.2, 10.0).unwrap();
        assert_eq!(r.n_excluded, 1);
        assert!((r.rmse_cm.unwrap() - 1.0).abs() < 1e-9);
        o[0].min_distance_m = 11.0;
        assert!(matches!(compute_metrics(&o, 0.2, 10.0), Err(Error::EmptyReport)));
        assert!(matches!(compute_metrics(&[], 0.2, 10.0), Err(Error::EmptyReport)));
    }

    #[test]
    fn all_failed_has_no_rmse() {
        let r = compute_metrics(&obs(&[None, None]), 0.2, 10.0).unwrap();
        assert_eq!((r.rmse_cm, r.fail_rate), (None, 1.0));
    }

    #[test]
    fn invalid_observations() {
        let mut o = obs(&[Some(1.0)]);
        o[0].truth_m = 0.0;
        assert!(compute_metrics(&o, 0.2, 10.0).is_err());
        let mut o = obs(&[Some(1.0)]);
        o[0].min_distance_m = -1.0;
        assert!(compute_metrics(&o, 0.2, 10.0).is_err());
    }

    #[test]
    fn observation_distance() {
        let bounds = BoundingBox::new(Point::new(-1.0, -1.0, 0.0), Point::new(1.0, 1.0, 5.0)).unwrap();
        let line = |offset: f64| {
            Trajectory::from_poses(
                (-5..=5)
                    .map(|i| RigidTransform::from_translation(Vector::new(i as f64, offset, 0.7)))
                    .collect(),
            )
        };
        assert_eq!(min_observation_distance(&line(0.0), &bounds).unwrap(), 0.0);
        assert_eq!(min_observation_distance(&line(4.0), &bounds).unwrap(), 4.0);
        assert!(min_observation_distance(&Trajectory::default(), &bounds).is_err());
    }

    #[test]
    fn joins_estimates_with_truth() {
        let trees = vec![TreeRecord {
            id: 7,
            box_min: [3.0, -1.0, 0.0],
            box_max: [5.0, 1.0, 5.0],
            truth_dbh_m: Some(0.3),
            species: Some("maple".into()),
        }];
        let est = vec![EstimateRecord {
            id: 7,
            diameter_m: Some(0.31),
            status: crate::dbh::EstimateStatus::Ok,
            per_band_diameters: vec![],
            inlier_counts: vec![],
        }];
        let path = Trajectory::from_poses(vec![RigidTransform::identity()]);
        let o = observations(&trees, &est, Some(&path), Some("t1")).unwrap();
        assert_eq!(o[0].min_distance_m, 4.0);
        assert_eq!(o[0].species.as_deref(), Some("maple"));
        let mut unknown = est.clone();
        unknown[0].id = 8;
        assert!(observations(&trees, &unknown, None, None).is_err());
    }

    #[test]
    fn profile_bins() {
        let mut o = obs(&[Some(1.0), Some(-1.0), Some(3.0)]);
        for x in &mut o {
            x.min_distance_m = 3.0;
        }
        let bins = distance_profile(&o, 2.0, 0.2).unwrap();
        assert_eq!(bins.len(), 2);
        assert_eq!(bins[0].n, 0);
        assert_eq!(bins[0].rmse_cm, None);
        assert_eq!((bins[1].lo_m, bins[1].hi_m, bins[1].n), (2.0, 4.0, 3));
        assert!((bins[1].median_cm.unwrap() - 1.0).abs() < 1e-9);
        assert!((bins[1].iqr_cm.unwrap() - 2.0).abs() < 1e-9);
        let csv = distance_profile_csv(&bins).unwrap();
        assert!(csv.starts_with("lo_m,hi_m,n,n_failed,median_cm,iqr_cm,rmse_cm\n"));
    }

    #[test]
    fn identical_bins_have_identical_statistics() {
        let mut o = obs(&[Some(1.0), Some(-2.0), Some(1.5), Some(1.0), Some(-2.0), Some(1.5)]);
        for (i, x) in o.iter_mut().enumerate() {
            x.min_distance_m = if i < 3 { 0.5 } else { 2.5 };
        }
        let bins = distance_profile(&o, 2.0, 0.2).unwrap();
        let strip = |b: &DistanceBin| (b.n, b.n_failed, b.median_cm, b.iqr_cm, b.rmse_cm);
        assert_eq!(strip(&bins[0]), strip(&bins[1]));
    }

    fn arb_obs() -> impl Strategy<Value = Vec<TreeObservation>> {
        prop::collection::vec((prop::option::weighted(0.8, -30.0..30.0f64), 0.0..12.0f64), 1..30).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (e, d))| TreeObservation {
                    tree_id: i as u64,
                    estimate_m: e.map(|e| 0.4 + e / 100.0),
                    truth_m: 0.4,
                    min_distance_m: d,
                    species: None,
                    trajectory_id: None,
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn permutation_invariant(o in arb_obs(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = o.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(compute_metrics(&o, 0.2, 10.0).ok(), compute_metrics(&shuffled, 0.2, 10.0).ok());
        }

        #[test]
        fn rmse_bounds_bias(o in arb_obs()) {
            if let Ok(r) = compute_metrics(&o, 0.2, 10.0) {
                prop_assert!((0.0..=1.0).contains(&r.fail_rate));
                prop_assert_eq!(r.n_used() + r.n_failed + r.n_excluded, r.n_total);
                if let (Some(rmse), Some(bias)) = (r.rmse_cm, r.bias_cm) {
                    prop_assert!(rmse >= 0.0);
                    prop_assert!(rmse >= bias.abs() - 1e-9);
                }
            }
        }

        #[test]
        fn removing_a_failure_keeps_rmse(o in arb_obs()) {
            let Ok(before) = compute_metrics(&o, 0.2, 10.0) else { return Ok(()) };
            if before.n_used() == 0 {
                return Ok(());
            }
            let Some(k) = o.iter().position(|x| x.min_distance_m <= 10.0 && x.failed(0.2)) else { return Ok(()) };
            let mut fewer = o.clone();
            fewer.remove(k);
            let Ok(after) = compute_metrics(&fewer, 0.2, 10.0) else { return Ok(()) };
            prop_assert_eq!(before.rmse_cm, after.rmse_cm);
            prop_assert_eq!(before.bias_cm, after.bias_cm);
            prop_assert!(after.fail_rate < before.fail_rate);
        }
    }
}
