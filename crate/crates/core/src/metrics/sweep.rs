use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{compute_metrics, MetricsReport, Protocol, TreeObservation};
use crate::dbh::{
    estimate_dbh, extract_slice, extract_slice_with_normals, mix_seed, DbhEstimate, EstimateStatus, EstimationConfig, MethodChain,
    TreeRecord,
};
use crate::dtm::RasterDtm;
use crate::error::{Error, Result};
use crate::geom::{BoundingBox, PointCloud};

/// Hyperparameter values to cross.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    /// Normal-estimation neighbour counts.
    pub q: Vec<usize>,
    pub n_cyls: Vec<usize>,
    /// Slice thicknesses, meters.
    pub h: Vec<f64>,
    /// RANSAC inlier tolerances, meters.
    pub epsilon: Vec<f64>,
}

impl SweepGrid {
    /// `q ∈ {15, 20, 25}`, `n_cyls ∈ 1..=5`, `h ∈ {0.2, …, 0.6}` m and
    /// `ε ∈ {1, 2, 3}` cm: 225 cells.
    pub fn full() -> Self {
        SweepGrid {
            q: vec![15, 20, 25],
            n_cyls: (1..=5).collect(),
            h: vec![0.2, 0.3, 0.4, 0.5, 0.6],
            epsilon: vec![0.01, 0.02, 0.03],
        }
    }

    /// The one cell described by `config`.
    pub fn single(config: &EstimationConfig) -> Self {
        SweepGrid {
            q: vec![config.normal_neighbors],
            n_cyls: vec![config.band_count],
            h: vec![config.slice_thickness],
            epsilon: vec![config.ransac_tolerance],
        }
    }

    pub fn len(&self) -> usize {
        self.q.len() * self.n_cyls.len() * self.h.len() * self.epsilon.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Config("sweep grid has an empty axis".into()));
        }
        if let Some(q) = self.q.iter().find(|&&q| q < 3) {
            return Err(Error::Config(format!("grid q must be >= 3, got {q}")));
        }
        if self.n_cyls.contains(&0) {
            return Err(Error::Config("grid n_cyls must be >= 1".into()));
        }
        for (name, values) in [("h", &self.h), ("epsilon", &self.epsilon)] {
            if let Some(v) = values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
                return Err(Error::Config(format!("grid {name} values must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// One method and hyperparameter combination.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    #[serde(serialize_with = "method_name", deserialize_with = "parse_method")]
    pub method: MethodChain,
    pub q: usize,
    pub n_cyls: usize,
    pub h: f64,
    pub epsilon: f64,
}

fn method_name<S: Serializer>(m: &MethodChain, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(m.name())
}

fn parse_method<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<MethodChain, D::Error> {
    let s = String::deserialize(d)?;
    MethodChain::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown method chain {s:?}")))
}

impl SweepCell {
    /// `base` with this cell's method and hyperparameters.
    pub fn config(&self, base: &EstimationConfig) -> EstimationConfig {
        EstimationConfig {
            normal_neighbors: self.q,
            band_count: self.n_cyls,
            slice_thickness: self.h,
            ransac_tolerance: self.epsilon,
            ..self.method.apply(base.clone())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: SweepCell,
    /// `None` when the cell produced no report; see `error`.
    pub report: Option<MetricsReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Per method, in input order: index into `rows` of the lowest-RMSE cell.
    pub best: Vec<(String, Option<usize>)>,
}

impl SweepTable {
    pub fn best_for(&self, method: MethodChain) -> Option<&SweepRow> {
        self.best
            .iter()
            .find(|(name, _)| name == method.name())
            .and_then(|(_, i)| i.map(|i| &self.rows[i]))
    }

    /// One row per cell: `method,q,n_cyls,h,epsilon,rmse_cm,bias_cm,fail_rate,n`,
    /// where `n` counts the observations within the distance limit.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,q,n_cyls,h,epsilon,rmse_cm,bias_cm,fail_rate,n\n");
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for row in &self.rows {
            let c = &row.cell;
            let r = row.report.as_ref();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                c.method.name(),
                c.q,
                c.n_cyls,
                c.h,
                c.epsilon,
                opt(r.and_then(|r| r.rmse_cm)),
                opt(r.and_then(|r| r.bias_cm)),
                opt(r.map(|r| r.fail_rate)),
                r.map(|r| r.n_considered().to_string()).unwrap_or_default(),
            ));
        }
        out
    }
}

/// A mapped stand with segmented trees and their observation distances.
#[derive(Clone, Copy, Debug)]
pub struct SweepInput<'a> {
    pub map: &'a PointCloud,
    pub dtm: &'a RasterDtm,
    /// Every tree must carry a truth DBH.
    pub trees: &'a [TreeRecord],
    /// Minimal observation distance per tree, same order as `trees`.
    pub distances: &'a [f64],
}

/// Runs every method over every grid cell and scores each with
/// [`compute_metrics`].
///
/// Tree `id` uses seed stream `mix_seed(seed, id)` in every cell, so each
/// cell reproduces what `estimate_trees` and `compute_metrics` give for the
/// same configuration. Slices are extracted once per `h` (and per `(h, q)`
/// when normals are needed); chains that ignore normals do not depend on `q`
/// and are evaluated once per `(n_cyls, h, ε)`. Failing cells are recorded,
/// never fatal.
pub fn sweep(
    input: SweepInput<'_>,
    methods: &[MethodChain],
    grid: &SweepGrid,
    base: &EstimationConfig,
    protocol: Protocol,
    seed: u64,
) -> Result<SweepTable> {
    grid.validate()?;
    protocol.validate()?;
    if methods.is_empty() {
        return Err(Error::Config("sweep needs at least one method".into()));
    }
    if input.trees.len() != input.distances.len() {
        return Err(Error::CountMismatch {
            what_a: "trees",
            count_a: input.trees.len(),
            what_b: "observation distances",
            count_b: input.distances.len(),
        });
    }
    let cells = cells(methods, grid);
    for c in &cells {
        c.config(base).validate()?;
    }
    let truths: Vec<f64> = input
        .trees
        .iter()
        .map(|t| {
            t.truth_dbh_m
                .ok_or_else(|| Error::Validation(format!("tree {} has no truth DBH", t.id)))
        })
        .collect::<Result<_>>()?;
    let boxes: Vec<Option<BoundingBox>> = input.trees.iter().map(|t| t.bounding_box().ok()).collect();

    let slices = SliceCache::build(input, &boxes, &cells, base.min_points);

    // Cells whose result cannot depend on q share one evaluation.
    let mut canonical: HashMap<(usize, usize, usize, usize), usize> = HashMap::new();
    let owner: Vec<usize> = cells
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if c.method.needs_normals() {
                i
            } else {
                *canonical.entry(key(c, methods, grid)).or_insert(i)
            }
        })
        .collect();

    let evaluated: Vec<Option<std::result::Result<MetricsReport, String>>> = cells
        .par_iter()
        .enumerate()
        .map(|(i, cell)| {
            (owner[i] == i).then(|| {
                let config = cell.config(base);
                let estimates: Vec<DbhEstimate> = input
                    .trees
                    .par_iter()
                    .enumerate()
                    .map(|(k, tree)| match slices.get(cell, k) {
                        Some(slice) => estimate_dbh(slice, &config, mix_seed(seed, tree.id)),
                        None => DbhEstimate::failed(EstimateStatus::EmptySlice),
                    })
                    .collect();
                let obs: Vec<TreeObservation> = input
                    .trees
                    .iter()
                    .zip(&estimates)
                    .enumerate()
                    .map(|(k, (tree, est))| TreeObservation {
                        tree_id: tree.id,
                        estimate_m: est.diameter,
                        truth_m: truths[k],
                        min_distance_m: input.distances[k],
                        species: tree.species.clone(),
                        trajectory_id: None,
                    })
                    .collect();
                compute_metrics(&obs, protocol.fail_threshold, protocol.max_distance).map_err(|e| e.to_string())
            })
        })
        .collect();

    let rows: Vec<SweepRow> = cells
        .iter()
        .enumerate()
        .map(|(i, cell)| {
            let result = evaluated[owner[i]].clone().expect("owner cells are evaluated");
            let (report, error) = match result {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e)),
            };
            SweepRow {
                cell: *cell,
                report,
                error,
            }
        })
        .collect();

    let best = methods
        .iter()
        .map(|m| {
            let best = rows
                .iter()
                .enumerate()
                .filter(|(_, r)| r.cell.method == *m)
                .filter_map(|(i, r)| r.report.as_ref().and_then(|r| r.rmse_cm).map(|v| (i, v)))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .map(|(i, _)| i);
            (m.name().to_owned(), best)
        })
        .collect();
    Ok(SweepTable { rows, best })
}

fn cells(methods: &[MethodChain], grid: &SweepGrid) -> Vec<SweepCell> {
    let mut out = Vec::with_capacity(methods.len() * grid.len());
    for &method in methods {
        for &q in &grid.q {
            for &n_cyls in &grid.n_cyls {
                for &h in &grid.h {
                    for &epsilon in &grid.epsilon {
                        out.push(SweepCell {
                            method,
                            q,
                            n_cyls,
                            h,
                            epsilon,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Grid position of a cell with `q` left out.
fn key(c: &SweepCell, methods: &[MethodChain], grid: &SweepGrid) -> (usize, usize, usize, usize) {
    let m = methods.iter().position(|m| *m == c.method).expect("cell method is listed");
    let n = grid.n_cyls.iter().position(|v| *v == c.n_cyls).expect("grid value");
    let h = position_f64(&grid.h, c.h);
    let e = position_f64(&grid.epsilon, c.epsilon);
    (m, n, h, e)
}

fn position_f64(values: &[f64], v: f64) -> usize {
    values.iter().position(|x| x.to_bits() == v.to_bits()).expect("grid value")
}

/// Slices per tree: without normals keyed by `h`, with normals keyed by `(h, q)`.
struct SliceCache {
    plain: HashMap<u64, Vec<Option<PointCloud>>>,
    with_normals: HashMap<(u64, usize), Vec<Option<PointCloud>>>,
}

impl SliceCache {
    fn build(input: SweepInput<'_>, boxes: &[Option<BoundingBox>], cells: &[SweepCell], min_points: usize) -> Self {
        let mut plain_keys: Vec<u64> = Vec::new();
        let mut normal_keys: Vec<(u64, usize)> = Vec::new();
        for c in cells {
            if c.method.needs_normals() {
                if !normal_keys.contains(&(c.h.to_bits(), c.q)) {
                    normal_keys.push((c.h.to_bits(), c.q));
                }
            } else if !plain_keys.contains(&c.h.to_bits()) {
                plain_keys.push(c.h.to_bits());
            }
        }
        let plain = plain_keys
            .into_iter()
            .map(|h| {
                let slices = boxes
                    .par_iter()
                    .map(|b| {
                        b.as_ref().and_then(|b| {
                            extract_slice(input.map, b, input.dtm, f64::from_bits(h), min_points)
                                .ok()
                                .map(|s| s.without_normals())
                        })
                    })
                    .collect();
                (h, slices)
            })
            .collect();
        let with_normals = normal_keys
            .into_iter()
            .map(|(h, q)| {
                let slices = boxes
                    .par_iter()
                    .map(|b| {
                        b.as_ref()
                            .and_then(|b| extract_slice_with_normals(input.map, b, input.dtm, f64::from_bits(h), q, min_points).ok())
                    })
                    .collect();
                ((h, q), slices)
            })
            .collect();
        SliceCache { plain, with_normals }
    }

    fn get(&self, cell: &SweepCell, tree: usize) -> Option<&PointCloud> {
        let slices = if cell.method.needs_normals() {
            &self.with_normals[&(cell.h.to_bits(), cell.q)]
        } else {
            &self.plain[&cell.h.to_bits()]
        };
        slices[tree].as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dbh::{estimate_trees, EstimateRecord};
    use crate::dtm::{build_dtm, DtmConfig};
    use crate::metrics::observations;
    use crate::synth::{generate_scene, Clutter, GroundPlane, SceneSpec, StemSpec};

    fn stand() -> (PointCloud, RasterDtm, Vec<TreeRecord>) {
        let stems = (0..4)
            .map(|k| StemSpec {
                bark_sigma: 0.005,
                ..StemSpec::vertical([3.0 * k as f64, 0.0, 0.0], 0.2 + 0.05 * k as f64, 3.0)
            })
            .collect();
        let scene = generate_scene(&SceneSpec {
            stems,
            ground: GroundPlane::default(),
            ground_roughness: 0.0,
            ground_density: 200.0,
            stem_density: 1500.0,
            clutter: Clutter::FractionOfStem(0.1),
            ground_margin: 2.0,
            box_margin: 0.15,
            seed: 11,
        })
        .unwrap();
        let dtm = build_dtm(&scene.cloud, &DtmConfig::default()).unwrap();
        (scene.cloud, dtm, scene.trees)
    }

    #[test]
    fn one_cell_matches_direct_pipeline() {
        let (map, dtm, trees) = stand();
        let distances = vec![1.0; trees.len()];
        let input = SweepInput {
            map: &map,
            dtm: &dtm,
            trees: &trees,
            distances: &distances,
        };
        for method in MethodChain::ALL {
            let config = method.apply(EstimationConfig::default());
            let table = sweep(input, &[method], &SweepGrid::single(&config), &config, Protocol::default(), 9).unwrap();
            assert_eq!(table.rows.len(), 1);
            let est = estimate_trees(&map, &trees, &dtm, &config, 9);
            let records: Vec<EstimateRecord> = trees.iter().zip(&est).map(|(t, e)| EstimateRecord::new(t.id, e)).collect();
            let mut obs = observations(&trees, &records, None, None).unwrap();
            for o in &mut obs {
                o.min_distance_m = 1.0;
            }
            let direct = compute_metrics(&obs, 0.2, 10.0).unwrap();
            assert_eq!(table.rows[0].report.as_ref(), Some(&direct), "{method}");
            assert_eq!(table.best_for(method).unwrap().cell, table.rows[0].cell);
        }
    }

    #[test]
    fn best_cell_is_minimal_and_output_deterministic() {
        let (map, dtm, trees) = stand();
        let distances = vec![1.0; trees.len()];
        let input = SweepInput {
            map: &map,
            dtm: &dtm,
            trees: &trees,
            distances: &distances,
        };
        let grid = SweepGrid {
            q: vec![10, 15],
            n_cyls: vec![1, 3],
            h: vec![0.3, 0.5],
            epsilon: vec![0.01, 0.03],
        };
        let base = EstimationConfig::default();
        let a = sweep(input, &MethodChain::ALL, &grid, &base, Protocol::default(), 1).unwrap();
        assert_eq!(a.rows.len(), 6 * 16);
        for m in MethodChain::ALL {
            let best = a.best_for(m).unwrap().report.as_ref().unwrap().rmse_cm.unwrap();
            for r in a.rows.iter().filter(|r| r.cell.method == m) {
                if let Some(v) = r.report.as_ref().and_then(|r| r.rmse_cm) {
                    assert!(best <= v);
                }
            }
        }
        let b = sweep(input, &MethodChain::ALL, &grid, &base, Protocol::default(), 1).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.to_csv().lines().count(), 1 + 96);
    }

    #[test]
    fn invalid_grid_rejected_before_work() {
        let (map, dtm, trees) = stand();
        let distances = vec![1.0; trees.len()];
        let input = SweepInput {
            map: &map,
            dtm: &dtm,
            trees: &trees,
            distances: &distances,
        };
        let mut grid = SweepGrid::full();
        grid.epsilon = vec![0.0];
        let err = sweep(
            input,
            &MethodChain::ALL,
            &grid,
            &EstimationConfig::default(),
            Protocol::default(),
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(SweepGrid::full().len(), 225);
    }

    #[test]
    fn failing_cells_are_recorded() {
        let (map, dtm, mut trees) = stand();
        for t in &mut trees {
            t.box_min[0] += 100.0;
            t.box_max[0] += 100.0;
        }
        let distances = vec![20.0; trees.len()];
        let input = SweepInput {
            map: &map,
            dtm: &dtm,
            trees: &trees,
            distances: &distances,
        };
        let base = EstimationConfig::default();
        let table = sweep(input, &[base.method()], &SweepGrid::single(&base), &base, Protocol::default(), 0).unwrap();
        assert!(table.rows[0].report.is_none());
        assert!(table.rows[0].error.is_some());
        assert_eq!(table.best[0].1, None);
    }
}
