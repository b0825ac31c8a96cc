use std::collections::HashMap;

use super::{Point, PointCloud, Vector};
use crate::error::{Error, Result};

pub(crate) fn cell_of(p: &Point, edge: f64) -> [i64; 3] {
    [
        (p.x / edge).floor() as i64,
        (p.y / edge).floor() as i64,
        (p.z / edge).floor() as i64,
    ]
}

/// Keeps at most one point per axis-aligned cube of side `cell_edge`: the
/// point nearest its cell's centroid (lowest index on ties). Surviving
/// points keep their input order and normals.
pub fn voxel_downsample(cloud: &PointCloud, cell_edge: f64) -> Result<PointCloud> {
    if !(cell_edge > 0.0 && cell_edge.is_finite()) {
        return Err(Error::Config(format!("voxel edge must be positive, got {cell_edge}")));
    }
    let points = cloud.points();
    let keys: Vec<[i64; 3]> = points.iter().map(|p| cell_of(p, cell_edge)).collect();

    let mut sums: HashMap<[i64; 3], (Vector, usize)> = HashMap::with_capacity(points.len() / 2);
    for (p, key) in points.iter().zip(&keys) {
        let entry = sums.entry(*key).or_insert((Vector::zeros(), 0));
        entry.0 += p.coords;
        entry.1 += 1;
    }

    let mut best: HashMap<[i64; 3], (f64, usize)> = HashMap::with_capacity(sums.len());
    for (i, (p, key)) in points.iter().zip(&keys).enumerate() {
        let (sum, count) = sums[key];
        let d2 = (p.coords - sum / count as f64).norm_squared();
        best.entry(*key)
            .and_modify(|b| {
                if d2 < b.0 {
                    *b = (d2, i);
                }
            })
            .or_insert((d2, i));
    }

    let mut kept: Vec<usize> = best.into_values().map(|(_, i)| i).collect();
    kept.sort_unstable();
    Ok(cloud.select(&kept))
}
