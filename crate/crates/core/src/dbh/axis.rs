use nalgebra::{DMatrix, Unit, Vector2};

use crate::error::{Error, Result};
use crate::geom::{plane_basis, PointCloud, Vector};

/// Singular-value ratio below which the normals are treated as all parallel.
const RANK_TOLERANCE: f64 = 1e-9;

/// Cylinder axis from surface normals: the unit `a` minimizing `‖Nᵀa‖₂`,
/// i.e. the direction least represented among the normals. Sign is chosen
/// so that `a_z ≥ 0`.
pub fn axis_lls(normals: &[Vector]) -> Result<Unit<Vector>> {
    if normals.len() < 3 {
        return Err(Error::InsufficientPoints {
            needed: 3,
            got: normals.len(),
        });
    }
    let nt = DMatrix::from_fn(normals.len(), 3, |i, j| normals[i][j]);
    let svd = nt.svd(false, true);
    let v_t = svd.v_t.ok_or(Error::DegenerateAxis)?;
    let s = &svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    if !(s[order[0]] > 0.0) || s[order[1]] <= RANK_TOLERANCE * s[order[0]] {
        return Err(Error::DegenerateAxis);
    }
    let row = v_t.row(order[2]);
    let mut a = Vector::new(row[0], row[1], row[2]).normalize();
    if a.z < 0.0 || (a.z == 0.0 && a.iter().find(|v| **v != 0.0).is_some_and(|v| *v < 0.0)) {
        a = -a;
    }
    Ok(Unit::new_unchecked(a))
}

/// Coordinates of each point in the basis returned by
/// [`plane_basis`](crate::geom::plane_basis) for `axis`.
pub fn project_to_plane(points: &PointCloud, axis: &Unit<Vector>) -> Vec<Vector2<f64>> {
    let (u, v) = plane_basis(axis);
    points
        .points()
        .iter()
        .map(|p| Vector2::new(p.coords.dot(&u), p.coords.dot(&v)))
        .collect()
}
