use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;

use super::{KdTree, Point, PointCloud, Vector};
use crate::error::{Error, Result};

/// Relative eigenvalue floor below which a neighbourhood is treated as rank < 2.
const RANK_TOLERANCE: f64 = 1e-10;

/// Output of [`estimate_normals`]: the input points with a unit normal each,
/// plus a validity flag. Invalid normals (neighbourhoods of rank < 2) hold an
/// arbitrary unit vector and must not be trusted.
#[derive(Clone, Debug)]
pub struct NormalEstimate {
    pub cloud: PointCloud,
    pub valid: Vec<bool>,
}

impl NormalEstimate {
    pub fn all_valid(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    /// Drops points whose normal is invalid.
    pub fn into_valid(self) -> PointCloud {
        let valid = self.valid;
        self.cloud.filter(|i, _| valid[i])
    }
}

/// PCA normals from the `q` nearest neighbours (the query point included):
/// the eigenvector of the neighbourhood covariance with the smallest
/// eigenvalue, flipped to face `viewpoint`.
pub fn estimate_normals(cloud: &PointCloud, q: usize, viewpoint: &Point) -> Result<NormalEstimate> {
    if q < 3 {
        return Err(Error::InsufficientPoints { needed: 3, got: q });
    }
    if cloud.len() < q {
        return Err(Error::InsufficientPoints {
            needed: q,
            got: cloud.len(),
        });
    }
    let tree = KdTree::from_cloud(cloud);
    let points = cloud.points();
    let results: Vec<(Vector, bool)> = points
        .par_iter()
        .map(|p| {
            let neighbours = tree.nearest_k(p, q);
            let (normal, valid) = pca_normal(neighbours.iter().map(|&i| &points[i]));
            let normal = if normal.dot(&(viewpoint - p)) < 0.0 { -normal } else { normal };
            (normal, valid)
        })
        .collect();
    let (normals, valid): (Vec<Vector>, Vec<bool>) = results.into_iter().unzip();
    Ok(NormalEstimate {
        cloud: PointCloud::from_parts(points.to_vec(), Some(normals)),
        valid,
    })
}

/// Smallest-eigenvalue eigenvector of the covariance of `pts`, and whether the
/// neighbourhood spans at least two dimensions.
pub(crate) fn pca_normal<'a>(pts: impl Iterator<Item = &'a Point> + Clone) -> (Vector, bool) {
    let mut n = 0usize;
    let mut sum = Vector::zeros();
    for p in pts.clone() {
        sum += p.coords;
        n += 1;
    }
    let mean = sum / n as f64;
    let mut cov = Matrix3::zeros();
    for p in pts {
        let d = p.coords - mean;
        cov += d * d.transpose();
    }
    cov /= n as f64;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let normal = eig.eigenvectors.column(order[0]).normalize();
    let (mid, top) = (eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
    let valid = top > 0.0 && mid > RANK_TOLERANCE * top && normal.iter().all(|v| v.is_finite());
    if normal.iter().all(|v| v.is_finite()) {
        (normal, valid)
    } else {
        (Vector::z(), false)
    }
}
