use nalgebra::{DMatrix, Matrix4, SymmetricEigen, Vector2, Vector4};

use super::Circle2D;
use crate::error::{Error, Result};

/// Relative singular value below which the data lie exactly on a circle
/// (or line) and the null vector is the answer.
const EXACT_TOLERANCE: f64 = 1e-12;
/// Relative size of the quadratic coefficient below which the fit is a line.
const LINE_TOLERANCE: f64 = 1e-12;

/// Algebraic "Hyper" circle fit.
///
/// Fits `A(x²+y²) + Bx + Cy + D = 0` by minimizing the mean squared algebraic
/// residual subject to the hyperaccurate normalization, whose constraint
/// matrix cancels the leading-order bias that plain algebraic fits show on
/// partial arcs. The generalized eigenproblem is solved through the SVD of
/// the data matrix. Coordinates are centred and scaled before fitting.
pub fn hyper_circle_fit(points: &[Vector2<f64>]) -> Result<Circle2D> {
    let n = points.len();
    if n < 3 {
        return Err(Error::InsufficientPoints { needed: 3, got: n });
    }
    let centroid = points.iter().sum::<Vector2<f64>>() / n as f64;
    let scale = (points.iter().map(|p| (p - centroid).norm_squared()).sum::<f64>() / n as f64).sqrt();
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::DegenerateFit("points coincide".into()));
    }

    // Rows [z, x, y, 1]; padded with zero rows up to 4 so the SVD yields a
    // full 4x4 right basis even for three points.
    let rows = n.max(4);
    let mut data = DMatrix::<f64>::zeros(rows, 4);
    let mut means = Vector4::zeros();
    for (i, p) in points.iter().enumerate() {
        let q = (p - centroid) / scale;
        let row = Vector4::new(q.norm_squared(), q.x, q.y, 1.0);
        data.set_row(i, &row.transpose());
        means += row;
    }
    means /= n as f64;

    let svd = data.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::DegenerateFit("SVD failed".into()))?;
    let s = &svd.singular_values;
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let v = Matrix4::from_fn(|i, j| v_t[(order[j], i)]);
    let sv = Vector4::from_fn(|j, _| s[order[j]]);

    let coeffs: Vector4<f64> = if sv[3] <= EXACT_TOLERANCE * sv[0] {
        v.column(3).into_owned()
    } else {
        // W = (ZᵀZ)^½; eigenvectors of W N⁻¹ W give the constrained minimizer.
        let w = v * Matrix4::from_diagonal(&sv) * v.transpose();
        let constraint = Matrix4::new(
            8.0 * means[0],
            4.0 * means[1],
            4.0 * means[2],
            2.0,
            4.0 * means[1],
            1.0,
            0.0,
            0.0,
            4.0 * means[2],
            0.0,
            1.0,
            0.0,
            2.0,
            0.0,
            0.0,
            0.0,
        );
        let constraint_inv = constraint
            .try_inverse()
            .ok_or_else(|| Error::DegenerateFit("singular constraint matrix".into()))?;
        let mut m = w * constraint_inv * w;
        m = (m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(m);
        let mut eorder = [0usize, 1, 2, 3];
        eorder.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        // One eigenvalue is negative; the smallest positive one is second.
        let e = eig.eigenvectors.column(eorder[1]).into_owned();
        w.lu()
            .solve(&e)
            .ok_or_else(|| Error::DegenerateFit("singular moment matrix".into()))?
    };

    let (a, b, c, d) = (coeffs[0], coeffs[1], coeffs[2], coeffs[3]);
    if a.abs() <= LINE_TOLERANCE * coeffs.norm() {
        return Err(Error::DegenerateFit("points are collinear".into()));
    }
    let radicand = b * b + c * c - 4.0 * a * d;
    if !(radicand > 0.0) {
        return Err(Error::DegenerateFit(format!("non-positive radicand {radicand}")));
    }
    let center = Vector2::new(-b / (2.0 * a), -c / (2.0 * a)) * scale + centroid;
    let radius = radicand.sqrt() / (2.0 * a.abs()) * scale;
    Circle2D::new(center, radius)
}
