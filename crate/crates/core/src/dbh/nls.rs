use nalgebra::{Matrix5, Rotation3, Vector5};
use serde::{Deserialize, Serialize};

use super::Cylinder;
use crate::error::{Error, Result};
use crate::geom::{plane_basis, PointCloud, Vector};

/// Radii outside `[MIN_RADIUS, MAX_RADIUS]` are treated as divergence.
pub const MIN_RADIUS: f64 = 0.001;
pub const MAX_RADIUS: f64 = 2.0;

const INITIAL_DAMPING: f64 = 1e-3;
const MAX_DAMPING: f64 = 1e16;

/// Settings for [`cylinder_nls`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NlsOptions {
    /// Adds `λ Σ (nᵢ·a)²` to the objective; requires normals.
    pub use_normals: bool,
    pub normals_weight: f64,
    pub max_iterations: usize,
    /// Convergence threshold on the norm of the parameter step.
    pub step_tolerance: f64,
}

impl Default for NlsOptions {
    fn default() -> Self {
        NlsOptions {
            use_normals: false,
            normals_weight: 1.0,
            max_iterations: 100,
            step_tolerance: 1e-10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NlsFit {
    pub cylinder: Cylinder,
    pub converged: bool,
    pub iterations: usize,
    /// Final objective value.
    pub cost: f64,
    /// Objective value at the initial cylinder.
    pub initial_cost: f64,
}

/// Non-linear least-squares cylinder fit minimizing
/// `Σ (‖(pᵢ − c) × a‖ − r)²`, optionally plus `λ Σ (nᵢ·a)²`.
///
/// Levenberg-Marquardt over five local parameters re-centred at every
/// accepted step: two rotation angles of the axis about the in-plane basis
/// `(u, v)`, the axis point offset along `u` and `v`, and the radius.
/// Accepted steps never increase the objective. If the budget is exhausted
/// the best iterate is returned with `converged = false`.
pub fn cylinder_nls(points: &PointCloud, init: &Cylinder, options: &NlsOptions) -> Result<NlsFit> {
    if points.len() < 5 {
        return Err(Error::InsufficientPoints {
            needed: 5,
            got: points.len(),
        });
    }
    let normals = if options.use_normals {
        let n = points
            .normals()
            .ok_or_else(|| Error::Validation("normals penalty requires normals".into()))?;
        if !(options.normals_weight >= 0.0 && options.normals_weight.is_finite()) {
            return Err(Error::Config(format!("invalid normals weight {}", options.normals_weight)));
        }
        Some(n)
    } else {
        None
    };
    let problem = Problem {
        points: points.points(),
        normals,
        sqrt_weight: options.normals_weight.max(0.0).sqrt(),
    };

    let mut current = *init;
    let mut cost = problem.cost(&current);
    let initial_cost = cost;
    let mut damping = INITIAL_DAMPING;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < options.max_iterations {
        iterations += 1;
        let (jtj, jtr) = problem.normal_equations(&current);
        let mut step = None;
        while damping <= MAX_DAMPING {
            let mut lhs = jtj;
            let max_diag = (0..5).map(|i| jtj[(i, i)]).fold(0.0, f64::max);
            for i in 0..5 {
                lhs[(i, i)] += damping * jtj[(i, i)].max(1e-12 * max_diag).max(f64::MIN_POSITIVE);
            }
            let Some(delta) = lhs.cholesky().map(|c| c.solve(&(-jtr))) else {
                damping *= 2.0;
                continue;
            };
            if delta.norm() < options.step_tolerance {
                converged = true;
                break;
            }
            let candidate = problem.apply(&current, &delta);
            let Some(candidate) = candidate else {
                damping *= 2.0;
                continue;
            };
            let new_cost = problem.cost(&candidate);
            if new_cost <= cost {
                step = Some((candidate, new_cost, delta.norm()));
                damping = (damping / 3.0).max(1e-12);
                break;
            }
            damping *= 2.0;
        }
        let Some((candidate, new_cost, step_norm)) = step else {
            // Either the step fell below tolerance or no descent exists at
            // any damping: the iterate is a local minimum to working precision.
            converged = true;
            break;
        };
        let decrease = cost - new_cost;
        current = candidate;
        cost = new_cost;
        check_radius(&current)?;
        if step_norm < options.step_tolerance || decrease <= 1e-15 * cost {
            converged = true;
            break;
        }
    }
    check_radius(&current)?;
    Ok(NlsFit {
        cylinder: current,
        converged,
        iterations,
        cost,
        initial_cost,
    })
}

fn check_radius(c: &Cylinder) -> Result<()> {
    if c.radius() < MIN_RADIUS || c.radius() > MAX_RADIUS {
        return Err(Error::Divergence { radius: c.radius() });
    }
    Ok(())
}

struct Problem<'a> {
    points: &'a [crate::geom::Point],
    normals: Option<&'a [Vector]>,
    sqrt_weight: f64,
}

impl Problem<'_> {
    fn cost(&self, cyl: &Cylinder) -> f64 {
        let mut total: f64 = self.points.iter().map(|p| cyl.distance(p).powi(2)).sum();
        if let Some(normals) = self.normals {
            let w = self.sqrt_weight * self.sqrt_weight;
            total += w * normals.iter().map(|n| n.dot(cyl.axis()).powi(2)).sum::<f64>();
        }
        total
    }

    /// `JᵀJ` and `Jᵀr` at the zero of the local chart around `cyl`.
    fn normal_equations(&self, cyl: &Cylinder) -> (Matrix5<f64>, Vector5<f64>) {
        let a = cyl.axis().into_inner();
        let c = cyl.point().coords;
        let (u, v) = plane_basis(cyl.axis());
        // Derivatives of a and c with respect to (α, β, cu, cv).
        let da = [-v, u, Vector::zeros(), Vector::zeros()];
        let dc = [u.cross(&c), v.cross(&c), u, v];

        let mut jtj = Matrix5::zeros();
        let mut jtr = Vector5::zeros();
        for p in self.points {
            let w = p.coords - c;
            let g = w.cross(&a);
            let rho = g.norm();
            let residual = rho - cyl.radius();
            let mut row = Vector5::zeros();
            if rho > 0.0 {
                let g_hat = g / rho;
                for k in 0..4 {
                    row[k] = g_hat.dot(&(w.cross(&da[k]) - dc[k].cross(&a)));
                }
            }
            row[4] = -1.0;
            jtj += row * row.transpose();
            jtr += row * residual;
        }
        if let Some(normals) = self.normals {
            for n in normals {
                let residual = self.sqrt_weight * n.dot(&a);
                let row = Vector5::new(-self.sqrt_weight * n.dot(&v), self.sqrt_weight * n.dot(&u), 0.0, 0.0, 0.0);
                jtj += row * row.transpose();
                jtr += row * residual;
            }
        }
        (jtj, jtr)
    }

    fn apply(&self, cyl: &Cylinder, delta: &Vector5<f64>) -> Option<Cylinder> {
        let (u, v) = plane_basis(cyl.axis());
        let rot = Rotation3::new(u * delta[0] + v * delta[1]);
        let axis = rot * cyl.axis().into_inner();
        let point = rot * (cyl.point() + u * delta[2] + v * delta[3]);
        let radius = cyl.radius() + delta[4];
        if !(radius > 0.0) {
            return None;
        }
        Cylinder::new(axis, point, radius).ok()
    }
}

/// Dense Jacobian of the point residuals by central differences in the local
/// chart; used by tests to check the analytic derivatives.
#[cfg(test)]
fn numeric_jacobian(points: &[crate::geom::Point], cyl: &Cylinder) -> nalgebra::DMatrix<f64> {
    use nalgebra::{DMatrix, DVector};
    let problem = Problem {
        points,
        normals: None,
        sqrt_weight: 0.0,
    };
    let h = 1e-7;
    let mut j = DMatrix::zeros(points.len(), 5);
    for k in 0..5 {
        let mut d = Vector5::zeros();
        d[k] = h;
        let plus = problem.apply(cyl, &d).unwrap();
        let minus = problem.apply(cyl, &(-d)).unwrap();
        let rp = DVector::from_iterator(points.len(), points.iter().map(|p| plus.distance(p)));
        let rm = DVector::from_iterator(points.len(), points.iter().map(|p| minus.distance(p)));
        j.set_column(k, &((rp - rm) / (2.0 * h)));
    }
    j
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Point, RigidTransform};
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use std::f64::consts::PI;

    fn sample(cyl: &Cylinder, arc: f64, n: usize, sigma: f64, z_range: (f64, f64), seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma.max(1e-300)).unwrap();
        let (u, v) = plane_basis(cyl.axis());
        let mut pts = Vec::new();
        let mut normals = Vec::new();
        for _ in 0..n {
            let t = rng.random_range(0.0..arc);
            let s = rng.random_range(z_range.0..z_range.1);
            let radial = u * t.cos() + v * t.sin();
            let r = cyl.radius() + if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            pts.push(cyl.point() + radial * r + cyl.axis().into_inner() * s);
            normals.push(radial);
        }
        PointCloud::with_normals(pts, normals).unwrap()
    }

    fn perturbed(cyl: &Cylinder, shift: f64, degrees: f64) -> Cylinder {
        let (u, v) = plane_basis(cyl.axis());
        let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(u + v), degrees.to_radians());
        Cylinder::new(
            rot * cyl.axis().into_inner(),
            cyl.point() + (u - v).normalize() * shift,
            cyl.radius() * 1.1,
        )
        .unwrap()
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let truth = Cylinder::new(Vector::new(0.1, -0.2, 1.0), Point::new(0.4, 0.3, 0.0), 0.2).unwrap();
        let cloud = sample(&truth, 2.0 * PI, 40, 0.01, (0.0, 0.5), 4);
        let at = perturbed(&truth, 0.03, 4.0);
        let problem = Problem {
            points: cloud.points(),
            normals: None,
            sqrt_weight: 0.0,
        };
        let (jtj, jtr) = problem.normal_equations(&at);
        let j = numeric_jacobian(cloud.points(), &at);
        let r = DVector::from_iterator(cloud.len(), cloud.points().iter().map(|p| at.distance(p)));
        let jtj_num = j.transpose() * &j;
        let jtr_num = j.transpose() * r;
        for i in 0..5 {
            assert!((jtr[i] - jtr_num[i]).abs() < 1e-5 * (1.0 + jtr_num[i].abs()), "{i}");
            for k in 0..5 {
                assert!((jtj[(i, k)] - jtj_num[(i, k)]).abs() < 1e-5 * (1.0 + jtj_num[(i, k)].abs()));
            }
        }
    }

    #[test]
    fn recovers_exact_vertical_cylinder() {
        let truth = Cylinder::new(Vector::z(), Point::new(2.0, -1.0, 0.0), 0.15).unwrap();
        let cloud = sample(&truth, 2.0 * PI, 300, 0.0, (1.1, 1.5), 1);
        let fit = cylinder_nls(&cloud, &perturbed(&truth, 0.02, 3.0), &NlsOptions::default()).unwrap();
        assert!(fit.converged);
        assert!((fit.cylinder.radius() - 0.15).abs() < 1e-6);
        assert!(fit.cylinder.axis_angle_to(&Vector::z()) < 1e-6);
        assert!((fit.cylinder.point() - truth.point()).norm() < 1e-6);
        assert!(fit.cost <= fit.initial_cost);
    }

    #[test]
    fn recovers_tilted_cylinder_with_normals_penalty() {
        let truth = Cylinder::new(
            Vector::new(0.0, 10f64.to_radians().sin(), 10f64.to_radians().cos()),
            Point::new(1.0, 0.0, 0.0),
            0.3,
        )
        .unwrap();
        let cloud = sample(&truth, PI, 200, 0.0, (0.0, 0.6), 2);
        let opts = NlsOptions {
            use_normals: true,
            ..NlsOptions::default()
        };
        let fit = cylinder_nls(&cloud, &perturbed(&truth, 0.02, 3.0), &opts).unwrap();
        assert!((fit.cylinder.radius() - 0.3).abs() < 1e-6);
        assert!(fit.cylinder.axis_angle_to(truth.axis()) < 1e-6);
    }

    #[test]
    fn normals_penalty_stabilizes_axis_on_half_arcs() {
        // On a noisy half arc the axis is weakly constrained by distances
        // alone; the normals term adds direct evidence about its direction.
        let truth = Cylinder::new(Vector::z(), Point::origin(), 0.15).unwrap();
        let (mut plain, mut penalized) = (0.0, 0.0);
        for seed in 0..200 {
            let mut cloud = sample(&truth, PI, 150, 0.01, (1.1, 1.5), seed);
            // Normals as a PCA estimator would see them: perturbed by ~5°.
            let mut rng = ChaCha8Rng::seed_from_u64(10_000 + seed);
            let jitter = Normal::new(0.0, 5f64.to_radians()).unwrap();
            let (pts, normals) = cloud.into_parts();
            let normals: Vec<Vector> = normals
                .unwrap()
                .into_iter()
                .map(|n| (n + Vector::new(jitter.sample(&mut rng), jitter.sample(&mut rng), jitter.sample(&mut rng))).normalize())
                .collect();
            cloud = PointCloud::with_normals(pts, normals).unwrap();
            let init = perturbed(&truth, 0.01, 3.0);
            let a = cylinder_nls(&cloud, &init, &NlsOptions::default()).unwrap();
            let b = cylinder_nls(
                &cloud,
                &init,
                &NlsOptions {
                    use_normals: true,
                    ..NlsOptions::default()
                },
            )
            .unwrap();
            assert!(a.converged && b.converged, "seed {seed}");
            plain += a.cylinder.axis_angle_to(&Vector::z());
            penalized += b.cylinder.axis_angle_to(&Vector::z());
        }
        assert!(penalized < plain, "penalized {penalized} plain {plain}");
    }

    #[test]
    fn cone_slice_radius_between_end_radii() {
        // Cone of 5° half-angle taper over a 0.4 m slice around z = 1.3.
        let taper = 5f64.to_radians().tan();
        let r_mid = 0.15;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<Point> = (0..400)
            .map(|_| {
                let t = rng.random_range(0.0..2.0 * PI);
                let z: f64 = rng.random_range(1.1..1.5);
                let r = r_mid - taper * (z - 1.3);
                Point::new(r * t.cos(), r * t.sin(), z)
            })
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let init = Cylinder::new(Vector::z(), Point::new(0.01, 0.0, 0.0), 0.14).unwrap();
        let fit = cylinder_nls(&cloud, &init, &NlsOptions::default()).unwrap();
        let (r_top, r_bottom) = (r_mid - taper * 0.2, r_mid + taper * 0.2);
        assert!(
            fit.cylinder.radius() >= r_top && fit.cylinder.radius() <= r_bottom,
            "{}",
            fit.cylinder.radius()
        );
    }

    #[test]
    fn objective_never_increases() {
        let truth = Cylinder::new(Vector::new(0.05, 0.0, 1.0), Point::origin(), 0.2).unwrap();
        for seed in 0..30 {
            let cloud = sample(&truth, 1.5 * PI, 80, 0.02, (0.0, 0.4), seed);
            let fit = cylinder_nls(&cloud, &perturbed(&truth, 0.05, 8.0), &NlsOptions::default()).unwrap();
            assert!(fit.cost <= fit.initial_cost);
        }
    }

    #[test]
    fn iteration_budget_flags_non_convergence() {
        let truth = Cylinder::new(Vector::z(), Point::origin(), 0.15).unwrap();
        let cloud = sample(&truth, 2.0 * PI, 100, 0.005, (0.0, 0.4), 3);
        let opts = NlsOptions {
            max_iterations: 1,
            ..NlsOptions::default()
        };
        let fit = cylinder_nls(&cloud, &perturbed(&truth, 0.05, 10.0), &opts).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.iterations, 1);
        assert!(fit.cost < fit.initial_cost);
    }

    #[test]
    fn collapsing_radius_is_divergence() {
        // Points clustered near a line: the best cylinder shrinks to nothing.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Point> = (0..50)
            .map(|_| {
                Point::new(
                    rng.random_range(-1e-5..1e-5),
                    rng.random_range(-1e-5..1e-5),
                    rng.random_range(0.0..1.0),
                )
            })
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let init = Cylinder::new(Vector::z(), Point::new(0.0, 0.0, 0.0), 0.05).unwrap();
        assert!(matches!(
            cylinder_nls(&cloud, &init, &NlsOptions::default()),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn errors_on_bad_inputs() {
        let init = Cylinder::new(Vector::z(), Point::origin(), 0.1).unwrap();
        let few = PointCloud::from_xyz(&[[0.1, 0.0, 0.0]; 4]).unwrap();
        assert!(matches!(
            cylinder_nls(&few, &init, &NlsOptions::default()),
            Err(Error::InsufficientPoints { .. })
        ));
        let no_normals = PointCloud::from_xyz(&[[0.1, 0.0, 0.0]; 10]).unwrap();
        let opts = NlsOptions {
            use_normals: true,
            ..NlsOptions::default()
        };
        assert!(cylinder_nls(&no_normals, &init, &opts).is_err());
    }

    #[test]
    fn rigid_motion_equivariance() {
        let truth = Cylinder::new(Vector::z(), Point::origin(), 0.2).unwrap();
        let cloud = sample(&truth, 1.2 * PI, 120, 0.01, (0.0, 0.5), 12);
        let init = perturbed(&truth, 0.02, 2.0);
        let motion = RigidTransform::from_axis_angle(Vector::new(0.2, 0.1, 0.4), Vector::new(3.0, -2.0, 1.0));
        let moved_init = Cylinder::new(
            motion.transform_vector(init.axis()),
            motion.transform_point(init.point()),
            init.radius(),
        )
        .unwrap();
        let a = cylinder_nls(&cloud, &init, &NlsOptions::default()).unwrap();
        let b = cylinder_nls(&cloud.transformed(&motion), &moved_init, &NlsOptions::default()).unwrap();
        assert!((a.cylinder.radius() - b.cylinder.radius()).abs() < 1e-7);
    }
}
