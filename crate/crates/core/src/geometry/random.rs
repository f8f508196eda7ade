//! Random points and tangent vectors for tests and simulation checks.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::linalg::{sym_exp, symmetrize};
use super::{Geometry, Manifold, Point, Tangent};

fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// A random point. Sphere points are uniform; SPD points are exp of a
/// symmetric matrix with entries of scale `spread`; Euclidean points are
/// Gaussian with that scale.
pub fn random_point<R: Rng + ?Sized>(geom: &Geometry, spread: f64, rng: &mut R) -> Point {
    let (r, c) = geom.ambient_shape();
    match geom {
        Geometry::Euclidean(_) => Point::new(normal_matrix(rng, r, c) * spread),
        Geometry::Sphere(_) => {
            let x = normal_matrix(rng, r, c);
            let n = x.norm();
            Point::new(x / n)
        }
        Geometry::SpdLogCholesky(_) | Geometry::SpdAffine(_) => {
            let s = symmetrize(&normal_matrix(rng, r, c)) * spread;
            Point::new(sym_exp(&s))
        }
    }
}

/// A random tangent vector at `p` with Riemannian norm exactly `norm`.
pub fn random_tangent<R: Rng + ?Sized>(geom: &Geometry, p: &Point, norm: f64, rng: &mut R) -> Tangent {
    let (r, c) = geom.ambient_shape();
    loop {
        let raw = normal_matrix(rng, r, c);
        let v = geom.project_tangent(p, &raw).expect("shape matches");
        let n = geom.norm(p, &v).expect("valid point");
        if n > 1e-6 {
            return v.scale(norm / n);
        }
    }
}

/// A Haar-ish random orthogonal matrix from the QR factor of a Gaussian one.
pub fn random_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    normal_matrix(rng, d, d).qr().q()
}
