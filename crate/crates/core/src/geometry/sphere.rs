use std::f64::consts::PI;

use nalgebra::DMatrix;

use super::{Manifold, Point, Tangent, DEFAULT_TOL};
use crate::error::{Error, Result};

/// Below this norm exp/log/transport switch to first-order series.
const SMALL: f64 = 1e-8;

/// Unit sphere Sᵈ embedded in ℝᵈ⁺¹ with the round metric.
#[derive(Clone, Debug, PartialEq)]
pub struct Sphere {
    pub dim: usize,
    pub tol: f64,
}

impl Sphere {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 1, "sphere dimension must be positive");
        Sphere {
            dim,
            tol: DEFAULT_TOL,
        }
    }

    fn check_shape(&self, m: &DMatrix<f64>) -> Result<()> {
        if m.shape() != (self.dim + 1, 1) {
            return Err(Error::ShapeMismatch {
                expected: (self.dim + 1, 1),
                actual: m.shape(),
            });
        }
        Ok(())
    }

    /// Geodesic angle between two unit vectors together with the component of
    /// `q` orthogonal to `p`.
    fn angle(p: &DMatrix<f64>, q: &DMatrix<f64>) -> (f64, DMatrix<f64>, f64) {
        let c = p.dot(q);
        let w = q - p * c;
        let s = w.norm();
        (s.atan2(c), w, c)
    }
}

impl Manifold for Sphere {
    fn dim(&self) -> usize {
        self.dim
    }

    fn ambient_shape(&self) -> (usize, usize) {
        (self.dim + 1, 1)
    }

    fn tol(&self) -> f64 {
        self.tol
    }

    fn validate_point(&self, p: &Point) -> Result<()> {
        self.check_shape(p.matrix())?;
        let n = p.matrix().norm();
        if !n.is_finite() || (n - 1.0).abs() > self.tol.max(4.0 * f64::EPSILON) {
            return Err(Error::InvalidPoint(format!("sphere point has norm {n}")));
        }
        Ok(())
    }

    fn validate_tangent(&self, p: &Point, v: &Tangent) -> Result<()> {
        self.validate_point(p)?;
        self.check_shape(v.matrix())?;
        let dot = p.matrix().dot(v.matrix());
        if dot.abs() > self.tol * v.ambient_norm().max(1.0) {
            return Err(Error::InvalidTangent(format!(
                "not orthogonal to base point (inner product {dot:e})"
            )));
        }
        Ok(())
    }

    fn inner(&self, p: &Point, u: &Tangent, v: &Tangent) -> Result<f64> {
        self.validate_point(p)?;
        self.check_shape(u.matrix())?;
        self.check_shape(v.matrix())?;
        Ok(u.matrix().dot(v.matrix()))
    }

    fn exp(&self, p: &Point, v: &Tangent) -> Result<Point> {
        self.validate_point(p)?;
        self.check_shape(v.matrix())?;
        let theta = v.ambient_norm();
        if theta >= PI {
            return Err(Error::InjectivityGuard(format!(
                "tangent norm {theta} is not below pi"
            )));
        }
        let out = if theta < SMALL {
            p.matrix() + v.matrix()
        } else {
            p.matrix() * theta.cos() + v.matrix() * (theta.sin() / theta)
        };
        let n = out.norm();
        Ok(Point::new(out / n))
    }

    fn log(&self, p: &Point, q: &Point) -> Result<Tangent> {
        self.validate_point(p)?;
        self.validate_point(q)?;
        let (theta, w, _) = Self::angle(p.matrix(), q.matrix());
        if theta >= PI - self.tol {
            return Err(Error::InjectivityGuard(format!(
                "points are antipodal (angle {theta})"
            )));
        }
        let s = w.norm();
        let v = if s < SMALL { w } else { w * (theta / s) };
        self.project_tangent(p, &v)
    }

    fn dist(&self, p: &Point, q: &Point) -> Result<f64> {
        self.validate_point(p)?;
        self.validate_point(q)?;
        Ok(Self::angle(p.matrix(), q.matrix()).0)
    }

    fn transport(&self, p: &Point, q: &Point, v: &Tangent) -> Result<Tangent> {
        self.validate_point(p)?;
        self.validate_point(q)?;
        self.check_shape(v.matrix())?;
        let (theta, _, c) = Self::angle(p.matrix(), q.matrix());
        if theta >= PI - self.tol {
            return Err(Error::InjectivityGuard(format!(
                "transport between antipodal points (angle {theta})"
            )));
        }
        // rotation in span{p, q}; vectors orthogonal to that plane are fixed
        let coef = q.matrix().dot(v.matrix()) / (1.0 + c);
        let out = v.matrix() - (p.matrix() + q.matrix()) * coef;
        self.project_tangent(q, &out)
    }

    fn project_tangent(&self, p: &Point, raw: &DMatrix<f64>) -> Result<Tangent> {
        self.check_shape(raw)?;
        let c = p.matrix().dot(raw);
        Ok(Tangent::new(raw - p.matrix() * c))
    }

    fn canonical_tangents(&self, p: &Point) -> Result<Vec<Tangent>> {
        let n = self.dim + 1;
        (0..n)
            .map(|k| {
                let mut e = DMatrix::zeros(n, 1);
                e[(k, 0)] = 1.0;
                self.project_tangent(p, &e)
            })
            .collect()
    }
}
