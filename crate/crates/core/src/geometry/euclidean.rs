use nalgebra::DMatrix;

use super::{Manifold, Point, Tangent, DEFAULT_TOL};
use crate::error::{Error, Result};

/// Flat ℝᵈ with the standard inner product.
#[derive(Clone, Debug, PartialEq)]
pub struct Euclidean {
    pub dim: usize,
    pub tol: f64,
}

impl Euclidean {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 1, "euclidean dimension must be positive");
        Euclidean {
            dim,
            tol: DEFAULT_TOL,
        }
    }

    fn check(&self, m: &DMatrix<f64>) -> Result<()> {
        if m.shape() != (self.dim, 1) {
            return Err(Error::ShapeMismatch {
                expected: (self.dim, 1),
                actual: m.shape(),
            });
        }
        Ok(())
    }
}

impl Manifold for Euclidean {
    fn dim(&self) -> usize {
        self.dim
    }

    fn ambient_shape(&self) -> (usize, usize) {
        (self.dim, 1)
    }

    fn tol(&self) -> f64 {
        self.tol
    }

    fn validate_point(&self, p: &Point) -> Result<()> {
        self.check(p.matrix())?;
        if p.matrix().iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidPoint("non-finite coordinate".into()));
        }
        Ok(())
    }

    fn validate_tangent(&self, _p: &Point, v: &Tangent) -> Result<()> {
        self.check(v.matrix())
    }

    fn inner(&self, p: &Point, u: &Tangent, v: &Tangent) -> Result<f64> {
        self.validate_point(p)?;
        Ok(u.matrix().dot(v.matrix()))
    }

    fn exp(&self, p: &Point, v: &Tangent) -> Result<Point> {
        self.validate_point(p)?;
        self.check(v.matrix())?;
        Ok(Point::new(p.matrix() + v.matrix()))
    }

    fn log(&self, p: &Point, q: &Point) -> Result<Tangent> {
        self.validate_point(p)?;
        self.validate_point(q)?;
        Ok(Tangent::new(q.matrix() - p.matrix()))
    }

    fn dist(&self, p: &Point, q: &Point) -> Result<f64> {
        self.validate_point(p)?;
        self.validate_point(q)?;
        Ok((q.matrix() - p.matrix()).norm())
    }

    fn transport(&self, p: &Point, q: &Point, v: &Tangent) -> Result<Tangent> {
        self.validate_point(p)?;
        self.validate_point(q)?;
        Ok(v.clone())
    }

    fn project_tangent(&self, _p: &Point, raw: &DMatrix<f64>) -> Result<Tangent> {
        self.check(raw)?;
        Ok(Tangent::new(raw.clone()))
    }

    fn canonical_tangents(&self, _p: &Point) -> Result<Vec<Tangent>> {
        Ok((0..self.dim)
            .map(|k| {
                let mut e = DMatrix::zeros(self.dim, 1);
                e[(k, 0)] = 1.0;
                Tangent::new(e)
            })
            .collect())
    }
}
