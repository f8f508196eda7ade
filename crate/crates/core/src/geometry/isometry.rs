use nalgebra::DMatrix;

use super::{Frame, Point, Tangent};
use crate::error::{Error, Result};

/// Distance-preserving maps used to check equivariance of the estimators.
///
/// `Rotation` acts on Euclidean and sphere points by an orthogonal matrix,
/// `Translation` on Euclidean points, and `Congruence` on affine-invariant
/// SPD points by P ↦ APAᵀ for any invertible A.
#[derive(Clone, Debug)]
pub enum Isometry {
    Identity,
    Rotation(DMatrix<f64>),
    Translation(DMatrix<f64>),
    Congruence(DMatrix<f64>),
}

impl Isometry {
    pub fn apply_point(&self, p: &Point) -> Result<Point> {
        let x = p.matrix();
        Ok(Point::new(match self {
            Isometry::Identity => x.clone(),
            Isometry::Rotation(r) => {
                check_mul(r, x)?;
                r * x
            }
            Isometry::Translation(b) => {
                if b.shape() != x.shape() {
                    return Err(Error::ShapeMismatch {
                        expected: x.shape(),
                        actual: b.shape(),
                    });
                }
                x + b
            }
            Isometry::Congruence(a) => {
                check_mul(a, x)?;
                let y = a * x * a.transpose();
                (&y + y.transpose()) * 0.5
            }
        }))
    }

    /// Differential of the map applied to a tangent vector.
    pub fn apply_tangent(&self, v: &Tangent) -> Result<Tangent> {
        let x = v.matrix();
        Ok(Tangent::new(match self {
            Isometry::Identity | Isometry::Translation(_) => x.clone(),
            Isometry::Rotation(r) => {
                check_mul(r, x)?;
                r * x
            }
            Isometry::Congruence(a) => {
                check_mul(a, x)?;
                let y = a * x * a.transpose();
                (&y + y.transpose()) * 0.5
            }
        }))
    }

    pub fn apply_frame(&self, f: &Frame) -> Result<Frame> {
        let base = self.apply_point(f.base())?;
        let vectors = f
            .vectors()
            .iter()
            .map(|v| self.apply_tangent(v))
            .collect::<Result<Vec<_>>>()?;
        Frame::new(base, vectors)
    }
}

fn check_mul(a: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<()> {
    if a.ncols() != x.nrows() || a.nrows() != a.ncols() {
        return Err(Error::ShapeMismatch {
            expected: (x.nrows(), x.nrows()),
            actual: a.shape(),
        });
    }
    Ok(())
}
