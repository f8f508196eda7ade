use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Manifold, Point, Tangent};
use crate::error::{Error, Result};

/// An orthonormal basis of one tangent space.
///
/// `basis` holds the d frame vectors as columns of flattened ambient
/// coordinates; `dual` is its left inverse, so coefficients of any tangent
/// vector at the base point come from one matrix-vector product. Because the
/// frame is orthonormal in the Riemannian metric these are exactly the
/// metric coefficients ⟨eₖ, u⟩.
#[derive(Clone, Debug)]
pub struct Frame {
    base: Point,
    shape: (usize, usize),
    basis: DMatrix<f64>,
    dual: DMatrix<f64>,
}

impl Frame {
    pub fn new(base: Point, vectors: Vec<Tangent>) -> Result<Self> {
        let shape = base.shape();
        let len = shape.0 * shape.1;
        if vectors.is_empty() {
            return Err(Error::Invalid("frame needs at least one vector".into()));
        }
        let mut basis = DMatrix::zeros(len, vectors.len());
        for (k, v) in vectors.iter().enumerate() {
            if v.shape() != shape {
                return Err(Error::ShapeMismatch {
                    expected: shape,
                    actual: v.shape(),
                });
            }
            basis.set_column(k, &DVector::from_column_slice(v.as_slice()));
        }
        Self::from_basis(base, basis)
    }

    fn from_basis(base: Point, basis: DMatrix<f64>) -> Result<Self> {
        let shape = base.shape();
        let gram = basis.transpose() * &basis;
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Invalid("frame vectors are linearly dependent".into()))?;
        let dual = chol.solve(&basis.transpose());
        Ok(Frame {
            base,
            shape,
            basis,
            dual,
        })
    }

    pub fn base(&self) -> &Point {
        &self.base
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn vector(&self, k: usize) -> Tangent {
        Tangent::new(DMatrix::from_column_slice(
            self.shape.0,
            self.shape.1,
            self.basis.column(k).as_slice(),
        ))
    }

    pub fn vectors(&self) -> Vec<Tangent> {
        (0..self.dim()).map(|k| self.vector(k)).collect()
    }

    /// Flattened ambient basis, one frame vector per column.
    pub fn basis_matrix(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Coefficients of a tangent vector at the base point.
    pub fn coefficients(&self, u: &Tangent) -> DVector<f64> {
        &self.dual * DVector::from_column_slice(u.as_slice())
    }

    /// Tangent vector ∑ cₖ eₖ.
    pub fn combine(&self, coeffs: &DVector<f64>) -> Tangent {
        let flat = &self.basis * coeffs;
        Tangent::new(DMatrix::from_column_slice(
            self.shape.0,
            self.shape.1,
            flat.as_slice(),
        ))
    }

    /// Gram matrix of the frame under the manifold metric.
    pub fn gram<M: Manifold + ?Sized>(&self, geom: &M) -> Result<DMatrix<f64>> {
        let vs = self.vectors();
        let d = vs.len();
        let mut g = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in i..d {
                let v = geom.inner(&self.base, &vs[i], &vs[j])?;
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        Ok(g)
    }

    /// The frame parallel-transported to `to` along the minimizing geodesic.
    pub fn transport<M: Manifold + ?Sized>(&self, geom: &M, to: &Point) -> Result<Frame> {
        let moved = geom.transport_many(&self.base, to, &self.vectors())?;
        Frame::new(to.clone(), moved)
    }

    /// Re-framing by an orthogonal d×d matrix `o`: coefficients in the new
    /// frame are `o * c` where `c` are coefficients in this one.
    pub fn rotated(&self, o: &DMatrix<f64>) -> Result<Frame> {
        let d = self.dim();
        if o.shape() != (d, d) {
            return Err(Error::ShapeMismatch {
                expected: (d, d),
                actual: o.shape(),
            });
        }
        Ok(Frame {
            base: self.base.clone(),
            shape: self.shape,
            basis: &self.basis * o.transpose(),
            dual: o * &self.dual,
        })
    }

    /// Change-of-frame matrix R with R[a,b] = coefficient of `self`'s vector
    /// b in `other`'s vector a. Both frames must share the base point.
    pub fn expressed_in(&self, other: &Frame) -> DMatrix<f64> {
        &other.dual * &self.basis
    }

    pub fn same_base(&self, other: &Frame, tol: f64) -> bool {
        let scale = 1.0f64.max(self.base.matrix().amax());
        self.base.shape() == other.base.shape() && self.base.max_abs_diff(&other.base) <= tol * scale
    }
}

/// JSON form of a frame: base point and its vectors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrameRecord {
    pub base: Point,
    pub vectors: Vec<Tangent>,
}

impl From<&Frame> for FrameRecord {
    fn from(f: &Frame) -> Self {
        FrameRecord {
            base: f.base.clone(),
            vectors: f.vectors(),
        }
    }
}

impl TryFrom<FrameRecord> for Frame {
    type Error = Error;
    fn try_from(r: FrameRecord) -> Result<Frame> {
        Frame::new(r.base, r.vectors)
    }
}

impl Serialize for Frame {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        FrameRecord::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Frame {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = FrameRecord::deserialize(d)?;
        Frame::try_from(r).map_err(serde::de::Error::custom)
    }
}
