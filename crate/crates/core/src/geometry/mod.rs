//! Manifold primitives consumed by the estimators.
//!
//! Four geometries are provided behind the [`Manifold`] trait:
//!
//! | descriptor     | space                    | ambient shape | intrinsic dim  |
//! |----------------|--------------------------|---------------|----------------|
//! | `euclidean:d`  | ℝᵈ                       | d × 1         | d              |
//! | `sphere:d`     | unit sphere Sᵈ ⊂ ℝᵈ⁺¹     | (d+1) × 1     | d              |
//! | `spd-lc:m`     | SPD(m), Log-Cholesky     | m × m         | m(m+1)/2       |
//! | `spd-ai:m`     | SPD(m), affine-invariant | m × m         | m(m+1)/2       |
//!
//! Points and tangent vectors are stored in ambient coordinates. Orthonormal
//! frames carry their own base point and a precomputed left inverse so that
//! coefficient extraction is a single matrix-vector product.

mod euclidean;
mod frame;
mod isometry;
pub mod random;
pub(crate) mod linalg;
mod sphere;
mod spd;

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub use euclidean::Euclidean;
pub use frame::Frame;
pub use isometry::Isometry;
pub use sphere::Sphere;
pub use spd::{SpdAffine, SpdLogCholesky};

/// Default numerical tolerance for point and tangent validation.
pub const DEFAULT_TOL: f64 = 1e-12;

/// A point on a manifold in ambient coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Point(DMatrix<f64>);

/// A tangent vector in ambient coordinates. The base point is supplied
/// explicitly to every operation rather than carried along.
#[derive(Clone, Debug, PartialEq)]
pub struct Tangent(DMatrix<f64>);

macro_rules! ambient_common {
    ($ty:ident) => {
        impl $ty {
            pub fn new(m: DMatrix<f64>) -> Self {
                $ty(m)
            }

            /// Column vector from a slice.
            pub fn from_vector(v: &[f64]) -> Self {
                $ty(DMatrix::from_column_slice(v.len(), 1, v))
            }

            /// Square or rectangular matrix from row-major nested rows.
            pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
                let r = rows.len();
                let c = rows.first().map_or(0, |row| row.len());
                if rows.iter().any(|row| row.len() != c) {
                    return Err(Error::Invalid("ragged matrix rows".into()));
                }
                Ok($ty(DMatrix::from_fn(r, c, |i, j| rows[i][j])))
            }

            pub fn matrix(&self) -> &DMatrix<f64> {
                &self.0
            }

            pub fn into_matrix(self) -> DMatrix<f64> {
                self.0
            }

            pub fn shape(&self) -> (usize, usize) {
                self.0.shape()
            }

            /// Column-major flattened coordinates.
            pub fn as_slice(&self) -> &[f64] {
                self.0.as_slice()
            }

            pub fn to_rows(&self) -> Vec<Vec<f64>> {
                (0..self.0.nrows())
                    .map(|i| (0..self.0.ncols()).map(|j| self.0[(i, j)]).collect())
                    .collect()
            }

            pub fn max_abs_diff(&self, other: &Self) -> f64 {
                (&self.0 - &other.0).amax()
            }
        }

        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                if self.0.ncols() == 1 {
                    self.0.as_slice().serialize(s)
                } else {
                    self.to_rows().serialize(s)
                }
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                #[derive(Deserialize)]
                #[serde(untagged)]
                enum Repr {
                    Flat(Vec<f64>),
                    Nested(Vec<Vec<f64>>),
                }
                match Repr::deserialize(d)? {
                    Repr::Flat(v) => Ok($ty::from_vector(&v)),
                    Repr::Nested(rows) => $ty::from_rows(&rows).map_err(serde::de::Error::custom),
                }
            }
        }
    };
}

ambient_common!(Point);
ambient_common!(Tangent);

impl Tangent {
    pub fn zeros(shape: (usize, usize)) -> Self {
        Tangent(DMatrix::zeros(shape.0, shape.1))
    }

    pub fn scale(&self, a: f64) -> Self {
        Tangent(&self.0 * a)
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &Tangent) {
        self.0.zip_apply(&other.0, |x, y| *x += a * y);
    }

    /// Ambient Frobenius norm (not the Riemannian norm).
    pub fn ambient_norm(&self) -> f64 {
        self.0.norm()
    }
}

impl Add for &Tangent {
    type Output = Tangent;
    fn add(self, rhs: &Tangent) -> Tangent {
        Tangent(&self.0 + &rhs.0)
    }
}

impl Sub for &Tangent {
    type Output = Tangent;
    fn sub(self, rhs: &Tangent) -> Tangent {
        Tangent(&self.0 - &rhs.0)
    }
}

impl AddAssign<&Tangent> for Tangent {
    fn add_assign(&mut self, rhs: &Tangent) {
        self.0 += &rhs.0;
    }
}

impl Mul<f64> for &Tangent {
    type Output = Tangent;
    fn mul(self, a: f64) -> Tangent {
        self.scale(a)
    }
}

impl Neg for &Tangent {
    type Output = Tangent;
    fn neg(self) -> Tangent {
        Tangent(-&self.0)
    }
}

/// The operations every geometry provides.
pub trait Manifold {
    /// Intrinsic dimension d.
    fn dim(&self) -> usize;

    /// Shape of the ambient coordinate matrix for points and tangents.
    fn ambient_shape(&self) -> (usize, usize);

    fn tol(&self) -> f64;

    fn validate_point(&self, p: &Point) -> Result<()>;

    /// Checks the tangent invariants at `p` (sphere orthogonality, SPD symmetry).
    fn validate_tangent(&self, p: &Point, v: &Tangent) -> Result<()>;

    fn inner(&self, p: &Point, u: &Tangent, v: &Tangent) -> Result<f64>;

    fn exp(&self, p: &Point, v: &Tangent) -> Result<Point>;

    fn log(&self, p: &Point, q: &Point) -> Result<Tangent>;

    fn dist(&self, p: &Point, q: &Point) -> Result<f64>;

    /// Parallel transport of `v` from `p` to `q` along the minimizing geodesic.
    fn transport(&self, p: &Point, q: &Point, v: &Tangent) -> Result<Tangent>;

    /// Projects an ambient array onto the tangent space at `p`.
    fn project_tangent(&self, p: &Point, raw: &DMatrix<f64>) -> Result<Tangent>;

    /// A fixed spanning set of the tangent space at `p`, in canonical order.
    /// Gram–Schmidt over this list yields the default frame.
    fn canonical_tangents(&self, p: &Point) -> Result<Vec<Tangent>>;

    fn norm(&self, p: &Point, v: &Tangent) -> Result<f64> {
        Ok(self.inner(p, v, v)?.max(0.0).sqrt())
    }

    /// Logs of many points at one base point. Geometries with expensive
    /// base-point factorizations override this.
    fn log_many(&self, p: &Point, qs: &[&Point]) -> Result<Vec<Tangent>> {
        qs.iter().map(|q| self.log(p, q)).collect()
    }

    /// Transport of many vectors along the same geodesic.
    fn transport_many(&self, p: &Point, q: &Point, vs: &[Tangent]) -> Result<Vec<Tangent>> {
        vs.iter().map(|v| self.transport(p, q, v)).collect()
    }

    /// Orthonormal frame at `p`. Without a reference, Gram–Schmidt over
    /// [`Manifold::canonical_tangents`]; with one, the reference frame
    /// transported to `p`.
    fn onb(&self, p: &Point, reference: Option<&Frame>) -> Result<Frame>
    where
        Self: Sized,
    {
        self.validate_point(p)?;
        match reference {
            Some(frame) => frame.transport(self, p),
            None => gram_schmidt_frame(self, p),
        }
    }
}

fn gram_schmidt_frame<M: Manifold>(geom: &M, p: &Point) -> Result<Frame> {
    let d = geom.dim();
    let mut accepted: Vec<Tangent> = Vec::with_capacity(d);
    for cand in geom.canonical_tangents(p)? {
        let cand_norm = geom.norm(p, &cand)?;
        if cand_norm == 0.0 {
            continue;
        }
        let mut r = cand.scale(1.0 / cand_norm);
        // two passes of classical Gram–Schmidt
        for _ in 0..2 {
            for e in &accepted {
                let c = geom.inner(p, e, &r)?;
                r.axpy(-c, e);
            }
        }
        let rn = geom.norm(p, &r)?;
        if rn < 1e-6 {
            continue;
        }
        accepted.push(r.scale(1.0 / rn));
        if accepted.len() == d {
            break;
        }
    }
    if accepted.len() < d {
        return Err(Error::InvalidPoint(format!(
            "could not build a {d}-dimensional frame (got {})",
            accepted.len()
        )));
    }
    Frame::new(p.clone(), accepted)
}

/// Which of the four supported geometries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeometryKind {
    Euclidean,
    Sphere,
    SpdLogCholesky,
    SpdAffineInvariant,
}

/// A concrete geometry, dispatching to one of the four implementations.
#[derive(Clone, Debug, PartialEq)]
pub enum Geometry {
    Euclidean(Euclidean),
    Sphere(Sphere),
    SpdLogCholesky(SpdLogCholesky),
    SpdAffine(SpdAffine),
}

macro_rules! dispatch {
    ($self:ident, $g:ident => $e:expr) => {
        match $self {
            Geometry::Euclidean($g) => $e,
            Geometry::Sphere($g) => $e,
            Geometry::SpdLogCholesky($g) => $e,
            Geometry::SpdAffine($g) => $e,
        }
    };
}

impl Geometry {
    pub fn euclidean(d: usize) -> Self {
        Geometry::Euclidean(Euclidean::new(d))
    }

    pub fn sphere(d: usize) -> Self {
        Geometry::Sphere(Sphere::new(d))
    }

    pub fn spd_log_cholesky(m: usize) -> Self {
        Geometry::SpdLogCholesky(SpdLogCholesky::new(m))
    }

    pub fn spd_affine(m: usize) -> Self {
        Geometry::SpdAffine(SpdAffine::new(m))
    }

    pub fn kind(&self) -> GeometryKind {
        match self {
            Geometry::Euclidean(_) => GeometryKind::Euclidean,
            Geometry::Sphere(_) => GeometryKind::Sphere,
            Geometry::SpdLogCholesky(_) => GeometryKind::SpdLogCholesky,
            Geometry::SpdAffine(_) => GeometryKind::SpdAffineInvariant,
        }
    }

    /// Same geometry with a different validation tolerance.
    pub fn with_tol(self, tol: f64) -> Self {
        match self {
            Geometry::Euclidean(g) => Geometry::Euclidean(Euclidean { tol, ..g }),
            Geometry::Sphere(g) => Geometry::Sphere(Sphere { tol, ..g }),
            Geometry::SpdLogCholesky(g) => Geometry::SpdLogCholesky(SpdLogCholesky { tol, ..g }),
            Geometry::SpdAffine(g) => Geometry::SpdAffine(SpdAffine { tol, ..g }),
        }
    }

    pub fn descriptor(&self) -> String {
        self.to_string()
    }

    /// Zero tangent vector in this geometry's ambient shape.
    pub fn zero_tangent(&self) -> Tangent {
        Tangent::zeros(self.ambient_shape())
    }
}

impl fmt::Display for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Geometry::Euclidean(g) => write!(f, "euclidean:{}", g.dim),
            Geometry::Sphere(g) => write!(f, "sphere:{}", g.dim),
            Geometry::SpdLogCholesky(g) => write!(f, "spd-lc:{}", g.m),
            Geometry::SpdAffine(g) => write!(f, "spd-ai:{}", g.m),
        }
    }
}

impl FromStr for Geometry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::UnknownGeometry(s.to_string());
        let (name, size) = s.trim().split_once(':').ok_or_else(bad)?;
        let size: usize = size.trim().parse().map_err(|_| bad())?;
        match name.trim() {
            "euclidean" if size >= 1 => Ok(Geometry::euclidean(size)),
            "sphere" if size >= 1 => Ok(Geometry::sphere(size)),
            "spd-lc" if size >= 2 => Ok(Geometry::spd_log_cholesky(size)),
            "spd-ai" if size >= 2 => Ok(Geometry::spd_affine(size)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for Geometry {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Geometry {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Manifold for Geometry {
    fn dim(&self) -> usize {
        dispatch!(self, g => g.dim())
    }
    fn ambient_shape(&self) -> (usize, usize) {
        dispatch!(self, g => g.ambient_shape())
    }
    fn tol(&self) -> f64 {
        dispatch!(self, g => g.tol())
    }
    fn validate_point(&self, p: &Point) -> Result<()> {
        dispatch!(self, g => g.validate_point(p))
    }
    fn validate_tangent(&self, p: &Point, v: &Tangent) -> Result<()> {
        dispatch!(self, g => g.validate_tangent(p, v))
    }
    fn inner(&self, p: &Point, u: &Tangent, v: &Tangent) -> Result<f64> {
        dispatch!(self, g => g.inner(p, u, v))
    }
    fn exp(&self, p: &Point, v: &Tangent) -> Result<Point> {
        dispatch!(self, g => g.exp(p, v))
    }
    fn log(&self, p: &Point, q: &Point) -> Result<Tangent> {
        dispatch!(self, g => g.log(p, q))
    }
    fn dist(&self, p: &Point, q: &Point) -> Result<f64> {
        dispatch!(self, g => g.dist(p, q))
    }
    fn transport(&self, p: &Point, q: &Point, v: &Tangent) -> Result<Tangent> {
        dispatch!(self, g => g.transport(p, q, v))
    }
    fn project_tangent(&self, p: &Point, raw: &DMatrix<f64>) -> Result<Tangent> {
        dispatch!(self, g => g.project_tangent(p, raw))
    }
    fn canonical_tangents(&self, p: &Point) -> Result<Vec<Tangent>> {
        dispatch!(self, g => g.canonical_tangents(p))
    }
    fn norm(&self, p: &Point, v: &Tangent) -> Result<f64> {
        dispatch!(self, g => g.norm(p, v))
    }
    fn log_many(&self, p: &Point, qs: &[&Point]) -> Result<Vec<Tangent>> {
        dispatch!(self, g => g.log_many(p, qs))
    }
    fn transport_many(&self, p: &Point, q: &Point, vs: &[Tangent]) -> Result<Vec<Tangent>> {
        dispatch!(self, g => g.transport_many(p, q, vs))
    }
    fn onb(&self, p: &Point, reference: Option<&Frame>) -> Result<Frame> {
        self.validate_point(p)?;
        match reference {
            Some(frame) => frame.transport(self, p),
            None => dispatch!(self, g => gram_schmidt_frame(g, p)),
        }
    }
}

#[cfg(test)]
mod tests;
