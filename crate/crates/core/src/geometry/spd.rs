use nalgebra::{Cholesky, DMatrix, Dyn};

use super::linalg::{from_eigen, sym_eigen, sym_exp, sym_log, symmetric_basis, symmetrize, EIG_FLOOR};
use super::{Manifold, Point, Tangent, DEFAULT_TOL};
use crate::error::{Error, Result};

fn check_square(m: usize, a: &DMatrix<f64>) -> Result<()> {
    if a.shape() != (m, m) {
        return Err(Error::ShapeMismatch {
            expected: (m, m),
            actual: a.shape(),
        });
    }
    Ok(())
}

fn check_symmetric(tol: f64, a: &DMatrix<f64>, what: &str) -> Result<()> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidPoint(format!("{what} has non-finite entries")));
    }
    let asym = super::linalg::asymmetry(a);
    if asym > tol * a.amax().max(1.0) {
        let msg = format!("{what} is not symmetric (max asymmetry {asym:e})");
        return Err(if what == "tangent" {
            Error::InvalidTangent(msg)
        } else {
            Error::InvalidPoint(msg)
        });
    }
    Ok(())
}

fn symmetric_tangents(m: usize) -> Vec<Tangent> {
    symmetric_basis(m).into_iter().map(Tangent::new).collect()
}

/// SPD(m) with the Log-Cholesky metric.
///
/// The chart c(P) = ⌊L⌋ + log D(L), where P = LLᵀ, is a global isometry onto
/// lower-triangular matrices with the Frobenius inner product, so the
/// geometry is flat and every primitive is Euclidean in c-coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SpdLogCholesky {
    pub m: usize,
    pub tol: f64,
}

impl SpdLogCholesky {
    pub fn new(m: usize) -> Self {
        assert!(m >= 2, "SPD size must be at least 2");
        SpdLogCholesky { m, tol: DEFAULT_TOL }
    }

    fn factor(&self, p: &Point) -> Result<DMatrix<f64>> {
        check_square(self.m, p.matrix())?;
        check_symmetric(self.tol, p.matrix(), "point")?;
        let chol = Cholesky::<f64, Dyn>::new(p.matrix().clone())
            .ok_or_else(|| Error::InvalidPoint("matrix is not positive definite".into()))?;
        Ok(chol.l())
    }

    /// Lower-triangular chart coordinates of a point.
    pub fn coords(&self, p: &Point) -> Result<DMatrix<f64>> {
        Ok(Self::coords_of_factor(&self.factor(p)?))
    }

    fn coords_of_factor(l: &DMatrix<f64>) -> DMatrix<f64> {
        let mut c = l.lower_triangle();
        for i in 0..c.nrows() {
            c[(i, i)] = l[(i, i)].ln();
        }
        c
    }

    /// Inverse chart: the SPD matrix with the given lower-triangular coordinates.
    pub fn from_coords(&self, c: &DMatrix<f64>) -> Result<Point> {
        check_square(self.m, c)?;
        let mut l = c.lower_triangle();
        for i in 0..self.m {
            l[(i, i)] = c[(i, i)].exp();
        }
        Ok(Point::new(&l * l.transpose()))
    }

    /// Differential of the chart: symmetric tangent X at P = LLᵀ to
    /// lower-triangular coordinates.
    fn d_chart(l: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
        let m = l.nrows();
        let chol_l = l.clone();
        // W = L⁻¹ X L⁻ᵀ via two triangular solves
        let y = chol_l
            .solve_lower_triangular(x)
            .expect("Cholesky factor has a positive diagonal");
        let w = chol_l
            .solve_lower_triangular(&y.transpose())
            .expect("Cholesky factor has a positive diagonal");
        let mut phi = w.lower_triangle();
        for i in 0..m {
            phi[(i, i)] *= 0.5;
        }
        let mut dl = l * phi;
        for i in 0..m {
            dl[(i, i)] /= l[(i, i)];
        }
        dl
    }

    /// Inverse of [`Self::d_chart`].
    fn d_chart_inv(l: &DMatrix<f64>, d: &DMatrix<f64>) -> DMatrix<f64> {
        let mut dl = d.lower_triangle();
        for i in 0..l.nrows() {
            dl[(i, i)] *= l[(i, i)];
        }
        let x = &dl * l.transpose();
        &x + x.transpose()
    }

    /// Chart coordinates of a tangent vector at `p`.
    pub fn tangent_coords(&self, p: &Point, v: &Tangent) -> Result<DMatrix<f64>> {
        let l = self.factor(p)?;
        check_square(self.m, v.matrix())?;
        Ok(Self::d_chart(&l, v.matrix()))
    }

    /// Tangent vector at `p` with the given chart coordinates.
    pub fn tangent_from_coords(&self, p: &Point, d: &DMatrix<f64>) -> Result<Tangent> {
        let l = self.factor(p)?;
        check_square(self.m, d)?;
        Ok(Tangent::new(Self::d_chart_inv(&l, d)))
    }
}

impl Manifold for SpdLogCholesky {
    fn dim(&self) -> usize {
        self.m * (self.m + 1) / 2
    }

    fn ambient_shape(&self) -> (usize, usize) {
        (self.m, self.m)
    }

    fn tol(&self) -> f64 {
        self.tol
    }

    fn validate_point(&self, p: &Point) -> Result<()> {
        self.factor(p).map(|_| ())
    }

    fn validate_tangent(&self, p: &Point, v: &Tangent) -> Result<()> {
        self.validate_point(p)?;
        check_square(self.m, v.matrix())?;
        check_symmetric(self.tol, v.matrix(), "tangent")
    }

    fn inner(&self, p: &Point, u: &Tangent, v: &Tangent) -> Result<f64> {
        let l = self.factor(p)?;
        check_square(self.m, u.matrix())?;
        check_square(self.m, v.matrix())?;
        let cu = Self::d_chart(&l, u.matrix());
        let cv = Self::d_chart(&l, v.matrix());
        Ok(cu.dot(&cv))
    }

    fn exp(&self, p: &Point, v: &Tangent) -> Result<Point> {
        let l = self.factor(p)?;
        check_square(self.m, v.matrix())?;
        let c = Self::coords_of_factor(&l) + Self::d_chart(&l, v.matrix());
        self.from_coords(&c)
    }

    fn log(&self, p: &Point, q: &Point) -> Result<Tangent> {
        let lp = self.factor(p)?;
        let lq = self.factor(q)?;
        let d = Self::coords_of_factor(&lq) - Self::coords_of_factor(&lp);
        Ok(Tangent::new(Self::d_chart_inv(&lp, &d)))
    }

    fn dist(&self, p: &Point, q: &Point) -> Result<f64> {
        Ok((self.coords(q)? - self.coords(p)?).norm())
    }

    fn transport(&self, p: &Point, q: &Point, v: &Tangent) -> Result<Tangent> {
        let lp = self.factor(p)?;
        let lq = self.factor(q)?;
        check_square(self.m, v.matrix())?;
        let d = Self::d_chart(&lp, v.matrix());
        Ok(Tangent::new(Self::d_chart_inv(&lq, &d)))
    }

    fn project_tangent(&self, _p: &Point, raw: &DMatrix<f64>) -> Result<Tangent> {
        check_square(self.m, raw)?;
        Ok(Tangent::new(symmetrize(raw)))
    }

    fn canonical_tangents(&self, _p: &Point) -> Result<Vec<Tangent>> {
        Ok(symmetric_tangents(self.m))
    }

    fn log_many(&self, p: &Point, qs: &[&Point]) -> Result<Vec<Tangent>> {
        let lp = self.factor(p)?;
        let cp = Self::coords_of_factor(&lp);
        qs.iter()
            .map(|q| {
                let d = self.coords(q)? - &cp;
                Ok(Tangent::new(Self::d_chart_inv(&lp, &d)))
            })
            .collect()
    }

    fn transport_many(&self, p: &Point, q: &Point, vs: &[Tangent]) -> Result<Vec<Tangent>> {
        let lp = self.factor(p)?;
        let lq = self.factor(q)?;
        vs.iter()
            .map(|v| {
                check_square(self.m, v.matrix())?;
                let d = Self::d_chart(&lp, v.matrix());
                Ok(Tangent::new(Self::d_chart_inv(&lq, &d)))
            })
            .collect()
    }
}

/// SPD(m) with the affine-invariant metric ⟨U,V⟩_P = tr(P⁻¹UP⁻¹V).
#[derive(Clone, Debug, PartialEq)]
pub struct SpdAffine {
    pub m: usize,
    pub tol: f64,
}

/// P^{1/2} and P^{-1/2} of a base point.
struct Roots {
    sqrt: DMatrix<f64>,
    isqrt: DMatrix<f64>,
}

impl SpdAffine {
    pub fn new(m: usize) -> Self {
        assert!(m >= 2, "SPD size must be at least 2");
        SpdAffine { m, tol: DEFAULT_TOL }
    }

    fn roots(&self, p: &Point) -> Result<Roots> {
        check_square(self.m, p.matrix())?;
        check_symmetric(self.tol, p.matrix(), "point")?;
        let (vals, vecs) = sym_eigen(p.matrix());
        let min = vals.min();
        if !(min > 0.0) {
            return Err(Error::InvalidPoint(format!(
                "matrix is not positive definite (smallest eigenvalue {min:e})"
            )));
        }
        Ok(Roots {
            sqrt: from_eigen(&vals, &vecs, f64::sqrt),
            isqrt: from_eigen(&vals, &vecs, |x| 1.0 / x.sqrt()),
        })
    }

    fn whiten(r: &Roots, a: &DMatrix<f64>) -> DMatrix<f64> {
        symmetrize(&(&r.isqrt * a * &r.isqrt))
    }

    fn color(r: &Roots, a: &DMatrix<f64>) -> DMatrix<f64> {
        symmetrize(&(&r.sqrt * a * &r.sqrt))
    }

    fn log_with(r: &Roots, q: &DMatrix<f64>) -> Tangent {
        Tangent::new(Self::color(r, &sym_log(&Self::whiten(r, q))))
    }

    /// E = P^{1/2}(P^{-1/2}QP^{-1/2})^{1/2}P^{-1/2}, which equals (QP⁻¹)^{1/2}.
    fn transport_map(rp: &Roots, q: &DMatrix<f64>) -> DMatrix<f64> {
        let w = Self::whiten(rp, q);
        let (vals, vecs) = sym_eigen(&w);
        let half = from_eigen(&vals, &vecs, |x| x.max(EIG_FLOOR).sqrt());
        &rp.sqrt * half * &rp.isqrt
    }
}

impl Manifold for SpdAffine {
    fn dim(&self) -> usize {
        self.m * (self.m + 1) / 2
    }

    fn ambient_shape(&self) -> (usize, usize) {
        (self.m, self.m)
    }

    fn tol(&self) -> f64 {
        self.tol
    }

    fn validate_point(&self, p: &Point) -> Result<()> {
        self.roots(p).map(|_| ())
    }

    fn validate_tangent(&self, p: &Point, v: &Tangent) -> Result<()> {
        self.validate_point(p)?;
        check_square(self.m, v.matrix())?;
        check_symmetric(self.tol, v.matrix(), "tangent")
    }

    fn inner(&self, p: &Point, u: &Tangent, v: &Tangent) -> Result<f64> {
        let r = self.roots(p)?;
        check_square(self.m, u.matrix())?;
        check_square(self.m, v.matrix())?;
        let a = &r.isqrt * u.matrix() * &r.isqrt;
        let b = &r.isqrt * v.matrix() * &r.isqrt;
        Ok(a.dot(&b))
    }

    fn exp(&self, p: &Point, v: &Tangent) -> Result<Point> {
        let r = self.roots(p)?;
        check_square(self.m, v.matrix())?;
        let inner = sym_exp(&Self::whiten(&r, v.matrix()));
        Ok(Point::new(Self::color(&r, &inner)))
    }

    fn log(&self, p: &Point, q: &Point) -> Result<Tangent> {
        let r = self.roots(p)?;
        self.validate_point(q)?;
        Ok(Self::log_with(&r, q.matrix()))
    }

    fn dist(&self, p: &Point, q: &Point) -> Result<f64> {
        let r = self.roots(p)?;
        self.validate_point(q)?;
        let (vals, _) = sym_eigen(&Self::whiten(&r, q.matrix()));
        Ok(vals
            .iter()
            .map(|x| x.max(EIG_FLOOR).ln().powi(2))
            .sum::<f64>()
            .sqrt())
    }

    fn transport(&self, p: &Point, q: &Point, v: &Tangent) -> Result<Tangent> {
        let r = self.roots(p)?;
        self.validate_point(q)?;
        check_square(self.m, v.matrix())?;
        let e = Self::transport_map(&r, q.matrix());
        Ok(Tangent::new(symmetrize(&(&e * v.matrix() * e.transpose()))))
    }

    fn project_tangent(&self, _p: &Point, raw: &DMatrix<f64>) -> Result<Tangent> {
        check_square(self.m, raw)?;
        Ok(Tangent::new(symmetrize(raw)))
    }

    fn canonical_tangents(&self, _p: &Point) -> Result<Vec<Tangent>> {
        Ok(symmetric_tangents(self.m))
    }

    fn log_many(&self, p: &Point, qs: &[&Point]) -> Result<Vec<Tangent>> {
        let r = self.roots(p)?;
        qs.iter()
            .map(|q| {
                self.validate_point(q)?;
                Ok(Self::log_with(&r, q.matrix()))
            })
            .collect()
    }

    fn transport_many(&self, p: &Point, q: &Point, vs: &[Tangent]) -> Result<Vec<Tangent>> {
        let r = self.roots(p)?;
        self.validate_point(q)?;
        let e = Self::transport_map(&r, q.matrix());
        let et = e.transpose();
        vs.iter()
            .map(|v| {
                check_square(self.m, v.matrix())?;
                Ok(Tangent::new(symmetrize(&(&e * v.matrix() * &et))))
            })
            .collect()
    }
}
