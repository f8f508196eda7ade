//! Fibers 𝕃(p,q) of linear maps between tangent spaces, their transport and
//! the Hilbert–Schmidt metric.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Frame, Manifold, Point, Tangent};

/// Base points closer than this (relative, ambient max-norm) are treated as equal.
const SAME_BASE_TOL: f64 = 1e-9;

/// A linear map T_pℳ → T_qℳ in coefficients against attached frames:
/// u = ∑ aₖ source[k] is sent to ∑ⱼ (A a)ⱼ target[j].
#[derive(Clone, Debug)]
pub struct FiberElement {
    source: Arc<Frame>,
    target: Arc<Frame>,
    coeffs: DMatrix<f64>,
}

impl FiberElement {
    pub fn new(source: Arc<Frame>, target: Arc<Frame>, coeffs: DMatrix<f64>) -> Result<Self> {
        let shape = (target.dim(), source.dim());
        if coeffs.shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: shape,
                actual: coeffs.shape(),
            });
        }
        Ok(FiberElement {
            source,
            target,
            coeffs,
        })
    }

    pub fn zero(source: Arc<Frame>, target: Arc<Frame>) -> Self {
        let coeffs = DMatrix::zeros(target.dim(), source.dim());
        FiberElement {
            source,
            target,
            coeffs,
        }
    }

    /// u ⊗ v as the map w ↦ ⟨u, w⟩ v, with u at the source and v at the target.
    pub fn outer(source: Arc<Frame>, target: Arc<Frame>, u: &Tangent, v: &Tangent) -> Self {
        let a = source.coefficients(u);
        let b = target.coefficients(v);
        let coeffs = &b * a.transpose();
        FiberElement {
            source,
            target,
            coeffs,
        }
    }

    pub fn source(&self) -> &Arc<Frame> {
        &self.source
    }

    pub fn target(&self) -> &Arc<Frame> {
        &self.target
    }

    pub fn coeffs(&self) -> &DMatrix<f64> {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> DMatrix<f64> {
        self.coeffs
    }

    /// Evaluates the map on a tangent vector at the source point.
    pub fn apply(&self, u: &Tangent) -> Tangent {
        let a = self.source.coefficients(u);
        self.target.combine(&(&self.coeffs * a))
    }

    /// The adjoint map T_qℳ → T_pℳ. With orthonormal frames this is the
    /// transposed coefficient matrix.
    pub fn adjoint(&self) -> FiberElement {
        FiberElement {
            source: self.target.clone(),
            target: self.source.clone(),
            coeffs: self.coeffs.transpose(),
        }
    }

    /// Same map written against other frames at the same base points.
    pub fn expressed_in(&self, source: &Arc<Frame>, target: &Arc<Frame>) -> Result<FiberElement> {
        check_same_base(&self.source, source)?;
        check_same_base(&self.target, target)?;
        let rp = self.source.expressed_in(source);
        let rq = self.target.expressed_in(target);
        Ok(FiberElement {
            source: source.clone(),
            target: target.clone(),
            coeffs: rq * &self.coeffs * rp.transpose(),
        })
    }

    /// Hilbert–Schmidt norm ‖C‖_G.
    pub fn g_norm(&self) -> f64 {
        self.coeffs.norm()
    }
}

fn check_same_base(a: &Frame, b: &Frame) -> Result<()> {
    if a.same_base(b, SAME_BASE_TOL) {
        Ok(())
    } else {
        Err(Error::BasePointMismatch(format!(
            "frames sit at different points (max difference {:e})",
            if a.base().shape() == b.base().shape() {
                a.base().max_abs_diff(b.base())
            } else {
                f64::INFINITY
            }
        )))
    }
}

/// Raw covariance Log_{μ(s)}y_s ⊗ Log_{μ(t)}y_t. The frames carry μ(s), μ(t).
pub fn raw_cov<M: Manifold + ?Sized>(
    geom: &M,
    at_s: &Arc<Frame>,
    at_t: &Arc<Frame>,
    y_s: &Point,
    y_t: &Point,
) -> Result<FiberElement> {
    let u = geom.log(at_s.base(), y_s)?;
    let v = geom.log(at_t.base(), y_t)?;
    Ok(FiberElement::outer(at_s.clone(), at_t.clone(), &u, &v))
}

/// Coefficients of `from`'s vectors transported to `to`'s base, expressed in `to`.
/// Orthogonal up to rounding.
pub fn transport_matrix<M: Manifold + ?Sized>(geom: &M, from: &Frame, to: &Frame) -> Result<DMatrix<f64>> {
    let moved = geom.transport_many(from.base(), to.base(), &from.vectors())?;
    let d = to.dim();
    let mut o = DMatrix::zeros(d, from.dim());
    for (k, v) in moved.iter().enumerate() {
        o.set_column(k, &to.coefficients(v));
    }
    Ok(o)
}

/// Bundle parallel transport of C ∈ 𝕃(p₁,q₁) to 𝕃(p₂,q₂), the new base points
/// being those of `to_p` and `to_q`: u ↦ 𝒫_{q₁}^{q₂} C 𝒫_{p₂}^{p₁} u.
pub fn bundle_transport<M: Manifold + ?Sized>(
    geom: &M,
    c: &FiberElement,
    to_p: &Arc<Frame>,
    to_q: &Arc<Frame>,
) -> Result<FiberElement> {
    let op = transport_matrix(geom, &c.source, to_p)?;
    let oq = transport_matrix(geom, &c.target, to_q)?;
    Ok(FiberElement {
        source: to_p.clone(),
        target: to_q.clone(),
        coeffs: oq * &c.coeffs * op.transpose(),
    })
}

/// Hilbert–Schmidt inner product ∑ₖ⟨C₁eₖ, C₂eₖ⟩ of two elements of one fiber.
pub fn bundle_inner(c1: &FiberElement, c2: &FiberElement) -> Result<f64> {
    let c2 = c2.expressed_in(&c1.source, &c1.target)?;
    Ok(c1.coeffs.dot(&c2.coeffs))
}

/// The two parts of the quadrilateral transport discrepancy, plus their
/// combination ‖𝒫_{q₁}^{p₁}𝒫_{q₂}^{q₁}Log_{q₂}y − 𝒫_{p₂}^{p₁}Log_{p₂}y‖_{p₁}.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolonomyDefect {
    /// The full discrepancy at p₁.
    pub total: f64,
    /// Rotation picked up by Log_{q₂}y around the closed loop
    /// q₂ → q₁ → p₁ → p₂ → q₂. Vanishes on flat geometries.
    pub loop_part: f64,
    /// ‖Log_{q₂}y − 𝒫_{p₂}^{q₂}Log_{p₂}y‖, present even without curvature.
    pub base_change: f64,
}

pub fn holonomy_defect<M: Manifold + ?Sized>(
    geom: &M,
    p1: &Point,
    p2: &Point,
    q1: &Point,
    q2: &Point,
    y: &Point,
) -> Result<HolonomyDefect> {
    let v = geom.log(q2, y)?;
    let w = geom.log(p2, y)?;

    let v_q1 = geom.transport(q2, q1, &v)?;
    let v_p1 = geom.transport(q1, p1, &v_q1)?;
    let w_p1 = geom.transport(p2, p1, &w)?;
    let total = geom.norm(p1, &(&v_p1 - &w_p1))?;

    let v_p2 = geom.transport(p1, p2, &v_p1)?;
    let v_loop = geom.transport(p2, q2, &v_p2)?;
    let loop_part = geom.norm(q2, &(&v_loop - &v))?;

    let w_q2 = geom.transport(p2, q2, &w)?;
    let base_change = geom.norm(q2, &(&v - &w_q2))?;

    Ok(HolonomyDefect {
        total,
        loop_part,
        base_change,
    })
}

/// JSON form of a fiber element.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FiberRecord {
    pub source: Frame,
    pub target: Frame,
    pub coeffs: Vec<Vec<f64>>,
}

impl From<&FiberElement> for FiberRecord {
    fn from(c: &FiberElement) -> Self {
        FiberRecord {
            source: (*c.source).clone(),
            target: (*c.target).clone(),
            coeffs: rows(&c.coeffs),
        }
    }
}

impl TryFrom<FiberRecord> for FiberElement {
    type Error = Error;
    fn try_from(r: FiberRecord) -> Result<Self> {
        let coeffs = from_rows(&r.coeffs)?;
        FiberElement::new(Arc::new(r.source), Arc::new(r.target), coeffs)
    }
}

impl Serialize for FiberElement {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        FiberRecord::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for FiberElement {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        FiberRecord::deserialize(d)?
            .try_into()
            .map_err(serde::de::Error::custom)
    }
}

/// Row-major nested vectors, the JSON form of coefficient matrices.
pub fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Invalid("ragged coefficient matrix".into()));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::random::{random_orthogonal, random_point, random_tangent};
    use crate::geometry::Geometry;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frame_at(g: &Geometry, p: &Point) -> Arc<Frame> {
        Arc::new(g.onb(p, None).unwrap())
    }

    #[test]
    fn raw_cov_examples() {
        let g = Geometry::sphere(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_point(&g, 1.0, &mut rng);
        let q = g.exp(&p, &random_tangent(&g, &p, 0.5, &mut rng)).unwrap();
        let (fp, fq) = (frame_at(&g, &p), frame_at(&g, &q));

        let zero = raw_cov(&g, &fp, &fq, &p, &q).unwrap();
        assert_eq!(zero.g_norm(), 0.0);

        let ys = g.exp(&p, &fp.vector(0)).unwrap();
        let yt = g.exp(&q, &fq.vector(1)).unwrap();
        let c = raw_cov(&g, &fp, &fq, &ys, &yt).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        assert!((c.coeffs() - expect).amax() < 1e-12);

        let ys = g.exp(&p, &random_tangent(&g, &p, 0.7, &mut rng)).unwrap();
        let yt = g.exp(&q, &random_tangent(&g, &q, 0.3, &mut rng)).unwrap();
        let c = raw_cov(&g, &fp, &fq, &ys, &yt).unwrap();
        let rhs = g.dist(&p, &ys).unwrap() * g.dist(&q, &yt).unwrap();
        assert!((c.g_norm() - rhs).abs() < 1e-10);
    }

    #[test]
    fn identity_map_has_norm_sqrt_d() {
        let g = Geometry::sphere(2);
        let p = Point::from_vector(&[0.0, 0.0, 1.0]);
        let f = frame_at(&g, &p);
        let id = FiberElement::new(f.clone(), f, DMatrix::identity(2, 2)).unwrap();
        assert!((bundle_inner(&id, &id).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn transport_to_same_fiber_is_identity() {
        let g = Geometry::spd_affine(2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_point(&g, 0.5, &mut rng);
        let q = random_point(&g, 0.5, &mut rng);
        let (fp, fq) = (frame_at(&g, &p), frame_at(&g, &q));
        let c = FiberElement::new(fp.clone(), fq.clone(), DMatrix::from_fn(3, 3, |i, j| (i + 2 * j) as f64)).unwrap();
        let t = bundle_transport(&g, &c, &fp, &fq).unwrap();
        assert!((t.coeffs() - c.coeffs()).amax() < 1e-12);
    }

    #[test]
    fn mismatched_fibers_are_rejected() {
        let g = Geometry::sphere(2);
        let p = Point::from_vector(&[1.0, 0.0, 0.0]);
        let q = Point::from_vector(&[0.0, 1.0, 0.0]);
        let (fp, fq) = (frame_at(&g, &p), frame_at(&g, &q));
        let a = FiberElement::zero(fp.clone(), fq.clone());
        let b = FiberElement::zero(fq, fp);
        assert!(matches!(bundle_inner(&a, &b), Err(Error::BasePointMismatch(_))));
    }

    #[test]
    fn holonomy_on_flat_space_is_base_change_only() {
        let g = Geometry::spd_log_cholesky(2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let pts: Vec<Point> = (0..5).map(|_| random_point(&g, 0.4, &mut rng)).collect();
            let h = holonomy_defect(&g, &pts[0], &pts[1], &pts[2], &pts[3], &pts[4]).unwrap();
            assert!(h.loop_part < 1e-9);
            // in flat coordinates Log_q y − Log_p y = p − q, so the total is d(p₂,q₂)
            let d = g.dist(&pts[1], &pts[3]).unwrap();
            assert!((h.total - d).abs() < 1e-9);
            assert!((h.base_change - d).abs() < 1e-9);
        }
        let p = random_point(&g, 0.4, &mut rng);
        let y = random_point(&g, 0.4, &mut rng);
        let h = holonomy_defect(&g, &p, &p, &p, &p, &y).unwrap();
        assert!(h.total < 1e-10);
    }

    #[test]
    fn json_round_trip() {
        let g = Geometry::spd_log_cholesky(2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_point(&g, 0.5, &mut rng);
        let q = random_point(&g, 0.5, &mut rng);
        let c = FiberElement::new(frame_at(&g, &p), frame_at(&g, &q), DMatrix::from_fn(3, 3, |i, j| 0.1 * (i as f64) - j as f64)).unwrap();
        let s = serde_json::to_string(&c).unwrap();
        let back: FiberElement = serde_json::from_str(&s).unwrap();
        assert_eq!(back.coeffs(), c.coeffs());
        assert_eq!(back.source().basis_matrix(), c.source().basis_matrix());
    }

    fn all() -> Vec<Geometry> {
        vec![Geometry::euclidean(2), Geometry::sphere(2), Geometry::spd_log_cholesky(2), Geometry::spd_affine(2)]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn prop_transport_preserves_g_norm(seed in any::<u64>(), which in 0usize..4) {
            let g = &all()[which];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p1 = random_point(g, 0.5, &mut rng);
            let q1 = g.exp(&p1, &random_tangent(g, &p1, 0.8, &mut rng)).unwrap();
            let p2 = g.exp(&p1, &random_tangent(g, &p1, 0.6, &mut rng)).unwrap();
            let q2 = g.exp(&q1, &random_tangent(g, &q1, 0.6, &mut rng)).unwrap();
            let d = g.dim();
            let a = DMatrix::from_fn(d, d, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
            let c = FiberElement::new(frame_at(g, &p1), frame_at(g, &q1), a).unwrap();
            let t = bundle_transport(g, &c, &frame_at(g, &p2), &frame_at(g, &q2)).unwrap();
            prop_assert!((t.g_norm() - c.g_norm()).abs() < 1e-9);
            // and again along a chain
            let p3 = random_point(g, 0.5, &mut rng);
            let t2 = bundle_transport(g, &t, &frame_at(g, &p3), &frame_at(g, &p3)).unwrap();
            prop_assert!((t2.g_norm() - c.g_norm()).abs() < 1e-9);
        }

        #[test]
        fn prop_rank_one_inner(seed in any::<u64>(), which in 0usize..4) {
            let g = &all()[which];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_point(g, 0.5, &mut rng);
            let q = random_point(g, 0.5, &mut rng);
            let (fp, fq) = (frame_at(g, &p), frame_at(g, &q));
            let u = random_tangent(g, &p, 1.0, &mut rng);
            let u2 = random_tangent(g, &p, 0.5, &mut rng);
            let v = random_tangent(g, &q, 0.7, &mut rng);
            let v2 = random_tangent(g, &q, 1.1, &mut rng);
            let c1 = FiberElement::outer(fp.clone(), fq.clone(), &u, &v);
            let c2 = FiberElement::outer(fp, fq, &u2, &v2);
            let lhs = bundle_inner(&c1, &c2).unwrap();
            let rhs = g.inner(&p, &u, &u2).unwrap() * g.inner(&q, &v, &v2).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10);
            let cs = bundle_inner(&c1, &c1).unwrap() * bundle_inner(&c2, &c2).unwrap();
            prop_assert!(lhs * lhs <= cs + 1e-12);
        }

        #[test]
        fn prop_reframing_invariance(seed in any::<u64>(), which in 0usize..4) {
            let g = &all()[which];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_point(g, 0.5, &mut rng);
            let q = random_point(g, 0.5, &mut rng);
            let (fp, fq) = (frame_at(g, &p), frame_at(g, &q));
            let d = g.dim();
            let a = DMatrix::from_fn(d, d, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
            let b = DMatrix::from_fn(d, d, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
            let c1 = FiberElement::new(fp.clone(), fq.clone(), a).unwrap();
            let c2 = FiberElement::new(fp.clone(), fq.clone(), b).unwrap();
            let before = bundle_inner(&c1, &c2).unwrap();

            let (op, oq) = (random_orthogonal(d, &mut rng), random_orthogonal(d, &mut rng));
            let rp = Arc::new(fp.rotated(&op).unwrap());
            let rq = Arc::new(fq.rotated(&oq).unwrap());
            let r1 = c1.expressed_in(&rp, &rq).unwrap();
            prop_assert!((r1.coeffs() - &oq * c1.coeffs() * op.transpose()).amax() < 1e-12);
            let r2 = c2.expressed_in(&rp, &rq).unwrap();
            prop_assert!((bundle_inner(&r1, &r2).unwrap() - before).abs() < 1e-10);
            prop_assert!((bundle_inner(&r1, &c2).unwrap() - before).abs() < 1e-10);
            // the represented map is unchanged
            let u = random_tangent(g, &p, 1.0, &mut rng);
            prop_assert!(r1.apply(&u).max_abs_diff(&c1.apply(&u)) < 1e-10);
        }

        #[test]
        fn prop_flat_bundle_transport_path_independent(seed in any::<u64>()) {
            let g = Geometry::spd_log_cholesky(2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Point> = (0..6).map(|_| random_point(&g, 0.5, &mut rng)).collect();
            let f: Vec<Arc<Frame>> = pts.iter().map(|p| frame_at(&g, p)).collect();
            let a = DMatrix::from_fn(3, 3, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
            let c = FiberElement::new(f[0].clone(), f[1].clone(), a).unwrap();
            let direct = bundle_transport(&g, &c, &f[4], &f[5]).unwrap();
            let mid = bundle_transport(&g, &c, &f[2], &f[3]).unwrap();
            let via = bundle_transport(&g, &mid, &f[4], &f[5]).unwrap();
            prop_assert!((direct.coeffs() - via.coeffs()).amax() < 1e-10);
        }
    }
}
