use std::f64::consts::{E, FRAC_PI_2, PI};

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::random::{random_point, random_tangent};
use super::*;

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(v))
}

fn all_geometries() -> Vec<Geometry> {
    vec![
        Geometry::euclidean(3),
        Geometry::sphere(2),
        Geometry::sphere(4),
        Geometry::spd_log_cholesky(2),
        Geometry::spd_log_cholesky(3),
        Geometry::spd_affine(2),
        Geometry::spd_affine(3),
    ]
}

#[test]
fn sphere_examples() {
    let g = Geometry::sphere(2);
    let p = Point::from_vector(&[1.0, 0.0, 0.0]);
    let q = Point::from_vector(&[0.0, 1.0, 0.0]);
    let e2 = Tangent::from_vector(&[0.0, 1.0, 0.0]);
    assert_eq!(g.inner(&p, &e2, &e2).unwrap(), 1.0);

    let v = Tangent::from_vector(&[0.0, FRAC_PI_2, 0.0]);
    assert!(g.exp(&p, &v).unwrap().max_abs_diff(&q) < 1e-15);
    assert!(g.log(&p, &q).unwrap().max_abs_diff(&v) < 1e-15);
    assert!((g.dist(&p, &q).unwrap() - FRAC_PI_2).abs() < 1e-15);

    let n = Tangent::from_vector(&[0.0, 0.0, 1.0]);
    assert!(g.transport(&p, &q, &n).unwrap().max_abs_diff(&n) < 1e-15);
    // the geodesic's own velocity turns into -p at q
    let moved = g.transport(&p, &q, &e2).unwrap();
    assert!(moved.max_abs_diff(&Tangent::from_vector(&[-1.0, 0.0, 0.0])) < 1e-15);

    let proj = g.project_tangent(&p, &DMatrix::from_column_slice(3, 1, &[0.3, 1.0, 0.0])).unwrap();
    assert_eq!(proj, e2);
}

#[test]
fn sphere_guards() {
    let g = Geometry::sphere(2);
    let p = Point::from_vector(&[1.0, 0.0, 0.0]);
    let anti = Point::from_vector(&[-1.0, 0.0, 0.0]);
    assert!(matches!(g.log(&p, &anti), Err(Error::InjectivityGuard(_))));
    assert!(matches!(
        g.transport(&p, &anti, &Tangent::from_vector(&[0.0, 1.0, 0.0])),
        Err(Error::InjectivityGuard(_))
    ));
    let long = Tangent::from_vector(&[0.0, PI, 0.0]);
    assert!(matches!(g.exp(&p, &long), Err(Error::InjectivityGuard(_))));
    assert!(g.validate_point(&Point::from_vector(&[1.0, 0.1, 0.0])).is_err());
    assert!(g
        .validate_tangent(&p, &Tangent::from_vector(&[0.1, 1.0, 0.0]))
        .is_err());
}

#[test]
fn sphere_small_angle_branch() {
    let g = Geometry::sphere(2);
    let p = Point::from_vector(&[0.0, 0.0, 1.0]);
    let v = Tangent::from_vector(&[3e-9, -2e-9, 0.0]);
    let q = g.exp(&p, &v).unwrap();
    let back = g.log(&p, &q).unwrap();
    assert!(back.max_abs_diff(&v) < 1e-17);
    assert!(g.log(&p, &p).unwrap().ambient_norm() == 0.0);
}

#[test]
fn spd_affine_examples() {
    let g = Geometry::spd_affine(2);
    let id = Point::new(DMatrix::identity(2, 2));
    let u = Tangent::new(diag(&[1.0, 0.0]));
    assert!((g.inner(&id, &u, &u).unwrap() - 1.0).abs() < 1e-15);

    // tr(P⁻¹UP⁻¹U) with P = diag(4,1), U = diag(1,0) is (1/4)² = 0.0625
    let p = Point::new(diag(&[4.0, 1.0]));
    assert!((g.inner(&p, &u, &u).unwrap() - 0.0625).abs() < 1e-15);

    let v = Tangent::new(diag(&[2f64.ln(), 0.0]));
    assert!(g.exp(&id, &v).unwrap().max_abs_diff(&Point::new(diag(&[2.0, 1.0]))) < 1e-14);

    let q = Point::new(diag(&[E, E]));
    assert!(g.log(&id, &q).unwrap().max_abs_diff(&Tangent::new(diag(&[1.0, 1.0]))) < 1e-14);
    assert!((g.dist(&id, &q).unwrap() - 2f64.sqrt()).abs() < 1e-14);

    let asym = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 3.0]);
    let sym = g.project_tangent(&id, &asym).unwrap();
    assert_eq!(sym.matrix(), &DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 3.0]));

    let not_pd = Point::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]));
    assert!(matches!(g.validate_point(&not_pd), Err(Error::InvalidPoint(_))));
}

#[test]
fn spd_log_cholesky_chart() {
    let g = SpdLogCholesky::new(2);
    let p = Point::new(DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 5.0]));
    // L = [[2,0],[1,2]]
    let c = g.coords(&p).unwrap();
    let expect = DMatrix::from_row_slice(2, 2, &[2f64.ln(), 0.0, 1.0, 2f64.ln()]);
    assert!((c.clone() - expect).amax() < 1e-15);
    assert!(g.from_coords(&c).unwrap().max_abs_diff(&p) < 1e-14);

    let v = Tangent::new(DMatrix::from_row_slice(2, 2, &[0.3, -0.2, -0.2, 0.7]));
    let d = g.tangent_coords(&p, &v).unwrap();
    assert!(g.tangent_from_coords(&p, &d).unwrap().max_abs_diff(&v) < 1e-14);

    // the chart differential agrees with a central difference of the chart
    let h = 1e-6;
    let plus = g.coords(&Point::new(p.matrix() + v.matrix() * h)).unwrap();
    let minus = g.coords(&Point::new(p.matrix() - v.matrix() * h)).unwrap();
    let fd = (plus - minus) / (2.0 * h);
    assert!((fd - d).amax() < 1e-8);
}

#[test]
fn default_frames() {
    let g = Geometry::euclidean(3);
    let f = g.onb(&Point::from_vector(&[1.0, 2.0, 3.0]), None).unwrap();
    assert_eq!(f.basis_matrix(), &DMatrix::identity(3, 3));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for geom in all_geometries() {
        for _ in 0..20 {
            let p = random_point(&geom, 0.7, &mut rng);
            let f = geom.onb(&p, None).unwrap();
            assert_eq!(f.dim(), geom.dim());
            let gram = f.gram(&geom).unwrap();
            assert!((gram - DMatrix::identity(geom.dim(), geom.dim())).amax() < 1e-9, "{geom}");

            let u = random_tangent(&geom, &p, 1.3, &mut rng);
            let back = f.combine(&f.coefficients(&u));
            assert!(back.max_abs_diff(&u) < 1e-10 * u.ambient_norm().max(1.0), "{geom}");
            // coefficients are the metric inner products with the frame vectors
            let c = f.coefficients(&u);
            for k in 0..f.dim() {
                let ip = geom.inner(&p, &f.vector(k), &u).unwrap();
                assert!((ip - c[k]).abs() < 1e-9, "{geom}");
            }
        }
    }
}

#[test]
fn onb_with_reference_is_transport() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for geom in all_geometries() {
        let p = random_point(&geom, 0.5, &mut rng);
        let v = random_tangent(&geom, &p, 0.8, &mut rng);
        let q = geom.exp(&p, &v).unwrap();
        let fp = geom.onb(&p, None).unwrap();
        let fq = geom.onb(&q, Some(&fp)).unwrap();
        for k in 0..fp.dim() {
            let t = geom.transport(&p, &q, &fp.vector(k)).unwrap();
            assert!(t.max_abs_diff(&fq.vector(k)) < 1e-12, "{geom}");
        }
        let gram = fq.gram(&geom).unwrap();
        assert!((gram - DMatrix::identity(geom.dim(), geom.dim())).amax() < 1e-9);
    }
}

#[test]
fn descriptors_round_trip() {
    for s in ["euclidean:1", "sphere:2", "spd-lc:2", "spd-ai:3"] {
        let g: Geometry = s.parse().unwrap();
        assert_eq!(g.to_string(), s);
        let json = serde_json::to_string(&g).unwrap();
        let back: Geometry = serde_json::from_str(&json).unwrap();
        assert_eq!(back, g);
    }
    for bad in ["sphere", "spd-lc:1", "torus:2", "sphere:x", "euclidean:0"] {
        assert!(matches!(bad.parse::<Geometry>(), Err(Error::UnknownGeometry(_))), "{bad}");
    }
    assert_eq!(Geometry::spd_affine(3).dim(), 6);
}

#[test]
fn point_json_shapes() {
    let v = Point::from_vector(&[0.6, 0.8, 0.0]);
    assert_eq!(serde_json::to_string(&v).unwrap(), "[0.6,0.8,0.0]");
    let m = Point::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
    let s = serde_json::to_string(&m).unwrap();
    assert_eq!(s, "[[2.0,0.5],[0.5,1.0]]");
    let back: Point = serde_json::from_str(&s).unwrap();
    assert_eq!(back, m);
}

#[test]
fn isometries_preserve_distance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = Geometry::spd_affine(3);
    let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.0, -0.2, 2.0, 0.1, 0.0, 0.4, 0.7]);
    let iso = Isometry::Congruence(a);
    for _ in 0..20 {
        let p = random_point(&g, 0.6, &mut rng);
        let q = random_point(&g, 0.6, &mut rng);
        let d0 = g.dist(&p, &q).unwrap();
        let d1 = g.dist(&iso.apply_point(&p).unwrap(), &iso.apply_point(&q).unwrap()).unwrap();
        assert!((d0 - d1).abs() < 1e-9);
        let v = random_tangent(&g, &p, 1.0, &mut rng);
        let n1 = g.norm(&iso.apply_point(&p).unwrap(), &iso.apply_tangent(&v).unwrap()).unwrap();
        assert!((n1 - 1.0).abs() < 1e-9);
    }
}

/// Rotation angle of parallel transport around the geodesic triangle a→b→c→a.
fn loop_rotation(g: &Geometry, a: &Point, b: &Point, c: &Point) -> f64 {
    let f = g.onb(a, None).unwrap();
    let v = f.vector(0);
    let v1 = g.transport(a, b, &v).unwrap();
    let v2 = g.transport(b, c, &v1).unwrap();
    let v3 = g.transport(c, a, &v2).unwrap();
    let x = f.coefficients(&v3);
    x[1].atan2(x[0])
}

/// Spherical excess of the triangle from the solid-angle formula.
fn spherical_area(a: &Point, b: &Point, c: &Point) -> f64 {
    let (a, b, c) = (a.matrix(), b.matrix(), c.matrix());
    let av = nalgebra::Vector3::new(a[0], a[1], a[2]);
    let bv = nalgebra::Vector3::new(b[0], b[1], b[2]);
    let cv = nalgebra::Vector3::new(c[0], c[1], c[2]);
    let num = av.dot(&bv.cross(&cv)).abs();
    let den = 1.0 + av.dot(&bv) + bv.dot(&cv) + cv.dot(&av);
    2.0 * num.atan2(den)
}

#[test]
fn gauss_bonnet_on_small_triangle() {
    let g = Geometry::sphere(2);
    let a = Point::from_vector(&[0.0, 0.0, 1.0]);
    let b = g.exp(&a, &Tangent::from_vector(&[0.1, 0.0, 0.0])).unwrap();
    let c = g.exp(&a, &Tangent::from_vector(&[0.0, 0.08, 0.0])).unwrap();
    let rot = loop_rotation(&g, &a, &b, &c);
    let area = spherical_area(&a, &b, &c);
    assert!(area > 1e-3);
    assert!((rot.abs() - area).abs() < 1e-6, "rotation {rot} area {area}");
}

fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prop_round_trip(seed in any::<u64>(), which in 0usize..7, r in 0.0f64..1.0) {
        let geom = &all_geometries()[which];
        let mut rng = rng_from(seed);
        let p = random_point(geom, 0.7, &mut rng);
        let v = random_tangent(geom, &p, r, &mut rng);
        let q = geom.exp(&p, &v).unwrap();
        geom.validate_point(&q).unwrap();
        let back = geom.log(&p, &q).unwrap();
        let diff = &back - &v;
        prop_assert!(geom.norm(&p, &diff).unwrap() < 1e-8);
    }

    #[test]
    fn prop_log_isometry_and_midpoint(seed in any::<u64>(), which in 0usize..7) {
        let geom = &all_geometries()[which];
        let mut rng = rng_from(seed);
        let p = random_point(geom, 0.7, &mut rng);
        let v = random_tangent(geom, &p, 1.5, &mut rng);
        let q = geom.exp(&p, &v).unwrap();
        let d = geom.dist(&p, &q).unwrap();
        let l = geom.log(&p, &q).unwrap();
        prop_assert!((geom.norm(&p, &l).unwrap() - d).abs() < 1e-9);
        let mid = geom.exp(&p, &l.scale(0.5)).unwrap();
        prop_assert!((geom.dist(&p, &mid).unwrap() - 0.5 * d).abs() < 1e-9);
        prop_assert!((geom.dist(&q, &p).unwrap() - d).abs() < 1e-9);
    }

    #[test]
    fn prop_transport_preserves_inner(seed in any::<u64>(), which in 0usize..7) {
        let geom = &all_geometries()[which];
        let mut rng = rng_from(seed);
        let p = random_point(geom, 0.7, &mut rng);
        let w = random_tangent(geom, &p, 1.2, &mut rng);
        let q = geom.exp(&p, &w).unwrap();
        let u = random_tangent(geom, &p, 1.0, &mut rng);
        let v = random_tangent(geom, &p, 0.6, &mut rng);
        let tu = geom.transport(&p, &q, &u).unwrap();
        let tv = geom.transport(&p, &q, &v).unwrap();
        geom.validate_tangent(&q, &tu).unwrap();
        let before = geom.inner(&p, &u, &v).unwrap();
        let after = geom.inner(&q, &tu, &tv).unwrap();
        prop_assert!((before - after).abs() < 1e-9);
        prop_assert!(geom.transport(&p, &p, &u).unwrap().max_abs_diff(&u) < 1e-12);
    }

    #[test]
    fn prop_triangle_inequality(seed in any::<u64>(), which in 0usize..7) {
        let geom = &all_geometries()[which];
        let mut rng = rng_from(seed);
        let p = random_point(geom, 0.7, &mut rng);
        let near = |rng: &mut ChaCha8Rng| {
            let v = random_tangent(geom, &p, 1.0, rng);
            geom.exp(&p, &v).unwrap()
        };
        let q = near(&mut rng);
        let r = near(&mut rng);
        let pq = geom.dist(&p, &q).unwrap();
        let qr = geom.dist(&q, &r).unwrap();
        let pr = geom.dist(&p, &r).unwrap();
        prop_assert!(pr <= pq + qr + 1e-9);
    }

    #[test]
    fn prop_flat_transport_is_path_independent(seed in any::<u64>(), which in 0usize..3) {
        let geom = [Geometry::euclidean(3), Geometry::spd_log_cholesky(2), Geometry::spd_log_cholesky(3)][which].clone();
        let mut rng = rng_from(seed);
        let p = random_point(&geom, 0.7, &mut rng);
        let q = random_point(&geom, 0.7, &mut rng);
        let r = random_point(&geom, 0.7, &mut rng);
        let v = random_tangent(&geom, &p, 1.0, &mut rng);
        let direct = geom.transport(&p, &q, &v).unwrap();
        let via = geom.transport(&r, &q, &geom.transport(&p, &r, &v).unwrap()).unwrap();
        prop_assert!(via.max_abs_diff(&direct) < 1e-10 * direct.ambient_norm().max(1.0));
    }

    #[test]
    fn prop_project_tangent_idempotent(seed in any::<u64>(), which in 0usize..7) {
        let geom = &all_geometries()[which];
        let mut rng = rng_from(seed);
        let p = random_point(geom, 0.7, &mut rng);
        let (r, c) = geom.ambient_shape();
        let raw = DMatrix::from_fn(r, c, |i, j| ((i * 7 + j * 3) as f64 + seed as f64 % 5.0).sin());
        let once = geom.project_tangent(&p, &raw).unwrap();
        geom.validate_tangent(&p, &once).unwrap();
        let twice = geom.project_tangent(&p, once.matrix()).unwrap();
        prop_assert!(twice.max_abs_diff(&once) < 1e-12);
    }

    #[test]
    fn prop_gauss_bonnet(seed in any::<u64>()) {
        let g = Geometry::sphere(2);
        let mut rng = rng_from(seed);
        let a = random_point(&g, 1.0, &mut rng);
        let vb = random_tangent(&g, &a, 0.05, &mut rng);
        let vc = random_tangent(&g, &a, 0.05, &mut rng);
        let b = g.exp(&a, &vb).unwrap();
        let c = g.exp(&a, &vc).unwrap();
        let rot = loop_rotation(&g, &a, &b, &c);
        let area = spherical_area(&a, &b, &c);
        prop_assert!((rot.abs() - area).abs() < 1e-6);
    }
}
