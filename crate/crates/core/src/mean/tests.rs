use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::Isometry;
use crate::geometry::random::{random_orthogonal, random_point, random_tangent};
use crate::sampling::{simulate, Design, Subject, WeightScheme};

fn dataset(geom: Geometry, subjects: Vec<(Vec<f64>, Vec<Point>)>) -> SparseDataset {
    let subjects = subjects
        .into_iter()
        .enumerate()
        .map(|(i, (times, points))| Subject {
            id: format!("s{i}"),
            times,
            points,
        })
        .collect();
    SparseDataset::new(geom, [0.0, 1.0], subjects, WeightScheme::ObsEqual).unwrap()
}

/// Scalar responses y = f(t) + noise on Euclidean(dim).
fn euclidean_data(n: usize, dim: usize, seed: u64) -> SparseDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subjects = (0..n)
        .map(|_| {
            let m = rng.random_range(1..6);
            let mut times: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            times.sort_by(f64::total_cmp);
            let shift: f64 = rng.random_range(-0.5..0.5);
            let points = times
                .iter()
                .map(|&t| {
                    let v: Vec<f64> = (0..dim)
                        .map(|k| (3.0 * t + k as f64).sin() + shift + 0.1 * rng.random::<f64>())
                        .collect();
                    Point::from_vector(&v)
                })
                .collect();
            (times, points)
        })
        .collect();
    dataset(Geometry::euclidean(dim), subjects)
}

/// Local-linear intercept by weighted least squares, written without any of
/// the û moment algebra: solve the 2×2 normal equations directly.
fn wls_intercept(data: &SparseDataset, t: f64, h: f64, coord: usize) -> f64 {
    let (mut a, mut b) = (DMatrix::<f64>::zeros(2, 2), DVector::<f64>::zeros(2));
    for (i, s) in data.subjects().iter().enumerate() {
        for (tij, p) in s.times.iter().zip(&s.points) {
            let x = tij - t;
            let w = data.lambda(i) * Kernel::Epanechnikov.eval(x / h);
            let z = DVector::from_vec(vec![1.0, x]);
            a += &z * z.transpose() * w;
            b += &z * (w * p.as_slice()[coord]);
        }
    }
    a.lu().solve(&b).unwrap()[0]
}

#[test]
fn weights_reproduce_constants_and_lines() {
    let (data, _) = simulate(Design::Sphere, 200, 10, 1.0, 11).unwrap();
    for t in [0.0, 0.03, 0.5, 0.91, 1.0] {
        let lw = local_weights(&data, t, 0.1).unwrap();
        assert!((lw.total() - 1.0).abs() < 1e-6, "t={t}: {}", lw.total());
        let first: f64 = lw.entries.iter().map(|e| e.effective * e.offset).sum();
        assert!(first.abs() < 1e-10, "t={t}: {first}");
        assert!(lw.sigma0_sq > 0.0);
    }
    // boundary windows are lopsided, so some weights go negative
    let lw = local_weights(&data, 0.0, 0.1).unwrap();
    assert!(lw.entries.iter().all(|e| e.offset >= 0.0));
    let interior = local_weights(&data, 0.5, 0.1).unwrap();
    assert!(interior.entries.iter().all(|e| e.offset.abs() < 0.1));
}

#[test]
fn first_moment_tracks_density_slope() {
    // stratified times with density f(x) = 0.5 + x; f is linear so
    // û₁ = h² f'(t) ∫x²K = 0.2h² exactly away from the boundary
    let n_obs = 40_000;
    let times: Vec<f64> = (0..n_obs)
        .map(|k| {
            let u = (k as f64 + 0.5) / n_obs as f64;
            // inverse of F(x) = (x² + x)/2
            (-1.0 + (1.0 + 8.0 * u).sqrt()) / 2.0
        })
        .collect();
    let subjects = times
        .chunks(10)
        .map(|c| (c.to_vec(), vec![Point::from_vector(&[0.0]); c.len()]))
        .collect();
    let data = dataset(Geometry::euclidean(1), subjects);
    let ratios: Vec<f64> = [0.05, 0.1, 0.2]
        .iter()
        .map(|&h| local_weights(&data, 0.5, h).unwrap().u[1] / (h * h))
        .collect();
    for r in &ratios {
        assert!((r - 0.2).abs() < 0.01, "{ratios:?}");
    }
}

#[test]
fn window_errors() {
    let g = Geometry::euclidean(1);
    let p = || Point::from_vector(&[1.0]);
    let at_t = dataset(g.clone(), vec![(vec![0.5, 0.5], vec![p(), p()]), (vec![0.5], vec![p()])]);
    assert!(matches!(local_weights(&at_t, 0.5, 0.1), Err(Error::DegenerateWindow { .. })));
    let far = dataset(g, vec![(vec![0.1, 0.2], vec![p(), p()])]);
    assert!(matches!(
        local_weights(&far, 0.8, 0.1),
        Err(Error::EmptyWindow { found: 0, .. })
    ));
    assert!(matches!(
        fit_mean(&far, 0.1, &[0.15, 0.8]),
        Err(Error::AtTime { t, .. }) if t == 0.8
    ));
    assert!(local_weights(&far, 0.15, 0.0).is_err());
}

#[test]
fn frechet_trivial_cases() {
    let s = Geometry::sphere(2);
    let a = Point::from_vector(&[1.0, 0.0, 0.0]);
    let b = Point::from_vector(&[0.0, 1.0, 0.0]);
    let r = frechet_minimize(&s, &[&a, &b], &[1.0, 1.0], &a).unwrap();
    let h = std::f64::consts::FRAC_1_SQRT_2;
    assert!(r.point.max_abs_diff(&Point::from_vector(&[h, h, 0.0])) < 1e-9);
    assert!(r.converged);

    let e = Geometry::euclidean(3);
    let xs: Vec<Point> = (0..5)
        .map(|k| Point::from_vector(&[k as f64, (k * k) as f64, -1.0]))
        .collect();
    let refs: Vec<&Point> = xs.iter().collect();
    let ws = [0.1, 0.4, -0.2, 0.5, 0.7];
    let r = frechet_minimize(&e, &refs, &ws, &xs[0]).unwrap();
    let sum: f64 = ws.iter().sum();
    let avg: Vec<f64> = (0..3)
        .map(|c| xs.iter().zip(&ws).map(|(x, w)| w * x.as_slice()[c]).sum::<f64>() / sum)
        .collect();
    assert!(r.point.max_abs_diff(&Point::from_vector(&avg)) < 1e-12);

    let spd = Geometry::spd_affine(2);
    let p = Point::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]));
    let r = frechet_minimize(&spd, &[&p, &p, &p], &[0.2, 0.5, 0.3], &Point::new(DMatrix::identity(2, 2)))
        .unwrap();
    assert!(r.point.max_abs_diff(&p) < 1e-9);

    assert!(frechet_minimize(&e, &refs, &[0.0; 5], &xs[0]).is_err());
    assert!(frechet_minimize(&e, &refs[..2], &ws, &xs[0]).is_err());
}

#[test]
fn euclidean_mean_matches_scalar_regression() {
    let data = euclidean_data(150, 2, 9);
    let grid = uniform_grid([0.0, 1.0], 21);
    for h in [0.08, 0.2] {
        let curve = fit_mean(&data, h, &grid).unwrap();
        for (g, &t) in grid.iter().enumerate() {
            for c in 0..2 {
                let want = wls_intercept(&data, t, h, c);
                let got = curve.points()[g].as_slice()[c];
                assert!((got - want).abs() < 1e-8, "h={h} t={t} c={c}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn constant_process_is_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for geom in [Geometry::sphere(2), Geometry::spd_affine(2), Geometry::spd_log_cholesky(3)] {
        let p = random_point(&geom, 0.5, &mut rng);
        let subjects = (0..30)
            .map(|_| {
                let mut times: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
                times.sort_by(f64::total_cmp);
                (times, vec![p.clone(); 4])
            })
            .collect();
        let data = dataset(geom.clone(), subjects);
        let curve = fit_mean(&data, 0.2, &uniform_grid([0.0, 1.0], 11)).unwrap();
        for q in curve.points() {
            assert!(geom.dist(q, &p).unwrap() < 1e-9);
        }
        for f in curve.frames() {
            let gram = f.gram(&geom).unwrap();
            assert!((gram - DMatrix::identity(geom.dim(), geom.dim())).amax() < 1e-10);
        }
    }
}

#[test]
fn eval_mean_interpolates() {
    let (data, _) = simulate(Design::SpdAi, 60, 6, 1.0, 5).unwrap();
    let grid = uniform_grid([0.0, 1.0], 11);
    let curve = fit_mean(&data, 0.25, &grid).unwrap();
    let geom = curve.geometry().clone();
    for (g, &t) in grid.iter().enumerate() {
        let (p, f) = eval_mean(&curve, t).unwrap();
        assert_eq!(&p, &curve.points()[g]);
        assert_eq!(f.basis_matrix(), curve.frames()[g].basis_matrix());
    }
    let (mid, _) = eval_mean(&curve, 0.35).unwrap();
    let d0 = geom.dist(&mid, &curve.points()[3]).unwrap();
    let d1 = geom.dist(&mid, &curve.points()[4]).unwrap();
    assert!((d0 - d1).abs() < 1e-9);
    assert!(eval_mean(&curve, 1.2).is_err());
    assert!(eval_mean(&curve, -0.01).is_err());

    let e = euclidean_data(80, 2, 1);
    let curve = fit_mean(&e, 0.2, &grid).unwrap();
    let (p, _) = eval_mean(&curve, 0.43).unwrap();
    let (a, b) = (curve.points()[4].as_slice(), curve.points()[5].as_slice());
    for c in 0..2 {
        let want = a[c] + 0.3 * (b[c] - a[c]);
        assert!((p.as_slice()[c] - want).abs() < 1e-12);
    }
}

#[test]
fn weight_schemes_agree_when_counts_are_equal() {
    let (data, _) = simulate(Design::Sphere, 80, 6, 1.0, 3).unwrap();
    let subjects: Vec<Subject> = data
        .subjects()
        .iter()
        .map(|s| {
            let keep = [0, s.len() / 2, s.len() - 1];
            Subject {
                id: s.id.clone(),
                times: keep.iter().map(|&k| s.times[k]).collect(),
                points: keep.iter().map(|&k| s.points[k].clone()).collect(),
            }
        })
        .collect();
    let obs = SparseDataset::new(data.geometry().clone(), [0.0, 1.0], subjects, WeightScheme::ObsEqual).unwrap();
    let subj = obs.with_scheme(WeightScheme::SubjectEqual);
    let grid = uniform_grid([0.0, 1.0], 21);
    let a = fit_mean(&obs, 0.25, &grid).unwrap();
    let b = fit_mean(&subj, 0.25, &grid).unwrap();
    for (p, q) in a.points().iter().zip(b.points()) {
        assert!(p.max_abs_diff(q) < 1e-10);
    }
}

fn map_dataset(data: &SparseDataset, iso: &Isometry) -> SparseDataset {
    let subjects = data
        .subjects()
        .iter()
        .map(|s| Subject {
            id: s.id.clone(),
            times: s.times.clone(),
            points: s.points.iter().map(|p| iso.apply_point(p).unwrap()).collect(),
        })
        .collect();
    SparseDataset::new(data.geometry().clone(), data.domain(), subjects, data.scheme()).unwrap()
}

#[test]
fn mean_is_equivariant_under_isometries() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let grid = uniform_grid([0.0, 1.0], 11);
    let a = DMatrix::from_row_slice(2, 2, &[1.3, 0.4, -0.2, 0.8]);
    let cases = [
        (Design::Sphere, Isometry::Rotation(random_orthogonal(3, &mut rng))),
        (Design::SpdAi, Isometry::Congruence(a)),
    ];
    for (design, iso) in cases {
        let (data, _) = simulate(design, 60, 5, 1.0, 21).unwrap();
        let geom = data.geometry().clone();
        let base = fit_mean(&data, 0.2, &grid).unwrap();
        let moved = fit_mean(&map_dataset(&data, &iso), 0.2, &grid).unwrap();
        for (p, q) in base.points().iter().zip(moved.points()) {
            let d = geom.dist(&iso.apply_point(p).unwrap(), q).unwrap();
            assert!(d < 1e-8, "{design}: {d}");
        }
    }
}

#[test]
fn sphere_mean_error_shrinks_with_n() {
    let grid = uniform_grid([0.0, 1.0], 26);
    let sup_err = |n: usize, seed: u64| {
        let (data, truth) = simulate(Design::Sphere, n, 20, 1.0, seed).unwrap();
        let curve = fit_mean(&data, 0.15, &grid).unwrap();
        grid.iter()
            .zip(curve.points())
            .map(|(&t, p)| truth.geometry().dist(p, &truth.mean(t)).unwrap())
            .fold(0.0, f64::max)
    };
    let avg = |n: usize| (0..10).map(|r| sup_err(n, 100 + r)).sum::<f64>() / 10.0;
    let (small, large) = (avg(400), avg(800));
    assert!(large < small, "n=400: {small}, n=800: {large}");
}

#[test]
fn reframed_curve_blends_consistently() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (data, _) = simulate(Design::SpdAi, 40, 5, 1.0, 2).unwrap();
    let curve = fit_mean(&data, 0.25, &uniform_grid([0.0, 1.0], 9)).unwrap();
    let geom = curve.geometry().clone();
    for q in (0..curve.len() - 1).map(|g| curve.connection(g)) {
        assert!((q - DMatrix::identity(3, 3)).amax() < 1e-10);
    }
    let rots: Vec<DMatrix<f64>> = (0..curve.len()).map(|_| random_orthogonal(3, &mut rng)).collect();
    let other = curve.reframed(&rots).unwrap();
    // the same tangent field given in both frame fields must blend to the same vector
    let field: Vec<Tangent> = curve
        .points()
        .iter()
        .map(|p| random_tangent(&geom, p, 1.0, &mut rng))
        .collect();
    for t in [0.07, 0.5, 0.93] {
        let b = curve.locate(t).unwrap();
        let p = curve.point_at(b).unwrap();
        let mut vs = Vec::new();
        for c in [&curve, &other] {
            let f = c.frame_at(b, &p).unwrap();
            let x0 = c.frames()[b.g].coefficients(&field[b.g]);
            let x1 = c.frames()[b.g + 1].coefficients(&field[b.g + 1]);
            vs.push(f.combine(&c.blend(b, &x0, &x1)));
        }
        assert!(vs[0].max_abs_diff(&vs[1]) < 1e-10);
    }
}

#[test]
fn mean_curve_json_round_trip() {
    let (data, _) = simulate(Design::Sphere, 30, 5, 1.0, 1).unwrap();
    let curve = fit_mean(&data, 0.3, &uniform_grid([0.0, 1.0], 6)).unwrap();
    let text = serde_json::to_string(&curve).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    for key in ["grid", "points", "frames", "bandwidth", "diagnostics"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    let back: MeanCurve = serde_json::from_str(&text).unwrap();
    assert_eq!(back.grid(), curve.grid());
    assert_eq!(back.points(), curve.points());
    assert_eq!(back.diagnostics(), curve.diagnostics());
    assert!((back.bandwidth() - 0.3).abs() == 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn prop_minimizer_first_order_condition(seed in any::<u64>(), which in 0usize..4, k in 2usize..9) {
        let geom = [
            Geometry::sphere(2),
            Geometry::spd_affine(2),
            Geometry::spd_log_cholesky(2),
            Geometry::euclidean(3),
        ][which].clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_point(&geom, 0.4, &mut rng);
        let pts: Vec<Point> = (0..k)
            .map(|_| {
                let r = rng.random_range(0.0..0.6);
                geom.exp(&c, &random_tangent(&geom, &c, r, &mut rng)).unwrap()
            })
            .collect();
        // mostly positive weights with the occasional small negative one
        let ws: Vec<f64> = (0..k).map(|_| rng.random_range(-0.15..1.0)).collect();
        prop_assume!(ws.iter().sum::<f64>() > 0.5);
        let refs: Vec<&Point> = pts.iter().collect();
        let r = frechet_minimize(&geom, &refs, &ws, &pts[0]).unwrap();
        let logs = geom.log_many(&r.point, &refs).unwrap();
        let mut grad = Tangent::zeros(r.point.shape());
        for (l, w) in logs.iter().zip(&ws) {
            grad.axpy(*w, l);
        }
        let abs: f64 = ws.iter().map(|w| w.abs()).sum();
        let gn = geom.norm(&r.point, &grad).unwrap();
        prop_assert!(gn <= 1e-7 * abs, "gradient {gn}");
        if r.converged {
            prop_assert!(gn <= 1e-10 * abs);
        }
    }

    #[test]
    fn prop_weights_sum_to_one(seed in any::<u64>(), t in 0.0f64..1.0, h in 0.05f64..0.5) {
        let data = euclidean_data(60, 1, seed);
        if let Ok(lw) = local_weights(&data, t, h) {
            prop_assert!((lw.total() - 1.0).abs() < 1e-9);
            let first: f64 = lw.entries.iter().map(|e| e.effective * e.offset).sum();
            prop_assert!(first.abs() < 1e-9 * h);
        }
    }
}
