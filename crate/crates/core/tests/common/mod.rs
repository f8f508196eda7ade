//! A scalar sparse-FDA pipeline written directly against plain vectors,
//! used as an oracle for the manifold code on Euclidean(1).

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfda::geometry::Geometry;
use rfda::sampling::{SparseDataset, Subject, WeightScheme};
use rfda::Point;

/// (times, values) per subject.
pub type Scalar = Vec<(Vec<f64>, Vec<f64>)>;

pub fn epan(u: f64) -> f64 {
    if u.abs() < 1.0 {
        0.75 * (1.0 - u * u)
    } else {
        0.0
    }
}

/// y = sin 2t + a + b·t + noise with random a, b per subject.
pub fn scalar_data(n: usize, seed: u64) -> Scalar {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let m = rng.random_range(2..9);
            let mut times: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            times.sort_by(f64::total_cmp);
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            let ys = times
                .iter()
                .map(|&t| (2.0 * t).sin() + a + b * t + 0.3 * rng.random_range(-1.0..1.0))
                .collect();
            (times, ys)
        })
        .collect()
}

pub fn to_dataset(s: &Scalar, scheme: WeightScheme) -> SparseDataset {
    let subjects = s
        .iter()
        .enumerate()
        .map(|(i, (t, y))| Subject {
            id: format!("s{i}"),
            times: t.clone(),
            points: y.iter().map(|&v| Point::from_vector(&[v])).collect(),
        })
        .collect();
    SparseDataset::new(Geometry::euclidean(1), [0.0, 1.0], subjects, scheme).unwrap()
}

/// (λᵢ, νᵢ) written out from the two schemes' definitions.
pub fn weights(s: &Scalar, subject_equal: bool) -> (Vec<f64>, Vec<f64>) {
    let m: Vec<f64> = s.iter().map(|x| x.0.len() as f64).collect();
    if subject_equal {
        let n = s.len() as f64;
        let nc = m.iter().filter(|&&mi| mi >= 2.0).count() as f64;
        (
            m.iter().map(|mi| 1.0 / (n * mi)).collect(),
            m.iter().map(|&mi| if mi >= 2.0 { 1.0 / (nc * mi * (mi - 1.0)) } else { 0.0 }).collect(),
        )
    } else {
        let total: f64 = m.iter().sum();
        let pairs: f64 = m.iter().map(|mi| mi * (mi - 1.0)).sum();
        (vec![1.0 / total; s.len()], vec![1.0 / pairs; s.len()])
    }
}

pub fn trapezoid(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    (0..n)
        .map(|g| {
            let left = if g > 0 { grid[g] - grid[g - 1] } else { 0.0 };
            let right = if g + 1 < n { grid[g + 1] - grid[g] } else { 0.0 };
            0.5 * (left + right)
        })
        .collect()
}

/// Index of the left grid point and the fraction toward the right one.
fn bracket(grid: &[f64], t: f64) -> (usize, f64) {
    let g = grid.iter().rposition(|&x| x <= t).unwrap_or(0).min(grid.len() - 2);
    (g, (t - grid[g]) / (grid[g + 1] - grid[g]))
}

pub fn interp(grid: &[f64], v: &[f64], t: f64) -> f64 {
    let (g, a) = bracket(grid, t);
    (1.0 - a) * v[g] + a * v[g + 1]
}

pub fn interp2(grid: &[f64], c: &DMatrix<f64>, s: f64, t: f64) -> f64 {
    let (g, a) = bracket(grid, s);
    let (h, b) = bracket(grid, t);
    (1.0 - a) * (1.0 - b) * c[(g, h)] + a * (1.0 - b) * c[(g + 1, h)] + (1.0 - a) * b * c[(g, h + 1)] + a * b * c[(g + 1, h + 1)]
}

pub struct ScalarFit {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    /// cov[(g, h)] = Ĉ(t_g, t_h), symmetrized.
    pub cov: DMatrix<f64>,
    pub sigma2: f64,
    pub values: Vec<f64>,
    /// psi[k][g].
    pub psi: Vec<Vec<f64>>,
    /// One row per subject.
    pub scores: DMatrix<f64>,
}

/// Local-linear mean at t: 2×2 weighted normal equations.
pub fn mean_at(s: &Scalar, lam: &[f64], t: f64, h: f64) -> f64 {
    let (mut a, mut b) = (DMatrix::<f64>::zeros(2, 2), DVector::<f64>::zeros(2));
    for (i, (ts, ys)) in s.iter().enumerate() {
        for (&tj, &y) in ts.iter().zip(ys) {
            let w = lam[i] * epan((tj - t) / h);
            let z = DVector::from_vec(vec![1.0, tj - t]);
            a += &z * z.transpose() * w;
            b += &z * (w * y);
        }
    }
    a.lu().solve(&b).unwrap()[0]
}

/// Product-kernel local-linear covariance at (s, t): 3×3 normal equations on
/// raw products of residuals, off-diagonal pairs only.
pub fn cov_at(resid: &Scalar, nu: &[f64], s: f64, t: f64, h: f64) -> f64 {
    let mut a = DMatrix::<f64>::zeros(3, 3);
    let mut b = DVector::<f64>::zeros(3);
    for (i, (ts, r)) in resid.iter().enumerate() {
        for j in 0..ts.len() {
            for l in 0..ts.len() {
                if j == l {
                    continue;
                }
                let w = nu[i] * epan((ts[j] - s) / h) * epan((ts[l] - t) / h);
                if w == 0.0 {
                    continue;
                }
                let z = DVector::from_vec(vec![1.0, ts[j] - s, ts[l] - t]);
                a += &z * z.transpose() * w;
                b += &z * (w * r[j] * r[l]);
            }
        }
    }
    a.lu().solve(&b).unwrap()[0]
}

/// Mean, covariance, noise, top-K eigenpairs and BLUP scores.
pub fn scalar_pipeline(s: &Scalar, subject_equal: bool, h_mu: f64, h_cov: f64, grid: &[f64], k: usize) -> ScalarFit {
    let (lam, nu) = weights(s, subject_equal);
    let n = grid.len();
    let mean: Vec<f64> = grid.iter().map(|&t| mean_at(s, &lam, t, h_mu)).collect();
    let resid: Scalar = s
        .iter()
        .map(|(ts, ys)| (ts.clone(), ts.iter().zip(ys).map(|(&t, y)| y - interp(grid, &mean, t)).collect()))
        .collect();
    let raw = DMatrix::from_fn(n, n, |g, h| cov_at(&resid, &nu, grid[g], grid[h], h_cov));
    let cov = (&raw + raw.transpose()) * 0.5;

    let mut sigma2 = 0.0;
    for (ts, r) in &resid {
        let w = 1.0 / (s.len() as f64 * ts.len() as f64);
        for (&t, &z) in ts.iter().zip(r) {
            sigma2 += w * (z * z - interp2(grid, &cov, t, t));
        }
    }
    let sigma2 = sigma2.max(1e-10);

    // eigenproblem of W^{1/2} C W^{1/2}
    let w = trapezoid(grid);
    let sw: Vec<f64> = w.iter().map(|x| x.sqrt()).collect();
    let scaled = DMatrix::from_fn(n, n, |g, h| sw[g] * cov[(g, h)] * sw[h]);
    let eig = scaled.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut values = Vec::new();
    let mut psi = Vec::new();
    for &i in order.iter().take(k) {
        values.push(eig.eigenvalues[i].max(0.0));
        let mut f: Vec<f64> = (0..n).map(|g| eig.eigenvectors[(g, i)] / sw[g]).collect();
        let big = f.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() * (1.0 + 1e-9) { x } else { m });
        if big < 0.0 {
            f.iter_mut().for_each(|x| *x = -*x);
        }
        psi.push(f);
    }

    // Σᵢ blocks from the nonnegative part of the spectrum
    let lam_plus = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0)));
    let pos = &eig.eigenvectors * lam_plus * eig.eigenvectors.transpose();
    let pos = DMatrix::from_fn(n, n, |g, h| 0.5 * (pos[(g, h)] + pos[(h, g)]) / (sw[g] * sw[h]));

    let mut scores = DMatrix::zeros(s.len(), k);
    for (i, (ts, r)) in resid.iter().enumerate() {
        let m = ts.len();
        let sigma = DMatrix::from_fn(m, m, |j, l| interp2(grid, &pos, ts[l], ts[j]) + if j == l { sigma2 } else { 0.0 });
        let sz = sigma.lu().solve(&DVector::from_vec(r.clone())).unwrap();
        for kk in 0..k {
            let g = DVector::from_iterator(m, ts.iter().map(|&t| interp(grid, &psi[kk], t)));
            scores[(i, kk)] = values[kk] * g.dot(&sz);
        }
    }
    ScalarFit {
        grid: grid.to_vec(),
        mean,
        cov,
        sigma2,
        values,
        psi,
        scores,
    }
}
