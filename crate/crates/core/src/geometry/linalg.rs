//! Small dense helpers for symmetric matrices.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Eigenvalues below this are clamped before taking logarithms.
pub(crate) const EIG_FLOOR: f64 = 1e-14;

pub(crate) fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub(crate) fn asymmetry(a: &DMatrix<f64>) -> f64 {
    (a - a.transpose()).amax()
}

pub(crate) fn sym_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let e = SymmetricEigen::new(symmetrize(a));
    (e.eigenvalues, e.eigenvectors)
}

/// V f(Λ) Vᵀ for a symmetric matrix.
pub(crate) fn sym_apply(a: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(a);
    from_eigen(&vals, &vecs, f)
}

pub(crate) fn from_eigen(
    vals: &DVector<f64>,
    vecs: &DMatrix<f64>,
    f: impl Fn(f64) -> f64,
) -> DMatrix<f64> {
    let n = vals.len();
    let mut scaled = vecs.clone();
    for j in 0..n {
        let fj = f(vals[j]);
        for i in 0..n {
            scaled[(i, j)] *= fj;
        }
    }
    let out = scaled * vecs.transpose();
    symmetrize(&out)
}

pub(crate) fn sym_log(a: &DMatrix<f64>) -> DMatrix<f64> {
    sym_apply(a, |x| x.max(EIG_FLOOR).ln())
}

pub(crate) fn sym_exp(a: &DMatrix<f64>) -> DMatrix<f64> {
    sym_apply(a, f64::exp)
}

/// Symmetric basis of the m×m symmetric matrices, orthonormal in the
/// Frobenius inner product, ordered row by row over the lower triangle.
pub(crate) fn symmetric_basis(m: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(m * (m + 1) / 2);
    let r = std::f64::consts::FRAC_1_SQRT_2;
    for i in 0..m {
        for j in 0..=i {
            let mut e = DMatrix::zeros(m, m);
            if i == j {
                e[(i, i)] = 1.0;
            } else {
                e[(i, j)] = r;
                e[(j, i)] = r;
            }
            out.push(e);
        }
    }
    out
}
