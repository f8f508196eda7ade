//! Eigen-decomposition of the fitted covariance operator and BLUP scores.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Manifold;
use crate::mean::{Bracket, MeanCurve};
use crate::sampling::SparseDataset;
use crate::smoother::{observation_logs, CovSurface, NoiseVariance, ObsLog};

const ASYMMETRY_TOL: f64 = 1e-8;
/// Eigenvalues above −this are rounding and clamp to zero.
const NEG_EIG_TOL: f64 = 1e-10;

/// Trapezoid weights for an increasing grid.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let mut w = vec![0.0; n];
    for g in 0..n.saturating_sub(1) {
        let half = 0.5 * (grid[g + 1] - grid[g]);
        w[g] += half;
        w[g + 1] += half;
    }
    w
}

/// The covariance operator on grid × ℝᵈ with its quadrature.
///
/// Block (h, g) of `matrix` is the coefficient matrix of 𝒞̂(t_g, t_h), so
/// (𝐂u)(t_h) = ∑_g w_g M_{hg} u_g.
#[derive(Clone, Debug)]
pub struct DiscreteOperator {
    pub grid: Vec<f64>,
    pub weights: Vec<f64>,
    pub d: usize,
    pub matrix: DMatrix<f64>,
    /// W^{1/2} M W^{1/2}.
    pub scaled: DMatrix<f64>,
}

pub fn discretize_operator(surface: &CovSurface) -> Result<DiscreteOperator> {
    let grid = surface.grid().to_vec();
    let n = grid.len();
    let d = surface.mean().geometry().dim();
    let weights = trapezoid_weights(&grid);
    let mut m = DMatrix::zeros(n * d, n * d);
    for g in 0..n {
        for h in 0..n {
            m.view_mut((h * d, g * d), (d, d)).copy_from(surface.coeffs(g, h));
        }
    }
    let asym = (&m - m.transpose()).amax();
    if asym > ASYMMETRY_TOL * m.amax().max(1.0) {
        return Err(Error::Invalid(format!(
            "covariance operator is not symmetric (max asymmetry {asym:e})"
        )));
    }
    let sq: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let mut scaled = DMatrix::from_fn(n * d, n * d, |r, c| sq[r / d] * m[(r, c)] * sq[c / d]);
    // exact symmetry for the eigensolver
    scaled = (&scaled + scaled.transpose()) * 0.5;
    Ok(DiscreteOperator {
        grid,
        weights,
        d,
        matrix: m,
        scaled,
    })
}

/// Leading eigenpairs of the covariance operator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EigenSystem {
    pub grid: Vec<f64>,
    pub weights: Vec<f64>,
    pub d: usize,
    /// λ̂₁ ≥ … ≥ λ̂_K ≥ 0.
    pub values: Vec<f64>,
    /// ψ̂ₖ as G×d coefficient rows against the mean curve's frames.
    #[serde(with = "fields_serde")]
    pub fields: Vec<DMatrix<f64>>,
    /// Every eigenvalue of the discretized operator, descending and unclamped.
    pub spectrum: Vec<f64>,
}

mod fields_serde {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(f: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<Vec<f64>>> = f.iter().map(crate::bundle::rows).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
        let rows: Vec<Vec<Vec<f64>>> = Vec::deserialize(d)?;
        rows.iter()
            .map(|r| crate::bundle::from_rows(r).map_err(serde::de::Error::custom))
            .collect()
    }
}

impl EigenSystem {
    pub fn k(&self) -> usize {
        self.values.len()
    }

    /// Fraction of ∑λ̂ (over the nonnegative spectrum) captured by the first `k`.
    pub fn explained(&self, k: usize) -> f64 {
        let total: f64 = self.spectrum.iter().map(|l| l.max(0.0)).sum();
        let top: f64 = self.spectrum.iter().take(k).map(|l| l.max(0.0)).sum();
        if total > 0.0 {
            top / total
        } else {
            0.0
        }
    }

    /// Smallest K whose components explain at least `fraction` of the variance.
    pub fn k_for_fraction(&self, fraction: f64) -> usize {
        (1..=self.spectrum.len())
            .find(|&k| self.explained(k) >= fraction)
            .unwrap_or(self.spectrum.len())
    }

    /// Coefficients of ψ̂ₖ at a bracketed time, in the frame of
    /// [`MeanCurve::frame_at`].
    pub fn field_at(&self, mean: &MeanCurve, k: usize, b: Bracket) -> DVector<f64> {
        let f = &self.fields[k];
        let row = |g: usize| DVector::from_iterator(self.d, f.row(g).iter().copied());
        if b.alpha == 0.0 {
            return row(b.g);
        }
        mean.blend(b, &row(b.g), &row(b.g + 1))
    }
}

/// Top-K eigenpairs. Each ψ̂ₖ is signed so that its largest-magnitude ambient
/// coordinate over the grid is positive, which does not depend on the frames.
pub fn eigenpairs(op: &DiscreteOperator, mean: &MeanCurve, k: usize) -> Result<EigenSystem> {
    let (n, d) = (op.grid.len(), op.d);
    if k == 0 || k > n * d {
        return Err(Error::Invalid(format!("K must be in 1..={}, got {k}", n * d)));
    }
    if mean.grid() != op.grid.as_slice() {
        return Err(Error::Invalid("operator grid does not match the mean curve".into()));
    }
    let eig = op.scaled.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n * d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let spectrum: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut values = Vec::with_capacity(k);
    let mut fields = Vec::with_capacity(k);
    for &i in order.iter().take(k) {
        let lam = eig.eigenvalues[i];
        values.push(if lam < 0.0 && lam >= -NEG_EIG_TOL { 0.0 } else { lam.max(0.0) });
        let v = eig.eigenvectors.column(i);
        let mut psi = DMatrix::from_fn(n, d, |g, j| v[g * d + j] / op.weights[g].sqrt());
        if ambient_sign(mean, &psi) < 0.0 {
            psi.neg_mut();
        }
        fields.push(psi);
    }
    Ok(EigenSystem {
        grid: op.grid.clone(),
        weights: op.weights.clone(),
        d,
        values,
        fields,
        spectrum,
    })
}

/// The ambient coordinate of largest magnitude over all grid points; ties
/// go to the first in grid order.
fn ambient_sign(mean: &MeanCurve, psi: &DMatrix<f64>) -> f64 {
    let mut best = 0.0f64;
    for (g, f) in mean.frames().iter().enumerate() {
        let c = DVector::from_iterator(psi.ncols(), psi.row(g).iter().copied());
        for &x in f.combine(&c).as_slice() {
            if x.abs() > best.abs() * (1.0 + 1e-9) {
                best = x;
            }
        }
    }
    best
}

/// One subject's stacked BLUP ingredients.
///
/// `z` stacks the residual coefficients, `g` holds one column per component
/// with the stacked ψ̂ₖ coefficients, and `c` is the block matrix with block
/// (j, l) = Cov(z_ij, z_il), all in the same per-observation frames.
#[derive(Clone, Debug)]
pub struct SubjectDesign {
    pub z: DVector<f64>,
    pub g: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl SubjectDesign {
    /// The same design with observation j's frame rotated by `rots[j]`.
    pub fn rotated(&self, rots: &[DMatrix<f64>]) -> SubjectDesign {
        let d = rots.first().map_or(0, |r| r.nrows());
        let m = rots.len();
        let mut big = DMatrix::zeros(m * d, m * d);
        for (j, r) in rots.iter().enumerate() {
            big.view_mut((j * d, j * d), (d, d)).copy_from(r);
        }
        SubjectDesign {
            z: &big * &self.z,
            g: &big * &self.g,
            c: &big * &self.c * big.transpose(),
        }
    }
}

/// Conditioning of one subject's Σᵢ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaDiagnostics {
    pub min_eigenvalue: f64,
    pub condition: f64,
}

/// ξ̂ = λ̂ₖ g_kᵀ Σ⁻¹ z for every component, with Σ = σ̂²I + C.
pub fn blup_from_design(
    design: &SubjectDesign,
    values: &[f64],
    sigma2: f64,
    subject: &str,
) -> Result<(Vec<f64>, SigmaDiagnostics)> {
    let n = design.z.len();
    let mut sigma = &design.c + DMatrix::identity(n, n) * sigma2;
    sigma = (&sigma + sigma.transpose()) * 0.5;
    let eig = sigma.clone().symmetric_eigenvalues();
    let (lo, hi) = eig
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &x| (lo.min(x), hi.max(x.abs())));
    let diag = SigmaDiagnostics {
        min_eigenvalue: lo,
        condition: if lo > 0.0 { hi / lo } else { f64::INFINITY },
    };
    let not_pd = || Error::NotPositiveDefinite {
        subject: subject.to_string(),
        min_eigenvalue: diag.min_eigenvalue,
        condition: diag.condition,
    };
    if !(lo > 0.0) {
        return Err(not_pd());
    }
    let chol = sigma.cholesky().ok_or_else(not_pd)?;
    let sz = chol.solve(&design.z);
    let xi = values
        .iter()
        .enumerate()
        .map(|(k, lam)| lam * design.g.column(k).dot(&sz))
        .collect();
    Ok((xi, diag))
}

/// Predicted scores, one row per subject.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scores {
    pub ids: Vec<String>,
    #[serde(with = "matrix_rows")]
    pub scores: DMatrix<f64>,
    pub diagnostics: Vec<SigmaDiagnostics>,
}

mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        crate::bundle::rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        crate::bundle::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

impl Scores {
    /// CSV with columns `id,xi_1,…,xi_K`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["id".to_string()];
        header.extend((1..=self.scores.ncols()).map(|k| format!("xi_{k}")));
        out.write_record(&header)?;
        for (i, id) in self.ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(self.scores.row(i).iter().map(|x| x.to_string()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Residual coefficients, ψ̂ coefficients and covariance blocks for one
/// subject, in the frames of [`MeanCurve::frame_at`] at each T_ij.
pub(crate) fn subject_design(
    mean: &MeanCurve,
    surface: &CovSurface,
    eig: &EigenSystem,
    logs: &[ObsLog],
    k: usize,
) -> Result<SubjectDesign> {
    let d = mean.geometry().dim();
    let m = logs.len();
    let mut z = DVector::zeros(m * d);
    let mut g = DMatrix::zeros(m * d, k);
    for (j, o) in logs.iter().enumerate() {
        let frame = mean.frame_at(o.bracket, &o.base)?;
        z.rows_mut(j * d, d).copy_from(&frame.coefficients(&o.log));
        for kk in 0..k {
            g.view_mut((j * d, kk), (d, 1)).copy_from(&eig.field_at(mean, kk, o.bracket));
        }
    }
    let mut c = DMatrix::zeros(m * d, m * d);
    for (j, oj) in logs.iter().enumerate() {
        for (l, ol) in logs.iter().enumerate() {
            // 𝒞̂(T_il, T_ij) maps the l-th tangent space to the j-th: E[z_j z_lᵀ]
            c.view_mut((j * d, l * d), (d, d))
                .copy_from(&surface.coeffs_at(ol.bracket, oj.bracket));
        }
    }
    Ok(SubjectDesign { z, g, c })
}

/// Where the Σᵢ blocks come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaSource {
    /// 𝒞̂ with its negative spectrum removed, so Σᵢ ⪰ σ̂²I.
    #[default]
    Projected,
    /// 𝒞̂ as smoothed; indefinite blocks surface as per-subject errors.
    Raw,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BlupOptions {
    pub sigma: SigmaSource,
}

/// The nearest positive semidefinite surface in the quadrature norm:
/// eigenvalues of W^{1/2}MW^{1/2} below zero are dropped.
pub fn project_psd(surface: &CovSurface) -> Result<CovSurface> {
    let op = discretize_operator(surface)?;
    let (n, d) = (op.grid.len(), op.d);
    let eig = op.scaled.clone().symmetric_eigen();
    let lam = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0)));
    let v = &eig.eigenvectors;
    let scaled = v * lam * v.transpose();
    let isq: Vec<f64> = op.weights.iter().map(|w| 1.0 / w.sqrt()).collect();
    let mut cells = Vec::with_capacity(n * n);
    for g in 0..n {
        for h in 0..n {
            // block (h, g) of M is 𝒞̂(t_g, t_h)
            let b = scaled.view((h * d, g * d), (d, d)) * (isq[g] * isq[h]);
            let bt = scaled.view((g * d, h * d), (d, d)).transpose() * (isq[g] * isq[h]);
            cells.push((b + bt) * 0.5);
        }
    }
    CovSurface::from_cells((**surface.mean()).clone(), cells, surface.bandwidth(), surface.kernel())
}

pub fn blup_scores(
    data: &SparseDataset,
    mean: &MeanCurve,
    surface: &CovSurface,
    eig: &EigenSystem,
    sigma2: &NoiseVariance,
    k: usize,
) -> Result<Scores> {
    blup_scores_with(data, mean, surface, eig, sigma2, k, &BlupOptions::default())
}

pub fn blup_scores_with(
    data: &SparseDataset,
    mean: &MeanCurve,
    surface: &CovSurface,
    eig: &EigenSystem,
    sigma2: &NoiseVariance,
    k: usize,
    opts: &BlupOptions,
) -> Result<Scores> {
    if k == 0 || k > eig.k() {
        return Err(Error::Invalid(format!(
            "K = {k} but {} eigenpairs are available",
            eig.k()
        )));
    }
    let projected;
    let surface = match opts.sigma {
        SigmaSource::Raw => surface,
        SigmaSource::Projected => {
            projected = project_psd(surface)?;
            &projected
        }
    };
    let logs = observation_logs(data, mean)?;
    let rows: Vec<(Vec<f64>, SigmaDiagnostics)> = data
        .subjects()
        .par_iter()
        .zip(&logs)
        .map(|(s, l)| {
            let design = subject_design(mean, surface, eig, l, k)?;
            blup_from_design(&design, &eig.values[..k], sigma2.sigma2, &s.id)
        })
        .collect::<Result<_>>()?;
    let mut scores = DMatrix::zeros(data.n(), k);
    let mut diagnostics = Vec::with_capacity(data.n());
    for (i, (xi, diag)) in rows.into_iter().enumerate() {
        for (kk, x) in xi.into_iter().enumerate() {
            scores[(i, kk)] = x;
        }
        diagnostics.push(diag);
    }
    Ok(Scores {
        ids: data.subjects().iter().map(|s| s.id.clone()).collect(),
        scores,
        diagnostics,
    })
}
