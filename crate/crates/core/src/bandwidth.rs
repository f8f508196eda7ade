//! Data-driven bandwidth selection: subject-level K-fold cross-validation,
//! plus a one-pass GCV approximation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Manifold;
use crate::kernel::Kernel;
use crate::mean::{fit_mean_with, local_weights_with, uniform_grid, MeanCurve, MeanOptions, DEFAULT_GRID};
use crate::sampling::SparseDataset;
use crate::smoother::{fit_from_logs, observation_logs, GridTransports, ObsLog};

pub const DEFAULT_CANDIDATES: usize = 8;
pub const DEFAULT_FOLDS: usize = 5;

/// Candidate bandwidths, strictly increasing and positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandwidthGrid(Vec<f64>);

impl BandwidthGrid {
    /// Sorts and deduplicates the candidates.
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|h| !(*h > 0.0) || !h.is_finite()) {
            return Err(Error::Invalid("bandwidth candidates must be positive and finite".into()));
        }
        values.sort_by(f64::total_cmp);
        values.dedup();
        if values.is_empty() {
            return Err(Error::Invalid("no bandwidth candidates".into()));
        }
        Ok(BandwidthGrid(values))
    }

    /// `count` geometrically spaced values from `lo` to `hi`.
    pub fn geometric(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if !(lo > 0.0 && hi >= lo) || count == 0 {
            return Err(Error::Invalid(format!("bad geometric grid [{lo}, {hi}] × {count}")));
        }
        if count == 1 || hi == lo {
            return Self::new(vec![hi]);
        }
        let r = (hi / lo).powf(1.0 / (count - 1) as f64);
        let mut v: Vec<f64> = (0..count).map(|i| lo * r.powi(i as i32)).collect();
        v[count - 1] = hi;
        Self::new(v)
    }

    /// From 1.5 times the median within-subject gap to half the domain.
    pub fn default_for(data: &SparseDataset) -> Result<Self> {
        let [a, b] = data.domain();
        let hi = 0.5 * (b - a);
        let gap = data
            .median_gap()
            .ok_or_else(|| Error::Invalid("no subject has two distinct times".into()))?;
        Self::geometric((1.5 * gap).min(hi), hi, DEFAULT_CANDIDATES)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// How a bandwidth is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMethod {
    #[default]
    Cv,
    /// One-pass GCV; not validated against any reference implementation.
    Gcv,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub folds: usize,
    /// Seeds the subject-to-fold assignment.
    pub seed: u64,
    pub kernel: Kernel,
    /// Grid size for the mean fits inside the search.
    pub mean_grid: usize,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions {
            folds: DEFAULT_FOLDS,
            seed: 0,
            kernel: Kernel::default(),
            mean_grid: DEFAULT_GRID,
        }
    }
}

/// Risk of one candidate; `risk` is `None` when a fit failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRisk {
    pub h: f64,
    pub risk: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub method: SelectionMethod,
    pub selected: f64,
    pub table: Vec<CandidateRisk>,
}

impl Selection {
    /// CSV with columns `h,risk,status`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["h", "risk", "status"])?;
        for c in &self.table {
            let risk = c.risk.map_or(String::new(), |r| r.to_string());
            let status = match (&c.error, c.h == self.selected) {
                (Some(e), _) => format!("failed: {e}"),
                (None, true) => "selected".into(),
                (None, false) => "ok".into(),
            };
            out.write_record([c.h.to_string(), risk, status])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Fold index of each subject: a seeded shuffle dealt round-robin.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % folds;
    }
    fold
}

fn split(fold: &[usize], f: usize) -> (Vec<usize>, Vec<usize>) {
    (0..fold.len()).partition(|&i| fold[i] != f)
}

/// Smallest risk wins; equal risks go to the larger bandwidth.
fn select(method: SelectionMethod, table: Vec<CandidateRisk>) -> Result<Selection> {
    let mut best: Option<(f64, f64)> = None;
    for c in &table {
        if let Some(r) = c.risk {
            if best.is_none_or(|(_, b)| r <= b) {
                best = Some((c.h, r));
            }
        }
    }
    match best {
        Some((selected, _)) => Ok(Selection {
            method,
            selected,
            table,
        }),
        None => Err(Error::AllCandidatesFailed(
            table
                .iter()
                .map(|c| format!("h={}: {}", c.h, c.error.as_deref().unwrap_or("no risk")))
                .collect::<Vec<_>>()
                .join("; "),
        )),
    }
}

fn check_folds(data: &SparseDataset, folds: usize) -> Result<()> {
    if folds < 2 || folds > data.n() {
        return Err(Error::Invalid(format!(
            "folds must be in 2..={}, got {folds}",
            data.n()
        )));
    }
    Ok(())
}

/// Runs `risk(h, fold)` for every candidate and fold; a candidate with any
/// failed fold fails.
fn cross_validate(
    grid: &BandwidthGrid,
    folds: usize,
    risk: impl Fn(f64, usize) -> Result<f64> + Sync,
) -> Vec<CandidateRisk> {
    let jobs: Vec<(usize, usize)> = (0..grid.values().len())
        .flat_map(|c| (0..folds).map(move |f| (c, f)))
        .collect();
    let results: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(c, f)| risk(grid.values()[c], f))
        .collect();
    grid.values()
        .iter()
        .enumerate()
        .map(|(c, &h)| {
            let mut total = 0.0;
            for r in &results[c * folds..(c + 1) * folds] {
                match r {
                    Ok(v) => total += v,
                    Err(e) => {
                        return CandidateRisk {
                            h,
                            risk: None,
                            error: Some(e.to_string()),
                        }
                    }
                }
            }
            CandidateRisk {
                h,
                risk: Some(total),
                error: None,
            }
        })
        .collect()
}

/// Held-out ∑d²(Y_ij, μ̂⁽⁻ᶠ⁾(T_ij)) summed over folds.
pub fn cv_mean(data: &SparseDataset, grid: &BandwidthGrid, opts: &CvOptions) -> Result<Selection> {
    check_folds(data, opts.folds)?;
    let fold = fold_assignment(data.n(), opts.folds, opts.seed);
    let tgrid = uniform_grid(data.domain(), opts.mean_grid);
    let mopts = MeanOptions { kernel: opts.kernel };
    let geom = data.geometry();
    let table = cross_validate(grid, opts.folds, |h, f| {
        let (train, test) = split(&fold, f);
        let mean = fit_mean_with(&data.subset(&train)?, h, &tgrid, &mopts)?;
        let mut risk = 0.0;
        for &i in &test {
            let s = &data.subjects()[i];
            for (&t, y) in s.times.iter().zip(&s.points) {
                let (p, _) = mean.eval(t)?;
                risk += geom.dist(y, &p)?.powi(2);
            }
        }
        Ok(risk)
    });
    select(SelectionMethod::Cv, table)
}

/// Held-out ∑_{j≠k}‖raw − 𝒞̂⁽⁻ᶠ⁾(T_ij, T_ik)‖²_G with the full-data mean.
///
/// Raw covariances and the fold fits share the frames of `mean`, so the
/// G-norm is a Frobenius norm of coefficient matrices.
pub fn cv_cov(data: &SparseDataset, mean: &MeanCurve, grid: &BandwidthGrid, opts: &CvOptions) -> Result<Selection> {
    check_folds(data, opts.folds)?;
    let fold = fold_assignment(data.n(), opts.folds, opts.seed);
    let logs = observation_logs(data, mean)?;
    let coeffs = observation_coeffs(mean, &logs)?;
    let reach = grid.values().last().copied().unwrap_or(0.0);
    let cache = GridTransports::new(data, mean, &logs, reach)?;
    let table = cross_validate(grid, opts.folds, |h, f| {
        let (train, test) = split(&fold, f);
        let train_logs: Vec<Vec<ObsLog>> = train.iter().map(|&i| logs[i].clone()).collect();
        let train_cache = cache.subset(&train);
        let surface = fit_from_logs(&data.subset(&train)?, mean, &train_logs, Some(&train_cache), h, opts.kernel)?;
        let mut risk = 0.0;
        for &i in &test {
            for (j, oj) in logs[i].iter().enumerate() {
                for (k, ok) in logs[i].iter().enumerate() {
                    if j == k {
                        continue;
                    }
                    let raw = &coeffs[i][k] * coeffs[i][j].transpose();
                    risk += (raw - surface.coeffs_at(oj.bracket, ok.bracket)).norm_squared();
                }
            }
        }
        Ok(risk)
    });
    select(SelectionMethod::Cv, table)
}

/// Residual coefficients in the frames of [`MeanCurve::frame_at`].
fn observation_coeffs(mean: &MeanCurve, logs: &[Vec<ObsLog>]) -> Result<Vec<Vec<nalgebra::DVector<f64>>>> {
    logs.iter()
        .map(|l| {
            l.iter()
                .map(|o| Ok(mean.frame_at(o.bracket, &o.base)?.coefficients(&o.log)))
                .collect()
        })
        .collect()
}

/// GCV for the mean: (RSS/N)/(1 − tr S/N)², with the leverage of Y_ij taken
/// as its own local-linear weight λᵢŵ(T_ij, T_ij).
pub fn gcv_mean(data: &SparseDataset, grid: &BandwidthGrid, opts: &CvOptions) -> Result<Selection> {
    let tgrid = uniform_grid(data.domain(), opts.mean_grid);
    let mopts = MeanOptions { kernel: opts.kernel };
    let geom = data.geometry();
    let n_obs = data.total_obs() as f64;
    let table: Vec<CandidateRisk> = grid
        .values()
        .par_iter()
        .map(|&h| {
            let score = || -> Result<f64> {
                let mean = fit_mean_with(data, h, &tgrid, &mopts)?;
                let (mut rss, mut trace) = (0.0, 0.0);
                for (i, s) in data.subjects().iter().enumerate() {
                    for (j, (&t, y)) in s.times.iter().zip(&s.points).enumerate() {
                        rss += geom.dist(y, &mean.eval(t)?.0)?.powi(2);
                        let w = local_weights_with(data, t, h, opts.kernel)?;
                        trace += w
                            .entries
                            .iter()
                            .find(|e| e.subject == i && e.obs == j)
                            .map_or(0.0, |e| e.effective);
                    }
                }
                gcv_ratio(rss, trace, n_obs)
            };
            candidate(h, score())
        })
        .collect();
    select(SelectionMethod::Gcv, table)
}

/// GCV for the covariance over all within-subject pairs. The leverage of a
/// pair is its own weight in the local-linear intercept at its location,
/// νᵢK_h(0)²·(S₂₀S₀₂ − S₁₁²)/D, with the moments computed over all pairs.
/// Cost is quadratic in the number of pairs inside a window.
pub fn gcv_cov(data: &SparseDataset, mean: &MeanCurve, grid: &BandwidthGrid, opts: &CvOptions) -> Result<Selection> {
    let logs = observation_logs(data, mean)?;
    let coeffs = observation_coeffs(mean, &logs)?;
    // (s, t, ν, subject, j, k), sorted by s for windowed scans
    let mut pairs: Vec<(f64, f64, f64, usize, usize, usize)> = Vec::new();
    for (i, s) in data.subjects().iter().enumerate() {
        for j in 0..s.len() {
            for k in 0..s.len() {
                if j != k {
                    pairs.push((s.times[j], s.times[k], data.nu(i), i, j, k));
                }
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let np = pairs.len() as f64;
    let kernel = opts.kernel;
    let reach = grid.values().last().copied().unwrap_or(0.0);
    let cache = GridTransports::new(data, mean, &logs, reach)?;
    let table: Vec<CandidateRisk> = grid
        .values()
        .par_iter()
        .map(|&h| {
            let score = || -> Result<f64> {
                let surface = fit_from_logs(data, mean, &logs, Some(&cache), h, kernel)?;
                let (mut rss, mut trace) = (0.0, 0.0);
                for &(s, t, nu, i, j, k) in &pairs {
                    let raw = &coeffs[i][k] * coeffs[i][j].transpose();
                    rss += (raw - surface.coeffs_at(logs[i][j].bracket, logs[i][k].bracket)).norm_squared();
                    let lo = pairs.partition_point(|p| p.0 <= s - h);
                    let mut m = [[0.0; 3]; 3];
                    for p in pairs[lo..].iter().take_while(|p| p.0 < s + h) {
                        let w = p.2 * kernel.scaled(p.0 - s, h) * kernel.scaled(p.1 - t, h);
                        if w == 0.0 {
                            continue;
                        }
                        let (x, y) = ((p.0 - s) / h, (p.1 - t) / h);
                        m[0][0] += w;
                        m[1][0] += w * x;
                        m[0][1] += w * y;
                        m[2][0] += w * x * x;
                        m[1][1] += w * x * y;
                        m[0][2] += w * y * y;
                    }
                    let c00 = m[2][0] * m[0][2] - m[1][1] * m[1][1];
                    let c10 = -(m[1][0] * m[0][2] - m[0][1] * m[1][1]);
                    let c01 = m[1][0] * m[1][1] - m[0][1] * m[2][0];
                    let den = c00 * m[0][0] + c10 * m[1][0] + c01 * m[0][1];
                    if den > 0.0 {
                        trace += nu * kernel.scaled(0.0, h).powi(2) * c00 / den;
                    }
                }
                gcv_ratio(rss, trace, np)
            };
            candidate(h, score())
        })
        .collect();
    select(SelectionMethod::Gcv, table)
}

fn gcv_ratio(rss: f64, trace: f64, n: f64) -> Result<f64> {
    let frac = trace / n;
    if !(frac < 1.0) {
        return Err(Error::Invalid(format!("effective degrees of freedom {trace:.1} exceed {n}")));
    }
    Ok(rss / n / (1.0 - frac).powi(2))
}

fn candidate(h: f64, r: Result<f64>) -> CandidateRisk {
    match r {
        Ok(v) => CandidateRisk {
            h,
            risk: Some(v),
            error: None,
        },
        Err(e) => CandidateRisk {
            h,
            risk: None,
            error: Some(e.to_string()),
        },
    }
}

/// Selects h_μ by the chosen method.
pub fn select_mean(data: &SparseDataset, grid: &BandwidthGrid, method: SelectionMethod, opts: &CvOptions) -> Result<Selection> {
    match method {
        SelectionMethod::Cv => cv_mean(data, grid, opts),
        SelectionMethod::Gcv => gcv_mean(data, grid, opts),
    }
}

/// Selects h_𝒞 by the chosen method.
pub fn select_cov(
    data: &SparseDataset,
    mean: &MeanCurve,
    grid: &BandwidthGrid,
    method: SelectionMethod,
    opts: &CvOptions,
) -> Result<Selection> {
    match method {
        SelectionMethod::Cv => cv_cov(data, mean, grid, opts),
        SelectionMethod::Gcv => gcv_cov(data, mean, grid, opts),
    }
}
