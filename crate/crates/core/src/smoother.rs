//! Local-linear covariance smoothing on the covariance bundle and the
//! measurement-error variance.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{bundle_transport, raw_cov, FiberElement};
use crate::error::{Error, Result};
use crate::geometry::{Frame, Manifold, Point, Tangent};
use crate::kernel::Kernel;
use crate::mean::{Bracket, MeanCurve};
use crate::sampling::SparseDataset;

const MIN_PAIRS: usize = 3;
/// Relative guard on the closed-form denominator, against S₀₀³.
const DENOM_GUARD: f64 = 1e-12;
/// The fit fails when more than this fraction of cells fail.
const MAX_FAILED_FRACTION: f64 = 0.10;
pub const NOISE_FLOOR: f64 = 1e-10;

/// Kernel-weighted moments of the pairs near (s, t).
///
/// `s_ab[a][b]` holds S_ab for a + b ≤ 2 (other entries are zero). The R's
/// live in 𝕃(μ̂(s), μ̂(t)) and share its frames.
#[derive(Clone, Debug)]
pub struct MomentSums {
    pub s: f64,
    pub t: f64,
    pub h: f64,
    pub s_ab: [[f64; 3]; 3],
    pub r00: FiberElement,
    pub r10: FiberElement,
    pub r01: FiberElement,
    pub pairs: usize,
}

impl MomentSums {
    /// (S₂₀S₀₂ − S₁₁²)S₀₀ − (S₁₀S₀₂ − S₀₁S₁₁)S₁₀ + (S₁₀S₁₁ − S₀₁S₂₀)S₀₁.
    pub fn denominator(&self) -> f64 {
        let [c00, c10, c01] = self.cofactors();
        c00 * self.s_ab[0][0] + c10 * self.s_ab[1][0] + c01 * self.s_ab[0][1]
    }

    /// Multipliers of R₀₀, R₁₀, R₀₁ in the numerator of β₀.
    fn cofactors(&self) -> [f64; 3] {
        let s = &self.s_ab;
        [
            s[2][0] * s[0][2] - s[1][1] * s[1][1],
            -(s[1][0] * s[0][2] - s[0][1] * s[1][1]),
            s[1][0] * s[1][1] - s[0][1] * s[2][0],
        ]
    }

    /// Denominator relative to S₀₀³, the quantity the singularity guard uses.
    pub fn relative_denominator(&self) -> f64 {
        self.denominator() / self.s_ab[0][0].powi(3)
    }
}

fn check_pairs(s: f64, t: f64, pairs: usize) -> Result<()> {
    if pairs < MIN_PAIRS {
        return Err(Error::InsufficientPairs { s, t, pairs });
    }
    Ok(())
}

/// Moment sums at an arbitrary (s, t), transporting every raw covariance
/// element into 𝕃(μ̂(s), μ̂(t)) one pair at a time.
///
/// This is the literal route; [`fit_cov_surface`] computes the same sums on
/// the grid from cached per-observation transports.
pub fn moment_sums(data: &SparseDataset, mean: &MeanCurve, s: f64, t: f64, h: f64) -> Result<MomentSums> {
    moment_sums_with(data, mean, s, t, h, Kernel::default())
}

pub fn moment_sums_with(
    data: &SparseDataset,
    mean: &MeanCurve,
    s: f64,
    t: f64,
    h: f64,
    kernel: Kernel,
) -> Result<MomentSums> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Invalid(format!("bandwidth must be positive, got {h}")));
    }
    let geom = mean.geometry();
    let (_, fs) = mean.eval(s)?;
    let (_, ft) = mean.eval(t)?;
    let (fs, ft) = (Arc::new(fs), Arc::new(ft));
    let d = geom.dim();
    let mut s_ab = [[0.0; 3]; 3];
    let mut r = [DMatrix::zeros(d, d), DMatrix::zeros(d, d), DMatrix::zeros(d, d)];
    let mut pairs = 0;
    for (i, subj) in data.subjects().iter().enumerate() {
        let nu = data.nu(i);
        if nu == 0.0 {
            continue;
        }
        // frames at μ̂(T_ij) for the observations in either window
        let mut frames: Vec<Option<Arc<Frame>>> = vec![None; subj.len()];
        for (j, &tj) in subj.times.iter().enumerate() {
            if (tj - s).abs() < h || (tj - t).abs() < h {
                frames[j] = Some(Arc::new(mean.eval(tj)?.1));
            }
        }
        for (j, &tj) in subj.times.iter().enumerate() {
            let ks = kernel.scaled(tj - s, h);
            if ks == 0.0 {
                continue;
            }
            let x = (tj - s) / h;
            for (k, &tk) in subj.times.iter().enumerate() {
                if j == k {
                    continue;
                }
                let kt = kernel.scaled(tk - t, h);
                if kt == 0.0 {
                    continue;
                }
                let y = (tk - t) / h;
                let (fj, fk) = (frames[j].as_ref().unwrap(), frames[k].as_ref().unwrap());
                let raw = raw_cov(geom, fj, fk, &subj.points[j], &subj.points[k])?;
                let moved = bundle_transport(geom, &raw, &fs, &ft)?;
                let w = nu * ks * kt;
                let c = moved.coeffs();
                for a in 0..3 {
                    for b in 0..3 - a {
                        s_ab[a][b] += w * x.powi(a as i32) * y.powi(b as i32);
                    }
                }
                r[0] += c * w;
                r[1] += c * (w * x);
                r[2] += c * (w * y);
                pairs += 1;
            }
        }
    }
    // the identification check (three pairs) belongs to fit_cov_point
    if pairs == 0 {
        return Err(Error::InsufficientPairs { s, t, pairs });
    }
    let [r00, r10, r01] = r;
    Ok(MomentSums {
        s,
        t,
        h,
        s_ab,
        r00: FiberElement::new(fs.clone(), ft.clone(), r00)?,
        r10: FiberElement::new(fs.clone(), ft.clone(), r10)?,
        r01: FiberElement::new(fs, ft, r01)?,
        pairs,
    })
}

/// β₀ of the local-linear fit, entrywise in the fiber's frames.
pub fn fit_cov_point(sums: &MomentSums) -> Result<FiberElement> {
    check_pairs(sums.s, sums.t, sums.pairs)?;
    let den = sums.denominator();
    let s00 = sums.s_ab[0][0];
    if !(s00 > 0.0) || !(den > DENOM_GUARD * s00.powi(3)) {
        return Err(Error::SingularDesign {
            s: sums.s,
            t: sums.t,
            pairs: sums.pairs,
            denominator: den,
        });
    }
    let [c00, c10, c01] = sums.cofactors();
    let r10 = sums.r10.expressed_in(sums.r00.source(), sums.r00.target())?;
    let r01 = sums.r01.expressed_in(sums.r00.source(), sums.r00.target())?;
    let beta = (sums.r00.coeffs() * c00 + r10.coeffs() * c10 + r01.coeffs() * c01) / den;
    FiberElement::new(sums.r00.source().clone(), sums.r00.target().clone(), beta)
}

/// What happened at one grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum CellStatus {
    Fitted,
    /// Copied by bundle transport from the nearest fitted cell.
    Filled { from: [usize; 2], reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellDiagnostics {
    pub pairs: usize,
    /// Closed-form denominator over S₀₀³; absent when too few pairs were found.
    pub rel_denominator: Option<f64>,
    #[serde(flatten)]
    pub status: CellStatus,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CovOptions {
    pub kernel: Kernel,
}

/// Fitted covariance on grid × grid, in the mean curve's frame field.
///
/// Cell (g, h) is 𝒞̂(t_g, t_h) ∈ 𝕃(μ̂(t_g), μ̂(t_h)) with source frame
/// `frames[g]` and target frame `frames[h]`.
#[derive(Clone, Debug)]
pub struct CovSurface {
    mean: Arc<MeanCurve>,
    bandwidth: f64,
    kernel: Kernel,
    cells: Vec<DMatrix<f64>>,
    diagnostics: Vec<CellDiagnostics>,
    warnings: Vec<String>,
}

/// One observation's residual at its fitted mean.
#[derive(Clone, Debug)]
pub(crate) struct ObsLog {
    pub bracket: Bracket,
    pub base: Point,
    pub log: Tangent,
}

/// Log_{μ̂(T_ij)} Y_ij for every observation, per subject.
pub(crate) fn observation_logs(data: &SparseDataset, mean: &MeanCurve) -> Result<Vec<Vec<ObsLog>>> {
    let geom = mean.geometry();
    data.subjects()
        .par_iter()
        .map(|s| {
            s.times
                .iter()
                .zip(&s.points)
                .map(|(&t, y)| {
                    let bracket = mean.locate(t)?;
                    let base = mean.point_at(bracket)?;
                    let log = geom.log(&base, y).map_err(|e| e.at_time(t))?;
                    Ok(ObsLog { bracket, base, log })
                })
                .collect()
        })
        .collect()
}

/// Frame coefficients at μ̂(t_g) of each residual transported to every grid
/// point within `reach` of its time, computed once and shared by fits at
/// any h ≤ reach. Subject i's entry for (j, g) starts at (j·G + g)·d.
pub(crate) struct GridTransports {
    reach: f64,
    grid_len: usize,
    d: usize,
    per_subject: Vec<Vec<f64>>,
}

impl GridTransports {
    pub(crate) fn new(data: &SparseDataset, mean: &MeanCurve, logs: &[Vec<ObsLog>], reach: f64) -> Result<Self> {
        let geom = mean.geometry();
        let grid = mean.grid();
        let (gl, d) = (grid.len(), geom.dim());
        let per_subject = data
            .subjects()
            .par_iter()
            .zip(logs)
            .map(|(subj, l)| {
                let mut out = vec![f64::NAN; subj.len() * gl * d];
                for (j, &tj) in subj.times.iter().enumerate() {
                    for (g, &tg) in grid.iter().enumerate() {
                        if (tj - tg).abs() >= reach {
                            continue;
                        }
                        let ob = &l[j];
                        let moved = geom
                            .transport(&ob.base, &mean.points()[g], &ob.log)
                            .map_err(|e| e.at_time(tj))?;
                        let c = mean.frames()[g].coefficients(&moved);
                        out[(j * gl + g) * d..(j * gl + g + 1) * d].copy_from_slice(c.as_slice());
                    }
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        Ok(GridTransports {
            reach,
            grid_len: gl,
            d,
            per_subject,
        })
    }

    pub(crate) fn subset(&self, idx: &[usize]) -> Self {
        GridTransports {
            per_subject: idx.iter().map(|&i| self.per_subject[i].clone()).collect(),
            ..*self
        }
    }

    fn get(&self, i: usize, j: usize, g: usize) -> &[f64] {
        let at = (j * self.grid_len + g) * self.d;
        &self.per_subject[i][at..at + self.d]
    }
}

/// Observations near one grid time, grouped by subject.
struct Window {
    d: usize,
    /// (obs index, K_h(T − t_g), (T − t_g)/h)
    obs: Vec<(usize, f64, f64)>,
    /// Frame coefficients at μ̂(t_g) of each transported residual, d per obs.
    coeffs: Vec<f64>,
    subjects: Vec<WindowSubject>,
}

struct WindowSubject {
    subject: usize,
    range: std::ops::Range<usize>,
    /// ∑ K xᵃ for a = 0, 1, 2.
    k: [f64; 3],
    /// ∑ K c and ∑ K x c.
    u0: Vec<f64>,
    u1: Vec<f64>,
}

impl Window {
    fn coeffs(&self, o: usize) -> &[f64] {
        &self.coeffs[o * self.d..(o + 1) * self.d]
    }
}

fn build_windows(
    data: &SparseDataset,
    mean: &MeanCurve,
    logs: &[Vec<ObsLog>],
    cache: Option<&GridTransports>,
    h: f64,
    kernel: Kernel,
) -> Result<Vec<Window>> {
    let cache = cache.filter(|c| h <= c.reach);
    let geom = mean.geometry();
    let grid = mean.grid();
    let d = geom.dim();
    // per subject: (g, obs, K, x, coeffs) for every grid point in reach
    type Hit = (usize, usize, f64, f64, Vec<f64>);
    let hits: Vec<Vec<Hit>> = (0..data.n())
        .into_par_iter()
        .map(|i| {
            let mut out = Vec::new();
            if data.nu(i) == 0.0 {
                return Ok(out);
            }
            let subj = &data.subjects()[i];
            for (j, &tj) in subj.times.iter().enumerate() {
                let lo = grid.partition_point(|&x| x <= tj - h);
                for (g, &tg) in grid.iter().enumerate().skip(lo) {
                    if tg >= tj + h {
                        break;
                    }
                    let k = kernel.scaled(tj - tg, h);
                    if k == 0.0 {
                        continue;
                    }
                    let c = match cache {
                        Some(c) => c.get(i, j, g).to_vec(),
                        None => {
                            let ob = &logs[i][j];
                            let moved = geom
                                .transport(&ob.base, &mean.points()[g], &ob.log)
                                .map_err(|e| e.at_time(tj))?;
                            mean.frames()[g].coefficients(&moved).as_slice().to_vec()
                        }
                    };
                    out.push((g, j, k, (tj - tg) / h, c));
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut windows: Vec<Window> = (0..grid.len())
        .map(|_| Window {
            d,
            obs: Vec::new(),
            coeffs: Vec::new(),
            subjects: Vec::new(),
        })
        .collect();
    for (i, subject_hits) in hits.into_iter().enumerate() {
        for (g, j, k, x, c) in subject_hits {
            let w = &mut windows[g];
            let o = w.obs.len();
            w.obs.push((j, k, x));
            w.coeffs.extend_from_slice(&c);
            match w.subjects.last_mut() {
                Some(ws) if ws.subject == i => ws.range.end = o + 1,
                _ => w.subjects.push(WindowSubject {
                    subject: i,
                    range: o..o + 1,
                    k: [0.0; 3],
                    u0: vec![0.0; d],
                    u1: vec![0.0; d],
                }),
            }
        }
    }
    for w in &mut windows {
        let (obs, coeffs) = (&w.obs, &w.coeffs);
        for ws in &mut w.subjects {
            for o in ws.range.clone() {
                let (_, k, x) = obs[o];
                ws.k[0] += k;
                ws.k[1] += k * x;
                ws.k[2] += k * x * x;
                for (a, c) in coeffs[o * d..(o + 1) * d].iter().enumerate() {
                    ws.u0[a] += k * c;
                    ws.u1[a] += k * x * c;
                }
            }
        }
    }
    Ok(windows)
}

/// Adds w·b·aᵀ (d×d, column-major) to `acc`.
#[inline]
fn add_outer(acc: &mut [f64], w: f64, b: &[f64], a: &[f64]) {
    let d = b.len();
    for (col, &ac) in a.iter().enumerate() {
        let wa = w * ac;
        for (row, &br) in b.iter().enumerate() {
            acc[col * d + row] += wa * br;
        }
    }
}

/// Raw sums for cell (g, h): S_ab, the three R coefficient arrays and the pair count.
fn cell_sums(data: &SparseDataset, wg: &Window, wh: &Window) -> ([[f64; 3]; 3], [Vec<f64>; 3], usize) {
    let d = wg.d;
    let mut s = [[0.0; 3]; 3];
    let mut r = [vec![0.0; d * d], vec![0.0; d * d], vec![0.0; d * d]];
    let mut pairs: isize = 0;
    let (mut ia, mut ib) = (0, 0);
    while ia < wg.subjects.len() && ib < wh.subjects.len() {
        let (a, b) = (&wg.subjects[ia], &wh.subjects[ib]);
        if a.subject < b.subject {
            ia += 1;
            continue;
        }
        if b.subject < a.subject {
            ib += 1;
            continue;
        }
        ia += 1;
        ib += 1;
        let nu = data.nu(a.subject);
        // all ordered pairs (j, k), then drop j = k below
        for p in 0..3 {
            for q in 0..3 - p {
                s[p][q] += nu * a.k[p] * b.k[q];
            }
        }
        add_outer(&mut r[0], nu, &b.u0, &a.u0);
        add_outer(&mut r[1], nu, &b.u0, &a.u1);
        add_outer(&mut r[2], nu, &b.u1, &a.u0);
        pairs += (a.range.len() * b.range.len()) as isize;

        let (mut oa, mut ob) = (a.range.start, b.range.start);
        while oa < a.range.end && ob < b.range.end {
            let (ja, ka, xa) = wg.obs[oa];
            let (jb, kb, xb) = wh.obs[ob];
            if ja < jb {
                oa += 1;
            } else if jb < ja {
                ob += 1;
            } else {
                let w = nu * ka * kb;
                for p in 0..3 {
                    for q in 0..3 - p {
                        s[p][q] -= w * xa.powi(p as i32) * xb.powi(q as i32);
                    }
                }
                let (ca, cb) = (wg.coeffs(oa), wh.coeffs(ob));
                add_outer(&mut r[0], -w, cb, ca);
                add_outer(&mut r[1], -w * xa, cb, ca);
                add_outer(&mut r[2], -w * xb, cb, ca);
                pairs -= 1;
                oa += 1;
                ob += 1;
            }
        }
    }
    (s, r, pairs.max(0) as usize)
}

/// Fits 𝒞̂ on the mean curve's grid.
pub fn fit_cov_surface(data: &SparseDataset, mean: &MeanCurve, h: f64) -> Result<CovSurface> {
    fit_cov_surface_with(data, mean, h, &CovOptions::default())
}

pub fn fit_cov_surface_with(data: &SparseDataset, mean: &MeanCurve, h: f64, opts: &CovOptions) -> Result<CovSurface> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Invalid(format!("bandwidth must be positive, got {h}")));
    }
    if data.geometry() != mean.geometry() {
        return Err(Error::Invalid(format!(
            "mean fitted on {} but data are on {}",
            mean.geometry(),
            data.geometry()
        )));
    }
    let logs = observation_logs(data, mean)?;
    fit_from_logs(data, mean, &logs, None, h, opts.kernel)
}

pub(crate) fn fit_from_logs(
    data: &SparseDataset,
    mean: &MeanCurve,
    logs: &[Vec<ObsLog>],
    cache: Option<&GridTransports>,
    h: f64,
    kernel: Kernel,
) -> Result<CovSurface> {
    let windows = build_windows(data, mean, logs, cache, h, kernel)?;
    let grid = mean.grid();
    let n = grid.len();
    let frames = mean.frames();
    let d = mean.geometry().dim();

    let fitted: Vec<(Result<DMatrix<f64>>, usize, Option<f64>)> = (0..n * n)
        .into_par_iter()
        .map(|idx| {
            let (g, hh) = (idx / n, idx % n);
            let (s_ab, r, pairs) = cell_sums(data, &windows[g], &windows[hh]);
            let (s, t) = (grid[g], grid[hh]);
            if pairs < MIN_PAIRS {
                return (Err(Error::InsufficientPairs { s, t, pairs }), pairs, None);
            }
            let elem = |v: &Vec<f64>| {
                FiberElement::new(
                    frames[g].clone(),
                    frames[hh].clone(),
                    DMatrix::from_column_slice(d, d, v),
                )
                .expect("shapes agree")
            };
            let sums = MomentSums {
                s,
                t,
                h,
                s_ab,
                r00: elem(&r[0]),
                r10: elem(&r[1]),
                r01: elem(&r[2]),
                pairs,
            };
            let rel = sums.relative_denominator();
            (fit_cov_point(&sums).map(FiberElement::into_coeffs), pairs, Some(rel))
        })
        .collect();

    let failed: Vec<usize> = (0..n * n).filter(|&k| fitted[k].0.is_err()).collect();
    if failed.len() as f64 > MAX_FAILED_FRACTION * (n * n) as f64 || failed.len() == n * n {
        let first = fitted[failed[0]].0.as_ref().err().map(ToString::to_string).unwrap_or_default();
        return Err(Error::TooManyCellFailures {
            failed: failed.len(),
            total: n * n,
            first,
        });
    }

    let ok: Vec<usize> = (0..n * n).filter(|&k| fitted[k].0.is_ok()).collect();
    let mut cells = Vec::with_capacity(n * n);
    let mut diagnostics = Vec::with_capacity(n * n);
    for (idx, (res, pairs, rel)) in fitted.iter().enumerate() {
        let (g, hh) = (idx / n, idx % n);
        match res {
            Ok(c) => {
                cells.push(c.clone());
                diagnostics.push(CellDiagnostics {
                    pairs: *pairs,
                    rel_denominator: *rel,
                    status: CellStatus::Fitted,
                });
            }
            Err(e) => {
                let src = nearest(&ok, n, g, hh);
                let (sg, sh) = (src / n, src % n);
                let from = FiberElement::new(
                    frames[sg].clone(),
                    frames[sh].clone(),
                    fitted[src].0.as_ref().unwrap().clone(),
                )?;
                let moved = bundle_transport(mean.geometry(), &from, &frames[g], &frames[hh])?;
                cells.push(moved.into_coeffs());
                diagnostics.push(CellDiagnostics {
                    pairs: *pairs,
                    rel_denominator: *rel,
                    status: CellStatus::Filled {
                        from: [sg, sh],
                        reason: e.to_string(),
                    },
                });
            }
        }
    }
    symmetrize(&mut cells, n);

    let mut warnings = Vec::new();
    if h > mean.bandwidth() {
        warnings.push(format!(
            "covariance bandwidth {h} exceeds the mean bandwidth {}; pointwise rates assume h_cov = O(h_mu)",
            mean.bandwidth()
        ));
    }
    if !failed.is_empty() {
        warnings.push(format!("{} of {} cells filled from neighbours", failed.len(), n * n));
    }
    Ok(CovSurface {
        mean: Arc::new(mean.clone()),
        bandwidth: h,
        kernel,
        cells,
        diagnostics,
        warnings,
    })
}

/// Closest fitted cell in grid-index distance; ties go to the lowest index.
fn nearest(ok: &[usize], n: usize, g: usize, h: usize) -> usize {
    let dist = |k: usize| {
        let (a, b) = ((k / n) as isize - g as isize, (k % n) as isize - h as isize);
        a * a + b * b
    };
    *ok.iter().min_by_key(|&&k| (dist(k), k)).expect("at least one fitted cell")
}

/// 𝒞̂(s,t) ← ½(𝒞̂(s,t) + 𝒞̂(t,s)*), written so the two cells are exact adjoints.
fn symmetrize(cells: &mut [DMatrix<f64>], n: usize) {
    for g in 0..n {
        for h in g..n {
            let avg = (&cells[g * n + h] + cells[h * n + g].transpose()) * 0.5;
            cells[h * n + g] = avg.transpose();
            cells[g * n + h] = avg;
        }
    }
}

impl CovSurface {
    pub fn mean(&self) -> &Arc<MeanCurve> {
        &self.mean
    }

    pub fn grid(&self) -> &[f64] {
        self.mean.grid()
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn diagnostics(&self) -> &[CellDiagnostics] {
        &self.diagnostics
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn filled_cells(&self) -> usize {
        self.diagnostics
            .iter()
            .filter(|d| matches!(d.status, CellStatus::Filled { .. }))
            .count()
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Coefficients of cell (g, h), target × source in frames h and g.
    pub fn coeffs(&self, g: usize, h: usize) -> &DMatrix<f64> {
        &self.cells[g * self.len() + h]
    }

    pub fn cell(&self, g: usize, h: usize) -> FiberElement {
        let f = self.mean.frames();
        FiberElement::new(f[g].clone(), f[h].clone(), self.coeffs(g, h).clone()).expect("shapes agree")
    }

    /// Bilinear interpolation of the four bracketing cells after carrying
    /// them into the frames of [`MeanCurve::frame_at`] at both times.
    pub fn coeffs_at(&self, bs: Bracket, bt: Bracket) -> DMatrix<f64> {
        let d = self.mean.geometry().dim();
        let mut out = DMatrix::zeros(d, d);
        let corners = |b: Bracket| [(b.g, 1.0 - b.alpha, false), (b.g + 1, b.alpha, true)];
        for (g, wg, g_next) in corners(bs) {
            if wg == 0.0 {
                continue;
            }
            for (h, wh, h_next) in corners(bt) {
                if wh == 0.0 {
                    continue;
                }
                let m = self.coeffs(g, h);
                let m = match (g_next, h_next) {
                    (false, false) => m.clone(),
                    (true, false) => m * self.mean.connection(bs.g),
                    (false, true) => self.mean.connection(bt.g).transpose() * m,
                    (true, true) => self.mean.connection(bt.g).transpose() * m * self.mean.connection(bs.g),
                };
                out += m * (wg * wh);
            }
        }
        out
    }

    /// 𝒞̂(s, t) at arbitrary times in the grid range.
    pub fn eval(&self, s: f64, t: f64) -> Result<FiberElement> {
        let (bs, bt) = (self.mean.locate(s)?, self.mean.locate(t)?);
        let ps = self.mean.point_at(bs)?;
        let pt = self.mean.point_at(bt)?;
        let fs = Arc::new(self.mean.frame_at(bs, &ps)?);
        let ft = Arc::new(self.mean.frame_at(bt, &pt)?);
        FiberElement::new(fs, ft, self.coeffs_at(bs, bt))
    }

    /// Largest Frobenius change over the diagonal cells when negative
    /// eigenvalues of 𝒞̂(t, t) are clamped at zero.
    pub fn diagonal_clamp_change(&self) -> f64 {
        (0..self.len())
            .map(|g| {
                let e = self.coeffs(g, g).clone().symmetric_eigen();
                e.eigenvalues.iter().map(|l| l.min(0.0).powi(2)).sum::<f64>().sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// CSV of ‖𝒞̂(s,t)‖_G over the grid, columns `s,t,g_norm`.
    pub fn write_g_norm_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["s", "t", "g_norm"])?;
        let grid = self.grid();
        for g in 0..self.len() {
            for h in 0..self.len() {
                out.serialize((grid[g], grid[h], self.coeffs(g, h).norm()))?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// The record form; frames are not repeated and come from the mean curve.
    pub fn to_record(&self) -> CovSurfaceRecord {
        let n = self.len();
        CovSurfaceRecord {
            geometry: self.mean.geometry().descriptor(),
            grid: self.grid().to_vec(),
            bandwidth: self.bandwidth,
            kernel: self.kernel,
            frames: "mean-curve".into(),
            mean_bandwidth: self.mean.bandwidth(),
            cells: (0..n)
                .map(|g| (0..n).map(|h| crate::bundle::rows(self.coeffs(g, h))).collect())
                .collect(),
            diagnostics: self.diagnostics.clone(),
            warnings: self.warnings.clone(),
        }
    }

    /// A surface from given cells, row-major in (g, h), against the mean
    /// curve's frames. No fitting diagnostics are attached.
    pub fn from_cells(mean: MeanCurve, cells: Vec<DMatrix<f64>>, bandwidth: f64, kernel: Kernel) -> Result<Self> {
        let n = mean.len();
        let d = mean.geometry().dim();
        if cells.len() != n * n {
            return Err(Error::Invalid(format!("expected {} cells, got {}", n * n, cells.len())));
        }
        if let Some(c) = cells.iter().find(|c| c.shape() != (d, d)) {
            return Err(Error::ShapeMismatch {
                expected: (d, d),
                actual: c.shape(),
            });
        }
        Ok(CovSurface {
            mean: Arc::new(mean),
            bandwidth,
            kernel,
            cells,
            diagnostics: vec![
                CellDiagnostics {
                    pairs: 0,
                    rel_denominator: None,
                    status: CellStatus::Fitted,
                };
                n * n
            ],
            warnings: Vec::new(),
        })
    }

    /// Rebuilds a surface from its record and the mean curve it refers to.
    pub fn from_record(r: CovSurfaceRecord, mean: MeanCurve) -> Result<Self> {
        let n = mean.len();
        if r.grid != mean.grid() || r.cells.len() != n {
            return Err(Error::Invalid("covariance grid does not match the mean curve".into()));
        }
        if r.geometry != mean.geometry().descriptor() {
            return Err(Error::Invalid(format!(
                "covariance on {} but mean curve on {}",
                r.geometry,
                mean.geometry()
            )));
        }
        let d = mean.geometry().dim();
        let mut cells = Vec::with_capacity(n * n);
        for row in &r.cells {
            if row.len() != n {
                return Err(Error::Invalid("covariance cell rows must match the grid".into()));
            }
            for c in row {
                let m = crate::bundle::from_rows(c)?;
                if m.shape() != (d, d) {
                    return Err(Error::ShapeMismatch {
                        expected: (d, d),
                        actual: m.shape(),
                    });
                }
                cells.push(m);
            }
        }
        let diagnostics = if r.diagnostics.len() == n * n {
            r.diagnostics
        } else {
            vec![
                CellDiagnostics {
                    pairs: 0,
                    rel_denominator: None,
                    status: CellStatus::Fitted,
                };
                n * n
            ]
        };
        Ok(CovSurface {
            mean: Arc::new(mean),
            bandwidth: r.bandwidth,
            kernel: r.kernel,
            cells,
            diagnostics,
            warnings: r.warnings,
        })
    }
}

/// JSON form of a [`CovSurface`]. `cells[g][h]` are coefficient rows of
/// 𝒞̂(t_g, t_h) against the mean curve's frames at t_h (rows) and t_g (columns).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CovSurfaceRecord {
    pub geometry: String,
    pub grid: Vec<f64>,
    pub bandwidth: f64,
    #[serde(default)]
    pub kernel: Kernel,
    pub frames: String,
    pub mean_bandwidth: f64,
    pub cells: Vec<Vec<Vec<Vec<f64>>>>,
    #[serde(default)]
    pub diagnostics: Vec<CellDiagnostics>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// σ̂² and its value before flooring.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseVariance {
    pub sigma2: f64,
    pub raw: f64,
}

impl NoiseVariance {
    pub fn from_raw(raw: f64) -> Self {
        NoiseVariance {
            sigma2: raw.max(NOISE_FLOOR),
            raw,
        }
    }
}

/// σ̂² = ∑ᵢ∑ⱼ (n d mᵢ)⁻¹ tr{z_ij z_ijᵀ − 𝒞̂(T_ij, T_ij)}, floored.
pub fn noise_variance(data: &SparseDataset, mean: &MeanCurve, surface: &CovSurface) -> Result<NoiseVariance> {
    let logs = observation_logs(data, mean)?;
    Ok(noise_from_logs(data, mean, surface, &logs))
}

pub(crate) fn noise_from_logs(
    data: &SparseDataset,
    mean: &MeanCurve,
    surface: &CovSurface,
    logs: &[Vec<ObsLog>],
) -> NoiseVariance {
    let geom = mean.geometry();
    let n = data.n() as f64;
    let d = geom.dim() as f64;
    let raw: f64 = logs
        .iter()
        .map(|subj| {
            let w = 1.0 / (n * d * subj.len() as f64);
            subj.iter()
                .map(|o| {
                    // the trace is frame-free, so the metric norm stands in for ‖z‖²
                    let z2 = geom.inner(&o.base, &o.log, &o.log).expect("log at its own base");
                    w * (z2 - surface.coeffs_at(o.bracket, o.bracket).trace())
                })
                .sum::<f64>()
        })
        .sum();
    NoiseVariance::from_raw(raw)
}
