//! Local-linear Fréchet mean of sparse manifold-valued curves.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bundle::transport_matrix;
use crate::error::{Error, Result};
use crate::geometry::{Frame, Geometry, Manifold, Point, Tangent};
use crate::kernel::Kernel;
use crate::sampling::SparseDataset;

const MAX_ITER: usize = 200;
const GRAD_TOL: f64 = 1e-10;
const MIN_STEP: f64 = 1e-6;
const SIGMA0_FLOOR: f64 = 1e-14;
/// A line search that stalls with the gradient below this (relative to ∑|w|)
/// counts as converged at working precision.
const STALL_TOL: f64 = 1e-7;

/// One observation's weight at a target time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub subject: usize,
    pub obs: usize,
    /// Time offset T_ij − t.
    pub offset: f64,
    /// ŵ(T_ij, t, h), without the subject weight λᵢ.
    pub w: f64,
    /// λᵢ ŵ, the weight that enters the objective.
    pub effective: f64,
}

/// Local-linear weights at one time, with the moments û₀, û₁, û₂.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocalWeights {
    pub t: f64,
    pub h: f64,
    pub u: [f64; 3],
    pub sigma0_sq: f64,
    /// Observations with nonzero kernel weight only.
    pub entries: Vec<WeightEntry>,
}

impl LocalWeights {
    /// ∑ᵢ λᵢ ∑ⱼ ŵ(T_ij), which is one by construction.
    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.effective).sum()
    }
}

pub fn local_weights(data: &SparseDataset, t: f64, h: f64) -> Result<LocalWeights> {
    local_weights_with(data, t, h, Kernel::default())
}

pub fn local_weights_with(data: &SparseDataset, t: f64, h: f64, kernel: Kernel) -> Result<LocalWeights> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Invalid(format!("bandwidth must be positive, got {h}")));
    }
    let mut raw = Vec::new();
    let mut u = [0.0; 3];
    let mut distinct: Vec<f64> = Vec::new();
    for (i, s) in data.subjects().iter().enumerate() {
        let lam = data.lambda(i);
        for (j, &tij) in s.times.iter().enumerate() {
            let x = tij - t;
            let k = kernel.scaled(x, h);
            if k == 0.0 {
                continue;
            }
            u[0] += lam * k;
            u[1] += lam * k * x;
            u[2] += lam * k * x * x;
            raw.push((i, j, x, k, lam));
            if distinct.len() < 2 && !distinct.contains(&tij) {
                distinct.push(tij);
            }
        }
    }
    if distinct.is_empty() {
        return Err(Error::EmptyWindow { t, h, found: 0 });
    }
    // a single distinct time makes σ̂₀² vanish analytically
    let sigma0_sq = u[0] * u[2] - u[1] * u[1];
    if sigma0_sq <= SIGMA0_FLOOR || distinct.len() < 2 {
        return Err(Error::DegenerateWindow { t, sigma0_sq });
    }
    let entries = raw
        .into_iter()
        .map(|(i, j, x, k, lam)| {
            let w = k * (u[2] - u[1] * x) / sigma0_sq;
            WeightEntry {
                subject: i,
                obs: j,
                offset: x,
                w,
                effective: lam * w,
            }
        })
        .collect();
    Ok(LocalWeights {
        t,
        h,
        u,
        sigma0_sq,
        entries,
    })
}

/// Outcome of a weighted Fréchet minimization.
#[derive(Clone, Debug)]
pub struct FrechetResult {
    pub point: Point,
    pub iterations: usize,
    pub grad_norm: f64,
    pub objective: f64,
    /// False when the line search stalled at working precision before the
    /// gradient reached its tolerance.
    pub converged: bool,
}

fn objective_and_gradient<M: Manifold + ?Sized>(
    geom: &M,
    y: &Point,
    points: &[&Point],
    weights: &[f64],
) -> Result<(f64, f64, Tangent)> {
    let logs = geom.log_many(y, points)?;
    let mut grad = Tangent::zeros(y.shape());
    let mut f = 0.0;
    let mut scale = 0.0;
    for (l, &w) in logs.iter().zip(weights) {
        let d2 = geom.inner(y, l, l)?;
        f += w * d2;
        scale += w.abs() * d2;
        grad.axpy(w, l);
    }
    Ok((f, scale, grad))
}

/// Minimizes ∑ wᵢ d²(y, xᵢ) by Riemannian gradient descent with backtracking.
///
/// When ∑wᵢ > 0 the step is ∑wᵢ Log_y xᵢ / ∑wᵢ, which is exact in one
/// iteration on flat geometries; otherwise the gradient is scaled by ∑|wᵢ|.
pub fn frechet_minimize<M: Manifold + ?Sized>(
    geom: &M,
    points: &[&Point],
    weights: &[f64],
    init: &Point,
) -> Result<FrechetResult> {
    if points.len() != weights.len() {
        return Err(Error::Invalid(format!(
            "{} points but {} weights",
            points.len(),
            weights.len()
        )));
    }
    let abs_sum: f64 = weights.iter().map(|w| w.abs()).sum();
    if points.is_empty() || abs_sum == 0.0 {
        return Err(Error::Invalid("all Fréchet weights are zero".into()));
    }
    geom.validate_point(init)?;
    let sum: f64 = weights.iter().sum();
    let step_scale = if sum > 0.0 { 1.0 / sum } else { 1.0 / abs_sum };

    let mut y = init.clone();
    let (mut f, mut scale, mut grad) = objective_and_gradient(geom, &y, points, weights)?;
    let mut gn = geom.norm(&y, &grad)?;
    for iter in 0..MAX_ITER {
        if gn <= GRAD_TOL * abs_sum {
            return Ok(FrechetResult {
                point: y,
                iterations: iter,
                grad_norm: gn,
                objective: f,
                converged: true,
            });
        }
        let step = grad.scale(step_scale);
        let slack = 8.0 * f64::EPSILON * scale.max(f64::MIN_POSITIVE);
        let mut tau = 1.0;
        let mut accepted = None;
        while tau >= MIN_STEP {
            if let Ok(trial) = geom.exp(&y, &step.scale(tau)) {
                if let Ok(next) = objective_and_gradient(geom, &trial, points, weights) {
                    if next.0 <= f + slack {
                        accepted = Some((trial, next));
                        break;
                    }
                }
            }
            tau *= 0.5;
        }
        match accepted {
            Some((trial, (f2, s2, g2))) => {
                y = trial;
                f = f2;
                scale = s2;
                grad = g2;
                gn = geom.norm(&y, &grad)?;
            }
            None if gn <= STALL_TOL * abs_sum => {
                return Ok(FrechetResult {
                    point: y,
                    iterations: iter,
                    grad_norm: gn,
                    objective: f,
                    converged: false,
                });
            }
            None => {
                return Err(Error::NonConvergence {
                    iterations: iter,
                    grad_norm: gn,
                })
            }
        }
    }
    if gn <= GRAD_TOL * abs_sum {
        return Ok(FrechetResult {
            point: y,
            iterations: MAX_ITER,
            grad_norm: gn,
            objective: f,
            converged: true,
        });
    }
    Err(Error::NonConvergence {
        iterations: MAX_ITER,
        grad_norm: gn,
    })
}

/// `n` equispaced times covering the domain.
pub fn uniform_grid(domain: [f64; 2], n: usize) -> Vec<f64> {
    assert!(n >= 2, "grid needs at least two points");
    let step = (domain[1] - domain[0]) / (n - 1) as f64;
    (0..n)
        .map(|g| if g + 1 == n { domain[1] } else { domain[0] + g as f64 * step })
        .collect()
}

pub const DEFAULT_GRID: usize = 51;

/// Per-grid-point optimizer report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanDiagnostics {
    pub t: f64,
    pub window: usize,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanOptions {
    pub kernel: Kernel,
}

/// Fitted mean on a grid with a frame field along it.
///
/// `frames[g]` is an orthonormal frame at `points[g]`; `connections[g]`
/// holds the coefficients in `frames[g+1]` of `frames[g]` transported along
/// the connecting geodesic. The default frame field is the transport of the
/// first frame, so these are identities until frames are rotated.
#[derive(Clone, Debug)]
pub struct MeanCurve {
    geometry: Geometry,
    grid: Vec<f64>,
    points: Vec<Point>,
    frames: Vec<Arc<Frame>>,
    connections: Vec<DMatrix<f64>>,
    bandwidth: f64,
    kernel: Kernel,
    diagnostics: Vec<MeanDiagnostics>,
}

/// Where an off-grid time falls: between `g` and `g+1` at fraction `alpha`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bracket {
    pub g: usize,
    pub alpha: f64,
}

impl MeanCurve {
    /// Builds a curve from fitted points, transporting the default frame at
    /// the first point along the grid.
    pub fn from_points(
        geometry: Geometry,
        grid: Vec<f64>,
        points: Vec<Point>,
        bandwidth: f64,
        kernel: Kernel,
        diagnostics: Vec<MeanDiagnostics>,
    ) -> Result<Self> {
        if grid.len() != points.len() || grid.len() < 2 {
            return Err(Error::Invalid("grid and points must match, with at least two".into()));
        }
        if grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Invalid("grid must be strictly increasing".into()));
        }
        let mut frames = Vec::with_capacity(points.len());
        frames.push(Arc::new(geometry.onb(&points[0], None)?));
        for g in 1..points.len() {
            let f = frames[g - 1]
                .transport(&geometry, &points[g])
                .map_err(|e| e.at_time(grid[g]))?;
            frames.push(Arc::new(f));
        }
        Self::with_frames(geometry, grid, points, frames, bandwidth, kernel, diagnostics)
    }

    fn with_frames(
        geometry: Geometry,
        grid: Vec<f64>,
        points: Vec<Point>,
        frames: Vec<Arc<Frame>>,
        bandwidth: f64,
        kernel: Kernel,
        diagnostics: Vec<MeanDiagnostics>,
    ) -> Result<Self> {
        let connections = frames
            .windows(2)
            .zip(&grid[1..])
            .map(|(w, &t)| transport_matrix(&geometry, &w[0], &w[1]).map_err(|e| e.at_time(t)))
            .collect::<Result<Vec<_>>>()?;
        Ok(MeanCurve {
            geometry,
            grid,
            points,
            frames,
            connections,
            bandwidth,
            kernel,
            diagnostics,
        })
    }

    /// The same curve with `frames[g]` rotated by `rotations[g]`.
    pub fn reframed(&self, rotations: &[DMatrix<f64>]) -> Result<Self> {
        if rotations.len() != self.frames.len() {
            return Err(Error::Invalid("one rotation per grid point required".into()));
        }
        let frames = self
            .frames
            .iter()
            .zip(rotations)
            .map(|(f, o)| f.rotated(o).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        Self::with_frames(
            self.geometry.clone(),
            self.grid.clone(),
            self.points.clone(),
            frames,
            self.bandwidth,
            self.kernel,
            self.diagnostics.clone(),
        )
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn frames(&self) -> &[Arc<Frame>] {
        &self.frames
    }

    pub fn connection(&self, g: usize) -> &DMatrix<f64> {
        &self.connections[g]
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn diagnostics(&self) -> &[MeanDiagnostics] {
        &self.diagnostics
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Bracketing grid interval of `t`. Grid points map to alpha = 0, except
    /// the last, which maps to the final interval with alpha = 1.
    pub fn locate(&self, t: f64) -> Result<Bracket> {
        let n = self.grid.len();
        let (lo, hi) = (self.grid[0], self.grid[n - 1]);
        let slack = 1e-12 * (hi - lo);
        if !(t >= lo - slack && t <= hi + slack) {
            return Err(Error::Invalid(format!(
                "time {t} outside the grid range [{lo}, {hi}]"
            )));
        }
        let t = t.clamp(lo, hi);
        let g = self.grid.partition_point(|&x| x <= t).saturating_sub(1).min(n - 2);
        let alpha = ((t - self.grid[g]) / (self.grid[g + 1] - self.grid[g])).clamp(0.0, 1.0);
        Ok(Bracket { g, alpha })
    }

    /// Point and frame at an arbitrary time in the grid range by geodesic
    /// interpolation; exact at grid points.
    pub fn eval(&self, t: f64) -> Result<(Point, Frame)> {
        let b = self.locate(t)?;
        if b.alpha == 0.0 {
            return Ok((self.points[b.g].clone(), (*self.frames[b.g]).clone()));
        }
        if b.alpha == 1.0 {
            return Ok((self.points[b.g + 1].clone(), (*self.frames[b.g + 1]).clone()));
        }
        let p = self.point_at(b)?;
        let f = self.frames[b.g].transport(&self.geometry, &p)?;
        Ok((p, f))
    }

    /// Interpolated point only.
    pub fn point_at(&self, b: Bracket) -> Result<Point> {
        let (p0, p1) = (&self.points[b.g], &self.points[b.g + 1]);
        if b.alpha == 0.0 {
            return Ok(p0.clone());
        }
        if b.alpha == 1.0 {
            return Ok(p1.clone());
        }
        let v = self.geometry.log(p0, p1)?;
        self.geometry.exp(p0, &v.scale(b.alpha))
    }

    /// Frame at the bracket: `frames[g]` transported by the fraction alpha.
    /// Coefficients against it mix grid quantities by [`MeanCurve::blend`].
    pub fn frame_at(&self, b: Bracket, at: &Point) -> Result<Frame> {
        if b.alpha == 0.0 {
            return Ok((*self.frames[b.g]).clone());
        }
        self.frames[b.g].transport(&self.geometry, at)
    }

    /// Interpolates tangent coefficients given at grid points g and g+1 in
    /// their own frames, returning coefficients in the frame of
    /// [`MeanCurve::frame_at`].
    pub fn blend(&self, b: Bracket, at_g: &DVector<f64>, at_next: &DVector<f64>) -> DVector<f64> {
        if b.alpha == 0.0 {
            return at_g.clone();
        }
        at_g * (1.0 - b.alpha) + self.connections[b.g].transpose() * at_next * b.alpha
    }
}

pub fn eval_mean(curve: &MeanCurve, t: f64) -> Result<(Point, Frame)> {
    curve.eval(t)
}

/// Fits μ̂ on `grid` with bandwidth `h`, warm-starting each grid point at the
/// previous solution.
pub fn fit_mean(data: &SparseDataset, h: f64, grid: &[f64]) -> Result<MeanCurve> {
    fit_mean_with(data, h, grid, &MeanOptions::default())
}

pub fn fit_mean_with(data: &SparseDataset, h: f64, grid: &[f64], opts: &MeanOptions) -> Result<MeanCurve> {
    let geom = data.geometry();
    let dom = data.domain();
    if grid.len() < 2 {
        return Err(Error::Invalid("mean grid needs at least two points".into()));
    }
    if grid.iter().any(|&t| t < dom[0] || t > dom[1]) {
        return Err(Error::Invalid(format!("grid leaves the domain {dom:?}")));
    }
    let mut points: Vec<Point> = Vec::with_capacity(grid.len());
    let mut diags = Vec::with_capacity(grid.len());
    for &t in grid {
        let lw = local_weights_with(data, t, h, opts.kernel).map_err(|e| e.at_time(t))?;
        let pts: Vec<&Point> = lw
            .entries
            .iter()
            .map(|e| &data.subjects()[e.subject].points[e.obs])
            .collect();
        let ws: Vec<f64> = lw.entries.iter().map(|e| e.effective).collect();
        let init = match points.last() {
            Some(prev) => prev.clone(),
            None => kernel_mean(geom, data, &lw, opts.kernel, &pts).map_err(|e| e.at_time(t))?,
        };
        let res = frechet_minimize(geom, &pts, &ws, &init).map_err(|e| e.at_time(t))?;
        diags.push(MeanDiagnostics {
            t,
            window: pts.len(),
            iterations: res.iterations,
            grad_norm: res.grad_norm,
            converged: res.converged,
        });
        points.push(res.point);
    }
    MeanCurve::from_points(geom.clone(), grid.to_vec(), points, h, opts.kernel, diags)
}

/// Fréchet mean of the windowed observations under the nonnegative kernel
/// weights alone, started at the observation with the largest weight.
fn kernel_mean(geom: &Geometry, data: &SparseDataset, lw: &LocalWeights, kernel: Kernel, pts: &[&Point]) -> Result<Point> {
    let ws: Vec<f64> = lw
        .entries
        .iter()
        .map(|e| data.lambda(e.subject) * kernel.scaled(e.offset, lw.h))
        .collect();
    let best = ws
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(k, _)| k);
    frechet_minimize(geom, pts, &ws, pts[best]).map(|r| r.point)
}

#[derive(Serialize, Deserialize)]
struct MeanCurveRecord {
    geometry: Geometry,
    bandwidth: f64,
    #[serde(default)]
    kernel: Kernel,
    grid: Vec<f64>,
    points: Vec<Point>,
    frames: Vec<Frame>,
    #[serde(default)]
    diagnostics: Vec<MeanDiagnostics>,
}

impl Serialize for MeanCurve {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MeanCurveRecord {
            geometry: self.geometry.clone(),
            bandwidth: self.bandwidth,
            kernel: self.kernel,
            grid: self.grid.clone(),
            points: self.points.clone(),
            frames: self.frames.iter().map(|f| (**f).clone()).collect(),
            diagnostics: self.diagnostics.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for MeanCurve {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = MeanCurveRecord::deserialize(d)?;
        if r.frames.len() != r.points.len() || r.grid.len() != r.points.len() {
            return Err(serde::de::Error::custom("grid, points and frames must have equal length"));
        }
        MeanCurve::with_frames(
            r.geometry,
            r.grid,
            r.points,
            r.frames.into_iter().map(Arc::new).collect(),
            r.bandwidth,
            r.kernel,
            r.diagnostics,
        )
        .map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests;
