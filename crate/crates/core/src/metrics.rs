//! Relative covariance errors after carrying the estimate to the true fibers.
//!
//! The sup and the double integral are taken over an evaluation grid; by
//! default the surface's own grid, with trapezoid weights for the integral.

use nalgebra::DMatrix;

use crate::bundle::transport_matrix;
use crate::error::{Error, Result};
use crate::fpca::trapezoid_weights;
use crate::geometry::{Frame, Isometry, Point};
use crate::sampling::SimTruth;
use crate::smoother::CovSurface;

/// A reference mean and covariance to score against.
pub trait CovTruth {
    fn mean(&self, t: f64) -> Result<Point>;
    /// Orthonormal frame at `mean(t)`.
    fn frame(&self, t: f64) -> Result<Frame>;
    /// Coefficients of 𝒞(s, t) from `frame(s)` to `frame(t)`.
    fn cov_coeffs(&self, s: f64, t: f64) -> Result<DMatrix<f64>>;
}

impl CovTruth for SimTruth {
    fn mean(&self, t: f64) -> Result<Point> {
        Ok(SimTruth::mean(self, t))
    }

    fn frame(&self, t: f64) -> Result<Frame> {
        Ok(self.design.frame(t))
    }

    fn cov_coeffs(&self, s: f64, t: f64) -> Result<DMatrix<f64>> {
        Ok(self.cov(s, t).coeffs().clone())
    }
}

/// A truth pushed through an isometry. Frames are mapped by the
/// differential, so covariance coefficients are unchanged.
pub struct MappedTruth<'a, T: CovTruth + ?Sized> {
    pub inner: &'a T,
    pub iso: &'a Isometry,
}

impl<T: CovTruth + ?Sized> CovTruth for MappedTruth<'_, T> {
    fn mean(&self, t: f64) -> Result<Point> {
        self.iso.apply_point(&self.inner.mean(t)?)
    }

    fn frame(&self, t: f64) -> Result<Frame> {
        self.iso.apply_frame(&self.inner.frame(t)?)
    }

    fn cov_coeffs(&self, s: f64, t: f64) -> Result<DMatrix<f64>> {
        self.inner.cov_coeffs(s, t)
    }
}

/// rMUIE and rRMISE of one fit, as fractions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CovErrors {
    pub rmuie: f64,
    pub rrmise: f64,
}

/// Both errors on `eval_grid`, or on the surface grid when `None`.
pub fn cov_errors(surface: &CovSurface, truth: &dyn CovTruth, eval_grid: Option<&[f64]>) -> Result<CovErrors> {
    let mean = surface.mean();
    let geom = mean.geometry();
    let grid = eval_grid.unwrap_or(surface.grid());
    if grid.len() < 2 {
        return Err(Error::Invalid("evaluation grid needs at least two points".into()));
    }
    // per evaluation time: bracket and the map from the fitted frame there
    // to the true frame
    let mut brackets = Vec::with_capacity(grid.len());
    let mut moves = Vec::with_capacity(grid.len());
    for &t in grid {
        let b = mean.locate(t)?;
        let p = mean.point_at(b)?;
        let fitted = mean.frame_at(b, &p)?;
        let target = truth.frame(t)?;
        let target_mean = truth.mean(t)?;
        if target.base().max_abs_diff(&target_mean) > 1e-8 {
            return Err(Error::Invalid(format!("truth frame at t={t} is not based at the truth mean")));
        }
        moves.push(transport_matrix(geom, &fitted, &target).map_err(|e| e.at_time(t))?);
        brackets.push(b);
    }
    let w = trapezoid_weights(grid);
    let (mut sup_err, mut sup_true, mut int_err, mut int_true) = (0.0f64, 0.0f64, 0.0, 0.0);
    for (g, &s) in grid.iter().enumerate() {
        for (h, &t) in grid.iter().enumerate() {
            let est = &moves[h] * surface.coeffs_at(brackets[g], brackets[h]) * moves[g].transpose();
            let c = truth.cov_coeffs(s, t)?;
            let e2 = (est - &c).norm_squared();
            let c2 = c.norm_squared();
            sup_err = sup_err.max(e2.sqrt());
            sup_true = sup_true.max(c2.sqrt());
            int_err += w[g] * w[h] * e2;
            int_true += w[g] * w[h] * c2;
        }
    }
    if !(sup_true > 0.0) {
        return Err(Error::Invalid("true covariance is identically zero".into()));
    }
    Ok(CovErrors {
        rmuie: sup_err / sup_true,
        rrmise: (int_err / int_true).sqrt(),
    })
}

pub fn rmuie(surface: &CovSurface, truth: &dyn CovTruth) -> Result<f64> {
    Ok(cov_errors(surface, truth, None)?.rmuie)
}

pub fn rrmise(surface: &CovSurface, truth: &dyn CovTruth) -> Result<f64> {
    Ok(cov_errors(surface, truth, None)?.rrmise)
}

/// Relative change of both errors between the surface grid and a uniform
/// grid of `fine` points, the quadrature self-check.
pub fn refinement_change(surface: &CovSurface, truth: &dyn CovTruth, fine: usize) -> Result<(f64, f64)> {
    let coarse = cov_errors(surface, truth, None)?;
    let grid = surface.grid();
    let fine_grid = crate::mean::uniform_grid([grid[0], grid[grid.len() - 1]], fine);
    let f = cov_errors(surface, truth, Some(&fine_grid))?;
    Ok((
        (f.rmuie - coarse.rmuie).abs() / coarse.rmuie,
        (f.rrmise - coarse.rrmise).abs() / coarse.rrmise,
    ))
}
