//! Monte Carlo runs: simulate, fit, score, aggregate.

use std::io::Write;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandwidth::{select_cov, select_mean, BandwidthGrid, CvOptions, SelectionMethod, DEFAULT_FOLDS};
use crate::error::{Error, Result};
use crate::kernel::Kernel;
use crate::mean::{fit_mean_with, uniform_grid, MeanOptions, DEFAULT_GRID};
use crate::metrics::cov_errors;
use crate::sampling::{Design, NoiseMode, SimSpec, WeightScheme};
use crate::smoother::{fit_cov_surface_with, CovOptions};

/// Share of failed replications above which a run errors.
pub const MAX_FAILED_REPS: f64 = 0.05;
/// Mean-curve grid used inside the bandwidth search.
pub const SEARCH_GRID: usize = 26;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum BandwidthPolicy {
    Fixed { h_mu: f64, h_cov: f64 },
    Cv,
    Gcv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub design: Design,
    pub n: usize,
    pub m: usize,
    pub reps: usize,
    pub snr: f64,
    pub seed: u64,
    pub grid: usize,
    pub bandwidth: BandwidthPolicy,
    pub folds: usize,
    pub kernel: Kernel,
    pub weights: WeightScheme,
    pub noise: NoiseMode,
    /// Record wall-clock seconds per rep; off keeps reports reproducible.
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            design: Design::Sphere,
            n: 100,
            m: 5,
            reps: 100,
            snr: 5.0,
            seed: 1,
            grid: DEFAULT_GRID,
            bandwidth: BandwidthPolicy::Cv,
            folds: DEFAULT_FOLDS,
            kernel: Kernel::default(),
            weights: WeightScheme::ObsEqual,
            noise: NoiseMode::default(),
            timing: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 || self.n < 2 || self.m == 0 {
            return Err(Error::Invalid("reps ≥ 1, n ≥ 2 and m ≥ 1 are required".into()));
        }
        if !(self.snr > 0.0) {
            return Err(Error::Invalid(format!("snr must be positive, got {}", self.snr)));
        }
        if self.grid < 2 {
            return Err(Error::Invalid("grid needs at least two points".into()));
        }
        if let BandwidthPolicy::Fixed { h_mu, h_cov } = self.bandwidth {
            if !(h_mu > 0.0 && h_cov > 0.0) {
                return Err(Error::Invalid("fixed bandwidths must be positive".into()));
            }
        }
        Ok(())
    }

    /// Seed of replication `rep`, a fixed function of the master seed.
    pub fn rep_seed(&self, rep: usize) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(rep as u64 + 1);
        rng.next_u64()
    }
}

/// One replication's outcome. Errors are fractions; the CSV shows percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepResult {
    pub rep: usize,
    pub rmuie: f64,
    pub rrmise: f64,
    pub h_mu: f64,
    pub h_cov: f64,
    pub seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation across reps (zero for one rep).
    pub sd: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Summary {
        let n = xs.len() as f64;
        let mean = pairwise_sum(xs) / n;
        let dev: Vec<f64> = xs.iter().map(|x| (x - mean).powi(2)).collect();
        let sd = if xs.len() > 1 {
            (pairwise_sum(&dev) / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Summary { mean, sd }
    }
}

/// Recursive pairwise summation; the result depends only on the order of `xs`.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub reps: Vec<RepResult>,
    pub failures: Vec<(usize, String)>,
    /// Percent.
    pub rmuie: Summary,
    /// Percent.
    pub rrmise: Summary,
    pub seconds: Option<f64>,
}

impl ExperimentReport {
    pub fn from_reps(config: ExperimentConfig, reps: Vec<RepResult>, failures: Vec<(usize, String)>, seconds: Option<f64>) -> Self {
        let pct = |f: fn(&RepResult) -> f64| reps.iter().map(|r| 100.0 * f(r)).collect::<Vec<_>>();
        ExperimentReport {
            rmuie: Summary::of(&pct(|r| r.rmuie)),
            rrmise: Summary::of(&pct(|r| r.rrmise)),
            config,
            reps,
            failures,
            seconds,
        }
    }

    /// Per-rep CSV: `design,n,m,rep,rmuie,rrmise,h_mu,h_cov,seconds`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_rows(w, std::slice::from_ref(self))
    }
}

/// Several reports in one per-rep CSV.
pub fn write_rows<W: Write>(w: W, reports: &[ExperimentReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["design", "n", "m", "rep", "rmuie", "rrmise", "h_mu", "h_cov", "seconds"])?;
    for r in reports {
        let c = &r.config;
        for rep in &r.reps {
            out.write_record([
                c.design.to_string(),
                c.n.to_string(),
                c.m.to_string(),
                rep.rep.to_string(),
                (100.0 * rep.rmuie).to_string(),
                (100.0 * rep.rrmise).to_string(),
                rep.h_mu.to_string(),
                rep.h_cov.to_string(),
                rep.seconds.map_or(String::new(), |s| format!("{s:.3}")),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// One replication: simulate, choose bandwidths, fit, score.
pub fn run_rep(config: &ExperimentConfig, rep: usize) -> Result<RepResult> {
    let start = Instant::now();
    let spec = SimSpec {
        noise: config.noise,
        ..SimSpec::new(config.design, config.n, config.m, config.snr, config.rep_seed(rep))
    };
    let (data, truth) = spec.generate()?;
    let data = data.with_scheme(config.weights);
    let grid = uniform_grid(data.domain(), config.grid);
    let mopts = MeanOptions { kernel: config.kernel };
    let copts = CovOptions { kernel: config.kernel };
    let (h_mu, h_cov) = match config.bandwidth {
        BandwidthPolicy::Fixed { h_mu, h_cov } => (h_mu, h_cov),
        BandwidthPolicy::Cv | BandwidthPolicy::Gcv => {
            let method = if config.bandwidth == BandwidthPolicy::Cv {
                SelectionMethod::Cv
            } else {
                SelectionMethod::Gcv
            };
            let cands = BandwidthGrid::default_for(&data)?;
            let cv = CvOptions {
                folds: config.folds,
                seed: config.rep_seed(rep),
                kernel: config.kernel,
                mean_grid: SEARCH_GRID.min(config.grid),
            };
            let h_mu = select_mean(&data, &cands, method, &cv)?.selected;
            let coarse = fit_mean_with(&data, h_mu, &uniform_grid(data.domain(), cv.mean_grid), &mopts)?;
            let h_cov = select_cov(&data, &coarse, &cands, method, &cv)?.selected;
            (h_mu, h_cov)
        }
    };
    let mean = fit_mean_with(&data, h_mu, &grid, &mopts)?;
    let surface = fit_cov_surface_with(&data, &mean, h_cov, &copts)?;
    let e = cov_errors(&surface, &truth, None)?;
    Ok(RepResult {
        rep,
        rmuie: e.rmuie,
        rrmise: e.rrmise,
        h_mu,
        h_cov,
        seconds: config.timing.then(|| start.elapsed().as_secs_f64()),
    })
}

/// Runs every replication in parallel; the report does not depend on the
/// thread count unless timing is on.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let start = Instant::now();
    let outcomes: Vec<Result<RepResult>> = (0..config.reps).into_par_iter().map(|r| run_rep(config, r)).collect();
    let mut reps = Vec::with_capacity(config.reps);
    let mut failures = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(v) => reps.push(v),
            Err(e) => failures.push((r, e.to_string())),
        }
    }
    if failures.len() as f64 > MAX_FAILED_REPS * config.reps as f64 || reps.is_empty() {
        return Err(Error::TooManyReplicationFailures {
            failed: failures.len(),
            total: config.reps,
            first: failures.first().map(|f| format!("rep {}: {}", f.0, f.1)).unwrap_or_default(),
        });
    }
    let seconds = config.timing.then(|| start.elapsed().as_secs_f64());
    Ok(ExperimentReport::from_reps(config.clone(), reps, failures, seconds))
}

/// Every design × n ∈ {100, 200, 400} × m ∈ {5, 10, 20, 30}.
pub fn full_table(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let mut out = Vec::new();
    for design in Design::ALL {
        for n in [100, 200, 400] {
            for m in [5, 10, 20, 30] {
                out.push(ExperimentConfig {
                    design,
                    n,
                    m,
                    ..base.clone()
                });
            }
        }
    }
    out
}
