use std::collections::HashMap;
use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2};
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{SparseDataset, Subject, WeightScheme};
use crate::bundle::FiberElement;
use crate::error::{Error, Result};
use crate::geometry::{Frame, Geometry, Manifold, Point, SpdLogCholesky, Tangent};

/// Half-width of the uniform latent scores Z.
const Z_HALF: f64 = 0.1;
/// Var(Z) for Z ~ U(−0.1, 0.1).
const Z_VAR: f64 = Z_HALF * Z_HALF / 3.0;
/// Monte Carlo draws for the SNR numerator.
const SNR_DRAWS: usize = 1_000_000;
const SNR_SEED: u64 = 0x5eed_0f_5a7;

/// The three simulation designs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Design {
    #[serde(rename = "sphere")]
    Sphere,
    #[serde(rename = "spd-lc")]
    SpdLc,
    #[serde(rename = "spd-ai")]
    SpdAi,
}

/// Whether one noise scalar is shared by all perturbed coordinates of an
/// observation (the literal reading) or drawn independently per coordinate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    #[default]
    Shared,
    Independent,
}

impl std::fmt::Display for Design {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Design::Sphere => "sphere",
            Design::SpdLc => "spd-lc",
            Design::SpdAi => "spd-ai",
        })
    }
}

impl std::str::FromStr for Design {
    type Err = Error;
    /// Accepts the design name or the matching geometry descriptor.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sphere" | "sphere:2" => Ok(Design::Sphere),
            "spd-lc" | "spd-lc:2" => Ok(Design::SpdLc),
            "spd-ai" | "spd-ai:2" => Ok(Design::SpdAi),
            other => Err(Error::UnknownDesign(other.to_string())),
        }
    }
}

fn eigvecs() -> ([f64; 2], [f64; 2]) {
    let r3 = 3f64.sqrt() / 2.0;
    ([0.5, r3], [r3, -0.5])
}

fn outer2(u: [f64; 2], v: [f64; 2]) -> DMatrix<f64> {
    DMatrix::from_fn(2, 2, |i, j| u[i] * v[j])
}

impl Design {
    pub const ALL: [Design; 3] = [Design::Sphere, Design::SpdLc, Design::SpdAi];

    pub fn geometry(self) -> Geometry {
        match self {
            Design::Sphere => Geometry::sphere(2),
            Design::SpdLc => Geometry::spd_log_cholesky(2),
            Design::SpdAi => Geometry::spd_affine(2),
        }
    }

    /// Number of latent scores Z per subject.
    pub fn factors(self) -> usize {
        match self {
            Design::Sphere | Design::SpdAi => 2,
            Design::SpdLc => 3,
        }
    }

    /// Frame coordinates that receive noise; E‖ε‖² = noise_dims·a²/3.
    pub fn noise_dims(self) -> usize {
        self.factors()
    }

    pub fn mean(self, t: f64) -> Point {
        match self {
            Design::Sphere => {
                let a = FRAC_PI_2 * t;
                Point::from_vector(&[a.cos(), a.sin(), 0.0])
            }
            Design::SpdLc => {
                let e = t.exp();
                let l = DMatrix::from_row_slice(2, 2, &[e, 0.0, t, e]);
                Point::new(&l * l.transpose())
            }
            Design::SpdAi => Point::new(DMatrix::identity(2, 2) * t.exp()),
        }
    }

    /// The orthonormal frame at μ(t) in which the covariance is diagonal.
    /// It is parallel along μ in all three designs.
    pub fn frame(self, t: f64) -> Frame {
        let p = self.mean(t);
        let vectors = match self {
            Design::Sphere => {
                let a = FRAC_PI_2 * t;
                vec![
                    Tangent::from_vector(&[-a.sin(), a.cos(), 0.0]),
                    Tangent::from_vector(&[0.0, 0.0, 1.0]),
                ]
            }
            Design::SpdLc => {
                let lc = SpdLogCholesky::new(2);
                [(0, 0), (1, 1), (1, 0)]
                    .iter()
                    .map(|&(i, j)| {
                        let mut e = DMatrix::zeros(2, 2);
                        e[(i, j)] = 1.0;
                        lc.tangent_from_coords(&p, &e).expect("mean is SPD")
                    })
                    .collect()
            }
            Design::SpdAi => {
                let (u1, u2) = eigvecs();
                let s = t.exp();
                let cross = (outer2(u1, u2) + outer2(u2, u1)) * (FRAC_1_SQRT_2 * s);
                vec![
                    Tangent::new(outer2(u1, u1) * s),
                    Tangent::new(outer2(u2, u2) * s),
                    Tangent::new(cross),
                ]
            }
        };
        Frame::new(p, vectors).expect("design frames are independent")
    }

    /// Point at time t whose log at μ(t) has coefficients `c` in [`Design::frame`]
    /// (the first `factors()` coordinates; the rest are zero).
    pub fn point_from_coeffs(self, t: f64, c: &[f64]) -> Point {
        match self {
            Design::Sphere => {
                let g = self.geometry();
                let f = self.frame(t);
                let v = f.combine(&nalgebra::DVector::from_column_slice(&[c[0], c[1]]));
                g.exp(f.base(), &v).expect("perturbation is far below pi")
            }
            Design::SpdLc => {
                let l = DMatrix::from_row_slice(
                    2,
                    2,
                    &[(t + c[0]).exp(), 0.0, t + c[2], (t + c[1]).exp()],
                );
                Point::new(&l * l.transpose())
            }
            Design::SpdAi => {
                let (u1, u2) = eigvecs();
                Point::new(outer2(u1, u1) * (t + c[0]).exp() + outer2(u2, u2) * (t + c[1]).exp())
            }
        }
    }

    /// Diagonal of the covariance coefficient matrix at (s,t), divided by st.
    fn cov_pattern(self) -> Vec<f64> {
        match self {
            Design::Sphere => vec![Z_VAR; 2],
            Design::SpdLc => vec![Z_VAR; 3],
            Design::SpdAi => vec![Z_VAR, Z_VAR, 0.0],
        }
    }

    /// Monte Carlo estimate of E∫‖Log_{μ(t)}X(t)‖² dt through the geometry.
    pub fn signal_energy(self) -> f64 {
        static CACHE: OnceLock<Mutex<HashMap<Design, f64>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        if let Some(v) = cache.lock().expect("cache lock").get(&self) {
            return *v;
        }
        let g = self.geometry();
        let k = self.factors();
        let mut rng = ChaCha8Rng::seed_from_u64(SNR_SEED);
        let mut acc = 0.0;
        let mut z = vec![0.0; 3];
        for _ in 0..SNR_DRAWS {
            let t: f64 = rng.random();
            for zk in z.iter_mut().take(k) {
                *zk = t * rng.random_range(-Z_HALF..Z_HALF);
            }
            let x = self.point_from_coeffs(t, &z);
            let v = g.log(&self.mean(t), &x).expect("design points are valid");
            acc += g.inner(&self.mean(t), &v, &v).expect("valid");
        }
        let v = acc / SNR_DRAWS as f64;
        cache.lock().expect("cache lock").insert(self, v);
        v
    }
}

/// Noise half-width a making the signal-to-noise ratio equal `target`: the
/// numerator by Monte Carlo, the denominator E∫‖ε‖²dt = noise_dims·a²/3.
pub fn snr_calibrate(design: Design, target: f64) -> Result<f64> {
    if !(target > 0.0) || !target.is_finite() {
        return Err(Error::Invalid(format!("snr must be positive, got {target}")));
    }
    let num = design.signal_energy();
    Ok((num / (target * design.noise_dims() as f64 / 3.0)).sqrt())
}

/// Everything needed to draw one simulated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub design: Design,
    pub n: usize,
    pub m: usize,
    pub snr: f64,
    pub seed: u64,
    #[serde(default)]
    pub noise: NoiseMode,
    /// Overrides the calibrated noise half-width (0 gives noiseless data).
    #[serde(default)]
    pub noise_half_width: Option<f64>,
}

impl SimSpec {
    pub fn new(design: Design, n: usize, m: usize, snr: f64, seed: u64) -> Self {
        SimSpec {
            design,
            n,
            m,
            snr,
            seed,
            noise: NoiseMode::Shared,
            noise_half_width: None,
        }
    }

    pub fn generate(&self) -> Result<(SparseDataset, SimTruth)> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::Invalid("n and m must be at least 1".into()));
        }
        let a = match self.noise_half_width {
            Some(a) if a >= 0.0 => a,
            Some(a) => return Err(Error::Invalid(format!("negative noise half-width {a}"))),
            None => snr_calibrate(self.design, self.snr)?,
        };
        let poisson = Poisson::new(self.m as f64).map_err(|e| Error::Invalid(e.to_string()))?;
        let width = (self.n - 1).to_string().len().max(3);
        let draws: Vec<(Subject, Vec<f64>)> = (0..self.n)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(i as u64);
                self.draw_subject(i, width, a, &poisson, &mut rng)
            })
            .collect();
        let (subjects, latent): (Vec<_>, Vec<_>) = draws.into_iter().unzip();
        let data = SparseDataset::new(
            self.design.geometry(),
            [0.0, 1.0],
            subjects,
            WeightScheme::ObsEqual,
        )?;
        let truth = SimTruth {
            design: self.design,
            noise_half_width: a,
            snr: self.snr,
            latent,
        };
        Ok((data, truth))
    }

    fn draw_subject(
        &self,
        i: usize,
        width: usize,
        a: f64,
        poisson: &Poisson<f64>,
        rng: &mut ChaCha8Rng,
    ) -> (Subject, Vec<f64>) {
        let k = self.design.factors();
        let m = poisson.sample(rng) as usize + 2;
        let z: Vec<f64> = (0..k).map(|_| rng.random_range(-Z_HALF..Z_HALF)).collect();
        let mut times: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
        times.sort_by(f64::total_cmp);
        let mut c = vec![0.0; 3];
        let points = times
            .iter()
            .map(|&t| {
                let shared = uniform(rng, a);
                for (kk, ck) in c.iter_mut().enumerate().take(k) {
                    let eps = match self.noise {
                        NoiseMode::Shared => shared,
                        NoiseMode::Independent if kk == 0 => shared,
                        NoiseMode::Independent => uniform(rng, a),
                    };
                    *ck = t * z[kk] + eps;
                }
                self.design.point_from_coeffs(t, &c)
            })
            .collect();
        let subject = Subject {
            id: format!("s{i:0width$}"),
            times,
            points,
        };
        (subject, z)
    }
}

fn uniform(rng: &mut ChaCha8Rng, a: f64) -> f64 {
    if a > 0.0 {
        rng.random_range(-a..a)
    } else {
        0.0
    }
}

/// Draws a dataset from one of the designs with the calibrated noise level.
pub fn simulate(design: Design, n: usize, m: usize, snr: f64, seed: u64) -> Result<(SparseDataset, SimTruth)> {
    SimSpec::new(design, n, m, snr, seed).generate()
}

/// Closed-form mean and covariance of a simulated process.
#[derive(Clone, Debug)]
pub struct SimTruth {
    pub design: Design,
    pub noise_half_width: f64,
    pub snr: f64,
    /// The latent scores Z of each subject, in subject order.
    pub latent: Vec<Vec<f64>>,
}

impl SimTruth {
    pub fn geometry(&self) -> Geometry {
        self.design.geometry()
    }

    pub fn mean(&self, t: f64) -> Point {
        self.design.mean(t)
    }

    pub fn frame(&self, t: f64) -> Arc<Frame> {
        Arc::new(self.design.frame(t))
    }

    /// 𝒞(s,t) = (st·Var Z) times the design's diagonal pattern, in the
    /// design frames at μ(s) and μ(t).
    pub fn cov(&self, s: f64, t: f64) -> FiberElement {
        self.cov_in(&self.frame(s), &self.frame(t), s, t)
    }

    /// As [`SimTruth::cov`] with the frames at μ(s), μ(t) supplied.
    pub fn cov_in(&self, fs: &Arc<Frame>, ft: &Arc<Frame>, s: f64, t: f64) -> FiberElement {
        let pat = self.design.cov_pattern();
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            pat.len(),
            pat.iter().map(|v| v * s * t),
        ));
        FiberElement::new(fs.clone(), ft.clone(), a).expect("pattern matches the frame size")
    }

    /// Noise second moment E‖ε‖² per observation.
    pub fn noise_energy(&self) -> f64 {
        self.design.noise_dims() as f64 * self.noise_half_width.powi(2) / 3.0
    }

    pub fn grid(&self, grid: &[f64]) -> TruthGrid {
        let frames: Vec<Arc<Frame>> = grid.iter().map(|&t| self.frame(t)).collect();
        let cov = grid
            .iter()
            .enumerate()
            .map(|(g, &s)| {
                grid.iter()
                    .enumerate()
                    .map(|(h, &t)| crate::bundle::rows(self.cov_in(&frames[g], &frames[h], s, t).coeffs()))
                    .collect()
            })
            .collect();
        TruthGrid {
            design: self.design,
            noise_half_width: self.noise_half_width,
            snr: self.snr,
            grid: grid.to_vec(),
            means: grid.iter().map(|&t| self.mean(t)).collect(),
            frames: frames.iter().map(|f| (**f).clone()).collect(),
            cov,
        }
    }
}

/// Grid evaluation of the true mean and covariance, for export.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TruthGrid {
    pub design: Design,
    pub noise_half_width: f64,
    pub snr: f64,
    pub grid: Vec<f64>,
    pub means: Vec<Point>,
    pub frames: Vec<Frame>,
    /// cov[g][h] is the coefficient matrix of 𝒞(t_g, t_h) in frames[g] → frames[h].
    pub cov: Vec<Vec<Vec<Vec<f64>>>>,
}

impl TruthGrid {
    pub fn to_truth(&self) -> SimTruth {
        SimTruth {
            design: self.design,
            noise_half_width: self.noise_half_width,
            snr: self.snr,
            latent: Vec::new(),
        }
    }
}
