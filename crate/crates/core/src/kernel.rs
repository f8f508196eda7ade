use serde::{Deserialize, Serialize};

/// ∫₋₁¹ exp(−4.5x²) dx, so the truncated Gaussian integrates to one.
const GAUSS_NORM: f64 = 0.833_286_963_161_031_7;

/// Smoothing kernels supported on [−1, 1].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kernel {
    #[default]
    Epanechnikov,
    /// Gaussian with standard deviation 1/3, truncated to [−1, 1] and renormalized.
    TruncatedGaussian,
}

impl Kernel {
    /// K(x); zero outside the open interval (−1, 1).
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        if x.abs() >= 1.0 {
            return 0.0;
        }
        match self {
            Kernel::Epanechnikov => 0.75 * (1.0 - x * x),
            Kernel::TruncatedGaussian => (-4.5 * x * x).exp() / GAUSS_NORM,
        }
    }

    /// K_h(u) = K(u/h)/h.
    #[inline]
    pub fn scaled(self, u: f64, h: f64) -> f64 {
        self.eval(u / h) / h
    }
}
