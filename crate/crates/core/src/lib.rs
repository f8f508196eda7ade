//! Intrinsic functional data analysis for sparse, noisy manifold-valued curves.

pub mod bandwidth;
pub mod bundle;
pub mod error;
pub mod experiment;
pub mod fpca;
pub mod geometry;
pub mod kernel;
pub mod mean;
pub mod metrics;
pub mod sampling;
pub mod smoother;

pub use bundle::FiberElement;
pub use error::{Error, Result};
pub use fpca::{blup_scores, blup_scores_with, discretize_operator, eigenpairs, project_psd, BlupOptions, EigenSystem, Scores, SigmaSource};
pub use geometry::{Frame, Geometry, Manifold, Point, Tangent};
pub use kernel::Kernel;
pub use mean::{fit_mean, MeanCurve};
pub use smoother::{fit_cov_surface, noise_variance, CovSurface, NoiseVariance};
pub use sampling::{Design, SimTruth, SparseDataset, WeightScheme};
