//! Empirical Bayes variable selection for generalized linear models.
//!
//! Each putative predictor z_k enters the linear predictor through a latent
//! label γ_k ∈ {−1, 0, +1} and a random coefficient u_k ~ N(μ, σ²), so the
//! model has the same handful of parameters however many candidates there
//! are. Labels are fitted by generalized alternating maximization: an exact
//! M-step in θ for fixed labels, then a single-coordinate relabeling that
//! raises the complete-data log-likelihood, until no relabeling helps.
//!
//! The numerical core is generic over [`Scalar`] (`f32`/`f64`); the aliases
//! below fix it to `f64`, which is what the data pipeline, the simulation
//! harness and the CLI use.

pub mod data;
pub mod error;
pub mod family;
pub mod glm;
pub mod likelihood;
pub mod linalg;
pub mod model;
pub mod scalar;
pub mod screen;
pub mod selector;
pub mod sim;

pub use error::{Error, Result};
pub use family::{Family, FamilySpec, WorkingData};
pub use likelihood::{
    complete_loglik, delta_loglik, log_det_sigma, m_step, sigma_apply_inverse, CandidateScorer,
    ModelState, PrecisionCache,
};
pub use model::{Dataset, MixtureAssignment, Theta};
pub use scalar::Scalar;
pub use selector::{
    choose_candidate, correlated_neighbors, initialize_gamma, multi_run, run, sequential_fit,
    Candidate, FitResult, InitStrategy, SelectionMode, SelectorConfig,
};

pub type Dataset64 = Dataset<f64>;
pub type Dataset32 = Dataset<f32>;
pub type Theta64 = Theta<f64>;
pub type Theta32 = Theta<f32>;
pub type FamilySpec64 = FamilySpec<f64>;
pub type WorkingData64 = WorkingData<f64>;
pub type FitResult64 = FitResult<f64>;
pub type FitResult32 = FitResult<f32>;
