//! Gaussian complete-data log-likelihood on the working scale,
//!
//! ```text
//! ℓ(y, γ | θ) = −½ r'Σ⁻¹r − ½ log|Σ| + Σ_j n_j log p_j − (N/2) log 2π
//! Σ = φW⁻¹ + σ² ZΓ²Z',   r = ỹ − offset − Xβ − μ ZΓ1
//! ```
//!
//! evaluated without ever forming an N×N matrix: only the L active columns of
//! Z enter, through the L×L core `I + (σ²/φ) Γ_L Z_L' W Z_L Γ_L`.

mod mstep;
mod scorer;

pub use mstep::{
    m_step, update_beta_mu, update_mixture_probs, update_variance_components, MStep,
    M_STEP_MAX_ITER, M_STEP_TOL, SIGMA2_FLOOR,
};
pub use scorer::{CandidateScorer, COLLINEARITY_TOL};

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::family::WorkingData;
use crate::linalg::{pivoted_cholesky, Cholesky};
use crate::model::{label_slot, Dataset, MixtureAssignment, Theta};
use crate::scalar::Scalar;

/// Relative pivot tolerance used to decide rank(ZΓ).
pub const RANK_TOL: f64 = 1e-10;

/// Owner of the mutable fit state. Every mutation bumps `version`, which is
/// how a [`PrecisionCache`] detects that it has gone stale.
#[derive(Clone, Debug)]
pub struct ModelState<T> {
    working: WorkingData<T>,
    gamma: MixtureAssignment,
    theta: Theta<T>,
    version: u64,
}

impl<T: Scalar> ModelState<T> {
    pub fn new(working: WorkingData<T>, gamma: MixtureAssignment, theta: Theta<T>) -> Self {
        Self {
            working,
            gamma,
            theta,
            version: 0,
        }
    }

    pub fn working(&self) -> &WorkingData<T> {
        &self.working
    }

    pub fn gamma(&self) -> &MixtureAssignment {
        &self.gamma
    }

    pub fn theta(&self) -> &Theta<T> {
        &self.theta
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn set_working(&mut self, working: WorkingData<T>) {
        self.working = working;
        self.version += 1;
    }

    pub fn set_label(&mut self, k: usize, label: i8) {
        self.gamma.set(k, label);
        self.version += 1;
    }

    pub fn set_theta(&mut self, theta: Theta<T>) {
        self.theta = theta;
        self.version += 1;
    }
}

/// Woodbury factorization of Σ for a fixed (γ, φ, σ², W).
#[derive(Clone, Debug)]
pub struct PrecisionCache<T> {
    version: Option<u64>,
    phi: T,
    sigma2: T,
    weights: Array1<T>,
    active: Vec<usize>,
    /// Z_L Γ_L (N×L).
    u: Array2<T>,
    /// W Z_L Γ_L.
    wu: Array2<T>,
    /// Γ_L Z_L' W Z_L Γ_L.
    gram: Array2<T>,
    core: Option<Cholesky<T>>,
    log_det: T,
    rank: usize,
}

impl<T: Scalar> PrecisionCache<T> {
    pub fn build(
        data: &Dataset<T>,
        working: &WorkingData<T>,
        gamma: &MixtureAssignment,
        phi: T,
        sigma2: T,
    ) -> Result<Self> {
        let n = data.n();
        if working.len() != n || gamma.len() != data.k() {
            return Err(Error::validation(
                "likelihood_engine",
                "working data or assignment does not match the dataset",
            ));
        }
        if !(phi > T::zero()) || !phi.is_finite() || sigma2 < T::zero() || !sigma2.is_finite() {
            return Err(Error::validation(
                "likelihood_engine",
                format!("invalid variance parameters φ={phi}, σ²={sigma2}"),
            ));
        }
        let active = gamma.active().to_vec();
        let l = active.len();
        let weights = working.w_tilde.clone();
        let mut u = Array2::<T>::zeros((n, l));
        for (c, &k) in active.iter().enumerate() {
            let sign = if gamma.label(k) < 0 { -T::one() } else { T::one() };
            u.column_mut(c)
                .assign(&data.z.column(k).mapv(|v| v * sign));
        }
        let wu = &u * &weights.view().insert_axis(Axis(1));
        let gram = u.t().dot(&wu);
        let ratio = sigma2 / phi;
        let core_matrix = Array2::<T>::eye(l) + &(&gram * ratio);
        let core = if l > 0 {
            Some(Cholesky::new(&core_matrix).map_err(|e| Error::SingularCore { pivot: e.index })?)
        } else {
            None
        };
        let nf = T::from_usize_lossy(n);
        let log_w: T = weights.iter().map(|w| w.ln()).sum();
        let log_det = nf * phi.ln() - log_w + core.as_ref().map_or(T::zero(), |c| c.log_det());
        let rank = if l > 0 {
            pivoted_cholesky(&gram, T::of(RANK_TOL)).rank()
        } else {
            0
        };
        Ok(Self {
            version: None,
            phi,
            sigma2,
            weights,
            active,
            u,
            wu,
            gram,
            core,
            log_det,
            rank,
        })
    }

    /// Builds the cache for the current contents of `state` and stamps it with its version.
    pub fn for_state(data: &Dataset<T>, state: &ModelState<T>) -> Result<Self> {
        let th = state.theta();
        let mut cache = Self::build(data, state.working(), state.gamma(), th.phi, th.sigma2)?;
        cache.version = Some(state.version());
        Ok(cache)
    }

    pub fn ensure_current(&self, state: &ModelState<T>) -> Result<()> {
        match self.version {
            Some(v) if v == state.version() => Ok(()),
            Some(v) => Err(Error::StaleCache {
                cached: v,
                current: state.version(),
            }),
            None => Err(Error::StaleCache {
                cached: u64::MAX,
                current: state.version(),
            }),
        }
    }

    pub fn phi(&self) -> T {
        self.phi
    }

    pub fn sigma2(&self) -> T {
        self.sigma2
    }

    pub fn n_active(&self) -> usize {
        self.active.len()
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    /// rank(ZΓ), from a pivoted factorization of the active Gram matrix.
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn weights(&self) -> &Array1<T> {
        &self.weights
    }

    pub(crate) fn u(&self) -> &Array2<T> {
        &self.u
    }

    pub(crate) fn wu(&self) -> &Array2<T> {
        &self.wu
    }

    pub(crate) fn gram(&self) -> &Array2<T> {
        &self.gram
    }

    pub(crate) fn core(&self) -> Option<&Cholesky<T>> {
        self.core.as_ref()
    }

    /// Σ⁻¹v = (1/φ)[Wv − (σ²/φ) WU (I + (σ²/φ)U'WU)⁻¹ U'Wv].
    pub fn apply_inverse(&self, v: &Array1<T>) -> Array1<T> {
        let wv = &self.weights * v;
        let mut out = wv.clone();
        if let Some(core) = &self.core {
            let ratio = self.sigma2 / self.phi;
            let t = core.solve(self.u.t().dot(&wv).view());
            out = out - self.wu.dot(&t) * ratio;
        }
        out / self.phi
    }

    pub fn apply_inverse_mat(&self, v: &Array2<T>) -> Array2<T> {
        let mut out = Array2::<T>::zeros(v.raw_dim());
        for (j, col) in v.columns().into_iter().enumerate() {
            out.column_mut(j).assign(&self.apply_inverse(&col.to_owned()));
        }
        out
    }

    /// log|Σ| = N log φ − Σ log w̃_i + log|I + (σ²/φ)U'WU|.
    pub fn log_det(&self) -> T {
        self.log_det
    }

    /// ZΓ1 = Σ_{k active} γ_k z_k.
    pub fn signed_sum(&self) -> Array1<T> {
        self.u.sum_axis(Axis(1))
    }
}

/// Σ⁻¹v through the cache.
pub fn sigma_apply_inverse<T: Scalar>(cache: &PrecisionCache<T>, v: &Array1<T>) -> Array1<T> {
    cache.apply_inverse(v)
}

pub fn log_det_sigma<T: Scalar>(cache: &PrecisionCache<T>) -> T {
    cache.log_det()
}

/// Working response with the offset removed.
pub(crate) fn adjusted_response<T: Scalar>(data: &Dataset<T>, working: &WorkingData<T>) -> Array1<T> {
    &working.y_tilde - &data.offset
}

/// r = ỹ − offset − Xβ − μ ZΓ1.
pub(crate) fn residual<T: Scalar>(
    data: &Dataset<T>,
    working: &WorkingData<T>,
    cache: &PrecisionCache<T>,
    theta: &Theta<T>,
) -> Array1<T> {
    let mut r = adjusted_response(data, working);
    if data.j() > 0 {
        r = r - data.x.dot(&Array1::from(theta.beta.clone()));
    }
    if cache.n_active() > 0 && theta.mu != T::zero() {
        r = r - cache.signed_sum() * theta.mu;
    }
    r
}

/// Σ_j n_j log p_j with 0·log 0 = 0; −∞ when a populated component has p_j = 0.
pub fn mixture_term<T: Scalar>(gamma: &MixtureAssignment, p: &[T; 3]) -> T {
    let counts = gamma.counts();
    let mut total = T::zero();
    for label in [-1i8, 0, 1] {
        let n = counts[label_slot(label)];
        if n == 0 {
            continue;
        }
        let pj = p[label_slot(label)];
        if !(pj > T::zero()) {
            return T::neg_infinity();
        }
        total = total + T::from_usize_lossy(n) * pj.ln();
    }
    total
}

/// The Gaussian part of ℓ for a given cache (quadratic form, determinant and 2π terms).
pub(crate) fn gaussian_part<T: Scalar>(
    data: &Dataset<T>,
    working: &WorkingData<T>,
    cache: &PrecisionCache<T>,
    theta: &Theta<T>,
) -> T {
    let r = residual(data, working, cache, theta);
    let quad = r.dot(&cache.apply_inverse(&r));
    let half = T::of(0.5);
    let n = T::from_usize_lossy(data.n());
    -half * quad - half * cache.log_det() - half * n * (T::PI() + T::PI()).ln()
}

/// Complete-data log-likelihood ℓ(ỹ, γ | θ).
pub fn complete_loglik<T: Scalar>(
    data: &Dataset<T>,
    working: &WorkingData<T>,
    gamma: &MixtureAssignment,
    theta: &Theta<T>,
) -> Result<T> {
    check_theta(data, theta)?;
    let mixture = mixture_term(gamma, &theta.p);
    let cache = PrecisionCache::build(data, working, gamma, theta.phi, theta.sigma2)?;
    let ll = gaussian_part(data, working, &cache, theta) + mixture;
    Ok(if ll.is_nan() { T::neg_infinity() } else { ll })
}

/// ℓ with only γ_k changed to `label`, minus the current ℓ.
///
/// Convenience wrapper that builds a throwaway cache; the selector scores all
/// 3K proposals through a single [`CandidateScorer`] instead.
pub fn delta_loglik<T: Scalar>(
    data: &Dataset<T>,
    working: &WorkingData<T>,
    gamma: &MixtureAssignment,
    theta: &Theta<T>,
    k: usize,
    label: i8,
) -> Result<T> {
    if k >= data.k() || !(-1..=1).contains(&label) {
        return Err(Error::validation(
            "likelihood_engine",
            format!("invalid proposal (k={k}, label={label})"),
        ));
    }
    if gamma.label(k) == label {
        return Ok(T::zero());
    }
    let cache = PrecisionCache::build(data, working, gamma, theta.phi, theta.sigma2)?;
    let scorer = CandidateScorer::new(data, working, gamma, theta, &cache)?;
    Ok(scorer.delta(k, label))
}

/// Linear predictor including the conditional (BLUP) random-effect term:
/// offset + Xβ + μZΓ1 + σ² ZΓ Γ'Z' Σ⁻¹ r.
pub fn fitted_linear_predictor<T: Scalar>(
    data: &Dataset<T>,
    working: &WorkingData<T>,
    gamma: &MixtureAssignment,
    theta: &Theta<T>,
) -> Result<Array1<T>> {
    let cache = PrecisionCache::build(data, working, gamma, theta.phi, theta.sigma2)?;
    let r = residual(data, working, &cache, theta);
    let mut eta = adjusted_response(data, working) - &r + &data.offset;
    if cache.n_active() > 0 && theta.sigma2 > T::zero() {
        let sr = cache.apply_inverse(&r);
        let blup = cache.u().t().dot(&sr) * theta.sigma2;
        eta = eta + cache.u().dot(&blup);
    }
    Ok(eta)
}

fn check_theta<T: Scalar>(data: &Dataset<T>, theta: &Theta<T>) -> Result<()> {
    if theta.beta.len() != data.j() {
        return Err(Error::validation(
            "likelihood_engine",
            format!("β has {} entries, X has {} columns", theta.beta.len(), data.j()),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
