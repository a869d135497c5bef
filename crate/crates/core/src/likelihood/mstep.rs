use ndarray::{Array2, Axis};

use super::{adjusted_response, complete_loglik, residual, PrecisionCache};
use crate::error::{Error, Result};
use crate::family::WorkingData;
use crate::linalg::{dependent_columns, Cholesky};
use crate::model::{mixture_probs, Dataset, MixtureAssignment, Theta};
use crate::scalar::Scalar;

pub const M_STEP_TOL: f64 = 1e-8;
pub const M_STEP_MAX_ITER: usize = 100;
/// Lower bound on σ² while the active set is nonempty.
pub const SIGMA2_FLOOR: f64 = 1e-12;

/// Largest log-space over-relaxation factor tried on the variance update.
const MAX_OVERRELAX: f64 = 64.0;

/// Outcome of one M-step.
#[derive(Clone, Debug)]
pub struct MStep<T> {
    pub theta: Theta<T>,
    pub loglik: T,
    pub iterations: usize,
    pub converged: bool,
    /// Set if some inner iteration lowered ℓ by more than rounding noise.
    pub monotone: bool,
    /// ℓ at the start and after every inner iteration.
    pub trace: Vec<T>,
}

/// p_j = n_j / K.
pub fn update_mixture_probs<T: Scalar>(gamma: &MixtureAssignment) -> [T; 3] {
    mixture_probs(gamma)
}

/// GLS update β̃ = (H'Σ⁻¹H)⁻¹H'Σ⁻¹ỹ with H = [X, ZΓ1]; μ is the last element
/// (and 0 when no putative column is active).
pub fn update_beta_mu<T: Scalar>(
    data: &Dataset<T>,
    working: &WorkingData<T>,
    gamma: &MixtureAssignment,
    theta: &Theta<T>,
) -> Result<(Vec<T>, T)> {
    let cache = PrecisionCache::build(data, working, gamma, theta.phi, theta.sigma2)?;
    gls(data, working, &cache)
}

pub(crate) fn gls<T: Scalar>(
    data: &Dataset<T>,
    working: &WorkingData<T>,
    cache: &PrecisionCache<T>,
) -> Result<(Vec<T>, T)> {
    let j = data.j();
    let with_mu = cache.n_active() > 0 && cache.rank() > 0;
    let width = j + usize::from(with_mu);
    if width == 0 {
        return Ok((Vec::new(), T::zero()));
    }
    let mut h = Array2::<T>::zeros((data.n(), width));
    h.slice_mut(ndarray::s![.., ..j]).assign(&data.x);
    if with_mu {
        h.column_mut(j).assign(&cache.signed_sum());
    }
    let sh = cache.apply_inverse_mat(&h);
    let a = h.t().dot(&sh);
    let rhs = sh.t().dot(&adjusted_response(data, working));
    let names = |idx: Vec<usize>| -> Vec<String> {
        idx.into_iter()
            .map(|c| {
                if c < j {
                    data.x_names[c].clone()
                } else {
                    "mixture mean column ZΓ1".to_string()
                }
            })
            .collect()
    };
    let dependent = dependent_columns(&a, T::of(1e-10));
    if !dependent.is_empty() {
        return Err(Error::RankDeficiency {
            columns: names(dependent),
        });
    }
    let chol = Cholesky::new(&a).map_err(|e| Error::RankDeficiency {
        columns: names(vec![e.index]),
    })?;
    let sol = chol.solve(rhs.view());
    let beta = sol.slice(ndarray::s![..j]).to_vec();
    let mu = if with_mu { sol[j] } else { T::zero() };
    Ok((beta, mu))
}

/// One fixed-point update of (φ, σ²), evaluated at θ:
///
/// ```text
/// τ_e = tr(φI − φ²Σ⁻¹W⁻¹) + φ² e'Σ⁻¹W⁻¹Σ⁻¹e          φ  = τ_e / N
/// τ_r = tr(σ²I_L − σ⁴ΓZ'Σ⁻¹ZΓ) + σ⁴ e'Σ⁻¹ZΓ²Z'Σ⁻¹e   σ² = τ_r / rank(ZΓ)
/// ```
///
/// with e = ỹ − Hβ̃. With W = I these are the usual ML variance-component
/// updates; the W⁻¹ factors keep φ the dispersion of φW⁻¹.
pub fn update_variance_components<T: Scalar>(
    data: &Dataset<T>,
    working: &WorkingData<T>,
    gamma: &MixtureAssignment,
    theta: &Theta<T>,
) -> Result<(T, T)> {
    let cache = PrecisionCache::build(data, working, gamma, theta.phi, theta.sigma2)?;
    Ok(variance_update(data, working, &cache, theta))
}

pub(crate) fn variance_update<T: Scalar>(
    data: &Dataset<T>,
    working: &WorkingData<T>,
    cache: &PrecisionCache<T>,
    theta: &Theta<T>,
) -> (T, T) {
    let phi = cache.phi();
    let sigma2 = cache.sigma2();
    let ratio = sigma2 / phi;
    let e = residual(data, working, cache, theta);
    let v = cache.apply_inverse(&e);
    let w = cache.weights();
    let n = T::from_usize_lossy(data.n());

    // tr(C⁻¹M) and tr(M C⁻¹ M) for the L×L core C = I + (σ²/φ)M.
    let (tr_cm, tr_mcm) = match cache.core() {
        Some(core) => {
            let cm = core.solve_mat(cache.gram());
            let tr_cm = cm.diag().sum();
            let tr_mcm = (cache.gram() * &cm.t()).sum();
            (tr_cm, tr_mcm)
        }
        None => (T::zero(), T::zero()),
    };

    let new_phi = if data.spec.dispersion_known() {
        T::one()
    } else {
        let weighted: T = v.iter().zip(w.iter()).map(|(&vi, &wi)| vi * vi / wi).sum();
        let tau_e = sigma2 * tr_cm + phi * phi * weighted;
        tau_e / n
    };

    let rank = cache.rank();
    if rank == 0 {
        return (new_phi, T::zero());
    }
    let l = T::from_usize_lossy(cache.n_active());
    let tr_usu = (cache.gram().diag().sum() - ratio * tr_mcm) / phi;
    let uv = cache.u().t().dot(&v);
    let s4 = sigma2 * sigma2;
    let tau_r = sigma2 * l - s4 * tr_usu + s4 * uv.dot(&uv);
    let new_sigma2 = (tau_r / T::from_usize_lossy(rank)).max(T::of(SIGMA2_FLOOR));
    (new_phi, new_sigma2)
}

/// Maximizes ℓ over θ for fixed γ and working data.
///
/// Each iteration applies the σ² fixed-point update with φ held fixed, the
/// GLS update of (β, μ), and the exact rescaling of (φ, σ²) along their
/// common ray, until ℓ changes by less than [`M_STEP_TOL`] or
/// [`M_STEP_MAX_ITER`] iterations; p is closed form. The σ² update is also
/// tried with its log-scale step multiplied by 2, 4, …, 64, keeping the best
/// value, which shortcuts the slow drift of σ² toward 0 when the active set
/// is small. Every step is an exact or EM-type ascent step, so ℓ never drops.
pub fn m_step<T: Scalar>(
    data: &Dataset<T>,
    working: &WorkingData<T>,
    gamma: &MixtureAssignment,
    theta_init: &Theta<T>,
) -> Result<MStep<T>> {
    if theta_init.beta.len() != data.j() {
        return Err(Error::validation(
            "likelihood_engine",
            "θ_init has the wrong number of β coefficients",
        ));
    }
    let known = data.spec.dispersion_known();
    let floor = T::of(SIGMA2_FLOOR);
    let mut theta = theta_init.clone();
    theta.p = mixture_probs(gamma);
    if known {
        theta.phi = T::one();
    } else if !(theta.phi > T::zero() && theta.phi.is_finite()) {
        theta.phi = T::one();
    }
    let l = gamma.n_active();
    if l == 0 {
        theta.mu = T::zero();
        theta.sigma2 = T::zero();
    } else if !(theta.sigma2 > floor && theta.sigma2.is_finite()) {
        theta.sigma2 = initial_sigma2(data, working, gamma, &theta)?;
    }

    let start = complete_loglik(data, working, gamma, theta_init)
        .unwrap_or(T::neg_infinity());
    let mut trace = vec![start];
    let mut best_ll = start;
    let mut monotone = true;
    let noise = |ll: T| T::of(1e-9) * (T::one() + ll.abs());
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..M_STEP_MAX_ITER {
        iterations += 1;
        let cache = PrecisionCache::build(data, working, gamma, theta.phi, theta.sigma2)?;
        let (beta, mu) = gls(data, working, &cache)?;
        theta.beta = beta;
        theta.mu = mu;
        if cache.rank() == 0 {
            theta.mu = T::zero();
            theta.sigma2 = T::zero();
        }

        if l == 0 || cache.rank() == 0 {
            // β̂ does not depend on φ here, so the φ update is the exact maximizer.
            let (phi, _) = variance_update(data, working, &cache, &theta);
            theta.phi = phi;
            let ll = complete_loglik(data, working, gamma, &theta)?;
            if ll < best_ll - noise(best_ll) {
                monotone = false;
            }
            trace.push(ll);
            converged = true;
            break;
        }

        // σ² with φ held fixed: the τ_r update (over-relaxed in log space)
        // and a Fisher-scoring step compete, and the best ascent is kept.
        // τ_r alone moves σ² by O(σ⁴), so it cannot leave a point near 0.
        let ll_gls = gaussian_loglik(data, working, &cache, &theta, gamma);
        let eval = |s2: T| -> T {
            if !(s2.is_finite() && s2 > T::zero()) {
                return T::neg_infinity();
            }
            let mut trial = theta.clone();
            trial.sigma2 = s2;
            complete_loglik(data, working, gamma, &trial).unwrap_or(T::neg_infinity())
        };
        let (_, s2_em) = variance_update(data, working, &cache, &theta);
        let mut best = (theta.sigma2, ll_gls);
        let mut alpha = T::one();
        while alpha <= T::of(MAX_OVERRELAX) {
            let s2_t = (theta.sigma2 * (s2_em / theta.sigma2).powf(alpha)).max(floor);
            let ll_t = eval(s2_t);
            if ll_t > best.1 {
                best = (s2_t, ll_t);
                alpha = alpha + alpha;
            } else {
                break;
            }
        }
        let (score, info) = sigma2_score(data, working, &cache, &theta);
        if score.is_finite() && info > T::zero() {
            let mut step = score / info;
            for _ in 0..30 {
                let s2_t = (theta.sigma2 + step).max(floor);
                let ll_t = eval(s2_t);
                if ll_t > ll_gls {
                    if ll_t > best.1 {
                        best = (s2_t, ll_t);
                    }
                    break;
                }
                step = step * T::of(0.5);
            }
        }
        theta.sigma2 = best.0;
        let mut cache = PrecisionCache::build(data, working, gamma, theta.phi, theta.sigma2)?;
        let (beta, mu) = gls(data, working, &cache)?;
        theta.beta = beta;
        theta.mu = mu;

        // (β, μ) depend on (φ, σ²) only through σ²/φ, so scaling both by the
        // exact maximizer along that ray, c = e'Σ⁻¹e / N, keeps them optimal.
        if !known {
            let e = residual(data, working, &cache, &theta);
            let c = e.dot(&cache.apply_inverse(&e)) / T::from_usize_lossy(data.n());
            if c.is_finite() && c > T::zero() {
                theta.phi = theta.phi * c;
                theta.sigma2 = (theta.sigma2 * c).max(floor);
                cache = PrecisionCache::build(data, working, gamma, theta.phi, theta.sigma2)?;
            }
        }
        let ll = gaussian_loglik(data, working, &cache, &theta, gamma);
        if ll < best_ll - noise(best_ll) {
            monotone = false;
        }
        trace.push(ll);
        let change = (ll - best_ll).abs();
        best_ll = best_ll.max(ll);
        if change < T::of(M_STEP_TOL) {
            converged = true;
            break;
        }
    }

    let loglik = complete_loglik(data, working, gamma, &theta)?;
    Ok(MStep {
        theta,
        loglik,
        iterations,
        converged,
        monotone,
        trace,
    })
}

/// ∂ℓ/∂σ² = ½(‖U'Σ⁻¹e‖² − tr A) and the expected information ½ tr(A²),
/// with A = U'Σ⁻¹U = (M − (σ²/φ) M C⁻¹ M)/φ.
fn sigma2_score<T: Scalar>(
    data: &Dataset<T>,
    working: &WorkingData<T>,
    cache: &PrecisionCache<T>,
    theta: &Theta<T>,
) -> (T, T) {
    let Some(core) = cache.core() else {
        return (T::zero(), T::zero());
    };
    let half = T::of(0.5);
    let m = cache.gram();
    let ratio = cache.sigma2() / cache.phi();
    let a = (m - &(m.dot(&core.solve_mat(m)) * ratio)) / cache.phi();
    let v = cache.apply_inverse(&residual(data, working, cache, theta));
    let uv = cache.u().t().dot(&v);
    let score = half * (uv.dot(&uv) - a.diag().sum());
    let info = half * (&a * &a.t()).sum();
    (score, info)
}

fn gaussian_loglik<T: Scalar>(
    data: &Dataset<T>,
    working: &WorkingData<T>,
    cache: &PrecisionCache<T>,
    theta: &Theta<T>,
    gamma: &MixtureAssignment,
) -> T {
    super::gaussian_part(data, working, cache, theta) + super::mixture_term(gamma, &theta.p)
}

/// Starting σ² for a freshly nonempty active set: a quarter of the squared
/// GLS mean effect, from a fit with σ² at its floor.
fn initial_sigma2<T: Scalar>(
    data: &Dataset<T>,
    working: &WorkingData<T>,
    gamma: &MixtureAssignment,
    theta: &Theta<T>,
) -> Result<T> {
    let cache = PrecisionCache::build(data, working, gamma, theta.phi, T::of(SIGMA2_FLOOR))?;
    let (_, mu) = gls(data, working, &cache)?;
    let guess = mu * mu / T::of(4.0);
    // Fall back to the per-column scale of the data when μ̂ is negligible.
    let scale = {
        let w = cache.weights();
        let u2: T = (cache.u() * cache.u() * &w.view().insert_axis(Axis(1))).sum();
        let l = T::from_usize_lossy(cache.n_active());
        theta.phi * l / u2.max(T::min_positive_value())
    };
    Ok(guess.max(scale).max(T::of(SIGMA2_FLOOR)))
}
