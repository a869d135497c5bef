//! Exponential-dispersion families with canonical links, and the working
//! response / iterative weights that turn a non-Gaussian step into a
//! weighted Gaussian one.

use std::fmt;
use std::str::FromStr;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mean values are kept this far from the boundary of the mean domain before
/// the link derivative is evaluated.
pub const MEAN_CLAMP: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Normal,
    Binomial,
    Poisson,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Normal => "normal",
            Family::Binomial => "binomial",
            Family::Poisson => "poisson",
        }
    }

    /// Binomial and Poisson have φ fixed at 1.
    pub fn dispersion_known(self) -> bool {
        !matches!(self, Family::Normal)
    }

    fn in_domain<T: Scalar>(self, lambda: T) -> bool {
        lambda.is_finite()
            && match self {
                Family::Normal => true,
                Family::Poisson => lambda > T::zero(),
                Family::Binomial => lambda > T::zero() && lambda < T::one(),
            }
    }

    /// Canonical link g(λ).
    pub fn link<T: Scalar>(self, lambda: T) -> Result<T> {
        if !self.in_domain(lambda) {
            return Err(Error::Domain {
                family: self.name(),
                value: lambda.as_f64(),
            });
        }
        Ok(match self {
            Family::Normal => lambda,
            Family::Poisson => lambda.ln(),
            Family::Binomial => (lambda / (T::one() - lambda)).ln(),
        })
    }

    pub fn inverse_link<T: Scalar>(self, eta: T) -> T {
        match self {
            Family::Normal => eta,
            Family::Poisson => eta.exp(),
            Family::Binomial => {
                if eta >= T::zero() {
                    T::one() / (T::one() + (-eta).exp())
                } else {
                    let e = eta.exp();
                    e / (T::one() + e)
                }
            }
        }
    }

    /// Cumulant generator b(η); b' is the inverse link and b'' the variance function.
    pub fn cumulant<T: Scalar>(self, eta: T) -> T {
        match self {
            Family::Normal => eta * eta / T::of(2.0),
            Family::Poisson => eta.exp(),
            // log(1 + e^η) without overflow
            Family::Binomial => {
                if eta > T::zero() {
                    eta + (-eta).exp().ln_1p()
                } else {
                    eta.exp().ln_1p()
                }
            }
        }
    }

    pub fn variance<T: Scalar>(self, lambda: T) -> T {
        match self {
            Family::Normal => T::one(),
            Family::Poisson => lambda,
            Family::Binomial => lambda * (T::one() - lambda),
        }
    }

    /// g'(λ); for canonical links this is 1/V(λ).
    pub fn link_derivative<T: Scalar>(self, lambda: T) -> T {
        match self {
            Family::Normal => T::one(),
            Family::Poisson => T::one() / lambda,
            Family::Binomial => T::one() / (lambda * (T::one() - lambda)),
        }
    }

    /// Pulls λ into the interior of the mean domain; reports whether it moved.
    pub fn clamp_mean<T: Scalar>(self, lambda: T) -> (T, bool) {
        let eps = T::of(MEAN_CLAMP);
        match self {
            Family::Normal => (lambda, false),
            Family::Poisson => {
                if lambda < eps || lambda.is_nan() {
                    (eps, true)
                } else {
                    (lambda, false)
                }
            }
            Family::Binomial => {
                let hi = T::one() - eps;
                if lambda < eps || lambda.is_nan() {
                    (eps, true)
                } else if lambda > hi {
                    (hi, true)
                } else {
                    (lambda, false)
                }
            }
        }
    }

    /// Starting mean for the first working response, computed from the data.
    pub fn initial_mean<T: Scalar>(self, y: T, m: T) -> T {
        match self {
            Family::Normal => y,
            Family::Poisson => y + T::of(0.1),
            Family::Binomial => (m * y + T::of(0.5)) / (m + T::one()),
        }
    }

    /// Unit deviance contribution, weighted by the prior weight `m`.
    pub fn deviance_term<T: Scalar>(self, y: T, lambda: T, m: T) -> T {
        let two = T::of(2.0);
        let xlogy = |a: T, b: T| {
            if a == T::zero() {
                T::zero()
            } else {
                a * (a / b).ln()
            }
        };
        match self {
            Family::Normal => m * (y - lambda) * (y - lambda),
            Family::Poisson => two * m * (xlogy(y, lambda) - (y - lambda)),
            Family::Binomial => {
                two * m * (xlogy(y, lambda) + xlogy(T::one() - y, T::one() - lambda))
            }
        }
    }

    /// Full log-density log f(y; λ, φ/m), including c(y, φ/m).
    pub fn log_density<T: Scalar>(self, y: T, lambda: T, phi: T, m: T) -> T {
        let two = T::of(2.0);
        match self {
            Family::Normal => {
                let var = phi / m;
                -(two * T::PI() * var).ln() / two - (y - lambda) * (y - lambda) / (two * var)
            }
            Family::Poisson => {
                let lg = T::of(statrs::function::gamma::ln_gamma(y.as_f64() + 1.0));
                let ll = if y == T::zero() {
                    -lambda
                } else {
                    y * lambda.ln() - lambda
                };
                m * (ll - lg)
            }
            Family::Binomial => {
                let trials = m.as_f64();
                let successes = (y * m).as_f64();
                let lchoose = statrs::function::gamma::ln_gamma(trials + 1.0)
                    - statrs::function::gamma::ln_gamma(successes + 1.0)
                    - statrs::function::gamma::ln_gamma(trials - successes + 1.0);
                let mut ll = T::of(lchoose);
                if y > T::zero() {
                    ll = ll + m * y * lambda.ln();
                }
                if y < T::one() {
                    ll = ll + m * (T::one() - y) * (T::one() - lambda).ln();
                }
                ll
            }
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "normal" | "gaussian" => Ok(Family::Normal),
            "binomial" | "logistic" => Ok(Family::Binomial),
            "poisson" => Ok(Family::Poisson),
            other => Err(Error::validation(
                "glm_family",
                format!("unknown family '{other}'"),
            )),
        }
    }
}

/// A family together with the per-observation prior weights m_i
/// (binomial trial counts, exposures, or 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec<T> {
    pub family: Family,
    pub prior_weights: Vec<T>,
}

impl<T: Scalar> FamilySpec<T> {
    pub fn new(family: Family, prior_weights: Vec<T>) -> Result<Self> {
        if let Some(i) = prior_weights
            .iter()
            .position(|w| !(w.is_finite() && *w > T::zero()))
        {
            return Err(Error::validation(
                "glm_family",
                format!("prior weight {i} is not strictly positive and finite"),
            ));
        }
        Ok(Self {
            family,
            prior_weights,
        })
    }

    pub fn unit_weights(family: Family, n: usize) -> Self {
        Self {
            family,
            prior_weights: vec![T::one(); n],
        }
    }

    pub fn dispersion_known(&self) -> bool {
        self.family.dispersion_known()
    }

    pub fn len(&self) -> usize {
        self.prior_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prior_weights.is_empty()
    }

    pub fn link(&self, lambda: T) -> Result<T> {
        self.family.link(lambda)
    }

    pub fn inverse_link(&self, eta: T) -> T {
        self.family.inverse_link(eta)
    }

    pub fn cumulant(&self, eta: T) -> T {
        self.family.cumulant(eta)
    }

    /// Checks that a response vector is admissible for this family.
    pub fn validate_response(&self, y: &[T]) -> Result<()> {
        if y.len() != self.len() {
            return Err(Error::validation(
                "glm_family",
                format!(
                    "response has {} entries but {} prior weights",
                    y.len(),
                    self.len()
                ),
            ));
        }
        let tol = T::of(1e-8);
        for (i, (&yi, &mi)) in y.iter().zip(&self.prior_weights).enumerate() {
            let ok = yi.is_finite()
                && match self.family {
                    Family::Normal => true,
                    Family::Poisson => yi >= T::zero(),
                    Family::Binomial => {
                        let count = yi * mi;
                        yi >= T::zero() && yi <= T::one() && (count - count.round()).abs() < tol
                    }
                };
            if !ok {
                return Err(Error::validation(
                    "glm_family",
                    format!(
                        "response value {} at row {} is invalid for the {} family",
                        yi,
                        i + 1,
                        self.family
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Working response ỹ = g(λ) + g'(λ)(y − λ) and weights w̃ = m / g'(λ).
    pub fn working_response(&self, y: &[T], lambda_tilde: &[T]) -> Result<WorkingData<T>> {
        if y.len() != self.len() || lambda_tilde.len() != self.len() {
            return Err(Error::validation(
                "glm_family",
                "working_response: length mismatch",
            ));
        }
        if self.family == Family::Normal {
            return Ok(WorkingData::identity(y, &self.prior_weights));
        }
        let n = y.len();
        let mut y_tilde = Array1::zeros(n);
        let mut w_tilde = Array1::zeros(n);
        let mut clamped = false;
        for i in 0..n {
            let (lam, moved) = self.family.clamp_mean(lambda_tilde[i]);
            clamped |= moved;
            let dg = self.family.link_derivative(lam);
            y_tilde[i] = self.family.link(lam)? + dg * (y[i] - lam);
            w_tilde[i] = self.prior_weights[i] / dg;
        }
        Ok(WorkingData {
            y_tilde,
            w_tilde,
            clamped,
        })
    }

    /// Working data from the data-driven starting means.
    pub fn initial_working(&self, y: &[T]) -> Result<WorkingData<T>> {
        let lambda: Vec<T> = y
            .iter()
            .zip(&self.prior_weights)
            .map(|(&yi, &mi)| self.family.initial_mean(yi, mi))
            .collect();
        self.working_response(y, &lambda)
    }
}

/// Linearized pseudo-response and iterative weights (the diagonal of W).
#[derive(Clone, Debug, PartialEq)]
pub struct WorkingData<T> {
    pub y_tilde: Array1<T>,
    pub w_tilde: Array1<T>,
    /// Set when some λ̃ had to be pulled off the boundary of the mean domain.
    pub clamped: bool,
}

impl<T: Scalar> WorkingData<T> {
    pub fn identity(y: &[T], m: &[T]) -> Self {
        Self {
            y_tilde: Array1::from(y.to_vec()),
            w_tilde: Array1::from(m.to_vec()),
            clamped: false,
        }
    }

    pub fn len(&self) -> usize {
        self.y_tilde.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_tilde.is_empty()
    }
}
