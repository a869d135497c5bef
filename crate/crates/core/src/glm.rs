//! Plain unpenalized GLM fitting by IRLS, used for the marginal screen and
//! for the refit summary of a selected model.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::family::{Family, FamilySpec};
use crate::linalg::{dependent_columns, Cholesky};
use crate::scalar::Scalar;

const IRLS_MAX_ITER: usize = 50;
const IRLS_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlmFit<T> {
    pub coef: Vec<T>,
    /// Standard errors with the model dispersion (RSS/(N−p) for the normal family, 1 otherwise).
    pub std_err: Vec<T>,
    pub fitted: Vec<T>,
    pub deviance: T,
    pub null_deviance: T,
    pub dispersion: T,
    /// Pearson χ²/(N−p); the quasi-likelihood dispersion estimate.
    pub pearson_dispersion: T,
    pub loglik: T,
    pub aic: T,
    /// 1 − RSS/TSS, normal family only.
    pub r_squared: Option<T>,
    pub df_residual: usize,
    pub iterations: usize,
    pub converged: bool,
}

/// Fits `family` with design `x` (intercept included by the caller) and a
/// fixed offset on the linear-predictor scale.
pub fn fit_glm<T: Scalar>(
    x: ArrayView2<T>,
    y: &[T],
    offset: ArrayView1<T>,
    spec: &FamilySpec<T>,
    names: &[String],
) -> Result<GlmFit<T>> {
    let n = y.len();
    let p = x.ncols();
    if x.nrows() != n || offset.len() != n || spec.len() != n {
        return Err(Error::validation("glm_refit", "design, response and offset lengths differ"));
    }
    spec.validate_response(y)?;
    let family = spec.family;
    let m = &spec.prior_weights;

    let mut mu: Array1<T> = (0..n).map(|i| family.initial_mean(y[i], m[i])).collect();
    let deviance_of = |mu: &Array1<T>| -> T { (0..n).map(|i| family.deviance_term(y[i], mu[i], m[i])).sum() };
    let mut dev = T::infinity();
    let mut beta = Array1::<T>::zeros(p);
    let mut chol = None;
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..IRLS_MAX_ITER {
        iterations += 1;
        let mu_slice: Vec<T> = mu.to_vec();
        let working = spec.working_response(y, &mu_slice)?;
        let z = &working.y_tilde - &offset;
        let (new_beta, factor) = weighted_ls(x, &z, &working.w_tilde, names)?;
        chol = Some(factor);

        // Step halving guards against the occasional deviance increase.
        let mut step = T::one();
        let mut accepted = None;
        for _ in 0..30 {
            let trial = &beta + &((&new_beta - &beta) * step);
            let eta_t = x.dot(&trial) + offset;
            let mu_t: Array1<T> = eta_t.mapv(|e| family.clamp_mean(family.inverse_link(e)).0);
            let dev_t = deviance_of(&mu_t);
            if dev_t.is_finite() && (dev_t <= dev || !dev.is_finite()) {
                accepted = Some((trial, mu_t, dev_t));
                break;
            }
            step = step * T::of(0.5);
        }
        let Some((b, mu_new, dev_new)) = accepted else {
            break;
        };
        let change = (dev - dev_new).abs() / (dev_new.abs() + T::of(0.1));
        beta = b;
        mu = mu_new;
        dev = dev_new;
        if family == Family::Normal || change < T::of(IRLS_TOL) {
            converged = true;
            break;
        }
    }

    // Covariance from the weights at the final mean.
    let final_working = spec.working_response(y, &mu.to_vec())?;
    if family != Family::Normal {
        chol = Some(weighted_ls(x, &(&final_working.y_tilde - &offset), &final_working.w_tilde, names)?.1);
    }
    let nf = T::from_usize_lossy(n);
    let df_residual = n.saturating_sub(p);
    let df = T::from_usize_lossy(df_residual.max(1));
    let pearson: T = (0..n)
        .map(|i| {
            let r = y[i] - mu[i];
            m[i] * r * r / family.variance(mu[i])
        })
        .sum();
    let pearson_dispersion = pearson / df;
    let dispersion = if family == Family::Normal { dev / df } else { T::one() };
    let inv_diag = match &chol {
        Some(c) if p > 0 => c.inverse().diag().to_owned(),
        _ => Array1::zeros(p),
    };
    let std_err = inv_diag.iter().map(|&v| (v * dispersion).sqrt()).collect();

    let ml_phi = if family == Family::Normal { dev / nf } else { T::one() };
    let loglik: T = (0..n)
        .map(|i| family.log_density(y[i], mu[i], ml_phi, m[i]))
        .sum();
    let n_params = T::from_usize_lossy(p + usize::from(family == Family::Normal));
    let aic = -T::of(2.0) * loglik + T::of(2.0) * n_params;

    let total_m: T = m.iter().copied().sum();
    let ybar = (0..n).map(|i| m[i] * y[i]).sum::<T>() / total_m;
    let null_deviance = (0..n).map(|i| family.deviance_term(y[i], ybar, m[i])).sum();
    let r_squared = (family == Family::Normal).then(|| T::one() - dev / null_deviance);

    Ok(GlmFit {
        coef: beta.to_vec(),
        std_err,
        fitted: mu.to_vec(),
        deviance: dev,
        null_deviance,
        dispersion,
        pearson_dispersion,
        loglik,
        aic,
        r_squared,
        df_residual,
        iterations,
        converged,
    })
}

impl<T: Scalar> GlmFit<T> {
    /// Two-sided Wald p-value for coefficient `j`: Student t with the model
    /// dispersion for the normal family, z for binomial, and quasi-Poisson
    /// t (Pearson dispersion) for Poisson.
    pub fn p_value(&self, j: usize, family: Family) -> f64 {
        let coef = self.coef[j].as_f64();
        let df = self.df_residual.max(1) as f64;
        match family {
            Family::Normal => t_p_value(coef / self.std_err[j].as_f64(), df),
            Family::Binomial => {
                let z = coef / self.std_err[j].as_f64();
                2.0 * Normal::standard().cdf(-z.abs())
            }
            Family::Poisson => {
                let se = self.std_err[j].as_f64() * self.pearson_dispersion.as_f64().sqrt();
                t_p_value(coef / se, df)
            }
        }
    }
}

fn t_p_value(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return if t.is_nan() { 1.0 } else { 0.0 };
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    2.0 * dist.cdf(-t.abs())
}

/// Solves the weighted normal equations X'WXβ = X'Wz.
fn weighted_ls<T: Scalar>(
    x: ArrayView2<T>,
    z: &Array1<T>,
    w: &Array1<T>,
    names: &[String],
) -> Result<(Array1<T>, Cholesky<T>)> {
    let wx: Array2<T> = &x * &w.view().insert_axis(Axis(1));
    let a = x.t().dot(&wx);
    let b = wx.t().dot(z);
    let name = |c: usize| names.get(c).cloned().unwrap_or_else(|| format!("column {}", c + 1));
    let dependent = dependent_columns(&a, T::of(1e-10));
    if !dependent.is_empty() {
        return Err(Error::RankDeficiency {
            columns: dependent.into_iter().map(name).collect(),
        });
    }
    let chol = Cholesky::new(&a).map_err(|e| Error::RankDeficiency {
        columns: vec![name(e.index)],
    })?;
    Ok((chol.solve(b.view()), chol))
}
