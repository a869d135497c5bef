use ndarray::{concatenate, Array1, Array2, Axis};
use rayon::prelude::*;

use super::{residual, PrecisionCache};
use crate::error::{Error, Result};
use crate::family::WorkingData;
use crate::linalg::pivoted_cholesky;
use crate::model::{label_slot, Dataset, MixtureAssignment, Theta, LABELS};
use crate::scalar::Scalar;

/// A column whose W-weighted residual against span[X, ZΓ] is below this
/// fraction of its own weighted norm is treated as collinear with the model.
pub const COLLINEARITY_TOL: f64 = 1e-10;

/// Scores single-coordinate relabelings against a frozen state.
///
/// For a proposal that changes γ_k, Σ changes by ±σ² z_k z_k' (or not at all
/// for a sign flip) and the mean by μ(j − γ_k) z_k, so every d_{j,k} follows
/// from three scalars per column: q_k = z_k'Σ⁻¹z_k, b_k = z_k'Σ⁻¹r and the
/// current r'Σ⁻¹r. The scorer is immutable and `Sync`; the sweep fans out
/// over workers and is collected in index order.
#[derive(Clone, Debug)]
pub struct CandidateScorer<T> {
    labels: Vec<i8>,
    p: [T; 3],
    mu: T,
    sigma2: T,
    quad: T,
    q: Vec<T>,
    b: Vec<T>,
    collinear: Vec<bool>,
}

impl<T: Scalar> CandidateScorer<T> {
    pub fn new(
        data: &Dataset<T>,
        working: &WorkingData<T>,
        gamma: &MixtureAssignment,
        theta: &Theta<T>,
        cache: &PrecisionCache<T>,
    ) -> Result<Self> {
        if cache.active() != gamma.active() {
            return Err(Error::validation(
                "likelihood_engine",
                "precision cache was built for a different assignment",
            ));
        }
        let phi = cache.phi();
        let ratio = cache.sigma2() / phi;
        let w = cache.weights();
        let r = residual(data, working, cache, theta);
        let sr = cache.apply_inverse(&r);
        let quad = r.dot(&sr);
        let b = data.z.t().dot(&sr).to_vec();

        // Z'W[X, U] in one product; the U block doubles as G = Z'WU.
        let wx = &data.x * &w.view().insert_axis(Axis(1));
        let wb = concatenate(Axis(1), &[wx.view(), cache.wu().view()])
            .expect("matching row counts");
        let basis = concatenate(Axis(1), &[data.x.view(), cache.u().view()])
            .expect("matching row counts");
        let basis_gram = basis.t().dot(&wb);
        let pivoted = pivoted_cholesky(&basis_gram, T::of(super::RANK_TOL));
        let zwb = data.z.t().dot(&wb);
        let zwz: Array1<T> = (&data.z * &data.z * &w.view().insert_axis(Axis(1))).sum_axis(Axis(0));

        let j = data.j();
        let l = cache.n_active();
        let core = cache.core();
        let tol = T::of(COLLINEARITY_TOL);
        let rows: Vec<(T, bool)> = (0..data.k())
            .into_par_iter()
            .map(|k| {
                let row = zwb.row(k);
                let mut g_quad = T::zero();
                if let Some(core) = core {
                    let g = row.slice(ndarray::s![j..j + l]);
                    g_quad = core.quad_inverse(g);
                }
                let q = (zwz[k] - ratio * g_quad) / phi;
                let projected = match &pivoted.leading {
                    Some(lead) => {
                        let g: Array1<T> = pivoted.pivots.iter().map(|&c| row[c]).collect();
                        lead.quad_inverse(g.view())
                    }
                    None => T::zero(),
                };
                let resid = zwz[k] - projected;
                let collinear = !(zwz[k] > T::zero()) || resid <= tol * zwz[k];
                (q, collinear)
            })
            .collect();
        let (q, collinear): (Vec<T>, Vec<bool>) = rows.into_iter().unzip();
        Ok(Self {
            labels: gamma.labels().to_vec(),
            p: theta.p,
            mu: theta.mu,
            sigma2: theta.sigma2,
            quad,
            q,
            b,
            collinear,
        })
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    /// True when activating column k would make the active set collinear with [X, ZΓ].
    pub fn is_collinear(&self, k: usize) -> bool {
        self.collinear[k]
    }

    /// d_{j,k}: change in ℓ from setting γ_k = `label`, all else fixed.
    /// Returns −∞ (never NaN) for proposals that are collinear with the
    /// current model or that move into a component with p_j = 0.
    pub fn delta(&self, k: usize, label: i8) -> T {
        let current = self.labels[k];
        if label == current {
            return T::zero();
        }
        let p_new = self.p[label_slot(label)];
        let p_old = self.p[label_slot(current)];
        if !(p_new > T::zero()) {
            return T::neg_infinity();
        }
        let mixture = p_new.ln() - p_old.ln();

        // +1: activation adds σ² z z' to Σ; −1: removal subtracts it; 0: sign flip.
        let eps = match (current, label) {
            (0, _) => {
                if self.collinear[k] {
                    return T::neg_infinity();
                }
                T::one()
            }
            (_, 0) => -T::one(),
            _ => T::zero(),
        };
        let a = self.mu * T::of(f64::from(label - current));
        let (q, b) = (self.q[k], self.b[k]);
        let two = T::of(2.0);
        let mut new_quad = self.quad - two * a * b + a * a * q;
        let mut dlogdet = T::zero();
        if eps != T::zero() && self.sigma2 > T::zero() {
            let denom = T::one() + eps * self.sigma2 * q;
            if !(denom > T::of(1e-14)) {
                return T::neg_infinity();
            }
            let t = b - a * q;
            new_quad = new_quad - eps * self.sigma2 * t * t / denom;
            dlogdet = denom.ln();
        }
        let d = -(new_quad - self.quad) / two - dlogdet / two + mixture;
        if d.is_nan() {
            T::neg_infinity()
        } else {
            d
        }
    }

    /// All 3K scores, row k holding (d_{−1,k}, d_{0,k}, d_{+1,k}).
    pub fn sweep(&self) -> Vec<[T; 3]> {
        (0..self.k())
            .into_par_iter()
            .map(|k| LABELS.map(|label| self.delta(k, label)))
            .collect()
    }

    /// Dense K×3 matrix of the sweep.
    pub fn sweep_matrix(&self) -> Array2<T> {
        let rows = self.sweep();
        Array2::from_shape_fn((rows.len(), 3), |(k, j)| rows[k][j])
    }
}
