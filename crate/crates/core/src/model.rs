//! Core data types: the dataset, the latent mixture labels, and θ.

use std::collections::HashSet;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::FamilySpec;
use crate::scalar::Scalar;

/// Mixture component labels: left (negative effect), null, right (positive effect).
pub const LABELS: [i8; 3] = [-1, 0, 1];

#[inline]
pub(crate) fn label_slot(label: i8) -> usize {
    (label + 1) as usize
}

/// Response, locked-in design X (N×J) and putative design Z (N×K).
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub y: Array1<T>,
    pub x: Array2<T>,
    pub z: Array2<T>,
    /// Fixed additive term on the linear-predictor scale (e.g. log exposure).
    pub offset: Array1<T>,
    pub x_names: Vec<String>,
    pub z_names: Vec<String>,
    pub spec: FamilySpec<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        y: Array1<T>,
        x: Array2<T>,
        z: Array2<T>,
        x_names: Vec<String>,
        z_names: Vec<String>,
        spec: FamilySpec<T>,
    ) -> Result<Self> {
        let n = y.len();
        let data = Self {
            offset: Array1::zeros(n),
            y,
            x,
            z,
            x_names,
            z_names,
            spec,
        };
        data.validate()?;
        Ok(data)
    }

    /// Same as [`Dataset::new`] with default column names.
    pub fn unnamed(y: Array1<T>, x: Array2<T>, z: Array2<T>, spec: FamilySpec<T>) -> Result<Self> {
        let x_names = (1..=x.ncols()).map(|j| format!("X{j}")).collect();
        let z_names = (1..=z.ncols()).map(|k| format!("Z{k}")).collect();
        Self::new(y, x, z, x_names, z_names, spec)
    }

    pub fn with_offset(mut self, offset: Array1<T>) -> Result<Self> {
        self.offset = offset;
        self.validate()?;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn j(&self) -> usize {
        self.x.ncols()
    }

    pub fn k(&self) -> usize {
        self.z.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let bad = |msg: String| Err(Error::validation("likelihood_engine", msg));
        if self.x.nrows() != n || self.z.nrows() != n || self.offset.len() != n {
            return bad(format!(
                "row mismatch: y {n}, X {}, Z {}, offset {}",
                self.x.nrows(),
                self.z.nrows(),
                self.offset.len()
            ));
        }
        if self.spec.len() != n {
            return bad(format!("{} prior weights for {n} rows", self.spec.len()));
        }
        if self.x_names.len() != self.j() || self.z_names.len() != self.k() {
            return bad("column name count does not match design width".into());
        }
        if self.k() == 0 {
            return bad("no putative predictors".into());
        }
        let mut seen = HashSet::new();
        for name in self.x_names.iter().chain(&self.z_names) {
            if !seen.insert(name.as_str()) {
                return bad(format!("duplicate column name '{name}'"));
            }
        }
        if !self.x.iter().chain(self.z.iter()).chain(self.offset.iter()).all(|v| v.is_finite()) {
            return bad("non-finite design entry".into());
        }
        self.spec
            .validate_response(self.y.as_slice().expect("contiguous response"))
    }

    pub fn y_slice(&self) -> &[T] {
        self.y.as_slice().expect("contiguous response")
    }
}

/// Latent labels γ ∈ {−1, 0, 1}^K with cached counts and active set.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<i8>", into = "Vec<i8>")]
pub struct MixtureAssignment {
    gamma: Vec<i8>,
    counts: [usize; 3],
    active: Vec<usize>,
}

impl MixtureAssignment {
    pub fn null(k: usize) -> Self {
        Self {
            gamma: vec![0; k],
            counts: [0, k, 0],
            active: Vec::new(),
        }
    }

    pub fn new(gamma: Vec<i8>) -> Result<Self> {
        let mut counts = [0usize; 3];
        let mut active = Vec::new();
        for (k, &g) in gamma.iter().enumerate() {
            if !(-1..=1).contains(&g) {
                return Err(Error::validation(
                    "gam_selector",
                    format!("label {g} at position {k} is not in {{-1, 0, 1}}"),
                ));
            }
            counts[label_slot(g)] += 1;
            if g != 0 {
                active.push(k);
            }
        }
        Ok(Self {
            gamma,
            counts,
            active,
        })
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn labels(&self) -> &[i8] {
        &self.gamma
    }

    pub fn label(&self, k: usize) -> i8 {
        self.gamma[k]
    }

    /// (n₋₁, n₀, n₊₁).
    pub fn counts(&self) -> [usize; 3] {
        self.counts
    }

    /// Indices with γ_k ≠ 0, ascending.
    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn n_active(&self) -> usize {
        self.active.len()
    }

    pub fn set(&mut self, k: usize, label: i8) {
        assert!((-1..=1).contains(&label), "invalid label {label}");
        let old = self.gamma[k];
        if old == label {
            return;
        }
        self.counts[label_slot(old)] -= 1;
        self.counts[label_slot(label)] += 1;
        self.gamma[k] = label;
        match (old, label) {
            (0, _) => {
                let pos = self.active.partition_point(|&a| a < k);
                self.active.insert(pos, k);
            }
            (_, 0) => self.active.retain(|&a| a != k),
            _ => {}
        }
    }

    pub fn with(&self, k: usize, label: i8) -> Self {
        let mut g = self.clone();
        g.set(k, label);
        g
    }
}

impl TryFrom<Vec<i8>> for MixtureAssignment {
    type Error = Error;

    fn try_from(v: Vec<i8>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<MixtureAssignment> for Vec<i8> {
    fn from(g: MixtureAssignment) -> Self {
        g.gamma
    }
}

/// θ = {β, μ, σ², φ, p}. `p` is ordered (p_L, p_0, p_R).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theta<T> {
    pub beta: Vec<T>,
    pub mu: T,
    pub sigma2: T,
    pub phi: T,
    pub p: [T; 3],
}

impl<T: Scalar> Theta<T> {
    /// Starting point: β = 0, no mixture effect, φ = 1.
    pub fn initial(j: usize, gamma: &MixtureAssignment) -> Self {
        Self {
            beta: vec![T::zero(); j],
            mu: T::zero(),
            sigma2: T::zero(),
            phi: T::one(),
            p: mixture_probs(gamma),
        }
    }

    pub fn prob(&self, label: i8) -> T {
        self.p[label_slot(label)]
    }
}

/// p_j = n_j / K.
pub fn mixture_probs<T: Scalar>(gamma: &MixtureAssignment) -> [T; 3] {
    let k = T::from_usize_lossy(gamma.len().max(1));
    let c = gamma.counts();
    [
        T::from_usize_lossy(c[0]) / k,
        T::from_usize_lossy(c[1]) / k,
        T::from_usize_lossy(c[2]) / k,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mixture_prob_examples() {
        let mut g = vec![0i8; 10];
        g[2] = -1;
        g[7] = 1;
        let p: [f64; 3] = mixture_probs(&MixtureAssignment::new(g).unwrap());
        assert_eq!(p, [0.1, 0.8, 0.1]);
        let p: [f64; 3] = mixture_probs(&MixtureAssignment::null(10));
        assert_eq!(p, [0.0, 1.0, 0.0]);
        let mut g = vec![0i8; 10];
        for k in 0..3 {
            g[k] = 1;
        }
        let p: [f64; 3] = mixture_probs(&MixtureAssignment::new(g).unwrap());
        assert_eq!(p, [0.0, 0.7, 0.3]);
    }

    #[test]
    fn invalid_labels_rejected() {
        assert!(MixtureAssignment::new(vec![0, 2, -1]).is_err());
    }

    proptest! {
        #[test]
        fn set_keeps_counts_consistent(init in proptest::collection::vec(-1i8..=1, 1..30), moves in proptest::collection::vec((0usize..30, -1i8..=1), 0..40)) {
            let mut g = MixtureAssignment::new(init.clone()).unwrap();
            for (k, l) in moves {
                let k = k % init.len();
                g.set(k, l);
            }
            let fresh = MixtureAssignment::new(g.labels().to_vec()).unwrap();
            prop_assert_eq!(&g, &fresh);
            let c = g.counts();
            prop_assert_eq!(c[0] + c[1] + c[2], g.len());
            prop_assert_eq!(c[0] + c[2], g.n_active());
        }

        #[test]
        fn p_update_maximizes_multinomial_term(c0 in 0usize..20, c1 in 1usize..40, c2 in 0usize..20, a in -0.05f64..0.05, b in -0.05f64..0.05) {
            let k = (c0 + c1 + c2) as f64;
            let n = [c0 as f64, c1 as f64, c2 as f64];
            let p = [n[0] / k, n[1] / k, n[2] / k];
            let term = |q: [f64; 3]| -> f64 {
                (0..3).map(|i| if n[i] == 0.0 { 0.0 } else { n[i] * q[i].ln() }).sum()
            };
            let q = [p[0] + a, p[1] - a - b, p[2] + b];
            prop_assume!(q.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!(term(q) <= term(p) + 1e-12);
        }
    }
}
