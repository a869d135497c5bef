//! Small dense kernels for the reduced (L×L and (J+1)×(J+1)) systems.
//!
//! Everything of size N×N is avoided elsewhere; the matrices handled here are
//! tiny, so straightforward row-major loops are all that is needed.

use ndarray::{Array1, Array2, ArrayView1};

use crate::scalar::Scalar;

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky<T> {
    l: Array2<T>,
}

/// Failure of an unpivoted factorization: the pivot at `index` was not positive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NotPositiveDefinite {
    pub index: usize,
}

impl<T: Scalar> Cholesky<T> {
    pub fn new(a: &Array2<T>) -> Result<Self, NotPositiveDefinite> {
        let n = a.nrows();
        debug_assert_eq!(n, a.ncols());
        let mut l = Array2::<T>::zeros((n, n));
        for j in 0..n {
            let mut d = a[[j, j]];
            for p in 0..j {
                d = d - l[[j, p]] * l[[j, p]];
            }
            if !(d > T::zero()) || !d.is_finite() {
                return Err(NotPositiveDefinite { index: j });
            }
            let djj = d.sqrt();
            l[[j, j]] = djj;
            for i in (j + 1)..n {
                let mut s = a[[i, j]];
                for p in 0..j {
                    s = s - l[[i, p]] * l[[j, p]];
                }
                l[[i, j]] = s / djj;
            }
        }
        Ok(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn factor(&self) -> &Array2<T> {
        &self.l
    }

    /// Solves `L x = b`.
    pub fn forward(&self, b: ArrayView1<T>) -> Array1<T> {
        let n = self.dim();
        let mut x = Array1::<T>::zeros(n);
        for i in 0..n {
            let mut s = b[i];
            for p in 0..i {
                s = s - self.l[[i, p]] * x[p];
            }
            x[i] = s / self.l[[i, i]];
        }
        x
    }

    /// Solves `L' x = b`.
    pub fn backward(&self, b: ArrayView1<T>) -> Array1<T> {
        let n = self.dim();
        let mut x = Array1::<T>::zeros(n);
        for i in (0..n).rev() {
            let mut s = b[i];
            for p in (i + 1)..n {
                s = s - self.l[[p, i]] * x[p];
            }
            x[i] = s / self.l[[i, i]];
        }
        x
    }

    pub fn solve(&self, b: ArrayView1<T>) -> Array1<T> {
        let y = self.forward(b);
        self.backward(y.view())
    }

    /// Solves `A X = B` column by column.
    pub fn solve_mat(&self, b: &Array2<T>) -> Array2<T> {
        let mut out = Array2::<T>::zeros(b.raw_dim());
        for (j, col) in b.columns().into_iter().enumerate() {
            out.column_mut(j).assign(&self.solve(col));
        }
        out
    }

    /// `b' A⁻¹ b`, via one triangular solve.
    pub fn quad_inverse(&self, b: ArrayView1<T>) -> T {
        let y = self.forward(b);
        y.dot(&y)
    }

    pub fn log_det(&self) -> T {
        let two = T::of(2.0);
        (0..self.dim()).map(|i| two * self.l[[i, i]].ln()).sum()
    }

    pub fn inverse(&self) -> Array2<T> {
        self.solve_mat(&Array2::eye(self.dim()))
    }
}

/// Result of a diagonally pivoted Cholesky factorization of a positive
/// semidefinite matrix, stopped once the remaining pivots fall below
/// `rel_tol · max pivot`.
#[derive(Clone, Debug)]
pub struct PivotedCholesky<T> {
    /// Indices of the leading (numerically independent) rows/columns, in pivot order.
    pub pivots: Vec<usize>,
    /// Cholesky factor of the principal submatrix on `pivots`.
    pub leading: Option<Cholesky<T>>,
}

impl<T: Scalar> PivotedCholesky<T> {
    pub fn rank(&self) -> usize {
        self.pivots.len()
    }
}

pub fn pivoted_cholesky<T: Scalar>(a: &Array2<T>, rel_tol: T) -> PivotedCholesky<T> {
    let n = a.nrows();
    let mut work = a.clone();
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut pivots = Vec::new();
    let max_diag = (0..n).map(|i| a[[i, i]]).fold(T::zero(), |m, d| m.max(d));
    let tol = rel_tol * max_diag;
    if !(max_diag > T::zero()) {
        return PivotedCholesky { pivots, leading: None };
    }
    // Outer-product (Schur complement) elimination on the dense copy.
    while !remaining.is_empty() {
        let (pos, &best) = remaining
            .iter()
            .enumerate()
            .max_by(|(_, &i), (_, &j)| {
                work[[i, i]]
                    .partial_cmp(&work[[j, j]])
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .expect("nonempty");
        let d = work[[best, best]];
        if !(d > tol) {
            break;
        }
        remaining.swap_remove(pos);
        pivots.push(best);
        for &i in &remaining {
            let f = work[[i, best]] / d;
            for &j in &remaining {
                let v = work[[i, j]] - f * work[[best, j]];
                work[[i, j]] = v;
            }
        }
    }
    let leading = if pivots.is_empty() {
        None
    } else {
        let sub = submatrix(a, &pivots);
        Cholesky::new(&sub).ok()
    };
    PivotedCholesky { pivots, leading }
}

/// Indices of columns that are (numerically) linear combinations of earlier
/// columns, judged from the Gram matrix by sequential elimination.
pub fn dependent_columns<T: Scalar>(gram: &Array2<T>, rel_tol: T) -> Vec<usize> {
    let n = gram.nrows();
    let mut basis: Vec<usize> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..n {
        let mut trial = basis.clone();
        trial.push(j);
        let sub = submatrix(gram, &trial);
        let scale = gram[[j, j]].abs();
        match Cholesky::new(&sub) {
            Ok(ch) => {
                let last = ch.factor()[[trial.len() - 1, trial.len() - 1]];
                if last * last <= rel_tol * scale || scale == T::zero() {
                    dependent.push(j);
                } else {
                    basis.push(j);
                }
            }
            Err(_) => dependent.push(j),
        }
    }
    dependent
}

pub fn submatrix<T: Scalar>(a: &Array2<T>, idx: &[usize]) -> Array2<T> {
    Array2::from_shape_fn((idx.len(), idx.len()), |(i, j)| a[[idx[i], idx[j]]])
}
