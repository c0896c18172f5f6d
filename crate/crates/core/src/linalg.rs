//! Bridges to the `faer` factorizations.

use faer::linalg::solvers::{PartialPivLu, Solve};
use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;

use crate::error::{Error, Result};
use crate::fem::CsrMatrix;

/// Sparse LU factorization of a square matrix.
pub struct SparseLu {
    n: usize,
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
}

pub fn to_faer_sparse(nrows: usize, ncols: usize, trip: impl Iterator<Item = (usize, usize, f64)>) -> Result<SparseColMat<usize, f64>> {
    let entries: Vec<Triplet<usize, usize, f64>> = trip.map(|(r, c, v)| Triplet::new(r, c, v)).collect();
    SparseColMat::try_new_from_triplets(nrows, ncols, &entries)
        .map_err(|e| Error::InvalidArgument(format!("sparse matrix creation failed: {e:?}")))
}

impl SparseLu {
    pub fn new(a: &CsrMatrix<f64>) -> Result<Self> {
        Self::from_triplets(a.nrows(), a.triplets())
    }

    pub fn from_triplets(n: usize, trip: impl Iterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mat = to_faer_sparse(n, n, trip)?;
        let lu = mat.sp_lu().map_err(|e| Error::SingularJacobian(format!("{e:?}")))?;
        Ok(Self { n, lu })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A x = b`; a non-finite solution is reported as a singular matrix.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let mut x = Col::<f64>::from_fn(self.n, |i| b[i]);
        self.lu.solve_in_place(x.as_mat_mut());
        let out: Vec<f64> = x.iter().copied().collect();
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(Error::SingularJacobian("non-finite solution of the linear system".into()))
        }
    }

    pub fn solve_transpose(&self, b: &[f64]) -> Result<Vec<f64>> {
        let mut x = Col::<f64>::from_fn(self.n, |i| b[i]);
        self.lu.solve_transpose_in_place(x.as_mat_mut());
        let out: Vec<f64> = x.iter().copied().collect();
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(Error::SingularJacobian("non-finite solution of the transposed system".into()))
        }
    }
}

pub fn to_dense(a: &CsrMatrix<f64>) -> Mat<f64> {
    let mut m = Mat::<f64>::zeros(a.nrows(), a.ncols());
    for (r, c, v) in a.triplets() {
        m[(r, c)] += v;
    }
    m
}

/// Sign of the determinant from a partial pivoting LU; zero if a pivot vanishes.
pub fn determinant_sign(a: MatRef<'_, f64>) -> f64 {
    let lu = PartialPivLu::new(a);
    let u = lu.U();
    let mut sign = 1.0;
    for i in 0..u.nrows() {
        let d = u[(i, i)];
        if d == 0.0 || !d.is_finite() {
            return 0.0;
        }
        if d < 0.0 {
            sign = -sign;
        }
    }
    let (fwd, _) = lu.P().arrays();
    sign * permutation_parity(fwd)
}

fn permutation_parity(p: &[usize]) -> f64 {
    let mut seen = vec![false; p.len()];
    let mut parity = 1.0;
    for start in 0..p.len() {
        if seen[start] {
            continue;
        }
        let mut len = 0;
        let mut i = start;
        while !seen[i] {
            seen[i] = true;
            i = p[i];
            len += 1;
        }
        if len % 2 == 0 {
            parity = -parity;
        }
    }
    parity
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}
