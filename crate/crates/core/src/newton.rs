//! Damped Newton iteration for sparse nonlinear systems.

use crate::error::{Error, Result};
use crate::linalg::{norm_inf, SparseLu};
use crate::SparseMatrix;

/// A square nonlinear system `F(x) = 0` with a sparse Jacobian.
pub trait NonlinearSystem {
    fn dim(&self) -> usize;
    fn residual(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn jacobian(&self, x: &[f64]) -> Result<SparseMatrix>;

    /// Repairs or rejects a trial iterate. Returning `false` makes the line search back off.
    fn admit(&self, _x: &mut [f64]) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    /// Convergence threshold on `‖F‖∞`.
    pub tol: f64,
    pub max_iter: usize,
    /// Sufficient decrease constant of the Armijo test on `‖F‖²`.
    pub armijo: f64,
    pub min_damping: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 30, armijo: 1e-4, min_damping: 1.0 / 1024.0 }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonReport {
    pub solution: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    /// `‖δ_k‖∞` of the accepted (damped) increments.
    pub increments: Vec<f64>,
}

fn sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Newton's method with Armijo backtracking on `‖F‖²`.
pub fn newton(sys: &impl NonlinearSystem, x0: &[f64], opts: &NewtonOptions) -> Result<NewtonReport> {
    if x0.len() != sys.dim() {
        return Err(Error::InvalidArgument(format!("initial guess has length {}, expected {}", x0.len(), sys.dim())));
    }
    let mut x = x0.to_vec();
    let mut f = sys.residual(&x)?;
    let mut increments = Vec::new();
    for it in 0..=opts.max_iter {
        let res = norm_inf(&f);
        if !res.is_finite() {
            return Err(Error::NonConvergence { iterations: it, residual: res });
        }
        if res <= opts.tol {
            return Ok(NewtonReport { solution: x, iterations: it, residual: res, increments });
        }
        if it == opts.max_iter {
            return Err(Error::NonConvergence { iterations: it, residual: res });
        }
        let lu = SparseLu::new(&sys.jacobian(&x)?)?;
        let delta = lu.solve(&f)?;
        let phi0 = sq(&f);
        let mut t = 1.0;
        loop {
            let mut trial: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a - t * d).collect();
            if sys.admit(&mut trial) {
                if let Ok(ft) = sys.residual(&trial) {
                    let phi = sq(&ft);
                    if phi.is_finite() && phi <= (1.0 - 2.0 * opts.armijo * t) * phi0 {
                        increments.push(t * norm_inf(&delta));
                        x = trial;
                        f = ft;
                        break;
                    }
                }
            }
            t *= 0.5;
            if t < opts.min_damping {
                return Err(Error::NonConvergence { iterations: it + 1, residual: res });
            }
        }
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Rosen;

    impl NonlinearSystem for Rosen {
        fn dim(&self) -> usize {
            2
        }
        fn residual(&self, x: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]])
        }
        fn jacobian(&self, x: &[f64]) -> Result<SparseMatrix> {
            Ok(SparseMatrix::from_triplets(2, 2, &[(0, 0, -20.0 * x[0]), (0, 1, 10.0), (1, 0, -1.0)]))
        }
    }

    #[test]
    fn converges_quadratically() {
        let rep = newton(&Rosen, &[-1.2, 1.0], &NewtonOptions { tol: 1e-13, ..Default::default() }).unwrap();
        assert!((rep.solution[0] - 1.0).abs() < 1e-12 && (rep.solution[1] - 1.0).abs() < 1e-12);
        let again = newton(&Rosen, &rep.solution, &NewtonOptions::default()).unwrap();
        assert_eq!(again.iterations, 0);
    }

    struct Singular;

    impl NonlinearSystem for Singular {
        fn dim(&self) -> usize {
            2
        }
        fn residual(&self, x: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![x[0] + x[1] - 1.0, 2.0 * (x[0] + x[1])])
        }
        fn jacobian(&self, _: &[f64]) -> Result<SparseMatrix> {
            Ok(SparseMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 1.0), (1, 0, 2.0), (1, 1, 2.0)]))
        }
    }

    #[test]
    fn singular_jacobian_is_reported() {
        let err = newton(&Singular, &[0.3, 0.2], &NewtonOptions::default()).unwrap_err();
        assert!(matches!(err, Error::SingularJacobian(_) | Error::NonConvergence { .. }), "{err}");
    }
}
