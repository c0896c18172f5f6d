//! Canonical steady states and canonical paths for infinite horizon optimal harvesting in a
//! vegetation / soil water reaction-diffusion system.
//!
//! The mesh, the model and the objective are generic over [`Scalar`]; the solvers run in `f64`.
//! The aliases below fix the scalar type for the common case.

pub mod bvp;
pub mod continuation;
pub mod dynamics;
pub mod error;
pub mod fem;
pub mod io;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod newton;
pub mod scalar;
pub mod skiba;
pub mod spectral;
pub mod steady;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Mesh = fem::Mesh<f64>;
pub type Operators = fem::Operators<f64>;
pub type ParameterSet = model::ParameterSet<f64>;
pub type SparseMatrix = fem::CsrMatrix<f64>;

pub type Mesh32 = fem::Mesh<f32>;
pub type Operators32 = fem::Operators<f32>;
pub type ParameterSet32 = model::ParameterSet<f32>;
