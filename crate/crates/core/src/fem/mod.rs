//! Linear finite elements with natural (zero flux) boundary conditions.

mod assembly;
mod mesh;
mod sparse;

pub use assembly::Operators;
pub use mesh::{Domain, Mesh};
pub use sparse::CsrMatrix;
