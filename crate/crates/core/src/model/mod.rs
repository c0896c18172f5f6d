//! The canonical system of the harvesting problem and the privately optimized model.

mod canonical;
mod params;
mod private;

pub use canonical::{
    components, control_law, diffusion_diagonal, effort_per_biomass, flat_kinetics, jacobian, kinetics,
    node_kinetics, residual, NodeKinetics, COMPONENTS,
};
pub use params::{ParameterSet, PARAM_KEYS};
pub use private::{
    private_jacobian, private_node_kinetics, private_profit, private_residual, private_residual_with, tax_field,
    taxed_private_effort,
};
