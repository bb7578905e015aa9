//! Thermodynamic formalism on the full shift and the doubling-type circle
//! maps: transfer operators, equilibrium states, and the pressure metric on
//! the manifold of normalized potentials.

pub mod acceptance;
pub mod circle;
pub mod curvature;
pub mod error;
pub mod experiment;
pub mod function_space;
pub mod geodesy;
pub mod geometry;
pub mod transfer;

pub use error::{Error, Result};
pub use function_space::{CircleGridFunction, CylinderFunction, PointwiseOp, ShiftSpace};
pub use transfer::{GibbsData, TransferMatrix};
