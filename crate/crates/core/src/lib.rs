//! Diffeomorphic image registration by integrating a smoothed, parameterized
//! velocity field over the voxel cloud and optimizing similarity plus
//! regularization with adjoint-sensitivity gradients.

pub mod adjoint;
pub mod error;
pub mod fixtures;
pub mod flow;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod smoothing;
pub mod velocity;

pub use error::{Error, Result};
pub use grid::{
    jacobian_det_map, make_identity_grid, spatial_gradient, warp, warp_labels, GradientField, Image,
    JacobianMap, LabelMap, Shape, VoxelCloud,
};
pub use smoothing::GaussianKernel;
pub use velocity::{FieldKind, ModelDescriptor, NeuralFieldSpec, TimeMode, VelocityModel};
