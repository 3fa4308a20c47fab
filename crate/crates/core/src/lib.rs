//! Deformation-constrained pooling ("def-pooling") as a differentiable layer,
//! a small convnet built around it, and a toy detection pipeline on
//! synthetic deformable-part scenes.

pub mod defpool;
pub mod dpm;
pub mod error;
pub mod gradcheck;
pub mod net;
pub mod par;
pub mod pipeline;
pub mod tensor;

pub use defpool::{
    defpool_backward, defpool_forward, make_directional_basis, make_global_basis, make_maxpool_basis,
    make_quadratic_basis, ArgmaxRecord, DefPoolConfig, PenaltyBasis,
};
pub use dpm::{dpm_penalized_map, dpm_score, QuadraticDeformation};
pub use error::{Error, Result};
pub use tensor::{conv2d, load_tensor, max_pool, save_tensor, ConvFilterBank, Tensor};
