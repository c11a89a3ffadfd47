//! pxray explains the decisions of visuomotor policy networks: it propagates
//! relevance from motor-torque outputs back to the image pixels and joint
//! configuration that produced them, weighting each torque by how much it
//! actually moves the end-effector.
//!
//! The crate bundles a minimal deterministic tensor/network engine, three
//! attribution backends (deep Taylor z+, relative attributing propagation,
//! guided backpropagation times input), a planar-arm kinematics model for
//! the importance weighting, a toy reaching environment with a behavioral
//! cloning trainer, and the analysis drivers that turn rollouts into
//! relevance-ratio time series, CSV files, and PGM heatmaps.

pub mod analysis;
pub mod attribution;
pub mod checks;
pub mod env;
pub mod error;
pub mod gradient;
pub mod kinematics;
pub mod network;
pub mod tensor;
pub mod train;
pub mod weights;

pub use attribution::{
    attribute, attribute_dtd, attribute_gbp, attribute_rap, AttributionResult, DropStats,
    ImportanceFactors, Method,
};
pub use error::{Error, Result};
pub use kinematics::{AlphaMode, ArmModel, ArmState};
pub use network::{ForwardTrace, Layer, PolicyNetwork};
pub use tensor::Tensor;
