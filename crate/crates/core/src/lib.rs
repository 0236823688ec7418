//! Selective state-space sequence layers with bidirectional variants, the
//! blocks that host them, and small experiments built on top.

pub mod autodiff;
pub mod bench;
pub mod bimamba;
pub mod cli;
pub mod blocks;
pub mod error;
pub mod experiments;
pub mod mamba;
pub mod numerics;
pub mod params;
pub mod ssm;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
