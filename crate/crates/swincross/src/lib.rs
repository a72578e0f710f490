//! Dual-branch 3D shifted-window transformer with cross-modal attention
//! fusion and a convolutional decoder, built on a self-contained dense
//! tensor engine with reverse-mode differentiation.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors, forward operators, autograd, FD checking
//! - [`windowing`]: 3D window partitioning, cyclic shifts, shift masks
//! - [`attention`]: windowed self-attention and the cross-modal variants
//! - [`encoder`]: patch embedding, patch merging, dual-branch stages,
//!   six-level feature pyramid
//! - [`decoder`]: residual-block U-shaped convolutional decoder
//! - [`model`]: configuration, assembly, checkpoints, cost accounting
//! - [`train`]: soft-Dice + BCE objective, Adam, phantom overfitting
//! - [`data`]: volume file I/O, synthetic phantoms, Dice metric, folds

pub mod attention;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod init;
pub mod model;
pub mod tensor;
pub mod train;
pub mod windowing;

pub use error::{Error, Result};
pub use tensor::{DType, NoGradGuard, Parameter, Storage, Tensor};
