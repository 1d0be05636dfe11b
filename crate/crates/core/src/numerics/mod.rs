//! Dense numerics: arrays, seeded randomness, the differentiable layer
//! vocabulary, Adam, a finite-difference oracle and the checkpoint container.

pub mod array;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod optim;
pub mod rng;

pub use array::{Array, Scalar};
pub use checkpoint::{Checkpoint, Record};
pub use gradcheck::finite_diff_check;
pub use layers::{conv2d, dense, Layer, LayerKind, LayerSpec};
pub use network::{grad, grad_with_loss, Sequential, Tape};
pub use optim::{AdamHyper, AdamState};
pub use rng::Rng;
