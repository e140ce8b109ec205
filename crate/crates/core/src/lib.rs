//! Verified training toolkit built around interval bound propagation (IBP).
//!
//! The crate trains small feed-forward classifiers to be provably robust to
//! ℓ∞-bounded input perturbations, attacks them with projected gradient
//! descent, and certifies them with an input-splitting branch-and-bound
//! verifier.
//!
//! Module map:
//! - [`tensor`]: dense f64 tensors, deterministic kernels, seeded RNG.
//! - [`network`]: layers, forward pass, gradient tape, initialization,
//!   architecture strings and model serialization.
//! - [`bounds`]: interval propagation, last-layer elision, specification bounds.
//! - [`training`]: κ/ε curricula, IBP loss, Adam, training loop.
//! - [`attack`]: untargeted PGD.
//! - [`verify`]: IBP certification, branch-and-bound, tightness reports,
//!   polytope sampling, PGD gap hunting.
//! - [`data`]: IDX parsing, toy dataset generation, normalization.

// `!(x >= 0.0)` style checks are there to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod bounds;
pub mod data;
pub mod network;
pub mod tensor;
pub mod training;
pub mod verify;

pub use bounds::{IntervalBounds, LinearSpecification};
pub use data::Dataset;
pub use network::{Activation, Layer, Network};
pub use tensor::{Rng, Tensor};
