//! Core-space mixture of LoRA (CoMoL) adapters and their MoE-LoRA baselines.
//!
//! The crate is organized bottom-up:
//!
//! - [`linalg`]: dense matrices, softmax, one-sided Jacobi SVD.
//! - [`routing`]: soft, sparse top-k, instance-level and core-space routers.
//! - [`adapters`]: LoRA, soft/sparse MoE-LoRA, SMEAR and CoMoL layers with
//!   analytic backward passes.
//! - [`coreconvert`]: SVD re-parameterization of LoRA pairs into core form.
//! - [`accounting`]: closed-form parameter and FLOP counts.
//! - [`synthtrain`]: a synthetic token-clustered regression task and trainer.
//! - [`bench`]: latency microbenchmarks of the adapter forwards.
//! - [`persistence`]: two-file manifest + blob checkpoints.
//! - [`verify`]: equivalence and finite-difference gradient suites.

pub mod accounting;
pub mod adapters;
pub mod bench;
pub mod coreconvert;
pub mod error;
pub mod flops;
pub mod linalg;
pub mod persistence;
pub mod rng;
pub mod routing;
pub mod synthtrain;
pub mod verify;

pub use adapters::{AdapterLayer, AdapterParams, ComolParams, LayerConfig, LoraParams, Method};
pub use error::{Error, Result};
pub use linalg::{DType, Matrix, Real};
