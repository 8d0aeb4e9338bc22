//! Federated learning with user-level differential privacy at desk scale.
//!
//! The numerical core ([`param_tree`], [`models`], [`optimizers`],
//! [`clipping`], [`dp_mechanism`], [`fed_engine`]) is generic over the scalar
//! type through [`Real`]; the aliases below fix it to `f64` or `f32`. The
//! accountant always works in `f64`, and exact checks of the noise algebra use
//! `num_rational` types through the same generic functions.

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod clipping;
pub mod config;
pub mod data_synth;
pub mod dp_mechanism;
pub mod error;
pub mod fed_engine;
pub mod models;
pub mod optimizers;
pub mod param_tree;
pub mod rng;
pub mod scalar;
pub mod telemetry;

pub use error::{Error, Result};
pub use scalar::Real;

pub type ParamTreeF64 = param_tree::ParamTree<f64>;
pub type ParamTreeF32 = param_tree::ParamTree<f32>;
pub type BatchF64 = models::Batch<f64>;
pub type BatchF32 = models::Batch<f32>;
pub type ClientPartitionF64 = data_synth::ClientPartition<f64>;
pub type ClientPartitionF32 = data_synth::ClientPartition<f32>;
pub type FederationConfigF64 = fed_engine::FederationConfig<f64>;
pub type FederationConfigF32 = fed_engine::FederationConfig<f32>;
