//! Cooperative edge caching for vehicular networks.
//!
//! Greenshields mobility, Shannon-rate delivery delays, a GRU-VAE content
//! popularity predictor trained by mobility-aware asynchronous federated
//! learning, a soft actor-critic cache allocator, a digital-twin mirror and
//! the simulation harness tying them together.

pub mod afl;
pub mod cache;
pub mod cache_rl;
pub mod comms;
pub mod error;
pub mod harness;
pub mod mobility;
pub mod nn;
pub mod predictor;
pub mod scalar;
pub mod twin;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = nn::Tensor<f64>;
pub type Tensor32 = nn::Tensor<f32>;
pub type ParamVector = nn::ParamVector<f64>;
pub type ParamVector32 = nn::ParamVector<f32>;
pub type AdamState = nn::AdamState<f64>;
