//! Network randomization for visual generalization in reinforcement
//! learning.
//!
//! The crate bundles a small autodiff engine ([`nn`]), the randomized
//! input layer and its mixture prior ([`randnet`]), desk-scale
//! environments ([`envs`]), the actor-critic network ([`policy`]), PPO
//! ([`ppo`]), the training loop ([`trainer`]), evaluation metrics
//! ([`metrics`]) and experiment plumbing ([`experiment`]).
//!
//! Numeric code is generic over [`nn::Scalar`]; the aliases below pin the
//! two concrete precisions.

pub mod envs;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod policy;
pub mod ppo;
pub mod randnet;
pub mod trainer;

pub use error::{Error, Result};

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Graph32 = nn::Graph<f32>;
pub type Graph64 = nn::Graph<f64>;
