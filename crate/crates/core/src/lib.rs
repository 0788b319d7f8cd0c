//! Instrumented GPT-2 inference and FFN value-vector analysis.
//!
//! The forward pass in [`model`] records the residual stream around every FFN
//! block together with the coefficients `m_i` of each value vector `v_i`, so an
//! FFN output can be read as a sum of sub-updates `m_i v_i` and projected into
//! vocabulary space via [`lens`].

pub mod analysis;
pub mod assets;
pub mod cli;
pub mod cluster;
pub mod corpus;
pub mod error;
pub mod exit;
pub mod lens;
pub mod math;
pub mod model;
pub mod service;
pub mod steering;

pub use error::{Error, Result};
pub use model::{ForwardOptions, Intervention, Model, ResidualTrace};
