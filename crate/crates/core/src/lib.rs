//! Forward-forward trained autoencoders for short-block channel coding.
//!
//! The crate trains an encoder/decoder pair that maps `k`-bit messages onto
//! `n` real channel symbols, using either layer-local forward-forward
//! learning or one of two backpropagation baselines, and measures block error
//! rates by Monte-Carlo simulation over AWGN and Rayleigh block-fading
//! channels.

pub mod channel;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod models;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
