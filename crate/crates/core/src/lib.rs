//! Driving as next-token prediction over a unified observation/action vocabulary.

// `!(x > 0.0)` style checks reject NaN on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod action_codec;
pub mod driving_language;
pub mod error;
pub mod evaluator;
pub mod geometry;
pub mod model;
pub mod obs_tokenizer;
pub mod pipeline;
pub mod sampler;
pub mod train;
pub mod world_sim;

pub use error::{Error, Result};
