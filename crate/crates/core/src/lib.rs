//! Point-cloud learning on top of a frozen, image-pretrained transformer.
//!
//! A point cloud is cut into local patches (farthest point sampling plus
//! k-nearest-neighbour grouping), each patch is embedded by a small shared
//! MLP, and the resulting tokens, together with a class token and learnable
//! task tokens, run through a transformer whose weights stay frozen. Only
//! the tokenizer, the task tokens and the task heads are trained.

pub mod analysis;
pub mod cli;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod heads;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod tokenization;
pub mod training;

pub use error::{Error, Result};
