//! Unsupervised mutual transformer learning for whole-slide image
//! classification.

pub mod arrays;
pub mod autograd;
pub mod baseline;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod features;
pub mod labels;
pub mod mutual;
pub mod nn;
pub mod params;
pub mod slide;
pub mod supervision;
pub mod tensor;
pub mod tlc;
pub mod tplg;

pub use error::{Result, UmtlError};
pub use tensor::Mat;
