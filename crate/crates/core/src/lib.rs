//! Stochastic encoder-decoder transformer with local winner-takes-all
//! feed-forward units and Gaussian variational weights.

pub mod attention;
pub mod bleu;
pub mod checkpoint;
pub mod compression;
pub mod config;
pub mod data;
pub mod decoding;
pub mod error;
pub mod graph;
pub mod lwta;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod transformer;
pub mod var_weights;

pub use error::{Error, Result};
