//! Masked acoustic-token modeling engine for speech restoration.
//!
//! The crate bundles a small reverse-mode autodiff core, an STFT feature
//! pipeline, a synthetic frozen teacher with k-means tokenization, a toy
//! residual-vector-quantization codec, mask scheduling, the joint
//! encoder/generator model, iterative confidence decoding with
//! classifier-free guidance, a distortion pipeline, and the glue needed by
//! the command-line front end.

pub mod adam;
pub mod audio;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod distortion;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod graph;
pub mod instrument;
pub mod kmeans;
pub mod manifest;
pub mod masking;
pub mod model;
pub mod nn;
pub mod sampler;
pub mod seeds;
pub mod selftest;
pub mod teacher;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
