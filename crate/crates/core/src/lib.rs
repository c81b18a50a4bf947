//! Feature-space decomposition and synthesis for generalized zero-shot
//! classification. The library splits precomputed image features into a
//! semantically aligned part and a residual part, trains a conditional
//! generator for unseen classes on top of that split, and evaluates the
//! resulting classifier with per-class balanced accuracy.

pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod data;
pub mod decomposer;
pub mod error;
pub mod eval;
pub mod fgen;
pub mod mi;
pub mod numerics;
pub mod pipeline;

pub use error::{Error, Result};
