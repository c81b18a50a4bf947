//! Dense f64 building blocks: matrices, MLPs, Adam, RNG and gradient
//! checking utilities. Shape violations inside this module are programmer
//! errors and panic via `assert!`; fallible constructors that face user
//! input return `Result` instead.

pub mod adam;
pub mod critic;
pub mod gradcheck;
pub mod matrix;
pub mod mlp;
pub mod rng;

pub use adam::{AdamConfig, AdamParam, AdamState};
pub use critic::{critic_input_gradient, gradient_penalty, validate_critic, CriticGradient};
pub use gradcheck::{central_difference_gradient, finite_diff_check, relative_error};
pub use matrix::Matrix;
pub use mlp::{Activation, Layer, LayerGradients, MlpActivations, MlpGradients, MlpModel};
pub use rng::Rng;
