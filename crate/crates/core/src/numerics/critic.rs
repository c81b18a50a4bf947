//! Gradient-penalty machinery for a conditional critic.
//!
//! The critic is restricted to one hidden layer with a piecewise-linear
//! activation and a linear scalar output. Under that restriction the
//! input gradient has a closed form, and so does the gradient of the
//! penalty with respect to the critic parameters: wherever the activation
//! derivative is locally constant (almost everywhere), the penalty does
//! not depend on the hidden bias, the output bias, or the attribute block
//! of the first weight matrix at all.

use super::matrix::Matrix;
use super::mlp::{Activation, LayerGradients, MlpGradients, MlpModel};
use crate::error::{Error, Result};

pub struct CriticGradient {
    /// d critic / d x, one row per sample (attribute inputs held fixed).
    pub input_gradient: Matrix,
    /// Critic outputs for the same batch, handy for diagnostics.
    pub critic_values: Vec<f64>,
    // Retained intermediates for the penalty backward pass.
    hidden_scaled: Matrix, // t[i,k] = act'(z[i,k]) * w2[k]
    hidden_deriv: Matrix,  // act'(z[i,k])
    w1x: Matrix,           // first x_dim rows of the input weight matrix
}

/// Checks the structural contract the closed-form gradients rely on.
pub fn validate_critic(critic: &MlpModel, x_dim: usize, attr_dim: usize) -> Result<()> {
    let layers = critic.layers();
    if layers.len() != 2 {
        return Err(Error::UnsupportedCritic(format!(
            "need exactly one hidden layer, got {} layers",
            layers.len()
        )));
    }
    if critic.input_dim() != x_dim + attr_dim {
        return Err(Error::UnsupportedCritic(format!(
            "input width {} does not match feature dim {} + attribute dim {}",
            critic.input_dim(),
            x_dim,
            attr_dim
        )));
    }
    if critic.output_dim() != 1 {
        return Err(Error::UnsupportedCritic(format!(
            "output must be scalar, got width {}",
            critic.output_dim()
        )));
    }
    if layers[1].activation != Activation::Identity {
        return Err(Error::UnsupportedCritic(
            "output layer must be linear".into(),
        ));
    }
    Ok(())
}

/// Computes d critic(x, a) / d x for every row of `x`. `attrs` must have one
/// row per sample; the critic consumes `[x | a]`.
pub fn critic_input_gradient(
    critic: &MlpModel,
    x: &Matrix,
    attrs: &Matrix,
) -> Result<CriticGradient> {
    validate_critic(critic, x.cols(), attrs.cols())?;
    assert_eq!(x.rows(), attrs.rows(), "sample count mismatch");

    let joint = x.hstack(attrs);
    let acts = critic.forward(&joint)?;
    let layers = critic.layers();
    let hidden_width = layers[0].output_dim();
    let act = layers[0].activation;

    let z = acts.pre_activation(0);
    let w2 = layers[1].weights.data(); // (hidden_width x 1), contiguous
    let hidden_deriv = z.map(|v| act.derivative(v));
    let mut hidden_scaled = hidden_deriv.clone();
    for i in 0..hidden_scaled.rows() {
        for (t, &w) in hidden_scaled.row_mut(i).iter_mut().zip(w2) {
            *t *= w;
        }
    }

    // First x_dim rows of W1 are contiguous in row-major storage.
    let w1 = &layers[0].weights;
    let w1x = Matrix::from_vec(
        x.cols(),
        hidden_width,
        w1.data()[..x.cols() * hidden_width].to_vec(),
    );

    // g_i = W1x * t_i, i.e. G = T * W1x^T.
    let input_gradient = hidden_scaled.matmul_transpose_b(&w1x);
    let critic_values = acts.output().data().to_vec();

    Ok(CriticGradient {
        input_gradient,
        critic_values,
        hidden_scaled,
        hidden_deriv,
        w1x,
    })
}

/// Mean squared deviation of the input-gradient norm from 1, plus its
/// gradient with respect to the critic parameters. Rows of `x` are the
/// (already interpolated) points where the norm is measured.
pub fn gradient_penalty(
    critic: &MlpModel,
    x: &Matrix,
    attrs: &Matrix,
) -> Result<(f64, MlpGradients)> {
    let cg = critic_input_gradient(critic, x, attrs)?;
    let g = &cg.input_gradient;
    let n = g.rows() as f64;

    let mut penalty = 0.0;
    // v[i,p] = dP/dG[i,p] = (2/N) (|g_i| - 1) g_i[p] / |g_i|; zero-norm rows
    // contribute a constant 1 to the penalty and a zero subgradient.
    let mut v = Matrix::zeros(g.rows(), g.cols());
    for i in 0..g.rows() {
        let norm = g.row(i).iter().map(|a| a * a).sum::<f64>().sqrt();
        penalty += (norm - 1.0) * (norm - 1.0);
        if norm > 0.0 {
            let coeff = 2.0 / n * (norm - 1.0) / norm;
            for (out, &gv) in v.row_mut(i).iter_mut().zip(g.row(i)) {
                *out = coeff * gv;
            }
        }
    }
    penalty /= n;

    let layers = critic.layers();
    let x_dim = x.cols();
    let hidden_width = layers[0].output_dim();

    // dP/dW1x = V^T * T; the attribute rows and both biases get zero.
    let w1x_grad = v.transpose_matmul(&cg.hidden_scaled);
    let mut w1_grad = Matrix::zeros(layers[0].weights.rows(), hidden_width);
    w1_grad.data_mut()[..x_dim * hidden_width].copy_from_slice(w1x_grad.data());

    // dP/dw2[k] = sum_i (V * W1x)[i,k] * act'(z[i,k]).
    let m = v.matmul(&cg.w1x);
    let mut w2_grad = vec![0.0; hidden_width];
    for i in 0..m.rows() {
        for ((out, &mv), &d) in w2_grad.iter_mut().zip(m.row(i)).zip(cg.hidden_deriv.row(i)) {
            *out += mv * d;
        }
    }

    let grads = MlpGradients {
        layers: vec![
            LayerGradients {
                weights: w1_grad,
                bias: vec![0.0; hidden_width],
            },
            LayerGradients {
                weights: Matrix::from_vec(hidden_width, 1, w2_grad),
                bias: vec![0.0; 1],
            },
        ],
    };
    Ok((penalty, grads))
}
