use serde::{Deserialize, Serialize};

use super::adam::{AdamParam, AdamState};
use super::matrix::Matrix;
use super::rng::Rng;
use crate::error::{Error, Result};

/// Piecewise-linear activations only. Subgradient conventions at the kink:
/// `Relu` uses 0, `LeakyRelu` uses its negative-side slope. Tests poke the
/// kink directly, so the choice is pinned here rather than left to chance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu { slope: f64 },
}

impl Activation {
    pub fn leaky(slope: f64) -> Self {
        assert!(slope > 0.0, "leaky slope must be positive, got {slope}");
        Activation::LeakyRelu { slope }
    }

    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }
}

/// One dense layer: `post = act(input * weights + bias)`.
/// `weights` is (input_dim x output_dim), `bias` has length output_dim.
#[derive(Clone, Debug)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.cols()
    }
}

#[derive(Clone, Debug)]
pub struct MlpModel {
    layers: Vec<Layer>,
}

/// Everything `forward` saw and produced, retained for the backward pass.
pub struct MlpActivations {
    input: Matrix,
    pre: Vec<Matrix>,
    post: Vec<Matrix>,
}

impl MlpActivations {
    pub fn input(&self) -> &Matrix {
        &self.input
    }

    pub fn output(&self) -> &Matrix {
        self.post.last().expect("model has at least one layer")
    }

    pub fn pre_activation(&self, layer: usize) -> &Matrix {
        &self.pre[layer]
    }
}

#[derive(Clone, Debug)]
pub struct LayerGradients {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MlpGradients {
    pub layers: Vec<LayerGradients>,
}

impl MlpGradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        MlpGradients {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGradients {
                    weights: Matrix::zeros(l.weights.rows(), l.weights.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, scale: f64, other: &MlpGradients) {
        assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.add_scaled(scale, &b.weights);
            for (x, &y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }

    /// Parameter gradients in the same order as `MlpModel::flatten_params`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }
}

impl MlpModel {
    /// Builds a dense network. `dims` lists layer widths from input to
    /// output, so `activations.len() + 1 == dims.len()`. Weights use
    /// Xavier-uniform init, biases start at zero.
    pub fn new(dims: &[usize], activations: &[Activation], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || activations.len() + 1 != dims.len() {
            return Err(Error::InvalidConfig(format!(
                "mlp needs dims.len() == activations.len() + 1 >= 2, got {} dims and {} activations",
                dims.len(),
                activations.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidConfig("mlp layer width 0".into()));
        }
        for a in activations {
            if let Activation::LeakyRelu { slope } = a {
                if *slope <= 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "leaky relu slope must be positive, got {slope}"
                    )));
                }
            }
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    weights: Matrix::from_fn(fan_in, fan_out, |_, _| {
                        rng.uniform_range(-limit, limit)
                    }),
                    bias: vec![0.0; fan_out],
                    activation,
                }
            })
            .collect();
        Ok(MlpModel { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Self {
        assert!(!layers.is_empty(), "model needs at least one layer");
        for pair in layers.windows(2) {
            assert_eq!(
                pair[0].output_dim(),
                pair[1].input_dim(),
                "adjacent layer dims disagree"
            );
        }
        MlpModel { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.output_dim()));
        dims
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn forward(&self, batch: &Matrix) -> Result<MlpActivations> {
        if batch.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                context: "mlp forward".into(),
                expected: format!("batch with {} cols", self.input_dim()),
                found: format!("{}x{}", batch.rows(), batch.cols()),
            });
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut current = batch;
        for layer in &self.layers {
            let mut z = current.matmul(&layer.weights);
            for i in 0..z.rows() {
                for (v, &b) in z.row_mut(i).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let a = z.map(|v| layer.activation.apply(v));
            pre.push(z);
            post.push(a);
            current = post.last().unwrap();
        }
        Ok(MlpActivations {
            input: batch.clone(),
            pre,
            post,
        })
    }

    /// Backpropagates `upstream` (dLoss/dOutput, same shape as the output)
    /// through the saved activations. Returns parameter gradients and
    /// dLoss/dInput.
    pub fn backward(&self, acts: &MlpActivations, upstream: &Matrix) -> (MlpGradients, Matrix) {
        let out = acts.output();
        assert_eq!(
            (upstream.rows(), upstream.cols()),
            (out.rows(), out.cols()),
            "upstream shape does not match model output"
        );
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.clone();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            // delta currently holds dL/d(post_idx); fold in the activation.
            let pre = &acts.pre[idx];
            for i in 0..delta.rows() {
                let pre_row = pre.row(i);
                for (d, &z) in delta.row_mut(i).iter_mut().zip(pre_row) {
                    *d *= layer.activation.derivative(z);
                }
            }
            let below = if idx == 0 {
                &acts.input
            } else {
                &acts.post[idx - 1]
            };
            grads.push(LayerGradients {
                weights: below.transpose_matmul(&delta),
                bias: delta.col_sums(),
            });
            delta = delta.matmul_transpose_b(&layer.weights);
        }
        grads.reverse();
        (MlpGradients { layers: grads }, delta)
    }

    pub fn apply_adam(
        &mut self,
        grads: &MlpGradients,
        adam: &mut AdamState,
        prefix: &str,
    ) -> Result<()> {
        assert_eq!(grads.layers.len(), self.layers.len());
        let names: Vec<(String, String)> = (0..self.layers.len())
            .map(|i| (format!("{prefix}.l{i}.w"), format!("{prefix}.l{i}.b")))
            .collect();
        let mut params = Vec::with_capacity(self.layers.len() * 2);
        for ((layer, grad), (wname, bname)) in self.layers.iter_mut().zip(&grads.layers).zip(&names)
        {
            params.push(AdamParam {
                name: wname,
                values: layer.weights.data_mut(),
                grad: grad.weights.data(),
            });
            params.push(AdamParam {
                name: bname,
                values: &mut layer.bias,
                grad: &grad.bias,
            });
        }
        adam.step(&mut params)
    }

    /// All parameters as one vector (layer order, weights then bias).
    /// Only used by tests and checkpointing helpers.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn load_flat_params(&mut self, params: &[f64]) {
        let mut offset = 0;
        for l in &mut self.layers {
            let w = l.weights.data_mut();
            w.copy_from_slice(&params[offset..offset + w.len()]);
            offset += w.len();
            let blen = l.bias.len();
            l.bias.copy_from_slice(&params[offset..offset + blen]);
            offset += blen;
        }
        assert_eq!(offset, params.len(), "flat param length mismatch");
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.bias.len())
            .sum()
    }
}
