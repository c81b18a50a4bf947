use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    /// Lower momentum coefficients, the usual choice for adversarial
    /// training.
    pub fn gan() -> Self {
        AdamConfig {
            beta1: 0.5,
            beta2: 0.9,
            ..AdamConfig::default()
        }
    }

    pub fn with_learning_rate(self, learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "adam hyperparameters out of range: {self:?}"
            )))
        }
    }
}

/// One named tensor to update. The caller passes the same tensors in the
/// same order on every step; moment slots are matched by position.
pub struct AdamParam<'a> {
    pub name: &'a str,
    pub values: &'a mut [f64],
    pub grad: &'a [f64],
}

/// Adam with bias correction. One state instance owns the first/second
/// moment buffers for a fixed group of tensors and a single step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig) -> Self {
        AdamState {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [AdamParam<'_>]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.values.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(
            self.m.len(),
            params.len(),
            "adam state was created for a different parameter group"
        );
        for (p, m) in params.iter().zip(&self.m) {
            assert_eq!(p.values.len(), p.grad.len(), "grad length for {}", p.name);
            assert_eq!(p.values.len(), m.len(), "moment length for {}", p.name);
        }
        for p in params.iter() {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    name: p.name.to_string(),
                });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.values.len() {
                let g = p.grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p.values[j] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
