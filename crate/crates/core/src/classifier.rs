//! Softmax classifier over the union of seen and unseen classes, trained on
//! real semantic codes for seen classes and synthesized codes for unseen
//! ones. Batches draw equally from both blocks so neither side's sample
//! count dominates the objective.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mi::ClassId;
use crate::numerics::{AdamConfig, AdamParam, AdamState, Matrix, Rng};

#[derive(Clone, Debug)]
pub struct SoftmaxClassifier {
    /// One row of weights per class, aligned with `classes`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    classes: Vec<ClassId>,
    index: HashMap<ClassId, usize>,
}

impl SoftmaxClassifier {
    /// Zero-initialized classifier over the given classes (deduplicated,
    /// kept in ascending id order).
    pub fn new(mut classes: Vec<ClassId>, dim: usize) -> Result<Self> {
        classes.sort_unstable();
        classes.dedup();
        if classes.is_empty() {
            return Err(Error::InvalidConfig(
                "classifier needs at least one class".into(),
            ));
        }
        if dim == 0 {
            return Err(Error::InvalidConfig(
                "classifier input dim must be positive".into(),
            ));
        }
        let index = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Ok(SoftmaxClassifier {
            weights: Matrix::zeros(classes.len(), dim),
            bias: vec![0.0; classes.len()],
            classes,
            index,
        })
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn class_row(&self, class: ClassId) -> Option<usize> {
        self.index.get(&class).copied()
    }

    fn logits(&self, z: &Matrix) -> Result<Matrix> {
        if z.cols() != self.dim() {
            return Err(Error::ShapeMismatch {
                context: "classifier input".into(),
                expected: format!("{} cols", self.dim()),
                found: format!("{} cols", z.cols()),
            });
        }
        let mut l = z.matmul_transpose_b(&self.weights);
        for i in 0..l.rows() {
            for (v, b) in l.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(l)
    }

    /// Class probabilities per row, computed with per-row max subtraction.
    pub fn predict_proba(&self, z: &Matrix) -> Result<Matrix> {
        let mut logits = self.logits(z)?;
        for i in 0..logits.rows() {
            let row = logits.row_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut den = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                den += *v;
            }
            for v in row.iter_mut() {
                *v /= den;
            }
        }
        Ok(logits)
    }

    /// Top-1 class per row; ties go to the lowest class id.
    pub fn predict(&self, z: &Matrix) -> Result<Vec<ClassId>> {
        let logits = self.logits(z)?;
        Ok((0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                self.classes[best]
            })
            .collect())
    }
}

#[derive(Debug)]
pub struct CrossEntropyOutput {
    /// Summed (not averaged) negative log-likelihood of the batch.
    pub loss: f64,
    pub weight_grad: Matrix,
    pub bias_grad: Vec<f64>,
}

/// Summed cross entropy of labeled codes and its parameter gradients.
pub fn cross_entropy_loss(
    clf: &SoftmaxClassifier,
    z: &Matrix,
    labels: &[ClassId],
) -> Result<CrossEntropyOutput> {
    if z.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "cross_entropy_loss labels".into(),
            expected: format!("{} labels", z.rows()),
            found: format!("{} labels", labels.len()),
        });
    }
    if z.rows() == 0 {
        return Err(Error::EmptyBatch {
            context: "cross_entropy_loss".into(),
        });
    }
    let mut logits = clf.logits(z)?;
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let pos = clf.class_row(label).ok_or_else(|| Error::UnknownClass {
            class: label,
            context: "classifier class index".into(),
        })?;
        let row = logits.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut den = 0.0;
        for v in row.iter() {
            den += (v - max).exp();
        }
        loss += max + den.ln() - row[pos];
        // Convert the row to d(loss)/d(logit) = softmax - onehot in place.
        for v in row.iter_mut() {
            *v = (*v - max).exp() / den;
        }
        row[pos] -= 1.0;
    }
    let weight_grad = logits.transpose_matmul(z);
    let bias_grad = logits.col_sums();
    Ok(CrossEntropyOutput {
        loss,
        weight_grad,
        bias_grad,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub adam: AdamConfig,
    pub seed: Option<u64>,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            epochs: 30,
            batch_size: 64,
            weight_decay: 0.0,
            adam: AdamConfig::default().with_learning_rate(1e-2),
            seed: None,
        }
    }
}

impl ClassifierTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig(
                "classifier epochs must be positive".into(),
            ));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "classifier batch_size must be at least 2".into(),
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(
                "weight_decay must be finite and non-negative".into(),
            ));
        }
        self.adam.validate()
    }
}

struct CyclicStream {
    order: Vec<usize>,
    cursor: usize,
}

impl CyclicStream {
    fn new(n: usize, rng: &mut Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        CyclicStream { order, cursor: 0 }
    }

    fn take(&mut self, k: usize, rng: &mut Rng, out: &mut Vec<usize>) {
        for _ in 0..k {
            if self.cursor == self.order.len() {
                rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
    }
}

/// Trains the union classifier on two labeled blocks: real codes of seen
/// classes and synthetic codes of unseen classes. Each batch takes half
/// from each block. Returns the classifier and per-epoch mean sample loss.
pub fn train_classifier(
    real: (&Matrix, &[ClassId]),
    synthetic: (&Matrix, &[ClassId]),
    cfg: &ClassifierTrainConfig,
) -> Result<(SoftmaxClassifier, Vec<f64>)> {
    cfg.validate()?;
    let (rz, rl) = real;
    let (sz, sl) = synthetic;
    if rz.rows() == 0 || rz.rows() != rl.len() {
        return Err(Error::EmptyBatch {
            context: "train_classifier real block".into(),
        });
    }
    if sz.rows() == 0 || sz.rows() != sl.len() {
        return Err(Error::EmptyBatch {
            context: "train_classifier synthetic block".into(),
        });
    }
    if rz.cols() != sz.cols() {
        return Err(Error::ShapeMismatch {
            context: "train_classifier block widths".into(),
            expected: format!("{} cols", rz.cols()),
            found: format!("{} cols", sz.cols()),
        });
    }

    let mut classes: Vec<ClassId> = rl.iter().chain(sl.iter()).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    let mut clf = SoftmaxClassifier::new(classes, rz.cols())?;

    let mut rng = Rng::new(cfg.seed.unwrap_or(0));
    let mut real_stream = CyclicStream::new(rz.rows(), &mut rng);
    let mut syn_stream = CyclicStream::new(sz.rows(), &mut rng);
    let mut adam = AdamState::new(cfg.adam);

    let half = cfg.batch_size / 2;
    let batch_size = half * 2;
    let batches_per_epoch = (rz.rows() + sz.rows()).div_ceil(batch_size).max(1);

    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for _ in 0..batches_per_epoch {
            let mut r_idx = Vec::with_capacity(half);
            let mut s_idx = Vec::with_capacity(half);
            real_stream.take(half, &mut rng, &mut r_idx);
            syn_stream.take(half, &mut rng, &mut s_idx);

            let mut z = rz.gather_rows(&r_idx);
            let z_syn = sz.gather_rows(&s_idx);
            z = z.vstack(&z_syn);
            let mut labels: Vec<ClassId> = r_idx.iter().map(|&i| rl[i]).collect();
            labels.extend(s_idx.iter().map(|&i| sl[i]));

            let out = cross_entropy_loss(&clf, &z, &labels)?;
            loss_sum += out.loss;

            let scale = 1.0 / batch_size as f64;
            let mut wg = out.weight_grad;
            wg.scale(scale);
            if cfg.weight_decay > 0.0 {
                wg.add_scaled(cfg.weight_decay, &clf.weights);
            }
            let mut bg = out.bias_grad;
            for v in &mut bg {
                *v *= scale;
            }
            adam.step(&mut [
                AdamParam {
                    name: "classifier.w",
                    values: clf.weights.data_mut(),
                    grad: wg.data(),
                },
                AdamParam {
                    name: "classifier.b",
                    values: &mut clf.bias,
                    grad: &bg,
                },
            ])?;
        }
        history.push(loss_sum / (batches_per_epoch * batch_size) as f64);
    }
    Ok((clf, history))
}
