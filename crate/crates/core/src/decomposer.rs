//! Feature decomposition: two encoders split a feature vector into a
//! semantic code and a residual code, a decoder reconstructs the feature
//! from both. Training pushes attribute information into the semantic code
//! (contrastive bound, class-similarity structure) and out of the residual
//! code (variational upper bound), while the reconstruction term keeps the
//! pair lossless. The variational encoder is refitted for a few maximum-
//! likelihood steps before every decomposer update and frozen in between.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mi::{
    club_estimate, fit_variational_encoder_step, infonce_loss, AttributeTable, ClassId,
    ClubVariationalEncoder, InfoNceScorer,
};
use crate::numerics::{
    Activation, AdamConfig, AdamParam, AdamState, Matrix, MlpGradients, MlpModel, Rng,
};

#[derive(Clone, Debug)]
pub struct DecomposerModel {
    pub semantic_encoder: MlpModel,
    pub residual_encoder: Option<MlpModel>,
    pub decoder: MlpModel,
    pub scorer: InfoNceScorer,
    pub venc: Option<ClubVariationalEncoder>,
}

impl DecomposerModel {
    pub fn feature_dim(&self) -> usize {
        self.semantic_encoder.input_dim()
    }

    pub fn semantic_dim(&self) -> usize {
        self.semantic_encoder.output_dim()
    }

    pub fn residual_dim(&self) -> usize {
        self.residual_encoder.as_ref().map_or(0, |e| e.output_dim())
    }

    /// Runs both encoders. The residual code is `None` for models trained
    /// without a residual branch.
    pub fn decompose(&self, x: &Matrix) -> Result<(Matrix, Option<Matrix>)> {
        let z_s = self.semantic_encoder.forward(x)?.output().clone();
        let z_r = match &self.residual_encoder {
            Some(er) => Some(er.forward(x)?.output().clone()),
            None => None,
        };
        Ok((z_s, z_r))
    }
}

/// Mean (unsquared) L2 reconstruction error and its gradient w.r.t. `x_hat`.
/// A perfectly reconstructed row contributes zero loss and, by convention
/// at the norm kink, zero gradient.
pub(crate) fn l2_reconstruction(x: &Matrix, x_hat: &Matrix) -> (f64, Matrix) {
    assert_eq!(
        (x.rows(), x.cols()),
        (x_hat.rows(), x_hat.cols()),
        "reconstruction shapes"
    );
    let n = x.rows() as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let norm = x
            .row(i)
            .iter()
            .zip(x_hat.row(i))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        loss += norm;
        if norm > 0.0 {
            let scale = 1.0 / (n * norm);
            for ((g, &xv), &hv) in grad.row_mut(i).iter_mut().zip(x.row(i)).zip(x_hat.row(i)) {
                *g = scale * (hv - xv);
            }
        }
    }
    (loss / n, grad)
}

#[derive(Debug)]
pub struct ReconOutput {
    pub loss: f64,
    pub semantic_encoder: MlpGradients,
    pub residual_encoder: Option<MlpGradients>,
    pub decoder: MlpGradients,
}

/// Reconstruction loss of `x` through encode-decode, with gradients for all
/// three networks.
pub fn reconstruction_loss(model: &DecomposerModel, x: &Matrix) -> Result<ReconOutput> {
    if x.rows() == 0 {
        return Err(Error::EmptyBatch {
            context: "reconstruction_loss".into(),
        });
    }
    let acts_s = model.semantic_encoder.forward(x)?;
    let acts_r = match &model.residual_encoder {
        Some(er) => Some(er.forward(x)?),
        None => None,
    };
    let joint = match &acts_r {
        Some(ar) => acts_s.output().hstack(ar.output()),
        None => acts_s.output().clone(),
    };
    let acts_d = model.decoder.forward(&joint)?;
    let (loss, d_xhat) = l2_reconstruction(x, acts_d.output());
    let (decoder_grads, d_joint) = model.decoder.backward(&acts_d, &d_xhat);

    let sem_dim = model.semantic_dim();
    let (d_zs, d_zr) = if acts_r.is_some() {
        let (a, b) = d_joint.split_cols(sem_dim);
        (a, Some(b))
    } else {
        (d_joint, None)
    };
    let (sem_grads, _) = model.semantic_encoder.backward(&acts_s, &d_zs);
    let res_grads = match (&model.residual_encoder, &acts_r, &d_zr) {
        (Some(er), Some(ar), Some(dzr)) => Some(er.backward(ar, dzr).0),
        _ => None,
    };
    Ok(ReconOutput {
        loss,
        semantic_encoder: sem_grads,
        residual_encoder: res_grads,
        decoder: decoder_grads,
    })
}

/// Supervised contrastive loss on cosine similarities:
///   L = -(1/N) sum_i ln( sum_{j: y_j = y_i} e^{S_ij} / sum_j e^{S_ij} )
/// with S_ij = cos(z_i, z_j) over all pairs including j = i. Zero vectors
/// get similarity 0 and contribute no gradient; the self-pair has zero
/// gradient because cos(z, z) is constant.
pub fn similarity_loss(z: &Matrix, labels: &[ClassId]) -> (f64, Matrix) {
    let n = z.rows();
    assert_eq!(n, labels.len(), "one label per latent row");
    assert!(n > 0, "similarity_loss needs a non-empty batch");
    let inv_n = 1.0 / n as f64;

    let norms: Vec<f64> = (0..n)
        .map(|i| z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut sims = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let s = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                let dot: f64 = z.row(i).iter().zip(z.row(j)).map(|(a, b)| a * b).sum();
                dot / (norms[i] * norms[j])
            };
            sims.set(i, j, s);
        }
    }

    // Numerator and denominator accumulate in the same j order, so a batch
    // of one class yields ln(1) = 0 exactly.
    let mut loss = 0.0;
    let mut coef = Matrix::zeros(n, n);
    for i in 0..n {
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..n {
            let e = sims.get(i, j).exp();
            if labels[j] == labels[i] {
                num += e;
            }
            den += e;
        }
        loss -= (num / den).ln();
        for j in 0..n {
            let e = sims.get(i, j).exp();
            let same = if labels[j] == labels[i] { e / num } else { 0.0 };
            coef.set(i, j, -inv_n * (same - e / den));
        }
    }
    loss *= inv_n;

    let mut grad = Matrix::zeros(n, z.cols());
    for i in 0..n {
        for j in 0..n {
            if i == j || norms[i] == 0.0 || norms[j] == 0.0 {
                continue;
            }
            let w = coef.get(i, j);
            if w == 0.0 {
                continue;
            }
            let s = sims.get(i, j);
            let inv_ij = 1.0 / (norms[i] * norms[j]);
            let inv_ii = 1.0 / (norms[i] * norms[i]);
            let inv_jj = 1.0 / (norms[j] * norms[j]);
            for d in 0..z.cols() {
                let zi = z.get(i, d);
                let zj = z.get(j, d);
                grad.set(i, d, grad.get(i, d) + w * (zj * inv_ij - s * zi * inv_ii));
                grad.set(j, d, grad.get(j, d) + w * (zi * inv_ij - s * zj * inv_jj));
            }
        }
    }
    (loss, grad)
}

#[derive(Debug)]
pub struct MiLossOutput {
    pub loss: f64,
    pub semantic_loss: f64,
    pub residual_estimate: f64,
    pub semantic_encoder: MlpGradients,
    pub residual_encoder: Option<MlpGradients>,
    pub scorer: Matrix,
}

/// Combined information objective of the decomposition:
/// `lambda_s * contrastive(z_s, a) + lambda_r * club(z_r, a)`, with
/// gradients for the encoders and the score weight. The variational
/// encoder must already be fitted; it stays frozen here.
pub fn decomposition_mi_loss(
    model: &DecomposerModel,
    x: &Matrix,
    labels: &[ClassId],
    attrs: &AttributeTable,
    class_set: &[ClassId],
    lambda_s: f64,
    lambda_r: f64,
) -> Result<MiLossOutput> {
    let acts_s = model.semantic_encoder.forward(x)?;
    let nce = infonce_loss(&model.scorer, acts_s.output(), labels, attrs, class_set)?;
    let mut d_zs = nce.z_grad;
    d_zs.scale(lambda_s);
    let (sem_grads, _) = model.semantic_encoder.backward(&acts_s, &d_zs);
    let mut scorer_grad = nce.weight_grad;
    scorer_grad.scale(lambda_s);

    let mut residual_estimate = 0.0;
    let mut res_grads = None;
    if lambda_r != 0.0 {
        let er = model.residual_encoder.as_ref().ok_or_else(|| {
            Error::InvalidConfig("residual information loss requires a residual encoder".into())
        })?;
        let venc = model.venc.as_ref().ok_or_else(|| {
            Error::InvalidConfig(
                "residual information loss requires a fitted variational encoder".into(),
            )
        })?;
        let acts_r = er.forward(x)?;
        let club = club_estimate(venc, acts_r.output(), labels, attrs, class_set)?;
        residual_estimate = club.estimate;
        let mut d_zr = club.z_grad;
        d_zr.scale(lambda_r);
        res_grads = Some(er.backward(&acts_r, &d_zr).0);
    }

    Ok(MiLossOutput {
        loss: lambda_s * nce.loss + lambda_r * residual_estimate,
        semantic_loss: nce.loss,
        residual_estimate,
        semantic_encoder: sem_grads,
        residual_encoder: res_grads,
        scorer: scorer_grad,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DecomposerTrainConfig {
    pub semantic_dim: usize,
    pub residual_dim: usize,
    pub hidden_dim: usize,
    pub venc_hidden_dim: usize,
    pub lambda_s: f64,
    pub lambda_r: f64,
    pub lambda_sim: f64,
    pub use_residual: bool,
    pub epochs: usize,
    pub batch_classes: usize,
    pub batch_per_class: usize,
    pub venc_steps_per_iter: usize,
    pub adam: AdamConfig,
    pub venc_adam: AdamConfig,
    pub seed: Option<u64>,
}

impl Default for DecomposerTrainConfig {
    fn default() -> Self {
        DecomposerTrainConfig {
            semantic_dim: 64,
            residual_dim: 64,
            hidden_dim: 128,
            venc_hidden_dim: 64,
            lambda_s: 20.0,
            lambda_r: 50.0,
            lambda_sim: 1.0,
            use_residual: true,
            epochs: 15,
            batch_classes: 8,
            batch_per_class: 4,
            venc_steps_per_iter: 5,
            adam: AdamConfig::default().with_learning_rate(1e-3),
            venc_adam: AdamConfig::default().with_learning_rate(1e-3),
            seed: None,
        }
    }
}

impl DecomposerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("semantic_dim", self.semantic_dim),
            ("hidden_dim", self.hidden_dim),
            ("venc_hidden_dim", self.venc_hidden_dim),
            ("epochs", self.epochs),
            ("batch_classes", self.batch_classes),
            ("batch_per_class", self.batch_per_class),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!(
                    "decomposer field {name} must be positive"
                )));
            }
        }
        if self.use_residual && self.residual_dim == 0 {
            return Err(Error::InvalidConfig(
                "residual_dim must be positive when use_residual is set".into(),
            ));
        }
        if !self.use_residual && self.lambda_r != 0.0 {
            return Err(Error::InvalidConfig(
                "lambda_r requires use_residual".into(),
            ));
        }
        for (name, v) in [
            ("lambda_s", self.lambda_s),
            ("lambda_r", self.lambda_r),
            ("lambda_sim", self.lambda_sim),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "decomposer weight {name} must be finite and non-negative"
                )));
            }
        }
        self.adam.validate()?;
        self.venc_adam.validate()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DecompEpochStats {
    pub epoch: usize,
    pub recon: f64,
    pub semantic_mi_loss: f64,
    pub residual_mi_estimate: f64,
    pub similarity: f64,
    pub total: f64,
    pub venc_loglik: f64,
}

/// Class-stratified minibatch source: each batch draws `classes` distinct
/// classes (cycling through a shuffled class order) and `per_class` sample
/// indices per class (cycling through shuffled per-class pools, so a class
/// smaller than `per_class` repeats samples).
pub(crate) struct StratifiedBatcher {
    pools: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    class_order: Vec<usize>,
    class_cursor: usize,
    rng: Rng,
}

impl StratifiedBatcher {
    pub fn new(indices: &[usize], labels: &[ClassId], mut rng: Rng) -> Self {
        assert!(!indices.is_empty(), "batcher needs samples");
        let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for &i in indices {
            by_class.entry(labels[i]).or_default().push(i);
        }
        let mut pools: Vec<Vec<usize>> = by_class.into_values().collect();
        for pool in &mut pools {
            rng.shuffle(pool);
        }
        let mut class_order: Vec<usize> = (0..pools.len()).collect();
        rng.shuffle(&mut class_order);
        let cursors = vec![0; pools.len()];
        StratifiedBatcher {
            pools,
            cursors,
            class_order,
            class_cursor: 0,
            rng,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.pools.len()
    }

    fn next_from_pool(&mut self, c: usize) -> usize {
        if self.cursors[c] == self.pools[c].len() {
            let pool = &mut self.pools[c];
            self.rng.shuffle(pool);
            self.cursors[c] = 0;
        }
        let idx = self.pools[c][self.cursors[c]];
        self.cursors[c] += 1;
        idx
    }

    pub fn next_batch(&mut self, classes: usize, per_class: usize) -> Vec<usize> {
        let classes = classes.min(self.pools.len());
        // Reshuffle before the batch when the current order runs short, so
        // one batch always draws a window of a single permutation and its
        // classes stay distinct.
        if self.class_order.len() - self.class_cursor < classes {
            self.rng.shuffle(&mut self.class_order);
            self.class_cursor = 0;
        }
        let mut batch = Vec::with_capacity(classes * per_class);
        for _ in 0..classes {
            let c = self.class_order[self.class_cursor];
            self.class_cursor += 1;
            for _ in 0..per_class {
                batch.push(self.next_from_pool(c));
            }
        }
        batch
    }
}

pub fn init_decomposer(
    feature_dim: usize,
    attr_dim: usize,
    cfg: &DecomposerTrainConfig,
    rng: &mut Rng,
) -> Result<DecomposerModel> {
    let hidden = Activation::leaky(0.02);
    let mut es_rng = rng.split();
    let mut er_rng = rng.split();
    let mut dec_rng = rng.split();
    let mut scorer_rng = rng.split();
    let mut venc_rng = rng.split();

    let semantic_encoder = MlpModel::new(
        &[feature_dim, cfg.hidden_dim, cfg.semantic_dim],
        &[hidden, Activation::Identity],
        &mut es_rng,
    )?;
    let (residual_encoder, venc, joint_dim) = if cfg.use_residual {
        let er = MlpModel::new(
            &[feature_dim, cfg.hidden_dim, cfg.residual_dim],
            &[hidden, Activation::Identity],
            &mut er_rng,
        )?;
        let venc = ClubVariationalEncoder::new(
            cfg.residual_dim,
            attr_dim,
            cfg.venc_hidden_dim,
            &mut venc_rng,
        )?;
        (Some(er), Some(venc), cfg.semantic_dim + cfg.residual_dim)
    } else {
        (None, None, cfg.semantic_dim)
    };
    let decoder = MlpModel::new(
        &[joint_dim, cfg.hidden_dim, feature_dim],
        &[hidden, Activation::Identity],
        &mut dec_rng,
    )?;
    let scorer = InfoNceScorer::new(cfg.semantic_dim, attr_dim, &mut scorer_rng);
    Ok(DecomposerModel {
        semantic_encoder,
        residual_encoder,
        decoder,
        scorer,
        venc,
    })
}

/// Trains the decomposition on the training split of `dataset`. Returns the
/// model and per-epoch loss averages. Deterministic given `cfg.seed`.
pub fn train_decomposer(
    dataset: &Dataset,
    cfg: &DecomposerTrainConfig,
) -> Result<(DecomposerModel, Vec<DecompEpochStats>)> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed.unwrap_or(0));
    let mut model = init_decomposer(
        dataset.feature_dim(),
        dataset.attrs.attribute_dim(),
        cfg,
        &mut rng,
    )?;
    let mut batcher =
        StratifiedBatcher::new(&dataset.split.train_idx, &dataset.labels, rng.split());

    let mut es_adam = AdamState::new(cfg.adam);
    let mut er_adam = AdamState::new(cfg.adam);
    let mut dec_adam = AdamState::new(cfg.adam);
    let mut scorer_adam = AdamState::new(cfg.adam);
    let mut venc_adam = AdamState::new(cfg.venc_adam);

    let class_set: Vec<ClassId> = dataset.split.seen.clone();
    let batch_size = cfg.batch_classes.min(batcher.num_classes()) * cfg.batch_per_class;
    let batches_per_epoch = dataset.split.train_idx.len().div_ceil(batch_size).max(1);

    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sums = [0.0f64; 6]; // recon, sem_mi, res_mi, sim, total, venc
        for batch_no in 0..batches_per_epoch {
            let idx = batcher.next_batch(cfg.batch_classes, cfg.batch_per_class);
            let x = dataset.features.gather_rows(&idx);
            let labels = dataset.labels_at(&idx);

            let acts_s = model.semantic_encoder.forward(&x)?;
            let acts_r = match &model.residual_encoder {
                Some(er) => Some(er.forward(&x)?),
                None => None,
            };

            // Refit the variational encoder on the current residual codes,
            // then freeze it for this decomposer step.
            let mut venc_loglik = 0.0;
            if cfg.lambda_r != 0.0 {
                let (venc, acts_r) = (model.venc.as_mut().unwrap(), acts_r.as_ref().unwrap());
                for _ in 0..cfg.venc_steps_per_iter {
                    venc_loglik = fit_variational_encoder_step(
                        venc,
                        acts_r.output(),
                        &labels,
                        &dataset.attrs,
                        &mut venc_adam,
                    )?;
                }
            }

            // Reconstruction through the decoder.
            let joint = match &acts_r {
                Some(ar) => acts_s.output().hstack(ar.output()),
                None => acts_s.output().clone(),
            };
            let acts_d = model.decoder.forward(&joint)?;
            let (recon, d_xhat) = l2_reconstruction(&x, acts_d.output());
            let (dec_grads, d_joint) = model.decoder.backward(&acts_d, &d_xhat);
            let (mut d_zs, d_zr) = if acts_r.is_some() {
                let (a, b) = d_joint.split_cols(cfg.semantic_dim);
                (a, Some(b))
            } else {
                (d_joint, None)
            };

            // Information terms.
            let nce = infonce_loss(
                &model.scorer,
                acts_s.output(),
                &labels,
                &dataset.attrs,
                &class_set,
            )?;
            let mut club_est = 0.0;
            let mut d_zr = d_zr;
            if cfg.lambda_r != 0.0 {
                let venc = model.venc.as_ref().unwrap();
                let club = club_estimate(
                    venc,
                    acts_r.as_ref().unwrap().output(),
                    &labels,
                    &dataset.attrs,
                    &class_set,
                )?;
                club_est = club.estimate;
                d_zr.as_mut()
                    .unwrap()
                    .add_scaled(cfg.lambda_r, &club.z_grad);
            }

            // Class-similarity structure on the semantic code.
            let (sim, d_zs_sim) = similarity_loss(acts_s.output(), &labels);

            let total =
                recon + cfg.lambda_s * nce.loss + cfg.lambda_r * club_est + cfg.lambda_sim * sim;
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    context: "decomposer training".into(),
                    epoch,
                    batch: batch_no,
                });
            }

            d_zs.add_scaled(cfg.lambda_s, &nce.z_grad);
            d_zs.add_scaled(cfg.lambda_sim, &d_zs_sim);
            let (es_grads, _) = model.semantic_encoder.backward(&acts_s, &d_zs);
            model
                .semantic_encoder
                .apply_adam(&es_grads, &mut es_adam, "semantic_encoder")?;

            if let (Some(er), Some(ar), Some(dzr)) = (&model.residual_encoder, &acts_r, &d_zr) {
                let (er_grads, _) = er.backward(ar, dzr);
                model.residual_encoder.as_mut().unwrap().apply_adam(
                    &er_grads,
                    &mut er_adam,
                    "residual_encoder",
                )?;
            }

            model
                .decoder
                .apply_adam(&dec_grads, &mut dec_adam, "decoder")?;

            let mut scorer_grad = nce.weight_grad;
            scorer_grad.scale(cfg.lambda_s);
            scorer_adam.step(&mut [AdamParam {
                name: "scorer.w",
                values: model.scorer.weight.data_mut(),
                grad: scorer_grad.data(),
            }])?;

            sums[0] += recon;
            sums[1] += nce.loss;
            sums[2] += club_est;
            sums[3] += sim;
            sums[4] += total;
            sums[5] += venc_loglik;
        }
        let k = batches_per_epoch as f64;
        history.push(DecompEpochStats {
            epoch,
            recon: sums[0] / k,
            semantic_mi_loss: sums[1] / k,
            residual_mi_estimate: sums[2] / k,
            similarity: sums[3] / k,
            total: sums[4] / k,
            venc_loglik: sums[5] / k,
        });
    }
    Ok((model, history))
}
