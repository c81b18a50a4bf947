//! Conditional feature synthesis. A generator maps [noise | attribute] to a
//! nonnegative feature vector and trains against a gradient-penalized critic
//! on the Wasserstein objective. Two extra terms tie the generator to the
//! decomposition stage: the contrastive attribute bound on the semantic code
//! of the synthesized feature, and a cosine cross-entropy pulling that code
//! toward real same-class codes in a frozen bank. Unseen-class codes are then
//! synthesized by pushing generated features through the frozen semantic
//! encoder.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::decomposer::DecomposerModel;
use crate::error::{Error, Result};
use crate::mi::{infonce_loss, AttributeTable, ClassId, InfoNceScorer};
use crate::numerics::{
    gradient_penalty, validate_critic, Activation, AdamConfig, AdamState, Matrix, MlpModel, Rng,
};

#[derive(Clone, Debug)]
pub struct GeneratorModel {
    pub net: MlpModel,
    pub noise_dim: usize,
    pub attr_dim: usize,
}

impl GeneratorModel {
    pub fn new(
        noise_dim: usize,
        attr_dim: usize,
        hidden_dim: usize,
        feature_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut net = MlpModel::new(
            &[noise_dim + attr_dim, hidden_dim, feature_dim],
            &[Activation::leaky(0.02), Activation::Relu],
            rng,
        )?;
        // Start every output unit on the active side of the ReLU; a unit
        // whose pre-activation is negative for all inputs gets no gradient
        // and can never recover.
        for b in &mut net.layers_mut().last_mut().unwrap().bias {
            *b = 0.5;
        }
        Ok(GeneratorModel {
            net,
            noise_dim,
            attr_dim,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.net.output_dim()
    }

    /// Deterministic synthesis from explicit noise rows.
    pub fn generate(&self, noise: &Matrix, attr_rows: &Matrix) -> Result<Matrix> {
        if noise.rows() != attr_rows.rows() {
            return Err(Error::ShapeMismatch {
                context: "generate: noise/attribute row counts".into(),
                expected: format!("{} rows", noise.rows()),
                found: format!("{} rows", attr_rows.rows()),
            });
        }
        if noise.cols() != self.noise_dim {
            return Err(Error::ShapeMismatch {
                context: "generate: noise width".into(),
                expected: format!("{} cols", self.noise_dim),
                found: format!("{} cols", noise.cols()),
            });
        }
        let input = noise.hstack(attr_rows);
        Ok(self.net.forward(&input)?.output().clone())
    }
}

#[derive(Clone, Debug)]
pub struct CriticModel {
    pub net: MlpModel,
}

impl CriticModel {
    pub fn new(
        feature_dim: usize,
        attr_dim: usize,
        hidden_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let net = MlpModel::new(
            &[feature_dim + attr_dim, hidden_dim, 1],
            &[Activation::leaky(0.02), Activation::Identity],
            rng,
        )?;
        validate_critic(&net, feature_dim, attr_dim)?;
        Ok(CriticModel { net })
    }

    /// Critic values for a batch, as a plain vector.
    pub fn values(&self, x: &Matrix, attr_rows: &Matrix) -> Result<Vec<f64>> {
        let input = x.hstack(attr_rows);
        Ok(self.net.forward(&input)?.output().data().to_vec())
    }
}

/// Frozen per-sample semantic codes of the training split, used as the real
/// side of the generator's cosine cross-entropy.
#[derive(Clone, Debug)]
pub struct SemanticBank {
    pub z: Matrix,
    pub labels: Vec<ClassId>,
}

impl SemanticBank {
    pub fn from_decomposer(model: &DecomposerModel, dataset: &Dataset) -> Result<Self> {
        let x = dataset.features.gather_rows(&dataset.split.train_idx);
        let labels = dataset.labels_at(&dataset.split.train_idx);
        let (z, _) = model.decompose(&x)?;
        Ok(SemanticBank { z, labels })
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.labels.contains(&class)
    }
}

/// Cosine cross-entropy of query codes against a frozen bank:
///   L = -(1/N) sum_i ln( sum_{j: bank label = label_i} e^{cos(q_i, b_j)}
///                        / sum_j e^{cos(q_i, b_j)} )
/// Gradient flows into the queries only. Zero-norm rows on either side get
/// similarity 0 and no gradient. Errors if a query label has no bank entry.
pub fn bank_similarity_loss(
    queries: &Matrix,
    labels: &[ClassId],
    bank: &SemanticBank,
) -> Result<(f64, Matrix)> {
    let n = queries.rows();
    let m = bank.z.rows();
    assert_eq!(n, labels.len(), "one label per query row");
    assert_eq!(queries.cols(), bank.z.cols(), "query/bank widths");
    if n == 0 || m == 0 {
        return Err(Error::EmptyBatch {
            context: "bank_similarity_loss".into(),
        });
    }
    for &c in labels {
        if !bank.contains(c) {
            return Err(Error::UnknownClass {
                class: c,
                context: "semantic bank".into(),
            });
        }
    }

    let q_norms: Vec<f64> = (0..n)
        .map(|i| queries.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let b_norms: Vec<f64> = (0..m)
        .map(|j| bank.z.row(j).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();

    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, queries.cols());
    let mut sims = vec![0.0; m];
    for i in 0..n {
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..m {
            let s = if q_norms[i] == 0.0 || b_norms[j] == 0.0 {
                0.0
            } else {
                let dot: f64 = queries
                    .row(i)
                    .iter()
                    .zip(bank.z.row(j))
                    .map(|(a, b)| a * b)
                    .sum();
                dot / (q_norms[i] * b_norms[j])
            };
            sims[j] = s;
            let e = s.exp();
            if bank.labels[j] == labels[i] {
                num += e;
            }
            den += e;
        }
        loss -= (num / den).ln();
        if q_norms[i] == 0.0 {
            continue;
        }
        let inv_ii = 1.0 / (q_norms[i] * q_norms[i]);
        for j in 0..m {
            if b_norms[j] == 0.0 {
                continue;
            }
            let e = sims[j].exp();
            let same = if bank.labels[j] == labels[i] {
                e / num
            } else {
                0.0
            };
            let w = -inv_n * (same - e / den);
            if w == 0.0 {
                continue;
            }
            let inv_ij = 1.0 / (q_norms[i] * b_norms[j]);
            for d in 0..queries.cols() {
                let g = w * (bank.z.get(j, d) * inv_ij - sims[j] * queries.get(i, d) * inv_ii);
                grad.set(i, d, grad.get(i, d) + g);
            }
        }
    }
    Ok((loss * inv_n, grad))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GanTrainConfig {
    /// Noise width; `None` matches the attribute width.
    pub noise_dim: Option<usize>,
    pub hidden_dim: usize,
    pub critic_hidden_dim: usize,
    pub lambda_gp: f64,
    pub lambda_mi: f64,
    pub lambda_sim: f64,
    pub critic_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub critic_adam: AdamConfig,
    pub seed: Option<u64>,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        GanTrainConfig {
            noise_dim: None,
            hidden_dim: 128,
            critic_hidden_dim: 128,
            lambda_gp: 10.0,
            lambda_mi: 1.0,
            lambda_sim: 0.025,
            critic_steps: 5,
            batch_size: 32,
            epochs: 40,
            adam: AdamConfig::gan().with_learning_rate(1e-3),
            critic_adam: AdamConfig::gan().with_learning_rate(1e-3),
            seed: None,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.critic_steps == 0 {
            return Err(Error::InvalidConfig(
                "critic_steps must be at least 1".into(),
            ));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be at least 2".into()));
        }
        if self.hidden_dim == 0 || self.critic_hidden_dim == 0 {
            return Err(Error::InvalidConfig(
                "generator and critic hidden widths must be positive".into(),
            ));
        }
        if self.noise_dim == Some(0) {
            return Err(Error::InvalidConfig("noise_dim must be positive".into()));
        }
        for (name, v) in [
            ("lambda_gp", self.lambda_gp),
            ("lambda_mi", self.lambda_mi),
            ("lambda_sim", self.lambda_sim),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "gan weight {name} must be finite and non-negative"
                )));
            }
        }
        self.adam.validate()?;
        self.critic_adam.validate()?;
        Ok(())
    }

    fn resolved_noise_dim(&self, attr_dim: usize) -> usize {
        self.noise_dim.unwrap_or(attr_dim)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CriticStepDiag {
    pub wasserstein: f64,
    pub penalty: f64,
}

/// One critic ascent step on E[D(x,a)] - E[D(x~,a)] - gp, implemented as a
/// descent step on the negation. Noise and interpolation weights are drawn
/// fresh from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn critic_train_step(
    critic: &mut CriticModel,
    gen: &GeneratorModel,
    real: &Matrix,
    labels: &[ClassId],
    attrs: &AttributeTable,
    cfg: &GanTrainConfig,
    adam: &mut AdamState,
    rng: &mut Rng,
) -> Result<CriticStepDiag> {
    let n = real.rows();
    if n == 0 {
        return Err(Error::EmptyBatch {
            context: "critic_train_step".into(),
        });
    }
    let attr_rows = attrs.rows_for(labels)?;
    let noise = rng.normal_matrix(n, gen.noise_dim);
    let fake = gen.generate(&noise, &attr_rows)?;

    let acts_real = critic.net.forward(&real.hstack(&attr_rows))?;
    let acts_fake = critic.net.forward(&fake.hstack(&attr_rows))?;
    let mean = |m: &Matrix| m.data().iter().sum::<f64>() / n as f64;
    let wasserstein = mean(acts_real.output()) - mean(acts_fake.output());
    if !wasserstein.is_finite() {
        return Err(Error::NonFiniteLoss {
            context: "critic step".into(),
            epoch: 0,
            batch: 0,
        });
    }

    // Per-sample interpolates between real and generated features.
    let mut interp = Matrix::zeros(n, real.cols());
    for i in 0..n {
        let alpha = rng.uniform();
        for d in 0..real.cols() {
            interp.set(
                i,
                d,
                alpha * real.get(i, d) + (1.0 - alpha) * fake.get(i, d),
            );
        }
    }
    let (penalty, penalty_grads) = gradient_penalty(&critic.net, &interp, &attr_rows)?;

    // Descend -W + gp: upstream -1/n on real values, +1/n on fake values.
    let inv_n = 1.0 / n as f64;
    let up_real = Matrix::from_fn(n, 1, |_, _| -inv_n);
    let up_fake = Matrix::from_fn(n, 1, |_, _| inv_n);
    let (mut grads, _) = critic.net.backward(&acts_real, &up_real);
    let (g_fake, _) = critic.net.backward(&acts_fake, &up_fake);
    grads.add_scaled(1.0, &g_fake);
    grads.add_scaled(cfg.lambda_gp, &penalty_grads);
    critic.net.apply_adam(&grads, adam, "critic")?;

    Ok(CriticStepDiag {
        wasserstein,
        penalty,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorStepDiag {
    pub loss: f64,
    pub wgan_term: f64,
    pub infonce_term: f64,
    pub bank_sim_term: f64,
}

/// One generator descent step on
///   -E[D(x~,a)] + lambda_mi * contrastive(z~_s, a) + lambda_sim * bank CE.
/// The critic, semantic encoder, scorer, and bank all stay frozen; gradients
/// pass through the encoder into the generator.
#[allow(clippy::too_many_arguments)]
pub fn generator_train_step(
    gen: &mut GeneratorModel,
    critic: &CriticModel,
    semantic_encoder: &MlpModel,
    scorer: &InfoNceScorer,
    bank: &SemanticBank,
    labels: &[ClassId],
    attrs: &AttributeTable,
    class_set: &[ClassId],
    cfg: &GanTrainConfig,
    adam: &mut AdamState,
    rng: &mut Rng,
) -> Result<GeneratorStepDiag> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::EmptyBatch {
            context: "generator_train_step".into(),
        });
    }
    let attr_rows = attrs.rows_for(labels)?;
    let noise = rng.normal_matrix(n, gen.noise_dim);
    let input = noise.hstack(&attr_rows);
    let acts_g = gen.net.forward(&input)?;
    let fake = acts_g.output();

    let inv_n = 1.0 / n as f64;
    let acts_d = critic.net.forward(&fake.hstack(&attr_rows))?;
    let wgan_term = -mean_of(acts_d.output());
    // d(-mean D)/d input, feature block only.
    let up_d = Matrix::from_fn(n, 1, |_, _| -inv_n);
    let (_, d_critic_input) = critic.net.backward(&acts_d, &up_d);
    let (mut d_fake, _) = d_critic_input.split_cols(fake.cols());

    let acts_es = semantic_encoder.forward(fake)?;
    let z_tilde = acts_es.output();
    let nce = infonce_loss(scorer, z_tilde, labels, attrs, class_set)?;
    let (sim, d_z_sim) = bank_similarity_loss(z_tilde, labels, bank)?;

    let mut d_z = nce.z_grad;
    d_z.scale(cfg.lambda_mi);
    d_z.add_scaled(cfg.lambda_sim, &d_z_sim);
    let (_, d_fake_from_es) = semantic_encoder.backward(&acts_es, &d_z);
    d_fake.add_scaled(1.0, &d_fake_from_es);

    let loss = wgan_term + cfg.lambda_mi * nce.loss + cfg.lambda_sim * sim;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            context: "generator step".into(),
            epoch: 0,
            batch: 0,
        });
    }

    let (grads, _) = gen.net.backward(&acts_g, &d_fake);
    gen.net.apply_adam(&grads, adam, "generator")?;

    Ok(GeneratorStepDiag {
        loss,
        wgan_term,
        infonce_term: nce.loss,
        bank_sim_term: sim,
    })
}

fn mean_of(m: &Matrix) -> f64 {
    m.data().iter().sum::<f64>() / m.data().len() as f64
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GanEpochStats {
    pub epoch: usize,
    pub wasserstein: f64,
    pub penalty: f64,
    pub gen_loss: f64,
    pub gen_infonce: f64,
    pub gen_bank_sim: f64,
}

/// Adversarial training on the training split: `critic_steps` critic updates
/// per generator update, each on a fresh stratum of the shuffled epoch.
/// Aborts if the Wasserstein estimate leaves [-1e6, 1e6].
pub fn train_wgan(
    dataset: &Dataset,
    decomposer: &DecomposerModel,
    cfg: &GanTrainConfig,
) -> Result<(GeneratorModel, CriticModel, Vec<GanEpochStats>)> {
    cfg.validate()?;
    let attr_dim = dataset.attrs.attribute_dim();
    let noise_dim = cfg.resolved_noise_dim(attr_dim);
    let mut rng = Rng::new(cfg.seed.unwrap_or(0));
    let mut g_rng = rng.split();
    let mut d_rng = rng.split();
    let mut loop_rng = rng.split();

    let mut gen = GeneratorModel::new(
        noise_dim,
        attr_dim,
        cfg.hidden_dim,
        dataset.feature_dim(),
        &mut g_rng,
    )?;
    let mut critic = CriticModel::new(
        dataset.feature_dim(),
        attr_dim,
        cfg.critic_hidden_dim,
        &mut d_rng,
    )?;
    let bank = SemanticBank::from_decomposer(decomposer, dataset)?;
    let class_set: Vec<ClassId> = dataset.split.seen.clone();

    let mut gen_adam = AdamState::new(cfg.adam);
    let mut critic_adam = AdamState::new(cfg.critic_adam);

    let mut order = dataset.split.train_idx.clone();
    let chunk = cfg.batch_size.min(order.len());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        loop_rng.shuffle(&mut order);
        let chunks: Vec<&[usize]> = order.chunks(chunk).filter(|c| c.len() >= 2).collect();
        let iterations = (chunks.len() / cfg.critic_steps).max(1);

        let mut w_sum = 0.0;
        let mut p_sum = 0.0;
        let mut g_sum = [0.0f64; 3];
        let mut w_count = 0usize;
        let mut next = 0usize;
        for _ in 0..iterations {
            let mut labels_for_gen = Vec::new();
            for _ in 0..cfg.critic_steps {
                let idx = chunks[next % chunks.len()];
                next += 1;
                let real = dataset.features.gather_rows(idx);
                let labels = dataset.labels_at(idx);
                let diag = critic_train_step(
                    &mut critic,
                    &gen,
                    &real,
                    &labels,
                    &dataset.attrs,
                    cfg,
                    &mut critic_adam,
                    &mut loop_rng,
                )?;
                if diag.wasserstein.abs() > 1e6 {
                    return Err(Error::Diverged(format!(
                        "wasserstein estimate {:.3e} at epoch {epoch}",
                        diag.wasserstein
                    )));
                }
                w_sum += diag.wasserstein;
                p_sum += diag.penalty;
                w_count += 1;
                labels_for_gen = labels;
            }
            let diag = generator_train_step(
                &mut gen,
                &critic,
                &decomposer.semantic_encoder,
                &decomposer.scorer,
                &bank,
                &labels_for_gen,
                &dataset.attrs,
                &class_set,
                cfg,
                &mut gen_adam,
                &mut loop_rng,
            )?;
            g_sum[0] += diag.loss;
            g_sum[1] += diag.infonce_term;
            g_sum[2] += diag.bank_sim_term;
        }
        history.push(GanEpochStats {
            epoch,
            wasserstein: w_sum / w_count.max(1) as f64,
            penalty: p_sum / w_count.max(1) as f64,
            gen_loss: g_sum[0] / iterations as f64,
            gen_infonce: g_sum[1] / iterations as f64,
            gen_bank_sim: g_sum[2] / iterations as f64,
        });
    }
    Ok((gen, critic, history))
}

/// Labeled synthetic semantic codes, `n_per_class` per listed class, from
/// fresh noise through the generator and the frozen semantic encoder.
pub fn synthesize_unseen(
    gen: &GeneratorModel,
    semantic_encoder: &MlpModel,
    attrs: &AttributeTable,
    classes: &[ClassId],
    n_per_class: usize,
    seed: u64,
) -> Result<(Matrix, Vec<ClassId>)> {
    if n_per_class == 0 {
        return Err(Error::InvalidConfig(
            "n_per_class must be at least 1".into(),
        ));
    }
    if classes.is_empty() {
        return Err(Error::EmptyBatch {
            context: "synthesize_unseen".into(),
        });
    }
    let mut rng = Rng::new(seed);
    let mut labels = Vec::with_capacity(classes.len() * n_per_class);
    for &c in classes {
        attrs.row_of(c)?; // fail before generating anything
        labels.extend(std::iter::repeat_n(c, n_per_class));
    }
    let attr_rows = attrs.rows_for(&labels)?;
    let noise = rng.normal_matrix(labels.len(), gen.noise_dim);
    let fake = gen.generate(&noise, &attr_rows)?;
    let z = semantic_encoder.forward(&fake)?.output().clone();
    Ok((z, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_benchmark, SyntheticBenchSpec};
    use crate::decomposer::{train_decomposer, DecomposerTrainConfig};
    use crate::numerics::finite_diff_check;
    use once_cell::sync::Lazy;

    fn tiny_bench(seed: u64) -> Dataset {
        let spec = SyntheticBenchSpec {
            seen_classes: 6,
            unseen_classes: 2,
            samples_per_class: 12,
            attribute_dim: 6,
            feature_dim: 24,
            semantic_latent_dim: 6,
            nuisance_latent_dim: 6,
            noise_scale: 0.05,
            mixing_seed: 77,
        };
        make_synthetic_benchmark(&spec, seed).unwrap().0
    }

    fn tiny_attrs() -> AttributeTable {
        AttributeTable::new(
            vec![0, 1, 2],
            Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8]),
        )
        .unwrap()
    }

    #[test]
    fn generator_output_is_nonnegative_and_deterministic() {
        let mut rng = Rng::new(11);
        let gen = GeneratorModel::new(3, 2, 8, 5, &mut rng).unwrap();
        let attrs = tiny_attrs();
        let noise = Rng::new(1).normal_matrix(4, 3);
        let rows = attrs.rows_for(&[0, 1, 2, 0]).unwrap();
        let a = gen.generate(&noise, &rows).unwrap();
        let b = gen.generate(&noise, &rows).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| v >= 0.0));

        // All-negative final pre-activation collapses to the zero vector.
        let mut dead = gen.clone();
        let last = dead.net.layers_mut().last_mut().unwrap();
        for w in last.weights.data_mut() {
            *w = 0.0;
        }
        for b in &mut last.bias {
            *b = -1.0;
        }
        let out = dead.generate(&noise, &rows).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generate_rejects_bad_shapes() {
        let mut rng = Rng::new(12);
        let gen = GeneratorModel::new(3, 2, 8, 5, &mut rng).unwrap();
        let attrs = tiny_attrs();
        let rows = attrs.rows_for(&[0, 1]).unwrap();
        let wide_noise = Rng::new(1).normal_matrix(2, 4);
        assert!(matches!(
            gen.generate(&wide_noise, &rows),
            Err(Error::ShapeMismatch { .. })
        ));
        let short_noise = Rng::new(1).normal_matrix(1, 3);
        assert!(matches!(
            gen.generate(&short_noise, &rows),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn wasserstein_estimate_is_zero_when_fake_equals_real() {
        // Force the generator to reproduce the real batch exactly: zero
        // weights, bias = real row (all rows identical).
        let attrs = tiny_attrs();
        let mut rng = Rng::new(13);
        let mut gen = GeneratorModel::new(2, 2, 4, 3, &mut rng).unwrap();
        for l in gen.net.layers_mut() {
            for w in l.weights.data_mut() {
                *w = 0.0;
            }
            for b in &mut l.bias {
                *b = 0.0;
            }
        }
        let row = [0.5, 1.5, 2.5];
        gen.net.layers_mut()[1].bias.copy_from_slice(&row);

        let critic = CriticModel::new(3, 2, 6, &mut rng).unwrap();
        let labels = [0u32, 0, 0, 0];
        let real = Matrix::from_rows(&vec![row.to_vec(); 4]);
        let attr_rows = attrs.rows_for(&labels).unwrap();
        let noise = Rng::new(2).normal_matrix(4, 2);
        let fake = gen.generate(&noise, &attr_rows).unwrap();
        assert_eq!(fake, real);

        let d_real = critic.values(&real, &attr_rows).unwrap();
        let d_fake = critic.values(&fake, &attr_rows).unwrap();
        let w: f64 = d_real.iter().sum::<f64>() / 4.0 - d_fake.iter().sum::<f64>() / 4.0;
        assert_eq!(w, 0.0);
    }

    #[test]
    fn bank_similarity_hand_case_and_degeneracies() {
        // Bank: e1 class 0, e2 class 1. Query on e1 with class 0:
        // L = ln(1 + e^{-1}) after max arithmetic, same as the in-batch case.
        let bank = SemanticBank {
            z: Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]),
            labels: vec![0, 1],
        };
        let q = Matrix::from_vec(1, 2, vec![2.0, 0.0]);
        let (loss, _) = bank_similarity_loss(&q, &[0], &bank).unwrap();
        assert!((loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);

        // Single-class bank: numerator and denominator accumulate alike.
        let bank1 = SemanticBank {
            z: Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.5, 0.5]),
            labels: vec![3, 3],
        };
        let (loss, grad) = bank_similarity_loss(&q, &[3], &bank1).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&v| v == 0.0));

        // Missing class errors.
        assert!(matches!(
            bank_similarity_loss(&q, &[9], &bank),
            Err(Error::UnknownClass { class: 9, .. })
        ));
    }

    #[test]
    fn bank_similarity_gradient_matches_finite_differences() {
        let mut rng = Rng::new(21);
        let bank = SemanticBank {
            z: rng.normal_matrix(7, 4),
            labels: vec![0, 1, 2, 0, 1, 2, 0],
        };
        let q = rng.normal_matrix(3, 4);
        let labels = [2u32, 0, 1];
        let (_, grad) = bank_similarity_loss(&q, &labels, &bank).unwrap();
        let err = finite_diff_check(
            |p| {
                let probe = Matrix::from_vec(3, 4, p.to_vec());
                bank_similarity_loss(&probe, &labels, &bank).unwrap().0
            },
            q.data(),
            grad.data(),
            1e-6,
        );
        assert!(err < 1e-7, "bank similarity grad error {err}");
    }

    #[test]
    fn bank_similarity_prefers_own_class_direction() {
        let bank = SemanticBank {
            z: Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]),
            labels: vec![0, 1],
        };
        // Query of class 0 at 60 degrees vs 30 degrees from its own bank row.
        let far = Matrix::from_vec(1, 2, vec![0.5, 0.866]);
        let near = Matrix::from_vec(1, 2, vec![0.866, 0.5]);
        let (l_far, _) = bank_similarity_loss(&far, &[0], &bank).unwrap();
        let (l_near, _) = bank_similarity_loss(&near, &[0], &bank).unwrap();
        assert!(
            l_near < l_far,
            "moving toward the class bank should reduce the loss"
        );
    }

    #[test]
    fn generator_loss_matches_finite_differences_through_frozen_encoder() {
        // Reproduce the generator objective as a pure function of generator
        // parameters with noise held fixed, and compare its gradient to the
        // one assembled in generator_train_step (extracted via a zero-lr
        // Adam-free replay).
        let attrs = tiny_attrs();
        let mut rng = Rng::new(31);
        let gen = GeneratorModel::new(2, 2, 5, 4, &mut rng).unwrap();
        let critic = CriticModel::new(4, 2, 6, &mut rng).unwrap();
        let es = MlpModel::new(
            &[4, 5, 3],
            &[Activation::leaky(0.02), Activation::Identity],
            &mut rng,
        )
        .unwrap();
        let scorer = InfoNceScorer::new(3, 2, &mut rng);
        let bank = SemanticBank {
            z: rng.normal_matrix(6, 3),
            labels: vec![0, 1, 2, 0, 1, 2],
        };
        let labels = [0u32, 1, 2, 1];
        let class_set = [0u32, 1, 2];
        let noise = Rng::new(5).normal_matrix(4, 2);
        let (lambda_mi, lambda_sim) = (0.7, 0.4);

        let loss_of = |params: &[f64]| {
            let mut g = gen.clone();
            g.net.load_flat_params(params);
            let attr_rows = attrs.rows_for(&labels).unwrap();
            let fake = g.generate(&noise, &attr_rows).unwrap();
            let d_vals = critic.values(&fake, &attr_rows).unwrap();
            let wgan = -d_vals.iter().sum::<f64>() / 4.0;
            let z = es.forward(&fake).unwrap().output().clone();
            let nce = infonce_loss(&scorer, &z, &labels, &attrs, &class_set).unwrap();
            let (sim, _) = bank_similarity_loss(&z, &labels, &bank).unwrap();
            wgan + lambda_mi * nce.loss + lambda_sim * sim
        };

        // Assemble the analytic gradient exactly as generator_train_step does.
        let attr_rows = attrs.rows_for(&labels).unwrap();
        let input = noise.hstack(&attr_rows);
        let acts_g = gen.net.forward(&input).unwrap();
        let fake = acts_g.output();
        let acts_d = critic.net.forward(&fake.hstack(&attr_rows)).unwrap();
        let up_d = Matrix::from_fn(4, 1, |_, _| -0.25);
        let (_, d_in) = critic.net.backward(&acts_d, &up_d);
        let (mut d_fake, _) = d_in.split_cols(4);
        let acts_es = es.forward(fake).unwrap();
        let nce = infonce_loss(&scorer, acts_es.output(), &labels, &attrs, &class_set).unwrap();
        let (_, d_z_sim) = bank_similarity_loss(acts_es.output(), &labels, &bank).unwrap();
        let mut d_z = nce.z_grad;
        d_z.scale(lambda_mi);
        d_z.add_scaled(lambda_sim, &d_z_sim);
        let (_, d_from_es) = es.backward(&acts_es, &d_z);
        d_fake.add_scaled(1.0, &d_from_es);
        let (grads, _) = gen.net.backward(&acts_g, &d_fake);

        let err = finite_diff_check(loss_of, &gen.net.flatten_params(), &grads.flatten(), 1e-5);
        assert!(err < 1e-5, "generator loss grad error {err}");
    }

    #[test]
    fn zero_epochs_returns_initialized_models() {
        let dataset = tiny_bench(3);
        let dec_cfg = DecomposerTrainConfig {
            semantic_dim: 6,
            residual_dim: 6,
            hidden_dim: 16,
            venc_hidden_dim: 12,
            epochs: 1,
            seed: Some(1),
            ..DecomposerTrainConfig::default()
        };
        let (decomposer, _) = train_decomposer(&dataset, &dec_cfg).unwrap();
        let cfg = GanTrainConfig {
            epochs: 0,
            hidden_dim: 16,
            critic_hidden_dim: 16,
            seed: Some(2),
            ..GanTrainConfig::default()
        };
        let (gen, critic, history) = train_wgan(&dataset, &decomposer, &cfg).unwrap();
        assert!(history.is_empty());

        // Same initialization as a fresh draw from the same seed stream.
        let mut rng = Rng::new(2);
        let mut g_rng = rng.split();
        let mut d_rng = rng.split();
        let gen2 = GeneratorModel::new(6, 6, 16, 24, &mut g_rng).unwrap();
        let critic2 = CriticModel::new(24, 6, 16, &mut d_rng).unwrap();
        assert_eq!(gen.net.flatten_params(), gen2.net.flatten_params());
        assert_eq!(critic.net.flatten_params(), critic2.net.flatten_params());
    }

    struct TrainedFixture {
        dataset: Dataset,
        decomposer: DecomposerModel,
        gen: GeneratorModel,
        history: Vec<GanEpochStats>,
    }

    static TRAINED: Lazy<TrainedFixture> = Lazy::new(|| {
        let dataset = tiny_bench(8);
        let dec_cfg = DecomposerTrainConfig {
            semantic_dim: 8,
            residual_dim: 8,
            hidden_dim: 32,
            venc_hidden_dim: 16,
            lambda_s: 10.0,
            lambda_r: 5.0,
            epochs: 20,
            batch_classes: 6,
            batch_per_class: 4,
            seed: Some(3),
            ..DecomposerTrainConfig::default()
        };
        let (decomposer, _) = train_decomposer(&dataset, &dec_cfg).unwrap();
        let cfg = GanTrainConfig {
            hidden_dim: 96,
            critic_hidden_dim: 48,
            batch_size: 10,
            critic_steps: 5,
            epochs: 4000,
            seed: Some(4),
            ..GanTrainConfig::default()
        };
        let (gen, _, history) = train_wgan(&dataset, &decomposer, &cfg).unwrap();
        TrainedFixture {
            dataset,
            decomposer,
            gen,
            history,
        }
    });

    #[test]
    fn trained_generator_matches_class_means() {
        let f = &TRAINED;
        // Compare per-dimension means of generated vs real features for one
        // seen class.
        let class = f.dataset.split.seen[0];
        let idx: Vec<usize> = f
            .dataset
            .split
            .train_idx
            .iter()
            .copied()
            .filter(|&i| f.dataset.labels[i] == class)
            .collect();
        // Enough draws that the sample error of the generated means (std of
        // a feature is below 1) stays well under the 0.2 budget.
        let real = f.dataset.features.gather_rows(&idx);
        let labels = vec![class; 512];
        let attr_rows = f.dataset.attrs.rows_for(&labels).unwrap();
        let noise = Rng::new(9).normal_matrix(512, f.gen.noise_dim);
        let fake = f.gen.generate(&noise, &attr_rows).unwrap();

        let mean_col = |m: &Matrix, d: usize| {
            (0..m.rows()).map(|i| m.get(i, d)).sum::<f64>() / m.rows() as f64
        };
        let mut worst: f64 = 0.0;
        for d in 0..real.cols() {
            worst = worst.max((mean_col(&real, d) - mean_col(&fake, d)).abs());
        }
        assert!(
            worst < 0.2,
            "per-dimension mean gap {worst} exceeds 0.2; wasserstein history tail {:?}",
            &f.history[f.history.len().saturating_sub(3)..]
        );
    }

    #[test]
    fn wasserstein_magnitude_shrinks_over_training() {
        // |W| starts small under a random critic, peaks while the critic
        // learns, then falls as the generator closes the gap. The trailing
        // average must come well down from that peak.
        let h = &TRAINED.history;
        let window = |s: &[GanEpochStats]| {
            s.iter().map(|e| e.wasserstein.abs()).sum::<f64>() / s.len() as f64
        };
        let peak = h.windows(5).map(window).fold(f64::NEG_INFINITY, f64::max);
        let tail = window(&h[h.len() - 5..]);
        assert!(
            tail < 0.5 * peak,
            "trailing |W| {tail} did not shrink from peak {peak}"
        );
    }

    #[test]
    fn synthesized_codes_cluster_near_their_class() {
        let f = &TRAINED;
        let unseen = &f.dataset.split.unseen;
        let (z, labels) = synthesize_unseen(
            &f.gen,
            &f.decomposer.semantic_encoder,
            &f.dataset.attrs,
            unseen,
            40,
            17,
        )
        .unwrap();
        assert_eq!(z.rows(), 80);
        assert_eq!(labels.len(), 80);

        // Real class means of unseen semantic codes, from the test split.
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let mut hits = 0;
        for &u in unseen {
            let syn_mean = class_mean(&z, &labels, u);
            let mut best_class = u;
            let mut best_sim = f64::NEG_INFINITY;
            for &c in unseen {
                let idx: Vec<usize> = f
                    .dataset
                    .split
                    .test_unseen_idx
                    .iter()
                    .copied()
                    .filter(|&i| f.dataset.labels[i] == c)
                    .collect();
                let x = f.dataset.features.gather_rows(&idx);
                let (zc, _) = f.decomposer.decompose(&x).unwrap();
                let real_mean = class_mean(&zc, &vec![c; zc.rows()], c);
                let s = cos(&syn_mean, &real_mean);
                if s > best_sim {
                    best_sim = s;
                    best_class = c;
                }
            }
            if best_class == u {
                hits += 1;
            }
        }
        assert!(
            hits >= (unseen.len() * 4).div_ceil(5),
            "only {hits}/{} unseen classes matched their own mean",
            unseen.len()
        );
    }

    fn class_mean(z: &Matrix, labels: &[ClassId], class: ClassId) -> Vec<f64> {
        let idx: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == class)
            .map(|(i, _)| i)
            .collect();
        let mut mean = vec![0.0; z.cols()];
        for &i in &idx {
            for (d, m) in mean.iter_mut().enumerate() {
                *m += z.get(i, d);
            }
        }
        for v in &mut mean {
            *v /= idx.len() as f64;
        }
        mean
    }

    #[test]
    fn synthesize_unseen_contract() {
        let mut rng = Rng::new(41);
        let gen = GeneratorModel::new(2, 2, 6, 4, &mut rng).unwrap();
        let es = MlpModel::new(
            &[4, 5, 3],
            &[Activation::leaky(0.02), Activation::Identity],
            &mut rng,
        )
        .unwrap();
        let attrs = tiny_attrs();

        let (z, labels) = synthesize_unseen(&gen, &es, &attrs, &[1, 2], 1, 5).unwrap();
        assert_eq!(z.rows(), 2);
        assert_eq!(labels, vec![1, 2]);

        let (z2, _) = synthesize_unseen(&gen, &es, &attrs, &[1, 2], 1, 5).unwrap();
        assert_eq!(z, z2);
        let (z3, _) = synthesize_unseen(&gen, &es, &attrs, &[1, 2], 1, 6).unwrap();
        assert_ne!(z, z3);

        assert!(matches!(
            synthesize_unseen(&gen, &es, &attrs, &[7], 2, 5),
            Err(Error::UnknownClass { class: 7, .. })
        ));
        assert!(synthesize_unseen(&gen, &es, &attrs, &[1], 0, 5).is_err());
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let dataset = tiny_bench(5);
        let dec_cfg = DecomposerTrainConfig {
            semantic_dim: 6,
            residual_dim: 6,
            hidden_dim: 16,
            venc_hidden_dim: 12,
            epochs: 2,
            seed: Some(1),
            ..DecomposerTrainConfig::default()
        };
        let (decomposer, _) = train_decomposer(&dataset, &dec_cfg).unwrap();
        let cfg = GanTrainConfig {
            hidden_dim: 16,
            critic_hidden_dim: 16,
            epochs: 3,
            batch_size: 16,
            seed: Some(9),
            ..GanTrainConfig::default()
        };
        let (g1, c1, h1) = train_wgan(&dataset, &decomposer, &cfg).unwrap();
        let (g2, c2, h2) = train_wgan(&dataset, &decomposer, &cfg).unwrap();
        assert_eq!(g1.net.flatten_params(), g2.net.flatten_params());
        assert_eq!(c1.net.flatten_params(), c2.net.flatten_params());
        assert_eq!(
            h1.last().unwrap().wasserstein,
            h2.last().unwrap().wasserstein
        );

        let cfg2 = GanTrainConfig {
            seed: Some(10),
            ..cfg
        };
        let (g3, _, _) = train_wgan(&dataset, &decomposer, &cfg2).unwrap();
        assert_ne!(g1.net.flatten_params(), g3.net.flatten_params());
    }

    #[test]
    fn config_validation() {
        let cfg = GanTrainConfig {
            critic_steps: 0,
            ..GanTrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = GanTrainConfig {
            lambda_gp: -1.0,
            ..GanTrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = GanTrainConfig {
            noise_dim: Some(0),
            ..GanTrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
