//! Mutual-information estimators between latent codes and class attributes.
//!
//! Two estimators with opposite bias directions:
//! * `infonce_loss` is the negative of a contrastive lower bound; minimizing
//!   it pushes the semantic code toward the attributes.
//! * `club_estimate` is a variational upper bound built from a diagonal
//!   Gaussian encoder `q(a|z)`; minimizing it strips attribute information
//!   out of the residual code. The encoder is fitted by maximum likelihood
//!   between estimator steps and is frozen while the bound is evaluated.
//!
//! Both degenerate to the standard paired-sample estimators when every
//! sample is its own class, which is what `gaussian_mi_sandwich` exploits
//! to check the sandwich property against a closed-form Gaussian MI.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::{Activation, AdamState, Matrix, MlpGradients, MlpModel, Rng};

pub type ClassId = u32;

const LOG_2PI: f64 = 1.8378770664093453;
const LOGVAR_MIN: f64 = -10.0;
const LOGVAR_MAX: f64 = 10.0;

/// Per-class attribute vectors with O(1) lookup by class id.
#[derive(Clone, Debug)]
pub struct AttributeTable {
    ids: Vec<ClassId>,
    rows: Matrix,
    index: HashMap<ClassId, usize>,
}

impl AttributeTable {
    pub fn new(ids: Vec<ClassId>, rows: Matrix) -> Result<Self> {
        if ids.len() != rows.rows() {
            return Err(Error::ShapeMismatch {
                context: "attribute table".into(),
                expected: format!("{} rows", ids.len()),
                found: format!("{} rows", rows.rows()),
            });
        }
        if ids.is_empty() {
            return Err(Error::InvalidDataset("attribute table is empty".into()));
        }
        if let Some((r, c)) = rows.first_non_finite() {
            return Err(Error::NonFinite {
                context: format!("attribute row for class {}", ids[r]),
                row: r,
                col: c,
            });
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (pos, &id) in ids.iter().enumerate() {
            if index.insert(id, pos).is_some() {
                return Err(Error::InvalidDataset(format!(
                    "duplicate attribute row for class {id}"
                )));
            }
        }
        Ok(AttributeTable { ids, rows, index })
    }

    pub fn ids(&self) -> &[ClassId] {
        &self.ids
    }

    pub fn num_classes(&self) -> usize {
        self.ids.len()
    }

    pub fn attribute_dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.index.contains_key(&class)
    }

    pub fn row_of(&self, class: ClassId) -> Result<&[f64]> {
        self.index
            .get(&class)
            .map(|&pos| self.rows.row(pos))
            .ok_or(Error::UnknownClass {
                class,
                context: "attribute table".into(),
            })
    }

    /// Attribute rows for `classes`, in the given order. Repeats allowed, so
    /// this serves both per-class gathers and per-sample label expansion.
    pub fn rows_for(&self, classes: &[ClassId]) -> Result<Matrix> {
        let mut out = Matrix::zeros(classes.len(), self.attribute_dim());
        for (k, &c) in classes.iter().enumerate() {
            out.row_mut(k).copy_from_slice(self.row_of(c)?);
        }
        Ok(out)
    }

    /// Scales every row to unit L2 norm. Zero rows cannot be normalized.
    pub fn l2_normalize(&mut self) -> Result<()> {
        for i in 0..self.rows.rows() {
            let norm = self.rows.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::InvalidDataset(format!(
                    "attribute row for class {} has zero norm and cannot be normalized",
                    self.ids[i]
                )));
            }
            for v in self.rows.row_mut(i) {
                *v /= norm;
            }
        }
        Ok(())
    }
}

/// Bilinear score f(z, a) = z^T W a for the contrastive bound.
#[derive(Clone, Debug)]
pub struct InfoNceScorer {
    pub weight: Matrix, // z_dim x attr_dim
}

impl InfoNceScorer {
    pub fn new(z_dim: usize, attr_dim: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (z_dim + attr_dim) as f64).sqrt();
        InfoNceScorer {
            weight: Matrix::from_fn(z_dim, attr_dim, |_, _| rng.uniform_range(-limit, limit)),
        }
    }

    pub fn zeros(z_dim: usize, attr_dim: usize) -> Self {
        InfoNceScorer {
            weight: Matrix::zeros(z_dim, attr_dim),
        }
    }

    pub fn z_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn attr_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Score matrix S[i][c] = z_i^T W a_c for every candidate row of `attr_rows`.
    pub fn score_matrix(&self, z: &Matrix, attr_rows: &Matrix) -> Matrix {
        z.matmul(&self.weight).matmul_transpose_b(attr_rows)
    }
}

#[derive(Debug)]
pub struct InfoNceOutput {
    pub loss: f64,
    pub z_grad: Matrix,
    pub weight_grad: Matrix,
}

/// Contrastive loss over the full candidate class set:
/// loss = -(1/N) sum_i [ S[i,pos_i] - logsumexp_c S[i,c] + ln |C| ].
/// The negation of this loss is a lower bound on I(z; a), capped at ln |C|.
/// The candidate set is `class_set`, not just the classes in the batch.
pub fn infonce_loss(
    scorer: &InfoNceScorer,
    z: &Matrix,
    labels: &[ClassId],
    attrs: &AttributeTable,
    class_set: &[ClassId],
) -> Result<InfoNceOutput> {
    if z.rows() == 0 {
        return Err(Error::EmptyBatch {
            context: "infonce_loss".into(),
        });
    }
    if labels.len() != z.rows() {
        return Err(Error::ShapeMismatch {
            context: "infonce_loss labels".into(),
            expected: format!("{} labels", z.rows()),
            found: format!("{}", labels.len()),
        });
    }
    if z.cols() != scorer.z_dim() {
        return Err(Error::ShapeMismatch {
            context: "infonce_loss latent".into(),
            expected: format!("{} cols", scorer.z_dim()),
            found: format!("{}", z.cols()),
        });
    }
    if class_set.is_empty() {
        return Err(Error::EmptyBatch {
            context: "infonce_loss class set".into(),
        });
    }

    let mut col_of = HashMap::with_capacity(class_set.len());
    for (col, &c) in class_set.iter().enumerate() {
        col_of.insert(c, col);
    }
    let pos: Vec<usize> = labels
        .iter()
        .map(|&y| {
            col_of.get(&y).copied().ok_or(Error::UnknownClass {
                class: y,
                context: "infonce_loss class set".into(),
            })
        })
        .collect::<Result<_>>()?;

    let attr_rows = attrs.rows_for(class_set)?;
    if attr_rows.cols() != scorer.attr_dim() {
        return Err(Error::ShapeMismatch {
            context: "infonce_loss attributes".into(),
            expected: format!("{} cols", scorer.attr_dim()),
            found: format!("{}", attr_rows.cols()),
        });
    }

    let scores = scorer.score_matrix(z, &attr_rows);
    let (loss, score_grad) = infonce_from_scores(&scores, &pos);

    // dL/dZ = dS * A * W^T; dL/dW = Z^T * dS * A.
    let ds_a = score_grad.matmul(&attr_rows);
    let z_grad = ds_a.matmul_transpose_b(&scorer.weight);
    let weight_grad = z.transpose_matmul(&ds_a);

    Ok(InfoNceOutput {
        loss,
        z_grad,
        weight_grad,
    })
}

/// Shared kernel: loss and d loss / d scores for a score matrix whose row i
/// has its positive candidate in column pos[i].
fn infonce_from_scores(scores: &Matrix, pos: &[usize]) -> (f64, Matrix) {
    let n = scores.rows();
    let c = scores.cols();
    let ln_c = (c as f64).ln();
    let inv_n = 1.0 / n as f64;

    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, c);
    for i in 0..n {
        let row = scores.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut denom = 0.0;
        for &s in row {
            denom += (s - max).exp();
        }
        let lse = max + denom.ln();
        loss -= row[pos[i]] - lse + ln_c;

        let grow = grad.row_mut(i);
        for (g, &s) in grow.iter_mut().zip(row) {
            *g = inv_n * (s - max).exp() / denom;
        }
        grow[pos[i]] -= inv_n;
    }
    (loss * inv_n, grad)
}

/// Diagonal Gaussian encoder q(a | z) = N(mu(z), diag(exp(logvar(z)))).
/// Two hidden layers; the head emits [mu | logvar] and logvar is clamped
/// to [-10, 10] before use.
#[derive(Clone, Debug)]
pub struct ClubVariationalEncoder {
    net: MlpModel,
    attr_dim: usize,
}

pub struct VencForward {
    pub mu: Matrix,
    pub logvar: Matrix,
    acts: crate::numerics::MlpActivations,
    clamp_mask: Matrix, // 1 where the raw logvar was inside the clamp range
}

impl ClubVariationalEncoder {
    pub fn new(z_dim: usize, attr_dim: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        let net = MlpModel::new(
            &[z_dim, hidden, hidden, 2 * attr_dim],
            &[
                Activation::leaky(0.02),
                Activation::leaky(0.02),
                Activation::Identity,
            ],
            rng,
        )?;
        Ok(ClubVariationalEncoder { net, attr_dim })
    }

    pub fn from_net(net: MlpModel, attr_dim: usize) -> Result<Self> {
        if net.output_dim() != 2 * attr_dim {
            return Err(Error::ShapeMismatch {
                context: "variational encoder head".into(),
                expected: format!("{} outputs", 2 * attr_dim),
                found: format!("{}", net.output_dim()),
            });
        }
        Ok(ClubVariationalEncoder { net, attr_dim })
    }

    pub fn net(&self) -> &MlpModel {
        &self.net
    }

    pub fn attr_dim(&self) -> usize {
        self.attr_dim
    }

    pub fn z_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn forward(&self, z: &Matrix) -> Result<VencForward> {
        let acts = self.net.forward(z)?;
        let (mu, raw) = acts.output().split_cols(self.attr_dim);
        let logvar = raw.map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
        let clamp_mask = raw.map(|v| {
            if (LOGVAR_MIN..=LOGVAR_MAX).contains(&v) {
                1.0
            } else {
                0.0
            }
        });
        Ok(VencForward {
            mu,
            logvar,
            acts,
            clamp_mask,
        })
    }

    /// Backpropagates (d/d mu, d/d logvar) to parameter and input gradients.
    fn backward(
        &self,
        fwd: &VencForward,
        mu_grad: &Matrix,
        logvar_grad: &Matrix,
    ) -> (MlpGradients, Matrix) {
        let mut upstream = Matrix::zeros(fwd.mu.rows(), 2 * self.attr_dim);
        for i in 0..upstream.rows() {
            let row = upstream.row_mut(i);
            row[..self.attr_dim].copy_from_slice(mu_grad.row(i));
            for (d, (&g, &m)) in row[self.attr_dim..]
                .iter_mut()
                .zip(logvar_grad.row(i).iter().zip(fwd.clamp_mask.row(i)))
            {
                *d = g * m;
            }
        }
        self.net.backward(&fwd.acts, &upstream)
    }
}

/// Log-density table: out[i][c] = log q(a_c | z_i) for every class in
/// `class_set`, using the encoder as-is.
pub fn club_loglik(
    venc: &ClubVariationalEncoder,
    z: &Matrix,
    attrs: &AttributeTable,
    class_set: &[ClassId],
) -> Result<Matrix> {
    let fwd = venc.forward(z)?;
    let attr_rows = attrs.rows_for(class_set)?;
    Ok(loglik_table(&fwd.mu, &fwd.logvar, &attr_rows))
}

fn loglik_table(mu: &Matrix, logvar: &Matrix, attr_rows: &Matrix) -> Matrix {
    let n = mu.rows();
    let c = attr_rows.rows();
    let d = attr_rows.cols();
    assert_eq!(mu.cols(), d, "mu width vs attribute dim");
    let mut out = Matrix::zeros(n, c);
    for i in 0..n {
        let mu_i = mu.row(i);
        let lv_i = logvar.row(i);
        let inv_var: Vec<f64> = lv_i.iter().map(|&lv| (-lv).exp()).collect();
        let base: f64 = lv_i.iter().map(|&lv| lv + LOG_2PI).sum();
        for k in 0..c {
            let a = attr_rows.row(k);
            let mut quad = 0.0;
            for j in 0..d {
                let diff = a[j] - mu_i[j];
                quad += diff * diff * inv_var[j];
            }
            out.set(i, k, -0.5 * (quad + base));
        }
    }
    out
}

#[derive(Debug)]
pub struct ClubOutput {
    pub estimate: f64,
    pub z_grad: Matrix,
}

/// Empirical upper-bound estimate
///   (1/N) sum_i [ log q(a_{y_i}|z_i) - (1/|C|) sum_c log q(a_c|z_i) ]
/// plus its gradient with respect to z. The encoder is frozen here: no
/// parameter gradients flow from this estimate.
pub fn club_estimate(
    venc: &ClubVariationalEncoder,
    z: &Matrix,
    labels: &[ClassId],
    attrs: &AttributeTable,
    class_set: &[ClassId],
) -> Result<ClubOutput> {
    if z.rows() == 0 {
        return Err(Error::EmptyBatch {
            context: "club_estimate".into(),
        });
    }
    if labels.len() != z.rows() {
        return Err(Error::ShapeMismatch {
            context: "club_estimate labels".into(),
            expected: format!("{} labels", z.rows()),
            found: format!("{}", labels.len()),
        });
    }
    let mut col_of = HashMap::with_capacity(class_set.len());
    for (col, &c) in class_set.iter().enumerate() {
        col_of.insert(c, col);
    }
    let pos: Vec<usize> = labels
        .iter()
        .map(|&y| {
            col_of.get(&y).copied().ok_or(Error::UnknownClass {
                class: y,
                context: "club_estimate class set".into(),
            })
        })
        .collect::<Result<_>>()?;

    let fwd = venc.forward(z)?;
    let attr_rows = attrs.rows_for(class_set)?;
    let ll = loglik_table(&fwd.mu, &fwd.logvar, &attr_rows);

    let n = z.rows();
    let c = class_set.len();
    let inv_n = 1.0 / n as f64;
    let inv_c = 1.0 / c as f64;

    let mut estimate = 0.0;
    for i in 0..n {
        let row = ll.row(i);
        let mean: f64 = row.iter().sum::<f64>() * inv_c;
        estimate += row[pos[i]] - mean;
    }
    estimate *= inv_n;

    // w[i][c] = (1/N) (1{c = pos_i} - 1/|C|); gradients of the estimate
    // w.r.t. mu and logvar follow from d loglik / d mu = (a - mu) / var and
    // d loglik / d logvar = ((a - mu)^2 / var - 1) / 2.
    let d = venc.attr_dim();
    let mut mu_grad = Matrix::zeros(n, d);
    let mut lv_grad = Matrix::zeros(n, d);
    for (i, &pos_i) in pos.iter().enumerate() {
        let mu_i = fwd.mu.row(i);
        let lv_i = fwd.logvar.row(i);
        let inv_var: Vec<f64> = lv_i.iter().map(|&lv| (-lv).exp()).collect();
        for k in 0..c {
            let w = inv_n * (if k == pos_i { 1.0 } else { 0.0 } - inv_c);
            if w == 0.0 {
                continue;
            }
            let a = attr_rows.row(k);
            let mg = mu_grad.row_mut(i);
            let lg = lv_grad.row_mut(i);
            for j in 0..d {
                let diff = a[j] - mu_i[j];
                mg[j] += w * diff * inv_var[j];
                lg[j] += w * 0.5 * (diff * diff * inv_var[j] - 1.0);
            }
        }
    }

    let (_, z_grad) = venc.backward(&fwd, &mu_grad, &lv_grad);
    Ok(ClubOutput { estimate, z_grad })
}

/// Mean log-likelihood of the positive pairs and the parameter gradients of
/// its negation (the MLE objective minimized when fitting the encoder).
fn mle_gradients(
    venc: &ClubVariationalEncoder,
    z: &Matrix,
    attr_rows: &Matrix,
) -> Result<(f64, MlpGradients)> {
    assert_eq!(z.rows(), attr_rows.rows(), "paired batch sizes");
    let fwd = venc.forward(z)?;
    let n = z.rows();
    let d = venc.attr_dim();
    let inv_n = 1.0 / n as f64;

    let mut loglik = 0.0;
    let mut mu_grad = Matrix::zeros(n, d);
    let mut lv_grad = Matrix::zeros(n, d);
    for i in 0..n {
        let mu_i = fwd.mu.row(i);
        let lv_i = fwd.logvar.row(i);
        let a = attr_rows.row(i);
        let mg = mu_grad.row_mut(i);
        let lg = lv_grad.row_mut(i);
        for j in 0..d {
            let inv_var = (-lv_i[j]).exp();
            let diff = a[j] - mu_i[j];
            loglik += -0.5 * (diff * diff * inv_var + lv_i[j] + LOG_2PI);
            // NLL gradients (loss = -mean loglik).
            mg[j] = -inv_n * diff * inv_var;
            lg[j] = inv_n * 0.5 * (1.0 - diff * diff * inv_var);
        }
    }
    loglik *= inv_n;

    let (grads, _) = venc.backward(&fwd, &mu_grad, &lv_grad);
    Ok((loglik, grads))
}

/// One maximum-likelihood update of the encoder on paired (z, label) data.
/// Returns the mean log-likelihood before the update.
pub fn fit_variational_encoder_step(
    venc: &mut ClubVariationalEncoder,
    z: &Matrix,
    labels: &[ClassId],
    attrs: &AttributeTable,
    adam: &mut AdamState,
) -> Result<f64> {
    if z.rows() == 0 {
        return Err(Error::EmptyBatch {
            context: "fit_variational_encoder_step".into(),
        });
    }
    if labels.len() != z.rows() {
        return Err(Error::ShapeMismatch {
            context: "fit_variational_encoder_step labels".into(),
            expected: format!("{} labels", z.rows()),
            found: format!("{}", labels.len()),
        });
    }
    let attr_rows = attrs.rows_for(labels)?;
    let (loglik, grads) = mle_gradients(venc, z, &attr_rows)?;
    venc.net.apply_adam(&grads, adam, "venc")?;
    Ok(loglik)
}

#[derive(Clone, Copy, Debug)]
pub struct SandwichPoint {
    pub rho: f64,
    pub true_mi: f64,
    pub infonce: f64,
    pub club: f64,
}

/// Correlated scalar Gaussian benchmark. Draws (z, a) with correlation
/// `rho`, fits the bilinear scorer and the variational encoder on training
/// pairs, then evaluates both estimators on held-out pairs where every
/// sample is its own candidate class. True MI is -ln(1 - rho^2) / 2.
pub fn gaussian_mi_sandwich(rho: f64, seed: u64) -> Result<SandwichPoint> {
    if !(0.0..1.0).contains(&rho) || rho == 0.0 {
        return Err(Error::InvalidConfig(format!(
            "rho must be in (0, 1), got {rho}"
        )));
    }
    let mut rng = Rng::new(seed);
    let comp = (1.0 - rho * rho).sqrt();
    let draw_pairs = |rng: &mut Rng, n: usize| {
        let mut z = Matrix::zeros(n, 1);
        let mut a = Matrix::zeros(n, 1);
        for i in 0..n {
            let zi = rng.normal();
            z.set(i, 0, zi);
            a.set(i, 0, rho * zi + comp * rng.normal());
        }
        (z, a)
    };

    let n_train = 2048;
    let n_eval = 1024;
    let batch = 256;
    let (z_train, a_train) = draw_pairs(&mut rng, n_train);
    let (z_eval, a_eval) = draw_pairs(&mut rng, n_eval);

    let batch_ids: Vec<ClassId> = (0..batch as ClassId).collect();
    let batch_of = |rng: &mut Rng| {
        let idx: Vec<usize> = (0..batch).map(|_| rng.index(n_train)).collect();
        (z_train.gather_rows(&idx), a_train.gather_rows(&idx))
    };

    // Fit the bilinear scorer by minimizing the contrastive loss; each
    // minibatch treats its own samples as the candidate classes.
    let mut scorer = InfoNceScorer::zeros(1, 1);
    let mut scorer_adam =
        AdamState::new(crate::numerics::AdamConfig::default().with_learning_rate(0.05));
    for _ in 0..400 {
        let (zb, ab) = batch_of(&mut rng);
        let table = AttributeTable::new(batch_ids.clone(), ab)?;
        let out = infonce_loss(&scorer, &zb, &batch_ids, &table, &batch_ids)?;
        scorer_adam.step(&mut [crate::numerics::AdamParam {
            name: "scorer.w",
            values: scorer.weight.data_mut(),
            grad: out.weight_grad.data(),
        }])?;
    }

    // Fit the variational encoder by maximum likelihood on positive pairs.
    let mut venc = ClubVariationalEncoder::new(1, 1, 64, &mut rng)?;
    let mut venc_adam =
        AdamState::new(crate::numerics::AdamConfig::default().with_learning_rate(1e-3));
    for _ in 0..600 {
        let (zb, ab) = batch_of(&mut rng);
        let (_, grads) = mle_gradients(&venc, &zb, &ab)?;
        venc.net.apply_adam(&grads, &mut venc_adam, "venc")?;
    }

    // Held-out evaluation: every eval sample is its own class.
    let eval_ids: Vec<ClassId> = (0..n_eval as ClassId).collect();
    let eval_table = AttributeTable::new(eval_ids.clone(), a_eval)?;
    let nce = infonce_loss(&scorer, &z_eval, &eval_ids, &eval_table, &eval_ids)?;
    let club = club_estimate(&venc, &z_eval, &eval_ids, &eval_table, &eval_ids)?;

    Ok(SandwichPoint {
        rho,
        true_mi: -0.5 * (1.0 - rho * rho).ln(),
        infonce: -nce.loss,
        club: club.estimate,
    })
}
