//! Evaluation protocol: class-weighted top-1 accuracies on the seen and
//! unseen test splits, their harmonic mean, a ridge-regression probe for
//! how much attribute information a code carries, and CSV exports of
//! embeddings and per-sample predictions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::SoftmaxClassifier;
use crate::data::Dataset;
use crate::decomposer::DecomposerModel;
use crate::error::{Error, Result};
use crate::mi::ClassId;
use crate::numerics::{Matrix, MlpModel};

/// Class-weighted mean of within-class top-1 accuracy, plus the per-class
/// breakdown. Every class in `class_set` must have at least one sample and
/// every label must belong to `class_set`.
pub fn per_class_accuracy(
    predictions: &[ClassId],
    labels: &[ClassId],
    class_set: &[ClassId],
) -> Result<(f64, BTreeMap<ClassId, f64>)> {
    if predictions.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "per_class_accuracy".into(),
            expected: format!("{} predictions", labels.len()),
            found: format!("{}", predictions.len()),
        });
    }
    if class_set.is_empty() {
        return Err(Error::EmptyBatch {
            context: "per_class_accuracy class set".into(),
        });
    }
    let mut totals: BTreeMap<ClassId, (usize, usize)> =
        class_set.iter().map(|&c| (c, (0, 0))).collect();
    for (&p, &l) in predictions.iter().zip(labels) {
        let entry = totals.get_mut(&l).ok_or_else(|| Error::UnknownClass {
            class: l,
            context: "per_class_accuracy label outside class set".into(),
        })?;
        entry.0 += 1;
        if p == l {
            entry.1 += 1;
        }
    }
    let mut per_class = BTreeMap::new();
    let mut sum = 0.0;
    for (&c, &(total, correct)) in &totals {
        if total == 0 {
            return Err(Error::InvalidDataset(format!(
                "class {c} has no evaluation samples"
            )));
        }
        let acc = correct as f64 / total as f64;
        per_class.insert(c, acc);
        sum += acc;
    }
    Ok((sum / class_set.len() as f64, per_class))
}

/// 2ab/(a+b) on accuracy fractions; 0 when both are 0.
pub fn harmonic_mean(acc_s: f64, acc_u: f64) -> Result<f64> {
    for v in [acc_s, acc_u] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidConfig(format!("accuracy {v} outside [0, 1]")));
        }
    }
    if acc_s + acc_u == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * acc_s * acc_u / (acc_s + acc_u))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GzslCounts {
    pub test_seen: usize,
    pub test_unseen: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GzslReport {
    pub acc_s: f64,
    pub acc_u: f64,
    pub acc_h: f64,
    pub per_class: BTreeMap<ClassId, f64>,
    pub counts: GzslCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub sample_index: usize,
    pub class_id: ClassId,
    pub predicted_class: ClassId,
    pub top1_prob: f64,
}

#[derive(Clone, Debug)]
pub struct GzslEvaluation {
    pub report: GzslReport,
    pub rows: Vec<PredictionRow>,
}

/// Runs the full protocol: semantic codes of both test splits through the
/// frozen encoder, predictions over the whole label union, class-weighted
/// accuracies and their harmonic mean.
pub fn gzsl_evaluate(
    clf: &SoftmaxClassifier,
    semantic_encoder: &MlpModel,
    dataset: &Dataset,
) -> Result<GzslEvaluation> {
    let split = &dataset.split;
    let mut rows = Vec::with_capacity(split.test_seen_idx.len() + split.test_unseen_idx.len());

    let mut evaluate_block = |idx: &[usize], class_set: &[ClassId]| -> Result<f64> {
        let x = dataset.features.gather_rows(idx);
        let labels = dataset.labels_at(idx);
        let z = semantic_encoder.forward(&x)?.output().clone();
        let preds = clf.predict(&z)?;
        let probs = clf.predict_proba(&z)?;
        for (k, &i) in idx.iter().enumerate() {
            let top1 = probs
                .row(k)
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            rows.push(PredictionRow {
                sample_index: i,
                class_id: labels[k],
                predicted_class: preds[k],
                top1_prob: top1,
            });
        }
        let (acc, _) = per_class_accuracy(&preds, &labels, class_set)?;
        Ok(acc)
    };

    let acc_s = evaluate_block(&split.test_seen_idx, &split.seen)?;
    let acc_u = evaluate_block(&split.test_unseen_idx, &split.unseen)?;
    let acc_h = harmonic_mean(acc_s, acc_u)?;

    // Per-class breakdown over the union, recomputed from the stored rows.
    let mut per_class = BTreeMap::new();
    for classes in [&split.seen, &split.unseen] {
        let block: Vec<&PredictionRow> = rows
            .iter()
            .filter(|r| classes.contains(&r.class_id))
            .collect();
        let preds: Vec<ClassId> = block.iter().map(|r| r.predicted_class).collect();
        let labels: Vec<ClassId> = block.iter().map(|r| r.class_id).collect();
        let (_, map) = per_class_accuracy(&preds, &labels, classes)?;
        per_class.extend(map);
    }

    Ok(GzslEvaluation {
        report: GzslReport {
            acc_s,
            acc_u,
            acc_h,
            per_class,
            counts: GzslCounts {
                test_seen: split.test_seen_idx.len(),
                test_unseen: split.test_unseen_idx.len(),
            },
        },
        rows,
    })
}

/// Writes per-sample predictions as CSV: sample_index, class_id,
/// predicted_class, top1_prob.
pub fn write_predictions_csv(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| Error::csv(path.display().to_string(), e))?;
    w.write_record(["sample_index", "class_id", "predicted_class", "top1_prob"])
        .map_err(|e| Error::csv(path.display().to_string(), e))?;
    for r in rows {
        w.write_record([
            r.sample_index.to_string(),
            r.class_id.to_string(),
            r.predicted_class.to_string(),
            format!("{:.17}", r.top1_prob),
        ])
        .map_err(|e| Error::csv(path.display().to_string(), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Reads a predictions CSV back (the inverse of `write_predictions_csv`).
pub fn read_predictions_csv(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut r =
        csv::Reader::from_path(path).map_err(|e| Error::csv(path.display().to_string(), e))?;
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path.display().to_string(), e))?;
        let field = |k: usize, what: &str| -> Result<&str> {
            rec.get(k).ok_or_else(|| Error::MalformedRecord {
                path: path.display().to_string(),
                what: what.into(),
                line: line as u64 + 2,
                detail: "missing field".into(),
            })
        };
        let parse_err = |what: &str, detail: String| Error::MalformedRecord {
            path: path.display().to_string(),
            what: what.into(),
            line: line as u64 + 2,
            detail,
        };
        rows.push(PredictionRow {
            sample_index: field(0, "sample_index")?
                .parse()
                .map_err(|e| parse_err("sample_index", format!("{e}")))?,
            class_id: field(1, "class_id")?
                .parse()
                .map_err(|e| parse_err("class_id", format!("{e}")))?,
            predicted_class: field(2, "predicted_class")?
                .parse()
                .map_err(|e| parse_err("predicted_class", format!("{e}")))?,
            top1_prob: field(3, "top1_prob")?
                .parse()
                .map_err(|e| parse_err("top1_prob", format!("{e}")))?,
        });
    }
    Ok(rows)
}

fn cholesky_solve(a: &Matrix, b: &Matrix) -> Matrix {
    // a must be symmetric positive definite (ridge-regularized Gram matrix).
    let d = a.rows();
    assert_eq!(d, a.cols(), "square system");
    assert_eq!(d, b.rows(), "rhs height");
    let mut l = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                assert!(s > 0.0, "matrix not positive definite");
                l.set(i, j, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    // Solve L y = b, then L^T x = y, column by column.
    let mut x = Matrix::zeros(d, b.cols());
    for c in 0..b.cols() {
        let mut y = vec![0.0; d];
        for i in 0..d {
            let mut s = b.get(i, c);
            for (k, &yk) in y.iter().enumerate().take(i) {
                s -= l.get(i, k) * yk;
            }
            y[i] = s / l.get(i, i);
        }
        for i in (0..d).rev() {
            let mut s = y[i];
            for k in i + 1..d {
                s -= l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    x
}

const RIDGE_LAMBDA: f64 = 1e-3;

/// Held-out R-squared of a ridge regression from codes to targets. Training
/// uses even-index samples, scoring uses odd-index ones; both are centered
/// on training means. Zero target variance on the held-out half gives 0.
pub fn linear_probe(z: &Matrix, targets: &Matrix) -> Result<f64> {
    if z.rows() != targets.rows() {
        return Err(Error::ShapeMismatch {
            context: "linear_probe".into(),
            expected: format!("{} target rows", z.rows()),
            found: format!("{}", targets.rows()),
        });
    }
    if z.rows() < z.cols() + 1 {
        return Err(Error::InvalidDataset(format!(
            "linear probe needs at least dim+1 = {} samples, got {}",
            z.cols() + 1,
            z.rows()
        )));
    }
    let train_idx: Vec<usize> = (0..z.rows()).step_by(2).collect();
    let test_idx: Vec<usize> = (1..z.rows()).step_by(2).collect();
    if test_idx.is_empty() {
        return Err(Error::InvalidDataset(
            "linear probe needs at least two samples".into(),
        ));
    }
    let center = |m: &Matrix, idx: &[usize]| -> (Matrix, Vec<f64>) {
        let sub = m.gather_rows(idx);
        let mut means = vec![0.0; m.cols()];
        for i in 0..sub.rows() {
            for (mean, v) in means.iter_mut().zip(sub.row(i)) {
                *mean += v;
            }
        }
        for mean in &mut means {
            *mean /= sub.rows() as f64;
        }
        let mut centered = sub;
        for i in 0..centered.rows() {
            for (v, mean) in centered.row_mut(i).iter_mut().zip(&means) {
                *v -= mean;
            }
        }
        (centered, means)
    };

    let (x_train, x_mean) = center(z, &train_idx);
    let (y_train, y_mean) = center(targets, &train_idx);
    let mut gram = x_train.transpose_matmul(&x_train);
    for i in 0..gram.rows() {
        gram.set(i, i, gram.get(i, i) + RIDGE_LAMBDA);
    }
    let w = cholesky_solve(&gram, &x_train.transpose_matmul(&y_train));

    let x_test = z.gather_rows(&test_idx);
    let y_test = targets.gather_rows(&test_idx);
    let mut test_mean = vec![0.0; y_test.cols()];
    for i in 0..y_test.rows() {
        for (mean, v) in test_mean.iter_mut().zip(y_test.row(i)) {
            *mean += v;
        }
    }
    for mean in &mut test_mean {
        *mean /= y_test.rows() as f64;
    }

    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for i in 0..x_test.rows() {
        for c in 0..y_test.cols() {
            let mut pred = y_mean[c];
            for (d, &xm) in x_mean.iter().enumerate() {
                pred += (x_test.get(i, d) - xm) * w.get(d, c);
            }
            let y = y_test.get(i, c);
            ss_res += (y - pred) * (y - pred);
            ss_tot += (y - test_mean[c]) * (y - test_mean[c]);
        }
    }
    if ss_tot == 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// Writes one CSV per encoder (semantic always, residual when present) with
/// columns sample_index, class_id, z_0... over every sample in the dataset.
/// Returns the written paths.
pub fn export_embeddings(
    model: &DecomposerModel,
    dataset: &Dataset,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let (z_s, z_r) = model.decompose(&dataset.features)?;
    let mut written = Vec::new();
    let mut write = |name: &str, z: &Matrix| -> Result<()> {
        let path = dir.join(name);
        let mut w =
            csv::Writer::from_path(&path).map_err(|e| Error::csv(path.display().to_string(), e))?;
        let mut header = vec!["sample_index".to_string(), "class_id".to_string()];
        header.extend((0..z.cols()).map(|d| format!("z_{d}")));
        w.write_record(&header)
            .map_err(|e| Error::csv(path.display().to_string(), e))?;
        for i in 0..z.rows() {
            let mut rec = vec![i.to_string(), dataset.labels[i].to_string()];
            rec.extend(z.row(i).iter().map(|v| format!("{v:.17}")));
            w.write_record(&rec)
                .map_err(|e| Error::csv(path.display().to_string(), e))?;
        }
        w.flush()
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        written.push(path);
        Ok(())
    };
    write("semantic_embeddings.csv", &z_s)?;
    if let Some(z_r) = &z_r {
        write("residual_embeddings.csv", z_r)?;
    }
    Ok(written)
}
