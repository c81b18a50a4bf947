//! Dataset loading, saving, validation, and the synthetic benchmark.
//!
//! On-disk layout of a dataset directory:
//! * `features.bin`   binary matrix (magic "SEGZ", version 1, u32 rows,
//!   u32 cols, then f32 little-endian values row-major)
//! * `labels.csv`     header `sample_index,class_id`, one row per sample
//! * `attributes.csv` header `class_id,a_0,...`, one row per class
//! * `split.json`     seen/unseen class lists and index sets
//!
//! Features are widened to f64 in memory; attributes are L2-normalized at
//! load unless explicitly disabled.

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mi::{AttributeTable, ClassId};
use crate::numerics::{Matrix, Rng};

pub const FEATURE_MAGIC: [u8; 4] = *b"SEGZ";
pub const FEATURE_VERSION: u32 = 1;

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

pub fn write_feature_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * m.data().len());
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for (k, &v) in m.data().iter().enumerate() {
        let narrowed = v as f32;
        if !narrowed.is_finite() {
            return Err(Error::NonFinite {
                context: format!("feature matrix written to {}", path_str(path)),
                row: k / m.cols(),
                col: k % m.cols(),
            });
        }
        buf.extend_from_slice(&narrowed.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path_str(path), e))?;
    file.write_all(&buf)
        .map_err(|e| Error::io(path_str(path), e))?;
    Ok(())
}

pub fn load_feature_matrix(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path_str(path), e))?;
    if bytes.len() < 16 {
        return Err(Error::BadPayload {
            path: path_str(path),
            expected: "at least 16 header bytes".into(),
            found: format!("{} bytes", bytes.len()),
        });
    }
    if bytes[..4] != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            path: path_str(path),
            expected: format!("{FEATURE_MAGIC:02x?}"),
            found: format!("{:02x?}", &bytes[..4]),
        });
    }
    let version = LittleEndian::read_u32(&bytes[4..8]);
    if version != FEATURE_VERSION {
        return Err(Error::BadVersion {
            path: path_str(path),
            supported: FEATURE_VERSION,
            found: version,
        });
    }
    let rows = LittleEndian::read_u32(&bytes[8..12]) as usize;
    let cols = LittleEndian::read_u32(&bytes[12..16]) as usize;
    let expected = 4u64 * rows as u64 * cols as u64;
    let found = (bytes.len() - 16) as u64;
    if expected != found {
        return Err(Error::BadPayload {
            path: path_str(path),
            expected: format!("{expected} payload bytes"),
            found: format!("{found} payload bytes"),
        });
    }
    let mut data = vec![0.0f64; rows * cols];
    for (k, v) in data.iter_mut().enumerate() {
        let raw = LittleEndian::read_f32(&bytes[16 + 4 * k..20 + 4 * k]);
        if !raw.is_finite() {
            return Err(Error::NonFinite {
                context: format!("feature matrix {}", path_str(path)),
                row: k / cols.max(1),
                col: k % cols.max(1),
            });
        }
        *v = raw as f64;
    }
    Ok(Matrix::from_vec(rows, cols, data))
}

pub fn write_labels_csv(path: &Path, labels: &[ClassId]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        path: path_str(path),
        source: e,
    })?;
    let wrap = |e| Error::Csv {
        path: path_str(path),
        source: e,
    };
    w.write_record(["sample_index", "class_id"]).map_err(wrap)?;
    for (i, &c) in labels.iter().enumerate() {
        w.write_record([i.to_string(), c.to_string()])
            .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path_str(path), e))?;
    Ok(())
}

pub fn load_labels_csv(path: &Path) -> Result<Vec<ClassId>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Csv {
        path: path_str(path),
        source: e,
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv {
            path: path_str(path),
            source: e,
        })?
        .clone();
    if headers.len() != 2 || &headers[0] != "sample_index" || &headers[1] != "class_id" {
        return Err(Error::MalformedRecord {
            path: path_str(path),
            what: "label header".into(),
            line: 1,
            detail: format!(
                "expected `sample_index,class_id`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut rows: Vec<(usize, ClassId)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Csv {
            path: path_str(path),
            source: e,
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let bad = |detail: String| Error::MalformedRecord {
            path: path_str(path),
            what: "label row".into(),
            line,
            detail,
        };
        if record.len() != 2 {
            return Err(bad(format!("expected 2 fields, found {}", record.len())));
        }
        let idx: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad sample_index `{}`", &record[0])))?;
        let class: ClassId = record[1]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad class_id `{}`", &record[1])))?;
        rows.push((idx, class));
    }
    let n = rows.len();
    let mut labels = vec![None; n];
    for (idx, class) in rows {
        if idx >= n {
            return Err(Error::InvalidDataset(format!(
                "label file {} has sample_index {idx} but only {n} rows",
                path_str(path)
            )));
        }
        if labels[idx].replace(class).is_some() {
            return Err(Error::InvalidDataset(format!(
                "label file {} repeats sample_index {idx}",
                path_str(path)
            )));
        }
    }
    // Every slot is filled: n rows, indices < n, no duplicates.
    Ok(labels.into_iter().map(|l| l.unwrap()).collect())
}

pub fn write_attributes_csv(path: &Path, ids: &[ClassId], rows: &Matrix) -> Result<()> {
    assert_eq!(ids.len(), rows.rows(), "one id per attribute row");
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        path: path_str(path),
        source: e,
    })?;
    let wrap = |e| Error::Csv {
        path: path_str(path),
        source: e,
    };
    let mut header = vec!["class_id".to_string()];
    header.extend((0..rows.cols()).map(|j| format!("a_{j}")));
    w.write_record(&header).map_err(wrap)?;
    for (i, &id) in ids.iter().enumerate() {
        let mut record = vec![id.to_string()];
        record.extend(rows.row(i).iter().map(|v| format!("{v}")));
        w.write_record(&record).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path_str(path), e))?;
    Ok(())
}

pub fn load_attributes_csv(path: &Path) -> Result<(Vec<ClassId>, Matrix)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Csv {
        path: path_str(path),
        source: e,
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv {
            path: path_str(path),
            source: e,
        })?
        .clone();
    if headers.is_empty() || &headers[0] != "class_id" || headers.len() < 2 {
        return Err(Error::MalformedRecord {
            path: path_str(path),
            what: "attribute header".into(),
            line: 1,
            detail: "expected `class_id,a_0,...` with at least one attribute column".into(),
        });
    }
    let dim = headers.len() - 1;
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Csv {
            path: path_str(path),
            source: e,
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let bad = |detail: String| Error::MalformedRecord {
            path: path_str(path),
            what: "attribute row".into(),
            line,
            detail,
        };
        if record.len() != dim + 1 {
            return Err(bad(format!(
                "expected {} fields, found {}",
                dim + 1,
                record.len()
            )));
        }
        let id: ClassId = record[0]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad class_id `{}`", &record[0])))?;
        ids.push(id);
        for j in 1..=dim {
            let v: f64 = record[j]
                .trim()
                .parse()
                .map_err(|_| bad(format!("bad attribute value `{}`", &record[j])))?;
            if !v.is_finite() {
                return Err(bad(format!("non-finite attribute value `{}`", &record[j])));
            }
            values.push(v);
        }
    }
    if ids.is_empty() {
        return Err(Error::InvalidDataset(format!(
            "attribute file {} has no rows",
            path_str(path)
        )));
    }
    Ok((ids.clone(), Matrix::from_vec(ids.len(), dim, values)))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub seen: Vec<ClassId>,
    pub unseen: Vec<ClassId>,
    pub train_idx: Vec<usize>,
    pub test_seen_idx: Vec<usize>,
    pub test_unseen_idx: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<ClassId>,
    pub attrs: AttributeTable,
    pub split: SplitSpec,
}

impl Dataset {
    pub fn num_samples(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels_at(&self, idx: &[usize]) -> Vec<ClassId> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_samples();
        if self.labels.len() != n {
            return Err(Error::InvalidDataset(format!(
                "{n} feature rows but {} labels",
                self.labels.len()
            )));
        }
        if let Some((r, c)) = self.features.first_non_finite() {
            return Err(Error::NonFinite {
                context: "dataset features".into(),
                row: r,
                col: c,
            });
        }
        for (i, &y) in self.labels.iter().enumerate() {
            if !self.attrs.contains(y) {
                return Err(Error::InvalidDataset(format!(
                    "sample {i} has class {y} with no attribute row"
                )));
            }
        }
        let split = &self.split;
        if split.seen.is_empty() || split.unseen.is_empty() {
            return Err(Error::InvalidDataset(
                "both seen and unseen class lists must be non-empty".into(),
            ));
        }
        let seen: HashSet<ClassId> = split.seen.iter().copied().collect();
        let unseen: HashSet<ClassId> = split.unseen.iter().copied().collect();
        if seen.len() != split.seen.len() || unseen.len() != split.unseen.len() {
            return Err(Error::InvalidDataset(
                "duplicate class id inside a split class list".into(),
            ));
        }
        if let Some(c) = seen.intersection(&unseen).next() {
            return Err(Error::InvalidDataset(format!(
                "class {c} is listed as both seen and unseen"
            )));
        }
        for &c in seen.iter().chain(&unseen) {
            if !self.attrs.contains(c) {
                return Err(Error::InvalidDataset(format!(
                    "split class {c} has no attribute row"
                )));
            }
        }

        let mut used = vec![false; n];
        let mut check_idx = |name: &str, idx: &[usize]| -> Result<()> {
            if idx.is_empty() {
                return Err(Error::InvalidDataset(format!("{name} is empty")));
            }
            for &i in idx {
                if i >= n {
                    return Err(Error::InvalidDataset(format!(
                        "{name} contains index {i} but the dataset has {n} samples"
                    )));
                }
                if used[i] {
                    return Err(Error::InvalidDataset(format!(
                        "sample {i} appears in more than one split set"
                    )));
                }
                used[i] = true;
            }
            Ok(())
        };
        check_idx("train_idx", &split.train_idx)?;
        check_idx("test_seen_idx", &split.test_seen_idx)?;
        check_idx("test_unseen_idx", &split.test_unseen_idx)?;

        for (name, idx, allowed) in [
            ("train_idx", &split.train_idx, &seen),
            ("test_seen_idx", &split.test_seen_idx, &seen),
            ("test_unseen_idx", &split.test_unseen_idx, &unseen),
        ] {
            for &i in idx.iter() {
                if !allowed.contains(&self.labels[i]) {
                    return Err(Error::InvalidDataset(format!(
                        "{name} contains sample {i} of class {}, which is outside its allowed class set",
                        self.labels[i]
                    )));
                }
            }
        }

        // Training and evaluation are per-class; a class with no samples in
        // its designated set would fail later in a less obvious way.
        let classes_of =
            |idx: &[usize]| -> HashSet<ClassId> { idx.iter().map(|&i| self.labels[i]).collect() };
        let train_classes = classes_of(&split.train_idx);
        let test_seen_classes = classes_of(&split.test_seen_idx);
        let test_unseen_classes = classes_of(&split.test_unseen_idx);
        for &c in &split.seen {
            if !train_classes.contains(&c) {
                return Err(Error::InvalidDataset(format!(
                    "seen class {c} has no training samples"
                )));
            }
            if !test_seen_classes.contains(&c) {
                return Err(Error::InvalidDataset(format!(
                    "seen class {c} has no test samples"
                )));
            }
        }
        for &c in &split.unseen {
            if !test_unseen_classes.contains(&c) {
                return Err(Error::InvalidDataset(format!(
                    "unseen class {c} has no test samples"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    pub normalize_attributes: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            normalize_attributes: true,
        }
    }
}

pub fn load_dataset(dir: &Path, options: LoadOptions) -> Result<Dataset> {
    for name in ["features.bin", "labels.csv", "attributes.csv", "split.json"] {
        let p = dir.join(name);
        if !p.exists() {
            return Err(Error::MissingArtifact {
                path: path_str(&p),
                hint: "not a dataset directory (expected features.bin, labels.csv, attributes.csv, split.json)".into(),
            });
        }
    }
    let features = load_feature_matrix(&dir.join("features.bin"))?;
    let labels = load_labels_csv(&dir.join("labels.csv"))?;
    let (ids, rows) = load_attributes_csv(&dir.join("attributes.csv"))?;
    let mut attrs = AttributeTable::new(ids, rows)?;
    if options.normalize_attributes {
        attrs.l2_normalize()?;
    }
    let split_path = dir.join("split.json");
    let split_bytes = fs::read(&split_path).map_err(|e| Error::io(path_str(&split_path), e))?;
    let split: SplitSpec = serde_json::from_slice(&split_bytes).map_err(|e| Error::Json {
        path: path_str(&split_path),
        source: e,
    })?;
    let dataset = Dataset {
        features,
        labels,
        attrs,
        split,
    };
    dataset.validate()?;
    Ok(dataset)
}

pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(path_str(dir), e))?;
    write_feature_matrix(&dir.join("features.bin"), &dataset.features)?;
    write_labels_csv(&dir.join("labels.csv"), &dataset.labels)?;
    write_attributes_csv(
        &dir.join("attributes.csv"),
        dataset.attrs.ids(),
        &dataset.attrs.rows_for(dataset.attrs.ids())?,
    )?;
    let split_path = dir.join("split.json");
    let json = serde_json::to_string_pretty(&dataset.split).expect("split serializes");
    fs::write(&split_path, json).map_err(|e| Error::io(path_str(&split_path), e))?;
    Ok(())
}

/// Generative recipe for the synthetic benchmark. `mixing_seed` fixes the
/// class attributes and the mixing maps; the run seed passed to
/// `make_synthetic_benchmark` drives per-sample noise and the split, so one
/// benchmark "world" can be sampled repeatedly.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticBenchSpec {
    pub seen_classes: usize,
    pub unseen_classes: usize,
    pub samples_per_class: usize,
    pub attribute_dim: usize,
    pub feature_dim: usize,
    pub semantic_latent_dim: usize,
    pub nuisance_latent_dim: usize,
    pub noise_scale: f64,
    pub mixing_seed: u64,
}

impl Default for SyntheticBenchSpec {
    fn default() -> Self {
        SyntheticBenchSpec {
            seen_classes: 20,
            unseen_classes: 5,
            samples_per_class: 50,
            attribute_dim: 16,
            feature_dim: 128,
            semantic_latent_dim: 32,
            nuisance_latent_dim: 32,
            noise_scale: 0.1,
            mixing_seed: 9207,
        }
    }
}

impl SyntheticBenchSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("seen_classes", self.seen_classes),
            ("unseen_classes", self.unseen_classes),
            ("samples_per_class", self.samples_per_class),
            ("attribute_dim", self.attribute_dim),
            ("feature_dim", self.feature_dim),
            ("semantic_latent_dim", self.semantic_latent_dim),
            ("nuisance_latent_dim", self.nuisance_latent_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!(
                    "synthetic benchmark field {name} must be positive"
                )));
            }
        }
        if self.samples_per_class < 5 {
            return Err(Error::InvalidConfig(
                "samples_per_class must be at least 5 so every seen class gets both train and test samples".into(),
            ));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InvalidConfig(
                "noise_scale must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Per-sample latents the generator used; kept around so tests can check
/// what information each part of a learned code still carries.
#[derive(Clone, Debug)]
pub struct SyntheticGroundTruth {
    pub semantic: Matrix,
    pub nuisance: Matrix,
}

/// Builds a dataset where features mix a class-determined semantic latent
/// with per-sample nuisance of comparable magnitude:
///   x = relu(P (S a_c) + Q u + noise_scale * eps).
/// Seen classes split 80/20 into train / test_seen; unseen classes go
/// entirely to test_unseen.
pub fn make_synthetic_benchmark(
    spec: &SyntheticBenchSpec,
    seed: u64,
) -> Result<(Dataset, SyntheticGroundTruth)> {
    spec.validate()?;
    let mut map_rng = Rng::new(spec.mixing_seed);
    let mut sample_rng = Rng::new(seed);

    let num_classes = spec.seen_classes + spec.unseen_classes;
    let ids: Vec<ClassId> = (0..num_classes as ClassId).collect();

    // Unit-norm attributes; S maps them to a semantic latent whose
    // components then have unit variance across the attribute sphere.
    let mut attr_rows = map_rng.normal_matrix(num_classes, spec.attribute_dim);
    for i in 0..num_classes {
        let norm = attr_rows.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in attr_rows.row_mut(i) {
            *v /= norm;
        }
    }
    let s_map = map_rng.normal_matrix(spec.attribute_dim, spec.semantic_latent_dim);
    let sem_scale = 1.0 / (spec.semantic_latent_dim as f64).sqrt();
    let nui_scale = 1.0 / (spec.nuisance_latent_dim as f64).sqrt();
    let mut p_map = map_rng.normal_matrix(spec.semantic_latent_dim, spec.feature_dim);
    p_map.scale(sem_scale);
    let mut q_map = map_rng.normal_matrix(spec.nuisance_latent_dim, spec.feature_dim);
    q_map.scale(nui_scale);

    let class_semantics = attr_rows.matmul(&s_map); // num_classes x sem_dim

    let n = num_classes * spec.samples_per_class;
    let mut labels = Vec::with_capacity(n);
    let mut semantic = Matrix::zeros(n, spec.semantic_latent_dim);
    let nuisance = sample_rng.normal_matrix(n, spec.nuisance_latent_dim);
    for c in 0..num_classes {
        for k in 0..spec.samples_per_class {
            let row = c * spec.samples_per_class + k;
            labels.push(c as ClassId);
            semantic
                .row_mut(row)
                .copy_from_slice(class_semantics.row(c));
        }
    }
    let mut features = semantic.matmul(&p_map);
    let nuisance_part = nuisance.matmul(&q_map);
    features.add_scaled(1.0, &nuisance_part);
    for v in features.data_mut() {
        *v += spec.noise_scale * sample_rng.normal();
        if *v < 0.0 {
            *v = 0.0;
        }
    }

    let mut train_idx = Vec::new();
    let mut test_seen_idx = Vec::new();
    let mut test_unseen_idx = Vec::new();
    for c in 0..num_classes {
        let start = c * spec.samples_per_class;
        let mut rows: Vec<usize> = (start..start + spec.samples_per_class).collect();
        sample_rng.shuffle(&mut rows);
        if c < spec.seen_classes {
            let cut = (spec.samples_per_class * 4)
                .div_ceil(5)
                .min(spec.samples_per_class - 1);
            train_idx.extend_from_slice(&rows[..cut]);
            test_seen_idx.extend_from_slice(&rows[cut..]);
        } else {
            test_unseen_idx.extend_from_slice(&rows);
        }
    }
    train_idx.sort_unstable();
    test_seen_idx.sort_unstable();
    test_unseen_idx.sort_unstable();

    let split = SplitSpec {
        seen: ids[..spec.seen_classes].to_vec(),
        unseen: ids[spec.seen_classes..].to_vec(),
        train_idx,
        test_seen_idx,
        test_unseen_idx,
    };
    let dataset = Dataset {
        features,
        labels,
        attrs: AttributeTable::new(ids, attr_rows)?,
        split,
    };
    dataset.validate()?;
    Ok((dataset, SyntheticGroundTruth { semantic, nuisance }))
}
