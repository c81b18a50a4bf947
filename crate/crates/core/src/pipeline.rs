//! File-based stage orchestration. Every stage reads its inputs from the run
//! directory and leaves its artifact behind, so any stage can be re-run on
//! its own and a finished directory fully describes the run. `run_pipeline`
//! is just the stages in order; it passes nothing in memory.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    load_classifier, load_decomposer, load_gan, save_classifier, save_decomposer, save_gan,
};
use crate::classifier::{train_classifier, SoftmaxClassifier};
use crate::config::{DatasetSource, ExperimentConfig};
use crate::data::{
    load_dataset, load_feature_matrix, load_labels_csv, make_synthetic_benchmark, save_dataset,
    write_feature_matrix, write_labels_csv, Dataset, LoadOptions,
};
use crate::decomposer::{train_decomposer, DecomposerModel};
use crate::error::{Error, Result};
use crate::eval::{
    export_embeddings, gzsl_evaluate, linear_probe, write_predictions_csv, GzslReport,
};
use crate::fgen::{synthesize_unseen, train_wgan, CriticModel, GeneratorModel};
use crate::mi::{gaussian_mi_sandwich, ClassId, SandwichPoint};
use crate::numerics::matrix::Matrix;

pub const DEFAULT_MI_RHOS: [f64; 3] = [0.3, 0.5, 0.8];

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

/// Fixed artifact layout inside one run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> RunPaths {
        RunPaths { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.root.join("resolved-config.json")
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn decomposer(&self) -> PathBuf {
        self.root.join("decomposer.ckpt")
    }

    pub fn decomposer_history(&self) -> PathBuf {
        self.root.join("decomposer-history.csv")
    }

    pub fn gan(&self) -> PathBuf {
        self.root.join("gan.ckpt")
    }

    pub fn gan_history(&self) -> PathBuf {
        self.root.join("gan-history.csv")
    }

    pub fn synthetic_features(&self) -> PathBuf {
        self.root.join("synthetic-features.bin")
    }

    pub fn synthetic_labels(&self) -> PathBuf {
        self.root.join("synthetic-labels.csv")
    }

    pub fn classifier(&self) -> PathBuf {
        self.root.join("classifier.ckpt")
    }

    pub fn classifier_history(&self) -> PathBuf {
        self.root.join("classifier-history.csv")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions.csv")
    }
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path_str(path),
            hint: hint.into(),
        })
    }
}

pub fn write_resolved_config(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<()> {
    fs::create_dir_all(paths.root()).map_err(|e| Error::io(path_str(paths.root()), e))?;
    let p = paths.resolved_config();
    fs::write(&p, cfg.resolved().to_pretty_json()).map_err(|e| Error::io(path_str(&p), e))
}

fn dataset_location(cfg: &ExperimentConfig, paths: &RunPaths) -> PathBuf {
    match cfg.dataset.source {
        DatasetSource::Synthetic => paths.dataset_dir(),
        DatasetSource::Directory => cfg
            .dataset
            .dir
            .clone()
            .expect("validate() requires dataset.dir for the directory source"),
    }
}

/// Loads the dataset a later stage should train on: the materialized copy
/// for synthetic runs, the user directory otherwise.
pub fn load_run_dataset(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<Dataset> {
    let dir = dataset_location(cfg, paths);
    if cfg.dataset.source == DatasetSource::Synthetic {
        require(&dir, "run the gen-synthetic stage (or pipeline) first")?;
    }
    load_dataset(
        &dir,
        LoadOptions {
            normalize_attributes: cfg.dataset.normalize_attributes,
        },
    )
}

/// Materializes the synthetic benchmark into the run directory; for a
/// directory source it only checks that the data loads.
pub fn stage_gen_dataset(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<Dataset> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    match cfg.dataset.source {
        DatasetSource::Synthetic => {
            let seed = cfg.dataset.seed.expect("resolved");
            let (dataset, _truth) = make_synthetic_benchmark(&cfg.dataset.synthetic, seed)?;
            save_dataset(&paths.dataset_dir(), &dataset)?;
            // Reload so this stage hands out exactly what later stages see
            // (feature storage is f32).
            load_run_dataset(&cfg, paths)
        }
        DatasetSource::Directory => load_run_dataset(&cfg, paths),
    }
}

pub fn stage_decomposer(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<DecomposerModel> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let dataset = load_run_dataset(&cfg, paths)?;
    let (model, history) = train_decomposer(&dataset, &cfg.decomposer)?;
    save_decomposer(&paths.decomposer(), &model)?;
    write_history(&paths.decomposer_history(), &history)?;
    Ok(model)
}

pub fn stage_gan(
    cfg: &ExperimentConfig,
    paths: &RunPaths,
) -> Result<(GeneratorModel, CriticModel)> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let dataset = load_run_dataset(&cfg, paths)?;
    require(&paths.decomposer(), "run the train-decomposer stage first")?;
    let decomposer = load_decomposer(&paths.decomposer())?;
    let (gen, critic, history) = train_wgan(&dataset, &decomposer, &cfg.gan)?;
    save_gan(&paths.gan(), &gen, &critic)?;
    write_history(&paths.gan_history(), &history)?;
    Ok((gen, critic))
}

pub fn stage_synthesize(
    cfg: &ExperimentConfig,
    paths: &RunPaths,
) -> Result<(Matrix, Vec<ClassId>)> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let dataset = load_run_dataset(&cfg, paths)?;
    require(&paths.decomposer(), "run the train-decomposer stage first")?;
    require(&paths.gan(), "run the train-generator stage first")?;
    let decomposer = load_decomposer(&paths.decomposer())?;
    let (gen, _critic) = load_gan(&paths.gan())?;
    let (z, labels) = synthesize_unseen(
        &gen,
        &decomposer.semantic_encoder,
        &dataset.attrs,
        &dataset.split.unseen,
        cfg.synthesis.per_class,
        cfg.synthesis.seed.expect("resolved"),
    )?;
    write_feature_matrix(&paths.synthetic_features(), &z)?;
    write_labels_csv(&paths.synthetic_labels(), &labels)?;
    Ok((z, labels))
}

pub fn stage_classifier(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<SoftmaxClassifier> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let dataset = load_run_dataset(&cfg, paths)?;
    require(&paths.decomposer(), "run the train-decomposer stage first")?;
    require(
        &paths.synthetic_features(),
        "run the synthesize stage first",
    )?;
    let decomposer = load_decomposer(&paths.decomposer())?;
    let synthetic_z = load_feature_matrix(&paths.synthetic_features())?;
    let synthetic_labels = load_labels_csv(&paths.synthetic_labels())?;

    let train_x = dataset.features.gather_rows(&dataset.split.train_idx);
    let (real_z, _) = decomposer.decompose(&train_x)?;
    let real_labels = dataset.labels_at(&dataset.split.train_idx);

    let (clf, history) = train_classifier(
        (&real_z, &real_labels),
        (&synthetic_z, &synthetic_labels),
        &cfg.classifier,
    )?;
    save_classifier(&paths.classifier(), &clf)?;
    let rows: Vec<ClassifierEpoch> = history
        .iter()
        .enumerate()
        .map(|(i, &loss)| ClassifierEpoch { epoch: i, loss })
        .collect();
    write_history(&paths.classifier_history(), &rows)?;
    Ok(clf)
}

pub fn stage_evaluate(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<GzslReport> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let dataset = load_run_dataset(&cfg, paths)?;
    require(&paths.decomposer(), "run the train-decomposer stage first")?;
    require(&paths.classifier(), "run the train-classifier stage first")?;
    let decomposer = load_decomposer(&paths.decomposer())?;
    let clf = load_classifier(&paths.classifier())?;
    let evaluation = gzsl_evaluate(&clf, &decomposer.semantic_encoder, &dataset)?;
    write_report(&paths.report(), &evaluation.report)?;
    if cfg.eval.write_predictions {
        write_predictions_csv(&paths.predictions(), &evaluation.rows)?;
    }
    if cfg.eval.export_embeddings {
        export_embeddings(&decomposer, &dataset, paths.root())?;
    }
    Ok(evaluation.report)
}

/// All stages in order against one run directory.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<GzslReport> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let paths = RunPaths::new(out);
    write_resolved_config(&cfg, &paths)?;
    stage_gen_dataset(&cfg, &paths)?;
    stage_decomposer(&cfg, &paths)?;
    stage_gan(&cfg, &paths)?;
    stage_synthesize(&cfg, &paths)?;
    stage_classifier(&cfg, &paths)?;
    stage_evaluate(&cfg, &paths)
}

#[derive(Clone, Copy, Debug, Serialize)]
struct ClassifierEpoch {
    epoch: usize,
    loss: f64,
}

fn write_history<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path_str(path), e))?;
    for row in rows {
        w.serialize(row)
            .map_err(|e| Error::csv(path_str(path), e))?;
    }
    w.flush().map_err(|e| Error::io(path_str(path), e))?;
    Ok(())
}

fn write_report(path: &Path, report: &GzslReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path_str(path), e))
}

pub fn read_report(path: &Path) -> Result<GzslReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path_str(path), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path_str(path),
        source: e,
    })
}

/// Correlated-Gaussian sweep of both MI estimators; one CSV row per rho.
pub fn run_mi_bench(rhos: &[f64], seed: u64, out_csv: &Path) -> Result<Vec<SandwichPoint>> {
    if rhos.is_empty() {
        return Err(Error::InvalidConfig(
            "mi-bench needs at least one rho".into(),
        ));
    }
    let mut points = Vec::with_capacity(rhos.len());
    for &rho in rhos {
        points.push(gaussian_mi_sandwich(rho, seed)?);
    }
    if let Some(parent) = out_csv.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(path_str(parent), e))?;
        }
    }
    let mut w = csv::Writer::from_path(out_csv).map_err(|e| Error::csv(path_str(out_csv), e))?;
    let wrap = |e| Error::csv(path_str(out_csv), e);
    w.write_record(["rho", "true_mi", "infonce", "club"])
        .map_err(wrap)?;
    for p in &points {
        w.write_record([
            p.rho.to_string(),
            p.true_mi.to_string(),
            p.infonce.to_string(),
            p.club.to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path_str(out_csv), e))?;
    Ok(points)
}

/// Loss-term ablation grid. `Recon` keeps only reconstruction, `ReconMi`
/// adds both MI terms, `Full` is the complete objective, and `NoResidual`
/// drops the residual encoder from the full objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Recon,
    ReconMi,
    Full,
    NoResidual,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Recon,
        AblationVariant::ReconMi,
        AblationVariant::Full,
        AblationVariant::NoResidual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Recon => "recon",
            AblationVariant::ReconMi => "recon_mi",
            AblationVariant::Full => "full",
            AblationVariant::NoResidual => "no_residual",
        }
    }

    pub fn apply(self, cfg: &mut ExperimentConfig) {
        match self {
            AblationVariant::Recon => {
                cfg.decomposer.lambda_s = 0.0;
                cfg.decomposer.lambda_r = 0.0;
                cfg.decomposer.lambda_sim = 0.0;
                cfg.gan.lambda_mi = 0.0;
                cfg.gan.lambda_sim = 0.0;
            }
            AblationVariant::ReconMi => {
                cfg.decomposer.lambda_sim = 0.0;
                cfg.gan.lambda_sim = 0.0;
            }
            AblationVariant::Full => {}
            AblationVariant::NoResidual => {
                cfg.decomposer.use_residual = false;
                cfg.decomposer.lambda_r = 0.0;
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: AblationVariant,
    pub seed: u64,
    pub report: GzslReport,
    /// Ridge-probe fit of class attributes from the semantic code.
    pub probe_semantic: f64,
    /// Same probe from the residual code, when that branch exists.
    pub probe_residual: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AblationTable {
    pub cells: Vec<AblationCell>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantSummary {
    pub variant: AblationVariant,
    pub runs: usize,
    pub acc_s: f64,
    pub acc_u: f64,
    pub acc_h: f64,
    pub probe_semantic: f64,
    pub probe_residual: Option<f64>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    assert!(!xs.is_empty(), "median of empty slice");
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

impl AblationTable {
    /// Per-variant medians across seeds; `None` when the variant never ran.
    pub fn summary(&self, variant: AblationVariant) -> Option<VariantSummary> {
        let cells: Vec<&AblationCell> =
            self.cells.iter().filter(|c| c.variant == variant).collect();
        if cells.is_empty() {
            return None;
        }
        let residuals: Vec<f64> = cells.iter().filter_map(|c| c.probe_residual).collect();
        Some(VariantSummary {
            variant,
            runs: cells.len(),
            acc_s: median(cells.iter().map(|c| c.report.acc_s).collect()),
            acc_u: median(cells.iter().map(|c| c.report.acc_u).collect()),
            acc_h: median(cells.iter().map(|c| c.report.acc_h).collect()),
            probe_semantic: median(cells.iter().map(|c| c.probe_semantic).collect()),
            probe_residual: if residuals.is_empty() {
                None
            } else {
                Some(median(residuals))
            },
        })
    }

    /// Comparison table over whatever variants are present, medians across
    /// seeds.
    pub fn render(&self) -> String {
        let mut out =
            String::from("variant        runs   acc_s   acc_u   acc_h   probe_zs   probe_zr\n");
        for variant in AblationVariant::ALL {
            let Some(s) = self.summary(variant) else {
                continue;
            };
            let zr = match s.probe_residual {
                Some(v) => format!("{v:8.3}"),
                None => format!("{:>8}", "-"),
            };
            out.push_str(&format!(
                "{:<14} {:>4} {:>7.3} {:>7.3} {:>7.3} {:>10.3} {}\n",
                s.variant.name(),
                s.runs,
                s.acc_s,
                s.acc_u,
                s.acc_h,
                s.probe_semantic,
                zr,
            ));
        }
        out
    }
}

fn thread_cap() -> usize {
    std::env::var("SEGZSL_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

fn run_ablation_cell(
    base: &ExperimentConfig,
    variant: AblationVariant,
    seed: u64,
    out: &Path,
) -> Result<AblationCell> {
    let mut cfg = base.reseeded(seed);
    variant.apply(&mut cfg);
    let dir = out.join(variant.name()).join(format!("seed-{seed}"));
    let report = run_pipeline(&cfg, &dir)?;

    let cfg = cfg.resolved();
    let paths = RunPaths::new(&dir);
    let dataset = load_run_dataset(&cfg, &paths)?;
    let decomposer = load_decomposer(&paths.decomposer())?;
    let (z_s, z_r) = decomposer.decompose(&dataset.features)?;
    let targets = dataset.attrs.rows_for(&dataset.labels)?;
    let probe_semantic = linear_probe(&z_s, &targets)?;
    let probe_residual = match z_r {
        Some(z) => Some(linear_probe(&z, &targets)?),
        None => None,
    };
    Ok(AblationCell {
        variant,
        seed,
        report,
        probe_semantic,
        probe_residual,
    })
}

/// Runs every loss variant at every seed, each in its own subdirectory of
/// `out`, and writes the collected grid to `out/ablation.json`. Cells run in
/// parallel up to `SEGZSL_THREADS` (default: available cores); results keep
/// the deterministic (variant, seed) order regardless of scheduling.
pub fn run_ablation(base: &ExperimentConfig, seeds: &[u64], out: &Path) -> Result<AblationTable> {
    base.validate()?;
    if seeds.is_empty() {
        return Err(Error::InvalidConfig(
            "ablation needs at least one seed".into(),
        ));
    }
    let jobs: Vec<(AblationVariant, u64)> = AblationVariant::ALL
        .into_iter()
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();

    let workers = thread_cap().min(jobs.len());
    let slots: Vec<Mutex<Option<Result<AblationCell>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(variant, seed)) = jobs.get(i) else {
                    break;
                };
                let cell = run_ablation_cell(base, variant, seed, out);
                *slots[i].lock().unwrap() = Some(cell);
            });
        }
    });

    let mut cells = Vec::with_capacity(jobs.len());
    for slot in slots {
        cells.push(slot.into_inner().unwrap().expect("worker filled slot")?);
    }
    let table = AblationTable { cells };
    let json_path = out.join("ablation.json");
    let mut text = serde_json::to_string_pretty(&table).expect("table serializes");
    text.push('\n');
    fs::write(&json_path, text).map_err(|e| Error::io(path_str(&json_path), e))?;
    Ok(table)
}
