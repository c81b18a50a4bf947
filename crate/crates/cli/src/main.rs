use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use segzsl_core::config::{load_config, ExperimentConfig, Preset};
use segzsl_core::pipeline::{
    run_ablation, run_mi_bench, run_pipeline, stage_classifier, stage_decomposer, stage_evaluate,
    stage_gan, stage_gen_dataset, stage_synthesize, write_resolved_config, RunPaths,
    DEFAULT_MI_RHOS,
};
use segzsl_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "segzsl",
    version,
    about = "Semantic feature decomposition and synthesis for generalized zero-shot classification"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PresetArg {
    /// Small networks and few epochs; a full run takes seconds.
    Desk,
    /// Published 4096-unit networks and learning rates.
    Paper,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Preset {
        match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::Paper => Preset::Paper,
        }
    }
}

#[derive(Args)]
struct StageArgs {
    /// JSON config file; its fields override the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for artifacts (falls back to out_dir in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Base hyperparameter bundle the config file is layered onto.
    #[arg(long, value_enum, default_value_t = PresetArg::Desk)]
    preset: PresetArg,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample the synthetic benchmark into the run directory.
    GenSynthetic(StageArgs),
    /// Train the semantic/residual decomposer.
    TrainDecomposer(StageArgs),
    /// Train the conditional feature generator against the frozen decomposer.
    TrainGenerator(StageArgs),
    /// Draw synthetic semantic features for the unseen classes.
    Synthesize(StageArgs),
    /// Train the softmax classifier on real seen + synthetic unseen codes.
    TrainClassifier(StageArgs),
    /// Score the stored classifier under the generalized zero-shot protocol.
    Evaluate(StageArgs),
    /// All stages in order.
    Pipeline(StageArgs),
    /// Sweep both mutual-information estimators on correlated Gaussians.
    MiBench {
        #[command(flatten)]
        args: StageArgs,
        /// Correlation coefficients to test.
        #[arg(long, value_delimiter = ',')]
        rho: Vec<f64>,
    },
    /// Write per-sample semantic and residual codes as CSV.
    ExportEmbeddings(StageArgs),
    /// Run the loss-term and residual-encoder ablation grid.
    Ablate {
        #[command(flatten)]
        args: StageArgs,
        /// Master seeds, one full grid per seed.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.to_string(), "kind": e.kind() })
            );
            if e.is_usage() {
                ExitCode::from(3)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

/// Config plus the run directory every subcommand works in.
fn setup(args: &StageArgs) -> Result<(ExperimentConfig, RunPaths)> {
    let mut cfg = load_config(args.config.as_deref(), args.preset.into())?;
    if let Some(seed) = args.seed {
        cfg = cfg.reseeded(seed);
    }
    cfg.validate()?;
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| {
            Error::InvalidConfig("no run directory: pass --out or set out_dir".into())
        })?;
    let paths = RunPaths::new(out);
    write_resolved_config(&cfg, &paths)?;
    Ok((cfg, paths))
}

fn timed<T>(label: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let value = f()?;
    eprintln!("{label}: done in {:.2}s", start.elapsed().as_secs_f64());
    Ok(value)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenSynthetic(a) => {
            let (cfg, paths) = setup(&a)?;
            let dataset = timed("gen-synthetic", || stage_gen_dataset(&cfg, &paths))?;
            println!(
                "dataset: {} samples, {} seen + {} unseen classes -> {}",
                dataset.num_samples(),
                dataset.split.seen.len(),
                dataset.split.unseen.len(),
                paths.dataset_dir().display()
            );
            Ok(())
        }
        Cmd::TrainDecomposer(a) => {
            let (cfg, paths) = setup(&a)?;
            timed("train-decomposer", || stage_decomposer(&cfg, &paths))?;
            println!("decomposer -> {}", paths.decomposer().display());
            Ok(())
        }
        Cmd::TrainGenerator(a) => {
            let (cfg, paths) = setup(&a)?;
            timed("train-generator", || stage_gan(&cfg, &paths))?;
            println!("generator + critic -> {}", paths.gan().display());
            Ok(())
        }
        Cmd::Synthesize(a) => {
            let (cfg, paths) = setup(&a)?;
            let (z, labels) = timed("synthesize", || stage_synthesize(&cfg, &paths))?;
            println!(
                "synthetic codes: {} rows x {} dims for {} classes -> {}",
                z.rows(),
                z.cols(),
                labels
                    .iter()
                    .collect::<std::collections::BTreeSet<_>>()
                    .len(),
                paths.synthetic_features().display()
            );
            Ok(())
        }
        Cmd::TrainClassifier(a) => {
            let (cfg, paths) = setup(&a)?;
            let clf = timed("train-classifier", || stage_classifier(&cfg, &paths))?;
            println!(
                "classifier over {} classes -> {}",
                clf.classes().len(),
                paths.classifier().display()
            );
            Ok(())
        }
        Cmd::Evaluate(a) => {
            let (cfg, paths) = setup(&a)?;
            let report = timed("evaluate", || stage_evaluate(&cfg, &paths))?;
            print_report(&report);
            Ok(())
        }
        Cmd::Pipeline(a) => {
            let (cfg, paths) = setup(&a)?;
            let report = timed("pipeline", || run_pipeline(&cfg, paths.root()))?;
            print_report(&report);
            Ok(())
        }
        Cmd::MiBench { args, rho } => {
            let (cfg, paths) = setup(&args)?;
            let rhos = if rho.is_empty() {
                DEFAULT_MI_RHOS.to_vec()
            } else {
                rho
            };
            let csv = paths.root().join("mi-bench.csv");
            let points = timed("mi-bench", || run_mi_bench(&rhos, cfg.seed, &csv))?;
            for p in &points {
                println!(
                    "rho {:.2}: true {:.4}, infonce {:.4}, club {:.4}",
                    p.rho, p.true_mi, p.infonce, p.club
                );
            }
            println!("-> {}", csv.display());
            Ok(())
        }
        Cmd::ExportEmbeddings(a) => {
            let (cfg, paths) = setup(&a)?;
            let dataset = segzsl_core::pipeline::load_run_dataset(&cfg, &paths)?;
            let ckpt = paths.decomposer();
            if !ckpt.exists() {
                return Err(Error::MissingArtifact {
                    path: ckpt.display().to_string(),
                    hint: "run the train-decomposer stage first".into(),
                });
            }
            let decomposer = segzsl_core::checkpoint::load_decomposer(&ckpt)?;
            let written =
                segzsl_core::eval::export_embeddings(&decomposer, &dataset, paths.root())?;
            for p in written {
                println!("-> {}", p.display());
            }
            Ok(())
        }
        Cmd::Ablate { args, seeds } => {
            let (cfg, paths) = setup(&args)?;
            let table = timed("ablate", || run_ablation(&cfg, &seeds, paths.root()))?;
            print!("{}", table.render());
            println!("-> {}", paths.root().join("ablation.json").display());
            Ok(())
        }
    }
}

fn print_report(report: &segzsl_core::eval::GzslReport) {
    println!(
        "acc_s {:.4}  acc_u {:.4}  acc_h {:.4}  ({} seen + {} unseen test samples)",
        report.acc_s,
        report.acc_u,
        report.acc_h,
        report.counts.test_seen,
        report.counts.test_unseen
    );
}
