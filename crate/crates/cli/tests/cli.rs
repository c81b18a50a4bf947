use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY_CONFIG: &str = r#"{
  "dataset": {"synthetic": {"seen_classes": 5, "unseen_classes": 2, "samples_per_class": 10,
               "attribute_dim": 6, "feature_dim": 24, "semantic_latent_dim": 8,
               "nuisance_latent_dim": 8, "noise_scale": 0.1, "mixing_seed": 31}},
  "decomposer": {"semantic_dim": 8, "residual_dim": 8, "hidden_dim": 16, "venc_hidden_dim": 12,
                 "epochs": 3, "batch_classes": 5, "batch_per_class": 4},
  "gan": {"hidden_dim": 16, "critic_hidden_dim": 12, "epochs": 8, "batch_size": 10},
  "synthesis": {"per_class": 20},
  "classifier": {"epochs": 5, "batch_size": 16}
}"#;

fn segzsl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segzsl"))
        .args(args)
        .output()
        .expect("binary spawns")
}

fn write_tiny_config(dir: &Path) -> String {
    let path = dir.join("cfg.json");
    fs::write(&path, TINY_CONFIG).unwrap();
    path.display().to_string()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text
        .lines()
        .find(|l| l.starts_with('{'))
        .unwrap_or_else(|| panic!("no json line on stderr: {text}"));
    serde_json::from_str(line).unwrap()
}

#[test]
fn unknown_subcommand_exits_2() {
    let out = segzsl(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_run_directory_is_a_usage_error() {
    let out = segzsl(&["pipeline"]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_json(&out);
    assert_eq!(err["kind"], "invalid_config");
    assert!(err["error"].as_str().unwrap().contains("--out"));
}

#[test]
fn config_typos_exit_3_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"gan": {"epocs": 3}}"#).unwrap();
    let out = segzsl(&[
        "pipeline",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_json(&out);
    assert_eq!(err["kind"], "invalid_config");
    assert!(err["error"].as_str().unwrap().contains("epocs"));
    assert!(err["error"].as_str().unwrap().contains("gan"));
}

#[test]
fn evaluate_without_classifier_names_the_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();

    for cmd in ["gen-synthetic", "train-decomposer"] {
        let out = segzsl(&[cmd, "--config", &cfg, "--out", run_s]);
        assert!(out.status.success(), "{cmd}: {:?}", out);
    }
    let out = segzsl(&["evaluate", "--config", &cfg, "--out", run_s]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_json(&out);
    assert_eq!(err["kind"], "missing_artifact");
    assert!(err["error"].as_str().unwrap().contains("classifier.ckpt"));
}

#[test]
fn stagewise_run_reproduces_the_pipeline_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let run_a = dir.path().join("a");
    let run_b = dir.path().join("b");

    let out = segzsl(&[
        "pipeline",
        "--config",
        &cfg,
        "--out",
        run_a.to_str().unwrap(),
        "--seed",
        "5",
    ]);
    assert!(out.status.success(), "{out:?}");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("acc_h"), "{stdout}");

    for cmd in [
        "gen-synthetic",
        "train-decomposer",
        "train-generator",
        "synthesize",
        "train-classifier",
        "evaluate",
    ] {
        let out = segzsl(&[
            cmd,
            "--config",
            &cfg,
            "--out",
            run_b.to_str().unwrap(),
            "--seed",
            "5",
        ]);
        assert!(out.status.success(), "{cmd}: {out:?}");
    }

    let report_a = fs::read(run_a.join("report.json")).unwrap();
    let report_b = fs::read(run_b.join("report.json")).unwrap();
    assert_eq!(
        report_a, report_b,
        "stage-by-stage run must match the pipeline"
    );

    for run in [&run_a, &run_b] {
        let resolved = fs::read_to_string(run.join("resolved-config.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&resolved).unwrap();
        assert_eq!(v["seed"], 5);
        assert!(
            v["decomposer"]["seed"].is_u64(),
            "stage seeds must be pinned"
        );
        assert!(v["gan"]["seed"].is_u64());
    }
}

#[test]
fn seed_flag_controls_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let mut reports = Vec::new();
    for (name, seed) in [("r1", "9"), ("r2", "9"), ("r3", "10")] {
        let run = dir.path().join(name);
        let out = segzsl(&[
            "pipeline",
            "--config",
            &cfg,
            "--out",
            run.to_str().unwrap(),
            "--seed",
            seed,
        ]);
        assert!(out.status.success(), "{out:?}");
        reports.push(fs::read(run.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1], "same seed, same bytes");
    assert_ne!(reports[0], reports[2], "different seed, different run");
}

#[test]
fn mi_bench_writes_the_sweep_csv() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = segzsl(&[
        "mi-bench",
        "--out",
        run.to_str().unwrap(),
        "--rho",
        "0.5",
        "--seed",
        "1",
    ]);
    assert!(out.status.success(), "{out:?}");
    let text = fs::read_to_string(run.join("mi-bench.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("rho,true_mi,infonce,club"));
    assert!(lines.next().unwrap().starts_with("0.5,"));
}

#[test]
fn export_embeddings_after_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    for cmd in ["gen-synthetic", "train-decomposer"] {
        let out = segzsl(&[cmd, "--config", &cfg, "--out", run_s]);
        assert!(out.status.success(), "{cmd}: {out:?}");
    }
    let out = segzsl(&["export-embeddings", "--config", &cfg, "--out", run_s]);
    assert!(out.status.success(), "{out:?}");
    assert!(run.join("semantic_embeddings.csv").exists());
    assert!(run.join("residual_embeddings.csv").exists());
}

#[test]
fn ablate_prints_the_comparison_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let run = dir.path().join("run");
    let out = segzsl(&[
        "ablate",
        "--config",
        &cfg,
        "--out",
        run.to_str().unwrap(),
        "--seeds",
        "0",
    ]);
    assert!(out.status.success(), "{out:?}");
    let stdout = String::from_utf8_lossy(&out.stdout);
    for name in ["recon", "recon_mi", "full", "no_residual", "acc_h"] {
        assert!(stdout.contains(name), "missing {name} in:\n{stdout}");
    }
    assert!(run.join("ablation.json").exists());
    assert!(run.join("full").join("seed-0").join("report.json").exists());
}
