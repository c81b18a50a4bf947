//! Release gate for the whole crate. Every check prints one PASS/FAIL line,
//! so `cargo test --test acceptance -- --nocapture` doubles as a short
//! report: arithmetic reproduced from reference accuracy pairs, estimator
//! bounds on a closed-form benchmark, finite-difference validation of every
//! training gradient, exactly-forced degenerate values, and the ablation
//! grid on the synthetic benchmark.

use std::time::{Duration, Instant};

use once_cell::sync::Lazy;
use segzsl_core::classifier::{cross_entropy_loss, SoftmaxClassifier};
use segzsl_core::config::ExperimentConfig;
use segzsl_core::decomposer::{
    decomposition_mi_loss, init_decomposer, reconstruction_loss, similarity_loss,
    DecomposerTrainConfig,
};
use segzsl_core::eval::harmonic_mean;
use segzsl_core::fgen::{bank_similarity_loss, CriticModel, GeneratorModel, SemanticBank};
use segzsl_core::mi::{gaussian_mi_sandwich, infonce_loss, AttributeTable, InfoNceScorer};
use segzsl_core::numerics::{
    finite_diff_check, gradient_penalty, Activation, Layer, Matrix, MlpModel, Rng,
};
use segzsl_core::pipeline::{run_ablation, run_pipeline, AblationTable, AblationVariant};
use tempfile::TempDir;

fn criterion(name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("{tag} - {name}: {detail}");
    assert!(pass, "{name}: {detail}");
}

#[test]
fn harmonic_means_match_the_reference_accuracy_pairs() {
    // (acc_s, acc_u, acc_h) in percent; acc_h is quoted to one decimal, so
    // recomputing it from the pair must land within 0.1 points.
    let rows = [
        (76.7, 61.3, 68.1),
        (80.7, 59.9, 68.8),
        (60.3, 53.1, 56.4),
        (40.7, 45.8, 43.1),
    ];
    let mut worst = 0.0f64;
    for &(s, u, h) in &rows {
        let got = 100.0 * harmonic_mean(s / 100.0, u / 100.0).unwrap();
        worst = worst.max((got - h).abs());
    }
    criterion(
        "harmonic mean arithmetic",
        worst <= 0.1,
        &format!(
            "worst deviation {worst:.3} points across {} rows (tolerance 0.1)",
            rows.len()
        ),
    );
}

#[test]
fn mi_estimators_bracket_the_closed_form_value() {
    let mut pass = true;
    let mut details = Vec::new();
    for rho in [0.3, 0.5, 0.8] {
        let started = Instant::now();
        let p = gaussian_mi_sandwich(rho, 7).unwrap();
        let elapsed = started.elapsed();
        let closed_form = -0.5 * (1.0 - rho * rho).ln();
        let ok = (p.true_mi - closed_form).abs() <= 1e-12
            && p.infonce <= p.true_mi + 0.05
            && p.club >= p.true_mi - 0.05
            && elapsed < Duration::from_secs(60);
        pass &= ok;
        details.push(format!(
            "rho {rho}: infonce {:.3} true {:.3} club {:.3} in {:.1}s",
            p.infonce,
            p.true_mi,
            p.club,
            elapsed.as_secs_f64()
        ));
    }
    criterion(
        "mi sandwich",
        pass,
        &format!("{} (slack 0.05, budget 60s each)", details.join("; ")),
    );
}

#[test]
fn every_training_loss_matches_finite_differences() {
    let started = Instant::now();
    let attrs = AttributeTable::new(
        vec![0, 1, 2],
        Matrix::from_vec(3, 2, vec![0.9, -0.3, -0.4, 0.8, 0.2, 1.1]),
    )
    .unwrap();
    let class_set = [0u32, 1, 2];
    let labels = [0u32, 1, 2, 0, 1];
    let mut rng = Rng::new(41);
    let x = rng.normal_matrix(5, 4);
    let mut checks: Vec<(&str, f64)> = Vec::new();

    let dec_cfg = DecomposerTrainConfig {
        semantic_dim: 3,
        residual_dim: 2,
        hidden_dim: 5,
        venc_hidden_dim: 4,
        ..DecomposerTrainConfig::default()
    };
    let model = init_decomposer(4, 2, &dec_cfg, &mut rng).unwrap();
    let es_n = model.semantic_encoder.param_count();
    let er_n = model.residual_encoder.as_ref().unwrap().param_count();

    // Combined information objective: contrastive term plus the frozen-venc
    // upper-bound term, differentiated through both encoders and the scorer.
    {
        let (lambda_s, lambda_r) = (0.7, 0.9);
        let out =
            decomposition_mi_loss(&model, &x, &labels, &attrs, &class_set, lambda_s, lambda_r)
                .unwrap();
        let mut params = model.semantic_encoder.flatten_params();
        params.extend(model.residual_encoder.as_ref().unwrap().flatten_params());
        params.extend_from_slice(model.scorer.weight.data());
        let mut analytic = out.semantic_encoder.flatten();
        analytic.extend(out.residual_encoder.as_ref().unwrap().flatten());
        analytic.extend_from_slice(out.scorer.data());
        let err = finite_diff_check(
            |p| {
                let mut m = model.clone();
                m.semantic_encoder.load_flat_params(&p[..es_n]);
                m.residual_encoder
                    .as_mut()
                    .unwrap()
                    .load_flat_params(&p[es_n..es_n + er_n]);
                m.scorer.weight = Matrix::from_vec(3, 2, p[es_n + er_n..].to_vec());
                decomposition_mi_loss(&m, &x, &labels, &attrs, &class_set, lambda_s, lambda_r)
                    .unwrap()
                    .loss
            },
            &params,
            &analytic,
            1e-5,
        );
        checks.push(("information", err));
    }

    // Supervised cosine similarity at the latent level.
    {
        let z = rng.normal_matrix(5, 3);
        let (_, grad) = similarity_loss(&z, &labels);
        let err = finite_diff_check(
            |p| similarity_loss(&Matrix::from_vec(5, 3, p.to_vec()), &labels).0,
            z.data(),
            grad.data(),
            1e-5,
        );
        checks.push(("similarity", err));
    }

    // Reconstruction through both encoders and the decoder jointly.
    {
        let out = reconstruction_loss(&model, &x).unwrap();
        let mut params = model.semantic_encoder.flatten_params();
        params.extend(model.residual_encoder.as_ref().unwrap().flatten_params());
        params.extend(model.decoder.flatten_params());
        let mut analytic = out.semantic_encoder.flatten();
        analytic.extend(out.residual_encoder.as_ref().unwrap().flatten());
        analytic.extend(out.decoder.flatten());
        let err = finite_diff_check(
            |p| {
                let mut m = model.clone();
                m.semantic_encoder.load_flat_params(&p[..es_n]);
                m.residual_encoder
                    .as_mut()
                    .unwrap()
                    .load_flat_params(&p[es_n..es_n + er_n]);
                m.decoder.load_flat_params(&p[es_n + er_n..]);
                reconstruction_loss(&m, &x).unwrap().loss
            },
            &params,
            &analytic,
            1e-5,
        );
        checks.push(("reconstruction", err));
    }

    // Critic objective with the interpolant fixed, so the gradient penalty's
    // double-backward term is exercised end to end.
    let critic = CriticModel::new(4, 2, 6, &mut rng).unwrap();
    {
        let attr_rows = attrs.rows_for(&labels).unwrap();
        let real = x.clone();
        let fake = rng.normal_matrix(5, 4);
        let alphas = [0.13, 0.42, 0.58, 0.71, 0.94];
        let interp = Matrix::from_fn(5, 4, |i, j| {
            alphas[i] * real.row(i)[j] + (1.0 - alphas[i]) * fake.row(i)[j]
        });
        let lambda_gp = 0.9;
        let inv_n = 1.0 / 5.0;

        let acts_real = critic.net.forward(&real.hstack(&attr_rows)).unwrap();
        let (mut grads, _) = critic
            .net
            .backward(&acts_real, &Matrix::from_fn(5, 1, |_, _| -inv_n));
        let acts_fake = critic.net.forward(&fake.hstack(&attr_rows)).unwrap();
        let (g_fake, _) = critic
            .net
            .backward(&acts_fake, &Matrix::from_fn(5, 1, |_, _| inv_n));
        grads.add_scaled(1.0, &g_fake);
        let (_, pen_grads) = gradient_penalty(&critic.net, &interp, &attr_rows).unwrap();
        grads.add_scaled(lambda_gp, &pen_grads);

        let err = finite_diff_check(
            |p| {
                let mut c = critic.clone();
                c.net.load_flat_params(p);
                let d_real = c.values(&real, &attr_rows).unwrap();
                let d_fake = c.values(&fake, &attr_rows).unwrap();
                let w = (d_real.iter().sum::<f64>() - d_fake.iter().sum::<f64>()) * inv_n;
                let (pen, _) = gradient_penalty(&c.net, &interp, &attr_rows).unwrap();
                -w + lambda_gp * pen
            },
            &critic.net.flatten_params(),
            &grads.flatten(),
            1e-5,
        );
        checks.push(("critic", err));
    }

    // Generator objective: adversarial value, contrastive term through the
    // frozen semantic encoder, and bank similarity, as one function of the
    // generator parameters with the noise held fixed.
    {
        let gen = GeneratorModel::new(2, 2, 5, 4, &mut rng).unwrap();
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
        let g_labels = [0u32, 1, 2, 1];
        let g_attr_rows = attrs.rows_for(&g_labels).unwrap();
        let noise = Rng::new(5).normal_matrix(4, 2);
        let (lambda_mi, lambda_sim) = (0.7, 0.4);

        let acts_g = gen.net.forward(&noise.hstack(&g_attr_rows)).unwrap();
        let fake = acts_g.output();
        let acts_d = critic.net.forward(&fake.hstack(&g_attr_rows)).unwrap();
        let (_, d_in) = critic
            .net
            .backward(&acts_d, &Matrix::from_fn(4, 1, |_, _| -0.25));
        let (mut d_fake, _) = d_in.split_cols(4);
        let acts_es = es.forward(fake).unwrap();
        let nce = infonce_loss(&scorer, acts_es.output(), &g_labels, &attrs, &class_set).unwrap();
        let (_, d_z_sim) = bank_similarity_loss(acts_es.output(), &g_labels, &bank).unwrap();
        let mut d_z = nce.z_grad;
        d_z.scale(lambda_mi);
        d_z.add_scaled(lambda_sim, &d_z_sim);
        let (_, d_from_es) = es.backward(&acts_es, &d_z);
        d_fake.add_scaled(1.0, &d_from_es);
        let (grads, _) = gen.net.backward(&acts_g, &d_fake);

        let err = finite_diff_check(
            |p| {
                let mut g = gen.clone();
                g.net.load_flat_params(p);
                let fake = g.generate(&noise, &g_attr_rows).unwrap();
                let d_vals = critic.values(&fake, &g_attr_rows).unwrap();
                let wgan = -d_vals.iter().sum::<f64>() / 4.0;
                let z = es.forward(&fake).unwrap().output().clone();
                let nce = infonce_loss(&scorer, &z, &g_labels, &attrs, &class_set).unwrap();
                let (sim, _) = bank_similarity_loss(&z, &g_labels, &bank).unwrap();
                wgan + lambda_mi * nce.loss + lambda_sim * sim
            },
            &gen.net.flatten_params(),
            &grads.flatten(),
            1e-5,
        );
        checks.push(("generator", err));
    }

    // Softmax cross entropy over weights and biases.
    {
        let mut clf = SoftmaxClassifier::new(vec![0, 1, 2], 3).unwrap();
        clf.weights = rng.normal_matrix(3, 3);
        clf.bias = vec![0.1, -0.2, 0.05];
        let z = rng.normal_matrix(6, 3);
        let y = [0u32, 1, 2, 0, 1, 2];
        let out = cross_entropy_loss(&clf, &z, &y).unwrap();
        let mut params = clf.weights.data().to_vec();
        params.extend_from_slice(&clf.bias);
        let mut analytic = out.weight_grad.data().to_vec();
        analytic.extend_from_slice(&out.bias_grad);
        let err = finite_diff_check(
            |p| {
                let mut c = clf.clone();
                c.weights = Matrix::from_vec(3, 3, p[..9].to_vec());
                c.bias = p[9..].to_vec();
                cross_entropy_loss(&c, &z, &y).unwrap().loss
            },
            &params,
            &analytic,
            1e-5,
        );
        checks.push(("classifier", err));
    }

    let elapsed = started.elapsed();
    let worst = checks.iter().map(|c| c.1).fold(0.0, f64::max);
    let detail: Vec<String> = checks.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    criterion(
        "gradient suite",
        worst < 1e-4 && elapsed < Duration::from_secs(30),
        &format!(
            "max rel err {}; total {:.1}s (tolerance 1e-4, budget 30s)",
            detail.join(", "),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn degenerate_inputs_pin_losses_exactly() {
    let mut rng = Rng::new(23);
    let tol = 1e-12;

    // One candidate class: the contrastive term and the upper-bound term
    // both cancel identically, as does every flavor of similarity loss.
    let attrs = AttributeTable::new(vec![4], Matrix::from_vec(1, 3, vec![0.3, -0.7, 0.5])).unwrap();
    let dec_cfg = DecomposerTrainConfig {
        semantic_dim: 3,
        residual_dim: 2,
        hidden_dim: 5,
        venc_hidden_dim: 4,
        ..DecomposerTrainConfig::default()
    };
    let model = init_decomposer(4, 3, &dec_cfg, &mut rng).unwrap();
    let x = rng.normal_matrix(4, 4);
    let ones_class = [4u32; 4];
    let mi = decomposition_mi_loss(&model, &x, &ones_class, &attrs, &[4], 1.0, 1.0).unwrap();

    let z = rng.normal_matrix(4, 3);
    let (sim, _) = similarity_loss(&z, &ones_class);
    let bank = SemanticBank {
        z: rng.normal_matrix(3, 3),
        labels: vec![4, 4, 4],
    };
    let (bank_sim, _) = bank_similarity_loss(&z, &ones_class, &bank).unwrap();

    // A linear critic whose feature-block weight chain is a basis vector has
    // a unit-norm input gradient everywhere, so the penalty and all of its
    // parameter gradients vanish. Built as hidden width 1 times output
    // weight 1 to satisfy the one-hidden-layer critic contract.
    let mut w = Matrix::zeros(5, 1);
    w.set(0, 0, 1.0);
    w.set(3, 0, 0.4);
    let critic_net = MlpModel::from_layers(vec![
        Layer {
            weights: w,
            bias: vec![0.0],
            activation: Activation::Identity,
        },
        Layer {
            weights: Matrix::from_vec(1, 1, vec![1.0]),
            bias: vec![0.2],
            activation: Activation::Identity,
        },
    ]);
    let (penalty, pen_grads) = gradient_penalty(
        &critic_net,
        &rng.normal_matrix(6, 3),
        &rng.normal_matrix(6, 2),
    )
    .unwrap();
    let pen_grad_max = pen_grads
        .flatten()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));

    // Zero-parameter softmax: uniform posterior over the classes.
    let clf = SoftmaxClassifier::new(vec![0, 1, 2, 3, 4], 3).unwrap();
    let probs = clf.predict_proba(&rng.normal_matrix(4, 3)).unwrap();
    let uniform_dev = probs
        .data()
        .iter()
        .fold(0.0f64, |m, p| m.max((p - 1.0 / 5.0).abs()));

    let pass = mi.loss.abs() <= tol
        && sim.abs() <= tol
        && bank_sim.abs() <= tol
        && penalty.abs() <= tol
        && pen_grad_max <= tol
        && uniform_dev <= tol;
    criterion(
        "forced values",
        pass,
        &format!(
            "single class: information {:.1e} similarity {:.1e} bank {:.1e}; unit-norm critic: penalty {:.1e} grad {:.1e}; zero-weight softmax deviation {:.1e} (tolerance 1e-12)",
            mi.loss.abs(),
            sim.abs(),
            bank_sim.abs(),
            penalty.abs(),
            pen_grad_max,
            uniform_dev
        ),
    );
}

struct Grid {
    cfg: ExperimentConfig,
    _dir: TempDir,
    table: AblationTable,
    elapsed: Duration,
}

/// One ablation grid shared by the benchmark-level checks: four loss
/// variants, five seeds each, on the default synthetic benchmark.
static GRID: Lazy<Grid> = Lazy::new(|| {
    let cfg = ExperimentConfig::default();
    let dir = TempDir::new().expect("tempdir");
    let started = Instant::now();
    let table = run_ablation(&cfg, &[0, 1, 2, 3, 4], dir.path()).expect("ablation grid");
    Grid {
        cfg,
        _dir: dir,
        table,
        elapsed: started.elapsed(),
    }
});

#[test]
fn information_losses_lift_the_harmonic_mean() {
    let g = &*GRID;
    let spec = &g.cfg.dataset.synthetic;
    assert_eq!(
        (
            spec.seen_classes,
            spec.unseen_classes,
            spec.samples_per_class,
            spec.attribute_dim
        ),
        (20, 5, 50, 16),
        "benchmark scale drifted from the pinned defaults"
    );
    assert_eq!(g.cfg.decomposer.semantic_dim, 64);
    assert_eq!(g.cfg.decomposer.residual_dim, 64);

    let recon = g.table.summary(AblationVariant::Recon).unwrap();
    let recon_mi = g.table.summary(AblationVariant::ReconMi).unwrap();
    let full = g.table.summary(AblationVariant::Full).unwrap();
    let gap = full.acc_h - recon.acc_h;

    let mut probe_gaps: Vec<f64> = g
        .table
        .cells
        .iter()
        .filter(|c| c.variant == AblationVariant::Full)
        .map(|c| c.probe_semantic - c.probe_residual.expect("full keeps the residual branch"))
        .collect();
    probe_gaps.sort_by(f64::total_cmp);
    let probe_gap = probe_gaps[probe_gaps.len() / 2];

    let ordered = recon.acc_h < recon_mi.acc_h && recon_mi.acc_h <= full.acc_h;
    let pass = ordered && gap >= 0.05 && probe_gap >= 0.4 && g.elapsed < Duration::from_secs(600);
    criterion(
        "information split",
        pass,
        &format!(
            "median acc_h recon {:.3} < recon+mi {:.3} <= full {:.3}, gap {:.3} (needs 0.05), attribute probe gap {:.3} (needs 0.4), grid {:.0}s (budget 600s)",
            recon.acc_h,
            recon_mi.acc_h,
            full.acc_h,
            gap,
            probe_gap,
            g.elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn residual_encoder_does_not_hurt() {
    let g = &*GRID;
    let with = g.table.summary(AblationVariant::Full).unwrap();
    let without = g.table.summary(AblationVariant::NoResidual).unwrap();
    criterion(
        "residual ablation",
        with.acc_h >= without.acc_h,
        &format!(
            "median acc_h with residual {:.3} >= without {:.3}",
            with.acc_h, without.acc_h
        ),
    );
}

#[test]
fn full_pipeline_beats_chance() {
    let g = &*GRID;
    let full = g.table.summary(AblationVariant::Full).unwrap();
    let spec = &g.cfg.dataset.synthetic;
    let chance = 1.0 / (spec.seen_classes + spec.unseen_classes) as f64;
    let pass = full.acc_u > 2.0 * chance && full.acc_h > 0.3;
    criterion(
        "gzsl sanity",
        pass,
        &format!(
            "median acc_u {:.3} (needs > {:.3}, twice chance), median acc_h {:.3} (needs > 0.3)",
            full.acc_u,
            2.0 * chance,
            full.acc_h
        ),
    );
}

#[test]
fn identical_runs_write_identical_reports() {
    let cfg = ExperimentConfig::default().reseeded(3);
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    run_pipeline(&cfg, a.path()).unwrap();
    run_pipeline(&cfg, b.path()).unwrap();
    let ra = std::fs::read(a.path().join("report.json")).unwrap();
    let rb = std::fs::read(b.path().join("report.json")).unwrap();
    let pass = ra == rb;
    criterion(
        "determinism",
        pass,
        &format!(
            "two runs with the same config and seed: report bytes {}",
            if pass { "identical" } else { "differ" }
        ),
    );
}
