//! Release gate: one test per end-to-end guarantee, from metric arithmetic
//! to full seeded pipeline runs. Each test passes or fails on its own line.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use sasv_fuse_core::backends::{
    fit_diag_gmm, fourier_features, logistic_objective, loss_and_gradient, model_from_bytes,
    model_to_bytes, rbf_kernel, sample_fourier_map, train, BackendKind, MlpParams, TrainConfig,
};
use sasv_fuse_core::embstore::{read_store, write_store};
use sasv_fuse_core::features::{assemble_dataset, cosine, LabelRule, LabeledMatrix};
use sasv_fuse_core::matrix::{dot, Matrix};
use sasv_fuse_core::metrics::{
    eer, eer_oracle, sasv_metrics, sasv_metrics_with, MetricKind, NegativePooling, ScoreSet,
};
use sasv_fuse_core::pipeline::{
    evaluate_entries, gen_synthetic, run_embedding_fusion, run_score_fusion, score_lines,
    PipelineConfig, ScoreFusionConfig, SubsystemScores, SyntheticSpec,
};
use sasv_fuse_core::protocol::{parse_trials, write_trials, TrialLabel, TrialRecord};
use sasv_fuse_core::vad::{trim_silence, VadConfig, Waveform};

fn labeled(rows: Vec<Vec<f64>>, labels: Vec<f64>) -> LabeledMatrix {
    let refs = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let label = if l > 0.5 {
                TrialLabel::Target
            } else {
                TrialLabel::Spoof
            };
            TrialRecord::new(format!("e{i}"), format!("t{i}"), label).unwrap()
        })
        .collect();
    LabeledMatrix {
        x: Matrix::from_rows(&rows),
        labels,
        trial_refs: refs,
    }
}

/// Two overlapping classes at +-sep along every axis.
fn blobs(n_per_class: usize, dim: usize, sep: f64, seed: u64) -> LabeledMatrix {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(2 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for i in 0..2 * n_per_class {
        let positive = i % 2 == 0;
        let center = if positive { sep } else { -sep };
        rows.push((0..dim).map(|_| center + rng.gen_range(-1.0..1.0)).collect());
        labels.push(if positive { 1.0 } else { 0.0 });
    }
    labeled(rows, labels)
}

#[test]
fn eer_agrees_with_the_exhaustive_oracle() {
    let mut rng = ChaCha20Rng::seed_from_u64(4242);
    let start = Instant::now();
    for case in 0..1000 {
        let n_pos = rng.gen_range(1..=200);
        let n_neg = rng.gen_range(1..=200);
        // every other case draws from a coarse lattice so ties are common
        let lattice = case % 2 == 0;
        let draw = |rng: &mut ChaCha20Rng| {
            if lattice {
                f64::from(rng.gen_range(-8i32..=8)) / 4.0
            } else {
                rng.gen_range(-3.0..3.0)
            }
        };
        let pos: Vec<f64> = (0..n_pos).map(|_| draw(&mut rng)).collect();
        let neg: Vec<f64> = (0..n_neg).map(|_| draw(&mut rng)).collect();
        let (fast, _) = eer(&pos, &neg).unwrap();
        let (slow, _) = eer_oracle(&pos, &neg).unwrap();
        assert!(
            (fast - slow).abs() <= 1e-9,
            "case {case}: eer {fast} vs oracle {slow}\npos {pos:?}\nneg {neg:?}"
        );
    }
    let elapsed = start.elapsed();
    assert!(
        elapsed < Duration::from_secs(5),
        "1000 oracle comparisons took {elapsed:?}"
    );
}

#[test]
fn hand_worked_metric_cases_are_exact() {
    let (perfect, _) = eer(&[0.9, 0.8], &[0.1, 0.2]).unwrap();
    assert_eq!(perfect, 0.0);

    let same = [0.3, 0.5, 0.7];
    let (coin, _) = eer(&same, &same).unwrap();
    assert_eq!(coin, 0.5);

    let (third, _) = eer(&[0.8, 0.6, 0.4], &[0.5, 0.3, 0.1]).unwrap();
    assert_eq!(third, 1.0 / 3.0);

    // one score set per decomposition case
    let mut separated = ScoreSet::new();
    let mut spoof_like_target = ScoreSet::new();
    for i in 0..12 {
        let label = match i % 3 {
            0 => TrialLabel::Target,
            1 => TrialLabel::NonTarget,
            _ => TrialLabel::Spoof,
        };
        let rec = |tag: &str| {
            TrialRecord::new(format!("e{i}"), format!("{tag}{i}"), label).unwrap()
        };
        let score = if label == TrialLabel::Target { 1.0 } else { 0.0 };
        separated.push(rec("a"), score).unwrap();
        let score = if label == TrialLabel::NonTarget { -1.0 } else { 0.7 };
        spoof_like_target.push(rec("b"), score).unwrap();
    }
    let report = sasv_metrics(&separated).unwrap();
    assert_eq!(report.get(MetricKind::Sv), Some(0.0));
    assert_eq!(report.get(MetricKind::Spf), Some(0.0));
    assert_eq!(report.get(MetricKind::Sasv), Some(0.0));

    let report = sasv_metrics(&spoof_like_target).unwrap();
    assert_eq!(report.get(MetricKind::Sv), Some(0.0));
    assert_eq!(report.get(MetricKind::Spf), Some(0.5));

    // no nontarget trials at all: SASV degenerates to SPF, SV is an error
    let mut spoof_only = ScoreSet::new();
    for (i, &s) in [0.8, 0.6, 0.4].iter().enumerate() {
        let t = TrialRecord::new(format!("e{i}"), format!("t{i}"), TrialLabel::Target).unwrap();
        spoof_only.push(t, s).unwrap();
    }
    for (i, &s) in [0.5, 0.3, 0.1].iter().enumerate() {
        let t = TrialRecord::new(format!("e{i}"), format!("s{i}"), TrialLabel::Spoof).unwrap();
        spoof_only.push(t, s).unwrap();
    }
    let err = sasv_metrics(&spoof_only).unwrap_err();
    assert!(err.to_string().contains("sv_eer"), "got: {err}");
    let report = sasv_metrics_with(
        &spoof_only,
        &[MetricKind::Spf, MetricKind::Sasv],
        NegativePooling::Pooled,
    )
    .unwrap();
    assert_eq!(report.get(MetricKind::Spf), Some(1.0 / 3.0));
    assert_eq!(report.get(MetricKind::Sasv), Some(1.0 / 3.0));
    assert_eq!(report.get(MetricKind::Sv), None);
}

fn table_config(kind: BackendKind) -> TrainConfig {
    let mut cfg = TrainConfig::for_kind(kind);
    cfg.seed = 2022;
    match kind {
        BackendKind::SvmLinear => cfg.max_iterations = 5000,
        BackendKind::SvmPoly => {
            cfg.degree = 3;
            cfg.coef0 = 1.0;
        }
        BackendKind::RffLogReg => {
            cfg.rff_dim = 2000;
            cfg.max_iterations = 500;
        }
        BackendKind::Gmm => cfg.max_iterations = 100,
        BackendKind::RandomForest => cfg.n_trees = 100,
        BackendKind::Gbdt => {
            cfg.n_trees = 700;
            cfg.tree_depth = 6;
            cfg.learning_rate = 0.1;
        }
        BackendKind::Mlp => {
            cfg.layer_sizes = vec![32, 16];
            cfg.max_iterations = 40;
        }
        _ => {}
    }
    cfg
}

/// Speaker identity lives in coordinate signs that must agree between the
/// enrollment and test halves of the feature vector, so no linear scorer can
/// verify speakers while kernels and trees can. Most embedding coordinates
/// carry no signal, which favors split selection over radial distances.
/// Spoofed utterances hit the target speaker's cluster and differ only in
/// the countermeasure block.
#[test]
fn xor_table_separates_linear_from_nonlinear_backends() {
    let spec = SyntheticSpec {
        n_speakers: 4,
        utterances_per_speaker: 240,
        spoof_fraction: 0.3,
        asv_dim: 28,
        cm_dim: 3,
        speaker_scale: 3.0,
        noise_scale: 1.0,
        spoof_shift: 4.0,
        xor_mode: true,
        trials_per_partition: [5000, 2000, 100],
        seed: 2022,
    };
    let data = gen_synthetic(&spec).unwrap();
    let stores: HashMap<_, _> = data.stores.clone().into_iter().collect();
    let fspec = data.feature_spec();
    let rule = LabelRule::default();
    let train_set = assemble_dataset(&data.train, &stores, &fspec, &rule).unwrap();
    let dev_set = assemble_dataset(&data.dev, &stores, &fspec, &rule).unwrap();

    let start = Instant::now();
    let mut table = Vec::new();
    for kind in BackendKind::ALL {
        let model = train(&train_set, &table_config(kind)).unwrap();
        let mut set = ScoreSet::new();
        for (i, trial) in dev_set.trial_refs.iter().enumerate() {
            let s = model.score(dev_set.x.row(i)).unwrap();
            set.push(trial.clone(), s).unwrap();
        }
        let report = sasv_metrics(&set).unwrap();
        println!(
            "{:>13}  sv {:6.2}%  spf {:6.2}%  sasv {:6.2}%",
            kind.as_str(),
            100.0 * report.get(MetricKind::Sv).unwrap(),
            100.0 * report.get(MetricKind::Spf).unwrap(),
            100.0 * report.get(MetricKind::Sasv).unwrap(),
        );
        table.push((kind, report));
    }
    let elapsed = start.elapsed();

    let metric = |kind: BackendKind, m: MetricKind| {
        table
            .iter()
            .find(|(k, _)| *k == kind)
            .and_then(|(_, r)| r.get(m))
            .unwrap()
    };

    for kind in [BackendKind::LogReg, BackendKind::SvmLinear] {
        let sv = metric(kind, MetricKind::Sv);
        assert!(sv >= 0.45, "{kind:?} SV-EER {sv} should stay near chance");
    }
    let rbf_sv = metric(BackendKind::SvmRbf, MetricKind::Sv);
    assert!(rbf_sv <= 0.25, "RBF SV-EER {rbf_sv}");

    let gbdt_sasv = metric(BackendKind::Gbdt, MetricKind::Sasv);
    assert!(gbdt_sasv <= 0.05, "boosting SASV-EER {gbdt_sasv}");
    for (kind, report) in &table {
        let sasv = report.get(MetricKind::Sasv).unwrap();
        assert!(
            gbdt_sasv <= sasv,
            "boosting ({gbdt_sasv}) should lead, {kind:?} reached {sasv}"
        );
    }

    let nonlinear = [
        BackendKind::Mlp,
        BackendKind::SvmRbf,
        BackendKind::SvmPoly,
        BackendKind::RffLogReg,
        BackendKind::Gmm,
        BackendKind::RandomForest,
        BackendKind::Gbdt,
    ];
    for kind in nonlinear {
        let spf = metric(kind, MetricKind::Spf);
        assert!(spf <= 0.02, "{kind:?} SPF-EER {spf}");
    }

    assert!(
        elapsed < Duration::from_secs(60),
        "nine-backend table took {elapsed:?}"
    );
}

#[test]
fn fusing_speaker_and_spoof_subsystems_beats_both_alone() {
    let spec = SyntheticSpec {
        n_speakers: 6,
        utterances_per_speaker: 30,
        spoof_fraction: 0.34,
        asv_dim: 8,
        cm_dim: 4,
        speaker_scale: 3.0,
        noise_scale: 0.6,
        spoof_shift: 2.5,
        xor_mode: false,
        trials_per_partition: [1500, 800, 800],
        seed: 303,
    };
    let data = gen_synthetic(&spec).unwrap();
    let vals = |e: &sasv_fuse_core::Embedding| -> Vec<f64> {
        e.values.iter().map(|&v| f64::from(v)).collect()
    };
    // subsystem one verifies the speaker and is blind to spoofing
    let speaker_score = |t: &TrialRecord| {
        let enr = vals(data.stores["asv_enroll"].get(&t.enroll_id).unwrap());
        let tst = vals(data.stores["asv_test"].get(&t.test_id).unwrap());
        cosine(&enr, &tst).unwrap()
    };
    // subsystem two detects spoofing and knows nothing about speakers
    let spoof_score = |t: &TrialRecord| {
        let cm = vals(data.stores["cm_test"].get(&t.test_id).unwrap());
        -cm.iter().sum::<f64>() / cm.len() as f64
    };

    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, entries: &[(TrialRecord, f64)]| -> PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, score_lines(entries)).unwrap();
        p
    };
    let entries = |list: &sasv_fuse_core::TrialList, f: &dyn Fn(&TrialRecord) -> f64| {
        list.iter()
            .map(|t| (t.clone(), f(t)))
            .collect::<Vec<(TrialRecord, f64)>>()
    };

    let spk_dev = entries(&data.dev, &speaker_score);
    let spk_eval = entries(&data.eval, &speaker_score);
    let spf_dev = entries(&data.dev, &spoof_score);
    let spf_eval = entries(&data.eval, &spoof_score);

    let mut backend = TrainConfig::for_kind(BackendKind::LogReg);
    backend.max_iterations = 500;
    let cfg = ScoreFusionConfig {
        subsystems: vec![
            SubsystemScores {
                name: "speaker".into(),
                train: write("spk_train.txt", &entries(&data.train, &speaker_score)),
                dev: write("spk_dev.txt", &spk_dev),
                eval: write("spk_eval.txt", &spk_eval),
            },
            SubsystemScores {
                name: "spoof".into(),
                train: write("spf_train.txt", &entries(&data.train, &spoof_score)),
                dev: write("spf_dev.txt", &spf_dev),
                eval: write("spf_eval.txt", &spf_eval),
            },
        ],
        backend,
        seed: 303,
        out_dir: dir.path().join("fused"),
        label_rule: LabelRule::default(),
        pooling: NegativePooling::Pooled,
    };
    let run = run_score_fusion(&cfg).unwrap();

    let pooled = NegativePooling::Pooled;
    let alone = [
        evaluate_entries(&spk_dev, pooled).unwrap(),
        evaluate_entries(&spk_eval, pooled).unwrap(),
        evaluate_entries(&spf_dev, pooled).unwrap(),
        evaluate_entries(&spf_eval, pooled).unwrap(),
    ];
    let fused_dev = run.dev_report.get(MetricKind::Sasv).unwrap();
    let fused_eval = run.eval_report.get(MetricKind::Sasv).unwrap();
    for (i, report) in alone.iter().enumerate() {
        let single = report.get(MetricKind::Sasv).unwrap();
        let fused = if i % 2 == 0 { fused_dev } else { fused_eval };
        assert!(
            fused < single,
            "fused SASV-EER {fused} not below subsystem's {single} (set {i})"
        );
    }
}

#[test]
fn analytic_gradients_match_central_differences() {
    let mut rng = ChaCha20Rng::seed_from_u64(606);
    let h = 1e-5;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3);

    for case in 0..10 {
        let n = rng.gen_range(6..=14);
        let d = rng.gen_range(2..=5);
        let x = random_matrix(n, d, &mut rng);
        let y: Vec<f64> = (0..n)
            .map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        let lambda = [0.0, 1e-3, 0.1][case % 3];
        let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = rng.gen_range(-0.5..0.5);

        let (_, grad_w, grad_b) = logistic_objective(&x, &y, lambda, &w, b);
        for k in 0..d {
            let mut hi = w.clone();
            let mut lo = w.clone();
            hi[k] += h;
            lo[k] -= h;
            let fd = (logistic_objective(&x, &y, lambda, &hi, b).0
                - logistic_objective(&x, &y, lambda, &lo, b).0)
                / (2.0 * h);
            assert!(
                rel(grad_w[k], fd) < 1e-4,
                "case {case} w[{k}]: {} vs {fd}",
                grad_w[k]
            );
        }
        let fd = (logistic_objective(&x, &y, lambda, &w, b + h).0
            - logistic_objective(&x, &y, lambda, &w, b - h).0)
            / (2.0 * h);
        assert!(rel(grad_b, fd) < 1e-4, "case {case} bias: {grad_b} vs {fd}");
    }

    for case in 0..10 {
        let n = rng.gen_range(5..=10);
        let d = rng.gen_range(2..=4);
        let hidden = rng.gen_range(3..=6);
        let x = random_matrix(n, d, &mut rng);
        let labels: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..2))).collect();
        let lambda = 1e-3;
        let mut net = MlpParams {
            weights: vec![random_matrix(hidden, d, &mut rng), random_matrix(1, hidden, &mut rng)],
            biases: vec![
                (0..hidden).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                vec![rng.gen_range(-0.5..0.5)],
            ],
            leaky_slope: 0.3,
        };
        let (_, grad) = loss_and_gradient(&net, &x, &labels, lambda);
        let analytic = grad.flatten();
        let theta = net.flatten();
        for k in 0..theta.len() {
            let mut hi = theta.clone();
            let mut lo = theta.clone();
            hi[k] += h;
            lo[k] -= h;
            net.assign_from_flat(&hi);
            let up = loss_and_gradient(&net, &x, &labels, lambda).0;
            net.assign_from_flat(&lo);
            let down = loss_and_gradient(&net, &x, &labels, lambda).0;
            net.assign_from_flat(&theta);
            let fd = (up - down) / (2.0 * h);
            assert!(
                rel(analytic[k], fd) < 1e-4,
                "net case {case} theta[{k}]: {} vs {fd}",
                analytic[k]
            );
        }
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m.set(i, j, rng.gen_range(-1.0..1.0));
        }
    }
    m
}

#[test]
fn em_log_likelihood_never_decreases() {
    let mut rng = ChaCha20Rng::seed_from_u64(909);
    for case in 0..50u64 {
        let n = rng.gen_range(20..=100);
        let d = rng.gen_range(1..=4);
        let k = rng.gen_range(1..=4);
        let mut x = Matrix::zeros(n, d);
        for i in 0..n {
            let center = if rng.gen_bool(0.5) { 1.5 } else { -1.5 };
            for j in 0..d {
                x.set(i, j, center + rng.gen_range(-1.0..1.0));
            }
        }
        let (_, trace) = fit_diag_gmm(&x, k, 40, 1e-9, 1e-6, case).unwrap();
        assert!(!trace.is_empty());
        for (step, pair) in trace.windows(2).enumerate() {
            assert!(
                pair[1] >= pair[0] - 1e-10,
                "case {case} step {step}: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }
}

#[test]
fn boosting_loss_never_increases_and_depth_two_cracks_xor() {
    let data = blobs(250, 4, 0.6, 1212);
    let mut cfg = TrainConfig::for_kind(BackendKind::Gbdt);
    cfg.n_trees = 700;
    let model = train(&data, &cfg).unwrap();
    assert_eq!(model.trace.len(), 701);
    for (round, pair) in model.trace.windows(2).enumerate() {
        assert!(
            pair[1] <= pair[0] + 1e-12,
            "round {round}: {} -> {}",
            pair[0],
            pair[1]
        );
    }

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..50 {
        for (corner, label) in [
            (vec![0.0, 0.0], 0.0),
            (vec![1.0, 1.0], 0.0),
            (vec![0.0, 1.0], 1.0),
            (vec![1.0, 0.0], 1.0),
        ] {
            rows.push(corner);
            labels.push(label);
        }
    }
    let xor = labeled(rows, labels);
    let mut cfg = TrainConfig::for_kind(BackendKind::Gbdt);
    cfg.n_trees = 50;
    cfg.tree_depth = 2;
    cfg.learning_rate = 0.3;
    let model = train(&xor, &cfg).unwrap();
    for (i, row) in xor.x.iter_rows().enumerate() {
        let s = model.score(row).unwrap();
        assert_eq!(
            s > 0.0,
            xor.labels[i] > 0.5,
            "row {i} scored {s} for label {}",
            xor.labels[i]
        );
    }
}

#[test]
fn random_fourier_features_approximate_the_rbf_kernel() {
    let gamma = 0.5;
    let dim = 6;
    let mut rng = ChaCha20Rng::seed_from_u64(808);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..100)
        .map(|_| {
            let mut p = || (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect::<Vec<f64>>();
            (p(), p())
        })
        .collect();

    let max_error = |n_features: usize, seed: u64| {
        let (projection, offsets) = sample_fourier_map(dim, n_features, gamma, seed);
        pairs
            .iter()
            .map(|(x, y)| {
                let zx = fourier_features(&projection, &offsets, x);
                let zy = fourier_features(&projection, &offsets, y);
                (dot(&zx, &zy) - rbf_kernel(gamma, x, y)).abs()
            })
            .fold(0.0, f64::max)
    };

    assert!(max_error(5000, 7) < 0.05);

    let (mut coarse, mut fine) = (0.0, 0.0);
    for seed in 0..10 {
        coarse += max_error(500, seed);
        fine += max_error(5000, seed);
    }
    assert!(
        fine < coarse,
        "mean worst-case error should shrink with width: {} vs {}",
        fine / 10.0,
        coarse / 10.0
    );
}

#[test]
fn eer_is_invariant_under_monotone_transforms() {
    let mut rng = ChaCha20Rng::seed_from_u64(1111);
    // all arithmetic below is exact on scores drawn from the k/16 lattice,
    // so each map preserves the exact ordering and tie structure
    let transforms: [fn(f64) -> f64; 4] = [
        |s| 2.0 * s + 3.0,
        |s| s / 4.0 - 1.0,
        |s| 8.0 * s + 0.5,
        |s| if s < 0.0 { s / 2.0 } else { 2.0 * s },
    ];
    for case in 0..100 {
        let mut base = ScoreSet::new();
        let mut entries = Vec::new();
        for (tag, label) in [
            ("t", TrialLabel::Target),
            ("n", TrialLabel::NonTarget),
            ("s", TrialLabel::Spoof),
        ] {
            for i in 0..rng.gen_range(1..=50) {
                let score = f64::from(rng.gen_range(-48i32..=48)) / 16.0;
                let trial =
                    TrialRecord::new(format!("e{case}-{i}"), format!("{tag}{i}"), label).unwrap();
                base.push(trial.clone(), score).unwrap();
                entries.push((trial, score));
            }
        }
        let reference = sasv_metrics(&base).unwrap();
        for (ti, f) in transforms.iter().enumerate() {
            let mut mapped = ScoreSet::new();
            for (trial, score) in &entries {
                mapped.push(trial.clone(), f(*score)).unwrap();
            }
            let report = sasv_metrics(&mapped).unwrap();
            for kind in MetricKind::ALL {
                assert_eq!(
                    reference.get(kind),
                    report.get(kind),
                    "case {case} transform {ti} changed {}",
                    kind.name()
                );
            }
        }
    }
}

#[test]
fn serialization_and_seeded_runs_round_trip_bit_exactly() {
    let spec = SyntheticSpec {
        n_speakers: 4,
        utterances_per_speaker: 10,
        spoof_fraction: 0.3,
        asv_dim: 5,
        cm_dim: 3,
        speaker_scale: 2.5,
        noise_scale: 0.6,
        spoof_shift: 2.5,
        xor_mode: false,
        trials_per_partition: [400, 200, 200],
        seed: 42,
    };
    let data = gen_synthetic(&spec).unwrap();

    let text = write_trials(&data.train);
    let reparsed = parse_trials(&text).unwrap();
    assert_eq!(reparsed.records(), data.train.records());
    assert_eq!(write_trials(&reparsed), text);

    for store in data.stores.values() {
        let bytes = write_store(store).unwrap();
        let reread = read_store(&bytes).unwrap();
        assert_eq!(write_store(&reread).unwrap(), bytes);
    }

    // every model family through its binary format, scores intact
    let train_data = blobs(20, 3, 0.8, 77);
    let probe = [0.25, -0.4, 0.9];
    for kind in BackendKind::ALL {
        let mut cfg = TrainConfig::for_kind(kind);
        cfg.seed = 7;
        cfg.max_iterations = cfg.max_iterations.min(200);
        cfg.n_trees = cfg.n_trees.min(20);
        cfg.rff_dim = 50;
        cfg.layer_sizes = vec![6];
        cfg.n_components = 2;
        let model = train(&train_data, &cfg).unwrap();
        let bytes = model_to_bytes(&model).unwrap();
        let reread = model_from_bytes(&bytes).unwrap();
        assert_eq!(
            model_to_bytes(&reread).unwrap(),
            bytes,
            "{kind:?} bytes changed across a reload"
        );
        assert_eq!(
            model.score(&probe).unwrap().to_bits(),
            reread.score(&probe).unwrap().to_bits(),
            "{kind:?} score drifted across a reload"
        );
    }

    // identical seeded pipeline runs, byte for byte including the manifest
    let dir = tempfile::tempdir().unwrap();
    let paths = data.write_to_dir(&dir.path().join("corpus")).unwrap();
    let mut backend = TrainConfig::for_kind(BackendKind::LogReg);
    backend.max_iterations = 200;
    let cfg = PipelineConfig {
        feature_spec: data.feature_spec(),
        backend,
        stores: paths.stores,
        train_trials: paths.train_trials,
        dev_trials: paths.dev_trials,
        eval_trials: paths.eval_trials,
        seed: 9,
        out_dir: dir.path().join("run"),
        label_rule: LabelRule::default(),
        pooling: NegativePooling::Pooled,
    };
    let first = run_embedding_fusion(&cfg).unwrap();
    let snapshot: Vec<(PathBuf, Vec<u8>)> = first
        .written
        .iter()
        .map(|p| (p.clone(), fs::read(p).unwrap()))
        .collect();
    fs::remove_dir_all(&cfg.out_dir).unwrap();
    run_embedding_fusion(&cfg).unwrap();
    for (path, bytes) in snapshot {
        assert_eq!(
            fs::read(&path).unwrap(),
            bytes,
            "{} differs between identical runs",
            path.display()
        );
    }
}

#[test]
fn vad_trims_are_idempotent_monotone_and_frame_accurate() {
    let rate = 16000usize;
    let mut samples = vec![0.0f64; rate];
    for i in 0..rate {
        samples.push(0.9 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / rate as f64).sin());
    }
    samples.extend(vec![0.0f64; rate]);
    let wave = Waveform {
        samples,
        sample_rate: rate as u32,
    };
    let cfg = VadConfig::default();
    let out = trim_silence(&wave, &cfg).unwrap();
    let frame = rate * cfg.frame_ms as usize / 1000;
    let kept = out.waveform.samples.len() as i64;
    assert!(
        (kept - rate as i64).unsigned_abs() as usize <= 2 * frame,
        "kept {kept} of one tone second"
    );
    let again = trim_silence(&out.waveform, &cfg).unwrap();
    assert_eq!(again.waveform.samples, out.waveform.samples);

    let mut rng = ChaCha20Rng::seed_from_u64(1313);
    for case in 0..20 {
        let n_chunks = rng.gen_range(3..=8);
        let mut samples = Vec::new();
        for _ in 0..n_chunks {
            let loud = rng.gen_bool(0.5);
            let amp = if loud { rng.gen_range(0.3..0.9) } else { rng.gen_range(0.0..0.003) };
            let len = rng.gen_range(800..4000);
            for i in 0..len {
                samples.push(amp * (0.7 * i as f64).sin());
            }
        }
        let wave = Waveform { samples, sample_rate: 16000 };

        let once = trim_silence(&wave, &cfg).unwrap();
        if once.all_silent {
            assert!(once.waveform.samples.is_empty());
        } else {
            let twice = trim_silence(&once.waveform, &cfg).unwrap();
            assert_eq!(
                twice.waveform.samples, once.waveform.samples,
                "case {case} not idempotent"
            );
        }

        let mut previous = usize::MAX;
        for threshold in [-60.0, -50.0, -40.0, -30.0, -20.0, -10.0] {
            let stricter = VadConfig {
                threshold_db: threshold,
                ..cfg.clone()
            };
            let kept = trim_silence(&wave, &stricter).unwrap().waveform.samples.len();
            assert!(
                kept <= previous,
                "case {case}: raising the threshold to {threshold} kept more audio"
            );
            previous = kept;
        }
    }
}
