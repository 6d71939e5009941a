use vefia_core::audit::min_detectable_k;
use vefia_core::faults::{FaultScenario, FaultSpec};
use vefia_core::harness::{
    audit_query, empirical_detection, generate_synthetic, plan_ratio, run_end_to_end, scale_parties_for,
    sweep_lambda, train_system, DatasetSource, ExperimentConfig, SyntheticParams,
};
use vefia_core::protocol::{AlignedDataset, ModelDims};

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset = DatasetSource::Synthetic(SyntheticParams {
        samples: 1500,
        task_features: 4,
        data_features: vec![3],
        ..SyntheticParams::default()
    });
    cfg.model_dims = ModelDims {
        task_bottom: vec![6],
        shallow: vec![3],
        deep: vec![5],
        top_hidden: vec![6],
    };
    cfg.train.epochs = 3;
    cfg.train.batch_size = 32;
    cfg
}

/// Two-class LDA with pooled covariance, solved by Gaussian elimination.
fn lda_accuracy(data: &AlignedDataset) -> f64 {
    let n = data.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            let mut v = data.task_features.row(r).to_vec();
            for d in &data.data_features {
                v.extend_from_slice(d.row(r));
            }
            v
        })
        .collect();
    let d = rows[0].len();
    let mut mean = vec![vec![0.0; d]; 2];
    let mut count = [0usize; 2];
    for (x, &y) in rows.iter().zip(&data.labels) {
        count[y] += 1;
        for j in 0..d {
            mean[y][j] += x[j];
        }
    }
    for c in 0..2 {
        for j in 0..d {
            mean[c][j] /= count[c] as f64;
        }
    }
    let mut cov = vec![vec![0.0; d + 1]; d];
    for (x, &y) in rows.iter().zip(&data.labels) {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (x[i] - mean[y][i]) * (x[j] - mean[y][j]) / (n - 2) as f64;
            }
        }
    }
    for i in 0..d {
        cov[i][d] = mean[1][i] - mean[0][i];
    }
    for col in 0..d {
        let pivot = (col..d).max_by(|&a, &b| cov[a][col].abs().total_cmp(&cov[b][col].abs())).unwrap();
        cov.swap(col, pivot);
        for r in 0..d {
            if r != col {
                let f = cov[r][col] / cov[col][col];
                for c in col..=d {
                    cov[r][c] -= f * cov[col][c];
                }
            }
        }
    }
    let w: Vec<f64> = (0..d).map(|i| cov[i][d] / cov[i][i]).collect();
    let mid: Vec<f64> = (0..d).map(|j| 0.5 * (mean[0][j] + mean[1][j])).collect();
    let correct = rows
        .iter()
        .zip(&data.labels)
        .filter(|(x, &y)| {
            let s: f64 = (0..d).map(|j| w[j] * (x[j] - mid[j])).sum();
            usize::from(s > 0.0) == y
        })
        .count();
    correct as f64 / n as f64
}

#[test]
fn separated_synthetic_classes_are_linearly_separable() {
    let params = SyntheticParams {
        samples: 4000,
        task_separation: 1.0,
        data_separation: 1.0,
        ..SyntheticParams::default()
    };
    let data = generate_synthetic(&params, 9).unwrap();
    let acc = lda_accuracy(&data);
    assert!(acc >= 0.95, "LDA {acc}");
}

#[test]
fn synthetic_data_is_reproducible() {
    let params = SyntheticParams {
        samples: 500,
        ..SyntheticParams::default()
    };
    let a = generate_synthetic(&params, 3).unwrap();
    let b = generate_synthetic(&params, 3).unwrap();
    let c = generate_synthetic(&params, 4).unwrap();
    assert_eq!(a.party_data(0).canonical_bytes(), b.party_data(0).canonical_bytes());
    assert_eq!(a.labels, b.labels);
    assert_ne!(a.party_data(0).canonical_bytes(), c.party_data(0).canonical_bytes());
    // Labels live beside the task features, never in a data party's block.
    assert_eq!(a.party_data(0).width(), 15);
    assert_eq!(a.labels.len(), 500);
    assert!(generate_synthetic(&SyntheticParams { classes: 1, ..params.clone() }, 1).is_err());
    assert!(generate_synthetic(&SyntheticParams { data_features: vec![0], ..params }, 1).is_err());
}

#[test]
fn config_parses_validates_and_digests() {
    let cfg = ExperimentConfig::from_json(r#"{"seed": 5, "faults": [{"scenario": "dataNoise", "k": 0.5}]}"#).unwrap();
    assert_eq!(cfg.seed, 5);
    assert_eq!(cfg.faults[0].scenario, FaultScenario::DataNoise);
    assert_eq!(cfg.faults[0].magnitude, 1e-7);
    let again = ExperimentConfig::from_json(&String::from_utf8(cfg.canonical_bytes()).unwrap()).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(again.digest(), cfg.digest());
    assert_ne!(ExperimentConfig::default().digest(), cfg.digest());

    let missing = r#"{"dataset": {"kind": "csv", "path": "/nonexistent/a.csv", "manifest": "/nonexistent/m.json"}}"#;
    assert!(ExperimentConfig::from_json(missing).is_err());
    assert!(ExperimentConfig::from_json(r#"{"partyCounts": [0, 3]}"#).is_err());
    assert!(ExperimentConfig::from_json(r#"{"faults": [{"scenario": "modelNoise", "k": 0.1, "magnitude": 1e-3}]}"#).is_err());
    assert!(ExperimentConfig::from_json(r#"{"split": {"train": 0.9, "validation": 0.1}}"#).is_err());
}

#[test]
fn csv_config_resolves_paths_relative_to_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("id,t0,d0,label\n");
    for i in 0..200 {
        let y = i % 2;
        csv += &format!("{i},{},{},{y}\n", y as f64 + (i % 7) as f64 * 0.1, y as f64 * 2.0 - (i % 5) as f64 * 0.1);
    }
    std::fs::write(dir.path().join("data.csv"), csv).unwrap();
    std::fs::write(
        dir.path().join("manifest.json"),
        r#"{"taskColumns": ["t0"], "dataColumns": [["d0"]]}"#,
    )
    .unwrap();
    std::fs::write(
        dir.path().join("config.json"),
        r#"{"dataset": {"kind": "csv", "path": "data.csv", "manifest": "manifest.json"}}"#,
    )
    .unwrap();
    let cfg = ExperimentConfig::load(&dir.path().join("config.json")).unwrap();
    let data = cfg.load_dataset().unwrap();
    assert_eq!(data.len(), 200);
    assert_eq!(data.party_count(), 1);
}

#[test]
fn clean_run_is_consistent_and_latency_neutral() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.output_dir = Some(dir.path().to_path_buf());
    let s = run_end_to_end(&cfg).unwrap();
    assert!(!s.flagged);
    let p = &s.parties[0];
    assert_eq!(p.report.inconsistent_count(), 0);
    assert_eq!(p.report.tn, p.sampled);
    let lat = p.report.latency;
    assert!((lat.t_un - lat.t_tr_scaled).abs() / lat.t_un <= 0.01);
    assert_eq!(s.config_digest, cfg.digest());
    for f in ["config.json", "report.json", "metrics.csv", "transcript.jsonl", "trainlog.csv", "schedule-0.csv"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let stored = std::fs::read(dir.path().join("config.json")).unwrap();
    assert_eq!(stored, cfg.canonical_bytes());
    let transcript = std::fs::read_to_string(dir.path().join("transcript.jsonl")).unwrap();
    assert!(transcript.lines().any(|l| l.contains("auditVerdict")));
}

#[test]
fn identical_configs_give_identical_reports() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = small_config();
    cfg.faults = vec![FaultSpec::new(FaultScenario::FeatureSwap, 0.3, 8)];
    for d in [&a, &b] {
        cfg.output_dir = Some(d.path().to_path_buf());
        run_end_to_end(&cfg).unwrap();
    }
    for f in ["report.json", "metrics.csv", "transcript.jsonl", "trainlog.csv", "schedule-0.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        // Output directories differ, so config.json is excluded.
        assert_eq!(x, y, "{f}");
    }
}

#[test]
fn half_abnormal_faults_are_classified_perfectly() {
    let cfg = small_config();
    let mut sys = train_system(&cfg).unwrap();
    for scenario in FaultScenario::ALL {
        let s = audit_query(&mut sys, &cfg, &[FaultSpec::new(scenario, 0.5, 21)], 4).unwrap();
        let r = &s.parties[0].report;
        assert_eq!((r.ppv, r.tpr, r.npv), (Some(1.0), Some(1.0), Some(1.0)), "{scenario:?}");
        assert!(s.flagged);
    }
    // Faults never leak into the next round.
    let clean = audit_query(&mut sys, &cfg, &[], 4).unwrap();
    assert!(!clean.flagged);
}

#[test]
fn repeated_plans_flag_at_the_detectable_ratio() {
    let cfg = small_config();
    let mut sys = train_system(&cfg).unwrap();
    let n = sys.splits.query.len();
    let (w, _, _) = plan_ratio(&cfg, n).unwrap();
    let threshold = min_detectable_k(n, w, cfg.audit_target_dsr).unwrap();
    let spec = FaultSpec::new(FaultScenario::DataNoise, (threshold.count + 1) as f64 / n as f64, 13);
    let est = empirical_detection(&mut sys, &cfg, &spec, 0..200).unwrap();
    assert_eq!(est.abnormal, threshold.count + 1);
    assert!(est.analytic_dsr >= cfg.audit_target_dsr);
    assert!(est.frequency >= 0.999, "{est:?}");
}

#[test]
fn lambda_sweep_reports_one_row_per_value() {
    let mut cfg = small_config();
    cfg.train.epochs = 2;
    cfg.lambda_sweep = vec![0.0, 1.0];
    let rows = sweep_lambda(&cfg).unwrap();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert!(r.error.is_none(), "{r:?}");
        assert!(r.binned_mi.is_some() && r.accuracy.is_some());
    }
    cfg.lambda_sweep.clear();
    assert!(sweep_lambda(&cfg).is_err());
}

#[test]
fn party_scaling_is_normalized_and_bounded() {
    let cfg = ExperimentConfig::default();
    let rows = scale_parties_for(&cfg, 4000, &[1, 3, 5, 7, 9]).unwrap();
    assert_eq!(rows[0].relative_audit_time, 1.0);
    for r in &rows[1..] {
        assert!((0.9..=1.35).contains(&r.relative_audit_time), "{r:?}");
    }
    assert!(rows.windows(2).all(|w| w[0].audit_time <= w[1].audit_time));
    assert_eq!(rows, scale_parties_for(&cfg, 4000, &[1, 3, 5, 7, 9]).unwrap());
    assert!(scale_parties_for(&cfg, 4000, &[10]).is_err());
}
