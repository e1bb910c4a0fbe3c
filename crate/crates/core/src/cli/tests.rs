use super::*;
use crate::eval::ReconstructionError;

fn metrics(strategy: Strategy, beta: f64, seed: u64, recon: f64) -> RunMetrics {
    RunMetrics {
        strategy,
        beta,
        seed,
        epoch: 1,
        recon: ReconstructionError { per_modality: vec![recon / 2.0; 2], total: recon },
        latent_acc: vec![0.5, 0.7],
        latent_acc_mean: 0.6,
        coherence: vec![vec![1.0, seed as f64 / 10.0], vec![0.2, 1.0]],
        coherence_offdiag_mean: 0.3,
        coherence_valid: true,
        objective_trace: Vec::new(),
        config: serde_json::Value::Null,
        metadata: Default::default(),
    }
}

#[test]
fn cells_follow_declared_order() {
    let spec = SweepSpec {
        strategies: vec![Strategy::Poe, Strategy::Mmvm],
        betas: vec![0.5, 0.1],
        seeds: vec![3, 1],
        ..SweepSpec::default()
    };
    let cells = spec.cells();
    assert_eq!(cells.len(), 8);
    let got: Vec<(Strategy, f64, u64)> = cells.iter().map(|c| (c.strategy, c.beta, c.seed)).collect();
    assert_eq!(got[0], (Strategy::Poe, 0.5, 3));
    assert_eq!(got[1], (Strategy::Poe, 0.5, 1));
    assert_eq!(got[2], (Strategy::Poe, 0.1, 3));
    assert_eq!(got[7], (Strategy::Mmvm, 0.1, 1));
    let cfg = spec.cell_config(&cells[5]);
    assert_eq!((cfg.strategy, cfg.beta, cfg.seed), (Strategy::Mmvm, 0.5, 1));
}

#[test]
fn default_sweep_grid_spans_paper_range() {
    let spec = SweepSpec::default();
    assert_eq!(spec.strategies.len(), 6);
    assert_eq!(spec.betas.len(), 6);
    assert_eq!(spec.betas[0], 2f64.powi(-8));
    assert_eq!(*spec.betas.last().unwrap(), 8.0);
    assert_eq!(spec.seeds.len(), 3);
}

#[test]
fn aggregate_is_per_group_mean_and_sample_std() {
    let mut rows = Vec::new();
    for (s, b) in [(Strategy::Avg, 1.0), (Strategy::Mmvm, 1.0)] {
        for seed in 0..3 {
            let recon = 1.0 + seed as f64;
            rows.push(SweepRow { cell: SweepCell { strategy: s, beta: b, seed }, status: "ok".into(), metrics: Some(metrics(s, b, seed, recon)) });
        }
    }
    rows.push(SweepRow { cell: SweepCell { strategy: Strategy::Mmvm, beta: 1.0, seed: 9 }, status: "failed: boom".into(), metrics: None });
    let agg = aggregate(&rows, 2);
    assert_eq!(agg.len(), 2);
    assert_eq!(agg[0].strategy, Strategy::Avg);
    assert_eq!((agg[1].runs, agg[1].failed), (3, 1));
    let h = aggregate_header(2);
    let col = |name: &str| (h.iter().position(|c| c == name).unwrap() - 4) / 2;
    assert_eq!(agg[0].mean[col("recon_total_mean")], 2.0);
    assert!((agg[0].std[col("recon_total_std")] - 1.0).abs() < 1e-15);
    assert!((agg[0].mean[col("coherence_0_1_mean")] - 0.1).abs() < 1e-15);
    assert_eq!(agg[0].std[col("latent_acc_mean_std")], 0.0);

    let result = SweepResult { modalities: 2, aggregate: agg, rows };
    let (header, runs) = result.runs_csv();
    assert_eq!(header.last().unwrap(), "status");
    assert!(runs.iter().all(|r| r.len() == header.len()));
    assert_eq!(runs[6][..3], ["mmvm".to_string(), "1".into(), "9".into()]);
    assert_eq!(runs[6].last().unwrap(), "failed: boom");
    let (ah, ar) = result.aggregate_csv();
    assert!(ar.iter().all(|r| r.len() == ah.len()));
}

#[test]
fn csv_append_keeps_header_and_refuses_mismatch() {
    let dir = std::env::temp_dir().join(format!("mmvm-csv-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    let path = dir.join("runs.csv");
    let header = csv_header_with_status(2);
    let mut row = metrics(Strategy::Poe, 0.25, 4, 1.5).csv_row();
    row.push("ok".into());
    append_csv(&path, &header, &[row.clone()]).unwrap();
    append_csv(&path, &header, &[row.clone()]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1], lines[2]);
    assert!(matches!(append_csv(&path, &csv_header_with_status(3), &[row]), Err(Error::Validation(_))));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn exit_codes_separate_config_from_runtime() {
    assert_eq!(exit_code(&Error::Config("x".into())), 2);
    assert_eq!(exit_code(&Error::Validation("x".into())), 2);
    assert_eq!(exit_code(&Error::Format { offset: 0, message: "x".into() }), 2);
    assert_eq!(exit_code(&Error::Numeric("x".into())), 3);
    assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 3);
}

#[test]
fn run_config_json_round_trips_and_rejects_unknown_fields() {
    let cfg = RunConfig { beta: 0.125, hidden: vec![16], data: Some("d".into()), ..RunConfig::default() };
    let back: RunConfig = serde_json::from_value(cfg.to_json()).unwrap();
    assert_eq!(back, cfg);
    let partial: RunConfig = serde_json::from_str(r#"{"beta": 2.0, "synthetic": {"classes": 4}}"#).unwrap();
    assert_eq!(partial.beta, 2.0);
    assert_eq!(partial.synthetic.classes, 4);
    assert_eq!(partial.synthetic.n_train, 1000);
    assert!(serde_json::from_str::<RunConfig>(r#"{"betta": 2.0}"#).is_err());
    assert!(RunConfig { beta: -1.0, ..RunConfig::default() }.validate().is_err());
    assert!(RunConfig { synthetic: SyntheticConfig { classes: 1, ..SyntheticConfig::default() }, ..RunConfig::default() }
        .validate()
        .is_err());
}

#[test]
fn standardization_is_fit_on_train_only() {
    let syn = SyntheticConfig { n_train: 50, n_test: 20, dims: vec![3, 4], modalities: 2, ..SyntheticConfig::default() };
    let (train, test) = generate_synthetic(&syn).unwrap();
    let raw = prepare_data(train.clone(), test.clone(), false).unwrap();
    assert_eq!(raw.train, train);
    let z = prepare_data(train.clone(), test.clone(), true).unwrap();
    assert_eq!(z.hash, raw.hash);
    assert_eq!(z.stats.as_ref().unwrap(), &FeatureStats::fit(&train));
    assert_ne!(z.test, test);
}

#[test]
fn run_and_evaluation_are_reproducible() {
    let syn = SyntheticConfig { n_train: 200, n_test: 100, ..SyntheticConfig::default() };
    let cfg = RunConfig { synthetic: syn, epochs: 3, hidden: vec![16], beta: 0.5, seed: 7, ..RunConfig::default() };
    let (train, test) = load_data(&cfg).unwrap();
    let data = prepare_data(train, test, true).unwrap();
    let a = train_run(&cfg, &data).unwrap();
    let b = train_run(&cfg, &data).unwrap();
    assert_eq!(a.model, b.model);
    let ckpt = checkpoint_for(&cfg, &a);
    let echoed: RunConfig = serde_json::from_value(ckpt.header.run_config.clone().unwrap()).unwrap();
    assert_eq!(echoed, cfg);

    let clf = fit_coherence_classifier(&data.train, &data.test, &CoherenceTraining { epochs: 5, ..Default::default() }, 0).unwrap();
    for deterministic in [true, false] {
        let opts = EvalOptions { deterministic, seed: 3 };
        let m1 = evaluate_run(&a.model, &cfg, 3, a.trace.clone(), &data, &clf, opts).unwrap();
        let m2 = evaluate_run(&b.model, &cfg, 3, b.trace.clone(), &data, &clf, opts).unwrap();
        assert_eq!(m1.csv_row(), m2.csv_row());
        assert_eq!(m1.config, cfg.to_json());
    }
}

#[test]
fn classifier_cache_reuses_files() {
    let syn = SyntheticConfig { n_train: 200, n_test: 100, ..SyntheticConfig::default() };
    let (train, test) = generate_synthetic(&syn).unwrap();
    let data = prepare_data(train, test, true).unwrap();
    let dir = std::env::temp_dir().join(format!("mmvm-cache-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    let training = CoherenceTraining { epochs: 2, ..Default::default() };
    let a = ClassifierCache::new(Some(dir.clone())).get_or_fit(&data, &training).unwrap();
    let key = ClassifierCache::key(&data, &training);
    assert!(ClassifierCache::new(Some(dir.clone())).path_for(&key).unwrap().exists());
    let b = ClassifierCache::new(Some(dir.clone())).get_or_fit(&data, &training).unwrap();
    assert_eq!(a, b);
    let other = ClassifierCache::key(&data, &CoherenceTraining { epochs: 3, ..Default::default() });
    assert_ne!(key, other);
    std::fs::remove_dir_all(&dir).unwrap();
}
