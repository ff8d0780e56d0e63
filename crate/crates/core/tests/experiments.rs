use csifb::channel::ChannelConfig;
use csifb::experiments::*;
use csifb::networks::{CeMode, ModelConfig, Strategy, Variant};
use csifb::CsiError;
use csifb_diffcore::ReduceOnPlateau;

fn tiny() -> ExperimentConfig {
    let channel =
        ChannelConfig { m_subcarriers: 16, n_bs: 4, subcarrier_spacing_hz: 60e3, seed: 3, ..ChannelConfig::default() };
    let model = ModelConfig {
        k_feedback: 4,
        m_subcarriers: 16,
        n_bs: 4,
        g_d: 4,
        l_symbols: 2,
        g_u: 4,
        ..ModelConfig::default()
    };
    ExperimentConfig {
        seed: 5,
        channel,
        n_train: 16,
        n_val: 8,
        n_test: 8,
        model,
        train: TrainConfig { epochs: 1, batch_size: 8, ..TrainConfig::default() },
        ce: CeTrainConfig { epochs: 1, batch_size: 8, ..CeTrainConfig::default() },
        ..ExperimentConfig::default()
    }
}

#[test]
fn config_toml_round_trip() {
    let cfg = tiny();
    let text = cfg.to_toml_string().unwrap();
    let back = ExperimentConfig::from_toml_str(&text, &[]).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
}

#[test]
fn overrides_reach_nested_keys() {
    let text = tiny().to_toml_string().unwrap();
    let o =
        ["train.epochs=7".to_string(), "model.variant=\"JEFNet\"".to_string(), "snr_u_grid_db=[-3.0, 3.0]".to_string()];
    let cfg = ExperimentConfig::from_toml_str(&text, &o).unwrap();
    assert_eq!(cfg.train.epochs, 7);
    assert_eq!(cfg.model.variant, Variant::JEFNet);
    assert_eq!(cfg.snr_u_grid_db, vec![-3.0, 3.0]);
    assert_ne!(cfg.hash(), tiny().hash());
}

#[test]
fn invalid_configs_are_config_errors() {
    let text = tiny().to_toml_string().unwrap();
    for o in ["snr_u_grid_db=[]", "n_train=2", "model.n_bs=8", "no_such_key=1", "train.epochs"] {
        let err = ExperimentConfig::from_toml_str(&text, &[o.to_string()]).unwrap_err();
        assert!(err.is_config_error(), "{o}: {err}");
    }
    let missing = ExperimentConfig::load(std::path::Path::new("/nonexistent/cfg.toml"), &[]).unwrap_err();
    assert!(missing.is_config_error());
}

#[test]
fn plateau_halves_every_twenty_epochs_on_flat_loss() {
    let t = TrainConfig::default();
    let mut p = ReduceOnPlateau::new(t.lr_factor, t.plateau_patience);
    let mut lr = t.lr_initial;
    let mut cuts = Vec::new();
    for epoch in 1..=60 {
        let next = p.observe(1.0, lr);
        if next < lr {
            cuts.push(epoch);
        }
        lr = next;
    }
    assert_eq!(cuts, vec![21, 41]);
}

#[test]
fn one_epoch_writes_checkpoint_and_one_log_row() {
    let cfg = tiny();
    let splits = load_splits(&cfg).unwrap();
    let trained = train(&cfg, &splits).unwrap();
    assert_eq!(trained.log.len(), 1);
    assert_eq!(trained.log[0].epoch, 1);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    save_checkpoint(&ckpt, &trained).unwrap();
    let log = dir.path().join("log.csv");
    write_log_csv(&trained.log, &log).unwrap();
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 2);

    let back = load_checkpoint(&ckpt).unwrap();
    assert_eq!(back.config, cfg);
    assert_eq!(back.log, trained.log);
    let a = evaluate_sweep(&trained, &splits.test).unwrap();
    let b = evaluate_sweep(&back, &splits.test).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_for_another_variant_is_rejected() {
    let cfg = tiny();
    let splits = load_splits(&cfg).unwrap();
    let trained = train(&cfg, &splits).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let mut forged = trained.clone();
    forged.config.model.variant = Variant::JEFNet;
    save_checkpoint(&ckpt, &forged).unwrap();
    let err = load_checkpoint(&ckpt).unwrap_err();
    assert!(matches!(err, CsiError::CheckpointMismatch(_)), "{err}");
    assert!(err.is_config_error());
}

#[test]
fn sweep_rows_follow_the_grid_and_repeat_exactly() {
    let cfg = tiny();
    let splits = load_splits(&cfg).unwrap();
    let trained = train(&cfg, &splits).unwrap();
    let rows = evaluate_sweep(&trained, &splits.test).unwrap();
    assert_eq!(rows.len(), 5);
    let snrs: Vec<f64> = rows.iter().map(|r| r.snr_u_db).collect();
    assert_eq!(snrs, cfg.snr_u_grid_db);
    assert!(rows.iter().all(|r| r.nmse_db.is_finite() && r.n_eval == 8));
    assert_eq!(rows, evaluate_sweep(&trained, &splits.test).unwrap());

    let again = train(&cfg, &splits).unwrap();
    for (name, entry) in trained.store.iter() {
        assert_eq!(again.store.value(name).unwrap().data(), entry.value.data(), "{name}");
    }
}

#[test]
fn csv_round_trip_and_line_count() {
    let cfg = tiny();
    let splits = load_splits(&cfg).unwrap();
    let rows = evaluate_sweep(&train(&cfg, &splits).unwrap(), &splits.test).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.csv");
    write_results_csv(&rows, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text.starts_with("variant,scheme,strategy,ce_mode,k,l,g_u,snr_ce_db,snr_u_db,nmse_db,n_eval,seed"));
    assert_eq!(read_results_csv(&path).unwrap(), rows);
    assert!(write_results_csv(&[], &path).is_err());
}

#[test]
fn svg_has_one_polyline_per_series() {
    let cfg = tiny();
    let splits = load_splits(&cfg).unwrap();
    let rows = ablation_on(&cfg, &splits, &[Variant::UJEFNet, Variant::JEFNet], &[1]).unwrap();
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r.dataset_hash == splits.dataset_hash));
    let svg = render_svg(&rows, "tiny").unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(render_svg(&[], "empty").is_err());
}

#[test]
fn strategies_agree_when_uplink_estimate_is_exact() {
    // with a pilot on every subcarrier and no noise the LS estimate is the
    // true uplink channel, so strategy 3 must reproduce strategy 1
    let mut cfg = tiny();
    cfg.model.g_u = 1;
    cfg.model.ce_mode = CeMode::Ls;
    cfg.train.snr_u_range_db = [300.0, 300.0];
    cfg.snr_u_grid_db = vec![300.0];
    let splits = load_splits(&cfg).unwrap();
    let mut results = Vec::new();
    for s in [Strategy::S1, Strategy::S3] {
        let mut c = cfg.clone();
        c.model.strategy = s;
        let trained = train(&c, &splits).unwrap();
        results.push(evaluate_sweep(&trained, &splits.test).unwrap()[0].nmse_db);
    }
    assert!((results[0] - results[1]).abs() < 1e-6, "{results:?}");
}

#[test]
fn ai_uplink_ce_beats_interpolation() {
    let mut cfg = ExperimentConfig { n_train: 1000, n_val: 100, n_test: 200, ..ExperimentConfig::default() };
    cfg.model.g_u = 4;
    cfg.ce.epochs = 3;
    let splits = load_splits(&cfg).unwrap();
    let (ce, log) = train_ce(CeKind::Uplink, &cfg, &splits).unwrap();
    assert_eq!(log.len(), 3);
    let (interp, trained) = evaluate_ce(&ce, CeKind::Uplink, &cfg, &splits.test, Some(0.0)).unwrap();
    assert!(trained < interp, "CE net {trained:.2} dB vs interpolation {interp:.2} dB");
}

#[test]
fn ideal_training_strategies_train_identically() {
    let mut cfg = tiny();
    cfg.model.ce_mode = CeMode::Ls;
    let splits = load_splits(&cfg).unwrap();
    let reference = {
        let mut c = cfg.clone();
        c.model.ce_mode = CeMode::Ideal;
        train(&c, &splits).unwrap()
    };
    for s in [Strategy::S1, Strategy::S2] {
        let mut c = cfg.clone();
        c.model.strategy = s;
        let t = train(&c, &splits).unwrap();
        assert_eq!(t.log, reference.log);
        for (name, entry) in reference.store.iter() {
            assert_eq!(t.store.value(name).unwrap().data(), entry.value.data(), "{s:?} {name}");
        }
    }
}
