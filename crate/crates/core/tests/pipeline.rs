use gatedkan::circuits::{self, DeletionConfig, InterventionType, RankMethod};
use gatedkan::datagen::{self, RegimeKind, RegimeSpec};
use gatedkan::forecaster::{CoreKind, ForwardOptions, GatedModel, ModelConfig};
use gatedkan::trainer::{self, TrainConfig};

fn small_run(core: CoreKind, seed: u64) -> trainer::RegimeRun {
    let spec = RegimeSpec {
        length: 900,
        ..RegimeSpec::new(RegimeKind::ThresholdAr, seed)
    };
    let model = ModelConfig::tiny(1, 16).with_core(core);
    let train = TrainConfig {
        epochs: 3,
        patience: 3,
        batch_size: 32,
        seed,
        ..TrainConfig::default()
    };
    trainer::train_regime(&spec, &model, &train).unwrap()
}

#[test]
fn training_is_reproducible_and_survives_a_file_round_trip() {
    let a = small_run(CoreKind::GatedKan, 11);
    let b = small_run(CoreKind::GatedKan, 11);
    assert_eq!(a.model, b.model);
    assert_eq!(a.report, b.report);
    let c = small_run(CoreKind::GatedKan, 12);
    assert_ne!(a.model.params(), c.model.params());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.gkan");
    a.model.save(&path).unwrap();
    let loaded = GatedModel::load(&path).unwrap();
    let x = &a.windows.test.x;
    assert_eq!(a.model.predict(x).unwrap(), loaded.predict(x).unwrap());
    assert_eq!(std::fs::read(&path).unwrap(), {
        let again = dir.path().join("again.gkan");
        loaded.save(&again).unwrap();
        std::fs::read(again).unwrap()
    });
}

#[test]
fn trained_model_supports_the_circuit_toolkit() {
    let run = small_run(CoreKind::GatedKan, 5);
    let (model, w) = (&run.model, &run.windows);
    let edges = circuits::kan_edges(model, true);
    assert_eq!(
        edges.len(),
        2 * model.config().flat_dim() * model.config().hidden_dim
    );

    let sample = circuits::attribution_sample(&w.val, 32, 5).unwrap();
    let ranked = circuits::rank_edges(model, RankMethod::Importance, Some(&sample)).unwrap();
    assert_eq!(ranked.len(), edges.len());
    assert!(ranked.windows(2).all(|p| p[0].score >= p[1].score));
    assert!(ranked.iter().all(|s| s.score >= 0.0));

    let cfg = DeletionConfig {
        ks: vec![1, 4],
        draws: 6,
        seed: 5,
        bootstrap: 50,
    };
    let curve = circuits::deletion_curve(model, &ranked, &w.test, &cfg).unwrap();
    assert_eq!(curve.ks, vec![1, 4]);
    assert_eq!(curve.delta_random.len(), 6);
    assert!(curve.delta_random.iter().all(|d| d.len() == 2));
    assert!(curve.p_value.iter().all(|p| (0.0..=1.0).contains(p)));
    let base = trainer::evaluate_mse(model, &w.test).unwrap();
    assert!((curve.base_mse - base).abs() <= 1e-12 * base.max(1.0));

    let every_layer = circuits::kan_edges(model, false);
    assert!(every_layer.len() > edges.len());
    let all =
        circuits::delta_edge(model, &every_layer, InterventionType::Zero, &w.test, None).unwrap();
    let closed = circuits::delta_all_kan(model, &w.test).unwrap();
    assert!(
        (all - closed).abs() <= 1e-9 * closed.abs().max(1e-12),
        "{all} vs {closed}"
    );

    let agg = circuits::aggregate_attribution(model, &sample, &ForwardOptions::default()).unwrap();
    assert_eq!(agg.shape(), &[1, 16]);
    assert!(agg.data().iter().all(|v| v.is_finite() && *v >= 0.0));

    let tuple = circuits::circuit_tuple(model, &ranked[0].edge, &sample, &w.test).unwrap();
    assert_eq!(tuple.deltas.len(), 3);
    assert_eq!(tuple.attribution.len(), 1);
}

#[test]
fn baselines_and_nonlinearity_diagnostic() {
    let lin = small_run(CoreKind::LinearOnly, 8);
    let mlp = small_run(CoreKind::GatedMlp, 8);
    assert!(circuits::kan_edges(&lin.model, true).is_empty());
    assert!(circuits::kan_edges(&mlp.model, true).is_empty());
    let m_lin = trainer::evaluate_mse(&lin.model, &lin.windows.test).unwrap();
    let m_mlp = trainer::evaluate_mse(&mlp.model, &mlp.windows.test).unwrap();
    let s = circuits::s_nonlin(m_lin, m_mlp).unwrap();
    assert!((s - (m_lin - m_mlp) / m_lin).abs() < 1e-12);
    assert_eq!(lin.model.r_kan(&lin.windows.test.x).unwrap(), 0.0);
    let u = mlp.model.u_kan(&mlp.windows.test.x).unwrap();
    assert!((0.0..=1.0).contains(&u));
}

#[test]
fn csv_and_synthetic_sources_window_identically() {
    let spec = RegimeSpec {
        length: 300,
        ..RegimeSpec::new(RegimeKind::Multifreq, 3)
    };
    let ds = datagen::generate_regime(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    ds.write_csv(&path).unwrap();
    let back = datagen::load_csv(&path, Default::default()).unwrap();
    let a = datagen::window_split(&ds, 16, 4).unwrap();
    let b = datagen::window_split(&back, 16, 4).unwrap();
    assert_eq!(a.test.x, b.test.x);
    assert_eq!(a.train.y, b.train.y);
}
