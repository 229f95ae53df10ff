use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gatedkan::circuits::KanEdge;
use gatedkan::forecaster::{Component, GatedModel};
use gatedkan_cli::experiments;
use gatedkan_cli::report::body_of;
use gatedkan_cli::ExperimentConfig;

const TINY: &str = r#"
seeds = [3]
[data]
length = 700
[model]
input_len = 16
horizon = 2
patch_len = 4
stride = 4
d_model = 2
kernel = 3
grid_size = 3
hidden_dim = 3
kan_depth = 1
stats_dim = 2
stats_hidden = 3
[train]
epochs = 2
patience = 1
batch_size = 32
[circuits]
attribution_windows = 12
ig_steps = 4
bootstrap = 20
random_baseline_draws = 20
draws = 4
ks = [1, 3]
mask_ks = [2]
mask_draws = 2
"#;

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn gatedkan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gatedkan"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_tiny(dir: &Path, out: &str) -> PathBuf {
    let cfg = tiny_config(dir);
    let out_dir = dir.join(out);
    let o = gatedkan(&["--config", s(&cfg), "--out-dir", s(&out_dir), "train"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out_dir.join("models/regime_switching_gated_kan_seed3.gkan")
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "[model]\nwidth = 3\n").unwrap();
    let o = gatedkan(&["--config", s(&p), "train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("width"));
}

#[test]
fn invalid_values_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = gatedkan(&[
        "--config",
        s(&cfg),
        "deletion",
        "--model",
        s(&dir.path().join("none.gkan")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = gatedkan(&["--config", s(&cfg), "--seeds", "1,1", "train"]);
    assert_eq!(o.status.code(), Some(2));
    let o = gatedkan(&["--config", s(&cfg), "--regime", "sawtooth", "train"]);
    assert_eq!(o.status.code(), Some(2));
    let o = gatedkan(&["--config", s(&cfg), "--csv", s(&cfg), "table3"]);
    assert_eq!(o.status.code(), Some(2));
    let corrupt = dir.path().join("corrupt.gkan");
    std::fs::write(&corrupt, b"GKANFILE garbage").unwrap();
    let o = gatedkan(&["--config", s(&cfg), "deletion", "--model", s(&corrupt)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn forecast_round_trip_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_tiny(dir.path(), "run");
    let cfg = tiny_config(dir.path());
    let a = gatedkan(&[
        "--config",
        s(&cfg),
        "--out-dir",
        s(&dir.path().join("f1")),
        "forecast",
        "--model",
        s(&model),
    ]);
    let b = gatedkan(&[
        "--config",
        s(&cfg),
        "--out-dir",
        s(&dir.path().join("f2")),
        "forecast",
        "--model",
        s(&model),
    ]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let printed: Vec<f64> = String::from_utf8(a.stdout)
        .unwrap()
        .lines()
        .map(|l| l.parse().unwrap())
        .collect();
    assert_eq!(printed.len(), 2);

    let loaded = GatedModel::load(&model).unwrap();
    let config = ExperimentConfig::load(&cfg).unwrap();
    let series =
        gatedkan::datagen::generate_series(&config.data.spec(config.data.regime, 3)).unwrap();
    let direct = loaded
        .forecast_window(&series[series.len() - 16..])
        .unwrap();
    assert_eq!(printed, direct);
}

#[test]
fn csv_source_trains_and_warns_on_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let csv = dir.path().join("two.csv");
    let mut text = String::from("time,a,b\n");
    for t in 0..400 {
        let x = t as f64 * 0.2;
        text.push_str(&format!(
            "2024-01-01T{t:05},{},{}\n",
            x.sin(),
            (0.5 * x).cos()
        ));
    }
    std::fs::write(&csv, text).unwrap();
    let out = dir.path().join("csv");
    let o = gatedkan(&[
        "--config",
        s(&cfg),
        "--csv",
        s(&csv),
        "--out-dir",
        s(&out),
        "train",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let model = out.join("models/two_gated_kan_seed3.gkan");
    assert_eq!(GatedModel::load(&model).unwrap().config().channels, 2);
    let o = gatedkan(&[
        "--config",
        s(&cfg),
        "--csv",
        s(&csv),
        "--out-dir",
        s(&out),
        "forecast",
        "--model",
        s(&model),
    ]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("last 16 of 400 rows"));
    let forecast = std::fs::read_to_string(out.join("forecast.csv")).unwrap();
    assert!(forecast.starts_with("step,a,b\n"));
    assert_eq!(forecast.lines().count(), 3);
}

#[test]
fn deletion_rerun_writes_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_tiny(dir.path(), "run");
    let cfg = tiny_config(dir.path());
    let run = |out: &str| {
        let o = gatedkan(&[
            "--config",
            s(&cfg),
            "--out-dir",
            s(&dir.path().join(out)),
            "deletion",
            "--model",
            s(&model),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        dir.path().join(out)
    };
    let (a, b) = (run("d"), run("d_again"));
    for f in [
        "deletion_R_e.csv",
        "deletion_I_e.csv",
        "sanity_all_kan_weights.csv",
        "sanity_spline_only.csv",
        "eta.csv",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let strip = |p: &Path| body_of(&p.join("report.json")).unwrap().replace(s(p), "");
    assert_eq!(strip(&a), strip(&b));
    let header = std::fs::read_to_string(a.join("deletion_R_e.csv")).unwrap();
    assert!(header.starts_with("k,delta_top,delta_random_mean,delta_random_std,delta_bottom\n1,"));
}

#[test]
fn closed_gate_edge_has_no_attribution() {
    let dir = tempfile::tempdir().unwrap();
    let model_path = train_tiny(dir.path(), "run");
    let mut model = GatedModel::load(&model_path).unwrap();
    let bias = model.gate_net(Component::Resid).unwrap().out.bias;
    model.params_mut().get_mut(bias).data_mut().fill(-60.0);
    let closed = dir.path().join("closed.gkan");
    model.save(&closed).unwrap();

    let mut cfg = ExperimentConfig::load(&tiny_config(dir.path())).unwrap();
    cfg.out_dir = dir.path().join("circuit");
    let edge = KanEdge::new(Component::Resid, 0, 1, 2);
    let report = experiments::circuit(&cfg, &closed, edge).unwrap();
    let c = &report.body.results.circuit;
    assert!(c.importance < 1e-20, "{}", c.importance);
    assert!(c.attribution.iter().flatten().all(|a| a.abs() < 1e-20));
    assert!(c.range > 0.0);
    assert!(c.deltas.values().all(|d| d.abs() < 1e-20));
    let heat = std::fs::read_to_string(cfg.out_dir.join("attribution.csv")).unwrap();
    assert_eq!(heat.lines().count(), 1 + 16);
}

#[test]
fn gate_sweep_reports_noise_and_each_penalty() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("sweep");
    let o = gatedkan(&[
        "--config",
        s(&cfg),
        "--out-dir",
        s(&out),
        "--regime",
        "threshold_ar",
        "--lambda-g",
        "0,0.05",
        "gate-sweep",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let regimes = &v["body"]["results"]["regimes"];
    assert_eq!(regimes.as_array().unwrap().len(), 1);
    assert_eq!(regimes[0]["noise_std"], 1.0);
    assert_eq!(regimes[0]["rows"].as_array().unwrap().len(), 2);
    assert!(v["timing"]["wall_seconds"].as_f64().unwrap() >= 0.0);
    assert_eq!(v["body"]["config"]["seeds"], serde_json::json!([3]));
    let csv = std::fs::read_to_string(out.join("gate_sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}
