//! The experiment commands. Each writes `report.json` and its CSV tables
//! under the configured output directory and returns the report.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use gatedkan::circuits::{
    self, CircuitTuple, DeletionConfig, DeletionCurve, EdgeMeans, EtaReport, InterventionType,
    KanEdge, LagMetrics, MaskingRow, RankMethod, SanityResult, SweepRow,
};
use gatedkan::datagen::{
    self, RegimeKind, SeriesDataset, SplitRatios, SplitWindows, LAG_RECOVERY_LAGS,
};
use gatedkan::forecaster::{CoreKind, ForwardOptions, GatedModel, ModelConfig};
use gatedkan::numerics::Tensor;
use gatedkan::trainer::{self, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config::{
    CliError, ExperimentConfig, Result, DEFAULT_SEEDS, SWEEP_REGIMES, TABLE_REGIMES,
};
use crate::report::{fmt_opt, write_csv, Report, Summary};

/// Cores compared in the regime table.
pub const TABLE_CORES: [CoreKind; 3] =
    [CoreKind::GatedKan, CoreKind::LinearOnly, CoreKind::KanOnly];

/// Cut-offs for lag recall; those above the input length are dropped.
pub const LAG_KS: [usize; 3] = [5, 10, 20];

/// Edges intervened on in the spline-versus-zero comparison.
pub const TOP_INTERVENTION_EDGES: usize = 20;

/// A loaded series and where it came from.
pub struct Source {
    pub label: String,
    pub dataset: SeriesDataset,
    pub noise_std: Option<f64>,
}

/// The CSV file when one is configured, otherwise regime `kind` with `seed`.
pub fn load_source(cfg: &ExperimentConfig, kind: RegimeKind, seed: u64) -> Result<Source> {
    match &cfg.data.csv {
        Some(path) => {
            let dataset = datagen::load_csv(path, SplitRatios::default())?;
            let label = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "csv".into());
            Ok(Source {
                label,
                dataset,
                noise_std: None,
            })
        }
        None => {
            let spec = cfg.data.spec(kind, seed);
            spec.validate()?;
            Ok(Source {
                label: kind.to_string(),
                dataset: datagen::generate_regime(&spec)?,
                noise_std: Some(spec.noise_std),
            })
        }
    }
}

fn model_config(cfg: &ExperimentConfig, core: CoreKind, channels: usize) -> ModelConfig {
    let mut m = cfg.model.clone().with_core(core);
    m.channels = channels;
    m
}

/// Metrics of one trained model on its test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub data: String,
    pub core: CoreKind,
    pub seed: u64,
    pub lambda_g: f64,
    pub test_mse: f64,
    pub best_val_mse: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub u_kan: Option<f64>,
    pub r_kan: f64,
    /// Relative to the output directory.
    pub model_file: String,
}

pub struct TrainedRun {
    pub model: GatedModel,
    pub windows: SplitWindows,
    pub metrics: RunMetrics,
}

/// Train one model and save it under `models/`.
pub fn train_run(
    cfg: &ExperimentConfig,
    source: &Source,
    core: CoreKind,
    seed: u64,
    lambda_g: f64,
    tag: &str,
) -> Result<TrainedRun> {
    let mc = model_config(cfg, core, source.dataset.channels);
    mc.validate()?;
    let windows = datagen::window_split(&source.dataset, mc.input_len, mc.horizon)?;
    let tc = TrainConfig {
        seed,
        lambda_g,
        ..cfg.train.clone()
    };
    let (model, report) = trainer::train(
        GatedModel::seeded(mc, seed)?,
        &windows.train,
        &windows.val,
        &tc,
    )?;
    let test = &windows.test;
    let model_file = format!("models/{}_{core}{tag}_seed{seed}.gkan", source.label);
    let path = cfg.out_dir.join(&model_file);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(CliError::io(format!("creating {}", dir.display())))?;
    }
    model.save(&path)?;
    let metrics = RunMetrics {
        data: source.label.clone(),
        core,
        seed,
        lambda_g,
        test_mse: trainer::evaluate_mse(&model, test)?,
        best_val_mse: report.best_val_mse,
        best_epoch: report.best_epoch,
        epochs_run: report.epochs_run,
        stopped_early: report.stopped_early,
        u_kan: if core.is_gated() || core == CoreKind::UngatedKan {
            Some(model.u_kan(&test.x)?)
        } else {
            None
        },
        r_kan: model.r_kan(&test.x)?,
        model_file,
    };
    Ok(TrainedRun {
        model,
        windows,
        metrics,
    })
}

fn summary(values: &[f64]) -> Summary {
    Summary::of(values).unwrap_or(Summary {
        mean: f64::NAN,
        std: None,
    })
}

fn require_synthetic(cfg: &ExperimentConfig, command: &str) -> Result<()> {
    match cfg.data.csv {
        Some(_) => Err(CliError::Config(format!(
            "{command} runs on the synthetic regimes; remove data.csv"
        ))),
        None => Ok(()),
    }
}

fn load_model(path: &Path) -> Result<GatedModel> {
    if !path.exists() {
        return Err(CliError::Io {
            context: format!("model file {}", path.display()),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "not found"),
        });
    }
    Ok(GatedModel::load(path)?)
}

/// Windows of the configured data shaped for `model`.
fn model_windows(cfg: &ExperimentConfig, model: &GatedModel) -> Result<(Source, SplitWindows)> {
    let source = load_source(cfg, cfg.data.regime, cfg.seeds[0])?;
    let mc = model.config();
    if source.dataset.channels != mc.channels {
        return Err(CliError::Config(format!(
            "the model expects {} channels, the data has {}",
            mc.channels, source.dataset.channels
        )));
    }
    let windows = datagen::window_split(&source.dataset, mc.input_len, mc.horizon)?;
    Ok((source, windows))
}

fn prepare(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    regimes: &[RegimeKind],
) -> Result<ExperimentConfig> {
    let cfg = cfg.clone().with_defaults(seeds, regimes);
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(CliError::io(format!("creating {}", cfg.out_dir.display())))?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainResults {
    pub noise_std: Option<f64>,
    pub runs: Vec<RunMetrics>,
    pub test_mse: Summary,
}

pub fn train(cfg: &ExperimentConfig) -> Result<Report<TrainResults>> {
    let started = Instant::now();
    let cfg = prepare(cfg, &DEFAULT_SEEDS[..1], &[])?;
    let mut runs = Vec::new();
    let mut noise_std = None;
    for &seed in &cfg.seeds {
        let source = load_source(&cfg, cfg.data.regime, seed)?;
        noise_std = source.noise_std;
        let run = train_run(&cfg, &source, cfg.model.core, seed, cfg.train.lambda_g, "")?;
        runs.push(run.metrics);
    }
    let mses: Vec<f64> = runs.iter().map(|r| r.test_mse).collect();
    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|r| {
            vec![
                r.data.clone(),
                r.core.to_string(),
                r.seed.to_string(),
                r.test_mse.to_string(),
                fmt_opt(r.u_kan),
                r.r_kan.to_string(),
                r.model_file.clone(),
            ]
        })
        .collect();
    write_csv(
        &cfg.out_dir.join("train.csv"),
        &[
            "data",
            "core",
            "seed",
            "test_mse",
            "u_kan",
            "r_kan",
            "model_file",
        ],
        &rows,
    )?;
    let report = Report::new(
        "train",
        &cfg,
        TrainResults {
            noise_std,
            test_mse: summary(&mses),
            runs,
        },
        started,
    );
    report.write(&cfg.out_dir)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastResults {
    pub model_file: String,
    pub data: String,
    /// Index of the first forecast step in the series.
    pub origin: usize,
    /// Leading rows not used as model input.
    pub truncated_rows: usize,
    /// `[horizon][channel]`.
    pub forecast: Vec<Vec<f64>>,
}

/// Forecast the steps following the last input window of the series.
pub fn forecast(cfg: &ExperimentConfig, model_path: &Path) -> Result<Report<ForecastResults>> {
    let started = Instant::now();
    let cfg = prepare(cfg, &DEFAULT_SEEDS[..1], &[])?;
    let model = load_model(model_path)?;
    let source = load_source(&cfg, cfg.data.regime, cfg.seeds[0])?;
    let (l, c) = (model.config().input_len, model.config().channels);
    let ds = &source.dataset;
    if ds.channels != c {
        return Err(CliError::Config(format!(
            "the model expects {c} channels, the data has {}",
            ds.channels
        )));
    }
    if ds.len() < l {
        return Err(CliError::Config(format!(
            "the series has {} rows; the model needs {l}",
            ds.len()
        )));
    }
    let truncated_rows = ds.len() - l;
    if truncated_rows > 0 && cfg.data.csv.is_some() {
        eprintln!(
            "warning: using the last {l} of {} rows as the input window",
            ds.len()
        );
    }
    let window: Vec<f64> = (truncated_rows..ds.len())
        .flat_map(|t| (0..c).map(move |ch| (t, ch)))
        .map(|(t, ch)| ds.value(t, ch))
        .collect();
    let flat = model.forecast_window(&window)?;
    let forecast: Vec<Vec<f64>> = flat.chunks(c).map(<[f64]>::to_vec).collect();
    let mut header = vec!["step".to_string()];
    header.extend(ds.names.iter().cloned());
    let rows: Vec<Vec<String>> = forecast
        .iter()
        .enumerate()
        .map(|(t, v)| {
            std::iter::once((t + 1).to_string())
                .chain(v.iter().map(f64::to_string))
                .collect()
        })
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&cfg.out_dir.join("forecast.csv"), &header, &rows)?;
    let report = Report::new(
        "forecast",
        &cfg,
        ForecastResults {
            model_file: model_path.display().to_string(),
            data: source.label,
            origin: ds.len(),
            truncated_rows,
            forecast,
        },
        started,
    );
    report.write(&cfg.out_dir)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitResults {
    pub model_file: String,
    pub data: String,
    pub attribution_windows: usize,
    pub circuit: CircuitTuple,
}

/// Parse `component:layer:input:output`, e.g. `resid:0:3:7`.
pub fn parse_edge(s: &str) -> Result<KanEdge> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || CliError::Config(format!("edge `{s}` is not component:layer:input:output"));
    let [comp, layer, input, output] = parts.as_slice() else {
        return Err(bad());
    };
    let component = match *comp {
        "trend" => gatedkan::forecaster::Component::Trend,
        "resid" => gatedkan::forecaster::Component::Resid,
        _ => return Err(bad()),
    };
    let num = |v: &str| v.parse::<usize>().map_err(|_| bad());
    Ok(KanEdge::new(
        component,
        num(layer)?,
        num(input)?,
        num(output)?,
    ))
}

/// The full circuit of one first-layer edge.
pub fn circuit(
    cfg: &ExperimentConfig,
    model_path: &Path,
    edge: KanEdge,
) -> Result<Report<CircuitResults>> {
    let started = Instant::now();
    let cfg = prepare(cfg, &DEFAULT_SEEDS[..1], &[])?;
    let model = load_model(model_path)?;
    let (source, windows) = model_windows(&cfg, &model)?;
    let sample =
        circuits::attribution_sample(&windows.val, cfg.circuits.attribution_windows, cfg.seeds[0])?;
    let tuple = circuits::circuit_tuple(&model, &edge, &sample, &windows.test)?;
    let phi: Vec<Vec<String>> = tuple
        .phi_snapshot
        .iter()
        .map(|[z, v]| vec![z.to_string(), v.to_string()])
        .collect();
    write_csv(&cfg.out_dir.join("phi.csv"), &["z", "phi"], &phi)?;
    let l = model.config().input_len;
    let mut heat = Vec::new();
    for (ch, row) in tuple.attribution.iter().enumerate() {
        for (pos, a) in row.iter().enumerate() {
            heat.push(vec![
                ch.to_string(),
                pos.to_string(),
                (l - pos).to_string(),
                a.to_string(),
            ]);
        }
    }
    write_csv(
        &cfg.out_dir.join("attribution.csv"),
        &["channel", "position", "lag", "a_e"],
        &heat,
    )?;
    let report = Report::new(
        "circuit",
        &cfg,
        CircuitResults {
            model_file: model_path.display().to_string(),
            data: source.label,
            attribution_windows: sample.len(),
            circuit: tuple,
        },
        started,
    );
    report.write(&cfg.out_dir)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub regime: RegimeKind,
    pub noise_std: f64,
    pub core: CoreKind,
    pub mse: Summary,
    pub u_kan: Option<Summary>,
    pub r_kan: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseReduction {
    pub regime: RegimeKind,
    /// `1 - gated / linear_only` on mean test MSE.
    pub vs_linear: f64,
    /// `gated / kan_only - 1` on mean test MSE.
    pub excess_vs_kan_only: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table3Results {
    pub rows: Vec<TableRow>,
    pub reductions: Vec<MseReduction>,
    pub runs: Vec<RunMetrics>,
}

impl Table3Results {
    pub fn row(&self, regime: RegimeKind, core: CoreKind) -> Option<&TableRow> {
        self.rows
            .iter()
            .find(|r| r.regime == regime && r.core == core)
    }
}

/// Gated, linear-only and KAN-only models on each regime and seed.
pub fn table3(cfg: &ExperimentConfig) -> Result<Report<Table3Results>> {
    let started = Instant::now();
    let cfg = prepare(cfg, &DEFAULT_SEEDS, &TABLE_REGIMES)?;
    require_synthetic(&cfg, "table3")?;
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    let mut reductions = Vec::new();
    for &regime in &cfg.regimes {
        let mut by_core: BTreeMap<CoreKind, Vec<RunMetrics>> = BTreeMap::new();
        let mut noise_std = 0.0;
        for &seed in &cfg.seeds {
            let source = load_source(&cfg, regime, seed)?;
            noise_std = source.noise_std.unwrap_or_default();
            for core in TABLE_CORES {
                let run = train_run(&cfg, &source, core, seed, cfg.train.lambda_g, "")?;
                by_core.entry(core).or_default().push(run.metrics);
            }
        }
        for core in TABLE_CORES {
            let rs = &by_core[&core];
            let col = |f: fn(&RunMetrics) -> f64| summary(&rs.iter().map(f).collect::<Vec<_>>());
            let gates: Option<Vec<f64>> = rs.iter().map(|r| r.u_kan).collect();
            rows.push(TableRow {
                regime,
                noise_std,
                core,
                mse: col(|r| r.test_mse),
                u_kan: gates.map(|g| summary(&g)),
                r_kan: col(|r| r.r_kan),
            });
        }
        let mean_mse = |core| {
            rows.iter()
                .rev()
                .find(|r: &&TableRow| r.core == core)
                .map(|r| r.mse.mean)
                .unwrap()
        };
        let gated = mean_mse(CoreKind::GatedKan);
        reductions.push(MseReduction {
            regime,
            vs_linear: 1.0 - gated / mean_mse(CoreKind::LinearOnly),
            excess_vs_kan_only: gated / mean_mse(CoreKind::KanOnly) - 1.0,
        });
        for core in TABLE_CORES {
            runs.extend(by_core.remove(&core).unwrap_or_default());
        }
    }
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.regime.to_string(),
                r.core.to_string(),
                r.mse.mean.to_string(),
                fmt_opt(r.mse.std),
                fmt_opt(r.u_kan.map(|s| s.mean)),
                fmt_opt(r.u_kan.and_then(|s| s.std)),
                r.r_kan.mean.to_string(),
                fmt_opt(r.r_kan.std),
            ]
        })
        .collect();
    write_csv(
        &cfg.out_dir.join("table3.csv"),
        &[
            "regime",
            "core",
            "mse_mean",
            "mse_std",
            "u_kan_mean",
            "u_kan_std",
            "r_kan_mean",
            "r_kan_std",
        ],
        &csv_rows,
    )?;
    let report = Report::new(
        "table3",
        &cfg,
        Table3Results {
            rows,
            reductions,
            runs,
        },
        started,
    );
    report.write(&cfg.out_dir)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagSeed {
    pub seed: u64,
    pub run: RunMetrics,
    /// Method name to metrics on the exact and dilated truth sets.
    pub exact: BTreeMap<String, LagMetrics>,
    pub dilated: BTreeMap<String, LagMetrics>,
    /// `sum |sum IG - (F(x) - F(0))| / sum |F(x) - F(0)|` over windows.
    pub ig_completeness_error: f64,
    pub masking: BTreeMap<String, Vec<MaskingRow>>,
    /// Per-position scores, oldest position first.
    pub scores: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagSummary {
    pub method: String,
    pub truth_set: String,
    pub auprc: Summary,
    pub best_auprc: f64,
    pub recall: Vec<(usize, Summary)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagResults {
    pub truth: Vec<usize>,
    pub truth_dilated: Vec<usize>,
    pub random: LagMetrics,
    pub random_dilated: LagMetrics,
    pub seeds: Vec<LagSeed>,
    pub summary: Vec<LagSummary>,
    pub ig_completeness_max_error: f64,
    /// Pearson correlation of IG scores between seed pairs.
    pub ig_seed_stability: Option<Summary>,
}

impl LagResults {
    pub fn summary_of(&self, method: &str, truth_set: &str) -> Option<&LagSummary> {
        self.summary
            .iter()
            .find(|s| s.method == method && s.truth_set == truth_set)
    }
}

pub const LAG_METHODS: [&str; 3] = ["a_e", "ig", "grad_x_input"];

fn ig_completeness(model: &GatedModel, x: &Tensor, ig: &Tensor) -> Result<f64> {
    let opts = ForwardOptions::default();
    let c = model.config().channels;
    let l = model.config().input_len;
    let fx = circuits::summed_forecast(model, x, &opts)?;
    let f0 = circuits::summed_forecast(model, &Tensor::zeros(x.shape()), &opts)?;
    let (mut err, mut scale) = (0.0, 0.0);
    for (w, (a, b)) in fx.iter().zip(&f0).enumerate() {
        let total: f64 = ig.data()[w * c * l..(w + 1) * c * l].iter().sum();
        err += (total - (a - b)).abs();
        scale += (a - b).abs();
    }
    Ok(err / scale.max(f64::MIN_POSITIVE))
}

/// Attribution methods scored against the known lags of the lag regime.
pub fn lag_recovery(cfg: &ExperimentConfig) -> Result<Report<LagResults>> {
    let started = Instant::now();
    let mut cfg = cfg.clone();
    cfg.data.regime = RegimeKind::LagRecovery;
    let cfg = prepare(&cfg, &DEFAULT_SEEDS, &[])?;
    require_synthetic(&cfg, "lag-recovery")?;
    let l = cfg.model.input_len;
    let truth = circuits::lag_positions(l, &LAG_RECOVERY_LAGS, 0);
    let truth_dilated = circuits::lag_positions(l, &LAG_RECOVERY_LAGS, 1);
    let cc = &cfg.circuits;
    let ks: Vec<usize> = LAG_KS.into_iter().filter(|&k| k <= l).collect();
    let random =
        circuits::random_lag_metrics(l, &truth, &ks, cc.random_baseline_draws, cfg.seeds[0])?;
    let random_dilated = circuits::random_lag_metrics(
        l,
        &truth_dilated,
        &ks,
        cc.random_baseline_draws,
        cfg.seeds[0],
    )?;
    let opts = ForwardOptions::default();
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        let source = load_source(&cfg, RegimeKind::LagRecovery, seed)?;
        let run = train_run(&cfg, &source, cfg.model.core, seed, cfg.train.lambda_g, "")?;
        let (model, test) = (&run.model, &run.windows.test);
        let sample = circuits::attribution_sample(test, cc.attribution_windows, seed)?;
        let ig = circuits::integrated_gradients(model, &sample.x, None, cc.ig_steps, &opts)?;
        let gxi = circuits::grad_x_input(model, &sample.x, None, &opts)?;
        let mut maps: BTreeMap<String, Tensor> = BTreeMap::new();
        maps.insert(
            "a_e".into(),
            circuits::aggregate_attribution(model, &sample, &opts)?,
        );
        maps.insert("ig".into(), circuits::mean_abs_by_channel(&ig, 1)?);
        maps.insert(
            "grad_x_input".into(),
            circuits::mean_abs_by_channel(&gxi, 1)?,
        );
        let mut exact = BTreeMap::new();
        let mut dilated = BTreeMap::new();
        let mut masking = BTreeMap::new();
        let mut scores = BTreeMap::new();
        for (name, map) in &maps {
            exact.insert(
                name.clone(),
                circuits::lag_recovery_metrics(map.data(), &truth, &ks)?,
            );
            dilated.insert(
                name.clone(),
                circuits::lag_recovery_metrics(map.data(), &truth_dilated, &ks)?,
            );
            if name != "grad_x_input" {
                masking.insert(
                    name.clone(),
                    circuits::input_masking_test(
                        model,
                        map,
                        &cc.mask_ks,
                        test,
                        cc.mask_draws,
                        seed,
                    )?,
                );
            }
            scores.insert(name.clone(), map.data().to_vec());
        }
        seeds.push(LagSeed {
            seed,
            ig_completeness_error: ig_completeness(model, &sample.x, &ig)?,
            run: run.metrics,
            exact,
            dilated,
            masking,
            scores,
        });
    }
    let mut summaries = Vec::new();
    for method in LAG_METHODS {
        for truth_set in ["exact", "dilated"] {
            let per: Vec<&LagMetrics> = seeds
                .iter()
                .map(|s| {
                    if truth_set == "exact" {
                        &s.exact[method]
                    } else {
                        &s.dilated[method]
                    }
                })
                .collect();
            let auprcs: Vec<f64> = per.iter().map(|m| m.auprc).collect();
            let recall = ks
                .iter()
                .enumerate()
                .map(|(i, &k)| (k, summary_of_recall(&per, i)))
                .collect();
            summaries.push(LagSummary {
                method: method.into(),
                truth_set: truth_set.into(),
                auprc: summary(&auprcs),
                best_auprc: auprcs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                recall,
            });
        }
    }
    let mut stability = Vec::new();
    for i in 0..seeds.len() {
        for j in i + 1..seeds.len() {
            if let Ok(r) = circuits::pearson(&seeds[i].scores["ig"], &seeds[j].scores["ig"]) {
                stability.push(r);
            }
        }
    }
    let ig_completeness_max_error = seeds
        .iter()
        .map(|s| s.ig_completeness_error)
        .fold(0.0, f64::max);
    write_lag_csvs(&cfg, &seeds, &summaries, &random, &random_dilated)?;
    let report = Report::new(
        "lag-recovery",
        &cfg,
        LagResults {
            truth,
            truth_dilated,
            random,
            random_dilated,
            seeds,
            summary: summaries,
            ig_completeness_max_error,
            ig_seed_stability: Summary::of(&stability),
        },
        started,
    );
    report.write(&cfg.out_dir)?;
    Ok(report)
}

fn summary_of_recall(per: &[&LagMetrics], i: usize) -> Summary {
    summary(&per.iter().map(|m| m.recall[i].1).collect::<Vec<_>>())
}

fn write_lag_csvs(
    cfg: &ExperimentConfig,
    seeds: &[LagSeed],
    summary: &[LagSummary],
    random: &LagMetrics,
    random_dilated: &LagMetrics,
) -> Result<()> {
    let mut header = vec!["seed", "method", "truth_set", "auprc"];
    let recall_cols: Vec<String> = random
        .recall
        .iter()
        .map(|(k, _)| format!("recall_at_{k}"))
        .collect();
    header.extend(recall_cols.iter().map(String::as_str));
    let line = |seed: String, method: &str, set: &str, m: &LagMetrics| {
        let mut row = vec![
            seed,
            method.to_string(),
            set.to_string(),
            m.auprc.to_string(),
        ];
        row.extend(m.recall.iter().map(|(_, r)| r.to_string()));
        row
    };
    let mut rows = Vec::new();
    for s in seeds {
        for method in LAG_METHODS {
            rows.push(line(s.seed.to_string(), method, "exact", &s.exact[method]));
            rows.push(line(
                s.seed.to_string(),
                method,
                "dilated",
                &s.dilated[method],
            ));
        }
    }
    rows.push(line("all".into(), "random", "exact", random));
    rows.push(line("all".into(), "random", "dilated", random_dilated));
    for s in summary {
        let mut row = vec![
            "mean".to_string(),
            s.method.clone(),
            s.truth_set.clone(),
            s.auprc.mean.to_string(),
        ];
        row.extend(s.recall.iter().map(|(_, r)| r.mean.to_string()));
        rows.push(row);
    }
    write_csv(&cfg.out_dir.join("lag_recovery.csv"), &header, &rows)?;
    let l = cfg.model.input_len;
    for s in seeds {
        let rows: Vec<Vec<String>> = (0..l)
            .map(|p| {
                let mut row = vec![p.to_string(), (l - p).to_string()];
                row.extend(LAG_METHODS.iter().map(|m| s.scores[*m][p].to_string()));
                row
            })
            .collect();
        let mut header = vec!["position", "lag"];
        header.extend(LAG_METHODS);
        write_csv(
            &cfg.out_dir.join(format!("lag_scores_seed{}.csv", s.seed)),
            &header,
            &rows,
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopInterventions {
    pub ranking_method: String,
    pub edges: Vec<KanEdge>,
    pub deltas: BTreeMap<InterventionType, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeletionResults {
    pub model_file: String,
    pub data: String,
    pub first_layer_edges: usize,
    /// Requested `k` values larger than the edge pool.
    pub skipped_ks: Vec<usize>,
    pub curves: Vec<DeletionCurve>,
    pub sanity: Vec<SanityResult>,
    pub eta: EtaReport,
    pub top_interventions: TopInterventions,
}

impl DeletionResults {
    pub fn curve(&self, method: RankMethod) -> Option<&DeletionCurve> {
        self.curves
            .iter()
            .find(|c| c.ranking_method == method.as_str())
    }
}

/// Deletion curves, sanity randomization, captured fractions and the
/// spline-versus-zero comparison for a saved model.
pub fn deletion(cfg: &ExperimentConfig, model_path: &Path) -> Result<Report<DeletionResults>> {
    let started = Instant::now();
    let cfg = prepare(cfg, &DEFAULT_SEEDS[..1], &[])?;
    let model = load_model(model_path)?;
    let (source, windows) = model_windows(&cfg, &model)?;
    let cc = &cfg.circuits;
    let n_edges = circuits::kan_edges(&model, true).len();
    if n_edges == 0 {
        return Err(CliError::Config(format!(
            "{} has no KAN edges",
            model.config().core
        )));
    }
    let (ks, skipped_ks): (Vec<usize>, Vec<usize>) = cc.ks.iter().partition(|&&k| k <= n_edges);
    let dcfg = DeletionConfig {
        ks,
        draws: cc.draws,
        seed: cfg.seeds[0],
        bootstrap: cc.bootstrap,
    };
    let rank_data =
        circuits::attribution_sample(&windows.val, cc.attribution_windows, cfg.seeds[0])?;
    let test = &windows.test;
    let ranking = circuits::rank_edges(&model, RankMethod::Range, None)?;
    let mut curves = vec![circuits::deletion_curve(&model, &ranking, test, &dcfg)?];
    curves[0].ranking_method = RankMethod::Range.as_str().to_string();
    curves.push(circuits::ranked_deletion_curve(
        &model,
        RankMethod::Importance,
        &rank_data,
        test,
        &dcfg,
    )?);
    let sanity =
        circuits::sanity_randomization(&model, RankMethod::Range, &rank_data, test, &dcfg)?;
    let mut eta_ks: Vec<usize> = cc
        .ks
        .iter()
        .chain(&cc.eta_ks)
        .copied()
        .filter(|&k| k <= n_edges)
        .collect();
    eta_ks.sort_unstable();
    eta_ks.dedup();
    let eta = circuits::eta_fraction(&model, &ranking, test, &eta_ks)?;
    let top: Vec<KanEdge> = ranking
        .iter()
        .take(TOP_INTERVENTION_EDGES)
        .map(|s| s.edge)
        .collect();
    let means = EdgeMeans::fit(&model, &windows.val)?;
    let mut deltas = BTreeMap::new();
    for kind in InterventionType::ALL {
        deltas.insert(
            kind,
            circuits::delta_edge(&model, &top, kind, test, Some(&means))?,
        );
    }
    for c in &curves {
        c.write_csv(
            cfg.out_dir
                .join(format!("deletion_{}.csv", c.ranking_method)),
        )?;
    }
    for s in &sanity {
        s.curve.write_csv(
            cfg.out_dir
                .join(format!("sanity_{}.csv", s.condition.as_str())),
        )?;
    }
    let eta_rows: Vec<Vec<String>> = eta
        .rows
        .iter()
        .map(|r| {
            vec![
                r.k.to_string(),
                r.delta_top.to_string(),
                fmt_opt(r.eta),
                r.rel_deg.to_string(),
            ]
        })
        .collect();
    write_csv(
        &cfg.out_dir.join("eta.csv"),
        &["k", "delta_top", "eta", "rel_deg"],
        &eta_rows,
    )?;
    let report = Report::new(
        "deletion",
        &cfg,
        DeletionResults {
            model_file: model_path.display().to_string(),
            data: source.label,
            first_layer_edges: n_edges,
            skipped_ks,
            curves,
            sanity,
            eta,
            top_interventions: TopInterventions {
                ranking_method: RankMethod::Range.as_str().to_string(),
                edges: top,
                deltas,
            },
        },
        started,
    );
    report.write(&cfg.out_dir)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub lambda_g: f64,
    pub u_kan: Summary,
    pub r_kan: Summary,
    pub mse: Summary,
    pub delta_all_kan: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRegime {
    pub regime: RegimeKind,
    pub noise_std: f64,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResults {
    pub regimes: Vec<SweepRegime>,
}

/// Gate utilization and KAN contribution over a grid of gate penalties.
pub fn gate_sweep(cfg: &ExperimentConfig) -> Result<Report<SweepResults>> {
    let started = Instant::now();
    let cfg = prepare(cfg, &DEFAULT_SEEDS[..1], &SWEEP_REGIMES)?;
    require_synthetic(&cfg, "gate-sweep")?;
    if !cfg.model.core.is_gated() {
        return Err(CliError::Config(format!(
            "gate-sweep needs a gated core, not {}",
            cfg.model.core
        )));
    }
    let mut regimes = Vec::new();
    for &regime in &cfg.regimes {
        let mut rows = Vec::new();
        let mut noise_std = 0.0;
        for &lambda_g in &cfg.circuits.lambdas {
            for &seed in &cfg.seeds {
                let source = load_source(&cfg, regime, seed)?;
                noise_std = source.noise_std.unwrap_or_default();
                let run = train_run(
                    &cfg,
                    &source,
                    cfg.model.core,
                    seed,
                    lambda_g,
                    &format!("_lam{lambda_g}"),
                )?;
                let test = &run.windows.test;
                rows.push(SweepRow {
                    lambda_g,
                    seed,
                    u_kan: run.metrics.u_kan.unwrap_or(f64::NAN),
                    r_kan: run.metrics.r_kan,
                    mse: run.metrics.test_mse,
                    delta_all_kan: circuits::delta_all_kan(&run.model, test)?,
                });
            }
        }
        let summary = cfg
            .circuits
            .lambdas
            .iter()
            .map(|&lambda_g| {
                let sel: Vec<&SweepRow> = rows.iter().filter(|r| r.lambda_g == lambda_g).collect();
                let col = |f: fn(&SweepRow) -> f64| {
                    summary(&sel.iter().map(|r| f(r)).collect::<Vec<_>>())
                };
                SweepSummary {
                    lambda_g,
                    u_kan: col(|r| r.u_kan),
                    r_kan: col(|r| r.r_kan),
                    mse: col(|r| r.mse),
                    delta_all_kan: col(|r| r.delta_all_kan),
                }
            })
            .collect();
        regimes.push(SweepRegime {
            regime,
            noise_std,
            rows,
            summary,
        });
    }
    let csv_rows: Vec<Vec<String>> = regimes
        .iter()
        .flat_map(|g| {
            g.rows.iter().map(move |r| {
                vec![
                    g.regime.to_string(),
                    r.lambda_g.to_string(),
                    r.seed.to_string(),
                    r.u_kan.to_string(),
                    r.r_kan.to_string(),
                    r.mse.to_string(),
                    r.delta_all_kan.to_string(),
                ]
            })
        })
        .collect();
    write_csv(
        &cfg.out_dir.join("gate_sweep.csv"),
        &[
            "regime",
            "lambda_g",
            "seed",
            "u_kan",
            "r_kan",
            "mse",
            "delta_all_kan",
        ],
        &csv_rows,
    )?;
    let report = Report::new("gate-sweep", &cfg, SweepResults { regimes }, started);
    report.write(&cfg.out_dir)?;
    Ok(report)
}
