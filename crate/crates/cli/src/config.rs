//! Experiment configuration: TOML file, command-line overrides, defaults.

use std::path::{Path, PathBuf};

use gatedkan::circuits::{
    ATTRIBUTION_SAMPLE, BOOTSTRAP_RESAMPLES, DEFAULT_DRAWS, DEFAULT_KS, IG_STEPS,
};
use gatedkan::datagen::{DataError, RegimeKind, RegimeSpec};
use gatedkan::forecaster::ModelConfig;
use gatedkan::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Run(#[from] gatedkan::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(gatedkan::Error::Config(_)) => 2,
            _ => 1,
        }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Run(e.into())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Where the series comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub regime: RegimeKind,
    /// A CSV file replaces the synthetic regime when set.
    pub csv: Option<PathBuf>,
    pub length: usize,
    /// Defaults to the regime's own noise level.
    pub noise_std: Option<f64>,
    pub switch_period: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let spec = RegimeSpec::new(RegimeKind::RegimeSwitching, 0);
        Self {
            regime: spec.kind,
            csv: None,
            length: spec.length,
            noise_std: None,
            switch_period: spec.switch_period,
        }
    }
}

impl DataConfig {
    /// Generator settings of `kind` under this configuration.
    pub fn spec(&self, kind: RegimeKind, seed: u64) -> RegimeSpec {
        RegimeSpec {
            kind,
            length: self.length,
            noise_std: self.noise_std.unwrap_or(kind.default_noise()),
            switch_period: self.switch_period,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CircuitConfig {
    pub ks: Vec<usize>,
    pub draws: usize,
    pub lambdas: Vec<f64>,
    pub attribution_windows: usize,
    pub ig_steps: usize,
    pub bootstrap: usize,
    /// Draws of the random attribution baseline.
    pub random_baseline_draws: usize,
    /// Extra `k` values for the captured-fraction table.
    pub eta_ks: Vec<usize>,
    /// Position counts for the input-masking test.
    pub mask_ks: Vec<usize>,
    pub mask_draws: usize,
}

impl Default for CircuitConfig {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            draws: DEFAULT_DRAWS,
            lambdas: vec![0.0, 0.01, 0.05],
            attribution_windows: ATTRIBUTION_SAMPLE,
            ig_steps: IG_STEPS,
            bootstrap: BOOTSTRAP_RESAMPLES,
            random_baseline_draws: 1000,
            eta_ks: vec![50, 100, 250, 500, 1000, 2500, 5000],
            mask_ks: vec![5, 10, 20],
            mask_draws: 20,
        }
    }
}

/// Everything a command needs; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Empty means the command's own default.
    pub seeds: Vec<u64>,
    /// Regimes of multi-regime commands; empty means the command's default.
    pub regimes: Vec<RegimeKind>,
    pub out_dir: PathBuf,
    pub circuits: CircuitConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seeds: Vec::new(),
            regimes: Vec::new(),
            out_dir: PathBuf::from("out"),
            circuits: CircuitConfig::default(),
        }
    }
}

/// Values given on the command line; they win over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seeds: Option<Vec<u64>>,
    pub out_dir: Option<PathBuf>,
    pub regime: Option<RegimeKind>,
    pub csv: Option<PathBuf>,
    pub lambda_g: Option<Vec<f64>>,
    pub ks: Option<Vec<usize>>,
    pub draws: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(CliError::io(format!("reading {}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Defaults, then the file, then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = &o.seeds {
            self.seeds = s.clone();
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(r) = o.regime {
            self.data.regime = r;
            self.regimes = vec![r];
        }
        if let Some(c) = &o.csv {
            self.data.csv = Some(c.clone());
        }
        if let Some(l) = &o.lambda_g {
            if let [single] = l.as_slice() {
                self.train.lambda_g = *single;
            }
            self.circuits.lambdas = l.clone();
        }
        if let Some(k) = &o.ks {
            self.circuits.ks = k.clone();
        }
        if let Some(d) = o.draws {
            self.circuits.draws = d;
        }
    }

    /// Fill in command defaults so the stored config fully determines a rerun.
    pub fn with_defaults(mut self, seeds: &[u64], regimes: &[RegimeKind]) -> Self {
        if self.seeds.is_empty() {
            self.seeds = seeds.to_vec();
        }
        if self.regimes.is_empty() {
            self.regimes = regimes.to_vec();
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        self.model
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.data
            .spec(self.data.regime, 0)
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.circuits.ig_steps == 0 {
            return bad("circuits.ig_steps must be at least 1".into());
        }
        if self.circuits.attribution_windows == 0 {
            return bad("circuits.attribution_windows must be at least 1".into());
        }
        if self.circuits.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return bad("gate penalties must be non-negative".into());
        }
        Ok(())
    }
}

/// Default seeds of the multi-seed commands.
pub const DEFAULT_SEEDS: [u64; 3] = [42, 123, 456];

/// The four forecasting regimes, from least to most nonlinear.
pub const TABLE_REGIMES: [RegimeKind; 4] = [
    RegimeKind::LinearSine,
    RegimeKind::Multifreq,
    RegimeKind::ThresholdAr,
    RegimeKind::RegimeSwitching,
];

/// Default regimes of the gate sweep.
pub const SWEEP_REGIMES: [RegimeKind; 3] = [
    RegimeKind::LinearSine,
    RegimeKind::ThresholdAr,
    RegimeKind::RegimeSwitching,
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(
            ExperimentConfig::from_toml("").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn unknown_keys_name_the_key() {
        let e = ExperimentConfig::from_toml("[train]\nlearning_rate = 0.1\n").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("learning_rate"), "{e}");
        let e = ExperimentConfig::from_toml("colour = 1\n").unwrap_err();
        assert!(e.to_string().contains("colour"));
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let mut cfg = ExperimentConfig::from_toml(
            "seeds = [1, 2]\nout_dir = \"a\"\n[train]\nepochs = 7\nlambda_g = 0.2\n[data]\nregime = \"multifreq\"\n",
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.patience, TrainConfig::default().patience);
        cfg.apply(&Overrides {
            seeds: Some(vec![9]),
            lambda_g: Some(vec![0.5]),
            ..Overrides::default()
        });
        assert_eq!(cfg.seeds, vec![9]);
        assert_eq!(cfg.out_dir, PathBuf::from("a"));
        assert_eq!(cfg.train.lambda_g, 0.5);
        assert_eq!(cfg.data.regime, RegimeKind::Multifreq);
        cfg.apply(&Overrides {
            lambda_g: Some(vec![0.0, 0.1]),
            regime: Some(RegimeKind::LinearSine),
            ..Overrides::default()
        });
        assert_eq!(cfg.train.lambda_g, 0.5);
        assert_eq!(cfg.circuits.lambdas, vec![0.0, 0.1]);
        assert_eq!(cfg.regimes, vec![RegimeKind::LinearSine]);
    }

    #[test]
    fn validation_rejects_bad_values() {
        let cfg = ExperimentConfig::default();
        assert!(cfg.validate().is_err());
        let cfg = cfg.with_defaults(&DEFAULT_SEEDS, &[]);
        cfg.validate().unwrap();
        let mut dup = cfg.clone();
        dup.seeds = vec![1, 1];
        assert_eq!(dup.validate().unwrap_err().exit_code(), 2);
        let mut bad = cfg.clone();
        bad.model.stride = 7;
        assert!(matches!(bad.validate(), Err(CliError::Config(_))));
        let mut bad = cfg;
        bad.circuits.lambdas = vec![-1.0];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn noise_defaults_follow_the_regime() {
        let d = DataConfig::default();
        assert_eq!(d.spec(RegimeKind::ThresholdAr, 1).noise_std, 1.0);
        let d = DataConfig {
            noise_std: Some(0.3),
            ..DataConfig::default()
        };
        assert_eq!(d.spec(RegimeKind::LinearSine, 1).noise_std, 0.3);
    }
}
