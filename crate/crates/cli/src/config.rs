//! Flat JSON run configs, with `--set key=value` and common-flag overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use chanfluence::anomaly::{NormalizationChoice, ScoreMethod, ThresholdSplit};
use chanfluence::data::AnomalyKind;
use chanfluence::models::{Activation, Architecture, GradientSelector, ModelSpec, TrainConfig};
use chanfluence::pruning::Strategy;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// A bad config file, override or field value. Exits with code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Values given on the command line, applied over the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub set: Vec<String>,
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Reads the config object, applies overrides and deserializes, naming the
/// offending field on failure.
pub fn load<C>(path: Option<&Path>, overrides: &Overrides) -> anyhow::Result<C>
where
    C: DeserializeOwned + Validate,
{
    let mut map = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| config_error(format!("cannot read config {}: {e}", p.display())))?;
            match serde_json::from_str(&text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(config_error(format!("config {} must be a JSON object", p.display()))),
                Err(e) => return Err(config_error(format!("config {}: {e}", p.display()))),
            }
        }
        None => Map::new(),
    };
    for item in &overrides.set {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| config_error(format!("--set expects key=value, got `{item}`")))?;
        map.insert(key.trim().to_string(), parse_value(raw.trim()));
    }
    if let Some(seed) = overrides.seed {
        map.insert("seed".into(), seed.into());
    }
    if let Some(out) = &overrides.out {
        map.insert("out".into(), out.display().to_string().into());
    }
    if let Some(threads) = overrides.threads {
        map.insert("threads".into(), threads.into());
    }
    let config: C = serde_path_to_error::deserialize(Value::Object(map)).map_err(|e| {
        let field = e.path().to_string();
        config_error(format!("invalid config field `{field}`: {}", e.inner()))
    })?;
    config
        .validate()
        .map_err(|(field, msg)| config_error(format!("invalid config field `{field}`: {msg}")))?;
    Ok(config)
}

pub type FieldError = (&'static str, String);

pub trait Validate {
    fn validate(&self) -> Result<(), FieldError>;
}

fn positive(field: &'static str, v: usize) -> Result<(), FieldError> {
    if v == 0 {
        return Err((field, "must be at least 1".into()));
    }
    Ok(())
}

fn positive_eta(eta: Option<f64>) -> Result<(), FieldError> {
    match eta {
        Some(e) if !(e.is_finite() && e > 0.0) => Err(("eta", "must be finite and positive".into())),
        _ => Ok(()),
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_stride() -> usize {
    1
}

fn default_epochs() -> usize {
    TrainConfig::default().epochs
}

fn default_learning_rate() -> f64 {
    TrainConfig::default().learning_rate
}

fn default_batch_size() -> usize {
    TrainConfig::default().batch_size
}

fn default_synthetic() -> String {
    "synthetic".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Anomaly,
    Pruning,
}

/// Suite fields left unset take the suite's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub suite: Suite,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub clusters: Option<usize>,
    #[serde(default)]
    pub channels_per_cluster: Option<usize>,
    #[serde(default)]
    pub base_frequencies: Option<Vec<f64>>,
    #[serde(default)]
    pub phase_jitter: Option<f64>,
    #[serde(default)]
    pub noise_std: Option<f64>,
    #[serde(default)]
    pub train_len: Option<usize>,
    #[serde(default)]
    pub val_len: Option<usize>,
    #[serde(default)]
    pub test_len: Option<usize>,
    #[serde(default)]
    pub corrupted_channels: Option<usize>,
    #[serde(default)]
    pub anomaly_fraction: Option<f64>,
    #[serde(default)]
    pub interval_len: Option<usize>,
    #[serde(default)]
    pub anomaly_kind: Option<AnomalyKind>,
    #[serde(default)]
    pub magnitude: Option<f64>,
}

impl Validate for SynthConfig {
    fn validate(&self) -> Result<(), FieldError> {
        if self.suite == Suite::Pruning {
            let anomaly_only = [
                ("corrupted_channels", self.corrupted_channels.is_some()),
                ("anomaly_fraction", self.anomaly_fraction.is_some()),
                ("interval_len", self.interval_len.is_some()),
                ("anomaly_kind", self.anomaly_kind.is_some()),
                ("magnitude", self.magnitude.is_some()),
            ];
            if let Some((field, _)) = anomaly_only.iter().find(|(_, set)| *set) {
                return Err((field, "only applies to the anomaly suite".into()));
            }
        }
        if let Some(s) = self.noise_std {
            if !(s.is_finite() && s >= 0.0) {
                return Err(("noise_std", "must be finite and non-negative".into()));
            }
        }
        Ok(())
    }
}

/// Model and optimizer fields shared by the training commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFields {
    pub architecture: Architecture,
    pub window: usize,
    pub horizon: Option<usize>,
    pub hidden: usize,
    pub activation: Activation,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl ModelFields {
    pub fn spec(&self, channels: usize) -> ModelSpec {
        ModelSpec {
            architecture: self.architecture,
            window: self.window,
            horizon: self.horizon,
            channels,
            hidden: self.hidden,
            activation: self.activation,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed,
        }
    }

    fn validate(&self) -> Result<(), FieldError> {
        positive("window", self.window)?;
        if let Some(h) = self.horizon {
            positive("horizon", h)?;
        }
        if self.architecture != Architecture::LinearCi {
            positive("hidden", self.hidden)?;
        }
        positive("epochs", self.epochs)?;
        positive("batch_size", self.batch_size)?;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(("learning_rate", "must be finite and positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCommandConfig {
    /// Directory holding `train.csv`.
    pub data: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default = "default_arch")]
    pub architecture: Architecture,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_arch() -> Architecture {
    Architecture::MlpCi
}

fn default_window() -> usize {
    10
}

fn default_hidden() -> usize {
    8
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl TrainCommandConfig {
    pub fn model(&self) -> ModelFields {
        ModelFields {
            architecture: self.architecture,
            window: self.window,
            horizon: self.horizon,
            hidden: self.hidden,
            activation: self.activation,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
        }
    }
}

impl Validate for TrainCommandConfig {
    fn validate(&self) -> Result<(), FieldError> {
        self.model().validate()?;
        positive("stride", self.stride)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfluenceMode {
    Matrix,
    SelfInfluence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfluenceCommandConfig {
    pub checkpoint: PathBuf,
    pub series: PathBuf,
    pub mode: InfluenceMode,
    /// Index of the source window for `matrix`.
    #[serde(default)]
    pub src_window: usize,
    /// Index of the destination window for `matrix`; defaults to `src_window`.
    #[serde(default)]
    pub dst_window: Option<usize>,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub selector: GradientSelector,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub threads: Option<usize>,
}

impl Validate for InfluenceCommandConfig {
    fn validate(&self) -> Result<(), FieldError> {
        positive("stride", self.stride)?;
        positive_eta(self.eta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectCommandConfig {
    /// `"synthetic"` for the seeded anomaly suite, else a directory with
    /// `train.csv`, `val.csv`, `val_labels.csv`, `test.csv`, `test_labels.csv`.
    #[serde(default = "default_synthetic")]
    pub data: String,
    /// Skip training and score with this model.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default = "default_arch")]
    pub architecture: Architecture,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_method")]
    pub method: ScoreMethod,
    #[serde(default)]
    pub normalization: NormalizationChoice,
    #[serde(default)]
    pub threshold_split: ThresholdSplit,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub selector: GradientSelector,
    #[serde(default)]
    pub per_channel_normalization: bool,
}

fn default_method() -> ScoreMethod {
    ScoreMethod::CifSelfInfluence
}

impl DetectCommandConfig {
    pub fn model(&self) -> ModelFields {
        ModelFields {
            architecture: self.architecture,
            window: self.window,
            horizon: None,
            hidden: self.hidden,
            activation: self.activation,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
        }
    }
}

impl Validate for DetectCommandConfig {
    fn validate(&self) -> Result<(), FieldError> {
        self.model().validate()?;
        positive("stride", self.stride)?;
        positive_eta(self.eta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneCommandConfig {
    /// `"synthetic"` for the seeded pruning suite, else a directory with
    /// `train.csv`, `val.csv` and `test.csv`.
    #[serde(default = "default_synthetic")]
    pub data: String,
    /// First seed; runs use `seed .. seed + repeats`. Synthetic data is
    /// regenerated per seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_repeats")]
    pub repeats: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default = "default_prune_arch")]
    pub architecture: Architecture,
    #[serde(default = "default_prune_window")]
    pub window: usize,
    #[serde(default = "default_prune_horizon")]
    pub horizon: usize,
    #[serde(default = "default_prune_hidden")]
    pub hidden: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_m")]
    pub m: Vec<usize>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub selector: GradientSelector,
}

fn default_repeats() -> u64 {
    1
}

fn default_prune_arch() -> Architecture {
    Architecture::LinearCi
}

fn default_prune_window() -> usize {
    48
}

fn default_prune_horizon() -> usize {
    12
}

fn default_prune_hidden() -> usize {
    16
}

fn default_m() -> Vec<usize> {
    vec![4, 8]
}

fn default_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

impl PruneCommandConfig {
    pub fn model(&self) -> ModelFields {
        ModelFields {
            architecture: self.architecture,
            window: self.window,
            horizon: Some(self.horizon),
            hidden: self.hidden,
            activation: self.activation,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
        }
    }
}

impl Validate for PruneCommandConfig {
    fn validate(&self) -> Result<(), FieldError> {
        self.model().validate()?;
        positive("stride", self.stride)?;
        positive_eta(self.eta)?;
        if self.repeats == 0 {
            return Err(("repeats", "must be at least 1".into()));
        }
        if self.m.is_empty() || self.m.contains(&0) {
            return Err(("m", "must list subset sizes of at least 1".into()));
        }
        if self.strategies.is_empty() {
            return Err(("strategies", "must list at least one strategy".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn overrides(set: &[&str]) -> Overrides {
        Overrides {
            set: set.iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        }
    }

    #[test]
    fn defaults_and_overrides() {
        let c: DetectCommandConfig = load(None, &overrides(&["method=reconstruction_error", "epochs=7"])).unwrap();
        assert_eq!(c.method, ScoreMethod::ReconstructionError);
        assert_eq!(c.epochs, 7);
        assert_eq!(c.data, "synthetic");
        let o = Overrides {
            seed: Some(9),
            ..Default::default()
        };
        let c: PruneCommandConfig = load(None, &o).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.m, vec![4, 8]);
    }

    #[test]
    fn errors_name_the_field() {
        let err = load::<DetectCommandConfig>(None, &overrides(&["normalization=zscore"])).unwrap_err();
        assert!(err.is::<ConfigError>());
        assert!(err.to_string().contains("`normalization`"), "{err}");
        let err = load::<DetectCommandConfig>(None, &overrides(&["windw=3"])).unwrap_err();
        assert!(err.to_string().contains("windw"), "{err}");
        let err = load::<PruneCommandConfig>(None, &overrides(&["m=[0]"])).unwrap_err();
        assert!(err.to_string().contains("`m`"), "{err}");
        let err = load::<SynthConfig>(None, &overrides(&["suite=pruning", "magnitude=2"])).unwrap_err();
        assert!(err.to_string().contains("`magnitude`"), "{err}");
        let err = load::<DetectCommandConfig>(None, &overrides(&["eta=0"])).unwrap_err();
        assert!(err.to_string().contains("`eta`"), "{err}");
    }

    #[test]
    fn selector_strings() {
        let c: InfluenceCommandConfig = load(
            None,
            &overrides(&["checkpoint=m.json", "series=s.csv", "mode=matrix", "selector=all"]),
        )
        .unwrap();
        assert_eq!(c.selector, GradientSelector::All);
        assert_eq!(c.dst_window, None);
    }
}
