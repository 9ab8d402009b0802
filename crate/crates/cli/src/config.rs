//! Per-subcommand JSON configuration. Every field has a default, so an absent
//! config file or `{}` runs the reference experiment. Relative paths inside a
//! config file are resolved against the file's directory.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use entcal::analysis::Tokenizer;
use entcal::calibrate::CalibrationConfig;
use entcal::truncate::{default_temperature_sweep, TruncationRule};

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Parsed config plus the raw bytes to echo into the output directory.
pub struct Loaded<T> {
    pub config: T,
    pub echo: Vec<u8>,
}

pub trait Config: Serialize + DeserializeOwned + Default {
    fn validate(&self) -> Result<(), String>;
    fn resolve_paths(&mut self, _base: &Path) {}
}

pub fn load<T: Config>(path: Option<&Path>) -> Result<Loaded<T>, ConfigError> {
    let Some(path) = path else {
        let config = T::default();
        config
            .validate()
            .map_err(|e| ConfigError(format!("defaults: {e}")))?;
        let mut echo = serde_json::to_vec_pretty(&config).expect("config serializes");
        echo.push(b'\n');
        return Ok(Loaded { config, echo });
    };
    let echo = std::fs::read(path)
        .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    let mut config: T = serde_json::from_slice(&echo)
        .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    config
        .validate()
        .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    config.resolve_paths(path.parent().unwrap_or(Path::new("")));
    Ok(Loaded { config, echo })
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
}

/// A random true/base pair, or a pair of model files.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstanceConfig {
    pub vocab_size: usize,
    pub horizon: usize,
    /// Dirichlet concentration of every random row.
    pub concentration: f64,
    pub true_model: Option<PathBuf>,
    pub base_model: Option<PathBuf>,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        Self {
            vocab_size: 4,
            horizon: 4,
            concentration: 1.0,
            true_model: None,
            base_model: None,
        }
    }
}

impl InstanceConfig {
    fn validate(&self) -> Result<(), String> {
        if self.true_model.is_some() != self.base_model.is_some() {
            return Err("true_model and base_model must be given together".into());
        }
        if self.vocab_size < 2 || self.horizon < 1 {
            return Err("need vocab_size >= 2 and horizon >= 1".into());
        }
        if !(self.concentration.is_finite() && self.concentration > 0.0) {
            return Err("concentration must be positive and finite".into());
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.true_model);
        resolve(base, &mut self.base_model);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoremConfig {
    pub instance: InstanceConfig,
    /// Number of random instances; ignored when model files are given.
    pub instances: usize,
    pub calibration: CalibrationConfig,
}

impl Default for TheoremConfig {
    fn default() -> Self {
        Self {
            instance: InstanceConfig::default(),
            instances: 20,
            calibration: CalibrationConfig::default(),
        }
    }
}

impl Config for TheoremConfig {
    fn validate(&self) -> Result<(), String> {
        self.instance.validate()?;
        if self.instances == 0 {
            return Err("instances must be at least 1".into());
        }
        self.calibration.validate().map_err(|e| e.to_string())
    }

    fn resolve_paths(&mut self, base: &Path) {
        self.instance.resolve_paths(base);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    pub instance: InstanceConfig,
    pub calibration: CalibrationConfig,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            instance: InstanceConfig {
                vocab_size: 3,
                horizon: 3,
                ..InstanceConfig::default()
            },
            calibration: CalibrationConfig::default(),
        }
    }
}

impl Config for DemoConfig {
    fn validate(&self) -> Result<(), String> {
        self.instance.validate()?;
        self.calibration.validate().map_err(|e| e.to_string())
    }

    fn resolve_paths(&mut self, base: &Path) {
        self.instance.resolve_paths(base);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TradeoffConfig {
    pub instance: InstanceConfig,
    pub rules: Vec<TruncationRule>,
    /// Exponential smoothing factor for the entropy-over-time report.
    pub smoothing: f64,
}

impl Default for TradeoffConfig {
    fn default() -> Self {
        Self {
            instance: InstanceConfig::default(),
            rules: default_temperature_sweep(),
            smoothing: 0.2,
        }
    }
}

impl Config for TradeoffConfig {
    fn validate(&self) -> Result<(), String> {
        self.instance.validate()?;
        if self.rules.is_empty() {
            return Err("rules must not be empty".into());
        }
        if !(self.smoothing > 0.0 && self.smoothing <= 1.0) {
            return Err("smoothing must lie in (0, 1]".into());
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        self.instance.resolve_paths(base);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UrnConfig {
    pub exponents: Vec<f64>,
    pub vocab: usize,
    pub grid_start: u64,
    /// Defaults to `vocab / 3`.
    pub grid_end: Option<u64>,
    pub per_decade: usize,
    pub trials: usize,
}

impl Default for UrnConfig {
    fn default() -> Self {
        Self {
            exponents: vec![1.0, 1.25, 1.5],
            vocab: 100_000,
            grid_start: 100,
            grid_end: None,
            per_decade: 20,
            trials: 100,
        }
    }
}

impl UrnConfig {
    pub fn grid_end(&self) -> u64 {
        self.grid_end.unwrap_or(self.vocab as u64 / 3)
    }
}

impl Config for UrnConfig {
    fn validate(&self) -> Result<(), String> {
        if self.exponents.is_empty() || self.exponents.iter().any(|a| !(*a > 0.0 && a.is_finite()))
        {
            return Err("exponents must be a non-empty list of positive numbers".into());
        }
        if self.vocab < 3 || self.trials < 2 || self.per_decade == 0 || self.grid_start == 0 {
            return Err("need vocab >= 3, trials >= 2, per_decade >= 1 and grid_start >= 1".into());
        }
        if self.grid_end() < self.grid_start {
            return Err("grid_end is below grid_start".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DerailSettings {
    pub base_entropy: f64,
    pub entropy_bump: f64,
    pub derail_prob: f64,
    pub length: usize,
    pub trials: u64,
}

impl Default for DerailSettings {
    fn default() -> Self {
        Self {
            base_entropy: 1.0,
            entropy_bump: 2.0,
            derail_prob: 1e-3,
            length: 100,
            trials: 1_000_000,
        }
    }
}

impl DerailSettings {
    pub fn model(&self) -> entcal::powerlaw::DerailConfig {
        entcal::powerlaw::DerailConfig {
            base_entropy: self.base_entropy,
            entropy_bump: self.entropy_bump,
            derail_prob: self.derail_prob,
            length: self.length,
        }
    }
}

impl Config for DerailSettings {
    fn validate(&self) -> Result<(), String> {
        if self.trials < 2 {
            return Err("trials must be at least 2".into());
        }
        self.model().validate().map_err(|e| e.to_string())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZipfConfig {
    /// Text corpus to count. A synthetic power-law corpus is drawn when absent.
    pub corpus: Option<PathBuf>,
    pub tokenizer: Tokenizer,
    pub synthetic_exponent: f64,
    pub synthetic_vocab: usize,
    pub synthetic_tokens: u64,
    /// Also write the synthetic corpus to `corpus.txt`.
    pub save_corpus: bool,
    pub top_n: usize,
}

impl Default for ZipfConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            tokenizer: Tokenizer::default(),
            synthetic_exponent: 1.1,
            synthetic_vocab: 100_000,
            synthetic_tokens: 10_000_000,
            save_corpus: false,
            top_n: 5000,
        }
    }
}

impl Config for ZipfConfig {
    fn validate(&self) -> Result<(), String> {
        if self.top_n < 3 {
            return Err("top_n must be at least 3".into());
        }
        if self.corpus.is_none() && (self.synthetic_vocab == 0 || self.synthetic_tokens == 0) {
            return Err("synthetic corpus needs a positive vocabulary and token count".into());
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.corpus);
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingFitConfig {
    /// CSV with a header row and `x,y` in the first two columns.
    pub input: Option<PathBuf>,
    /// Inline `[x, y]` pairs, appended after any rows read from `input`.
    pub points: Vec<[f64; 2]>,
    /// When set, the fitted slope is compared with the slope this Zipf
    /// exponent predicts.
    pub zipf_exponent: Option<f64>,
}

impl Config for ScalingFitConfig {
    fn validate(&self) -> Result<(), String> {
        if self.input.is_none() && self.points.len() < 2 {
            return Err("give an input file or at least two points".into());
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.input);
    }
}
