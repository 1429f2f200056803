//! Flat `key = value` run configuration with `#` comments, strict key
//! checking, and the JSON run manifest.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use bnngp::{Error, Result};

/// Parsed configuration. Every lookup records the resolved value (including
/// defaults), so the manifest can snapshot the complete effective config.
pub struct Config {
    values: BTreeMap<String, String>,
    snapshot: RefCell<BTreeMap<String, String>>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Input(format!("config line {}: expected 'key = value', got '{raw}'", lineno + 1))
            })?;
            let key = key.trim().to_owned();
            if key.is_empty() {
                return Err(Error::Input(format!("config line {}: empty key", lineno + 1)));
            }
            if values.insert(key.clone(), value.trim().to_owned()).is_some() {
                return Err(Error::Input(format!("config line {}: duplicate key '{key}'", lineno + 1)));
            }
        }
        Ok(Self { values, snapshot: RefCell::new(BTreeMap::new()) })
    }

    /// Loads a config from a `key = value` file, or re-extracts the config
    /// snapshot from a previously written JSON manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("cannot read config {}: {e}", path.display())))?;
        if text.trim_start().starts_with('{') {
            let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| {
                Error::Input(format!("{}: not a valid manifest: {e}", path.display()))
            })?;
            let mut out = String::new();
            for (k, v) in &manifest.config {
                out.push_str(&format!("{k} = {v}\n"));
            }
            return Self::parse(&out);
        }
        Self::parse(&text)
    }

    pub fn empty() -> Self {
        Self { values: BTreeMap::new(), snapshot: RefCell::new(BTreeMap::new()) }
    }

    /// Overrides one key (used by `--seed`).
    pub fn set(&mut self, key: &str, value: String) {
        self.values.insert(key.to_owned(), value);
    }

    /// Rejects any key that is not in the command's allowed set.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        let allowed: BTreeSet<&str> = allowed.iter().copied().collect();
        for key in self.values.keys() {
            if !allowed.contains(key.as_str()) {
                return Err(Error::Input(format!(
                    "unknown config key '{key}' (allowed: {})",
                    allowed.iter().copied().collect::<Vec<_>>().join(", ")
                )));
            }
        }
        Ok(())
    }

    fn record(&self, key: &str, value: &str) {
        self.snapshot.borrow_mut().insert(key.to_owned(), value.to_owned());
    }

    /// Effective configuration: every key consulted, with its resolved value.
    pub fn effective(&self) -> BTreeMap<String, String> {
        self.snapshot.borrow().clone()
    }

    pub fn has(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        let v = self.values.get(key).cloned().unwrap_or_else(|| default.to_owned());
        self.record(key, &v);
        v
    }

    pub fn require_str(&self, key: &str) -> Result<String> {
        match self.values.get(key) {
            Some(v) => {
                self.record(key, v);
                Ok(v.clone())
            }
            None => Err(Error::Input(format!("missing required config key '{key}'"))),
        }
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.values.get(key) {
            Some(v) => {
                let parsed = v
                    .parse::<f64>()
                    .map_err(|_| Error::Input(format!("config key '{key}': '{v}' is not a number")))?;
                self.record(key, v);
                Ok(parsed)
            }
            None => {
                self.record(key, &format!("{default}"));
                Ok(default)
            }
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.values.get(key) {
            Some(v) => {
                let parsed = v.parse::<u64>().map_err(|_| {
                    Error::Input(format!("config key '{key}': '{v}' is not a nonnegative integer"))
                })?;
                self.record(key, v);
                Ok(parsed)
            }
            None => {
                self.record(key, &format!("{default}"));
                Ok(default)
            }
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.get_u64(key, default as u64)? as usize)
    }

    /// Comma-separated list of positive integers.
    pub fn get_usize_list(&self, key: &str, default: &str) -> Result<Vec<usize>> {
        let raw = self.get_str(key, default);
        raw.split(',')
            .map(|tok| {
                tok.trim().parse::<usize>().map_err(|_| {
                    Error::Input(format!("config key '{key}': '{tok}' is not an integer"))
                })
            })
            .collect()
    }

    pub fn get_f64_list(&self, key: &str, default: &str) -> Result<Vec<f64>> {
        let raw = self.get_str(key, default);
        raw.split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Input(format!("config key '{key}': '{tok}' is not a number")))
            })
            .collect()
    }
}

/// Hyperparameters in the reporting column order
/// `(sigma_b2, sigma_v2, sigma_u2, sigma_a2, alpha, w, sigma_eps2)`.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct ThetaReport {
    pub sigma_b2: f64,
    pub sigma_v2: f64,
    pub sigma_u2: f64,
    pub sigma_a2: f64,
    pub alpha: f64,
    pub w: f64,
    pub sigma_eps2: f64,
}

impl From<bnngp::HyperParams> for ThetaReport {
    fn from(t: bnngp::HyperParams) -> Self {
        Self {
            sigma_b2: t.sigma_b2,
            sigma_v2: t.sigma_v2,
            sigma_u2: t.sigma_u2,
            sigma_a2: t.sigma_a2,
            alpha: t.alpha,
            w: t.w,
            sigma_eps2: t.sigma_eps2,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct MetricsBothScales {
    pub standardized: bnngp::MetricsReport,
    pub original: bnngp::MetricsReport,
    pub sigma_eps2_standardized: f64,
    pub sigma_eps2_original: f64,
    pub sd_y_train: f64,
}

/// One JSON document describing a command run; written on success and on
/// controlled failure.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_init: Option<ThetaReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_hat: Option<ThetaReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_trajectory: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsBothScales>,
    pub wall_clock_seconds: BTreeMap<String, f64>,
    pub artifacts: Vec<String>,
    pub effective_threads: usize,
}

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

impl RunManifest {
    pub fn new(command: &str, config: BTreeMap<String, String>, threads: usize) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            command: command.to_owned(),
            status: "ok".to_owned(),
            error: None,
            config,
            seeds: BTreeMap::new(),
            theta_init: None,
            theta_hat: None,
            loss_trajectory: None,
            metrics: None,
            wall_clock_seconds: BTreeMap::new(),
            artifacts: Vec::new(),
            effective_threads: threads,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("manifest serialization failed: {e}")))?;
        std::fs::write(path, json + "\n")
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
    }
}
