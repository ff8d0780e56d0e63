//! Experiment configuration: TOML files plus dot-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::ChannelConfig;
use crate::error::{CsiError, Result};
use crate::networks::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    /// Epochs without validation improvement before the rate is cut.
    pub plateau_patience: usize,
    pub lr_factor: f64,
    /// Per-sample uplink SNR during training is drawn uniformly from this range.
    pub snr_u_range_db: [f64; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr_initial: 1e-3,
            plateau_patience: 20,
            lr_factor: 0.5,
            snr_u_range_db: [-10.0, 10.0],
        }
    }
}

/// Standalone training of the convolutional CE nets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub snr_u_range_db: [f64; 2],
}

impl Default for CeTrainConfig {
    fn default() -> Self {
        CeTrainConfig { epochs: 10, batch_size: 32, lr: 1e-3, snr_u_range_db: [-10.0, 10.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub channel: ChannelConfig,
    /// Existing dataset file; generated from `channel` when absent.
    pub dataset_path: Option<PathBuf>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub model: ModelConfig,
    pub snr_u_grid_db: Vec<f64>,
    /// Downlink pilot SNR.
    pub snr_ce_db: f64,
    pub train: TrainConfig,
    pub ce: CeTrainConfig,
}

impl Default for ExperimentConfig {
    /// Desk-scale geometry: 64 subcarriers at 60 kHz, 16 antennas.
    fn default() -> Self {
        let channel =
            ChannelConfig { m_subcarriers: 64, n_bs: 16, subcarrier_spacing_hz: 60e3, ..ChannelConfig::default() };
        let model = ModelConfig { m_subcarriers: 64, n_bs: 16, l_symbols: 8, ..ModelConfig::default() };
        ExperimentConfig {
            seed: 0,
            channel,
            dataset_path: None,
            n_train: 2000,
            n_val: 500,
            n_test: 500,
            model,
            snr_u_grid_db: vec![-10.0, -5.0, 0.0, 5.0, 10.0],
            snr_ce_db: 10.0,
            train: TrainConfig::default(),
            ce: CeTrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CsiError::Config(m));
        self.channel.validate()?;
        self.model.validate()?;
        if self.channel.m_subcarriers != self.model.m_subcarriers || self.channel.n_bs != self.model.n_bs {
            return bad(format!(
                "channel geometry {}x{} differs from model geometry {}x{}",
                self.channel.m_subcarriers, self.channel.n_bs, self.model.m_subcarriers, self.model.n_bs
            ));
        }
        if self.snr_u_grid_db.is_empty() {
            return bad("snr_u_grid_db is empty".into());
        }
        let t = &self.train;
        if t.batch_size == 0 || self.n_train < t.batch_size {
            return bad(format!("n_train = {} must be at least batch_size = {}", self.n_train, t.batch_size));
        }
        if self.ce.batch_size == 0 || self.n_train < self.ce.batch_size {
            return bad(format!("n_train = {} must be at least ce.batch_size = {}", self.n_train, self.ce.batch_size));
        }
        if self.n_val == 0 || self.n_test == 0 {
            return bad("n_val and n_test must be positive".into());
        }
        if !(t.lr_initial > 0.0) || !(t.lr_factor > 0.0 && t.lr_factor <= 1.0) || t.plateau_patience == 0 {
            return bad("train: lr_initial > 0, lr_factor in (0, 1] and plateau_patience >= 1 required".into());
        }
        for r in [t.snr_u_range_db, self.ce.snr_u_range_db] {
            if !(r[0] <= r[1]) {
                return bad(format!("snr range {r:?} is not ordered"));
            }
        }
        if let Some(p) = &self.dataset_path {
            if !p.exists() {
                return bad(format!("dataset {} not found", p.display()));
            }
        }
        Ok(())
    }

    /// Parses TOML, applies `key.path=value` overrides, then validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| CsiError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| CsiError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CsiError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CsiError::Config(e.to_string()))
    }

    /// Short SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn n_total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }
}

/// Sets `a.b.c = value` in `table`. The value is read as a TOML literal and
/// falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) =
        spec.split_once('=').ok_or_else(|| CsiError::Config(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CsiError::Config(format!("bad override key `{key}`")));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur =
            entry.as_table_mut().ok_or_else(|| CsiError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
