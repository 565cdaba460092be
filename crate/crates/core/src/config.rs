//! Run configuration: one TOML key-value file plus flag overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::GateHyperparams;
use crate::nic::NicHyperparams;

/// Everything one pipeline run needs. Defaults mirror the evaluated
/// settings: k = 30, m = 50, beam = 3, vocabulary cutoff 5, captions capped
/// at 35 tokens.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub captions: PathBuf,
    pub features: PathBuf,
    pub splits: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Nearest neighbors retrieved per query.
    pub k: usize,
    /// Consensus subset size.
    pub m: usize,
    /// Beam width for the neural decoder.
    pub beam: usize,
    /// Vocabulary frequency cutoff (strictly-greater-than).
    pub cutoff: usize,
    /// Decoder emission budget.
    pub max_len: usize,
    pub nic: NicConfig,
    pub gate: GateConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct NicConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub clip: f64,
}

impl Default for NicConfig {
    fn default() -> Self {
        let hp = NicHyperparams::default();
        NicConfig {
            embed_dim: hp.embed_dim,
            hidden_dim: hp.hidden_dim,
            learning_rate: hp.learning_rate,
            epochs: hp.epochs,
            clip: hp.clip,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GateConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        let hp = GateHyperparams::default();
        GateConfig {
            learning_rate: hp.learning_rate,
            epochs: hp.epochs,
            l2: hp.l2,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            captions: PathBuf::from("captions.tsv"),
            features: PathBuf::from("features.jsonl"),
            splits: PathBuf::from("splits.tsv"),
            out_dir: PathBuf::from("out"),
            seed: 42,
            k: 30,
            m: 50,
            beam: 3,
            cutoff: 5,
            max_len: crate::corpus::MAX_CAPTION_TOKENS,
            nic: NicConfig::default(),
            gate: GateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: RunConfig = toml::from_str(&body).map_err(|e| Error::Config {
            path: path.into(),
            message: e.to_string(),
        })?;
        // Relative data paths resolve against the config file location.
        if let Some(dir) = path.parent() {
            for p in [
                &mut config.captions,
                &mut config.features,
                &mut config.splits,
                &mut config.out_dir,
            ] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        fn check(ok: bool, message: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidInput(message.to_string()))
            }
        }
        check(self.k >= 1, "k must be >= 1")?;
        check(self.m >= 1, "m must be >= 1")?;
        check(self.beam >= 1, "beam must be >= 1")?;
        check(self.max_len >= 1, "max_len must be >= 1")?;
        check(self.nic.embed_dim >= 1, "nic.embed_dim must be >= 1")?;
        check(self.nic.hidden_dim >= 1, "nic.hidden_dim must be >= 1")?;
        check(self.nic.epochs >= 1, "nic.epochs must be >= 1")?;
        check(self.gate.epochs >= 1, "gate.epochs must be >= 1")?;
        Ok(())
    }

    /// The captioner hyperparameters, seeded from the run seed.
    pub fn nic_hyperparams(&self) -> NicHyperparams {
        NicHyperparams {
            embed_dim: self.nic.embed_dim,
            hidden_dim: self.nic.hidden_dim,
            learning_rate: self.nic.learning_rate,
            epochs: self.nic.epochs,
            seed: self.seed,
            clip: self.nic.clip,
        }
    }

    /// The gate hyperparameters, on a derived seed stream.
    pub fn gate_hyperparams(&self) -> GateHyperparams {
        GateHyperparams {
            learning_rate: self.gate.learning_rate,
            epochs: self.gate.epochs,
            l2: self.gate.l2,
            seed: self.seed.wrapping_add(1),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = toml::to_string_pretty(self).expect("config serializes");
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_reported_settings() {
        let config = RunConfig::default();
        assert_eq!(config.k, 30);
        assert_eq!(config.m, 50);
        assert_eq!(config.beam, 3);
        assert_eq!(config.cutoff, 5);
        assert_eq!(config.max_len, 35);
    }

    #[test]
    fn partial_file_fills_in_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "seed = 7\nk = 4\ncaptions = \"c.tsv\"\n").unwrap();
        let config = RunConfig::load(&path).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.k, 4);
        assert_eq!(config.m, 50);
        assert_eq!(config.captions, dir.path().join("c.tsv"));
    }

    #[test]
    fn invalid_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "k = 0\n").unwrap();
        assert!(RunConfig::load(&path).is_err());
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let config = RunConfig::default();
        let text = toml::to_string_pretty(&config).unwrap();
        let parsed: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(parsed, config);
    }
}
