//! Run configuration loaded from `--config`, and its provenance hash.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use fmmhead_core::data::Stamp;
use fmmhead_core::preprocess::DEFAULT_BASELINE_CUTOFF_HZ;
use fmmhead_core::synth::SyntheticSpec;
use fmmhead_core::{AeConfig, Error, FitConfig, Result, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub baseline_cutoff_hz: f64,
    /// Padded beat length; chosen from the sampling rate when absent.
    pub l_pad: Option<usize>,
    /// Lead column of raw records; the first column when absent.
    pub lead: Option<String>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            baseline_cutoff_hz: DEFAULT_BASELINE_CUTOFF_HZ,
            l_pad: None,
            lead: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub preprocess: PreprocessConfig,
    pub fit: FitConfig,
    pub model: AeConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticSpec,
}

impl Config {
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Config> {
        let mut cfg: Config = match path {
            Some(p) => serde_json::from_reader(BufReader::new(File::open(p)?))
                .map_err(|e| Error::validation(format!("{}: {e}", p.display())))?,
            None => Config::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.train.seed = cfg.seed;
        cfg.synthetic.seed = cfg.seed;
        Ok(cfg)
    }

    /// First 16 hex digits of the SHA-256 of the effective configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn stamp(&self) -> Stamp {
        Stamp::new(self.hash())
    }
}
