//! The serialized run configuration shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::TrainConfig;
use crate::dataset::DatasetConfig;
use crate::error::{Error, Result};
use crate::eval::SweepConfig;

pub const CONFIG_FILE: &str = "config.json";

/// Everything a run needs. The global `seed` is copied into the dataset,
/// training and sweep stages by [`RunConfig::resolve`], so one number pins the
/// whole pipeline.
///
/// `out` and `jobs` do not affect results and are left out of the echoed
/// config, which keeps output directories comparable byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    /// Existing dataset directory; generated from `dataset` when absent.
    pub data_dir: Option<PathBuf>,
    /// Existing params file; trained from scratch when absent.
    pub model: Option<PathBuf>,
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing)]
    pub jobs: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
            data_dir: None,
            model: None,
            out: None,
            jobs: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }

    /// Propagates the global seed and checks every stage.
    pub fn resolve(mut self) -> Result<Self> {
        self.dataset.seed = self.seed;
        self.train.seed = self.seed;
        self.sweep.seed = self.seed;
        self.train.validate()?;
        self.sweep.validate()?;
        if self.jobs == Some(0) {
            return Err(Error::invalid("--jobs must be at least 1"));
        }
        for (what, path) in [("data_dir", &self.data_dir), ("model", &self.model)] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(Error::invalid(format!("{what} {} does not exist", p.display())));
                }
            }
        }
        Ok(self)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Writes the config to `dir/config.json`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), self.to_json()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_propagates() {
        let c = RunConfig {
            seed: 11,
            ..RunConfig::default()
        }
        .resolve()
        .unwrap();
        assert_eq!((c.dataset.seed, c.train.seed, c.sweep.seed), (11, 11, 11));
    }

    #[test]
    fn json_round_trip_omits_run_local_fields() {
        let c = RunConfig {
            out: Some("somewhere".into()),
            jobs: Some(3),
            ..RunConfig::default()
        };
        let text = c.to_json().unwrap();
        assert!(!text.contains("somewhere"));
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back.out, None);
        assert_eq!(back.sweep, c.sweep);
        assert_eq!(back.dataset, c.dataset);
    }

    #[test]
    fn partial_json_uses_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 3, "sweep": {"epsilons": [1.0, 2.0]}}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.sweep.epsilons, vec![1.0, 2.0]);
        assert_eq!(c.sweep.iterations, 20);
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn rejects_unknown_paths_and_bad_values() {
        let c = RunConfig {
            model: Some("/definitely/not/here".into()),
            ..RunConfig::default()
        };
        assert!(c.resolve().is_err());
        assert!(RunConfig::from_json(r#"{"seed": "x"}"#).is_err());
    }
}
