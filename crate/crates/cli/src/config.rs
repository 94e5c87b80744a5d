//! TOML run configuration with one section per command.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sidegate::classifier::{ClassifierConfig, ClassifierTrainConfig};
use sidegate::cvae::{CvaeConfig, CvaeTrainConfig};
use sidegate::explain::ExplainConfig;
use sidegate::metrics::EvalConfig;
use sidegate::phantom::PhantomConfig;

use crate::UsageError;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub generator: PhantomConfig,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
}

impl Default for PhantomSection {
    fn default() -> Self {
        Self {
            generator: PhantomConfig::default(),
            split: [0.7, 0.1, 0.2],
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CvaeSection {
    pub model: CvaeConfig,
    pub train: CvaeTrainConfig,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub model: ClassifierConfig,
    pub train: ClassifierTrainConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Written into every module's seed.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub phantom: PhantomSection,
    pub cvae: CvaeSection,
    pub classifier: ClassifierSection,
    pub explain: ExplainConfig,
    pub metrics: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            phantom: PhantomSection::default(),
            cvae: CvaeSection::default(),
            classifier: ClassifierSection::default(),
            explain: ExplainConfig::default(),
            metrics: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| UsageError(format!("invalid configuration: {e}")).into())
    }

    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| UsageError(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text).with_context(|| format!("in {}", p.display()))
            }
        }
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Applies the global seed to every module.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.phantom.generator.seed = seed;
        self.cvae.train.seed = seed;
        self.classifier.train.seed = seed;
        self.metrics.bootstrap.seed = seed;
        self
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let check = |r: sidegate::Result<()>| r.map_err(|e| anyhow::Error::from(UsageError(e.to_string())));
        check(self.phantom.generator.validate())?;
        check(self.cvae.model.validate())?;
        check(self.classifier.model.validate())?;
        check(self.explain.rules.validate())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default().with_seed(7);
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn defaults_follow_published_hyperparameters() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.cvae.train.lr, 5e-3);
        assert_eq!(cfg.cvae.train.epochs, 200);
        assert_eq!(cfg.cvae.model.latent_dim, 16);
        assert_eq!(cfg.classifier.train.lr, 1e-5);
        assert_eq!(cfg.classifier.train.epochs, 200);
        assert_eq!(cfg.classifier.train.weight_decay, 1e-5);
        assert_eq!(cfg.classifier.train.focal.gamma, 5.0);
        assert_eq!((cfg.classifier.train.focal.lambda_neg, cfg.classifier.train.focal.lambda_pos), (0.25, 0.35));
        assert_eq!(cfg.classifier.model.clusters, 64);
    }

    #[test]
    fn partial_files_fill_defaults_and_unknown_keys_fail() {
        let cfg = RunConfig::parse("seed = 3\n[classifier.train]\nepochs = 5\n").unwrap();
        assert_eq!(cfg.classifier.train.epochs, 5);
        assert_eq!(cfg.classifier.train.lr, 1e-5);
        assert!(RunConfig::parse("[classifier]\nbogus = 1\n").is_err());
    }
}
