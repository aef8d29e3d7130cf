//! The JSON run configuration: `net`, `train`, `data` and `eval` sections.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use msda_core::data::SceneConfig;
use msda_core::eval::DEFAULT_MATCH_DIST;
use msda_core::nn::NetConfig;
use msda_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Where training samples come from: a directory when `dir` is set,
/// otherwise `count` synthetic scenes seeded from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub resize_to: Option<usize>,
    pub synth: SceneConfig,
    pub count: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            resize_to: None,
            synth: SceneConfig::default(),
            count: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub match_dist: f64,
    pub delta: f64,
    /// Binarization threshold; `None` uses the network's own.
    pub threshold: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            match_dist: DEFAULT_MATCH_DIST,
            delta: 0.01,
            threshold: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl CliConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: CliConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        self.data.synth.validate()?;
        let e = &self.eval;
        anyhow::ensure!(e.match_dist >= 0.0, "eval.match_dist must be ≥ 0, got {}", e.match_dist);
        anyhow::ensure!(e.delta > 0.0 && e.delta <= 1.0, "eval.delta must lie in (0, 1], got {}", e.delta);
        if let Some(t) = e.threshold {
            anyhow::ensure!((0.0..1.0).contains(&t), "eval.threshold must lie in [0, 1), got {t}");
        }
        Ok(())
    }

    pub fn echo(&self) {
        log::info!("effective config: {}", serde_json::to_string(self).expect("config serializes"));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_takes_defaults() {
        assert_eq!(CliConfig::parse("{}").unwrap(), CliConfig::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        for (doc, key) in [
            (r#"{"nett": {}}"#, "nett"),
            (r#"{"net": {"ablation": {"hfdii": false}}}"#, "hfdii"),
            (r#"{"train": {"lr": 0.1}}"#, "lr"),
            (r#"{"data": {"synth": {"sizes": 64}}}"#, "sizes"),
            (r#"{"eval": {"delt": 0.1}}"#, "delt"),
        ] {
            let err = format!("{:#}", CliConfig::parse(doc).unwrap_err());
            assert!(err.contains(key), "{err}");
        }
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(CliConfig::parse(r#"{"eval": {"delta": 0}}"#).is_err());
        assert!(CliConfig::parse(r#"{"train": {"batch_size": 0}}"#).is_err());
        assert!(CliConfig::parse(r#"{"net": {"stage_channels": [4, 4, 8, 8, 4]}}"#).is_err());
    }
}
