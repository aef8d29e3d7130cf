use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::adam::AdamConfig;
use crate::train::augment::AugmentConfig;
use crate::train::loss::DEFAULT_LOSS_EPS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub augmentation: AugmentConfig,
    pub loss_epsilon: f64,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            learning_rate: 1e-4,
            epochs: 500,
            seed: 0,
            augmentation: AugmentConfig::default(),
            loss_epsilon: DEFAULT_LOSS_EPS,
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        if !(self.loss_epsilon >= 0.0) {
            return Err(Error::Config("loss_epsilon must be ≥ 0".into()));
        }
        if self.adam_betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config(format!(
                "adam_betas must lie in [0, 1), got {:?}",
                self.adam_betas
            )));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            betas: (self.adam_betas[0], self.adam_betas[1]),
            eps: self.adam_eps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_rejections() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!((cfg.batch_size, cfg.learning_rate, cfg.epochs), (4, 1e-4, 500));
        for broken in [
            TrainConfig { batch_size: 0, ..cfg.clone() },
            TrainConfig { learning_rate: 0.0, ..cfg.clone() },
            TrainConfig { epochs: 0, ..cfg.clone() },
        ] {
            assert!(broken.validate().is_err());
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"batch": 2}"#).unwrap_err();
        assert!(err.to_string().contains("batch"));
        let cfg: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.batch_size, 4);
    }
}
