use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the reconstruction terms.
    pub lambda: f64,
    /// Histology rows kept per patient and step during training.
    pub subsample: usize,
    pub seed: u64,
    pub folds: usize,
    pub precision: Precision,
    /// Bootstrap replicates for the RMST statistics.
    pub bootstrap_replicates: usize,
    /// RMST horizon in months.
    pub horizon_months: f64,
    #[serde(flatten)]
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            epochs: 30,
            batch_size: 32,
            lambda: 0.1,
            subsample: 4096,
            seed: 0,
            folds: 5,
            precision: Precision::F32,
            bootstrap_replicates: 1000,
            horizon_months: 60.0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("train config: {m}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.subsample == 0 || self.bootstrap_replicates == 0 {
            return bad("batch_size, subsample and bootstrap_replicates must be positive");
        }
        if self.folds < 2 {
            return bad("folds must be at least 2");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be nonnegative");
        }
        if !(self.horizon_months > 0.0 && self.horizon_months.is_finite()) {
            return bad("horizon_months must be positive");
        }
        self.model.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.learning_rate, c.epochs, c.batch_size, c.lambda, c.subsample), (5e-4, 30, 32, 0.1, 4096));
        assert_eq!((c.model.slots_h, c.model.slots_g, c.model.iterations, c.model.fusion_rounds), (16, 16, 10, 3));
        assert_eq!((c.model.k_fraction, c.model.gate_temperature, c.model.n_bins), (0.25, 0.01, 4));
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "slots_h": 8, "aggregation": "sum"}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.model.slots_h, 8);
        assert_eq!(c.model.aggregation, crate::slot::Aggregation::Sum);
        assert_eq!(c.batch_size, 32);
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { folds: 1, ..Default::default() }.validate().is_err());
        let mut c = TrainConfig::default();
        c.model.k_fraction = 0.0;
        assert!(c.validate().is_err());
    }
}
