//! Training/evaluation configuration, loadable from a JSON file with CLI
//! overrides applied on top.

use crate::losses::Reduction;
use crate::metrics::VideoScoreStat;
use crate::{CapError, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_self_attention: f64,
    pub lr_t2i: f64,
    pub lr_gru: f64,
    pub lr_decoder: f64,
    pub epochs: u32,
    pub batch_size: u32,
    pub t2i_layers: usize,
    pub lambda: f64,
    pub seed: u64,
    pub placeholder_text_mode: bool,
    pub dropout: f64,
    pub reduction: Reduction,
    pub video_score_stat: VideoScoreStat,
    /// Disables the attention decoder and its loss term (ablation control).
    pub decoder_ablated: bool,
    pub window_len: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_self_attention: 1e-6,
            lr_t2i: 1e-6,
            lr_gru: 1e-5,
            lr_decoder: 1e-4,
            epochs: 10,
            batch_size: 2,
            t2i_layers: 3,
            lambda: 5.0,
            seed: 0,
            placeholder_text_mode: false,
            dropout: 0.1,
            reduction: Reduction::Sum,
            video_score_stat: VideoScoreStat::Max,
            decoder_ablated: false,
            window_len: 150,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("lr_self_attention", self.lr_self_attention),
            ("lr_t2i", self.lr_t2i),
            ("lr_gru", self.lr_gru),
            ("lr_decoder", self.lr_decoder),
        ];
        for (name, lr) in rates {
            if !(lr > 0.0) {
                return Err(CapError::BadInput(format!("{name} must be > 0, got {lr}")));
            }
        }
        if self.epochs < 1 {
            return Err(CapError::BadInput("epochs must be >= 1".into()));
        }
        if self.t2i_layers < 1 {
            return Err(CapError::BadInput("t2i_layers must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(CapError::BadInput("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CapError::BadInput("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| CapError::BadInput(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn bad_values_rejected() {
        let mut c = TrainConfig::default();
        c.lr_gru = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.t2i_layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn roundtrip_and_partial_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let mut c = TrainConfig::default();
        c.epochs = 3;
        c.lambda = 2.5;
        c.save(&path).unwrap();
        assert_eq!(TrainConfig::load(&path).unwrap(), c);

        // Partial JSON fills the rest with defaults.
        std::fs::write(&path, r#"{"epochs": 7}"#).unwrap();
        let loaded = TrainConfig::load(&path).unwrap();
        assert_eq!(loaded.epochs, 7);
        assert_eq!(loaded.lambda, TrainConfig::default().lambda);

        // Unknown keys are an error, not silently ignored.
        std::fs::write(&path, r#"{"epoch": 7}"#).unwrap();
        assert!(TrainConfig::load(&path).is_err());
    }
}
