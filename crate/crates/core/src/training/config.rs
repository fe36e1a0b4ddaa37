use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PrefixPolicy;
use crate::error::{Error, Result};
use crate::model::EncoderConfig;

/// Encoder dimensions; the vocabulary size comes from the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        let toy = EncoderConfig::toy(1);
        Self {
            layers: toy.layers,
            hidden: toy.hidden,
            heads: toy.heads,
            ffn: toy.ffn,
            max_len: toy.max_len,
            dropout: toy.dropout,
        }
    }
}

impl ModelShape {
    pub fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            ffn: self.ffn,
            max_len: self.max_len,
            vocab_size,
            dropout: self.dropout,
        }
    }
}

/// Which assembled sequences of an example feed the MLM term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MlmSequences {
    #[default]
    Gold,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the MLM term.
    pub lambda: f64,
    pub mask_ratio: f64,
    pub prefix_policy: PrefixPolicy,
    /// Per-task cap on examples drawn each epoch.
    pub dataset_cap: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Multi-task (stage 1) epochs.
    pub epochs: usize,
    /// Fraction of each stage's steps spent warming the learning rate up.
    pub warmup: f64,
    /// Single-task (stage 2) epochs and peak learning rate.
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub mlm_sequences: MlmSequences,
    /// Insert the task prefix after `[CLS]`. Off only for ablations.
    pub use_prefix: bool,
    pub min_count: usize,
    pub seed: u64,
    pub model: ModelShape,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            mask_ratio: 0.25,
            prefix_policy: PrefixPolicy::Default,
            dataset_cap: 2000,
            lr: 1e-3,
            batch_size: 16,
            epochs: 6,
            warmup: 0.1,
            finetune_epochs: 6,
            finetune_lr: 5e-4,
            mlm_sequences: MlmSequences::Gold,
            use_prefix: true,
            min_count: 1,
            seed: 0,
            model: ModelShape::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return fail(format!("mask ratio must be in (0, 1), got {}", self.mask_ratio));
        }
        if self.dataset_cap == 0 || self.batch_size == 0 {
            return fail("dataset cap and batch size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.warmup) {
            return fail(format!("warmup fraction {} outside [0, 1]", self.warmup));
        }
        if !(self.lr > 0.0 && self.finetune_lr > 0.0) {
            return fail("learning rates must be positive".into());
        }
        self.model.encoder(1).validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            file: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }
}

/// Learning rate at `step` of `total`: linear warm-up, then linear decay to zero.
pub fn lr_at(peak: f64, warmup: f64, step: usize, total: usize) -> f64 {
    let total = total.max(1) as f64;
    let warm = (warmup * total).ceil().max(1.0);
    let s = step as f64 + 1.0;
    if s <= warm {
        peak * s / warm
    } else {
        peak * ((total - s + 1.0) / (total - warm + 1.0)).max(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_recipe() {
        let c = TrainConfig::default();
        assert_eq!(c.lambda, 0.1);
        assert_eq!(c.mask_ratio, 0.25);
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.epochs, 6);
        assert_eq!(c.warmup, 0.1);
        c.validate().unwrap();
    }

    #[test]
    fn invalid_values_are_rejected() {
        let bad = [
            TrainConfig { lambda: -1.0, ..Default::default() },
            TrainConfig { mask_ratio: 1.0, ..Default::default() },
            TrainConfig { dataset_cap: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let lrs: Vec<f64> = (0..20).map(|s| lr_at(1.0, 0.1, s, 20)).collect();
        assert_eq!(lrs[0], 0.5);
        assert_eq!(lrs[1], 1.0);
        assert!(lrs.windows(2).skip(1).all(|w| w[1] <= w[0]));
        assert!(lrs[19] > 0.0);
    }

    #[test]
    fn partial_json_uses_defaults() {
        let c: TrainConfig = serde_json::from_str(r#"{"lambda": 0.0, "model": {"hidden": 32}}"#).unwrap();
        assert_eq!(c.lambda, 0.0);
        assert_eq!(c.model.hidden, 32);
        assert_eq!(c.model.layers, 4);
        assert_eq!(c.epochs, 6);
    }
}
