//! Run configuration shared by the library entry points and the CLI.

use serde::{Deserialize, Serialize};

use crate::arrays::sha256_hex;
use crate::corpus::SyntheticConfig;
use crate::error::{Result, UmtlError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub window: usize,
    pub channels: usize,
    pub layers: usize,
    pub heads: usize,
    /// Hidden width of every transformer MLP as a multiple of the token dim.
    pub mlp_ratio: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_size: 32,
            window: 8,
            channels: 16,
            layers: 2,
            heads: 4,
            mlp_ratio: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn token_dim(&self) -> usize {
        self.window * self.window * self.channels
    }

    pub fn num_tokens(&self) -> usize {
        (self.patch_size / self.window).pow(2)
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.token_dim() as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(UmtlError::config("model.patch_size", "must be positive"));
        }
        if self.window == 0 || !self.patch_size.is_multiple_of(self.window) {
            return Err(UmtlError::config("model.window", "must divide model.patch_size"));
        }
        if self.channels < 3 {
            return Err(UmtlError::config("model.channels", "must be >= 3"));
        }
        if self.layers == 0 {
            return Err(UmtlError::config("model.layers", "must be positive"));
        }
        if self.heads == 0 || !self.token_dim().is_multiple_of(self.heads) {
            return Err(UmtlError::config("model.heads", "must divide window*window*channels"));
        }
        if self.mlp_ratio.is_nan() || self.mlp_ratio <= 0.0 {
            return Err(UmtlError::config("model.mlp_ratio", "must be positive"));
        }
        Ok(())
    }
}

/// How instance losses are scaled before the β_r threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNormalization {
    /// (L − min) / max
    MinOverMax,
    /// (L − min) / (max − min)
    MinMax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub tplg_epochs: usize,
    pub tlc_epochs: usize,
    /// Bags per generator optimizer step and per pseudo-label batch.
    pub batch_bags: usize,
    /// Instances per cleaner optimizer step.
    pub cleaner_batch: usize,
    /// Keep training the feature head and positional encodings with the
    /// TPLG objective.
    pub train_head: bool,
    /// Continue from the previous iteration's parameters at t ≥ 2.
    pub warm_start: bool,
    /// Weight positive/negative terms of the cleaner loss by inverse class
    /// frequency.
    pub balance_classes: bool,
    pub loss_normalization: LossNormalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            tplg_epochs: 10,
            tlc_epochs: 10,
            batch_bags: 8,
            cleaner_batch: 64,
            train_head: true,
            warm_start: true,
            balance_classes: false,
            loss_normalization: LossNormalization::MinOverMax,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub beta_r: f64,
    pub beta_c: f64,
    /// Fraction of the bag's instance count.
    pub beta_wsi: f64,
    pub tissue: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            beta_r: 0.5,
            beta_c: 0.5,
            beta_wsi: 0.1,
            tissue: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub k_o: usize,
    pub k_l: usize,
    pub max_iterations: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            k_o: 10,
            k_l: 3,
            max_iterations: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeAttribute {
    /// TPLG instance loss, min-max normalised per slide.
    Loss,
    /// Cleaned binary labels.
    Label,
    /// Cleaner probabilities φ.
    Probability,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlideRule {
    /// Σℓ ≥ β_WSI·n
    Count,
    /// largest smoothed positive component > β_WSI·n
    Component,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothingConfig {
    pub hops: usize,
    pub attribute: NodeAttribute,
    pub rule: SlideRule,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig {
            hops: 2,
            attribute: NodeAttribute::Loss,
            rule: SlideRule::Component,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Unsupervised,
    Weak,
    Downstream,
    Ablation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    /// Outer mutual-learning iterations T.
    pub iterations: usize,
    pub mode: Mode,
    /// Fraction of bags held out for testing.
    pub test_fraction: f64,
    /// Slide-label fraction for weak supervision.
    pub label_fraction: f64,
    /// Also fine-tune the feature head during weak supervision.
    pub weak_train_head: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            iterations: 3,
            mode: Mode::Unsupervised,
            test_fraction: 0.25,
            label_fraction: 1.0,
            weak_train_head: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: SyntheticConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub thresholds: Thresholds,
    pub clustering: ClusterConfig,
    pub smoothing: SmoothingConfig,
    pub run: RunSection,
}

fn unit_interval(field: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(UmtlError::config(field, format!("{v} outside [0,1]")));
    }
    Ok(())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        if self.corpus.patch_size != self.model.patch_size {
            return Err(UmtlError::config(
                "model.patch_size",
                "must equal corpus.patch_size",
            ));
        }
        unit_interval("thresholds.beta_r", self.thresholds.beta_r)?;
        unit_interval("thresholds.beta_c", self.thresholds.beta_c)?;
        unit_interval("thresholds.beta_wsi", self.thresholds.beta_wsi)?;
        unit_interval("thresholds.tissue", self.thresholds.tissue)?;
        unit_interval("run.test_fraction", self.run.test_fraction)?;
        unit_interval("run.label_fraction", self.run.label_fraction)?;
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(UmtlError::config("train.lr", "must be positive"));
        }
        if self.train.batch_bags == 0 {
            return Err(UmtlError::config("train.batch_bags", "must be positive"));
        }
        if self.train.cleaner_batch == 0 {
            return Err(UmtlError::config("train.cleaner_batch", "must be positive"));
        }
        if self.clustering.k_o == 0 || self.clustering.k_l == 0 || self.clustering.k_l > self.clustering.k_o {
            return Err(UmtlError::config("clustering.k_l", "need 1 <= k_l <= k_o"));
        }
        if self.run.iterations == 0 {
            return Err(UmtlError::config("run.iterations", "must be positive"));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Small preset used by tests and the acceptance suite: 16-px patches,
    /// 4-px windows, 4 channels, one transformer layer per stack.
    pub fn desk_small() -> Self {
        let mut c = RunConfig::default();
        c.corpus.patch_size = 16;
        c.model = ModelConfig {
            patch_size: 16,
            window: 4,
            channels: 4,
            layers: 1,
            heads: 2,
            mlp_ratio: 1.0,
        };
        c.train.balance_classes = true;
        c.train.tplg_epochs = 5;
        c.train.tlc_epochs = 5;
        c.train.loss_normalization = LossNormalization::MinMax;
        c.smoothing.attribute = NodeAttribute::Label;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        RunConfig::desk_small().validate().unwrap();
    }

    #[test]
    fn beta_out_of_range_names_field() {
        let mut c = RunConfig::default();
        c.thresholds.beta_r = 1.5;
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("thresholds.beta_r"), "{err}");
    }

    #[test]
    fn window_must_divide_patch() {
        let mut c = RunConfig::default();
        c.model.window = 5;
        assert!(c.validate().is_err());
    }
}
