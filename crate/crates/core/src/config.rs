//! Validated configuration records for the model, losses, and training loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Visual backbone variant. The encoder is a contract (output channels and
/// total stride); concrete networks are configurations of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VisualVariant {
    /// Stride-32, 2048-channel configuration for real-data use; weights are
    /// loaded from an external archive rather than trained from scratch here.
    Resnet50Like,
    /// Single stride-16 patch-embedding conv for hermetic desk-scale runs.
    TinyCnn,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VisualEncoderConfig {
    pub variant: VisualVariant,
    /// Output channel count C of the feature map.
    pub channels: usize,
    /// Total spatial downsampling factor.
    pub stride: usize,
    /// Expected input size (height, width).
    pub input_size: (usize, usize),
    /// Optional flat key->tensor archive with pretrained weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_path: Option<String>,
}

impl VisualEncoderConfig {
    pub fn resnet50_like() -> Self {
        VisualEncoderConfig {
            variant: VisualVariant::Resnet50Like,
            channels: 2048,
            stride: 32,
            input_size: (384, 128),
            pretrained_path: None,
        }
    }

    pub fn tiny_cnn() -> Self {
        VisualEncoderConfig {
            variant: VisualVariant::TinyCnn,
            channels: 32,
            stride: 16,
            input_size: (192, 64),
            pretrained_path: None,
        }
    }

    /// Conv block plan as (out_channels, kernel, stride, pad) per layer.
    /// Every block is a 3x3 stride-2 conv followed by ReLU.
    pub fn blocks(&self) -> Vec<(usize, usize, usize, usize)> {
        match self.variant {
            // Deep 3x3 stride-2 chain with a channel ramp.
            VisualVariant::Resnet50Like => {
                let n_blocks = (self.stride as f64).log2() as usize;
                let mut blocks = Vec::with_capacity(n_blocks);
                for i in 0..n_blocks {
                    let ch = if i + 1 == n_blocks {
                        self.channels
                    } else {
                        (self.channels / (1 << (n_blocks - 1 - i))).max(4)
                    };
                    blocks.push((ch, 3, 2, 1));
                }
                blocks
            }
            // A single patch embedding: one stride-sized convolution, one
            // nonlinearity — deliberately low capacity for desk-scale
            // corpora, where deeper stacks memorize instead of generalizing.
            VisualVariant::TinyCnn => vec![(self.channels, self.stride, self.stride, 0)],
        }
    }

    /// Spatial size of the output feature map.
    pub fn feature_size(&self) -> (usize, usize) {
        (self.input_size.0 / self.stride, self.input_size.1 / self.stride)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("visual channels must be positive"));
        }
        if !self.stride.is_power_of_two() || self.stride < 2 {
            return Err(Error::config("visual stride must be a power of two >= 2"));
        }
        let (h, w) = self.input_size;
        if h % self.stride != 0 || w % self.stride != 0 {
            return Err(Error::config(format!(
                "stride {} must divide input size {}x{}",
                self.stride, h, w
            )));
        }
        Ok(())
    }
}

/// All architecture hyperparameters in one validated record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of horizontal body-part bands K.
    pub k_parts: usize,
    /// Word embedding dimension V.
    pub embed_dim: usize,
    /// Common-space dimension M for global and PFL features.
    pub feature_dim: usize,
    /// Relation-attention embedding dimension M'.
    pub relation_embed_dim: usize,
    /// Output dimension N of the relation branch.
    pub relation_dim: usize,
    /// Maximum caption length.
    pub max_caption_len: usize,
    pub visual: VisualEncoderConfig,
    /// Text recurrence hidden size; defaults to the visual channel count C,
    /// which the shared projections require.
    #[serde(default)]
    pub hidden_dim: Option<usize>,
    /// Initial value of the recurrence forget-gate bias. The classic default
    /// is 1.0; small from-scratch corpora train better with 0.0 because long
    /// carry at initialization washes out per-word signal in short captions.
    #[serde(default = "default_forget_bias")]
    pub lstm_forget_bias: f64,
}

fn default_forget_bias() -> f64 {
    1.0
}

impl ModelConfig {
    /// Reference geometry: K=6, V=512, M=1024, M'=512, N=512 on a stride-32
    /// backbone with 384x128 inputs.
    pub fn paper_defaults() -> Self {
        ModelConfig {
            k_parts: 6,
            embed_dim: 512,
            feature_dim: 1024,
            relation_embed_dim: 512,
            relation_dim: 512,
            max_caption_len: 64,
            visual: VisualEncoderConfig::resnet50_like(),
            hidden_dim: None,
            lstm_forget_bias: 1.0,
        }
    }

    /// Hermetic desk-scale geometry for tests and the synthetic benchmark.
    pub fn tiny() -> Self {
        ModelConfig {
            k_parts: 3,
            embed_dim: 64,
            feature_dim: 32,
            relation_embed_dim: 32,
            relation_dim: 16,
            max_caption_len: 32,
            visual: VisualEncoderConfig::tiny_cnn(),
            hidden_dim: None,
            lstm_forget_bias: 0.0,
        }
    }

    /// Text hidden size C; matches the visual channel count unless overridden.
    pub fn hidden(&self) -> usize {
        self.hidden_dim.unwrap_or(self.visual.channels)
    }

    pub fn validate(&self) -> Result<()> {
        self.visual.validate()?;
        if self.k_parts == 0 {
            return Err(Error::config("k_parts must be positive"));
        }
        let (h, _) = self.visual.feature_size();
        if h % self.k_parts != 0 {
            return Err(Error::config(format!(
                "feature-map height {} is not divisible by K={} parts",
                h, self.k_parts
            )));
        }
        if self.embed_dim == 0
            || self.feature_dim == 0
            || self.relation_embed_dim == 0
            || self.relation_dim == 0
        {
            return Err(Error::config("all feature dimensions must be positive"));
        }
        if self.max_caption_len == 0 {
            return Err(Error::config("max_caption_len must be >= 1"));
        }
        Ok(())
    }
}

/// Loss hyperparameters and composition weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    /// Base ranking margin.
    pub alpha1: f64,
    /// Weight of the weak supervision terms.
    pub beta: f64,
    /// Weights for the (global, part, relation) loss streams.
    pub stream_weights: (f64, f64, f64),
    /// Number of identity classes for the ID loss.
    pub num_classes: usize,
    /// Disable the adaptive-margin clamp and use the raw ratio.
    #[serde(default)]
    pub strict_lambda: bool,
}

impl LossConfig {
    pub fn defaults(num_classes: usize) -> Self {
        LossConfig {
            alpha1: 0.2,
            beta: 0.1,
            stream_weights: (1.0, 0.5, 0.5),
            num_classes,
            strict_lambda: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 > 0.0 && self.alpha1 < 2.0) {
            return Err(Error::config("alpha1 must lie in (0, 2)"));
        }
        if self.beta < 0.0 {
            return Err(Error::config("beta must be non-negative"));
        }
        let (a, b, c) = self.stream_weights;
        if a < 0.0 || b < 0.0 || c < 0.0 {
            return Err(Error::config("stream weights must be non-negative"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        Ok(())
    }
}

/// Optimization-loop settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Multiply the learning rate by `decay_factor` at this epoch (1-based).
    pub decay_epoch: usize,
    pub decay_factor: f64,
    /// Ramp the learning rate linearly over this many leading epochs.
    #[serde(default)]
    pub warmup_epochs: usize,
    /// Per-group learning-rate multiplier for the relation branch (`prl.*`).
    /// Relation layers sit behind already-learned part features; training
    /// them slower keeps the relation stream from destabilizing short runs.
    #[serde(default = "default_lr_scale")]
    pub relation_lr_scale: f64,
    /// Per-group learning-rate multiplier for the identity classifier heads
    /// (`losses.id.*`).
    #[serde(default = "default_lr_scale")]
    pub classifier_lr_scale: f64,
    /// Per-group learning-rate multiplier for the word-attention scorer
    /// (`pfl.wam.*`). The scorer is a single tiny matrix trained only through
    /// indirect alignment pressure; a higher rate sharpens word-part routing.
    #[serde(default = "default_lr_scale")]
    pub wam_lr_scale: f64,
    pub seed: u64,
    /// Images drawn per identity in each identity-balanced batch.
    pub images_per_identity: usize,
    /// Global-norm gradient clip; `None` disables clipping.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: Option<f64>,
    /// Random horizontal flip augmentation.
    #[serde(default = "default_true")]
    pub horizontal_flip: bool,
}

fn default_grad_clip() -> Option<f64> {
    Some(5.0)
}

fn default_lr_scale() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn paper_defaults(seed: u64) -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 60,
            learning_rate: 1e-3,
            decay_epoch: 40,
            decay_factor: 0.1,
            warmup_epochs: 0,
            relation_lr_scale: 1.0,
            classifier_lr_scale: 1.0,
            wam_lr_scale: 1.0,
            seed,
            images_per_identity: 2,
            grad_clip: Some(5.0),
            horizontal_flip: true,
        }
    }

    pub fn tiny(seed: u64) -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 30,
            learning_rate: 1e-3,
            decay_epoch: 27,
            decay_factor: 0.1,
            warmup_epochs: 4,
            relation_lr_scale: 1.0,
            classifier_lr_scale: 1.0,
            wam_lr_scale: 64.0,
            seed,
            images_per_identity: 2,
            grad_clip: Some(5.0),
            horizontal_flip: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 4 {
            return Err(Error::config(
                "batch size must be >= 4 for in-batch hard-negative mining",
            ));
        }
        if self.images_per_identity < 2 {
            return Err(Error::config(
                "images_per_identity must be >= 2 so weak-positive captions exist in batch",
            ));
        }
        if self.batch_size % self.images_per_identity != 0 {
            return Err(Error::config(
                "batch size must be a multiple of images_per_identity",
            ));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.relation_lr_scale <= 0.0 || self.classifier_lr_scale <= 0.0 || self.wam_lr_scale <= 0.0 {
            return Err(Error::config("per-group learning-rate scales must be positive"));
        }
        if self.warmup_epochs >= self.decay_epoch {
            return Err(Error::config("warmup must end before the decay epoch"));
        }
        Ok(())
    }
}

/// Bundle of the three config records, as read from `--config` files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn tiny(seed: u64, num_classes: usize) -> Self {
        RunConfig {
            model: ModelConfig::tiny(),
            loss: LossConfig::defaults(num_classes),
            train: TrainConfig::tiny(seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }
}
