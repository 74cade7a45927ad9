//! Semi-supervised adversarial segmentation.
//!
//! A segmenter is trained with pixel cross-entropy on the labeled images,
//! feature matching against an image-wise discriminator on the unlabeled
//! images, and self-training on unlabeled predictions the discriminator
//! rates at or above `tau`. The discriminator alternates with it, learning
//! to tell (image, ground-truth mask) pairs from (image, predicted map) pairs.

mod buffer;
mod losses;
mod models;
mod trainer;

pub use buffer::{PseudoLabel, PseudoLabelBuffer};
pub use losses::{
    cross_entropy_from_log_probs, cross_entropy_loss, discriminator_loss, discriminator_loss_from_confidences,
    feature_matching_from_features, feature_matching_loss, generator_loss, masks_one_hot, one_hot_concat, passes_gate,
    self_training_loss, FmNorm,
};
pub use models::{argmax_masks, Discriminator, SegBackbone, Segmenter, CONFIDENCE_EPS};
pub use trainer::{
    batch_indices, generator_pass, load_segmenter, make_batch, run_training, Batch, CheckpointHeader, GanTrainer,
    GeneratorPass, RunOptions, StepReport, TrainingSet, CHECKPOINT_DIR, NAN_DUMP_FILE, PSEUDO_LOG_FILE, TRAIN_LOG_FILE,
};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GanConfig {
    pub num_classes: usize,
    pub iterations: usize,
    pub batch_size: usize,
    /// Random training crop (height, width); full images when unset.
    pub crop_size: Option<(usize, usize)>,
    pub lambda_fm: f64,
    pub lambda_st: f64,
    pub tau: f64,
    pub gen_lr: f64,
    pub gen_momentum: f64,
    pub gen_weight_decay: f64,
    /// Polynomial decay power for the segmenter learning rate; constant when unset.
    pub poly_power: Option<f64>,
    pub disc_lr: f64,
    pub fm_norm: FmNorm,
    /// Use only the current batch's confident predictions, without the persistent buffer.
    pub ephemeral_st: bool,
    pub backbone: SegBackbone,
    pub seg_width: usize,
    pub disc_channels: Vec<usize>,
    pub disc_dropout: f64,
    /// Save a checkpoint every this many iterations; never when zero.
    pub checkpoint_every: usize,
}

impl GanConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            iterations: 2000,
            batch_size: 4,
            crop_size: None,
            lambda_fm: 0.1,
            lambda_st: 1.0,
            tau: 0.6,
            gen_lr: 2.5e-4,
            gen_momentum: 0.9,
            gen_weight_decay: 5e-4,
            poly_power: None,
            disc_lr: 1e-4,
            fm_norm: FmNorm::L2,
            ephemeral_st: false,
            backbone: SegBackbone::EncoderDecoder,
            seg_width: 16,
            disc_channels: vec![16, 32, 64, 64],
            disc_dropout: 0.5,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("segmentation needs at least two classes"));
        }
        if self.num_classes > 255 {
            return Err(Error::config("at most 255 classes fit an 8-bit mask"));
        }
        if self.iterations == 0 || self.batch_size == 0 || self.seg_width == 0 {
            return Err(Error::config("iterations, batch size and width must be at least 1"));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config(format!("tau = {} outside (0, 1)", self.tau)));
        }
        for (name, v) in [("lambda_fm", self.lambda_fm), ("lambda_st", self.lambda_st), ("gen_weight_decay", self.gen_weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} = {v} must be a non-negative number")));
            }
        }
        for (name, v) in [("gen_lr", self.gen_lr), ("disc_lr", self.disc_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} = {v} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.gen_momentum) || !(0.0..1.0).contains(&self.disc_dropout) {
            return Err(Error::config("momentum and dropout must lie in [0, 1)"));
        }
        if self.poly_power.is_some_and(|p| !(p > 0.0)) {
            return Err(Error::config("poly decay power must be positive"));
        }
        if self.crop_size.is_some_and(|(h, w)| h == 0 || w == 0) {
            return Err(Error::config("crop size must be positive"));
        }
        if self.disc_channels.is_empty() || self.disc_channels.contains(&0) {
            return Err(Error::config("discriminator channels must be non-empty and positive"));
        }
        Ok(())
    }

    /// Segmenter learning rate for 1-based `iteration`.
    pub fn gen_lr_at(&self, iteration: usize) -> f64 {
        match self.poly_power {
            Some(p) => {
                let progress = (iteration.saturating_sub(1)) as f64 / self.iterations as f64;
                self.gen_lr * (1.0 - progress).max(0.0).powf(p)
            }
            None => self.gen_lr,
        }
    }
}
