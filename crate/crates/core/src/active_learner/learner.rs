use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;

use super::LearnerSpec;
use crate::error::{Error, Result};
use crate::nets::Classifier;
use crate::nn::{self, log_softmax, Sgd};
use crate::pool::{ImageLabel, ImageSample};
use crate::seed::{derive_seed, keyed_rng};

/// An image classifier the selection loop can query and retrain.
pub trait Learner {
    /// Train on the full labeled pool.
    fn teach(&mut self, images: &[&ImageSample], labels: &[ImageLabel]) -> Result<()>;

    /// Class-probability rows, one per image, in input order.
    fn predict_proba(&self, images: &[&ImageSample]) -> Result<Vec<Vec<f64>>>;
}

/// Stack channel-first images into an (N, C, H, W) tensor.
pub fn images_to_tensor(images: &[&ImageSample], dtype: DType) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
    let (c, h, w) = (first.channels(), first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.channels(), img.height(), img.width()) != (c, h, w) {
            return Err(Error::shape(format!("image {} does not match batch shape {c}x{h}x{w}", img.id)));
        }
        data.extend(img.to_chw());
    }
    nn::tensor_from_f32(data, &[images.len(), c, h, w], dtype)
}

fn softmax_rows(logits: &Tensor) -> Result<Vec<Vec<f64>>> {
    let rows = logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(rows
        .into_iter()
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / sum).collect()
        })
        .collect())
}

/// Convolutional learner trained with SGD + momentum and a step schedule that
/// restarts at every teach call.
pub struct CnnLearner {
    spec: LearnerSpec,
    in_channels: usize,
    num_classes: usize,
    seed: u64,
    teach_calls: usize,
    net: Classifier,
}

impl CnnLearner {
    pub fn new(spec: LearnerSpec, in_channels: usize, num_classes: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        let net = Self::build(&spec, in_channels, num_classes, seed, 0)?;
        Ok(Self { spec, in_channels, num_classes, seed, teach_calls: 0, net })
    }

    fn build(spec: &LearnerSpec, in_channels: usize, num_classes: usize, seed: u64, generation: usize) -> Result<Classifier> {
        let mut rng = keyed_rng(seed, &format!("learner-init:{generation}"));
        Classifier::new(spec.architecture, in_channels, num_classes, DType::F32, &mut rng)
    }

    pub fn network(&self) -> &Classifier {
        &self.net
    }

    pub fn parameters(&self) -> Result<Vec<f64>> {
        self.net.store.flat_values()
    }

    fn lr_for_epoch(&self, epoch: usize) -> f64 {
        let steps = epoch / self.spec.lr_step_epochs.max(1);
        self.spec.base_lr * self.spec.lr_step_factor.powi(steps as i32)
    }
}

impl Learner for CnnLearner {
    fn teach(&mut self, images: &[&ImageSample], labels: &[ImageLabel]) -> Result<()> {
        if images.len() != labels.len() || images.is_empty() {
            return Err(Error::invalid(format!("{} images for {} labels", images.len(), labels.len())));
        }
        if let Some(bad) = labels.iter().find(|l| l.class_index() >= self.num_classes) {
            return Err(Error::invalid(format!("label {} outside learner's {} classes", bad.class_index(), self.num_classes)));
        }
        if self.spec.reinit_each_teach && self.teach_calls > 0 {
            self.net = Self::build(&self.spec, self.in_channels, self.num_classes, self.seed, self.teach_calls)?;
        }
        let call = self.teach_calls;
        self.teach_calls += 1;

        let vars = self.net.store.trainable();
        let mut opt = Sgd::new(self.spec.base_lr, self.spec.momentum, 0.0, vars.len());
        let mut order: Vec<usize> = (0..images.len()).collect();
        for epoch in 0..self.spec.epochs_per_teach {
            opt.lr = self.lr_for_epoch(epoch);
            order.shuffle(&mut keyed_rng(self.seed, &format!("teach:{call}:epoch:{epoch}")));
            for chunk in order.chunks(self.spec.batch_size) {
                let batch: Vec<&ImageSample> = chunk.iter().map(|&i| images[i]).collect();
                let x = images_to_tensor(&batch, DType::F32)?;
                let targets: Vec<u32> = chunk.iter().map(|&i| labels[i].class_index() as u32).collect();
                let targets = Tensor::from_vec(targets, (chunk.len(), 1), &nn::device())?;
                let logp = log_softmax(&self.net.forward(&x, true)?, 1)?;
                let loss = logp.gather(&targets, 1)?.mean_all()?.neg()?;
                let value = nn::to_f64(&loss)?;
                if !value.is_finite() {
                    return Err(Error::NonFinite { iteration: epoch, detail: format!("learner loss {value}") });
                }
                opt.step(&vars, &loss.backward()?)?;
            }
        }
        Ok(())
    }

    fn predict_proba(&self, images: &[&ImageSample]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let logits = self.net.forward(&images_to_tensor(chunk, DType::F32)?, false)?;
            out.extend(softmax_rows(&logits)?);
        }
        Ok(out)
    }
}

/// Seed for the learner of a selection run.
pub fn learner_seed(root: u64) -> u64 {
    derive_seed(root, "learner")
}
