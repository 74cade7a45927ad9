//! Objectives of the semi-supervised adversarial segmentation model.
//!
//! Map-valued inputs are batched (N, K, H, W) tensors; masks are given
//! per image. Every loss returns a scalar tensor connected to its inputs.

use candle_core::{DType, Tensor};

use super::models::{Discriminator, Segmenter, CONFIDENCE_EPS};
use crate::error::{Error, Result};
use crate::nn::{self, scalar};
use crate::pool::{PixelMask, IGNORE};
use crate::seed::Rng;

/// Smallest probability fed to a logarithm.
const PROB_FLOOR: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FmNorm {
    L1,
    L2,
}

impl std::fmt::Display for FmNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FmNorm::L1 => "l1",
            FmNorm::L2 => "l2",
        })
    }
}

impl std::str::FromStr for FmNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(FmNorm::L1),
            "l2" => Ok(FmNorm::L2),
            other => Err(Error::config(format!("unknown feature matching norm {other:?}"))),
        }
    }
}

/// One-hot (N, K, H, W) encoding of masks; IGNORE pixels are all-zero.
pub fn masks_one_hot(masks: &[PixelMask], k: usize, dtype: DType) -> Result<Tensor> {
    let first = masks.first().ok_or_else(|| Error::invalid("empty mask batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = vec![0f32; masks.len() * k * h * w];
    for (n, m) in masks.iter().enumerate() {
        if m.height() != h || m.width() != w {
            return Err(Error::shape("masks in a batch differ in size"));
        }
        if m.num_classes() != k {
            return Err(Error::shape(format!("mask has {} classes, expected {k}", m.num_classes())));
        }
        for (p, &c) in m.classes().iter().enumerate() {
            if c != IGNORE {
                data[((n * k) + c as usize) * h * w + p] = 1.0;
            }
        }
    }
    nn::tensor_from_f32(data, &[masks.len(), k, h, w], dtype)
}

/// Channel concatenation of images with the one-hot encoding of their masks.
pub fn one_hot_concat(images: &Tensor, masks: &[PixelMask], k: usize) -> Result<Tensor> {
    let (n, _, h, w) = images.dims4()?;
    if masks.len() != n {
        return Err(Error::shape(format!("{n} images for {} masks", masks.len())));
    }
    if masks.iter().any(|m| m.height() != h || m.width() != w) {
        return Err(Error::shape(format!("mask size differs from image size {h}x{w}")));
    }
    let onehot = masks_one_hot(masks, k, images.dtype())?;
    Ok(Tensor::cat(&[images, &onehot], 1)?)
}

fn valid_pixels(masks: &[PixelMask]) -> usize {
    masks.iter().map(PixelMask::labeled_pixels).sum()
}

fn check_map(map: &Tensor, masks: &[PixelMask]) -> Result<usize> {
    let (n, k, h, w) = map.dims4()?;
    if masks.len() != n || masks.iter().any(|m| m.height() != h || m.width() != w || m.num_classes() != k) {
        return Err(Error::shape(format!("class map {:?} does not match its masks", map.dims())));
    }
    let valid = valid_pixels(masks);
    if valid == 0 {
        return Err(Error::invalid("masks contain no labeled pixels"));
    }
    Ok(k)
}

/// Mean of -log p(true class) over non-IGNORE pixels, from probabilities.
pub fn cross_entropy_loss(probs: &Tensor, masks: &[PixelMask]) -> Result<Tensor> {
    cross_entropy_from_log_probs(&probs.clamp(PROB_FLOOR, 1.0)?.log()?, masks)
}

/// Same loss from log-probabilities, the numerically preferred input.
pub fn cross_entropy_from_log_probs(log_probs: &Tensor, masks: &[PixelMask]) -> Result<Tensor> {
    let k = check_map(log_probs, masks)?;
    let onehot = masks_one_hot(masks, k, log_probs.dtype())?;
    let total = (log_probs * onehot)?.sum_all()?;
    Ok(total.affine(-1.0 / valid_pixels(masks) as f64, 0.0)?)
}

/// Distance between batch-mean discriminator features of real and generated pairs.
/// Returns an exact zero, with zero gradient, when the means coincide.
pub fn feature_matching_from_features(real: &Tensor, fake: &Tensor, norm: FmNorm) -> Result<Tensor> {
    if real.dim(1)? != fake.dim(1)? {
        return Err(Error::shape("feature widths differ"));
    }
    let diff = (real.mean(0)? - fake.mean(0)?)?;
    match norm {
        FmNorm::L1 => Ok(diff.abs()?.sum_all()?),
        FmNorm::L2 => {
            let sq = diff.sqr()?.sum_all()?;
            if nn::to_f64(&sq)? == 0.0 {
                // sqrt has an infinite derivative at zero.
                return Ok(diff.sum_all()?.affine(0.0, 0.0)?);
            }
            Ok(sq.sqrt()?)
        }
    }
}

/// Feature matching between labeled pairs and the segmenter's maps on unlabeled images.
/// The discriminator is held fixed (no dropout, real features detached).
pub fn feature_matching_loss(
    disc: &Discriminator,
    seg: &Segmenter,
    labeled_images: &Tensor,
    labeled_masks: &[PixelMask],
    unlabeled_images: &Tensor,
    norm: FmNorm,
) -> Result<Tensor> {
    let real = disc.features(&one_hot_concat(labeled_images, labeled_masks, seg.num_classes)?, None)?.detach();
    let probs = seg.probabilities(unlabeled_images, true)?;
    let fake = disc.features(&Tensor::cat(&[unlabeled_images, &probs], 1)?, None)?;
    feature_matching_from_features(&real, &fake, norm)
}

/// Confidence gate for self-training.
pub fn passes_gate(d_conf: f64, tau: f64) -> bool {
    d_conf >= tau
}

/// Cross-entropy of a map against its own arg-max when the discriminator
/// trusts it, zero otherwise. Pseudo-labels are constants.
pub fn self_training_loss(probs: &Tensor, d_conf: f64, tau: f64) -> Result<Tensor> {
    if !passes_gate(d_conf, tau) {
        return scalar(0.0, probs.dtype());
    }
    let pseudo = super::models::argmax_masks(&probs.detach())?;
    cross_entropy_loss(probs, &pseudo)
}

pub fn generator_loss(ce: &Tensor, fm: &Tensor, st: &Tensor, lambda_fm: f64, lambda_st: f64) -> Result<Tensor> {
    Ok(((ce + fm.affine(lambda_fm, 0.0)?)? + st.affine(lambda_st, 0.0)?)?)
}

/// Binary cross-entropy of the discriminator: real pairs toward 1, generated toward 0.
pub fn discriminator_loss_from_confidences(real: &Tensor, fake: Option<&Tensor>) -> Result<Tensor> {
    let clamp = |t: &Tensor| t.clamp(CONFIDENCE_EPS, 1.0 - CONFIDENCE_EPS);
    let mut loss = clamp(real)?.log()?.mean_all()?.neg()?;
    if let Some(fake) = fake {
        let term = clamp(fake)?.affine(-1.0, 1.0)?.log()?.mean_all()?;
        loss = (loss - term)?;
    }
    Ok(loss)
}

/// Discriminator objective on a labeled and an unlabeled batch; the
/// segmenter's output is treated as a constant.
pub fn discriminator_loss(
    disc: &Discriminator,
    seg: &Segmenter,
    labeled_images: &Tensor,
    labeled_masks: &[PixelMask],
    unlabeled_images: &Tensor,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<Tensor> {
    let real_in = one_hot_concat(labeled_images, labeled_masks, seg.num_classes)?;
    let real = disc.confidence(&real_in, dropout_rng.as_deref_mut())?;
    let probs = seg.probabilities(unlabeled_images, true)?.detach();
    let fake = disc.confidence(&Tensor::cat(&[unlabeled_images, &probs], 1)?, dropout_rng)?;
    discriminator_loss_from_confidences(&real, Some(&fake))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{device, to_f64};

    fn map(values: &[f64], k: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(values.to_vec(), (1, k, h, w), &device()).unwrap()
    }

    #[test]
    fn uniform_prediction_costs_log_k() {
        let k = 4;
        let p = map(&vec![0.25; k * 9], k, 3, 3);
        let mask = PixelMask::new(3, 3, k, vec![0, 1, 2, 3, 0, 1, 2, 3, 0]).unwrap();
        let ce = to_f64(&cross_entropy_loss(&p, &[mask]).unwrap()).unwrap();
        assert!((ce - (k as f64).ln()).abs() <= 1e-9);
    }

    #[test]
    fn ignore_pixels_do_not_count() {
        // Channel-first layout: class 0 plane then class 1 plane.
        let p = map(&[0.9, 0.2, 0.1, 0.8], 2, 1, 2);
        let mask = PixelMask::new(1, 2, 2, vec![0, IGNORE]).unwrap();
        let ce = to_f64(&cross_entropy_loss(&p, &[mask]).unwrap()).unwrap();
        assert!((ce + 0.9f64.ln()).abs() < 1e-12);
        let all_ignored = PixelMask::new(1, 2, 2, vec![IGNORE, IGNORE]).unwrap();
        assert!(cross_entropy_loss(&p, &[all_ignored]).is_err());
    }

    #[test]
    fn self_training_gate() {
        let p = map(&[0.7, 0.7, 0.7, 0.7, 0.3, 0.3, 0.3, 0.3], 2, 2, 2);
        let st = to_f64(&self_training_loss(&p, 0.7, 0.6).unwrap()).unwrap();
        assert!((st + 0.7f64.ln()).abs() < 1e-12);
        assert_eq!(to_f64(&self_training_loss(&p, 0.5, 0.6).unwrap()).unwrap(), 0.0);
        assert!((to_f64(&self_training_loss(&p, 0.6, 0.6).unwrap()).unwrap() + 0.7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn discriminator_loss_at_chance() {
        let half = Tensor::new(&[0.5f64, 0.5, 0.5], &device()).unwrap();
        let l = to_f64(&discriminator_loss_from_confidences(&half, Some(&half)).unwrap()).unwrap();
        assert!((l - 1.386294).abs() < 1e-6);
        let ones = Tensor::new(&[1.0f64, 0.0], &device()).unwrap();
        assert!(to_f64(&discriminator_loss_from_confidences(&ones, Some(&ones)).unwrap()).unwrap().is_finite());
    }

    #[test]
    fn feature_matching_norms() {
        let a = Tensor::new(&[[1.0f64, 2.0], [3.0, 4.0]], &device()).unwrap();
        let b = Tensor::new(&[[0.0f64, 0.0], [0.0, 0.0]], &device()).unwrap();
        // Means (2, 3) vs (0, 0).
        let l2 = to_f64(&feature_matching_from_features(&a, &b, FmNorm::L2).unwrap()).unwrap();
        assert!((l2 - 13f64.sqrt()).abs() < 1e-12);
        let l1 = to_f64(&feature_matching_from_features(&a, &b, FmNorm::L1).unwrap()).unwrap();
        assert!((l1 - 5.0).abs() < 1e-12);
        assert_eq!(to_f64(&feature_matching_from_features(&a, &a, FmNorm::L2).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn zero_feature_gap_has_finite_zero_gradient() {
        let v = candle_core::Var::new(&[[1.0f64, 2.0]], &device()).unwrap();
        let real = Tensor::new(&[[1.0f64, 2.0]], &device()).unwrap();
        let loss = feature_matching_from_features(&real, v.as_tensor(), FmNorm::L2).unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(&v).map(|g| nn::to_vec_f64(g).unwrap()).unwrap_or(vec![0.0, 0.0]);
        assert!(g.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn generator_loss_weights() {
        let s = |v: f64| scalar(v, DType::F64).unwrap();
        let l = to_f64(&generator_loss(&s(1.0), &s(2.0), &s(3.0), 0.1, 1.0).unwrap()).unwrap();
        assert!((l - 4.2).abs() < 1e-12);
    }

    #[test]
    fn one_hot_concat_layout() {
        let x = Tensor::zeros((1, 3, 1, 2), DType::F32, &device()).unwrap();
        let m = PixelMask::new(1, 2, 2, vec![1, IGNORE]).unwrap();
        let t = one_hot_concat(&x, &[m], 2).unwrap();
        assert_eq!(t.dims(), &[1, 5, 1, 2]);
        let v = nn::to_vec_f64(&t).unwrap();
        assert_eq!(&v[6..], &[0.0, 0.0, 1.0, 0.0]);
        let bad = PixelMask::new(2, 2, 2, vec![0; 4]).unwrap();
        assert!(one_hot_concat(&x, &[bad], 2).is_err());
    }
}
