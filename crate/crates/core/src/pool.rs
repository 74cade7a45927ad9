//! Samples, labels at pixel and image granularity, and pool partitions.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

/// Reserved mask value for pixels excluded from every count, loss and metric.
pub const IGNORE: u8 = 255;

/// Opaque sample identifier. Ordering is lexicographic and is used for every
/// deterministic tie-break in the crate.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SampleId(String);

impl TryFrom<String> for SampleId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Self::new(s)
    }
}

impl From<SampleId> for String {
    fn from(id: SampleId) -> String {
        id.0
    }
}

impl SampleId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() || id.chars().any(|c| c.is_whitespace()) {
            return Err(Error::invalid(format!("sample id {id:?} must be non-empty without whitespace")));
        }
        Ok(SampleId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::str::FromStr for SampleId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SampleId::new(s)
    }
}

/// Dense per-pixel class map, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelMask {
    height: usize,
    width: usize,
    num_classes: usize,
    classes: Vec<u8>,
}

impl PixelMask {
    pub fn new(height: usize, width: usize, num_classes: usize, classes: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("mask dimensions must be positive"));
        }
        if num_classes == 0 || num_classes >= IGNORE as usize {
            return Err(Error::invalid(format!("class count {num_classes} outside [1, 255)")));
        }
        if classes.len() != height * width {
            return Err(Error::shape(format!(
                "mask buffer has {} entries, expected {height}x{width}",
                classes.len()
            )));
        }
        if let Some(bad) = classes.iter().find(|&&c| c != IGNORE && c as usize >= num_classes) {
            return Err(Error::invalid(format!("mask value {bad} is neither a class below {num_classes} nor IGNORE")));
        }
        Ok(Self { height, width, num_classes, classes })
    }

    pub fn filled(height: usize, width: usize, num_classes: usize, class: u8) -> Result<Self> {
        Self::new(height, width, num_classes, vec![class; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.classes[row * self.width + col]
    }

    /// Per-class pixel counts, IGNORE excluded.
    pub fn class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_classes];
        for &c in &self.classes {
            if c != IGNORE {
                counts[c as usize] += 1;
            }
        }
        counts
    }

    pub fn labeled_pixels(&self) -> usize {
        self.classes.iter().filter(|&&c| c != IGNORE).count()
    }

    /// Copy out a `height x width` window starting at (`top`, `left`).
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::shape("crop window exceeds mask"));
        }
        let mut out = Vec::with_capacity(height * width);
        for r in top..top + height {
            out.extend_from_slice(&self.classes[r * self.width + left..r * self.width + left + width]);
        }
        Self::new(height, width, self.num_classes, out)
    }
}

/// Coarse image-level class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ImageLabel(usize);

impl ImageLabel {
    pub fn new(class_index: usize, num_image_classes: usize) -> Result<Self> {
        if class_index >= num_image_classes {
            return Err(Error::invalid(format!(
                "image label {class_index} outside [0, {num_image_classes})"
            )));
        }
        Ok(ImageLabel(class_index))
    }

    pub fn class_index(self) -> usize {
        self.0
    }
}

/// One image with optional annotations. Pixels are stored row-major, channel-last,
/// normalized to [0, 1].
#[derive(Clone, Debug)]
pub struct ImageSample {
    pub id: SampleId,
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
    pub image_label: Option<ImageLabel>,
    pub mask: Option<PixelMask>,
}

impl ImageSample {
    pub fn new(
        id: SampleId,
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<f32>,
        image_label: Option<ImageLabel>,
        mask: Option<PixelMask>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape(format!("image {id} has an empty dimension")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::shape(format!(
                "image {id}: {} intensities for {height}x{width}x{channels}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(Error::invalid(format!("image {id} has intensities outside [0,1]")));
        }
        if let Some(m) = &mask {
            if m.height() != height || m.width() != width {
                return Err(Error::shape(format!(
                    "image {id} is {height}x{width} but its mask is {}x{}",
                    m.height(),
                    m.width()
                )));
            }
        }
        Ok(Self { id, height, width, channels, pixels, image_label, mask })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Channel-last intensities.
    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Channel-first copy (C x H x W), the layout models consume.
    pub fn to_chw(&self) -> Vec<f32> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0f32; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[ch * h * w + y * w + x] = self.pixels[(y * w + x) * c + ch];
                }
            }
        }
        out
    }

    /// Channel-first crop of the image.
    pub fn crop_chw(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Vec<f32>> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::shape("crop window exceeds image"));
        }
        let c = self.channels;
        let mut out = vec![0f32; height * width * c];
        for y in 0..height {
            for x in 0..width {
                for ch in 0..c {
                    out[ch * height * width + y * width + x] =
                        self.pixels[((top + y) * self.width + left + x) * c + ch];
                }
            }
        }
        Ok(out)
    }
}

/// Majority non-IGNORE class of a mask, ties to the lowest class index.
pub fn derive_image_label(mask: &PixelMask) -> Result<ImageLabel> {
    let counts = mask.class_counts();
    let (best, &count) = counts
        .iter()
        .enumerate()
        // max_by_key keeps the last maximum; reversing makes it the first.
        .rev()
        .max_by_key(|(_, &c)| c)
        .expect("mask has at least one class");
    if count == 0 {
        return Err(Error::Unlabelable("<mask>".into()));
    }
    ImageLabel::new(best, mask.num_classes())
}

/// Fraction of the training pool that receives labels, in (0, 1].
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct LabeledRatio(f64);

impl LabeledRatio {
    pub fn new(r: f64) -> Result<Self> {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::config(format!("labeled ratio {r} outside (0, 1]")));
        }
        Ok(LabeledRatio(r))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

// Products such as 0.29 * 100 land a hair below the integer they denote.
const ROUNDING_SLACK: f64 = 1e-9;

pub(crate) fn floor_product(a: f64, b: f64) -> usize {
    (a * b + ROUNDING_SLACK).floor() as usize
}

pub(crate) fn ceil_product(a: f64, b: f64) -> usize {
    (a * b - ROUNDING_SLACK).ceil() as usize
}

/// floor(R * N), at least 1.
pub fn target_labeled_count(ratio: LabeledRatio, pool_size: usize) -> Result<usize> {
    if pool_size == 0 {
        return Err(Error::invalid("pool size must be at least 1"));
    }
    Ok(floor_product(ratio.value(), pool_size as f64).clamp(1, pool_size))
}

/// Seeded random split into (train, validation). The train side receives
/// round(train_fraction * n) ids, kept within [1, n-1].
pub fn split_train_val(
    ids: &BTreeSet<SampleId>,
    train_fraction: f64,
    seed: u64,
) -> Result<(BTreeSet<SampleId>, BTreeSet<SampleId>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    if ids.len() < 2 {
        return Err(Error::invalid("need at least two ids to split"));
    }
    let n = ids.len();
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<&SampleId> = ids.iter().collect();
    order.shuffle(&mut rng_from_seed(seed));
    let train = order[..n_train].iter().map(|&id| id.clone()).collect();
    let val = order[n_train..].iter().map(|&id| id.clone()).collect();
    Ok((train, val))
}

/// Disjoint labeled / unlabeled split of a fixed id universe.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolPartition {
    all: BTreeSet<SampleId>,
    labeled: BTreeSet<SampleId>,
    unlabeled: BTreeSet<SampleId>,
}

impl PoolPartition {
    /// Everything starts unlabeled.
    pub fn new(all: BTreeSet<SampleId>) -> Self {
        Self { unlabeled: all.clone(), labeled: BTreeSet::new(), all }
    }

    pub fn all(&self) -> &BTreeSet<SampleId> {
        &self.all
    }

    pub fn labeled(&self) -> &BTreeSet<SampleId> {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &BTreeSet<SampleId> {
        &self.unlabeled
    }

    /// Move `ids` from the unlabeled pool to the labeled set. Fails without
    /// mutating anything if an id is not currently unlabeled or repeats.
    pub fn mark_labeled(&mut self, ids: &[SampleId]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in ids {
            if !self.unlabeled.contains(id) || !seen.insert(id) {
                return Err(Error::invalid(format!("{id} is not in the unlabeled pool")));
            }
        }
        for id in ids {
            self.unlabeled.remove(id);
            self.labeled.insert(id.clone());
        }
        Ok(())
    }

    /// Disjointness and union coverage.
    pub fn check_invariants(&self) -> bool {
        self.labeled.is_disjoint(&self.unlabeled)
            && self.labeled.len() + self.unlabeled.len() == self.all.len()
            && self.labeled.iter().chain(self.unlabeled.iter()).all(|id| self.all.contains(id))
    }
}
