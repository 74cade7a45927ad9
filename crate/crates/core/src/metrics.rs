//! Segmentation quality (mIoU) and class-diversity indices of a labeled selection.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::pool::{PixelMask, SampleId, IGNORE};

/// counts[g][p]: pixels with ground truth `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tally one prediction. IGNORE ground-truth pixels are skipped; a valid
    /// ground-truth pixel predicted as IGNORE is an error.
    pub fn accumulate(&mut self, pred: &PixelMask, gt: &PixelMask) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        for (&p, &g) in pred.classes().iter().zip(gt.classes()) {
            if g == IGNORE {
                continue;
            }
            if p == IGNORE || p as usize >= self.k || g as usize >= self.k {
                return Err(Error::invalid(format!("class pair ({g}, {p}) outside {} classes", self.k)));
            }
            self.counts[g as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    /// Element-wise sum; associative, so partial matrices can be built in parallel.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::shape("confusion matrices of different class counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU per class; `None` for classes absent from both prediction and ground truth.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..self.k).filter(|&p| p != c).map(|p| self.get(c, p)).sum();
                let fp: u64 = (0..self.k).filter(|&g| g != c).map(|g| self.get(g, c)).sum();
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }
}

pub fn accumulate_confusion(pred: &PixelMask, gt: &PixelMask, k: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(k);
    cm.accumulate(pred, gt)?;
    Ok(cm)
}

/// Mean IoU over the classes present in prediction or ground truth.
pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(Error::invalid("mIoU of an empty confusion matrix"));
    }
    let present: Vec<f64> = cm.per_class_iou().into_iter().flatten().collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Per-class pixel counts over a set of samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassPixelHistogram {
    pub counts: Vec<u64>,
}

impl ClassPixelHistogram {
    pub fn new(counts: Vec<u64>) -> Self {
        Self { counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add_mask(&mut self, mask: &PixelMask) -> Result<()> {
        if mask.num_classes() != self.counts.len() {
            return Err(Error::shape("mask class count differs from histogram"));
        }
        for (c, n) in self.counts.iter_mut().zip(mask.class_counts()) {
            *c += n;
        }
        Ok(())
    }
}

/// H = -sum p_i ln p_i.
pub fn shannon_index(h: &ClassPixelHistogram) -> Result<f64> {
    let total = h.total();
    if total == 0 {
        return Err(Error::invalid("Shannon index of an empty histogram"));
    }
    let total = total as f64;
    Ok(-h
        .counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            p * p.ln()
        })
        .sum::<f64>())
}

/// D = 1 - sum n_i (n_i - 1) / (N (N - 1)), N the total pixel count: the
/// probability that two pixels drawn without replacement differ in class.
pub fn simpson_inverse_index(h: &ClassPixelHistogram) -> Result<f64> {
    let total = h.total();
    if total < 2 {
        return Err(Error::invalid("Simpson index needs at least two pixels"));
    }
    let same: f64 = h.counts.iter().map(|&n| n as f64 * (n as f64 - 1.0).max(0.0)).sum();
    Ok(1.0 - same / (total as f64 * (total as f64 - 1.0)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiversityReport {
    pub histogram: ClassPixelHistogram,
    pub shannon: f64,
    pub simpson: f64,
}

/// Pool every labeled pixel of the selected samples and index its class mix.
pub fn diversity_report(ids: &[SampleId], dataset: &Dataset) -> Result<DiversityReport> {
    let mut histogram = ClassPixelHistogram::new(vec![0; dataset.num_classes()]);
    for id in ids {
        histogram.add_mask(dataset.mask(id)?)?;
    }
    Ok(DiversityReport { shannon: shannon_index(&histogram)?, simpson: simpson_inverse_index(&histogram)?, histogram })
}
