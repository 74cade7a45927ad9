use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::{PixelMask, SampleId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub classes: Vec<u8>,
    /// Crop window (top, left) the mask was predicted on.
    pub origin: (usize, usize),
    pub confidence: f64,
    pub iteration: usize,
}

impl PseudoLabel {
    pub fn mask(&self) -> Result<PixelMask> {
        PixelMask::new(self.height, self.width, self.num_classes, self.classes.clone())
    }
}

/// Arg-max masks of unlabeled images the discriminator found convincing.
/// Entries are only ever replaced by predictions at least as confident.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelBuffer {
    tau: f64,
    allowed: BTreeSet<SampleId>,
    entries: BTreeMap<SampleId, PseudoLabel>,
}

impl PseudoLabelBuffer {
    pub fn new(tau: f64, unlabeled: BTreeSet<SampleId>) -> Self {
        Self { tau, allowed: unlabeled, entries: BTreeMap::new() }
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &SampleId) -> Option<&PseudoLabel> {
        self.entries.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SampleId, &PseudoLabel)> {
        self.entries.iter()
    }

    /// Offer a prediction; returns whether it was stored.
    pub fn offer(&mut self, id: &SampleId, mask: &PixelMask, origin: (usize, usize), confidence: f64, iteration: usize) -> Result<bool> {
        if !self.allowed.contains(id) {
            return Err(Error::Leakage(format!("{id} is not an unlabeled training image")));
        }
        if !(confidence >= self.tau) {
            return Ok(false);
        }
        if self.entries.get(id).is_some_and(|e| e.confidence > confidence) {
            return Ok(false);
        }
        self.entries.insert(
            id.clone(),
            PseudoLabel {
                height: mask.height(),
                width: mask.width(),
                num_classes: mask.num_classes(),
                classes: mask.classes().to_vec(),
                origin,
                confidence,
                iteration,
            },
        );
        Ok(true)
    }

    /// Every stored confidence is at least tau and every key is an allowed id.
    pub fn check_invariants(&self) -> bool {
        self.entries.iter().all(|(id, e)| self.allowed.contains(id) && e.confidence >= self.tau)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let buffer: Self = serde_json::from_str(text)?;
        if !buffer.check_invariants() {
            return Err(Error::invalid("pseudo-label buffer violates its invariants"));
        }
        Ok(buffer)
    }
}
