//! Deterministic synthetic segmentation datasets: coloured, noisy shapes on a
//! background, with a controllable class imbalance and one rare class.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;

use crate::dataset::{save_image, save_mask, write_index, IndexHeader, IndexRecord, INDEX_FILE};
use crate::error::{Error, Result};
use crate::pool::{derive_image_label, ImageSample, PixelMask, SampleId};
use crate::seed::{keyed_rng, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Shape {
    Rectangle,
    Disk,
    Stripe,
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Shape::Rectangle => "rectangles",
            Shape::Disk => "disks",
            Shape::Stripe => "stripes",
        })
    }
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rectangles" | "rectangle" => Ok(Shape::Rectangle),
            "disks" | "disk" => Ok(Shape::Disk),
            "stripes" | "stripe" => Ok(Shape::Stripe),
            other => Err(Error::config(format!("unknown shape {other:?}"))),
        }
    }
}

/// Parameters of a generated dataset. The last class is the rare class: it
/// never appears through `class_prior` and is painted into a fraction
/// `rare_class_rate` of the images.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_images: usize,
    pub image_size: (usize, usize),
    pub num_classes: usize,
    /// Relative frequency of each non-rare class as background or shape.
    pub class_prior: Vec<f64>,
    pub shapes: BTreeSet<Shape>,
    pub rare_class_rate: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// 200 images of 32x32 with four classes; the rare class is in 10% of them.
    pub fn desk_default(seed: u64) -> Self {
        Self {
            n_images: 200,
            image_size: (32, 32),
            num_classes: 4,
            class_prior: vec![0.6, 0.25, 0.15, 0.0],
            shapes: [Shape::Rectangle, Shape::Disk, Shape::Stripe].into(),
            rare_class_rate: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_images < 10 {
            return Err(Error::config("a synthetic dataset needs at least 10 images"));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(Error::config("synthetic datasets need between 2 and 255 classes"));
        }
        if self.image_size.0 < 8 || self.image_size.1 < 8 {
            return Err(Error::config("images must be at least 8x8"));
        }
        if self.class_prior.len() != self.num_classes {
            return Err(Error::config(format!("class prior has {} entries for {} classes", self.class_prior.len(), self.num_classes)));
        }
        if self.class_prior.iter().any(|p| !(*p >= 0.0)) || (self.class_prior.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::config("class prior must be a probability vector"));
        }
        if self.class_prior[..self.num_classes - 1].iter().sum::<f64>() <= 0.0 {
            return Err(Error::config("class prior puts no mass on the common classes"));
        }
        if !(0.0..=1.0).contains(&self.rare_class_rate) {
            return Err(Error::config("rare class rate must lie in [0, 1]"));
        }
        if self.shapes.is_empty() {
            return Err(Error::config("shape vocabulary is empty"));
        }
        Ok(())
    }

    pub fn rare_class(&self) -> usize {
        self.num_classes - 1
    }
}

/// Evenly spaced hues at moderate saturation.
fn palette(k: usize, num_classes: usize) -> [f32; 3] {
    let h = k as f32 / num_classes as f32 * 6.0;
    let (s, v) = (0.65f32, 0.75f32);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Draw from `weights` restricted to `allowed`; `None` when nothing has mass.
fn draw(rng: &mut Rng, weights: &[f64], allowed: impl Fn(usize) -> bool) -> Option<usize> {
    let total: f64 = weights.iter().enumerate().filter(|(i, _)| allowed(*i)).map(|(_, w)| w).sum();
    if total <= 0.0 {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    let mut last = None;
    for (i, w) in weights.iter().enumerate().filter(|(i, w)| allowed(*i) && **w > 0.0) {
        last = Some(i);
        if u < *w {
            return Some(i);
        }
        u -= w;
    }
    last
}

fn paint(classes: &mut [u8], (h, w): (usize, usize), shape: Shape, class: u8, large: bool, rng: &mut Rng) {
    let scale = |lo: usize, hi: usize, rng: &mut Rng| rng.random_range(lo.max(1)..=hi.max(lo.max(1)));
    let side = h.min(w);
    match shape {
        Shape::Rectangle => {
            let (lo, hi) = if large { (side / 3, side * 2 / 3) } else { (side / 5, side / 2) };
            let (rh, rw) = (scale(lo, hi, rng), scale(lo, hi, rng));
            let top = rng.random_range(0..=h - rh);
            let left = rng.random_range(0..=w - rw);
            for y in top..top + rh {
                classes[y * w + left..y * w + left + rw].fill(class);
            }
        }
        Shape::Disk => {
            let (lo, hi) = if large { (side / 5, side / 3) } else { (side / 8, side / 4) };
            let r = scale(lo, hi, rng) as f64;
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    if dy * dy + dx * dx <= r * r {
                        classes[y * w + x] = class;
                    }
                }
            }
        }
        Shape::Stripe => {
            let (lo, hi) = if large { (side / 4, side / 2) } else { (side / 8, side / 4) };
            let thickness = scale(lo, hi, rng);
            if rng.random_bool(0.5) {
                let top = rng.random_range(0..=h - thickness);
                classes[top * w..(top + thickness) * w].fill(class);
            } else {
                let left = rng.random_range(0..=w - thickness);
                for y in 0..h {
                    classes[y * w + left..y * w + left + thickness].fill(class);
                }
            }
        }
    }
}

/// One generated image and its mask; a pure function of (spec, index).
pub fn synth_sample(spec: &SynthSpec, index: usize) -> Result<ImageSample> {
    let (h, w) = spec.image_size;
    let k = spec.num_classes;
    let rare = spec.rare_class();
    let mut rng = keyed_rng(spec.seed, &format!("synth:{index}"));
    let shapes: Vec<Shape> = spec.shapes.iter().copied().collect();

    let background = draw(&mut rng, &spec.class_prior, |c| c != rare).expect("validated prior");
    let mut classes = vec![background as u8; h * w];
    let n_shapes = rng.random_range(1..=3);
    for _ in 0..n_shapes {
        let class = draw(&mut rng, &spec.class_prior, |c| c != rare && c != background).unwrap_or(background);
        let shape = shapes[rng.random_range(0..shapes.len())];
        paint(&mut classes, (h, w), shape, class as u8, false, &mut rng);
    }
    if rng.random_bool(spec.rare_class_rate) {
        let shape = shapes[rng.random_range(0..shapes.len())];
        paint(&mut classes, (h, w), shape, rare as u8, true, &mut rng);
    }

    // Per-image illumination shift plus per-pixel noise on the class colour.
    let shift: Vec<f32> = (0..3).map(|_| rng.random_range(-0.08f32..0.08)).collect();
    let colours: Vec<[f32; 3]> = (0..k).map(|c| palette(c, k)).collect();
    let mut pixels = Vec::with_capacity(h * w * 3);
    for &c in &classes {
        for ch in 0..3 {
            let v = colours[c as usize][ch] + shift[ch] + rng.random_range(-0.15f32..0.15);
            pixels.push(v.clamp(0.0, 1.0));
        }
    }
    let mask = PixelMask::new(h, w, k, classes)?;
    let label = derive_image_label(&mask)?;
    let id = SampleId::new(format!("img_{index:05}"))?;
    ImageSample::new(id, h, w, 3, pixels, Some(label), Some(mask))
}

/// Write images, masks and `index.tsv` under `dir`. Output bytes depend only on `spec`.
pub fn generate_synthetic_dataset(spec: &SynthSpec, dir: &Path) -> Result<Vec<IndexRecord>> {
    spec.validate()?;
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut records = Vec::with_capacity(spec.n_images);
    for i in 0..spec.n_images {
        let sample = synth_sample(spec, i)?;
        let image_path = Path::new("images").join(format!("{}.png", sample.id));
        let mask_path = Path::new("masks").join(format!("{}.png", sample.id));
        save_image(&dir.join(&image_path), &sample)?;
        save_mask(&dir.join(&mask_path), sample.mask.as_ref().expect("generated with mask"))?;
        records.push(IndexRecord {
            id: sample.id.clone(),
            image_path,
            mask_path: Some(mask_path),
            image_label: sample.image_label.map(|l| l.class_index()),
        });
    }
    let header = IndexHeader { num_classes: Some(spec.num_classes), image_classes: Some(spec.num_classes) };
    write_index(&dir.join(INDEX_FILE), &header, &records)?;
    Ok(records)
}
