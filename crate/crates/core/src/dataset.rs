//! On-disk dataset layout: a directory of images and masks plus `index.tsv`.
//!
//! Each index record is `<sample_id>\t<image_path>\t<mask_path|->\t<image_label|->`,
//! with paths relative to the dataset directory. Lines starting with `#` are
//! comments; `# num_classes=K` and `# image_classes=C` declare class counts.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pool::{derive_image_label, ImageLabel, ImageSample, PixelMask, SampleId, IGNORE};

pub const INDEX_FILE: &str = "index.tsv";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexRecord {
    pub id: SampleId,
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub image_label: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IndexHeader {
    pub num_classes: Option<usize>,
    pub image_classes: Option<usize>,
}

pub fn read_index(path: &Path) -> Result<(IndexHeader, Vec<IndexRecord>)> {
    let text = fs::read_to_string(path)?;
    let parse_err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut header = IndexHeader::default();
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((k, v)) = comment.trim().split_once('=') {
                let parsed = v.trim().parse::<usize>().ok();
                match k.trim() {
                    "num_classes" => header.num_classes = parsed,
                    "image_classes" => header.image_classes = parsed,
                    _ => {}
                }
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_err(line_no, format!("expected 4 tab-separated fields, got {}", fields.len())));
        }
        let id = SampleId::new(fields[0]).map_err(|e| parse_err(line_no, e.to_string()))?;
        if !seen.insert(id.clone()) {
            return Err(parse_err(line_no, format!("duplicate sample id {id}")));
        }
        fn optional(s: &str) -> Option<&str> {
            (s != "-").then_some(s)
        }
        let image_label = match optional(fields[3]) {
            None => None,
            Some(s) => Some(s.parse::<usize>().map_err(|_| parse_err(line_no, format!("bad image label {s:?}")))?),
        };
        records.push(IndexRecord {
            id,
            image_path: PathBuf::from(fields[1]),
            mask_path: optional(fields[2]).map(PathBuf::from),
            image_label,
        });
    }
    Ok((header, records))
}

pub fn write_index(path: &Path, header: &IndexHeader, records: &[IndexRecord]) -> Result<()> {
    let mut out = String::new();
    if let Some(k) = header.num_classes {
        out.push_str(&format!("# num_classes={k}\n"));
    }
    if let Some(c) = header.image_classes {
        out.push_str(&format!("# image_classes={c}\n"));
    }
    for r in records {
        let mask = r.mask_path.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "-".into());
        let label = r.image_label.map(|l| l.to_string()).unwrap_or_else(|| "-".into());
        out.push_str(&format!("{}\t{}\t{}\t{}\n", r.id, r.image_path.display(), mask, label));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Read an image as channel-last intensities in [0,1]. Grayscale stays single
/// channel; everything else becomes RGB.
pub fn load_image(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img {
        image::DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
        other => (3, other.to_rgb8().into_raw()),
    };
    Ok((h, w, channels, raw.into_iter().map(|v| v as f32 / 255.0).collect()))
}

pub fn load_mask(path: &Path, num_classes: usize) -> Result<PixelMask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    PixelMask::new(h, w, num_classes, img.into_raw())
}

pub fn save_mask(path: &Path, mask: &PixelMask) -> Result<()> {
    let img = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.classes().to_vec())
        .ok_or_else(|| Error::shape("mask buffer size"))?;
    img.save(path)?;
    Ok(())
}

/// Quantizes to 8 bits per channel.
pub fn save_image(path: &Path, sample: &ImageSample) -> Result<()> {
    let bytes: Vec<u8> = sample.pixels().iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let (w, h) = (sample.width() as u32, sample.height() as u32);
    match sample.channels() {
        1 => image::GrayImage::from_raw(w, h, bytes).ok_or_else(|| Error::shape("image buffer"))?.save(path)?,
        3 => image::RgbImage::from_raw(w, h, bytes).ok_or_else(|| Error::shape("image buffer"))?.save(path)?,
        c => return Err(Error::invalid(format!("cannot encode {c}-channel image"))),
    }
    Ok(())
}

/// Fully loaded dataset, ordered by sample id.
#[derive(Clone, Debug)]
pub struct Dataset {
    samples: BTreeMap<SampleId, ImageSample>,
    num_classes: usize,
    image_classes: usize,
}

impl Dataset {
    pub fn from_samples(samples: Vec<ImageSample>, num_classes: usize, image_classes: usize) -> Result<Self> {
        if num_classes == 0 || image_classes == 0 {
            return Err(Error::invalid("class counts must be positive"));
        }
        let mut map = BTreeMap::new();
        for s in samples {
            if let Some(m) = &s.mask {
                if m.num_classes() != num_classes {
                    return Err(Error::invalid(format!("mask of {} has {} classes, dataset has {num_classes}", s.id, m.num_classes())));
                }
            }
            if let Some(l) = s.image_label {
                ImageLabel::new(l.class_index(), image_classes)?;
            }
            let id = s.id.clone();
            if map.insert(id.clone(), s).is_some() {
                return Err(Error::invalid(format!("duplicate sample id {id}")));
            }
        }
        Ok(Self { samples: map, num_classes, image_classes })
    }

    /// Load `dir/index.tsv` and every referenced file. When the header lacks
    /// class counts they are inferred from the largest observed values.
    pub fn load(dir: &Path) -> Result<Self> {
        let (header, records) = read_index(&dir.join(INDEX_FILE))?;
        let mut raw_masks = Vec::with_capacity(records.len());
        for r in &records {
            let mask = match &r.mask_path {
                Some(p) => Some(image::open(dir.join(p))?.to_luma8()),
                None => None,
            };
            raw_masks.push(mask);
        }
        let num_classes = match header.num_classes {
            Some(k) => k,
            None => {
                let max = raw_masks
                    .iter()
                    .flatten()
                    .flat_map(|m| m.as_raw().iter().copied())
                    .filter(|&v| v != IGNORE)
                    .max();
                max.map(|m| m as usize + 1)
                    .or_else(|| records.iter().filter_map(|r| r.image_label).max().map(|m| m + 1))
                    .ok_or_else(|| Error::config("cannot infer class count from an unlabeled dataset"))?
            }
        };
        let image_classes = header
            .image_classes
            .or_else(|| records.iter().filter_map(|r| r.image_label).max().map(|m| (m + 1).max(num_classes)))
            .unwrap_or(num_classes);

        let mut samples = Vec::with_capacity(records.len());
        for (r, raw_mask) in records.into_iter().zip(raw_masks) {
            let (h, w, c, pixels) = load_image(&dir.join(&r.image_path))?;
            let mask = match raw_mask {
                Some(m) => Some(PixelMask::new(m.height() as usize, m.width() as usize, num_classes, m.into_raw())?),
                None => None,
            };
            let image_label = r.image_label.map(|l| ImageLabel::new(l, image_classes)).transpose()?;
            samples.push(ImageSample::new(r.id, h, w, c, pixels, image_label, mask)?);
        }
        Self::from_samples(samples, num_classes, image_classes)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_classes(&self) -> usize {
        self.image_classes
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> BTreeSet<SampleId> {
        self.samples.keys().cloned().collect()
    }

    pub fn get(&self, id: &SampleId) -> Result<&ImageSample> {
        self.samples.get(id).ok_or_else(|| Error::UnknownSample(id.to_string()))
    }

    pub fn samples(&self) -> impl Iterator<Item = &ImageSample> {
        self.samples.values()
    }

    pub fn mask(&self, id: &SampleId) -> Result<&PixelMask> {
        self.get(id)?.mask.as_ref().ok_or_else(|| Error::MissingMask(id.to_string()))
    }

    /// Image-level label: the stored one, else the mask's majority class.
    pub fn image_label(&self, id: &SampleId) -> Result<ImageLabel> {
        let s = self.get(id)?;
        match (s.image_label, &s.mask) {
            (Some(l), _) => Ok(l),
            (None, Some(m)) => derive_image_label(m)
                .map_err(|_| Error::Unlabelable(id.to_string()))
                .and_then(|l| ImageLabel::new(l.class_index(), self.image_classes)),
            (None, None) => Err(Error::Unlabelable(id.to_string())),
        }
    }

    /// (channels, height, width) when every image shares them.
    pub fn uniform_shape(&self) -> Option<(usize, usize, usize)> {
        let mut it = self.samples.values().map(|s| (s.channels(), s.height(), s.width()));
        let first = it.next()?;
        it.all(|s| s == first).then_some(first)
    }
}
