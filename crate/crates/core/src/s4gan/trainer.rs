use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::buffer::PseudoLabelBuffer;
use super::losses::{
    cross_entropy_from_log_probs, discriminator_loss_from_confidences, feature_matching_from_features,
    generator_loss, one_hot_concat, passes_gate,
};
use super::models::{argmax_masks, Discriminator, SegBackbone, Segmenter};
use super::GanConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, scalar, Adam, Sgd};
use crate::pool::{PixelMask, SampleId};
use crate::seed::{keyed_rng, Rng};

pub const TRAIN_LOG_FILE: &str = "train.log";
pub const PSEUDO_LOG_FILE: &str = "pseudo_labels.log";
pub const NAN_DUMP_FILE: &str = "nan_dump.txt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Images (and, for labeled batches, masks) of one training step.
pub struct Batch {
    pub ids: Vec<SampleId>,
    /// Crop window origin (top, left) per image.
    pub origins: Vec<(usize, usize)>,
    pub images: Tensor,
    pub masks: Vec<PixelMask>,
}

/// Positions into an id list for 0-based `step`. Every epoch is an
/// independent seeded permutation, so batches depend only on (seed, step).
pub fn batch_indices(n: usize, batch: usize, step: usize, seed: u64, key: &str) -> Vec<usize> {
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (0..batch)
        .map(|j| {
            let global = step * batch + j;
            let epoch = global / n;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut keyed_rng(seed, &format!("{key}:epoch:{epoch}")));
                cached = Some((epoch, order));
            }
            cached.as_ref().expect("filled above").1[global % n]
        })
        .collect()
}

pub fn make_batch(
    dataset: &Dataset,
    ids: &[SampleId],
    crop: Option<(usize, usize)>,
    rng: &mut Rng,
    with_masks: bool,
    dtype: DType,
) -> Result<Batch> {
    let first = dataset.get(ids.first().ok_or_else(|| Error::invalid("empty batch"))?)?;
    let c = first.channels();
    let (h, w) = crop.unwrap_or((first.height(), first.width()));
    let mut data = Vec::with_capacity(ids.len() * c * h * w);
    let mut origins = Vec::with_capacity(ids.len());
    let mut masks = Vec::new();
    for id in ids {
        let s = dataset.get(id)?;
        if s.height() < h || s.width() < w || s.channels() != c {
            return Err(Error::shape(format!("image {id} cannot supply a {c}x{h}x{w} window")));
        }
        let top = if s.height() > h { rng.random_range(0..=s.height() - h) } else { 0 };
        let left = if s.width() > w { rng.random_range(0..=s.width() - w) } else { 0 };
        data.extend(s.crop_chw(top, left, h, w)?);
        origins.push((top, left));
        if with_masks {
            masks.push(dataset.mask(id)?.crop(top, left, h, w)?);
        }
    }
    let images = nn::tensor_from_f32(data, &[ids.len(), c, h, w], dtype)?;
    Ok(Batch { ids: ids.to_vec(), origins, images, masks })
}

/// Generator objective and the by-products the step needs.
pub struct GeneratorPass {
    pub total: Tensor,
    pub ce: Tensor,
    pub fm: Tensor,
    pub st: Tensor,
    /// Discriminator confidence per unlabeled image (dropout off).
    pub confidences: Vec<f64>,
    /// Arg-max masks of the unlabeled images.
    pub pseudo_masks: Vec<PixelMask>,
    /// Detached class maps of the unlabeled images.
    pub fake_probs: Option<Tensor>,
}

/// Forward pass of the combined generator loss. The discriminator is used
/// frozen and without dropout; stored pseudo-labels from `buffer` stand in
/// for images that miss the confidence gate this step.
pub fn generator_pass(
    seg: &Segmenter,
    disc: &Discriminator,
    config: &GanConfig,
    buffer: Option<&PseudoLabelBuffer>,
    labeled: &Batch,
    unlabeled: Option<&Batch>,
) -> Result<GeneratorPass> {
    let dtype = seg.dtype();
    let ce = cross_entropy_from_log_probs(&seg.forward_log_probs(&labeled.images, true)?, &labeled.masks)?;
    let Some(u) = unlabeled else {
        let zero = scalar(0.0, dtype)?;
        let total = generator_loss(&ce, &zero, &zero, config.lambda_fm, config.lambda_st)?;
        return Ok(GeneratorPass { total, ce, fm: zero.clone(), st: zero, confidences: vec![], pseudo_masks: vec![], fake_probs: None });
    };

    let logp = seg.forward_log_probs(&u.images, true)?;
    let probs = logp.exp()?;
    let real = disc.features(&one_hot_concat(&labeled.images, &labeled.masks, seg.num_classes)?, None)?.detach();
    let fake = disc.features(&Tensor::cat(&[&u.images, &probs], 1)?, None)?;
    let fm = feature_matching_from_features(&real, &fake, config.fm_norm)?;
    let confidences = nn::to_vec_f64(&disc.confidence_from_features(&fake.detach())?)?;
    let fake_probs = probs.detach();
    let pseudo_masks = argmax_masks(&fake_probs)?;

    let n = u.ids.len();
    let mut st = scalar(0.0, dtype)?;
    for i in 0..n {
        let target = if passes_gate(confidences[i], config.tau) {
            Some(pseudo_masks[i].clone())
        } else {
            match buffer.and_then(|b| b.get(&u.ids[i])) {
                Some(entry) if entry.origin == u.origins[i] => {
                    let m = entry.mask()?;
                    (m.height() == pseudo_masks[i].height() && m.width() == pseudo_masks[i].width()).then_some(m)
                }
                _ => None,
            }
        };
        if let Some(mask) = target {
            if mask.labeled_pixels() > 0 {
                st = (st + cross_entropy_from_log_probs(&logp.narrow(0, i, 1)?, &[mask])?)?;
            }
        }
    }
    let st = st.affine(1.0 / n as f64, 0.0)?;
    let total = generator_loss(&ce, &fm, &st, config.lambda_fm, config.lambda_st)?;
    Ok(GeneratorPass { total, ce, fm, st, confidences, pseudo_masks, fake_probs: Some(fake_probs) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    pub ce: f64,
    pub fm: f64,
    pub st: f64,
    pub d_loss: f64,
    pub buffer_size: usize,
    /// Unlabeled images whose prediction entered the buffer, with confidence.
    pub inserted: Vec<(SampleId, f64)>,
}

impl StepReport {
    /// `<iteration>\t<L_ce>\t<L_fm>\t<L_st>\t<L_D>\t<buffer_size>`
    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}\t{}\t{}\t{}", self.iteration, self.ce, self.fm, self.st, self.d_loss, self.buffer_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub iteration: usize,
    pub seed: u64,
    pub config_hash: String,
    pub in_channels: usize,
    pub num_classes: usize,
    pub backbone: String,
    pub seg_width: usize,
    pub disc_channels: Vec<usize>,
    pub dtype: String,
}

fn dtype_name(dtype: DType) -> &'static str {
    match dtype {
        DType::F64 => "f64",
        _ => "f32",
    }
}

fn parse_dtype(name: &str) -> Result<DType> {
    match name {
        "f64" => Ok(DType::F64),
        "f32" => Ok(DType::F32),
        other => Err(Error::invalid(format!("unsupported checkpoint dtype {other}"))),
    }
}

fn checkpoint_paths(base: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let with = |ext: &str| {
        let mut s = base.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".safetensors"), with(".json"), with(".buffer.json"))
}

/// Segmenter, discriminator, their optimizers and the pseudo-label buffer.
pub struct GanTrainer {
    config: GanConfig,
    seed: u64,
    in_channels: usize,
    pub segmenter: Segmenter,
    pub discriminator: Discriminator,
    gen_opt: Sgd,
    disc_opt: Adam,
    buffer: PseudoLabelBuffer,
    iteration: usize,
}

impl GanTrainer {
    pub fn new(config: GanConfig, in_channels: usize, seed: u64, unlabeled: BTreeSet<SampleId>, dtype: DType) -> Result<Self> {
        config.validate()?;
        let segmenter = Segmenter::new(
            config.backbone,
            in_channels,
            config.num_classes,
            config.seg_width,
            dtype,
            &mut keyed_rng(seed, "segmenter-init"),
        )?;
        let discriminator = Discriminator::new(
            in_channels + config.num_classes,
            &config.disc_channels,
            config.disc_dropout,
            dtype,
            &mut keyed_rng(seed, "discriminator-init"),
        )?;
        let gen_opt = Sgd::new(config.gen_lr, config.gen_momentum, config.gen_weight_decay, segmenter.store.trainable().len());
        let disc_opt = Adam::new(config.disc_lr, discriminator.store.trainable().len());
        let buffer = PseudoLabelBuffer::new(config.tau, unlabeled);
        Ok(Self { config, seed, in_channels, segmenter, discriminator, gen_opt, disc_opt, buffer, iteration: 0 })
    }

    pub fn config(&self) -> &GanConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of completed steps.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn buffer(&self) -> &PseudoLabelBuffer {
        &self.buffer
    }

    /// One segmenter update followed by one discriminator update.
    pub fn train_step(&mut self, labeled: &Batch, unlabeled: Option<&Batch>) -> Result<StepReport> {
        let iteration = self.iteration + 1;
        let buffer = (!self.config.ephemeral_st).then_some(&self.buffer);
        let pass = generator_pass(&self.segmenter, &self.discriminator, &self.config, buffer, labeled, unlabeled)?;
        let (ce, fm, st) = (nn::to_f64(&pass.ce)?, nn::to_f64(&pass.fm)?, nn::to_f64(&pass.st)?);
        let total = nn::to_f64(&pass.total)?;
        if !total.is_finite() {
            return Err(Error::NonFinite { iteration, detail: format!("L_ce={ce} L_fm={fm} L_st={st}") });
        }
        self.gen_opt.lr = self.config.gen_lr_at(iteration);
        self.gen_opt.step(&self.segmenter.store.trainable(), &pass.total.backward()?)?;

        let mut rng = keyed_rng(self.seed, &format!("disc-dropout:{iteration}"));
        let k = self.config.num_classes;
        let real = self.discriminator.confidence(&one_hot_concat(&labeled.images, &labeled.masks, k)?, Some(&mut rng))?;
        let fake = match (unlabeled, &pass.fake_probs) {
            (Some(u), Some(p)) => Some(self.discriminator.confidence(&Tensor::cat(&[&u.images, p], 1)?, Some(&mut rng))?),
            _ => None,
        };
        let d = discriminator_loss_from_confidences(&real, fake.as_ref())?;
        let d_loss = nn::to_f64(&d)?;
        if !d_loss.is_finite() {
            return Err(Error::NonFinite { iteration, detail: format!("L_D={d_loss}") });
        }
        self.disc_opt.step(&self.discriminator.store.trainable(), &d.backward()?)?;

        let mut inserted = Vec::new();
        if let Some(u) = unlabeled {
            for (i, id) in u.ids.iter().enumerate() {
                let conf = pass.confidences[i];
                if !passes_gate(conf, self.config.tau) {
                    continue;
                }
                let stored = if self.config.ephemeral_st {
                    true
                } else {
                    self.buffer.offer(id, &pass.pseudo_masks[i], u.origins[i], conf, iteration)?
                };
                if stored {
                    inserted.push((id.clone(), conf));
                }
            }
        }
        self.iteration = iteration;
        Ok(StepReport { iteration, ce, fm, st, d_loss, buffer_size: self.buffer.len(), inserted })
    }

    pub fn header(&self, config_hash: &str) -> CheckpointHeader {
        CheckpointHeader {
            iteration: self.iteration,
            seed: self.seed,
            config_hash: config_hash.to_string(),
            in_channels: self.in_channels,
            num_classes: self.config.num_classes,
            backbone: self.config.backbone.to_string(),
            seg_width: self.config.seg_width,
            disc_channels: self.config.disc_channels.clone(),
            dtype: dtype_name(self.segmenter.dtype()).to_string(),
        }
    }

    /// Writes `<base>.safetensors`, `<base>.json` and `<base>.buffer.json`.
    pub fn save_checkpoint(&self, base: &Path, config_hash: &str) -> Result<()> {
        if let Some(dir) = base.parent() {
            fs::create_dir_all(dir)?;
        }
        let (weights, header, buffer) = checkpoint_paths(base);
        let mut tensors = self.segmenter.store.named_tensors("seg.");
        tensors.extend(self.discriminator.store.named_tensors("disc."));
        tensors.extend(self.gen_opt.state("gen_opt."));
        tensors.extend(self.disc_opt.state("disc_opt.")?);
        nn::save_tensors(&weights, tensors)?;
        fs::write(header, serde_json::to_string_pretty(&self.header(config_hash))?)?;
        fs::write(buffer, self.buffer.to_json()?)?;
        Ok(())
    }

    /// Restore a checkpoint written by a trainer of the same architecture.
    pub fn load_checkpoint(&mut self, base: &Path) -> Result<CheckpointHeader> {
        let (weights, header_path, buffer) = checkpoint_paths(base);
        let header: CheckpointHeader = serde_json::from_str(&fs::read_to_string(header_path)?)?;
        let mine = self.header(&header.config_hash);
        if (header.in_channels, header.num_classes, &header.backbone, header.seg_width, &header.disc_channels)
            != (mine.in_channels, mine.num_classes, &mine.backbone, mine.seg_width, &mine.disc_channels)
        {
            return Err(Error::config("checkpoint architecture differs from the configured model"));
        }
        let tensors = nn::load_tensors(&weights)?;
        self.segmenter.store.load_from(&tensors, "seg.")?;
        self.discriminator.store.load_from(&tensors, "disc.")?;
        self.gen_opt.load_state(&tensors, "gen_opt.");
        self.disc_opt.load_state(&tensors, "disc_opt.")?;
        self.buffer = PseudoLabelBuffer::from_json(&fs::read_to_string(buffer)?)?;
        self.iteration = header.iteration;
        Ok(header)
    }

    fn write_dump(&self, path: &Path, err: &Error, labeled: &[SampleId], unlabeled: &[SampleId]) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("error\t{err}\ncompleted_iterations\t{}\n", self.iteration));
        let join = |ids: &[SampleId]| ids.iter().map(|i| i.as_str()).collect::<Vec<_>>().join(",");
        out.push_str(&format!("labeled_batch\t{}\nunlabeled_batch\t{}\n", join(labeled), join(unlabeled)));
        out.push_str(&format!("gen_lr\t{}\nbuffer_size\t{}\n", self.config.gen_lr_at(self.iteration + 1), self.buffer.len()));
        for (model, store) in [("segmenter", &self.segmenter.store), ("discriminator", &self.discriminator.store)] {
            let values = store.flat_values()?;
            let bad = values.iter().filter(|v| !v.is_finite()).count();
            let norm = values.iter().filter(|v| v.is_finite()).map(|v| v * v).sum::<f64>().sqrt();
            out.push_str(&format!("{model}\tparams={}\tnon_finite={bad}\tnorm={norm}\n", values.len()));
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Rebuild a segmenter from a checkpoint for inference.
pub fn load_segmenter(base: &Path) -> Result<(Segmenter, CheckpointHeader)> {
    let (weights, header_path, _) = checkpoint_paths(base);
    let header: CheckpointHeader = serde_json::from_str(&fs::read_to_string(&header_path)?)?;
    let backbone: SegBackbone = header.backbone.parse()?;
    let seg = Segmenter::new(
        backbone,
        header.in_channels,
        header.num_classes,
        header.seg_width,
        parse_dtype(&header.dtype)?,
        &mut keyed_rng(header.seed, "segmenter-init"),
    )?;
    let tensors: HashMap<String, Tensor> = nn::load_tensors(&weights)?;
    seg.store.load_from(&tensors, "seg.")?;
    Ok((seg, header))
}

/// Labeled and unlabeled partitions of the training pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingSet {
    pub labeled: Vec<SampleId>,
    pub unlabeled: Vec<SampleId>,
}

impl TrainingSet {
    /// Labeled ids come from a selection manifest; every other id of the
    /// training pool is unlabeled. Labeled images must carry masks.
    pub fn new(dataset: &Dataset, labeled: &[SampleId], train_pool: &BTreeSet<SampleId>) -> Result<Self> {
        let labeled_set: BTreeSet<SampleId> = labeled.iter().cloned().collect();
        if labeled_set.is_empty() {
            return Err(Error::invalid("training needs at least one labeled image"));
        }
        if let Some(outside) = labeled_set.iter().find(|id| !train_pool.contains(*id)) {
            return Err(Error::Leakage(format!("labeled id {outside} is not in the training pool")));
        }
        for id in &labeled_set {
            dataset.mask(id)?;
        }
        Ok(Self {
            labeled: labeled_set.iter().cloned().collect(),
            unlabeled: train_pool.difference(&labeled_set).cloned().collect(),
        })
    }
}

pub struct RunOptions {
    /// Directory for logs, periodic checkpoints and failure dumps.
    pub out_dir: Option<PathBuf>,
    pub config_hash: String,
    /// Stop after this many completed iterations (simulates an interruption).
    pub stop_after: Option<usize>,
}

fn truncate_log(path: &Path, keep_through: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let kept: String = text
        .lines()
        .filter(|l| l.split('\t').next().and_then(|i| i.parse::<usize>().ok()).is_some_and(|i| i <= keep_through))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(path, kept)?;
    Ok(())
}

fn open_log(path: &Path) -> Result<File> {
    Ok(OpenOptions::new().create(true).append(true).open(path)?)
}

/// Train until `config.iterations` steps have completed, continuing from
/// the trainer's current iteration. Logs are append-only; rows beyond a
/// resumed checkpoint are discarded first.
pub fn run_training(trainer: &mut GanTrainer, dataset: &Dataset, set: &TrainingSet, opts: &RunOptions) -> Result<Vec<StepReport>> {
    let cfg = trainer.config().clone();
    let seed = trainer.seed();
    let dtype = trainer.segmenter.dtype();
    let mut logs = None;
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
        truncate_log(&dir.join(TRAIN_LOG_FILE), trainer.iteration())?;
        truncate_log(&dir.join(PSEUDO_LOG_FILE), trainer.iteration())?;
        logs = Some((open_log(&dir.join(TRAIN_LOG_FILE))?, open_log(&dir.join(PSEUDO_LOG_FILE))?));
    }

    let mut reports = Vec::new();
    while trainer.iteration() < cfg.iterations {
        if opts.stop_after.is_some_and(|n| trainer.iteration() >= n) {
            break;
        }
        let step = trainer.iteration();
        let mut crop_rng = keyed_rng(seed, &format!("crop:{step}"));
        let pick = |ids: &[SampleId], key: &str| -> Vec<SampleId> {
            batch_indices(ids.len(), cfg.batch_size, step, seed, key).into_iter().map(|i| ids[i].clone()).collect()
        };
        let labeled_ids = pick(&set.labeled, "labeled");
        let unlabeled_ids = if set.unlabeled.is_empty() { vec![] } else { pick(&set.unlabeled, "unlabeled") };
        let labeled = make_batch(dataset, &labeled_ids, cfg.crop_size, &mut crop_rng, true, dtype)?;
        let unlabeled = if unlabeled_ids.is_empty() {
            None
        } else {
            Some(make_batch(dataset, &unlabeled_ids, cfg.crop_size, &mut crop_rng, false, dtype)?)
        };

        let report = match trainer.train_step(&labeled, unlabeled.as_ref()) {
            Ok(r) => r,
            Err(err @ Error::NonFinite { .. }) => {
                if let Some(dir) = &opts.out_dir {
                    trainer.write_dump(&dir.join(NAN_DUMP_FILE), &err, &labeled_ids, &unlabeled_ids)?;
                }
                return Err(err);
            }
            Err(other) => return Err(other),
        };
        if let Some((train_log, pseudo_log)) = logs.as_mut() {
            writeln!(train_log, "{}", report.to_line())?;
            for (id, conf) in &report.inserted {
                writeln!(pseudo_log, "{}\t{id}\t{conf}", report.iteration)?;
            }
            train_log.flush()?;
            pseudo_log.flush()?;
        }
        if let Some(dir) = &opts.out_dir {
            if cfg.checkpoint_every > 0 && report.iteration % cfg.checkpoint_every == 0 {
                let base = dir.join(CHECKPOINT_DIR).join(format!("iter_{:06}", report.iteration));
                trainer.save_checkpoint(&base, &opts.config_hash)?;
            }
        }
        log::debug!("{}", report.to_line());
        reports.push(report);
    }
    Ok(reports)
}
