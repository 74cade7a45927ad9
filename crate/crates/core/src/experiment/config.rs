use std::path::{Path, PathBuf};

use crate::active_learner::{LearnerSpec, SelectionConfig};
use crate::error::{Error, Result};
use crate::pool::LabeledRatio;
use crate::s4gan::GanConfig;
use crate::seed::short_hash;
use crate::strategies::Strategy;

/// Named bundles of hyperparameters applied before file and flag overrides.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Selection and adversarial-training weights used for the published experiments.
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            other => Err(Error::config(format!("unknown preset {other:?}"))),
        }
    }
}

/// Everything a select / train / eval run depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub selection: SelectionConfig,
    /// `num_classes == 0` means "take it from the dataset".
    pub gan: GanConfig,
    pub dataset_path: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Share of the dataset held out for validation.
    pub eval_split_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            selection: SelectionConfig::new(0.05, Strategy::Entropy, 0).expect("valid default ratio"),
            gan: GanConfig::new(0),
            dataset_path: PathBuf::from("data"),
            output_dir: PathBuf::from("runs"),
            seed: 0,
            eval_split_fraction: 0.2,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_pair(key: &str, value: &str) -> Result<Option<(usize, usize)>> {
    if value == "none" {
        return Ok(None);
    }
    let (h, w) = value.split_once('x').ok_or_else(|| Error::config(format!("{key}: expected HxW, got {value:?}")))?;
    Ok(Some((parse(key, h)?, parse(key, w)?)))
}

fn show_optional<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

impl ExperimentConfig {
    pub fn apply_preset(&mut self, preset: Preset) {
        match preset {
            Preset::Paper => {
                self.selection.alpha_init = 0.1;
                self.selection.beta_q = 0.5;
                self.gan.tau = 0.6;
                self.gan.lambda_fm = 0.1;
                self.gan.lambda_st = 1.0;
            }
        }
    }

    /// Set one dotted key, e.g. `selection.alpha_init=0.1`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let sel = &mut self.selection;
        let learner: &mut LearnerSpec = &mut sel.learner;
        let gan = &mut self.gan;
        match key.trim() {
            "seed" => self.seed = parse(key, value)?,
            "dataset_path" => self.dataset_path = PathBuf::from(value),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "eval_split_fraction" => self.eval_split_fraction = parse(key, value)?,
            "selection.labeled_ratio" => sel.labeled_ratio = LabeledRatio::new(parse(key, value)?).map_err(|e| Error::config(e.to_string()))?,
            "selection.labeled_count" => sel.labeled_count_override = parse_optional(key, value)?,
            "selection.alpha_init" => sel.alpha_init = parse(key, value)?,
            "selection.beta_q" => sel.beta_q = parse(key, value)?,
            "selection.strategy" => sel.strategy = value.parse().map_err(|e: Error| Error::config(e.to_string()))?,
            "selection.learner.architecture" => learner.architecture = value.parse().map_err(|e: Error| Error::config(e.to_string()))?,
            "selection.learner.epochs" => learner.epochs_per_teach = parse(key, value)?,
            "selection.learner.batch_size" => learner.batch_size = parse(key, value)?,
            "selection.learner.lr" => learner.base_lr = parse(key, value)?,
            "selection.learner.momentum" => learner.momentum = parse(key, value)?,
            "selection.learner.lr_step_epochs" => learner.lr_step_epochs = parse(key, value)?,
            "selection.learner.lr_step_factor" => learner.lr_step_factor = parse(key, value)?,
            "selection.learner.reinit" => learner.reinit_each_teach = parse(key, value)?,
            "gan.num_classes" => gan.num_classes = if value == "auto" { 0 } else { parse(key, value)? },
            "gan.iterations" => gan.iterations = parse(key, value)?,
            "gan.batch_size" => gan.batch_size = parse(key, value)?,
            "gan.crop_size" => gan.crop_size = parse_pair(key, value)?,
            "gan.lambda_fm" => gan.lambda_fm = parse(key, value)?,
            "gan.lambda_st" => gan.lambda_st = parse(key, value)?,
            "gan.tau" => gan.tau = parse(key, value)?,
            "gan.gen_lr" => gan.gen_lr = parse(key, value)?,
            "gan.gen_momentum" => gan.gen_momentum = parse(key, value)?,
            "gan.gen_weight_decay" => gan.gen_weight_decay = parse(key, value)?,
            "gan.poly_power" => gan.poly_power = parse_optional(key, value)?,
            "gan.disc_lr" => gan.disc_lr = parse(key, value)?,
            "gan.fm_norm" => gan.fm_norm = value.parse()?,
            "gan.ephemeral_st" => gan.ephemeral_st = parse(key, value)?,
            "gan.backbone" => gan.backbone = value.parse()?,
            "gan.seg_width" => gan.seg_width = parse(key, value)?,
            "gan.disc_channels" => {
                gan.disc_channels = value.split(',').map(|v| parse(key, v.trim())).collect::<Result<_>>()?;
            }
            "gan.disc_dropout" => gan.disc_dropout = parse(key, value)?,
            "gan.checkpoint_every" => gan.checkpoint_every = parse(key, value)?,
            other => return Err(Error::config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Apply `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let sel = &self.selection;
        let l = &sel.learner;
        let g = &self.gan;
        vec![
            ("seed", self.seed.to_string()),
            ("dataset_path", self.dataset_path.display().to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("eval_split_fraction", self.eval_split_fraction.to_string()),
            ("selection.labeled_ratio", sel.labeled_ratio.value().to_string()),
            ("selection.labeled_count", show_optional(&sel.labeled_count_override)),
            ("selection.alpha_init", sel.alpha_init.to_string()),
            ("selection.beta_q", sel.beta_q.to_string()),
            ("selection.strategy", sel.strategy.to_string()),
            ("selection.learner.architecture", l.architecture.to_string()),
            ("selection.learner.epochs", l.epochs_per_teach.to_string()),
            ("selection.learner.batch_size", l.batch_size.to_string()),
            ("selection.learner.lr", l.base_lr.to_string()),
            ("selection.learner.momentum", l.momentum.to_string()),
            ("selection.learner.lr_step_epochs", l.lr_step_epochs.to_string()),
            ("selection.learner.lr_step_factor", l.lr_step_factor.to_string()),
            ("selection.learner.reinit", l.reinit_each_teach.to_string()),
            ("gan.num_classes", if g.num_classes == 0 { "auto".into() } else { g.num_classes.to_string() }),
            ("gan.iterations", g.iterations.to_string()),
            ("gan.batch_size", g.batch_size.to_string()),
            ("gan.crop_size", g.crop_size.map_or_else(|| "none".into(), |(h, w)| format!("{h}x{w}"))),
            ("gan.lambda_fm", g.lambda_fm.to_string()),
            ("gan.lambda_st", g.lambda_st.to_string()),
            ("gan.tau", g.tau.to_string()),
            ("gan.gen_lr", g.gen_lr.to_string()),
            ("gan.gen_momentum", g.gen_momentum.to_string()),
            ("gan.gen_weight_decay", g.gen_weight_decay.to_string()),
            ("gan.poly_power", show_optional(&g.poly_power)),
            ("gan.disc_lr", g.disc_lr.to_string()),
            ("gan.fm_norm", g.fm_norm.to_string()),
            ("gan.ephemeral_st", g.ephemeral_st.to_string()),
            ("gan.backbone", g.backbone.to_string()),
            ("gan.seg_width", g.seg_width.to_string()),
            ("gan.disc_channels", g.disc_channels.iter().map(usize::to_string).collect::<Vec<_>>().join(",")),
            ("gan.disc_dropout", g.disc_dropout.to_string()),
            ("gan.checkpoint_every", g.checkpoint_every.to_string()),
        ]
    }

    /// Effective configuration as `key=value` lines; parses back to `self`.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Hash of every setting except filesystem locations.
    pub fn config_hash(&self) -> String {
        let text: String = self
            .entries()
            .into_iter()
            .filter(|(k, _)| !matches!(*k, "dataset_path" | "output_dir"))
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        short_hash(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let mut selection = self.selection.clone();
        selection.seed = self.seed;
        selection.validate()?;
        if !(self.eval_split_fraction > 0.0 && self.eval_split_fraction < 1.0) {
            return Err(Error::config(format!("eval_split_fraction = {} outside (0, 1)", self.eval_split_fraction)));
        }
        let mut gan = self.gan.clone();
        if gan.num_classes == 0 {
            gan.num_classes = 2;
        }
        gan.validate()
    }

    /// Selection settings with the root seed.
    pub fn selection_config(&self) -> SelectionConfig {
        SelectionConfig { seed: self.seed, ..self.selection.clone() }
    }

    /// GAN settings with the class count resolved against a dataset.
    pub fn gan_config(&self, dataset_classes: usize) -> Result<GanConfig> {
        let mut gan = self.gan.clone();
        if gan.num_classes == 0 {
            gan.num_classes = dataset_classes;
        } else if gan.num_classes != dataset_classes {
            return Err(Error::config(format!(
                "gan.num_classes = {} but the dataset has {dataset_classes} classes",
                gan.num_classes
            )));
        }
        gan.validate()?;
        Ok(gan)
    }
}
