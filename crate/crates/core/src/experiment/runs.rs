use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;

use super::config::ExperimentConfig;
use crate::active_learner::{run_active_selection, Manifest, Oracle};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{diversity_report, miou, ConfusionMatrix, DiversityReport};
use crate::pool::{split_train_val, ImageSample, PixelMask, SampleId};
use crate::s4gan::{load_segmenter, run_training, GanTrainer, RunOptions, Segmenter, TrainingSet};
use crate::seed::derive_seed;

pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const SELECTION_LOG_FILE: &str = "selection.log";
pub const SPLIT_FILE: &str = "split.tsv";
pub const MODEL_BASE: &str = "model";
pub const EVAL_FILE: &str = "eval.txt";
pub const DIVERSITY_FILE: &str = "diversity.txt";

/// Write through a sibling temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn prepare_output(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)?;
    let text = format!("# config_hash={}\n{}", cfg.config_hash(), cfg.to_text());
    write_atomic(&cfg.output_dir.join(CONFIG_FILE), &text)
}

/// Training pool and validation ids; a pure function of the dataset ids and seed.
pub fn dataset_split(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<(BTreeSet<SampleId>, BTreeSet<SampleId>)> {
    split_train_val(&dataset.ids(), 1.0 - cfg.eval_split_fraction, derive_seed(cfg.seed, "split"))
}

fn check_disjoint(labeled: &BTreeSet<SampleId>, val: &BTreeSet<SampleId>) -> Result<()> {
    match labeled.intersection(val).next() {
        Some(id) => Err(Error::Leakage(format!("{id} is both selected for labeling and in the validation split"))),
        None => Ok(()),
    }
}

/// Run active selection over the training pool and persist the manifest,
/// the split and the per-iteration log under `output_dir`.
pub fn cmd_select(cfg: &ExperimentConfig) -> Result<Manifest> {
    cfg.validate()?;
    let dataset = Dataset::load(&cfg.dataset_path)?;
    let (train, val) = dataset_split(cfg, &dataset)?;
    let oracle = Oracle::from_dataset(&dataset, &train)?;
    let result = run_active_selection(&cfg.selection_config(), &dataset, &train, &oracle)?;
    let manifest = Manifest::from_selection(&result, &cfg.config_hash(), cfg.seed);
    check_disjoint(&manifest.id_set(), &val)?;

    prepare_output(cfg)?;
    let split: String = dataset
        .ids()
        .iter()
        .map(|id| format!("{id}\t{}\n", if val.contains(id) { "val" } else { "train" }))
        .collect();
    write_atomic(&cfg.output_dir.join(SPLIT_FILE), &split)?;
    let log: String = result.log.iter().map(|r| r.to_line() + "\n").collect();
    write_atomic(&cfg.output_dir.join(SELECTION_LOG_FILE), &log)?;
    write_atomic(&cfg.output_dir.join(MANIFEST_FILE), &manifest.to_text())?;
    log::info!("selected {} of {} training images", manifest.entries.len(), train.len());
    Ok(manifest)
}

pub struct TrainOutcome {
    pub iterations: usize,
    pub checkpoint: PathBuf,
    pub final_buffer_size: usize,
}

/// Train the adversarial segmenter on a manifest. All pre-flight checks run
/// before the first step.
pub fn cmd_train(cfg: &ExperimentConfig, manifest: Option<&Path>, resume: Option<&Path>, stop_after: Option<usize>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest_path = manifest.map_or_else(|| cfg.output_dir.join(MANIFEST_FILE), Path::to_path_buf);
    let manifest = Manifest::read(&manifest_path)?;
    let dataset = Dataset::load(&cfg.dataset_path)?;
    let (train, val) = dataset_split(cfg, &dataset)?;
    for id in manifest.ids() {
        dataset.get(&id)?;
    }
    check_disjoint(&manifest.id_set(), &val)?;
    let set = TrainingSet::new(&dataset, &manifest.ids(), &train)?;
    let gan = cfg.gan_config(dataset.num_classes())?;
    let (channels, _, _) = dataset.uniform_shape().ok_or_else(|| Error::invalid("training needs images of one shape"))?;
    let unlabeled: BTreeSet<SampleId> = set.unlabeled.iter().cloned().collect();
    let mut trainer = GanTrainer::new(gan, channels, derive_seed(cfg.seed, "gan"), unlabeled, DType::F32)?;
    if let Some(base) = resume {
        let header = trainer.load_checkpoint(base)?;
        log::info!("resuming after iteration {}", header.iteration);
    }

    prepare_output(cfg)?;
    let opts = RunOptions { out_dir: Some(cfg.output_dir.clone()), config_hash: cfg.config_hash(), stop_after };
    run_training(&mut trainer, &dataset, &set, &opts)?;
    let checkpoint = cfg.output_dir.join(MODEL_BASE);
    trainer.save_checkpoint(&checkpoint, &cfg.config_hash())?;
    Ok(TrainOutcome { iterations: trainer.iteration(), checkpoint, final_buffer_size: trainer.buffer().len() })
}

/// Anything that maps images to class masks.
pub trait MaskPredictor {
    fn num_classes(&self) -> usize;

    fn predict(&self, images: &[&ImageSample]) -> Result<Vec<PixelMask>>;
}

impl MaskPredictor for Segmenter {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn predict(&self, images: &[&ImageSample]) -> Result<Vec<PixelMask>> {
        self.predict_masks(images)
    }
}

/// Pixel confusion of `predictor` over `ids`.
pub fn evaluate(predictor: &dyn MaskPredictor, dataset: &Dataset, ids: &[SampleId]) -> Result<ConfusionMatrix> {
    if predictor.num_classes() != dataset.num_classes() {
        return Err(Error::shape(format!(
            "model predicts {} classes but the dataset has {}",
            predictor.num_classes(),
            dataset.num_classes()
        )));
    }
    let mut cm = ConfusionMatrix::new(dataset.num_classes());
    let samples: Vec<&ImageSample> = ids.iter().map(|id| dataset.get(id)).collect::<Result<_>>()?;
    for chunk in samples.chunks(16) {
        let preds = predictor.predict(chunk)?;
        for (s, p) in chunk.iter().zip(&preds) {
            cm.accumulate(p, dataset.mask(&s.id)?)?;
        }
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Val,
    Train,
    All,
}

impl fmt::Display for EvalSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalSplit::Val => "val",
            EvalSplit::Train => "train",
            EvalSplit::All => "all",
        })
    }
}

impl std::str::FromStr for EvalSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val" => Ok(EvalSplit::Val),
            "train" => Ok(EvalSplit::Train),
            "all" => Ok(EvalSplit::All),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub split: EvalSplit,
    pub images: usize,
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("split={}\nimages={}\nmiou={}\n", self.split, self.images, self.miou);
        for (k, iou) in self.per_class.iter().enumerate() {
            out.push_str(&format!("iou.{k}={}\n", iou.map_or_else(|| "absent".to_string(), |v| v.to_string())));
        }
        out
    }
}

/// Score `predictor` on a split. Validation scoring first checks that no
/// labeled id of the run's manifest leaked into the split.
pub fn evaluate_split(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    predictor: &dyn MaskPredictor,
    split: EvalSplit,
    manifest: Option<&Manifest>,
) -> Result<EvalReport> {
    let (train, val) = dataset_split(cfg, dataset)?;
    if let Some(m) = manifest {
        check_disjoint(&m.id_set(), &val)?;
    }
    let ids: Vec<SampleId> = match split {
        EvalSplit::Val => val.into_iter().collect(),
        EvalSplit::Train => train.into_iter().collect(),
        EvalSplit::All => dataset.ids().into_iter().collect(),
    };
    let cm = evaluate(predictor, dataset, &ids)?;
    Ok(EvalReport { split, images: ids.len(), miou: miou(&cm)?, per_class: cm.per_class_iou() })
}

pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>, split: EvalSplit, manifest: Option<&Path>) -> Result<EvalReport> {
    cfg.validate()?;
    let base = checkpoint.map_or_else(|| cfg.output_dir.join(MODEL_BASE), Path::to_path_buf);
    let (segmenter, _) = load_segmenter(&base)?;
    let dataset = Dataset::load(&cfg.dataset_path)?;
    let default_manifest = cfg.output_dir.join(MANIFEST_FILE);
    let manifest = match manifest {
        Some(p) => Some(Manifest::read(p)?),
        None if default_manifest.exists() => Some(Manifest::read(&default_manifest)?),
        None => None,
    };
    let report = evaluate_split(cfg, &dataset, &segmenter, split, manifest.as_ref())?;
    fs::create_dir_all(&cfg.output_dir)?;
    write_atomic(&cfg.output_dir.join(EVAL_FILE), &report.to_text())?;
    Ok(report)
}

pub fn diversity_text(report: &DiversityReport) -> String {
    let mut out = format!("shannon={}\nsimpson={}\n", report.shannon, report.simpson);
    for (k, n) in report.histogram.counts.iter().enumerate() {
        out.push_str(&format!("pixels.{k}={n}\n"));
    }
    out
}

pub fn cmd_diversity(cfg: &ExperimentConfig, manifest: Option<&Path>) -> Result<DiversityReport> {
    let path = manifest.map_or_else(|| cfg.output_dir.join(MANIFEST_FILE), Path::to_path_buf);
    let manifest = Manifest::read(&path)?;
    let dataset = Dataset::load(&cfg.dataset_path)?;
    let report = diversity_report(&manifest.ids(), &dataset)?;
    fs::create_dir_all(&cfg.output_dir)?;
    write_atomic(&cfg.output_dir.join(DIVERSITY_FILE), &diversity_text(&report))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub manifest: Manifest,
    pub miou: f64,
    pub shannon: f64,
    pub simpson: f64,
}

/// select -> train -> eval (validation) -> diversity in one output directory.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunMetrics> {
    let manifest = cmd_select(cfg)?;
    cmd_train(cfg, None, None, None)?;
    let eval = cmd_eval(cfg, None, EvalSplit::Val, None)?;
    let div = cmd_diversity(cfg, None)?;
    Ok(RunMetrics { manifest, miou: eval.miou, shannon: div.shannon, simpson: div.simpson })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::synth::{generate_synthetic_dataset, SynthSpec};

    struct Oracle<'a>(&'a Dataset);

    impl MaskPredictor for Oracle<'_> {
        fn num_classes(&self) -> usize {
            self.0.num_classes()
        }

        fn predict(&self, images: &[&ImageSample]) -> Result<Vec<PixelMask>> {
            images.iter().map(|s| self.0.mask(&s.id).cloned()).collect()
        }
    }

    struct Constant(usize, u8);

    impl MaskPredictor for Constant {
        fn num_classes(&self) -> usize {
            self.0
        }

        fn predict(&self, images: &[&ImageSample]) -> Result<Vec<PixelMask>> {
            images.iter().map(|s| PixelMask::filled(s.height(), s.width(), self.0, self.1)).collect()
        }
    }

    fn setup() -> (tempfile::TempDir, ExperimentConfig, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        generate_synthetic_dataset(&SynthSpec { n_images: 30, ..SynthSpec::desk_default(1) }, &data).unwrap();
        let mut cfg = ExperimentConfig { dataset_path: data.clone(), output_dir: dir.path().join("run"), ..Default::default() };
        cfg.selection.learner.epochs_per_teach = 2;
        cfg.selection.labeled_ratio = crate::pool::LabeledRatio::new(0.2).unwrap();
        let ds = Dataset::load(&data).unwrap();
        (dir, cfg, ds)
    }

    #[test]
    fn stub_predictors_bound_the_metric() {
        let (_dir, cfg, ds) = setup();
        let perfect = evaluate_split(&cfg, &ds, &Oracle(&ds), EvalSplit::Val, None).unwrap();
        assert_eq!(perfect.miou, 1.0);
        assert_eq!(perfect.images, 6);

        let constant = evaluate_split(&cfg, &ds, &Constant(4, 0), EvalSplit::All, None).unwrap();
        // Independent arithmetic: class 0 IoU = pixels of class 0 / all pixels;
        // other present classes score 0.
        let mut counts = [0u64; 4];
        for s in ds.samples() {
            for (k, n) in s.mask.as_ref().unwrap().class_counts().iter().enumerate() {
                counts[k] += n;
            }
        }
        let total: u64 = counts.iter().sum();
        let present = counts.iter().filter(|&&n| n > 0).count() as f64;
        assert!((constant.miou - counts[0] as f64 / total as f64 / present).abs() < 1e-12);

        assert!(evaluate(&Constant(3, 0), &ds, &[]).is_err());
    }

    #[test]
    fn leakage_is_caught_before_scoring() {
        let (_dir, cfg, ds) = setup();
        let (_, val) = dataset_split(&cfg, &ds).unwrap();
        let leaked = Manifest { config_hash: String::new(), seed: 0, entries: vec![(val.iter().next().unwrap().clone(), 0)] };
        let err = evaluate_split(&cfg, &ds, &Oracle(&ds), EvalSplit::Val, Some(&leaked)).unwrap_err();
        assert!(matches!(err, Error::Leakage(_)));
    }

    #[test]
    fn select_writes_manifest_and_is_deterministic() {
        let (dir, cfg, _) = setup();
        let m = cmd_select(&cfg).unwrap();
        assert_eq!(m.entries.len(), 4); // floor(0.2 * 24)
        let first = fs::read(cfg.output_dir.join(MANIFEST_FILE)).unwrap();
        let other = ExperimentConfig { output_dir: dir.path().join("again"), ..cfg.clone() };
        cmd_select(&other).unwrap();
        assert_eq!(first, fs::read(other.output_dir.join(MANIFEST_FILE)).unwrap());
        assert!(cfg.output_dir.join(CONFIG_FILE).exists());
        assert!(!cfg.output_dir.join(format!("{MANIFEST_FILE}.tmp")).exists());
    }

    #[test]
    fn failed_select_leaves_no_manifest() {
        let (_dir, mut cfg, _) = setup();
        cfg.selection.labeled_count_override = Some(1000);
        assert!(cmd_select(&cfg).is_err());
        assert!(!cfg.output_dir.join(MANIFEST_FILE).exists());
    }
}
