//! Interleaved query / teach loop that picks which pool images get labels.
//!
//! The learner is seeded with a uniformly drawn initial pool whose size is a
//! fraction `alpha_init` of the labeling budget, then repeatedly ranks the
//! remaining pool with a query strategy, buys labels for the top `N_Q`
//! samples from the oracle and retrains, until the budget is exactly spent.

mod learner;
mod manifest;

use std::collections::{BTreeSet, HashMap};

use rand::seq::IndexedRandom;

pub use learner::{images_to_tensor, learner_seed, CnnLearner, Learner};
pub use manifest::{parse_manifest, Manifest};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nets::Architecture;
use crate::pool::{ceil_product, floor_product, target_labeled_count, ImageLabel, ImageSample, LabeledRatio, PoolPartition, SampleId};
use crate::seed::{derive_seed, rng_from_seed};
use crate::strategies::{rank, select_top_q, PredictionScores, Strategy};

#[derive(Clone, Debug, PartialEq)]
pub struct LearnerSpec {
    pub architecture: Architecture,
    pub epochs_per_teach: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub lr_step_epochs: usize,
    pub lr_step_factor: f64,
    /// Re-initialize parameters before every teach instead of warm-starting.
    pub reinit_each_teach: bool,
}

impl Default for LearnerSpec {
    fn default() -> Self {
        Self {
            architecture: Architecture::SmallCnn,
            epochs_per_teach: 50,
            batch_size: 4,
            base_lr: 0.001,
            momentum: 0.9,
            lr_step_epochs: 7,
            lr_step_factor: 0.1,
            reinit_each_teach: false,
        }
    }
}

impl LearnerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_teach == 0 || self.batch_size == 0 || self.lr_step_epochs == 0 {
            return Err(Error::config("learner epochs, batch size and lr step must be at least 1"));
        }
        if !(self.base_lr > 0.0) || !(self.lr_step_factor > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("learner rates must be positive and momentum in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionConfig {
    pub labeled_ratio: LabeledRatio,
    /// Fixed labeling budget, replacing floor(R * N) when set.
    pub labeled_count_override: Option<usize>,
    pub alpha_init: f64,
    pub beta_q: f64,
    pub strategy: Strategy,
    pub seed: u64,
    pub learner: LearnerSpec,
}

impl SelectionConfig {
    pub fn new(labeled_ratio: f64, strategy: Strategy, seed: u64) -> Result<Self> {
        Ok(Self {
            labeled_ratio: LabeledRatio::new(labeled_ratio)?,
            labeled_count_override: None,
            alpha_init: 0.1,
            beta_q: 0.5,
            strategy,
            seed,
            learner: LearnerSpec::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha_init", self.alpha_init), ("beta_q", self.beta_q)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::config(format!("{name} = {v} outside (0, 1]")));
            }
        }
        if self.labeled_count_override == Some(0) {
            return Err(Error::config("labeled count override must be at least 1"));
        }
        self.learner.validate()
    }
}

/// Budget arithmetic of the selection loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelectionSizes {
    /// Total labels to buy (X_NL).
    pub target: usize,
    pub init_size: usize,
    /// Labels bought per query iteration (N_Q).
    pub per_query: usize,
}

/// init_size = ceil(alpha * target) within [1, target]; N_Q = max(1, floor(beta * init_size)).
pub fn sizes_for_target(target: usize, alpha_init: f64, beta_q: f64) -> Result<SelectionSizes> {
    if target < 1 {
        return Err(Error::invalid("labeling budget must be at least 1"));
    }
    let init_size = ceil_product(alpha_init, target as f64).clamp(1, target);
    let per_query = floor_product(beta_q, init_size as f64).max(1);
    Ok(SelectionSizes { target, init_size, per_query })
}

pub fn init_sizes(config: &SelectionConfig, pool_size: usize) -> Result<SelectionSizes> {
    let target = match config.labeled_count_override {
        Some(n) => n,
        None => target_labeled_count(config.labeled_ratio, pool_size)?,
    };
    if target > pool_size {
        return Err(Error::PoolExhausted(format!("budget {target} exceeds pool of {pool_size}")));
    }
    sizes_for_target(target, config.alpha_init, config.beta_q)
}

/// Simulated annotator: a lookup of image-level labels.
#[derive(Clone, Debug, Default)]
pub struct Oracle {
    labels: HashMap<SampleId, ImageLabel>,
}

impl Oracle {
    pub fn new(labels: HashMap<SampleId, ImageLabel>) -> Self {
        Self { labels }
    }

    /// Labels for `ids` taken from the dataset (stored or mask-derived).
    pub fn from_dataset(dataset: &Dataset, ids: &BTreeSet<SampleId>) -> Result<Self> {
        let labels = ids.iter().map(|id| Ok((id.clone(), dataset.image_label(id)?))).collect::<Result<_>>()?;
        Ok(Self { labels })
    }

    pub fn query(&self, ids: &[SampleId]) -> Result<Vec<ImageLabel>> {
        ids.iter()
            .map(|id| self.labels.get(id).copied().ok_or_else(|| Error::Unlabelable(id.to_string())))
            .collect()
    }
}

/// `k` ids drawn uniformly without replacement from `pool` (taken in sorted order).
pub fn uniform_sample(pool: &BTreeSet<SampleId>, k: usize, seed: u64) -> Result<Vec<SampleId>> {
    if k > pool.len() {
        return Err(Error::PoolExhausted(format!("cannot draw {k} from a pool of {}", pool.len())));
    }
    let ids: Vec<&SampleId> = pool.iter().collect();
    Ok(ids.choose_multiple(&mut rng_from_seed(seed), k).map(|&id| id.clone()).collect())
}

/// Draw the initial labeled pool and move it out of the unlabeled pool.
pub fn init_pool(
    init_size: usize,
    seed: u64,
    partition: &mut PoolPartition,
    oracle: &Oracle,
) -> Result<(Vec<SampleId>, Vec<ImageLabel>)> {
    let ids = uniform_sample(partition.unlabeled(), init_size, derive_seed(seed, "init_pool"))?;
    let labels = oracle.query(&ids)?;
    partition.mark_labeled(&ids)?;
    Ok((ids, labels))
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryOutcome {
    pub ids: Vec<SampleId>,
    pub labels: Vec<ImageLabel>,
    pub pool_size: usize,
    /// Learner accuracy over the pool it just scored, against oracle labels.
    pub pool_accuracy: f64,
}

/// Score the unlabeled pool, take the top min(N_Q, remaining, |pool|) and buy their labels.
#[allow(clippy::too_many_arguments)]
pub fn query_step(
    learner: &dyn Learner,
    dataset: &Dataset,
    partition: &mut PoolPartition,
    strategy: Strategy,
    per_query: usize,
    remaining_needed: usize,
    oracle: &Oracle,
    seed: u64,
) -> Result<QueryOutcome> {
    let pool: Vec<SampleId> = partition.unlabeled().iter().cloned().collect();
    if pool.is_empty() {
        return Err(Error::PoolExhausted("query on an empty pool".into()));
    }
    let images: Vec<&ImageSample> = pool.iter().map(|id| dataset.get(id)).collect::<Result<_>>()?;
    let scores = PredictionScores::new(pool.clone(), learner.predict_proba(&images)?)?;
    let truth = oracle.query(&pool)?;
    let correct = (0..pool.len()).filter(|&i| scores.argmax(i) == truth[i].class_index()).count();
    let ranking = rank(strategy, &scores, seed)?;
    let q = per_query.min(remaining_needed).min(pool.len());
    let ids = select_top_q(&ranking, q)?;
    let labels = oracle.query(&ids)?;
    partition.mark_labeled(&ids)?;
    Ok(QueryOutcome { ids, labels, pool_size: pool.len(), pool_accuracy: correct as f64 / pool.len() as f64 })
}

pub fn teach_step(learner: &mut dyn Learner, dataset: &Dataset, ids: &[SampleId], labels: &[ImageLabel]) -> Result<()> {
    if ids.len() != labels.len() {
        return Err(Error::invalid(format!("{} labeled ids but {} labels", ids.len(), labels.len())));
    }
    if ids.is_empty() {
        return Err(Error::invalid("teach on an empty labeled pool"));
    }
    let images: Vec<&ImageSample> = ids.iter().map(|id| dataset.get(id)).collect::<Result<_>>()?;
    learner.teach(&images, labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub queried: Vec<SampleId>,
    pub pool_size: usize,
    pub pool_accuracy: f64,
}

impl IterationRecord {
    pub fn to_line(&self) -> String {
        let ids: Vec<&str> = self.queried.iter().map(SampleId::as_str).collect();
        format!(
            "iteration={}\tqueried={}\tpool_size={}\taccuracy={}",
            self.iteration,
            ids.join(","),
            self.pool_size,
            self.pool_accuracy
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    /// Selection order: the initial pool first, then each query batch.
    pub labeled_ids: Vec<SampleId>,
    pub labels: Vec<ImageLabel>,
    pub iterations_run: usize,
    pub log: Vec<IterationRecord>,
}

/// Algorithm driver with a caller-supplied learner. `observe` runs after
/// initialization (iteration 0) and after every query/teach iteration.
pub fn run_active_selection_with(
    config: &SelectionConfig,
    dataset: &Dataset,
    pool_ids: &BTreeSet<SampleId>,
    oracle: &Oracle,
    learner: &mut dyn Learner,
    observe: &mut dyn FnMut(usize, &PoolPartition),
) -> Result<SelectionResult> {
    config.validate()?;
    let sizes = init_sizes(config, pool_ids.len())?;
    let mut partition = PoolPartition::new(pool_ids.clone());
    let (mut labeled_ids, mut labels) = init_pool(sizes.init_size, config.seed, &mut partition, oracle)?;
    observe(0, &partition);

    let mut log = Vec::new();
    if labeled_ids.len() < sizes.target {
        teach_step(learner, dataset, &labeled_ids, &labels)?;
    }
    let mut iteration = 0;
    while labeled_ids.len() < sizes.target {
        iteration += 1;
        let remaining = sizes.target - labeled_ids.len();
        let query_seed = derive_seed(config.seed, &format!("query:{iteration}"));
        let outcome = query_step(
            learner,
            dataset,
            &mut partition,
            config.strategy,
            sizes.per_query,
            remaining,
            oracle,
            query_seed,
        )?;
        labeled_ids.extend(outcome.ids.iter().cloned());
        labels.extend(outcome.labels.iter().copied());
        log.push(IterationRecord {
            iteration,
            queried: outcome.ids,
            pool_size: outcome.pool_size,
            pool_accuracy: outcome.pool_accuracy,
        });
        // The final teach would not influence any further query.
        if labeled_ids.len() < sizes.target {
            teach_step(learner, dataset, &labeled_ids, &labels)?;
        }
        observe(iteration, &partition);
    }
    Ok(SelectionResult { labeled_ids, labels, iterations_run: iteration, log })
}

/// Run selection over `pool_ids` with the configured convolutional learner.
pub fn run_active_selection(
    config: &SelectionConfig,
    dataset: &Dataset,
    pool_ids: &BTreeSet<SampleId>,
    oracle: &Oracle,
) -> Result<SelectionResult> {
    let (channels, _, _) = dataset
        .uniform_shape()
        .ok_or_else(|| Error::invalid("active learner needs images of a single shape"))?;
    let mut learner = CnnLearner::new(config.learner.clone(), channels, dataset.image_classes(), learner_seed(config.seed))?;
    run_active_selection_with(config, dataset, pool_ids, oracle, &mut learner, &mut |_, _| {})
}
