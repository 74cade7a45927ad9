//! Pool-based query strategies: rank unlabeled samples by how uncertain the
//! learner is about them and take the head of the ranking.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::pool::SampleId;
use crate::seed::rng_from_seed;

/// Tolerance on row sums.
pub const ROW_SUM_EPS: f64 = 1e-6;

/// Learner class-probability rows, one per pool sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionScores {
    ids: Vec<SampleId>,
    n_classes: usize,
    probs: Vec<f64>,
}

impl PredictionScores {
    pub fn new(ids: Vec<SampleId>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::shape(format!("{} ids for {} score rows", ids.len(), rows.len())));
        }
        if ids.iter().collect::<BTreeSet<_>>().len() != ids.len() {
            return Err(Error::invalid("duplicate ids in prediction scores"));
        }
        let n_classes = rows.first().map_or(0, Vec::len);
        let mut probs = Vec::with_capacity(rows.len() * n_classes);
        for (id, row) in ids.iter().zip(&rows) {
            if row.len() != n_classes || n_classes == 0 {
                return Err(Error::shape(format!("score row for {id} has {} classes", row.len())));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
                return Err(Error::invalid(format!("score row for {id} has a probability outside [0,1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_EPS {
                return Err(Error::invalid(format!("score row for {id} sums to {sum}")));
            }
            probs.extend_from_slice(row);
        }
        Ok(Self { ids, n_classes, probs })
    }

    pub fn ids(&self) -> &[SampleId] {
        &self.ids
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.n_classes..(i + 1) * self.n_classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = (&SampleId, &[f64])> {
        self.ids.iter().zip(self.probs.chunks(self.n_classes.max(1)))
    }

    /// Index of the most probable class per row, ties to the lowest index.
    pub fn argmax(&self, i: usize) -> usize {
        let row = self.row(i);
        let mut best = 0;
        for (k, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = k;
            }
        }
        best
    }
}

/// Samples ordered most-uncertain first; ties by ascending id.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyRanking {
    entries: Vec<(SampleId, f64)>,
}

impl UncertaintyRanking {
    pub fn from_scores(mut entries: Vec<(SampleId, f64)>) -> Self {
        entries.sort_by(|(ia, a), (ib, b)| b.total_cmp(a).then_with(|| ia.cmp(ib)));
        Self { entries }
    }

    pub fn entries(&self) -> &[(SampleId, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &SampleId> {
        self.entries.iter().map(|(id, _)| id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    Entropy,
    Margin,
    Random,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Entropy => "entropy",
            Strategy::Margin => "margin",
            Strategy::Random => "random",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(Strategy::Entropy),
            "margin" => Ok(Strategy::Margin),
            "random" => Ok(Strategy::Random),
            other => Err(Error::config(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Shannon entropy of one row in nats, with 0 ln 0 = 0.
pub fn row_entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Difference between the two largest entries.
pub fn row_margin(row: &[f64]) -> f64 {
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in row {
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    first - second
}

pub fn entropy_scores(scores: &PredictionScores) -> Result<UncertaintyRanking> {
    Ok(UncertaintyRanking::from_scores(
        scores.rows().map(|(id, row)| (id.clone(), row_entropy(row))).collect(),
    ))
}

/// Uncertainty is the negated top-two margin, so the smallest margin ranks first.
pub fn margin_scores(scores: &PredictionScores) -> Result<UncertaintyRanking> {
    if scores.n_classes() < 2 && !scores.is_empty() {
        return Err(Error::invalid("margin sampling needs at least two classes"));
    }
    Ok(UncertaintyRanking::from_scores(
        scores.rows().map(|(id, row)| (id.clone(), -row_margin(row))).collect(),
    ))
}

/// Seeded uniform permutation of `ids`. The score of the sample at position
/// `i` is `n - i`, so the ranking order is the permutation order.
pub fn random_ranking(ids: &[SampleId], seed: u64) -> Result<UncertaintyRanking> {
    if ids.is_empty() {
        return Err(Error::invalid("cannot rank an empty id list"));
    }
    let mut order: Vec<SampleId> = ids.to_vec();
    // Canonical starting order so the result does not depend on the caller's order.
    order.sort();
    order.shuffle(&mut rng_from_seed(seed));
    let n = order.len();
    let entries = order.into_iter().enumerate().map(|(i, id)| (id, (n - i) as f64)).collect();
    Ok(UncertaintyRanking { entries })
}

/// Rank the pool with the given strategy. `seed` is only used by `Random`.
pub fn rank(strategy: Strategy, scores: &PredictionScores, seed: u64) -> Result<UncertaintyRanking> {
    match strategy {
        Strategy::Entropy => entropy_scores(scores),
        Strategy::Margin => margin_scores(scores),
        Strategy::Random => random_ranking(scores.ids(), seed),
    }
}

pub fn select_top_q(ranking: &UncertaintyRanking, q: usize) -> Result<Vec<SampleId>> {
    if q == 0 || q > ranking.len() {
        return Err(Error::invalid(format!("cannot select {q} of {} ranked samples", ranking.len())));
    }
    Ok(ranking.entries[..q].iter().map(|(id, _)| id.clone()).collect())
}
