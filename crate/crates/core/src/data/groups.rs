//! Count-group quantization and class reweighting for the prior stage.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of crowd-count groups the classifier predicts.
pub const DEFAULT_GROUPS: usize = 10;

/// Class index of a count group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CountGroupLabel {
    pub class_index: usize,
}

/// Strictly ascending thresholds splitting counts into `len + 1` groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct GroupBoundaries {
    thresholds: Vec<f64>,
}

impl GroupBoundaries {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::Config("at least one group boundary is required".into()));
        }
        if thresholds.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config("group boundaries must be finite".into()));
        }
        if let Some(w) = thresholds.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "group boundaries must be strictly ascending, found {} followed by {}",
                w[0], w[1]
            )));
        }
        Ok(Self { thresholds })
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn groups(&self) -> usize {
        self.thresholds.len() + 1
    }
}

impl TryFrom<Vec<f64>> for GroupBoundaries {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<GroupBoundaries> for Vec<f64> {
    fn from(b: GroupBoundaries) -> Self {
        b.thresholds
    }
}

/// Equal-frequency cut points of `counts` into `groups` classes.
///
/// Cut `j` is the smallest observed count with at least `j * n / groups`
/// counts strictly below it, which skips over runs of tied counts. A cut that
/// does not exceed its predecessor (or, for the first cut, the minimum count)
/// moves up to the next distinct count, or to one past its predecessor once
/// the distinct values are exhausted.
pub fn fit_group_boundaries(counts: &[f64], groups: usize) -> Result<GroupBoundaries> {
    if groups < 2 {
        return Err(Error::Config(format!("need at least 2 groups, got {groups}")));
    }
    if counts.is_empty() {
        return Err(Error::Input("cannot fit group boundaries to an empty count list".into()));
    }
    if counts.iter().any(|c| !c.is_finite()) {
        return Err(Error::Input("counts must be finite".into()));
    }
    let mut sorted = counts.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    if sorted[0] == sorted[n - 1] {
        return Err(Error::DegenerateDistribution {
            n,
            value: sorted[0],
        });
    }

    // Distinct values paired with how many counts lie strictly below them.
    let mut distinct: Vec<(f64, usize)> = Vec::new();
    for (i, &c) in sorted.iter().enumerate() {
        if i == 0 || sorted[i - 1] < c {
            distinct.push((c, i));
        }
    }

    let mut cuts: Vec<f64> = Vec::with_capacity(groups - 1);
    let mut floor = sorted[0];
    for j in 1..groups {
        let need = (j * n).div_ceil(groups);
        let cut = distinct
            .iter()
            .find(|&&(v, below)| below >= need && v > floor)
            .or_else(|| distinct.iter().find(|&&(v, _)| v > floor))
            .map_or(floor + 1.0, |&(v, _)| v);
        cuts.push(cut);
        floor = cut;
    }
    GroupBoundaries::new(cuts)
}

/// Boundaries evenly spaced over `(0, max_count]`; the fallback when the
/// training counts are all identical.
pub fn uniform_group_boundaries(max_count: f64, groups: usize) -> Result<GroupBoundaries> {
    if groups < 2 || !(max_count > 0.0) {
        return Err(Error::Config(format!(
            "uniform boundaries need groups >= 2 and a positive range, got {groups} groups over {max_count}"
        )));
    }
    let step = max_count / groups as f64;
    GroupBoundaries::new((1..groups).map(|j| step * j as f64).collect())
}

/// Number of thresholds `<= count`; ties map to the upper group.
pub fn quantize_count(count: f64, boundaries: &GroupBoundaries) -> CountGroupLabel {
    CountGroupLabel {
        class_index: boundaries.thresholds.partition_point(|&b| b <= count),
    }
}

/// Per-class loss weights with mean 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassWeights {
    weights: Vec<f64>,
}

impl ClassWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Config("class weights must be positive and finite".into()));
        }
        Ok(Self { weights })
    }

    pub fn uniform(groups: usize) -> Self {
        Self {
            weights: vec![1.0; groups],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn get(&self, class: usize) -> f64 {
        self.weights[class]
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Inverse-frequency weights `total / (groups * n_j)`, mean-normalized.
/// Classes with no samples take the largest weight among present classes.
pub fn compute_class_weights(labels: &[CountGroupLabel], groups: usize) -> Result<ClassWeights> {
    if labels.is_empty() {
        return Err(Error::Input("cannot weight an empty label list".into()));
    }
    if groups == 0 {
        return Err(Error::Config("need at least one class".into()));
    }
    let mut freq = vec![0usize; groups];
    for l in labels {
        if l.class_index >= groups {
            return Err(Error::Input(format!(
                "label {} is out of range for {groups} classes",
                l.class_index
            )));
        }
        freq[l.class_index] += 1;
    }
    let total = labels.len() as f64;
    let raw: Vec<Option<f64>> = freq
        .iter()
        .map(|&n| (n > 0).then(|| total / (groups as f64 * n as f64)))
        .collect();
    let max_present = raw.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
    let filled: Vec<f64> = raw.into_iter().map(|w| w.unwrap_or(max_present)).collect();
    let mean = filled.iter().sum::<f64>() / groups as f64;
    ClassWeights::new(filled.into_iter().map(|w| w / mean).collect())
}
