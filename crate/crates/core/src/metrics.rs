//! Ranking metrics, routing diagnostics and the forgetting measure.

use serde::{Deserialize, Serialize};

use crate::error::{GcrError, Result};
use crate::feature_store::PixelMask;
use crate::scoring::ScoreMap;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(GcrError::ShapeMismatch(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(index) = scores.iter().position(|s| s.is_nan()) {
            return Err(GcrError::NonFinite { index });
        }
        Ok(ScoredSet { scores, labels })
    }

    pub fn push(&mut self, score: f64, label: bool) {
        self.scores.push(score);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    /// Indices sorted by descending score, ties kept in input order.
    fn descending(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        idx
    }
}

/// Area under the ROC curve as the Mann-Whitney statistic with midranks:
/// `P(s_pos > s_neg) + 0.5 P(s_pos = s_neg)`.
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    let pos = set.positives();
    let neg = set.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(GcrError::UndefinedMetric(format!(
            "AUROC needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    let mut idx: Vec<usize> = (0..set.len()).collect();
    idx.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));
    // Count, for each tie group in ascending order, pairs won and tied by
    // positives. Integer counts keep the result exact up to the final division.
    let mut wins: u128 = 0;
    let mut ties: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let v = set.scores[idx[i]];
        let mut j = i;
        let (mut p, mut n) = (0u128, 0u128);
        while j < idx.len() && set.scores[idx[j]] == v {
            if set.labels[idx[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        wins += p * neg_below;
        ties += p * n;
        neg_below += n;
        i = j;
    }
    let total = (pos as u128) * (neg as u128);
    Ok((2 * wins + ties) as f64 / (2 * total) as f64)
}

/// Step-wise area under the precision-recall curve. Tied scores form one
/// threshold: `sum over thresholds of (recall gain) * precision`.
pub fn average_precision(set: &ScoredSet) -> Result<f64> {
    let pos = set.positives();
    if pos == 0 {
        return Err(GcrError::UndefinedMetric("AP needs at least one positive".into()));
    }
    let idx = set.descending();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let v = set.scores[idx[i]];
        let mut gained = 0u64;
        while i < idx.len() && set.scores[idx[i]] == v {
            if set.labels[idx[i]] {
                gained += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        tp += gained;
        if gained > 0 {
            ap += (gained as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

/// Flattens every pixel of every (map, mask) pair, in order, into one set.
pub fn flatten_pixels<'a, I>(pairs: I) -> Result<ScoredSet>
where
    I: IntoIterator<Item = (&'a ScoreMap, &'a PixelMask)>,
{
    let mut set = ScoredSet::default();
    for (map, mask) in pairs {
        if map.dims() != mask.dims() {
            return Err(GcrError::ShapeMismatch(format!(
                "pixel map {:?} vs mask {:?}",
                map.dims(),
                mask.dims()
            )));
        }
        set.scores.extend_from_slice(map.data());
        set.labels.extend_from_slice(mask.data());
    }
    Ok(set)
}

/// Pixel AUROC and pixel AP over the whole test set.
pub fn pixel_metrics<'a, I>(pairs: I) -> Result<(f64, f64)>
where
    I: IntoIterator<Item = (&'a ScoreMap, &'a PixelMask)>,
{
    let set = flatten_pixels(pairs)?;
    if set.positives() == 0 {
        return Err(GcrError::UndefinedMetric("no anomalous pixels in the test set".into()));
    }
    Ok((auroc(&set)?, average_precision(&set)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slice {
    All,
    Normal,
    Anomaly,
}

/// One evaluated test image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub true_category: String,
    pub routed_category: String,
    pub score: f64,
    pub anomalous: bool,
}

impl ImageRecord {
    pub fn routed_correctly(&self) -> bool {
        self.true_category == self.routed_category
    }

    fn in_slice(&self, slice: Slice) -> bool {
        match slice {
            Slice::All => true,
            Slice::Normal => !self.anomalous,
            Slice::Anomaly => self.anomalous,
        }
    }
}

pub fn routing_accuracy(records: &[ImageRecord], slice: Slice) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for r in records.iter().filter(|r| r.in_slice(slice)) {
        total += 1;
        hit += r.routed_correctly() as usize;
    }
    if total == 0 {
        return Err(GcrError::UndefinedMetric(format!("routing accuracy on empty {slice:?} slice")));
    }
    Ok(hit as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingCondition {
    RoutedCorrect,
    RoutedWrong,
}

/// Image AUROC restricted to correctly (or wrongly) routed images.
pub fn conditional_auroc(records: &[ImageRecord], condition: RoutingCondition) -> Result<f64> {
    let want = condition == RoutingCondition::RoutedCorrect;
    let mut set = ScoredSet::default();
    for r in records.iter().filter(|r| r.routed_correctly() == want) {
        set.push(r.score, r.anomalous);
    }
    if set.is_empty() {
        return Err(GcrError::UndefinedMetric(format!("{condition:?} subset is empty")));
    }
    auroc(&set)
}

pub fn image_set(records: &[ImageRecord]) -> ScoredSet {
    let mut set = ScoredSet::default();
    for r in records {
        set.push(r.score, r.anomalous);
    }
    set
}

/// Lower-triangular performance matrix: `get(i, t)` is category `i`
/// evaluated after step `t` (both zero-based, `i <= t`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    steps: usize,
    values: Vec<Vec<Option<f64>>>,
}

impl EvalMatrix {
    pub fn new(steps: usize) -> Self {
        EvalMatrix {
            steps,
            values: (0..steps).map(|i| vec![None; steps - i]).collect(),
        }
    }

    /// Builds a matrix from rows, where row `i` lists `P_i` for steps `i..T`.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let steps = rows.len();
        let mut m = EvalMatrix::new(steps);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != steps - i {
                return Err(GcrError::ShapeMismatch(format!(
                    "row {i} needs {} entries, got {}",
                    steps - i,
                    row.len()
                )));
            }
            for (j, v) in row.into_iter().enumerate() {
                m.set(i, i + j, v)?;
            }
        }
        Ok(m)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn set(&mut self, category: usize, step: usize, value: f64) -> Result<()> {
        if category > step || step >= self.steps {
            return Err(GcrError::ShapeMismatch(format!(
                "entry ({category}, {step}) is outside the lower triangle of a {}-step matrix",
                self.steps
            )));
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(GcrError::InvalidConfig(format!("performance {value} outside [0, 1]")));
        }
        self.values[category][step - category] = Some(value);
        Ok(())
    }

    pub fn get(&self, category: usize, step: usize) -> Option<f64> {
        if category > step || step >= self.steps {
            return None;
        }
        self.values[category][step - category]
    }

    fn require(&self, category: usize, step: usize) -> Result<f64> {
        self.get(category, step).ok_or_else(|| {
            GcrError::UndefinedMetric(format!("missing entry P[{category}][{step}]"))
        })
    }
}

/// `FM_i = max_{t in i..T-1} P_i(t) - P_i(T)` over the one-based steps of the
/// protocol; `category` is zero-based and must precede the last step.
pub fn forgetting_measure(p: &EvalMatrix, category: usize) -> Result<f64> {
    let t = p.steps();
    if t < 2 {
        return Err(GcrError::UndefinedMetric("forgetting needs at least two steps".into()));
    }
    if category + 1 >= t {
        return Err(GcrError::UndefinedMetric(format!(
            "no forgetting for category {category} introduced at the last step"
        )));
    }
    let mut best = f64::NEG_INFINITY;
    for step in category..t - 1 {
        best = best.max(p.require(category, step)?);
    }
    Ok(best - p.require(category, t - 1)?)
}

/// Mean of `FM_i` over every category but the last.
pub fn overall_fm(p: &EvalMatrix) -> Result<f64> {
    let t = p.steps();
    if t < 2 {
        return Err(GcrError::UndefinedMetric("forgetting needs at least two steps".into()));
    }
    let mut sum = 0.0;
    for i in 0..t - 1 {
        sum += forgetting_measure(p, i)?;
    }
    Ok(sum / (t - 1) as f64)
}
