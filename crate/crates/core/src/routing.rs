//! Task-agnostic head selection.
//!
//! Geometry routing scores every candidate bank by the accumulated
//! nearest-prototype squared distance of the image's patches, always under
//! the identity metric, and picks the smallest. Head-specific precisions and
//! scoring parameters never enter the decision.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::PrototypeBank;
use crate::error::{GcrError, Result};
use crate::matrix::{sq_dist, Matrix};
use crate::rng::SplitMix64;
use crate::scoring::{self, ScoreMap, ScoringConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingRule {
    Geometry,
    ScoreBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalize {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingConfig {
    pub rule: RoutingRule,
    pub normalize: Normalize,
    pub subsample_m: Option<usize>,
    pub subsample_seed: u64,
    pub topk: usize,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            rule: RoutingRule::Geometry,
            normalize: Normalize::Mean,
            subsample_m: None,
            subsample_seed: 0,
            topk: 1,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.topk == 0 {
            return Err(GcrError::InvalidConfig("routing topk must be at least 1".into()));
        }
        if self.subsample_m == Some(0) {
            return Err(GcrError::InvalidConfig("subsample M must be positive".into()));
        }
        Ok(())
    }

    /// Patch subset evaluated for an image with `n` patches, or `None` for all.
    pub fn subsample(&self, n: usize) -> Result<Option<Vec<usize>>> {
        match self.subsample_m {
            None => Ok(None),
            Some(m) if m > n => Err(GcrError::InvalidConfig(format!(
                "subsample M={m} exceeds patch count N={n}"
            ))),
            Some(m) if m == n => Ok(None),
            Some(m) => Ok(Some(
                SplitMix64::new(self.subsample_seed).sample_indices(n, m),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingDecision {
    /// Per-candidate routing distance under `normalize`.
    pub distances: BTreeMap<String, f64>,
    pub normalize: Normalize,
    /// Candidates in ascending order of distance, truncated to `topk`.
    pub selected: Vec<String>,
    pub subsample_indices: Option<Vec<usize>>,
}

impl RoutingDecision {
    pub fn top(&self) -> &str {
        &self.selected[0]
    }
}

/// Accumulated nearest-prototype squared distance over the evaluated patches.
fn accumulated_distance(patches: &Matrix, bank: &PrototypeBank, subset: Option<&[usize]>) -> f64 {
    let nearest = |q: &[f32]| {
        bank.prototypes()
            .iter_rows()
            .map(|mu| sq_dist(q, mu))
            .fold(f64::INFINITY, f64::min)
    };
    match subset {
        Some(idx) => idx.iter().map(|&p| nearest(patches.row(p))).sum(),
        None => patches.iter_rows().map(nearest).sum(),
    }
}

fn check_dims(patches: &Matrix, bank: &PrototypeBank) -> Result<()> {
    if patches.cols() != bank.dim() {
        return Err(GcrError::FeatureDimMismatch {
            expected: bank.dim(),
            found: patches.cols(),
        });
    }
    if patches.rows() == 0 {
        return Err(GcrError::EmptyInput("image has no patches".into()));
    }
    Ok(())
}

/// Routing distance of one candidate: sum (or mean) over patches of the
/// squared distance to the nearest prototype.
pub fn routing_distance(patches: &Matrix, bank: &PrototypeBank, cfg: &RoutingConfig) -> Result<f64> {
    cfg.validate()?;
    check_dims(patches, bank)?;
    let subset = cfg.subsample(patches.rows())?;
    let count = subset.as_ref().map_or(patches.rows(), Vec::len);
    let sum = accumulated_distance(patches, bank, subset.as_deref());
    Ok(normalized(sum, count, cfg.normalize))
}

fn normalized(sum: f64, count: usize, normalize: Normalize) -> f64 {
    match normalize {
        Normalize::Sum => sum,
        Normalize::Mean => sum / count as f64,
    }
}

/// Orders candidates by ascending key, ties broken by category name, and
/// keeps the first `topk`.
pub fn select_topk(keys: &[(String, f64)], topk: usize) -> Vec<String> {
    let mut order: Vec<&(String, f64)> = keys.iter().collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    order.into_iter().take(topk).map(|(c, _)| c.clone()).collect()
}

fn check_candidates(banks: &[&PrototypeBank]) -> Result<()> {
    let first = banks
        .first()
        .ok_or_else(|| GcrError::EmptyInput("empty candidate set".into()))?;
    for b in banks {
        if b.dim() != first.dim() {
            return Err(GcrError::FeatureDimMismatch {
                expected: first.dim(),
                found: b.dim(),
            });
        }
    }
    Ok(())
}

/// Geometry-consistent top-k gating over the candidate banks. Every
/// candidate sees the same patch subset. The ranking is taken on the raw
/// sums, so `sum` and `mean` normalization select identically.
pub fn route(patches: &Matrix, banks: &[&PrototypeBank], cfg: &RoutingConfig) -> Result<RoutingDecision> {
    cfg.validate()?;
    check_candidates(banks)?;
    check_dims(patches, banks[0])?;
    let subset = cfg.subsample(patches.rows())?;
    let count = subset.as_ref().map_or(patches.rows(), Vec::len);
    let sums: Vec<(String, f64)> = banks
        .par_iter()
        .map(|b| {
            (
                b.category().to_string(),
                accumulated_distance(patches, b, subset.as_deref()),
            )
        })
        .collect();
    let selected = select_topk(&sums, cfg.topk);
    let distances = sums
        .into_iter()
        .map(|(c, s)| (c, normalized(s, count, cfg.normalize)))
        .collect();
    Ok(RoutingDecision {
        distances,
        normalize: cfg.normalize,
        selected,
        subsample_indices: subset,
    })
}

/// Ablation baseline: each head scores the image with its own anomaly map
/// and top-q pooling, and the head reporting the lowest score wins.
/// `distances` then holds the per-head image scores.
pub fn route_score_based(
    patches: &Matrix,
    grid: (usize, usize),
    image_size: (usize, usize),
    banks: &[&PrototypeBank],
    scoring_cfg: &ScoringConfig,
    topk: usize,
) -> Result<RoutingDecision> {
    if topk == 0 {
        return Err(GcrError::InvalidConfig("routing topk must be at least 1".into()));
    }
    check_candidates(banks)?;
    check_dims(patches, banks[0])?;
    let scores = banks
        .par_iter()
        .map(|b| {
            let grid_map = scoring::head_anomaly_map(patches, grid, b, scoring_cfg)?;
            let pixel = scoring::upsample_bilinear(&grid_map, image_size.0, image_size.1)?;
            Ok((
                b.category().to_string(),
                scoring::topq_pool(pixel.data(), scoring_cfg.topq),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let selected = select_topk(&scores, topk);
    Ok(RoutingDecision {
        distances: scores.into_iter().collect(),
        normalize: Normalize::Sum,
        selected,
        subsample_indices: None,
    })
}

/// Elementwise maximum of equally shaped maps.
pub fn fuse_topk_max(maps: &[ScoreMap]) -> Result<ScoreMap> {
    let first = maps
        .first()
        .ok_or_else(|| GcrError::EmptyInput("no maps to fuse".into()))?;
    let mut data = first.data().to_vec();
    for m in &maps[1..] {
        if m.dims() != first.dims() {
            return Err(GcrError::ShapeMismatch(format!(
                "cannot fuse {:?} with {:?}",
                first.dims(),
                m.dims()
            )));
        }
        for (a, &b) in data.iter_mut().zip(m.data()) {
            *a = a.max(b);
        }
    }
    let (h, w) = first.dims();
    ScoreMap::new(h, w, data)
}
