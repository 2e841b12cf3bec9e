//! Within-head patch scoring, map upsampling and top-q image pooling.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::PrototypeBank;
use crate::error::{GcrError, Result};
use crate::gcrf;
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreForm {
    /// `-log sum_k pi_k exp(-d_k / 2 tau)`.
    Energy,
    /// Temperature-scaled mixture NLL, `tau` times the energy, with the
    /// q-independent Gaussian constants dropped.
    Nll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Lse,
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    pub form: ScoreForm,
    pub aggregation: Aggregation,
    pub tau: f64,
    pub top_ke: Option<usize>,
    pub topq: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            form: ScoreForm::Energy,
            aggregation: Aggregation::Lse,
            tau: 1.0,
            top_ke: None,
            topq: 0.01,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(GcrError::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.topq > 0.0 && self.topq <= 1.0) {
            return Err(GcrError::InvalidConfig(format!(
                "topq must lie in (0, 1], got {}",
                self.topq
            )));
        }
        if self.top_ke == Some(0) {
            return Err(GcrError::InvalidConfig("top_Ke must be positive".into()));
        }
        Ok(())
    }

    fn check_against(&self, bank: &PrototypeBank) -> Result<()> {
        self.validate()?;
        if let Some(ke) = self.top_ke {
            if ke > bank.k() {
                return Err(GcrError::InvalidConfig(format!(
                    "top_Ke={ke} exceeds bank size K={} for {}",
                    bank.k(),
                    bank.category()
                )));
            }
        }
        Ok(())
    }
}

/// A 2-D grid of scores, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(GcrError::ShapeMismatch("score map dims must be positive".into()));
        }
        if data.len() != height * width {
            return Err(GcrError::DimsPayloadMismatch {
                expected: height * width,
                actual: data.len(),
            });
        }
        Ok(ScoreMap {
            height,
            width,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Writes the map as a `[H, W]` float32 GCRF tensor.
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let payload: Vec<f32> = self.data.iter().map(|&v| v as f32).collect();
        gcrf::write_tensor(path, &[self.height, self.width], &payload)
    }
}

/// Head parameters unpacked once for repeated patch queries.
#[derive(Debug, Clone)]
pub struct PreparedHead<'a> {
    bank: &'a PrototypeBank,
    log_weights: Vec<f64>,
    precisions: Option<Vec<f64>>,
    log_dets: Option<Vec<f64>>,
}

impl<'a> PreparedHead<'a> {
    pub fn new(bank: &'a PrototypeBank) -> Self {
        let total: f64 = bank.weights().iter().map(|&w| w as f64).sum();
        let log_total = total.ln();
        let log_weights = bank
            .weights()
            .iter()
            .map(|&w| (w as f64).ln() - log_total)
            .collect();
        let (precisions, log_dets) = match bank.log_precisions() {
            Some(lp) => {
                let prec = lp.as_slice().iter().map(|&v| (v as f64).exp()).collect();
                let dets = lp
                    .iter_rows()
                    .map(|row| row.iter().map(|&v| v as f64).sum())
                    .collect();
                (Some(prec), Some(dets))
            }
            None => (None, None),
        };
        PreparedHead {
            bank,
            log_weights,
            precisions,
            log_dets,
        }
    }

    pub fn bank(&self) -> &'a PrototypeBank {
        self.bank
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// Per-prototype distance: squared Euclidean, or with precisions the
    /// quadratic form `sum_d lambda_d (q_d - mu_d)^2 - sum_d log lambda_d`.
    pub fn distances_into(&self, q: &[f32], out: &mut Vec<f64>) -> Result<()> {
        let d = self.bank.dim();
        if q.len() != d {
            return Err(GcrError::FeatureDimMismatch {
                expected: d,
                found: q.len(),
            });
        }
        out.clear();
        let protos = self.bank.prototypes();
        match (&self.precisions, &self.log_dets) {
            (Some(prec), Some(dets)) => {
                for (k, mu) in protos.iter_rows().enumerate() {
                    let lam = &prec[k * d..(k + 1) * d];
                    let quad: f64 = q
                        .iter()
                        .zip(mu)
                        .zip(lam)
                        .map(|((&a, &b), &l)| {
                            let diff = a as f64 - b as f64;
                            l * diff * diff
                        })
                        .sum();
                    out.push(quad - dets[k]);
                }
            }
            _ => {
                for mu in protos.iter_rows() {
                    out.push(crate::matrix::sq_dist(q, mu));
                }
            }
        }
        Ok(())
    }

    pub fn score_patch(&self, q: &[f32], cfg: &ScoringConfig, buf: &mut Vec<f64>) -> Result<f64> {
        self.distances_into(q, buf)?;
        Ok(aggregate(buf, &self.log_weights, cfg))
    }
}

pub fn patch_distances(q: &[f32], bank: &PrototypeBank) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(bank.k());
    PreparedHead::new(bank).distances_into(q, &mut out)?;
    Ok(out)
}

fn cmp_dist(dists: &[f64], a: usize, b: usize) -> Ordering {
    dists[a].total_cmp(&dists[b]).then(a.cmp(&b))
}

/// Aggregates per-prototype distances into one patch score.
///
/// `lse`: `-log sum_k pi_k exp(-d_k / 2 tau)`, max-shifted.
/// `min`: `d_j / 2 tau - log pi_j` for the nearest prototype `j`, the
/// low-temperature limit of `lse`.
/// With `top_ke` only the `K_e` nearest prototypes enter the sum.
/// `ScoreForm::Nll` multiplies the result by `tau`.
pub fn aggregate(dists: &[f64], log_weights: &[f64], cfg: &ScoringConfig) -> f64 {
    debug_assert_eq!(dists.len(), log_weights.len());
    let two_tau = 2.0 * cfg.tau;
    let energy = match cfg.aggregation {
        Aggregation::Min => {
            let j = (0..dists.len())
                .min_by(|&a, &b| cmp_dist(dists, a, b))
                .expect("nonempty bank");
            dists[j] / two_tau - log_weights[j]
        }
        Aggregation::Lse => match cfg.top_ke {
            Some(ke) if ke < dists.len() => {
                let mut idx: Vec<usize> = (0..dists.len()).collect();
                idx.select_nth_unstable_by(ke - 1, |&a, &b| cmp_dist(dists, a, b));
                idx.truncate(ke);
                idx.sort_unstable();
                neg_log_sum_exp(idx.iter().map(|&k| log_weights[k] - dists[k] / two_tau))
            }
            _ => neg_log_sum_exp(
                dists
                    .iter()
                    .zip(log_weights)
                    .map(|(&d, &lw)| lw - d / two_tau),
            ),
        },
    };
    match cfg.form {
        ScoreForm::Energy => energy,
        ScoreForm::Nll => cfg.tau * energy,
    }
}

/// `-log sum exp(a_k)`, shifted by the maximum term.
fn neg_log_sum_exp<I: Iterator<Item = f64> + Clone>(terms: I) -> f64 {
    let m = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = terms.map(|a| (a - m).exp()).sum();
    -(m + s.ln())
}

pub fn energy(q: &[f32], bank: &PrototypeBank, cfg: &ScoringConfig) -> Result<f64> {
    cfg.check_against(bank)?;
    let head = PreparedHead::new(bank);
    let mut buf = Vec::with_capacity(bank.k());
    head.score_patch(q, cfg, &mut buf)
}

/// Patch-grid anomaly map of one head. `patches` holds one row per grid
/// cell in row-major order.
pub fn head_anomaly_map(
    patches: &Matrix,
    grid: (usize, usize),
    bank: &PrototypeBank,
    cfg: &ScoringConfig,
) -> Result<ScoreMap> {
    cfg.check_against(bank)?;
    if patches.rows() != grid.0 * grid.1 {
        return Err(GcrError::ShapeMismatch(format!(
            "{} patches for a {}x{} grid",
            patches.rows(),
            grid.0,
            grid.1
        )));
    }
    if patches.cols() != bank.dim() {
        return Err(GcrError::FeatureDimMismatch {
            expected: bank.dim(),
            found: patches.cols(),
        });
    }
    let head = PreparedHead::new(bank);
    let mut buf = Vec::with_capacity(bank.k());
    let data = patches
        .iter_rows()
        .map(|q| head.score_patch(q, cfg, &mut buf))
        .collect::<Result<Vec<_>>>()?;
    ScoreMap::new(grid.0, grid.1, data)
}

/// Same as [`head_anomaly_map`], parallel over patches.
pub fn head_anomaly_map_par(
    patches: &Matrix,
    grid: (usize, usize),
    bank: &PrototypeBank,
    cfg: &ScoringConfig,
) -> Result<ScoreMap> {
    cfg.check_against(bank)?;
    if patches.cols() != bank.dim() || patches.rows() != grid.0 * grid.1 {
        return head_anomaly_map(patches, grid, bank, cfg);
    }
    let head = PreparedHead::new(bank);
    let data = (0..patches.rows())
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(bank.k()),
            |buf, p| head.score_patch(patches.row(p), cfg, buf),
        )
        .collect::<Result<Vec<_>>>()?;
    ScoreMap::new(grid.0, grid.1, data)
}

/// Source coordinate and blend weight for one destination index under the
/// half-pixel-center convention, clamped to the source extent.
fn source_taps(dst: usize, src_size: usize, dst_size: usize) -> (usize, usize, f64) {
    let scale = src_size as f64 / dst_size as f64;
    let x = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_size - 1) as f64);
    let i0 = x.floor() as usize;
    let i1 = (i0 + 1).min(src_size - 1);
    (i0, i1, x - i0 as f64)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    let v = a + (b - a) * t;
    v.clamp(a.min(b), a.max(b))
}

/// Bilinear resize to `(height, width)` with half-pixel centers:
/// `src = (dst + 0.5) * src_size / dst_size - 0.5`, clamped to the edges.
pub fn upsample_bilinear(grid: &ScoreMap, height: usize, width: usize) -> Result<ScoreMap> {
    if height == 0 || width == 0 {
        return Err(GcrError::ShapeMismatch(format!(
            "target size {height}x{width} must be positive"
        )));
    }
    let (sh, sw) = grid.dims();
    let cols: Vec<(usize, usize, f64)> = (0..width).map(|x| source_taps(x, sw, width)).collect();
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let (r0, r1, ty) = source_taps(y, sh, height);
        for &(c0, c1, tx) in &cols {
            let top = lerp(grid.get(r0, c0), grid.get(r0, c1), tx);
            let bottom = lerp(grid.get(r1, c0), grid.get(r1, c1), tx);
            out.push(lerp(top, bottom, ty));
        }
    }
    ScoreMap::new(height, width, out)
}

/// Number of values averaged by [`topq_pool`]: `max(1, ceil(topq * n))`.
pub fn topq_count(n: usize, topq: f64) -> usize {
    ((topq * n as f64).ceil() as usize).clamp(1, n)
}

/// Mean of the largest `max(1, ceil(topq * n))` values.
pub fn topq_pool(values: &[f64], topq: f64) -> f64 {
    assert!(!values.is_empty(), "topq_pool on an empty map");
    let m = topq_count(values.len(), topq);
    let mut v = values.to_vec();
    if m < v.len() {
        v.select_nth_unstable_by(m - 1, |a, b| b.total_cmp(a));
        v.truncate(m);
    }
    // Sum in a fixed order so the result does not depend on selection internals.
    v.sort_unstable_by(|a, b| b.total_cmp(a));
    v.iter().sum::<f64>() / m as f64
}
