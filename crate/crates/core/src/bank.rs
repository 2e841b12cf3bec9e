//! Per-category prototype banks.
//!
//! A bank is the frozen normality model of one category: `K` prototypes
//! selected from the category's training patches, mixture weights, and an
//! optional set of diagonal log-precisions fitted by [`ema_fit_precisions`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coreset::{select_coreset, CoresetConfig};
use crate::error::{GcrError, Result};
use crate::feature_store::{DatasetManifest, Split};
use crate::gcrf;
use crate::matrix::{sq_dist, Matrix};

pub const BANK_FORMAT_VERSION: u32 = 1;
pub const LOG_PRECISION_BOUND: f32 = 20.0;

const PROTOTYPES_FILE: &str = "prototypes.gcrf";
const LOG_PRECISIONS_FILE: &str = "log_precisions.gcrf";
const WEIGHTS_FILE: &str = "weights.gcrf";
const META_FILE: &str = "meta.json";

/// Parameters of the EMA variance estimate behind the optional precisions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmaConfig {
    pub decay: f64,
    pub var_floor: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        EmaConfig {
            decay: 0.99,
            var_floor: 1e-6,
        }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(GcrError::InvalidConfig(format!(
                "EMA decay must lie in (0, 1), got {}",
                self.decay
            )));
        }
        if !(self.var_floor > 0.0) || !self.var_floor.is_finite() {
            return Err(GcrError::InvalidConfig(format!(
                "EMA var_floor must be positive, got {}",
                self.var_floor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankMeta {
    pub format_version: u32,
    pub category: String,
    pub k: usize,
    pub dim: usize,
    pub seed: u64,
    pub k_requested: usize,
    pub source_manifest_hash: String,
    pub l2_normalize: bool,
    #[serde(default)]
    pub ema: Option<EmaConfig>,
    /// Set on save, verified on load.
    #[serde(default)]
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    category: String,
    prototypes: Matrix,
    log_precisions: Option<Matrix>,
    weights: Vec<f32>,
    meta: BankMeta,
}

impl PrototypeBank {
    pub fn from_parts(
        prototypes: Matrix,
        log_precisions: Option<Matrix>,
        weights: Vec<f32>,
        meta: BankMeta,
    ) -> Result<Self> {
        let k = prototypes.rows();
        if k == 0 || prototypes.cols() == 0 {
            return Err(GcrError::Bank("bank must hold at least one prototype".into()));
        }
        if weights.len() != k {
            return Err(GcrError::Bank(format!(
                "{} weights for {k} prototypes",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(GcrError::Bank("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().map(|&w| w as f64).sum();
        // Weights are stored as f32, so the sum can only be pinned to f32
        // rounding of each term.
        let tol = (k as f64) * (f32::EPSILON as f64);
        if (total - 1.0).abs() > tol {
            return Err(GcrError::Bank(format!("weights sum to {total}, expected 1")));
        }
        if let Some(lp) = &log_precisions {
            if lp.rows() != k || lp.cols() != prototypes.cols() {
                return Err(GcrError::Bank("log_precisions shape must match prototypes".into()));
            }
            if lp
                .as_slice()
                .iter()
                .any(|v| !v.is_finite() || v.abs() > LOG_PRECISION_BOUND)
            {
                return Err(GcrError::Bank(format!(
                    "log_precisions must be finite and within +/-{LOG_PRECISION_BOUND}"
                )));
            }
        }
        if meta.k != k || meta.dim != prototypes.cols() {
            return Err(GcrError::Bank(format!(
                "metadata describes {}x{}, tensors are {k}x{}",
                meta.k,
                meta.dim,
                prototypes.cols()
            )));
        }
        Ok(PrototypeBank {
            category: meta.category.clone(),
            prototypes,
            log_precisions,
            weights,
            meta,
        })
    }

    /// Bank with uniform weights and no precisions.
    pub fn uniform(
        category: impl Into<String>,
        prototypes: Matrix,
        seed: u64,
        k_requested: usize,
        source_manifest_hash: impl Into<String>,
        l2_normalize: bool,
    ) -> Result<Self> {
        let k = prototypes.rows();
        let meta = BankMeta {
            format_version: BANK_FORMAT_VERSION,
            category: category.into(),
            k,
            dim: prototypes.cols(),
            seed,
            k_requested,
            source_manifest_hash: source_manifest_hash.into(),
            l2_normalize,
            ema: None,
            checksum: String::new(),
        };
        let w = 1.0f32 / k.max(1) as f32;
        Self::from_parts(prototypes, None, vec![w; k], meta)
    }

    pub fn category(&self) -> &str {
        &self.category
    }

    pub fn prototypes(&self) -> &Matrix {
        &self.prototypes
    }

    pub fn log_precisions(&self) -> Option<&Matrix> {
        self.log_precisions.as_ref()
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn meta(&self) -> &BankMeta {
        &self.meta
    }

    pub fn k(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    /// Returns a copy carrying the given log-precisions (clamped to the
    /// supported range), leaving prototypes and weights untouched.
    pub fn with_log_precisions(&self, mut log_precisions: Matrix, ema: Option<EmaConfig>) -> Result<Self> {
        let rows = log_precisions.rows();
        for i in 0..rows {
            for v in log_precisions.row_mut(i) {
                *v = v.clamp(-LOG_PRECISION_BOUND, LOG_PRECISION_BOUND);
            }
        }
        let mut meta = self.meta.clone();
        meta.ema = ema;
        meta.checksum.clear();
        Self::from_parts(
            self.prototypes.clone(),
            Some(log_precisions),
            self.weights.clone(),
            meta,
        )
    }

    /// SHA-256 over the category name and the encoded tensors.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.category.as_bytes());
        h.update([0u8]);
        let dims = [self.k(), self.dim()];
        h.update(gcrf::encode(&dims, self.prototypes.as_slice()).expect("validated shape"));
        h.update(gcrf::encode(&[self.k()], &self.weights).expect("validated shape"));
        match &self.log_precisions {
            Some(lp) => {
                h.update([1u8]);
                h.update(gcrf::encode(&dims, lp.as_slice()).expect("validated shape"));
            }
            None => h.update([0u8]),
        }
        hex::encode(h.finalize())
    }
}

/// Pools every training patch of `category` (manifest order, row-major
/// patches) into one matrix.
pub fn training_patches(
    manifest: &DatasetManifest,
    category: &str,
    l2_normalize: bool,
) -> Result<Matrix> {
    let mut pool: Option<Matrix> = None;
    for entry in manifest.entries_for(category, Split::Train) {
        let fm = manifest.load_features(entry)?;
        let patches = fm.patch_matrix(l2_normalize);
        match &mut pool {
            None => pool = Some(patches),
            Some(p) => {
                if p.cols() != patches.cols() {
                    return Err(GcrError::FeatureDimMismatch {
                        expected: p.cols(),
                        found: patches.cols(),
                    });
                }
                p.extend_rows(&patches)?;
            }
        }
    }
    pool.ok_or_else(|| GcrError::EmptyInput(format!("no train images for category {category:?}")))
}

/// Builds a category's bank by farthest-first selection over its pooled
/// training patches.
pub fn build_bank(
    manifest: &DatasetManifest,
    category: &str,
    config: &CoresetConfig,
    l2_normalize: bool,
) -> Result<PrototypeBank> {
    config.validate()?;
    let pool = training_patches(manifest, category, l2_normalize)?;
    let coreset = select_coreset(&pool, config)?;
    let prototypes = pool.select_rows(&coreset.indices);
    PrototypeBank::uniform(
        category,
        prototypes,
        config.seed,
        config.k,
        manifest.source_hash(),
        l2_normalize,
    )
}

/// Streams `patches` through the EMA variance recurrence. Each patch updates
/// only its nearest prototype (identity metric, lowest index on ties):
/// `v <- decay * v + (1 - decay) * (q - mu)^2`, starting from `v = 1`.
/// Precisions are `1 / max(v, var_floor)`.
pub fn ema_fit_from_patches<'a, I>(
    bank: &PrototypeBank,
    patches: I,
    config: &EmaConfig,
) -> Result<PrototypeBank>
where
    I: IntoIterator<Item = &'a [f32]>,
{
    config.validate()?;
    let (k, d) = (bank.k(), bank.dim());
    let mut var = vec![1.0f64; k * d];
    let protos = bank.prototypes();
    for q in patches {
        if q.len() != d {
            return Err(GcrError::FeatureDimMismatch {
                expected: d,
                found: q.len(),
            });
        }
        let mut nearest = 0;
        let mut best = f64::INFINITY;
        for (j, mu) in protos.iter_rows().enumerate() {
            let dist = sq_dist(q, mu);
            if dist < best {
                best = dist;
                nearest = j;
            }
        }
        let mu = protos.row(nearest);
        let v = &mut var[nearest * d..(nearest + 1) * d];
        for ((vi, &qi), &mi) in v.iter_mut().zip(q).zip(mu) {
            let diff = qi as f64 - mi as f64;
            *vi = config.decay * *vi + (1.0 - config.decay) * diff * diff;
        }
    }
    let log_prec: Vec<f32> = var
        .iter()
        .map(|&v| (-(v.max(config.var_floor)).ln()) as f32)
        .collect();
    bank.with_log_precisions(Matrix::new(k, d, log_prec)?, Some(*config))
}

/// Fits the optional diagonal precisions from the category's training
/// patches in manifest order. Prototypes and weights are returned unchanged.
pub fn ema_fit_precisions(
    bank: &PrototypeBank,
    manifest: &DatasetManifest,
    config: &EmaConfig,
) -> Result<PrototypeBank> {
    config.validate()?;
    let pool = training_patches(manifest, bank.category(), bank.meta().l2_normalize)?;
    ema_fit_from_patches(bank, pool.iter_rows(), config)
}

fn check_category_name(category: &str) -> Result<()> {
    if category.is_empty()
        || category == "."
        || category == ".."
        || category.contains(['/', '\\', '\0'])
    {
        return Err(GcrError::Bank(format!(
            "category {category:?} cannot be used as a directory name"
        )));
    }
    Ok(())
}

/// Writes `<root>/<category>/{prototypes,weights,log_precisions}.gcrf` and
/// `meta.json`. Returns the category directory.
pub fn save_bank(bank: &PrototypeBank, root: impl AsRef<Path>) -> Result<PathBuf> {
    check_category_name(bank.category())?;
    let dir = root.as_ref().join(bank.category());
    std::fs::create_dir_all(&dir).map_err(|e| GcrError::io(&dir, e))?;
    let dims = [bank.k(), bank.dim()];
    gcrf::write_tensor(dir.join(PROTOTYPES_FILE), &dims, bank.prototypes.as_slice())?;
    gcrf::write_tensor(dir.join(WEIGHTS_FILE), &[bank.k()], &bank.weights)?;
    let lp_path = dir.join(LOG_PRECISIONS_FILE);
    match &bank.log_precisions {
        Some(lp) => gcrf::write_tensor(&lp_path, &dims, lp.as_slice())?,
        None => {
            if lp_path.exists() {
                std::fs::remove_file(&lp_path).map_err(|e| GcrError::io(&lp_path, e))?;
            }
        }
    }
    let mut meta = bank.meta.clone();
    meta.checksum = bank.checksum();
    let json = serde_json::to_string_pretty(&meta).map_err(|e| GcrError::json("bank meta", e))?;
    let meta_path = dir.join(META_FILE);
    std::fs::write(&meta_path, json + "\n").map_err(|e| GcrError::io(&meta_path, e))?;
    Ok(dir)
}

/// Loads a bank from its category directory and verifies the checksum.
pub fn load_bank(dir: impl AsRef<Path>) -> Result<PrototypeBank> {
    let dir = dir.as_ref();
    let meta_path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| GcrError::io(&meta_path, e))?;
    let meta: BankMeta = serde_json::from_str(&text)
        .map_err(|e| GcrError::json(meta_path.display().to_string(), e))?;
    if meta.format_version != BANK_FORMAT_VERSION {
        return Err(GcrError::Bank(format!(
            "bank format version {} is not supported (expected {BANK_FORMAT_VERSION})",
            meta.format_version
        )));
    }
    let (pdims, pdata) = gcrf::read_tensor(dir.join(PROTOTYPES_FILE))?;
    let [k, d] = pdims[..] else {
        return Err(GcrError::Bank(format!("prototype tensor must be rank 2, got {pdims:?}")));
    };
    let (wdims, weights) = gcrf::read_tensor(dir.join(WEIGHTS_FILE))?;
    if wdims != [k] {
        return Err(GcrError::Bank(format!("weights tensor has dims {wdims:?}, expected [{k}]")));
    }
    let lp_path = dir.join(LOG_PRECISIONS_FILE);
    let log_precisions = if lp_path.exists() {
        let (ldims, ldata) = gcrf::read_tensor(&lp_path)?;
        if ldims != [k, d] {
            return Err(GcrError::Bank(format!(
                "log_precisions tensor has dims {ldims:?}, expected [{k}, {d}]"
            )));
        }
        Some(Matrix::new(k, d, ldata)?)
    } else {
        None
    };
    let expected = meta.checksum.clone();
    let bank = PrototypeBank::from_parts(Matrix::new(k, d, pdata)?, log_precisions, weights, meta)?;
    let actual = bank.checksum();
    if actual != expected {
        return Err(GcrError::Bank(format!(
            "checksum mismatch in {}: meta says {expected}, tensors hash to {actual}",
            dir.display()
        )));
    }
    Ok(bank)
}

/// Loads every bank directory under `root`, sorted by category name.
pub fn load_banks(root: impl AsRef<Path>) -> Result<Vec<PrototypeBank>> {
    let root = root.as_ref();
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| GcrError::io(root, e))? {
        let entry = entry.map_err(|e| GcrError::io(root, e))?;
        let path = entry.path();
        if path.join(META_FILE).is_file() {
            dirs.push(path);
        }
    }
    let mut banks = dirs.iter().map(load_bank).collect::<Result<Vec<_>>>()?;
    banks.sort_by(|a, b| a.category().cmp(b.category()));
    if banks.is_empty() {
        return Err(GcrError::EmptyInput(format!("no banks found under {}", root.display())));
    }
    Ok(banks)
}
