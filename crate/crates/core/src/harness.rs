//! Sequential category protocol.
//!
//! Categories arrive one per step. Step `t` adds a bank for the new category
//! and then evaluates every category seen so far with task-agnostic routing
//! among the `t` available heads. Heads built at earlier steps are never
//! touched again; their checksums are re-verified at every step.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::bank::{build_bank, ema_fit_precisions, load_bank, save_bank, EmaConfig, PrototypeBank};
use crate::coreset::CoresetConfig;
use crate::error::{GcrError, Result};
use crate::feature_store::{DatasetManifest, Split};
use crate::metrics::{
    self, conditional_auroc, image_set, routing_accuracy, EvalMatrix, ImageRecord, RoutingCondition,
    Slice,
};
use crate::pipeline::{self, AnomalyResult, ImageInput};
use crate::routing::{RoutingConfig, RoutingDecision};
use crate::scoring::ScoringConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseMetric {
    Auroc,
    PAp,
}

impl BaseMetric {
    pub const ALL: [BaseMetric; 2] = [BaseMetric::Auroc, BaseMetric::PAp];

    pub fn name(self) -> &'static str {
        match self {
            BaseMetric::Auroc => "auroc",
            BaseMetric::PAp => "p_ap",
        }
    }
}

impl fmt::Display for BaseMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    /// Arrival order; empty means lexicographic over the manifest's categories.
    pub category_order: Vec<String>,
    pub base_metric: BaseMetric,
    pub routing: RoutingConfig,
    pub scoring: ScoringConfig,
    pub coreset: CoresetConfig,
    /// EMA precision fitting; `None` leaves banks isotropic.
    pub ema: Option<EmaConfig>,
    pub k_sweep: Option<Vec<usize>>,
    pub l2_normalize: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            category_order: Vec::new(),
            base_metric: BaseMetric::Auroc,
            routing: RoutingConfig::default(),
            scoring: ScoringConfig::default(),
            coreset: CoresetConfig::default(),
            ema: None,
            k_sweep: None,
            l2_normalize: false,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        self.routing.validate()?;
        self.scoring.validate()?;
        self.coreset.validate()?;
        if let Some(ema) = &self.ema {
            ema.validate()?;
        }
        if let Some(ks) = &self.k_sweep {
            if ks.is_empty() || ks.contains(&0) {
                return Err(GcrError::InvalidConfig("K sweep must list positive values".into()));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.category_order {
            if !seen.insert(c) {
                return Err(GcrError::InvalidConfig(format!("category {c:?} listed twice")));
            }
        }
        Ok(())
    }

    /// The arrival order, checked against the manifest.
    pub fn resolve_order(&self, manifest: &DatasetManifest) -> Result<Vec<String>> {
        self.validate()?;
        let known = manifest.categories();
        let order = if self.category_order.is_empty() {
            let mut k = known.clone();
            k.sort();
            k
        } else {
            self.category_order.clone()
        };
        for c in &order {
            if !known.contains(c) {
                return Err(GcrError::InvalidConfig(format!("category {c:?} is not in the manifest")));
            }
        }
        if order.is_empty() {
            return Err(GcrError::EmptyInput("manifest has no categories".into()));
        }
        Ok(order)
    }
}

/// Serializes `None` as the string `"undefined"`.
fn metric_value<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_str("undefined"),
    }
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(GcrError::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryReport {
    pub category: String,
    pub images: usize,
    #[serde(serialize_with = "metric_value")]
    pub auroc: Option<f64>,
    #[serde(serialize_with = "metric_value")]
    pub ap: Option<f64>,
    #[serde(serialize_with = "metric_value")]
    pub p_auroc: Option<f64>,
    #[serde(serialize_with = "metric_value")]
    pub p_ap: Option<f64>,
    #[serde(serialize_with = "metric_value")]
    pub routing_accuracy: Option<f64>,
}

impl CategoryReport {
    pub fn metric(&self, m: BaseMetric) -> Option<f64> {
        match m {
            BaseMetric::Auroc => self.auroc,
            BaseMetric::PAp => self.p_ap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingSummary {
    #[serde(serialize_with = "metric_value")]
    pub all: Option<f64>,
    #[serde(serialize_with = "metric_value")]
    pub normal: Option<f64>,
    #[serde(serialize_with = "metric_value")]
    pub anomaly: Option<f64>,
    #[serde(serialize_with = "metric_value")]
    pub conditional_auroc_routed_correct: Option<f64>,
    #[serde(serialize_with = "metric_value")]
    pub conditional_auroc_routed_wrong: Option<f64>,
}

impl RoutingSummary {
    fn from_records(records: &[ImageRecord]) -> Result<Self> {
        Ok(RoutingSummary {
            all: defined(routing_accuracy(records, Slice::All))?,
            normal: defined(routing_accuracy(records, Slice::Normal))?,
            anomaly: defined(routing_accuracy(records, Slice::Anomaly))?,
            conditional_auroc_routed_correct: defined(conditional_auroc(
                records,
                RoutingCondition::RoutedCorrect,
            ))?,
            conditional_auroc_routed_wrong: defined(conditional_auroc(
                records,
                RoutingCondition::RoutedWrong,
            ))?,
        })
    }
}

/// One evaluated image with its routing decision.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatedImage {
    pub record: ImageRecord,
    pub decision: RoutingDecision,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    /// One-based step index.
    pub step: usize,
    pub added: String,
    pub candidates: Vec<String>,
    pub routing_rule: crate::routing::RoutingRule,
    pub routing_normalize: crate::routing::Normalize,
    pub topk: usize,
    /// True when the map was max-fused over more than one routed head and
    /// the image score was pooled from the fused map.
    pub fused: bool,
    pub categories: Vec<CategoryReport>,
    pub routing: RoutingSummary,
    pub head_checksums: BTreeMap<String, String>,
    #[serde(skip)]
    pub images: Vec<EvaluatedImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FmReport {
    pub base_metric: BaseMetric,
    pub order: Vec<String>,
    pub per_metric: BTreeMap<String, FmValues>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FmValues {
    #[serde(serialize_with = "metric_value")]
    pub overall: Option<f64>,
    pub per_category: BTreeMap<String, MetricCell>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricCell(#[serde(serialize_with = "metric_value")] pub Option<f64>);

#[derive(Debug, Clone)]
pub struct ContinualOutcome {
    pub order: Vec<String>,
    pub base_metric: BaseMetric,
    pub matrices: BTreeMap<BaseMetric, EvalMatrix>,
    pub steps: Vec<StepReport>,
    pub fm: FmReport,
    pub banks: Vec<PrototypeBank>,
}

impl ContinualOutcome {
    pub fn matrix(&self) -> &EvalMatrix {
        &self.matrices[&self.base_metric]
    }

    pub fn overall_fm(&self) -> Option<f64> {
        self.fm.per_metric.get(self.base_metric.name()).and_then(|v| v.overall)
    }
}

/// Builds banks or loads them from a cache directory keyed by every input
/// that determines their content.
#[derive(Debug, Clone, Default)]
pub struct BankCache {
    root: Option<PathBuf>,
}

impl BankCache {
    pub fn in_memory() -> Self {
        BankCache { root: None }
    }

    pub fn at(root: impl Into<PathBuf>) -> Self {
        BankCache {
            root: Some(root.into()),
        }
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    fn key(
        manifest: &DatasetManifest,
        coreset: &CoresetConfig,
        ema: Option<&EmaConfig>,
        l2: bool,
    ) -> String {
        let mut h = Sha256::new();
        h.update(manifest.source_hash().as_bytes());
        h.update(coreset.k.to_le_bytes());
        h.update(coreset.seed.to_le_bytes());
        h.update([l2 as u8]);
        match ema {
            Some(e) => {
                h.update([1u8]);
                h.update(e.decay.to_le_bytes());
                h.update(e.var_floor.to_le_bytes());
            }
            None => h.update([0u8]),
        }
        format!("k{}_s{}_{}", coreset.k, coreset.seed, &hex::encode(h.finalize())[..16])
    }

    fn dir_for(&self, key: &str, category: &str) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join(key).join(category))
    }

    pub fn get_or_build(
        &self,
        manifest: &DatasetManifest,
        category: &str,
        coreset: &CoresetConfig,
        ema: Option<&EmaConfig>,
        l2_normalize: bool,
    ) -> Result<PrototypeBank> {
        let key = Self::key(manifest, coreset, ema, l2_normalize);
        if let Some(dir) = self.dir_for(&key, category) {
            if dir.join("meta.json").is_file() {
                return load_bank(&dir);
            }
        }
        let mut bank = build_bank(manifest, category, coreset, l2_normalize)?;
        if let Some(e) = ema {
            bank = ema_fit_precisions(&bank, manifest, e)?;
        }
        if let Some(root) = &self.root {
            save_bank(&bank, root.join(&key))?;
        }
        Ok(bank)
    }

    /// Reloads the cached copy of a bank, if any, and checks it still hashes
    /// to `checksum`.
    fn verify(&self, manifest: &DatasetManifest, cfg: &ProtocolConfig, category: &str, checksum: &str) -> Result<()> {
        let key = Self::key(manifest, &cfg.coreset, cfg.ema.as_ref(), cfg.l2_normalize);
        if let Some(dir) = self.dir_for(&key, category) {
            let on_disk = load_bank(&dir)?;
            if on_disk.checksum() != checksum {
                return Err(GcrError::Protocol(format!(
                    "cached head {category} changed on disk"
                )));
            }
        }
        Ok(())
    }
}

/// Test images per category, loaded once and reused across steps.
struct TestSet<'m> {
    manifest: &'m DatasetManifest,
    l2: bool,
    loaded: HashMap<String, Vec<ImageInput>>,
}

impl<'m> TestSet<'m> {
    fn new(manifest: &'m DatasetManifest, l2: bool) -> Self {
        TestSet {
            manifest,
            l2,
            loaded: HashMap::new(),
        }
    }

    fn get(&mut self, category: &str) -> Result<&[ImageInput]> {
        if !self.loaded.contains_key(category) {
            let entries: Vec<_> = self.manifest.entries_for(category, Split::Test).collect();
            if entries.is_empty() {
                return Err(GcrError::EmptyInput(format!("no test images for category {category:?}")));
            }
            let images = entries
                .par_iter()
                .map(|e| ImageInput::from_entry(self.manifest, e, self.l2))
                .collect::<Result<Vec<_>>>()?;
            self.loaded.insert(category.to_string(), images);
        }
        Ok(&self.loaded[category])
    }
}

/// Routes and scores a batch of images, in parallel, preserving order.
fn evaluate_images(
    images: &[ImageInput],
    banks: &[&PrototypeBank],
    cfg: &ProtocolConfig,
) -> Result<Vec<(RoutingDecision, AnomalyResult)>> {
    images
        .par_iter()
        .map(|img| pipeline::infer(img, banks, &cfg.routing, &cfg.scoring))
        .collect()
}

fn category_report(
    category: &str,
    images: &[ImageInput],
    results: &[(RoutingDecision, AnomalyResult)],
) -> Result<(CategoryReport, Vec<EvaluatedImage>)> {
    let evaluated: Vec<EvaluatedImage> = images
        .iter()
        .zip(results)
        .map(|(img, (d, r))| EvaluatedImage {
            record: ImageRecord {
                image_id: img.image_id.clone(),
                true_category: category.to_string(),
                routed_category: r.routed_category.clone(),
                score: r.image_score,
                anomalous: img.anomalous,
            },
            decision: d.clone(),
        })
        .collect();
    let records: Vec<ImageRecord> = evaluated.iter().map(|e| e.record.clone()).collect();
    let set = image_set(&records);
    let (p_auroc, p_ap) = if images.iter().all(|i| i.mask.is_some()) {
        let pairs = images.iter().zip(results).map(|(i, (_, r))| (&r.pixel_map, i.mask.as_ref().unwrap()));
        match metrics::pixel_metrics(pairs) {
            Ok((a, p)) => (Some(a), Some(p)),
            Err(GcrError::UndefinedMetric(_)) => (None, None),
            Err(e) => return Err(e),
        }
    } else {
        (None, None)
    };
    let report = CategoryReport {
        category: category.to_string(),
        images: images.len(),
        auroc: defined(metrics::auroc(&set))?,
        ap: defined(metrics::average_precision(&set))?,
        p_auroc,
        p_ap,
        routing_accuracy: defined(routing_accuracy(&records, Slice::All))?,
    };
    Ok((report, evaluated))
}

fn fm_values(matrix: &EvalMatrix, order: &[String]) -> FmValues {
    let t = order.len();
    let per_category = order
        .iter()
        .enumerate()
        .take(t.saturating_sub(1))
        .map(|(i, c)| (c.clone(), MetricCell(metrics::forgetting_measure(matrix, i).ok())))
        .collect();
    FmValues {
        overall: metrics::overall_fm(matrix).ok(),
        per_category,
    }
}

/// Runs the full continual protocol.
pub fn run_continual(
    manifest: &DatasetManifest,
    cfg: &ProtocolConfig,
    cache: &BankCache,
) -> Result<ContinualOutcome> {
    let order = cfg.resolve_order(manifest)?;
    let t_total = order.len();
    let mut matrices: BTreeMap<BaseMetric, EvalMatrix> =
        BaseMetric::ALL.iter().map(|&m| (m, EvalMatrix::new(t_total))).collect();
    let mut banks: Vec<PrototypeBank> = Vec::with_capacity(t_total);
    let mut frozen: BTreeMap<String, String> = BTreeMap::new();
    let mut tests = TestSet::new(manifest, cfg.l2_normalize);
    let mut steps = Vec::with_capacity(t_total);

    for (t, new_cat) in order.iter().enumerate() {
        let bank = cache.get_or_build(manifest, new_cat, &cfg.coreset, cfg.ema.as_ref(), cfg.l2_normalize)?;
        if let Some(first) = banks.first() {
            if first.dim() != bank.dim() {
                return Err(GcrError::FeatureDimMismatch {
                    expected: first.dim(),
                    found: bank.dim(),
                });
            }
        }
        frozen.insert(new_cat.clone(), bank.checksum());
        banks.push(bank);

        // Every earlier head must be byte-identical to when it was built.
        let mut head_checksums = BTreeMap::new();
        for b in &banks {
            let now = b.checksum();
            if frozen[b.category()] != now {
                return Err(GcrError::Protocol(format!("head {} mutated after step of creation", b.category())));
            }
            cache.verify(manifest, cfg, b.category(), &now)?;
            head_checksums.insert(b.category().to_string(), now);
        }

        let candidates: Vec<&PrototypeBank> = banks.iter().collect();
        let mut categories = Vec::with_capacity(t + 1);
        let mut all_images = Vec::new();
        for (i, cat) in order[..=t].iter().enumerate() {
            let images = tests.get(cat)?;
            let results = evaluate_images(images, &candidates, cfg)?;
            let (report, evaluated) = category_report(cat, images, &results)?;
            for m in BaseMetric::ALL {
                match report.metric(m) {
                    Some(v) => matrices.get_mut(&m).unwrap().set(i, t, v)?,
                    None if m == cfg.base_metric => {
                        return Err(GcrError::Protocol(format!(
                            "base metric {m} is undefined for category {cat} at step {}",
                            t + 1
                        )))
                    }
                    None => {}
                }
            }
            categories.push(report);
            all_images.extend(evaluated);
        }
        let records: Vec<ImageRecord> = all_images.iter().map(|e| e.record.clone()).collect();
        steps.push(StepReport {
            step: t + 1,
            added: new_cat.clone(),
            candidates: order[..=t].to_vec(),
            routing_rule: cfg.routing.rule,
            routing_normalize: cfg.routing.normalize,
            topk: cfg.routing.topk,
            fused: cfg.routing.topk > 1 && t > 0,
            categories,
            routing: RoutingSummary::from_records(&records)?,
            head_checksums,
            images: all_images,
        });
    }

    let per_metric = matrices
        .iter()
        .map(|(m, mat)| (m.name().to_string(), fm_values(mat, &order)))
        .collect();
    let fm = FmReport {
        base_metric: cfg.base_metric,
        order: order.clone(),
        per_metric,
    };
    Ok(ContinualOutcome {
        order,
        base_metric: cfg.base_metric,
        matrices,
        steps,
        fm,
        banks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KsweepRow {
    pub k: usize,
    pub category: String,
    #[serde(serialize_with = "metric_value")]
    pub oracle_auroc: Option<f64>,
    #[serde(serialize_with = "metric_value")]
    pub routed_auroc: Option<f64>,
    #[serde(serialize_with = "metric_value")]
    pub fm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KsweepReport {
    pub order: Vec<String>,
    pub rows: Vec<KsweepRow>,
    /// Correctly routed images whose result differed from the oracle head's.
    pub routed_oracle_mismatches: usize,
}

fn mean_defined(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.collect::<Option<Vec<_>>>()?;
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// For each K: rebuild the banks, run the continual protocol (routed AUROC
/// and FM), and score every test image with its ground-truth head (oracle
/// AUROC). Each K contributes one row per category plus a `mean` row.
pub fn run_ksweep(
    manifest: &DatasetManifest,
    cfg: &ProtocolConfig,
    k_list: &[usize],
    cache: &BankCache,
) -> Result<KsweepReport> {
    if k_list.is_empty() {
        return Err(GcrError::InvalidConfig("K sweep needs at least one K".into()));
    }
    let mut rows = Vec::new();
    let mut mismatches = 0;
    let mut order = Vec::new();
    let mut tests = TestSet::new(manifest, cfg.l2_normalize);
    for &k in k_list {
        let mut run_cfg = cfg.clone();
        run_cfg.coreset.k = k;
        let outcome = run_continual(manifest, &run_cfg, cache)?;
        let last = outcome.steps.last().expect("at least one step");
        let t = outcome.order.len();
        let fmv = &outcome.fm.per_metric[BaseMetric::Auroc.name()];
        let mut k_rows = Vec::new();
        for (i, cat) in outcome.order.iter().enumerate() {
            let head = &outcome.banks[i];
            let images = tests.get(cat)?;
            let oracle: Vec<AnomalyResult> = images
                .par_iter()
                .map(|img| pipeline::score_with_head(img, head, &run_cfg.scoring))
                .collect::<Result<_>>()?;
            let candidates: Vec<&PrototypeBank> = outcome.banks.iter().collect();
            let routed = evaluate_images(images, &candidates, &run_cfg)?;
            mismatches += routed
                .iter()
                .zip(&oracle)
                .filter(|((_, r), o)| r.routed_category == *cat && r.heads.len() == 1 && r != *o)
                .count();
            let mut set = metrics::ScoredSet::default();
            for (img, o) in images.iter().zip(&oracle) {
                set.push(o.image_score, img.anomalous);
            }
            k_rows.push(KsweepRow {
                k,
                category: cat.clone(),
                oracle_auroc: defined(metrics::auroc(&set))?,
                routed_auroc: last.categories[i].auroc,
                fm: if i + 1 < t {
                    fmv.per_category.get(cat).and_then(|c| c.0)
                } else {
                    None
                },
            });
        }
        let mean = KsweepRow {
            k,
            category: "mean".into(),
            oracle_auroc: mean_defined(k_rows.iter().map(|r| r.oracle_auroc)),
            routed_auroc: mean_defined(k_rows.iter().map(|r| r.routed_auroc)),
            fm: fmv.overall,
        };
        rows.extend(k_rows);
        rows.push(mean);
        order = outcome.order;
    }
    Ok(KsweepReport {
        order,
        rows,
        routed_oracle_mismatches: mismatches,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub k: usize,
    pub images: usize,
    pub total_seconds: f64,
    pub fps: f64,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub warmup: usize,
    pub categories: Vec<String>,
    pub rows: Vec<BenchRow>,
}

/// `(FPS, latency in ms)` from an image count and summed forward time.
pub fn throughput(images: usize, total_seconds: f64) -> (f64, f64) {
    let fps = images as f64 / total_seconds;
    (fps, 1000.0 / fps)
}

/// Times routing plus scoring of the routed head, one image in flight at a
/// time on a single worker. Features are loaded beforehand and excluded.
/// `warmup` untimed passes precede the measured pass for every K.
pub fn bench_throughput(
    manifest: &DatasetManifest,
    cfg: &ProtocolConfig,
    k_list: &[usize],
    warmup: usize,
    cache: &BankCache,
) -> Result<BenchReport> {
    let order = cfg.resolve_order(manifest)?;
    let ks: Vec<usize> = if k_list.is_empty() { vec![cfg.coreset.k] } else { k_list.to_vec() };
    let mut tests = TestSet::new(manifest, cfg.l2_normalize);
    let mut images: Vec<ImageInput> = Vec::new();
    for c in &order {
        images.extend_from_slice(tests.get(c)?);
    }
    if images.is_empty() {
        return Err(GcrError::EmptyInput("no test images to benchmark".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| GcrError::InvalidConfig(format!("benchmark pool: {e}")))?;
    let mut rows = Vec::with_capacity(ks.len());
    for &k in &ks {
        let coreset = CoresetConfig { k, ..cfg.coreset };
        let banks = order
            .iter()
            .map(|c| cache.get_or_build(manifest, c, &coreset, cfg.ema.as_ref(), cfg.l2_normalize))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&PrototypeBank> = banks.iter().collect();
        let total = pool.install(|| -> Result<f64> {
            for i in 0..warmup {
                let img = &images[i % images.len()];
                std::hint::black_box(pipeline::infer(img, &refs, &cfg.routing, &cfg.scoring)?);
            }
            let mut total = 0.0;
            for img in &images {
                let start = Instant::now();
                let out = pipeline::infer(img, &refs, &cfg.routing, &cfg.scoring)?;
                total += start.elapsed().as_secs_f64();
                std::hint::black_box(out);
            }
            Ok(total)
        })?;
        let (fps, latency_ms) = throughput(images.len(), total);
        rows.push(BenchRow {
            k,
            images: images.len(),
            total_seconds: total,
            fps,
            latency_ms,
        });
    }
    Ok(BenchReport {
        warmup,
        categories: order,
        rows,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| GcrError::json(path.display().to_string(), e))?;
    std::fs::write(path, json + "\n").map_err(|e| GcrError::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| GcrError::io(dir, e))
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn write_matrix_csv(path: &Path, order: &[String], m: &EvalMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["category".to_string()];
    header.extend((1..=order.len()).map(|t| format!("step_{t}")));
    w.write_record(&header)?;
    for (i, c) in order.iter().enumerate() {
        let mut row = vec![c.clone()];
        row.extend((0..order.len()).map(|t| fmt_cell(m.get(i, t))));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| GcrError::io(path, e))
}

/// Writes `step_<t>.json`, `eval_matrix*.csv`, `fm.json`, and the final
/// step's `scores.csv` and `routes.csv`.
pub fn write_continual_report(dir: impl AsRef<Path>, outcome: &ContinualOutcome) -> Result<()> {
    let dir = dir.as_ref();
    ensure_dir(dir)?;
    for s in &outcome.steps {
        write_json(&dir.join(format!("step_{}.json", s.step)), s)?;
    }
    write_matrix_csv(&dir.join("eval_matrix.csv"), &outcome.order, outcome.matrix())?;
    for (m, mat) in &outcome.matrices {
        write_matrix_csv(&dir.join(format!("eval_matrix_{}.csv", m.name())), &outcome.order, mat)?;
    }
    write_json(&dir.join("fm.json"), &outcome.fm)?;
    if let Some(last) = outcome.steps.last() {
        write_scores_csv(&dir.join("scores.csv"), last.images.iter().map(|e| &e.record))?;
        write_routes_csv(&dir.join("routes.csv"), &last.candidates, &last.images)?;
    }
    Ok(())
}

pub fn write_scores_csv<'a>(path: &Path, records: impl Iterator<Item = &'a ImageRecord>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["image_id", "category", "routed", "score", "label"])?;
    for r in records {
        w.write_record([
            r.image_id.as_str(),
            r.true_category.as_str(),
            r.routed_category.as_str(),
            &format!("{}", r.score),
            if r.anomalous { "1" } else { "0" },
        ])?;
    }
    w.flush().map_err(|e| GcrError::io(path, e))
}

/// `image_id, true_category, routed, r_<candidate>...`
pub fn write_routes_csv(path: &Path, candidates: &[String], images: &[EvaluatedImage]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["image_id".to_string(), "true_category".into(), "routed".into()];
    header.extend(candidates.iter().map(|c| format!("r_{c}")));
    w.write_record(&header)?;
    for e in images {
        let mut row = vec![
            e.record.image_id.clone(),
            e.record.true_category.clone(),
            e.decision.top().to_string(),
        ];
        row.extend(candidates.iter().map(|c| fmt_cell(e.decision.distances.get(c).copied())));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| GcrError::io(path, e))
}

pub fn write_ksweep_csv(path: impl AsRef<Path>, report: &KsweepReport) -> Result<()> {
    let path = path.as_ref();
    if let Some(p) = path.parent() {
        ensure_dir(p)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["k", "category", "oracle_auroc", "routed_auroc", "fm"])?;
    for r in &report.rows {
        w.write_record([
            r.k.to_string(),
            r.category.clone(),
            fmt_cell(r.oracle_auroc),
            fmt_cell(r.routed_auroc),
            fmt_cell(r.fm),
        ])?;
    }
    w.flush().map_err(|e| GcrError::io(path, e))
}

pub fn write_bench_json(path: impl AsRef<Path>, report: &BenchReport) -> Result<()> {
    let path = path.as_ref();
    if let Some(p) = path.parent() {
        ensure_dir(p)?;
    }
    write_json(path, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthSpec};

    fn tiny() -> SynthSpec {
        SynthSpec {
            num_categories: 3,
            dim: 6,
            grid: (4, 4),
            components_per_category: 2,
            train_images: 3,
            test_normal_images: 4,
            test_anomalous_images: 4,
            ..SynthSpec::default()
        }
    }

    fn cfg(k: usize) -> ProtocolConfig {
        ProtocolConfig {
            coreset: CoresetConfig { k, seed: 1 },
            ..ProtocolConfig::default()
        }
    }

    #[test]
    fn throughput_formula() {
        let (fps, lat) = throughput(10, 0.1);
        assert!((fps - 100.0).abs() < 1e-9);
        assert!((lat - 10.0).abs() < 1e-9);
    }

    #[test]
    fn single_step_has_undefined_fm() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate(&SynthSpec { num_categories: 1, ..tiny() }, dir.path()).unwrap();
        let out = run_continual(&m, &cfg(8), &BankCache::in_memory()).unwrap();
        assert_eq!(out.steps.len(), 1);
        assert_eq!(out.overall_fm(), None);
        let json = serde_json::to_value(&out.fm).unwrap();
        assert_eq!(json["per_metric"]["auroc"]["overall"], "undefined");
    }

    #[test]
    fn order_validation() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate(&tiny(), dir.path()).unwrap();
        let mut c = cfg(4);
        assert_eq!(c.resolve_order(&m).unwrap(), vec!["cat00", "cat01", "cat02"]);
        c.category_order = vec!["cat02".into(), "cat02".into()];
        assert!(c.resolve_order(&m).is_err());
        c.category_order = vec!["nope".into()];
        assert!(c.resolve_order(&m).is_err());
        c.category_order = vec!["cat01".into(), "cat00".into()];
        assert_eq!(c.resolve_order(&m).unwrap(), vec!["cat01", "cat00"]);
    }

    #[test]
    fn continual_run_with_disk_cache_and_reports() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate(&tiny(), dir.path().join("data")).unwrap();
        let cache = BankCache::at(dir.path().join("cache"));
        let out = run_continual(&m, &cfg(8), &cache).unwrap();
        assert_eq!(out.steps.len(), 3);
        assert_eq!(out.overall_fm(), Some(0.0));
        for s in &out.steps {
            assert_eq!(s.routing.all, Some(1.0));
        }
        // second run loads from disk and reproduces everything
        let again = run_continual(&m, &cfg(8), &cache).unwrap();
        assert_eq!(again.matrices, out.matrices);
        for (a, b) in out.steps.iter().zip(&again.steps) {
            assert_eq!(a.head_checksums, b.head_checksums);
        }
        let rep = dir.path().join("report");
        write_continual_report(&rep, &out).unwrap();
        for f in ["step_1.json", "step_3.json", "eval_matrix.csv", "fm.json", "scores.csv", "routes.csv"] {
            assert!(rep.join(f).is_file(), "{f}");
        }
        let csv = std::fs::read_to_string(rep.join("eval_matrix.csv")).unwrap();
        assert!(csv.starts_with("category,step_1,step_2,step_3\ncat00,"));
        let step: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(rep.join("step_3.json")).unwrap()).unwrap();
        assert_eq!(step["routing"]["conditional_auroc_routed_wrong"], "undefined");
    }

    #[test]
    fn tampered_cache_is_a_protocol_violation() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate(&tiny(), dir.path().join("data")).unwrap();
        let cache = BankCache::at(dir.path().join("cache"));
        run_continual(&m, &cfg(8), &cache).unwrap();
        let key_dir = std::fs::read_dir(dir.path().join("cache")).unwrap().next().unwrap().unwrap().path();
        let proto = key_dir.join("cat00").join("prototypes.gcrf");
        let mut bytes = std::fs::read(&proto).unwrap();
        let n = bytes.len();
        bytes[n - 2] ^= 0x40;
        std::fs::write(&proto, bytes).unwrap();
        assert!(run_continual(&m, &cfg(8), &cache).is_err());
    }

    #[test]
    fn ksweep_and_bench_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate(&tiny(), dir.path()).unwrap();
        let cache = BankCache::in_memory();
        let ks = run_ksweep(&m, &cfg(4), &[2, 8], &cache).unwrap();
        assert_eq!(ks.rows.len(), 2 * 4);
        assert_eq!(ks.routed_oracle_mismatches, 0);
        for r in &ks.rows {
            assert_eq!(r.oracle_auroc, r.routed_auroc, "{r:?}");
        }
        let b = bench_throughput(&m, &cfg(4), &[2, 8], 2, &cache).unwrap();
        assert_eq!(b.rows.len(), 2);
        for r in &b.rows {
            assert_eq!(r.images, 24);
            assert_eq!(r.latency_ms, 1000.0 / r.fps);
        }
    }
}
