//! `gcr`: build banks, score images, and run the continual protocol.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use gcr_core::bank::{build_bank, ema_fit_precisions, load_banks, save_bank};
use gcr_core::harness::{
    bench_throughput, run_continual, run_ksweep, write_bench_json, write_continual_report,
    write_ksweep_csv, write_routes_csv, BankCache, EvaluatedImage,
};
use gcr_core::metrics::{routing_accuracy, ImageRecord, Slice};
use gcr_core::synth::{generate, SynthSpec};
use gcr_core::{
    load_manifest, Aggregation, BaseMetric, DatasetManifest, ImageInput, Normalize,
    PatchFeatureMap, PrototypeBank, RoutingRule, RunConfig, ScoreForm, Split,
};

const CACHE_ENV: &str = "GCR_CACHE_DIR";

#[derive(Parser, Debug)]
#[command(name = "gcr", version, about = "Geometry-routed prototype banks for continual anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the prototype bank of one category from its training images.
    BuildBank(BuildBankArgs),
    /// Route one image among the saved banks and score it with the routed head.
    Score(ScoreArgs),
    /// Route test images among the saved banks and write routes.csv.
    Route(RouteArgs),
    /// Run the sequential-category protocol and write a report directory.
    EvalContinual(EvalArgs),
    /// Repeat the continual run for several bank sizes.
    Ksweep(KsweepArgs),
    /// Measure per-image throughput of routing plus scoring.
    Bench(BenchArgs),
    /// Generate a synthetic multi-category dataset.
    Synth(SynthArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        matches!(self, Switch::On)
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum RuleArg {
    Geometry,
    ScoreBased,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum FormArg {
    Energy,
    Nll,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AggArg {
    Lse,
    Min,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum NormArg {
    Sum,
    Mean,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MetricArg {
    Auroc,
    PAp,
}

/// Bank construction flags shared by every command that builds banks.
#[derive(Args, Debug, Clone)]
struct BankOpts {
    /// Seed for the coreset's first pick [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Fit per-dimension precisions with an EMA pass [default: off]
    #[arg(long, value_enum)]
    ema: Option<Switch>,
    /// EMA decay [default: 0.99]
    #[arg(long)]
    ema_decay: Option<f64>,
    /// Variance floor for the EMA precisions [default: 1e-6]
    #[arg(long)]
    var_floor: Option<f64>,
    /// L2-normalize every patch feature [default: off]
    #[arg(long, value_enum)]
    l2: Option<Switch>,
    /// JSON run configuration; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Routing and scoring flags.
#[derive(Args, Debug, Clone)]
struct EngineOpts {
    /// Routing rule [default: geometry]
    #[arg(long, value_enum)]
    routing: Option<RuleArg>,
    /// Routing distance normalization [default: mean]
    #[arg(long, value_enum)]
    normalize: Option<NormArg>,
    /// Number of routed heads whose maps are max-fused [default: 1]
    #[arg(long)]
    topk: Option<usize>,
    /// Route on M seeded random patches instead of all [default: all]
    #[arg(long)]
    subsample: Option<usize>,
    /// Seed for the routing subsample [default: 0]
    #[arg(long)]
    subsample_seed: Option<u64>,
    /// Within-head scoring form [default: energy]
    #[arg(long, value_enum)]
    scoring: Option<FormArg>,
    /// Aggregation over prototypes [default: lse]
    #[arg(long, value_enum)]
    agg: Option<AggArg>,
    /// Temperature [default: 1]
    #[arg(long)]
    tau: Option<f64>,
    /// Restrict the log-sum-exp to the nearest K_e prototypes [default: all]
    #[arg(long)]
    top_ke: Option<usize>,
    /// Fraction of pixels averaged into the image score [default: 0.01]
    #[arg(long)]
    topq: Option<f64>,
    /// Worker threads [default: available parallelism]
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct BuildBankArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    category: String,
    /// Number of prototypes [default: 196]
    #[arg(long = "K")]
    k: Option<usize>,
    #[command(flatten)]
    bank: BankOpts,
    /// Bank root; the bank is written to <out>/<category>/
    #[arg(long, default_value = "banks")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// GCRF feature map [C, H_grid, W_grid] of one image
    #[arg(long)]
    image_features: PathBuf,
    /// Directory holding one bank per category
    #[arg(long)]
    banks: PathBuf,
    /// Pixel map size as HxW [default: the patch grid]
    #[arg(long, value_parser = parse_size)]
    image_size: Option<(usize, usize)>,
    #[command(flatten)]
    engine: EngineOpts,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where to write the pixel anomaly map
    #[arg(long, default_value = "pixel_map.gcrf")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RouteArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    banks: PathBuf,
    /// Only route this category's test images
    #[arg(long)]
    category: Option<String>,
    #[command(flatten)]
    engine: EngineOpts,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "routes.csv")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Number of prototypes per bank [default: 196]
    #[arg(long = "K")]
    k: Option<usize>,
    /// Comma-separated arrival order [default: lexicographic]
    #[arg(long, value_delimiter = ',')]
    order: Option<Vec<String>>,
    /// Metric whose forgetting is reported first [default: auroc]
    #[arg(long, value_enum)]
    base_metric: Option<MetricArg>,
    #[command(flatten)]
    bank: BankOpts,
    #[command(flatten)]
    engine: EngineOpts,
    /// Report directory [default: report]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct KsweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated bank sizes [default: 16,32,64,128,256,512]
    #[arg(long = "K", value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    order: Option<Vec<String>>,
    #[command(flatten)]
    bank: BankOpts,
    #[command(flatten)]
    engine: EngineOpts,
    /// Report directory [default: report]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated bank sizes [default: 196]
    #[arg(long = "K", value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Untimed passes before measuring
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[command(flatten)]
    bank: BankOpts,
    #[command(flatten)]
    engine: EngineOpts,
    /// Report directory [default: report]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// JSON generator spec; omitted fields take their defaults
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Overrides the spec's seed
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW")?;
    let h: usize = h.trim().parse().map_err(|_| "bad height")?;
    let w: usize = w.trim().parse().map_err(|_| "bad width")?;
    if h == 0 || w == 0 {
        return Err("sizes must be positive".into());
    }
    Ok((h, w))
}

fn base_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

impl BankOpts {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.coreset.seed = s;
        }
        if let Some(e) = self.ema {
            cfg.protocol.ema.enabled = e.on();
        }
        if let Some(d) = self.ema_decay {
            cfg.protocol.ema.decay = d;
        }
        if let Some(f) = self.var_floor {
            cfg.protocol.ema.var_floor = f;
        }
        if let Some(l) = self.l2 {
            cfg.l2_normalize = l.on();
        }
    }
}

impl EngineOpts {
    fn apply(&self, cfg: &mut RunConfig) {
        let r = &mut cfg.routing;
        if let Some(rule) = self.routing {
            r.rule = match rule {
                RuleArg::Geometry => RoutingRule::Geometry,
                RuleArg::ScoreBased => RoutingRule::ScoreBased,
            };
        }
        if let Some(n) = self.normalize {
            r.normalize = match n {
                NormArg::Sum => Normalize::Sum,
                NormArg::Mean => Normalize::Mean,
            };
        }
        if let Some(k) = self.topk {
            r.topk = k;
        }
        if self.subsample.is_some() {
            r.subsample_m = self.subsample;
        }
        if let Some(s) = self.subsample_seed {
            r.subsample_seed = s;
        }
        let s = &mut cfg.scoring;
        if let Some(f) = self.scoring {
            s.form = match f {
                FormArg::Energy => ScoreForm::Energy,
                FormArg::Nll => ScoreForm::Nll,
            };
        }
        if let Some(a) = self.agg {
            s.aggregation = match a {
                AggArg::Lse => Aggregation::Lse,
                AggArg::Min => Aggregation::Min,
            };
        }
        if let Some(t) = self.tau {
            s.tau = t;
        }
        if self.top_ke.is_some() {
            s.top_ke = self.top_ke;
        }
        if let Some(q) = self.topq {
            s.topq = q;
        }
        if self.threads.is_some() {
            cfg.threads = self.threads;
        }
    }
}

fn init_threads(cfg: &RunConfig) -> Result<()> {
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn output_dir(flag: Option<&PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.cloned()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("report"))
}

/// `GCR_CACHE_DIR` if set, else `<out>/cache`.
fn bank_cache(out: &Path) -> BankCache {
    match std::env::var_os(CACHE_ENV) {
        Some(dir) if !dir.is_empty() => BankCache::at(PathBuf::from(dir)),
        _ => BankCache::at(out.join("cache")),
    }
}

fn open_manifest(path: &Path) -> Result<DatasetManifest> {
    load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn open_banks(dir: &Path) -> Result<Vec<PrototypeBank>> {
    let banks = load_banks(dir).with_context(|| format!("loading banks from {}", dir.display()))?;
    if banks.is_empty() {
        bail!("no banks found under {}", dir.display());
    }
    Ok(banks)
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "undefined".into())
}

fn cmd_build_bank(a: &BuildBankArgs) -> Result<()> {
    let mut cfg = base_config(a.bank.config.as_deref())?;
    a.bank.apply(&mut cfg);
    if let Some(k) = a.k {
        cfg.coreset.k = k;
    }
    cfg.validate()?;
    let manifest = open_manifest(&a.manifest)?;
    let mut bank = build_bank(&manifest, &a.category, &cfg.coreset, cfg.l2_normalize)?;
    if let Some(ema) = cfg.protocol.ema.config() {
        bank = ema_fit_precisions(&bank, &manifest, &ema)?;
    }
    let dir = save_bank(&bank, &a.out)?;
    println!("{} K={} D={} checksum={}", dir.display(), bank.k(), bank.dim(), bank.checksum());
    Ok(())
}

fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let mut cfg = base_config(a.config.as_deref())?;
    a.engine.apply(&mut cfg);
    cfg.validate()?;
    init_threads(&cfg)?;
    let banks = open_banks(&a.banks)?;
    let l2 = banks[0].meta().l2_normalize;
    let id = a
        .image_features
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let features = PatchFeatureMap::load(id, &a.image_features)?;
    let size = a.image_size.unwrap_or_else(|| features.grid());
    let image = ImageInput::from_features(&features, size, l2);
    let refs: Vec<&PrototypeBank> = banks.iter().collect();
    let (decision, result) = gcr_core::pipeline::infer(&image, &refs, &cfg.routing, &cfg.scoring)?;
    result.pixel_map.save(&a.out)?;
    let summary = serde_json::json!({
        "image_id": image.image_id,
        "routed": result.routed_category,
        "heads": result.heads,
        "image_score": result.image_score,
        "routing": decision,
        "pixel_map": a.out,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_route(a: &RouteArgs) -> Result<()> {
    let mut cfg = base_config(a.config.as_deref())?;
    a.engine.apply(&mut cfg);
    cfg.validate()?;
    init_threads(&cfg)?;
    let manifest = open_manifest(&a.manifest)?;
    let banks = open_banks(&a.banks)?;
    let l2 = banks[0].meta().l2_normalize;
    let refs: Vec<&PrototypeBank> = banks.iter().collect();
    let candidates: Vec<String> = banks.iter().map(|b| b.category().to_string()).collect();
    let entries: Vec<_> = manifest
        .entries
        .iter()
        .filter(|e| e.split == Split::Test && a.category.as_ref().map_or(true, |c| *c == e.category))
        .collect();
    if entries.is_empty() {
        bail!("no test images to route");
    }
    use rayon::prelude::*;
    let evaluated = entries
        .par_iter()
        .map(|e| -> gcr_core::Result<EvaluatedImage> {
            let img = ImageInput::from_entry(&manifest, e, l2)?;
            let decision = gcr_core::pipeline::route_image(&img, &refs, &cfg.routing, &cfg.scoring)?;
            Ok(EvaluatedImage {
                record: ImageRecord {
                    image_id: img.image_id.clone(),
                    true_category: e.category.clone(),
                    routed_category: decision.top().to_string(),
                    score: f64::NAN,
                    anomalous: img.anomalous,
                },
                decision,
            })
        })
        .collect::<gcr_core::Result<Vec<_>>>()?;
    if let Some(p) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p)?;
    }
    write_routes_csv(&a.out, &candidates, &evaluated)?;
    let records: Vec<ImageRecord> = evaluated.into_iter().map(|e| e.record).collect();
    println!(
        "routed {} images; accuracy {}",
        records.len(),
        fmt_metric(routing_accuracy(&records, Slice::All).ok())
    );
    Ok(())
}

fn protocol_from(
    bank: &BankOpts,
    engine: &EngineOpts,
    k: Option<usize>,
    order: Option<&Vec<String>>,
) -> Result<RunConfig> {
    let mut cfg = base_config(bank.config.as_deref())?;
    bank.apply(&mut cfg);
    engine.apply(&mut cfg);
    if let Some(k) = k {
        cfg.coreset.k = k;
    }
    if let Some(o) = order {
        cfg.protocol.category_order = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let mut cfg = protocol_from(&a.bank, &a.engine, a.k, a.order.as_ref())?;
    if let Some(m) = a.base_metric {
        cfg.protocol.base_metric = match m {
            MetricArg::Auroc => BaseMetric::Auroc,
            MetricArg::PAp => BaseMetric::PAp,
        };
    }
    init_threads(&cfg)?;
    let out = output_dir(a.out.as_ref(), &cfg);
    let manifest = open_manifest(&a.manifest)?;
    let outcome = run_continual(&manifest, &cfg.protocol_config(), &bank_cache(&out))?;
    write_continual_report(&out, &outcome)?;
    for s in &outcome.steps {
        println!(
            "step {} (+{}): routing accuracy {}",
            s.step,
            s.added,
            fmt_metric(s.routing.all)
        );
    }
    for (name, v) in &outcome.fm.per_metric {
        println!("FM[{name}] = {}", fmt_metric(v.overall));
    }
    println!("report written to {}", out.display());
    Ok(())
}

fn cmd_ksweep(a: &KsweepArgs) -> Result<()> {
    let cfg = protocol_from(&a.bank, &a.engine, None, a.order.as_ref())?;
    init_threads(&cfg)?;
    let ks = a
        .k
        .clone()
        .or_else(|| cfg.protocol.k_sweep.clone())
        .unwrap_or_else(|| vec![16, 32, 64, 128, 256, 512]);
    if ks.is_empty() || ks.contains(&0) {
        bail!("--K must list positive bank sizes");
    }
    let out = output_dir(a.out.as_ref(), &cfg);
    let manifest = open_manifest(&a.manifest)?;
    let report = run_ksweep(&manifest, &cfg.protocol_config(), &ks, &bank_cache(&out))?;
    write_ksweep_csv(out.join("ksweep.csv"), &report)?;
    for r in report.rows.iter().filter(|r| r.category == "mean") {
        println!(
            "K={}: oracle {} routed {} FM {}",
            r.k,
            fmt_metric(r.oracle_auroc),
            fmt_metric(r.routed_auroc),
            fmt_metric(r.fm)
        );
    }
    println!("routed/oracle mismatches: {}", report.routed_oracle_mismatches);
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let cfg = protocol_from(&a.bank, &a.engine, None, None)?;
    // Timing runs single-in-flight on its own pool; --threads is ignored.
    let ks = a.k.clone().unwrap_or_else(|| vec![cfg.coreset.k]);
    if ks.contains(&0) {
        bail!("--K must list positive bank sizes");
    }
    let out = output_dir(a.out.as_ref(), &cfg);
    let manifest = open_manifest(&a.manifest)?;
    let report = bench_throughput(&manifest, &cfg.protocol_config(), &ks, a.warmup, &bank_cache(&out))?;
    write_bench_json(out.join("bench.json"), &report)?;
    for r in &report.rows {
        println!("K={}: {:.1} FPS, {:.4} ms/image", r.k, r.fps, r.latency_ms);
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut spec: SynthSpec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SynthSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let manifest = generate(&spec, &a.out)?;
    println!(
        "wrote {} images over {} categories to {}",
        manifest.entries.len(),
        manifest.categories().len(),
        a.out.join("manifest.jsonl").display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::BuildBank(a) => cmd_build_bank(a),
        Command::Score(a) => cmd_score(a),
        Command::Route(a) => cmd_route(a),
        Command::EvalContinual(a) => cmd_eval(a),
        Command::Ksweep(a) => cmd_ksweep(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
