//! Command-line front end for the creativity assessment pipeline.
//!
//! Subcommands mirror the pipeline stages: `ingest` turns a manifest into a
//! record store, `train` fits the scoring head, `eval` reports rank
//! correlations per subset, `predict` scores individual images, and
//! `analyze` summarizes how the ink-intensity proxy tracks ratings.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use csca_core::analysis::{
    binned_means_csv, binned_rating_means, correlation_csv, plot_spec, style_rating_correlation,
};
use csca_core::backbone::{pretrained_bundle, toy_bundle, EncoderBundle};
use csca_core::dataset::{
    load_dataset, merge_annotations, normalize_ratings, source_fingerprint, RecordStore,
};
use csca_core::evaluation::{evaluate, EvalReport};
use csca_core::imaging::{ink_for_records, read_style_cache, stats_and_ink, write_style_cache};
use csca_core::model::{Checkpoint, CscaModel};
use csca_core::training::{ablation_row, train, write_history};
use csca_core::{AblationFlags, DrawingRecord, RunConfig, Split};
use log::{info, warn};

#[derive(Parser)]
#[command(name = "csca", version, about = "Creativity assessment for drawings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a record store from a manifest and optional annotations.
    Ingest(IngestArgs),
    /// Train the conditional scoring head on an ingested store.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one or more store subsets.
    Eval(EvalArgs),
    /// Score individual image files with a trained checkpoint.
    Predict(PredictArgs),
    /// Correlate the ink-intensity proxy with ratings.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// CSV with columns id,image_path,rating_raw,split. Must contain train
    /// rows: rating normalization and channel statistics anchor there.
    #[arg(long)]
    manifest: PathBuf,
    /// CSV with columns id,content_label. Omitting it disables
    /// classification diagnostics and per-category analyses.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Output record store (JSON).
    #[arg(long)]
    out_store: PathBuf,
}

#[derive(Args)]
struct BackboneArgs {
    /// Encoder backbone: `toy` or `vit-l-14`.
    #[arg(long, default_value = "toy")]
    backbone: String,
    /// Encoder export file; required for `vit-l-14`.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Embedding width of the toy backbone.
    #[arg(long, default_value_t = 64)]
    toy_dim: usize,
    /// Seed of the toy backbone. Evaluation and prediction must reuse the
    /// training value; checkpoints verify this via the encoder checksum.
    #[arg(long, default_value_t = 0)]
    toy_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Record store from `ingest`.
    #[arg(long)]
    store: PathBuf,
    #[command(flatten)]
    backbone: BackboneArgs,
    /// TOML run configuration; every field must be present. Omit the flag
    /// to run with defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured component flags with an ablation row 1..=5.
    #[arg(long)]
    ablation: Option<usize>,
    /// Output directory for checkpoint.json, history.csv, and config.toml.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint from `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Record store holding the subsets to score.
    #[arg(long)]
    store: PathBuf,
    #[command(flatten)]
    backbone: BackboneArgs,
    /// Comma-separated subsets to evaluate.
    #[arg(long, value_delimiter = ',', default_value = "test,rg1,rg2,fg")]
    subsets: Vec<String>,
    /// Output directory for report.txt and report.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint from `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    backbone: BackboneArgs,
    /// Image files to score.
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Record store from `ingest`.
    #[arg(long)]
    store: PathBuf,
    /// Number of equal-width style bins.
    #[arg(long, default_value_t = 5)]
    bins: usize,
    /// Output directory for correlation.csv, binned_means.csv, and
    /// plot_spec.json.
    #[arg(long)]
    out: PathBuf,
}

/// Exclusive marker file protecting an output directory from concurrent
/// runs. Removed on drop.
struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        let path = dir.join(".csca.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(LockGuard { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "{} is in use by another run; remove {} if that run is gone",
                dir.display(),
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("locking {}", dir.display())),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Ingest(args) => ingest(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Predict(args) => run_predict(args),
        Command::Analyze(args) => run_analyze(args),
    }
}

fn load_bundle(args: &BackboneArgs) -> Result<Arc<dyn EncoderBundle>> {
    match args.backbone.as_str() {
        "toy" => Ok(Arc::new(toy_bundle(args.toy_dim, args.toy_seed)?)),
        other => {
            let weights = args
                .weights
                .as_deref()
                .with_context(|| format!("backbone `{other}` needs --weights"))?;
            Ok(pretrained_bundle(other, weights)?)
        }
    }
}

/// Style cache path for the given source digest, when CSCA_CACHE_DIR is
/// set. The cache is keyed by the manifest and annotation bytes; it goes
/// stale if image files are edited in place.
fn style_cache_path(fingerprint: &str) -> Option<PathBuf> {
    let dir = std::env::var_os("CSCA_CACHE_DIR")?;
    Some(Path::new(&dir).join(format!("style-{fingerprint}.csv")))
}

fn ingest(args: IngestArgs) -> Result<()> {
    let manifest_bytes = fs::read(&args.manifest)
        .with_context(|| format!("reading {}", args.manifest.display()))?;
    let records = load_dataset(&args.manifest)?;
    info!("loaded {} records from {}", records.len(), args.manifest.display());

    let (records, ann_bytes) = match &args.annotations {
        Some(path) => {
            let bytes =
                fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let outcome = merge_annotations(records, path)?;
            if !outcome.unannotated.is_empty() {
                warn!(
                    "{} records have no content label (first: {})",
                    outcome.unannotated.len(),
                    outcome.unannotated[0]
                );
            }
            if !outcome.unmatched.is_empty() {
                warn!(
                    "{} annotation rows match no record (first: {})",
                    outcome.unmatched.len(),
                    outcome.unmatched[0]
                );
            }
            (outcome.records, Some(bytes))
        }
        None => {
            warn!(
                "no --annotations given; classification diagnostics and \
                 per-category analyses will be unavailable"
            );
            (records, None)
        }
    };

    let mut records = normalize_ratings(records, Split::Train)?;
    let fingerprint = source_fingerprint(&manifest_bytes, ann_bytes.as_deref());

    let train_refs: Vec<&DrawingRecord> =
        records.iter().filter(|r| r.split == Split::Train).collect();
    info!("computing channel statistics over {} train images", train_refs.len());
    let (stats, mut ink) = stats_and_ink(&train_refs)?;

    let cache_path = style_cache_path(&fingerprint);
    let cached: BTreeMap<String, f64> = match &cache_path {
        Some(p) if p.exists() => {
            let map = read_style_cache(p)?;
            info!("style cache hit: {} entries from {}", map.len(), p.display());
            map
        }
        _ => BTreeMap::new(),
    };

    let rest: Vec<&DrawingRecord> = records
        .iter()
        .filter(|r| r.split != Split::Train && !cached.contains_key(&r.id))
        .collect();
    if !rest.is_empty() {
        info!("computing ink intensity for {} non-train images", rest.len());
        ink.extend(ink_for_records(&rest)?);
    }
    for (id, value) in cached {
        ink.entry(id).or_insert(value);
    }
    for r in &mut records {
        r.style_scalar = Some(*ink.get(&r.id).expect("every record has an ink value"));
    }

    if let Some(p) = &cache_path {
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating cache directory {}", parent.display()))?;
        }
        write_style_cache(p, &ink)?;
        info!("style cache written to {}", p.display());
    }

    let store = RecordStore::new(records, stats, fingerprint.clone());
    store.save(&args.out_store)?;
    println!("store written to {}", args.out_store.display());
    println!("source fingerprint: {fingerprint}");
    for (split, count) in csca_core::dataset::split_counts(&store.records) {
        println!("  {}: {count}", split.report_label());
    }
    Ok(())
}

/// Run configuration file with every field optional, so missing entries
/// can be reported together with their defaults.
#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    max_epochs: Option<usize>,
    lambda_cls: Option<f64>,
    temperature: Option<f64>,
    seed: Option<u64>,
    early_stop_patience: Option<usize>,
    tuner_hidden_dim: Option<usize>,
    tokens_per_level: Option<usize>,
    score_on_modulated: Option<bool>,
    renormalize_modulated: Option<bool>,
    ablation: Option<RawAblation>,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAblation {
    use_lcr: Option<bool>,
    use_sct: Option<bool>,
    use_cct: Option<bool>,
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let raw: RawConfig = toml::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))?;
    let d = RunConfig::default();
    let da = d.ablation;

    let mut missing = Vec::new();
    macro_rules! require {
        ($field:expr, $name:expr, $default:expr) => {
            match $field {
                Some(v) => v,
                None => {
                    missing.push(format!("{} (default {})", $name, $default));
                    $default
                }
            }
        };
    }
    let ablation = raw.ablation.as_ref();
    let config = RunConfig {
        batch_size: require!(raw.batch_size, "batch_size", d.batch_size),
        learning_rate: require!(raw.learning_rate, "learning_rate", d.learning_rate),
        max_epochs: require!(raw.max_epochs, "max_epochs", d.max_epochs),
        lambda_cls: require!(raw.lambda_cls, "lambda_cls", d.lambda_cls),
        temperature: require!(raw.temperature, "temperature", d.temperature),
        seed: require!(raw.seed, "seed", d.seed),
        early_stop_patience: require!(
            raw.early_stop_patience,
            "early_stop_patience",
            d.early_stop_patience
        ),
        tuner_hidden_dim: require!(raw.tuner_hidden_dim, "tuner_hidden_dim", d.tuner_hidden_dim),
        tokens_per_level: require!(raw.tokens_per_level, "tokens_per_level", d.tokens_per_level),
        score_on_modulated: require!(
            raw.score_on_modulated,
            "score_on_modulated",
            d.score_on_modulated
        ),
        renormalize_modulated: require!(
            raw.renormalize_modulated,
            "renormalize_modulated",
            d.renormalize_modulated
        ),
        ablation: AblationFlags {
            use_lcr: require!(
                ablation.and_then(|a| a.use_lcr),
                "ablation.use_lcr",
                da.use_lcr
            ),
            use_sct: require!(
                ablation.and_then(|a| a.use_sct),
                "ablation.use_sct",
                da.use_sct
            ),
            use_cct: require!(
                ablation.and_then(|a| a.use_cct),
                "ablation.use_cct",
                da.use_cct
            ),
        },
    };
    if !missing.is_empty() {
        bail!(
            "{} is missing {} field(s): {}",
            path.display(),
            missing.len(),
            missing.join(", ")
        );
    }
    Ok(config)
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(row) = args.ablation {
        config = ablation_row(&config, row)?;
    }
    config.validate()?;

    let _lock = LockGuard::acquire(&args.out)?;
    let store = RecordStore::load(&args.store)?;
    let bundle = load_bundle(&args.backbone)?;
    println!("backbone: {} (d = {})", bundle.model_id(), bundle.embed_dim());
    println!("config fingerprint: {}", config.fingerprint());

    let outcome = train(&store.records, bundle, &store.channel_stats, &config)?;

    let ckpt_path = args.out.join("checkpoint.json");
    outcome.checkpoint.save(&ckpt_path)?;
    write_history(&args.out.join("history.csv"), &outcome.history)?;
    let config_toml =
        toml::to_string_pretty(&config).context("serializing resolved configuration")?;
    fs::write(args.out.join("config.toml"), config_toml)
        .with_context(|| format!("writing {}", args.out.join("config.toml").display()))?;

    let best = &outcome.checkpoint;
    println!(
        "trained {} epochs; best epoch {} (val total {:.6})",
        outcome.history.len(),
        best.best_epoch,
        best.best_val_total
    );
    println!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let subsets: Vec<Split> = args
        .subsets
        .iter()
        .map(|s| s.parse::<Split>().map_err(anyhow::Error::from))
        .collect::<Result<_>>()?;

    let _lock = LockGuard::acquire(&args.out)?;
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let store = RecordStore::load(&args.store)?;
    let bundle = load_bundle(&args.backbone)?;
    let model = CscaModel::from_checkpoint(&checkpoint, bundle)?;

    let mut entries = Vec::new();
    for subset in subsets {
        let n = store.split(subset).len();
        if n < 3 {
            warn!(
                "skipping subset `{}`: {} record(s), need at least 3",
                subset.report_label(),
                n
            );
            continue;
        }
        info!("evaluating `{}` ({} records)", subset.report_label(), n);
        entries.push(evaluate(&model, &store.records, subset)?);
    }
    if entries.is_empty() {
        bail!("no requested subset had enough records to evaluate");
    }

    let report = EvalReport::new(&model, entries);
    let table = report.render_table();
    print!("{table}");
    fs::write(args.out.join("report.txt"), &table)
        .with_context(|| format!("writing {}", args.out.join("report.txt").display()))?;
    let json = serde_json::to_string_pretty(&report).context("serializing report")?;
    fs::write(args.out.join("report.json"), json + "\n")
        .with_context(|| format!("writing {}", args.out.join("report.json").display()))?;
    println!("report written to {}", args.out.display());
    Ok(())
}

fn run_predict(args: PredictArgs) -> Result<()> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let bundle = load_bundle(&args.backbone)?;
    let model = CscaModel::from_checkpoint(&checkpoint, bundle)?;

    let join = |values: &[f64]| -> String {
        values
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect::<Vec<_>>()
            .join(",")
    };
    for image in &args.images {
        let p = model.predict_image(image)?;
        println!(
            "image={} score={:.6} ink={:.6} level_probs={} content_probs={}",
            image.display(),
            p.score,
            p.t_i,
            join(&p.level_probs),
            join(&p.content_probs)
        );
    }
    Ok(())
}

fn run_analyze(args: AnalyzeArgs) -> Result<()> {
    let _lock = LockGuard::acquire(&args.out)?;
    let store = RecordStore::load(&args.store)?;

    let table = style_rating_correlation(&store.records)?;
    for row in &table.rows {
        let name = row
            .category
            .map_or("combined".to_string(), |c| c.to_string());
        println!(
            "{name}: srcc {:.4} (p = {:.4}, n = {})",
            row.srcc, row.p_value, row.n
        );
    }
    for s in &table.skipped {
        warn!("skipped category {}: {} ({} records)", s.category, s.reason, s.n);
    }
    if table.unlabeled > 0 {
        warn!("{} records without content label were excluded", table.unlabeled);
    }
    fs::write(args.out.join("correlation.csv"), correlation_csv(&table))
        .with_context(|| format!("writing {}", args.out.join("correlation.csv").display()))?;

    let cells = binned_rating_means(&store.records, args.bins)?;
    fs::write(args.out.join("binned_means.csv"), binned_means_csv(&cells))
        .with_context(|| format!("writing {}", args.out.join("binned_means.csv").display()))?;

    let spec = plot_spec(&store.records, args.bins)?;
    let json = serde_json::to_string_pretty(&spec).context("serializing plot spec")?;
    fs::write(args.out.join("plot_spec.json"), json + "\n")
        .with_context(|| format!("writing {}", args.out.join("plot_spec.json").display()))?;

    println!("analysis written to {}", args.out.display());
    Ok(())
}
