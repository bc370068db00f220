//! `minicbir` — command-line surface for the retrieval pipeline.
//!
//! One command per process. Every command resolves an *effective
//! configuration* in three layers — preset defaults, then the optional JSON
//! config file, then command-line flags — echoes it, and only then touches
//! any data. All commands are deterministic given (config, seed): reruns
//! write byte-identical checkpoints and indexes, and reports differ only in
//! their wall-clock `timing` field.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (missing or undecodable files), 3 verification failure (`gradcheck`).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use minicbir::data::{
    generate_groups_of_4, generate_synthetic, load_dataset, load_image, save_dataset, ImageRecord,
    SynthSpec, SyntheticDataset,
};
use minicbir::gradcheck::run_suite;
use minicbir::miner::MiningStrategy;
use minicbir::model::{MiniDrn, ModelConfig};
use minicbir::pipeline::{
    compare_miners, embed_records, evaluate_groups_of_4, evaluate_retrieval, index_records,
};
use minicbir::retrieval::{query_topk, EmbeddingIndex};
use minicbir::trainer::{train, TrainConfig};

// --- error handling with contract exit codes --------------------------------

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_VERIFY: u8 = 3;

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    fn verify(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_VERIFY,
            message: message.into(),
        }
    }
}

impl From<minicbir::Error> for CliError {
    fn from(err: minicbir::Error) -> Self {
        let code = match &err {
            minicbir::Error::Config(_) | minicbir::Error::Usage(_) => EXIT_USAGE,
            minicbir::Error::Io(_)
            | minicbir::Error::Parse { .. }
            | minicbir::Error::Json(_)
            | minicbir::Error::Shape(_)
            | minicbir::Error::Numeric(_) => EXIT_DATA,
        };
        CliError {
            code,
            message: err.to_string(),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(err: serde_json::Error) -> Self {
        CliError::usage(format!("invalid JSON: {err}"))
    }
}

type CliResult<T> = Result<T, CliError>;

// --- command line definition -------------------------------------------------

#[derive(Parser)]
#[command(
    name = "minicbir",
    version,
    about = "Desk-scale image retrieval: synthetic data, triplet training, cosine search"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset (or groups-of-4 dataset).
    GenData(GenDataArgs),
    /// Train an embedding model on a dataset's train split.
    Train(TrainArgs),
    /// Embed one image or a dataset split; prints JSON embeddings.
    Embed(EmbedArgs),
    /// Build a searchable embedding index from a dataset split.
    Index(IndexArgs),
    /// Query an index with an image; prints ranked ids and distances.
    Query(QueryArgs),
    /// Evaluate a model on a dataset; writes the report as text and JSON.
    Evaluate(EvaluateArgs),
    /// Train all four mining strategies over several seeds and rank them.
    CompareMiners(CompareMinersArgs),
    /// Run the finite-difference gradient suite; exits 3 on failure.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON run-config file (sections: preset, model, train, data, paths).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset supplying training defaults: "desk" or "paper".
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output dataset directory (falls back to paths.dataset).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset generator seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Number of labeled classes.
    #[arg(long)]
    classes: Option<u32>,
    /// Images per class.
    #[arg(long)]
    images_per_class: Option<u32>,
    /// Square image side in pixels (multiple of 4).
    #[arg(long)]
    image_size: Option<usize>,
    /// Gallery-only distractor images with unique labels.
    #[arg(long)]
    distractors: Option<u32>,
    /// Generate this many groups of 4 views instead of a class dataset.
    #[arg(long)]
    groups: Option<u32>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory (falls back to paths.dataset).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint file to write (falls back to paths.checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for per-epoch checkpoints.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

/// Flag-level overrides applied on top of the resolved train section.
#[derive(Args, Clone, Default)]
struct TrainOverrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    classes_per_batch: Option<usize>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    /// Mining strategy: hardest_neg_all_pos | hardest_neg_hardest_pos |
    /// hardest_neg_easiest_pos | easiest_neg_all_pos.
    #[arg(long)]
    strategy: Option<String>,
    /// Rescale each step's gradient to this global L2 norm (0 disables).
    #[arg(long)]
    grad_norm: Option<f64>,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Model checkpoint (falls back to paths.checkpoint).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// A single PPM image to embed.
    #[arg(long, conflicts_with_all = ["data", "split"])]
    image: Option<PathBuf>,
    /// Dataset directory whose split is embedded.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Dataset split: train | gallery | query.
    #[arg(long, default_value = "gallery")]
    split: String,
    /// Write the JSON embeddings here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IndexArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Model checkpoint (falls back to paths.checkpoint).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory (falls back to paths.dataset).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Dataset split to index: train | gallery | query.
    #[arg(long, default_value = "gallery")]
    split: String,
    /// Index file to write (falls back to paths.index).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Model checkpoint (falls back to paths.checkpoint).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Index file (falls back to paths.index).
    #[arg(long)]
    index: Option<PathBuf>,
    /// Query PPM image.
    #[arg(long)]
    image: PathBuf,
    /// How many neighbors to return.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Print the result as JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Model checkpoint (falls back to paths.checkpoint).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory (falls back to paths.dataset).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Report base path; writes <out>.txt and <out>.json
    /// (falls back to paths.report).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareMinersArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory (falls back to paths.dataset).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated training seeds (at least 5).
    #[arg(long, default_value = "1,2,3,4,5")]
    seeds: String,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seed for the random check instances.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

// --- run configuration --------------------------------------------------------

/// Raw shape of the JSON config file. Sections stay untyped here so they can
/// be merged field-by-field onto the preset before strict validation.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfigFile {
    preset: Option<String>,
    model: Option<Value>,
    train: Option<Value>,
    data: Option<Value>,
    paths: Option<Value>,
}

/// Artifact locations; every command flag falls back to these.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PathsConfig {
    dataset: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    index: Option<PathBuf>,
    report: Option<PathBuf>,
}

/// Fully resolved configuration, echoed into every command's output.
#[derive(Debug, Clone, Serialize)]
struct EffectiveConfig {
    preset: String,
    model: ModelConfig,
    train: TrainConfig,
    data: SynthSpec,
    paths: PathsConfig,
}

/// Overlays `patch` onto `base` key-by-key (recursing into objects), then
/// re-validates the result against the strict section schema, so unknown or
/// ill-typed keys are rejected before any work happens.
fn merge_section<T>(base: &T, patch: Option<&Value>, section: &str) -> CliResult<T>
where
    T: Serialize + serde::de::DeserializeOwned,
{
    let mut merged = serde_json::to_value(base)?;
    if let Some(patch) = patch {
        if !patch.is_object() {
            return Err(CliError::usage(format!(
                "config section \"{section}\" must be a JSON object"
            )));
        }
        merge_value(&mut merged, patch);
    }
    serde_json::from_value(merged)
        .map_err(|err| CliError::usage(format!("config section \"{section}\": {err}")))
}

fn merge_value(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(base_map), Value::Object(patch_map)) => {
            for (key, patch_val) in patch_map {
                match base_map.get_mut(key) {
                    Some(base_val) if base_val.is_object() && patch_val.is_object() => {
                        merge_value(base_val, patch_val);
                    }
                    _ => {
                        base_map.insert(key.clone(), patch_val.clone());
                    }
                }
            }
        }
        (base, patch) => *base = patch.clone(),
    }
}

fn resolve_config(args: &ConfigArgs) -> CliResult<EffectiveConfig> {
    let file: RunConfigFile = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|err| {
                CliError::usage(format!("cannot read config {}: {err}", path.display()))
            })?;
            serde_json::from_str(&text)
                .map_err(|err| CliError::usage(format!("config {}: {err}", path.display())))?
        }
        None => RunConfigFile::default(),
    };

    let preset = args
        .preset
        .clone()
        .or_else(|| file.preset.clone())
        .unwrap_or_else(|| "desk".to_string());
    let train_base = match preset.as_str() {
        "desk" => TrainConfig::desk(),
        "paper" => TrainConfig::paper(),
        other => {
            return Err(CliError::usage(format!(
                "unknown preset {other:?}; expected \"desk\" or \"paper\""
            )))
        }
    };

    let model = merge_section(&ModelConfig::default(), file.model.as_ref(), "model")?;
    let train: TrainConfig = merge_section(&train_base, file.train.as_ref(), "train")?;
    let data: SynthSpec = merge_section(&SynthSpec::default(), file.data.as_ref(), "data")?;
    let paths = merge_section(&PathsConfig::default(), file.paths.as_ref(), "paths")?;

    Ok(EffectiveConfig {
        preset,
        model,
        train,
        data,
        paths,
    })
}

fn apply_train_overrides(cfg: &mut TrainConfig, flags: &TrainOverrides) -> CliResult<()> {
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = flags.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = flags.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = flags.momentum {
        cfg.momentum = v;
    }
    if let Some(v) = flags.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = flags.margin {
        cfg.margin = v;
    }
    if let Some(v) = flags.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = flags.classes_per_batch {
        cfg.classes_per_batch = v;
    }
    if let Some(v) = flags.samples_per_class {
        cfg.samples_per_class = v;
    }
    if let Some(name) = &flags.strategy {
        cfg.strategy = MiningStrategy::from_name(name)?;
    }
    if let Some(v) = flags.grad_norm {
        cfg.grad_norm = if v == 0.0 { None } else { Some(v) };
    }
    Ok(())
}

fn echo_config(eff: &EffectiveConfig) -> CliResult<()> {
    println!("effective config:\n{}", serde_json::to_string_pretty(eff)?);
    Ok(())
}

/// Like [`echo_config`] but on stderr, for commands whose stdout is a
/// machine-readable artifact (embeddings, query hits).
fn echo_config_stderr(eff: &EffectiveConfig) -> CliResult<()> {
    eprintln!("effective config:\n{}", serde_json::to_string_pretty(eff)?);
    Ok(())
}

// --- shared plumbing -----------------------------------------------------------

fn required_path(
    flag: Option<&PathBuf>,
    fallback: Option<&PathBuf>,
    what: &str,
    hint: &str,
) -> CliResult<PathBuf> {
    flag.or(fallback).cloned().ok_or_else(|| {
        CliError::usage(format!(
            "no {what} given; pass {hint} or set it in the config file"
        ))
    })
}

fn load_dataset_dir(dir: &Path) -> CliResult<SyntheticDataset> {
    if !dir.exists() {
        return Err(CliError::data(format!(
            "dataset directory {} does not exist",
            dir.display()
        )));
    }
    Ok(load_dataset(dir)?)
}

fn load_model(path: &Path) -> CliResult<MiniDrn> {
    if !path.exists() {
        return Err(CliError::data(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    Ok(MiniDrn::load_checkpoint(path)?)
}

fn split_records<'a>(dataset: &'a SyntheticDataset, split: &str) -> CliResult<&'a [ImageRecord]> {
    match split {
        "train" => Ok(&dataset.train),
        "gallery" => Ok(&dataset.gallery),
        "query" => Ok(&dataset.query),
        other => Err(CliError::usage(format!(
            "unknown split {other:?}; expected train, gallery, or query"
        ))),
    }
}

fn load_single_image(path: &Path) -> CliResult<ImageRecord> {
    if !path.exists() {
        return Err(CliError::data(format!(
            "image {} does not exist",
            path.display()
        )));
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "query".to_string());
    Ok(load_image(path, &id, 0)?)
}

// --- commands -------------------------------------------------------------------

fn cmd_gen_data(args: &GenDataArgs) -> CliResult<()> {
    let mut eff = resolve_config(&args.config)?;
    if let Some(v) = args.classes {
        eff.data.num_classes = v;
    }
    if let Some(v) = args.images_per_class {
        eff.data.images_per_class = v;
    }
    if let Some(v) = args.image_size {
        eff.data.image_size = v;
    }
    if let Some(v) = args.distractors {
        eff.data.distractors = v;
    }
    echo_config(&eff)?;
    let out = required_path(
        args.out.as_ref(),
        eff.paths.dataset.as_ref(),
        "output directory",
        "--out",
    )?;

    let dataset = match args.groups {
        Some(groups) => {
            // Groups-of-4 sets have no query/train split: every image queries
            // the whole pool, so all records live in the gallery.
            let records = generate_groups_of_4(&eff.data, groups, args.seed)?;
            SyntheticDataset {
                train: Vec::new(),
                gallery: records,
                query: Vec::new(),
            }
        }
        None => generate_synthetic(&eff.data, args.seed)?,
    };
    save_dataset(&out, &dataset)?;
    println!(
        "wrote dataset to {} (seed {}): train {}, gallery {}, query {}",
        out.display(),
        args.seed,
        dataset.train.len(),
        dataset.gallery.len(),
        dataset.query.len()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let mut eff = resolve_config(&args.config)?;
    apply_train_overrides(&mut eff.train, &args.overrides)?;
    echo_config(&eff)?;
    eff.train.validate()?;

    let data_dir = required_path(
        args.data.as_ref(),
        eff.paths.dataset.as_ref(),
        "dataset",
        "--data",
    )?;
    let dataset = load_dataset_dir(&data_dir)?;
    let mut model = MiniDrn::build(eff.model.clone(), eff.train.seed)?;
    println!(
        "training on {} images ({} parameters)",
        dataset.train.len(),
        model.param_count()
    );

    let stats = train(
        &mut model,
        &dataset.train,
        &eff.train,
        args.checkpoint_dir.as_deref(),
    )?;
    for s in &stats {
        println!(
            "epoch {:>3}: mean_loss {:.4}  active {:.3}  gem_p {:.3}  empty_batches {}",
            s.epoch, s.mean_loss, s.active_fraction, s.gem_p, s.empty_batches
        );
    }

    match args.out.as_ref().or(eff.paths.checkpoint.as_ref()) {
        Some(path) => {
            model.save_checkpoint(path)?;
            println!("checkpoint written to {}", path.display());
        }
        None => println!("no checkpoint path given; model was not saved"),
    }
    Ok(())
}

fn cmd_embed(args: &EmbedArgs) -> CliResult<()> {
    let eff = resolve_config(&args.config)?;
    echo_config_stderr(&eff)?;
    let ckpt = required_path(
        args.checkpoint.as_ref(),
        eff.paths.checkpoint.as_ref(),
        "checkpoint",
        "--checkpoint",
    )?;
    let model = load_model(&ckpt)?;

    let records: Vec<ImageRecord> = match (&args.image, &args.data) {
        (Some(image), _) => vec![load_single_image(image)?],
        (None, Some(dir)) => {
            let dataset = load_dataset_dir(dir)?;
            split_records(&dataset, &args.split)?.to_vec()
        }
        (None, None) => {
            let dir = eff.paths.dataset.clone().ok_or_else(|| {
                CliError::usage("nothing to embed; pass --image or --data".to_string())
            })?;
            let dataset = load_dataset_dir(&dir)?;
            split_records(&dataset, &args.split)?.to_vec()
        }
    };
    let embeddings = embed_records(&model, &records)?;
    let json = serde_json::to_string_pretty(&embeddings)?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, json.as_bytes()).map_err(minicbir::Error::Io)?;
            println!(
                "wrote {} embeddings to {}",
                embeddings.len(),
                path.display()
            );
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_index(args: &IndexArgs) -> CliResult<()> {
    let eff = resolve_config(&args.config)?;
    echo_config_stderr(&eff)?;
    let ckpt = required_path(
        args.checkpoint.as_ref(),
        eff.paths.checkpoint.as_ref(),
        "checkpoint",
        "--checkpoint",
    )?;
    let data_dir = required_path(
        args.data.as_ref(),
        eff.paths.dataset.as_ref(),
        "dataset",
        "--data",
    )?;
    let out = required_path(
        args.out.as_ref(),
        eff.paths.index.as_ref(),
        "index path",
        "--out",
    )?;

    let model = load_model(&ckpt)?;
    let dataset = load_dataset_dir(&data_dir)?;
    let records = split_records(&dataset, &args.split)?;
    let index = index_records(&model, records)?;
    index.save(&out)?;
    println!(
        "indexed {} images ({}-dim) into {}",
        index.len(),
        index.dim(),
        out.display()
    );
    Ok(())
}

fn cmd_query(args: &QueryArgs) -> CliResult<()> {
    let eff = resolve_config(&args.config)?;
    echo_config_stderr(&eff)?;
    let ckpt = required_path(
        args.checkpoint.as_ref(),
        eff.paths.checkpoint.as_ref(),
        "checkpoint",
        "--checkpoint",
    )?;
    let index_path = required_path(
        args.index.as_ref(),
        eff.paths.index.as_ref(),
        "index",
        "--index",
    )?;

    let model = load_model(&ckpt)?;
    if !index_path.exists() {
        return Err(CliError::data(format!(
            "index {} does not exist",
            index_path.display()
        )));
    }
    let index = EmbeddingIndex::load(&index_path)?;
    let record = load_single_image(&args.image)?;
    let embedding = model.embed(&record.pixels, &record.id)?;
    let result = query_topk(&index, &embedding.values, args.k)?;

    if args.json {
        println!("{}", serde_json::to_string_pretty(&result)?);
    } else {
        for (rank, (id, distance)) in result.hits.iter().enumerate() {
            println!("{:>3}  {id}  {distance:.6}", rank + 1);
        }
        if result.fewer_than_requested {
            println!("(index holds fewer than {} entries)", args.k);
        }
    }
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> CliResult<()> {
    let eff = resolve_config(&args.config)?;
    echo_config(&eff)?;
    let ckpt = required_path(
        args.checkpoint.as_ref(),
        eff.paths.checkpoint.as_ref(),
        "checkpoint",
        "--checkpoint",
    )?;
    let data_dir = required_path(
        args.data.as_ref(),
        eff.paths.dataset.as_ref(),
        "dataset",
        "--data",
    )?;
    let out = required_path(
        args.out.as_ref(),
        eff.paths.report.as_ref(),
        "report path",
        "--out",
    )?;

    let model = load_model(&ckpt)?;
    let dataset = load_dataset_dir(&data_dir)?;
    let echo = serde_json::to_value(&eff)?;

    // Datasets with a query split use the query-vs-gallery protocol; pure
    // gallery datasets (as written by `gen-data --groups`) use the
    // groups-of-4 protocol where every image queries the whole pool.
    let report = if !dataset.query.is_empty() {
        evaluate_retrieval(&model, &dataset.gallery, &dataset.query, echo)?
    } else if dataset.train.is_empty() && !dataset.gallery.is_empty() {
        evaluate_groups_of_4(&model, &dataset.gallery, echo)?
    } else {
        return Err(CliError::data(format!(
            "dataset {} has no query split and is not a groups-of-4 set",
            data_dir.display()
        )));
    };

    let text = report.to_text();
    print!("{text}");
    let txt_path = out.with_extension("txt");
    let json_path = out.with_extension("json");
    std::fs::write(&txt_path, text.as_bytes()).map_err(minicbir::Error::Io)?;
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )
    .map_err(minicbir::Error::Io)?;
    println!(
        "report written to {} and {}",
        txt_path.display(),
        json_path.display()
    );
    Ok(())
}

fn cmd_compare_miners(args: &CompareMinersArgs) -> CliResult<()> {
    let mut eff = resolve_config(&args.config)?;
    apply_train_overrides(&mut eff.train, &args.overrides)?;
    echo_config(&eff)?;
    eff.train.validate()?;

    let seeds: Vec<u64> = args
        .seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| CliError::usage(format!("invalid seed {s:?} in --seeds")))
        })
        .collect::<CliResult<_>>()?;
    if seeds.len() < 5 {
        return Err(CliError::usage(format!(
            "the strategy comparison needs at least 5 seeds, got {}",
            seeds.len()
        )));
    }

    let data_dir = required_path(
        args.data.as_ref(),
        eff.paths.dataset.as_ref(),
        "dataset",
        "--data",
    )?;
    let dataset = load_dataset_dir(&data_dir)?;
    let comparison = compare_miners(&dataset, &eff.model, &eff.train, &seeds)?;
    let text = comparison.to_text();
    print!("{text}");
    if let Some(path) = &args.out {
        std::fs::write(path, text.as_bytes()).map_err(minicbir::Error::Io)?;
        println!("table written to {}", path.display());
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<()> {
    let report = run_suite(args.seed)?;
    print!("{}", report.to_text());
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::verify(format!(
            "gradient check failed: worst relative error {:.3e}",
            report.max_rel_error()
        )))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // --help and --version are successes; anything else is usage.
            let code = if err.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };

    let result = match &cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Embed(args) => cmd_embed(args),
        Command::Index(args) => cmd_index(args),
        Command::Query(args) => cmd_query(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::CompareMiners(args) => cmd_compare_miners(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message);
            ExitCode::from(err.code)
        }
    }
}
