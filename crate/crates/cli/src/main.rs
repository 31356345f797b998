//! `ssankit`: command-line entry points binding the pipeline together.
//!
//! Exit codes: 0 success, 1 data/runtime error, 2 usage/config error. Every
//! command is deterministic under a fixed seed and writes a `RunManifest`
//! alongside its primary output for provenance.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use ssankit_core::checkpoint::Checkpoint;
use ssankit_core::data::synthetic::SyntheticSpec;
use ssankit_core::data::{
    build_vocabulary, load_dataset, save_manifest, DatasetRecord, ImageSource, Vocabulary,
};
use ssankit_core::eval::{build_gallery, evaluate_checkpoint, retrieve, wam_inspect};
use ssankit_core::{Error, Result, RunConfig};

#[derive(Parser)]
#[command(name = "ssankit", version, about = "Cross-modal text-to-image person retrieval toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic dataset: PNGs plus a manifest.
    GenSynth(GenSynthArgs),
    /// Build a vocabulary from a manifest's training captions.
    BuildVocab(BuildVocabArgs),
    /// Train a model and write per-epoch checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest's test split.
    Eval(EvalArgs),
    /// Rank a gallery for one free-text query.
    Retrieve(RetrieveArgs),
    /// Dump a caption's word-part attention scores as a K x n matrix.
    WamInspect(WamInspectArgs),
}

#[derive(clap::Args)]
struct GenSynthArgs {
    /// Number of training identities.
    #[arg(long, default_value_t = 8)]
    identities: usize,
    /// Images rendered per identity.
    #[arg(long, default_value_t = 4)]
    images: usize,
    /// Captions generated per image.
    #[arg(long, default_value_t = 2)]
    captions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for images/ and manifest.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct BuildVocabArgs {
    /// Dataset manifest (JSON Lines).
    #[arg(long)]
    manifest: PathBuf,
    /// Output vocabulary file.
    #[arg(long)]
    out: PathBuf,
    /// Minimum occurrence count for a word to enter the vocabulary.
    #[arg(long, default_value_t = 1)]
    min_count: usize,
    /// Word embedding dimension recorded in the vocabulary.
    #[arg(long, default_value_t = 32)]
    dim: usize,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Dataset manifest (JSON Lines).
    #[arg(long)]
    manifest: PathBuf,
    /// Full run configuration (JSON). Defaults to the tiny recipe.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Vocabulary file; built from the training split when omitted.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    out: PathBuf,
    /// Training seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Use the strict margin ratio (error on out-of-range lambda).
    #[arg(long)]
    strict_lambda: bool,
    /// Continue from the latest checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Dataset manifest (JSON Lines); the test split is evaluated.
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Metrics JSON output path.
    #[arg(long, default_value = "eval-report.json")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct RetrieveArgs {
    /// Dataset manifest; the test split's images form the gallery.
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Free-text query caption.
    #[arg(long)]
    query: String,
    /// Number of gallery images to return.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Ranked-list JSON output path.
    #[arg(long, default_value = "retrieval.json")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct WamInspectArgs {
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Caption to score.
    #[arg(long)]
    caption: String,
    /// Score-matrix JSON output path.
    #[arg(long, default_value = "wam-scores.json")]
    out: PathBuf,
}

/// Provenance record written alongside every command's primary output.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
    seed: Option<u64>,
    artifact_hashes: BTreeMap<String, String>,
}

impl RunManifest {
    fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed,
            artifact_hashes: BTreeMap::new(),
        }
    }

    fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    /// Record an output file and its content hash.
    fn output(&mut self, path: &Path) -> Result<()> {
        let name = path.display().to_string();
        self.artifact_hashes.insert(name.clone(), file_hash(path)?);
        self.outputs.push(name);
        Ok(())
    }

    /// Write next to the primary output: `run-manifest.json` inside an output
    /// directory, or `<stem>.run.json` beside an output file.
    fn write(&self, primary: &Path) -> Result<()> {
        let path = if primary.is_dir() {
            primary.join("run-manifest.json")
        } else {
            let stem = primary.file_stem().unwrap_or_default().to_string_lossy();
            primary.with_file_name(format!("{stem}.run.json"))
        };
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

/// Hash of a directory tree's file names and contents, order-independent.
fn tree_hash(dir: &Path) -> Result<String> {
    let mut entries = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap_or(&path).display().to_string();
                entries.push((rel, file_hash(&path)?));
            }
        }
    }
    entries.sort();
    let mut hasher = Sha256::new();
    for (name, hash) in entries {
        hasher.update(name.as_bytes());
        hasher.update(hash.as_bytes());
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Resolve the run configuration: JSON file if given, tiny recipe otherwise;
/// command-line flags win over the file.
fn resolve_config(
    path: Option<&Path>,
    seed: Option<u64>,
    strict_lambda: bool,
    num_classes: usize,
) -> Result<RunConfig> {
    let mut config = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| Error::config(format!("invalid config {}: {e}", p.display())))?
        }
        None => RunConfig::tiny(seed.unwrap_or(0), num_classes),
    };
    if let Some(s) = seed {
        config.train.seed = s;
    }
    if strict_lambda {
        config.loss.strict_lambda = true;
    }
    config.validate()?;
    Ok(config)
}

fn cmd_gen_synth(args: GenSynthArgs) -> Result<()> {
    let mut spec = SyntheticSpec::new(args.identities, args.images, args.seed);
    spec.captions_per_image = args.captions;
    let (train, test) = ssankit_core::data::generate_synthetic(&spec)?;

    let image_dir = args.out.join("images");
    std::fs::create_dir_all(&image_dir)?;
    let mut records = Vec::new();
    for (i, rec) in train.into_iter().chain(test).enumerate() {
        let ImageSource::Synthetic(render) = &rec.image else {
            return Err(Error::data("generator produced a non-synthetic record"));
        };
        let name = format!("images/{:04}_{i:04}.png", rec.identity_id);
        render.render().save(args.out.join(&name))?;
        records.push(DatasetRecord {
            image: ImageSource::Path(name),
            ..rec
        });
    }
    let manifest_path = args.out.join("manifest.jsonl");
    save_manifest(&records, &manifest_path)?;

    let mut run = RunManifest::new("gen-synth", serde_json::to_value(&spec)?, Some(args.seed));
    run.output(&manifest_path)?;
    run.artifact_hashes.insert("images/".into(), tree_hash(&image_dir)?);
    run.outputs.push(image_dir.display().to_string());
    run.write(&args.out)?;
    println!("wrote {} records to {}", records.len(), manifest_path.display());
    Ok(())
}

fn cmd_build_vocab(args: BuildVocabArgs) -> Result<()> {
    let (train, _, _) = load_dataset(&args.manifest)?;
    let vocab = build_vocabulary(&train, args.min_count, args.dim)?;
    vocab.save(&args.out)?;

    let mut run = RunManifest::new(
        "build-vocab",
        serde_json::json!({ "min_count": args.min_count, "dim": args.dim }),
        None,
    );
    run.input(&args.manifest);
    run.output(&args.out)?;
    run.write(&args.out)?;
    println!("vocabulary: {} words -> {}", vocab.num_words(), args.out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (train_recs, _, _) = load_dataset(&args.manifest)?;
    let num_classes = ssankit_core::data::identity_set(&train_recs).len();
    let config = resolve_config(
        args.config.as_deref(),
        args.seed,
        args.strict_lambda,
        num_classes,
    )?;
    let vocab = match &args.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => build_vocabulary(&train_recs, 1, config.model.embed_dim)?,
    };
    let outcome = ssankit_core::train(&config, &train_recs, &vocab, &args.out, args.resume)?;

    let mut run = RunManifest::new("train", serde_json::to_value(&config)?, Some(config.train.seed));
    run.input(&args.manifest);
    if let Some(p) = &args.vocab {
        run.input(p);
    }
    run.outputs.push(outcome.checkpoint_dir.display().to_string());
    run.artifact_hashes.insert(
        "checkpoint".into(),
        Checkpoint::params_hash(&outcome.checkpoint_dir)?,
    );
    run.write(&args.out)?;
    let last = outcome.history.last().expect("at least one epoch");
    println!(
        "trained {} epochs (final mean loss {:.4}) -> {}",
        last.epoch,
        last.mean_loss,
        outcome.checkpoint_dir.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (_, _, test) = load_dataset(&args.manifest)?;
    if test.is_empty() {
        return Err(Error::data("manifest has no test split to evaluate"));
    }
    let report = evaluate_checkpoint(&args.checkpoint, &test)?;
    write_json(&report, &args.out)?;

    let mut run = RunManifest::new("eval", serde_json::Value::Null, None);
    run.input(&args.manifest);
    run.input(&args.checkpoint);
    run.output(&args.out)?;
    run.write(&args.out)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_retrieve(args: RetrieveArgs) -> Result<()> {
    let (_, _, test) = load_dataset(&args.manifest)?;
    if test.is_empty() {
        return Err(Error::data("manifest has no test split to use as a gallery"));
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let hash = Checkpoint::params_hash(&args.checkpoint)?;
    let gallery = build_gallery(&ckpt.model, &test, Some(&hash))?;
    let result = retrieve(&ckpt.model, &ckpt.vocab, &gallery, &args.query, args.k)?;

    // Report image references, not bare gallery indices.
    let ranked: Vec<serde_json::Value> = result
        .ranking
        .iter()
        .map(|&(idx, identity, score)| {
            let image = match &test[idx].image {
                ImageSource::Path(p) => p.clone(),
                ImageSource::Synthetic(_) => format!("synthetic record {idx}"),
            };
            serde_json::json!({ "image": image, "identity": identity, "score": score })
        })
        .collect();
    let output = serde_json::json!({ "query": result.caption, "ranking": ranked });
    write_json(&output, &args.out)?;

    let mut run = RunManifest::new("retrieve", serde_json::json!({ "k": args.k }), None);
    run.input(&args.manifest);
    run.input(&args.checkpoint);
    run.output(&args.out)?;
    run.write(&args.out)?;
    println!("{}", serde_json::to_string_pretty(&output)?);
    Ok(())
}

fn cmd_wam_inspect(args: WamInspectArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let report = wam_inspect(&ckpt.model, &ckpt.vocab, &args.caption)?;
    write_json(&report, &args.out)?;

    let mut run = RunManifest::new("wam-inspect", serde_json::Value::Null, None);
    run.input(&args.checkpoint);
    run.output(&args.out)?;
    run.write(&args.out)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth(args) => cmd_gen_synth(args),
        Command::BuildVocab(args) => cmd_build_vocab(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Retrieve(args) => cmd_retrieve(args),
        Command::WamInspect(args) => cmd_wam_inspect(args),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        let code = match e {
            Error::Config(_) => 2,
            _ => 1,
        };
        std::process::exit(code);
    }
}
