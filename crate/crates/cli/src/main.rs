use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use scenekg::exec::Execution;
use scenekg::ingest::{build_scene_graph, parse_detection_file, unknown_labels, IngestConfig};
use scenekg::kg::{default_kg_file, load_kg, mini_kg_file, KgFile};
use scenekg::merge::merge;
use scenekg::search::{run_search, Checkpoint, ModelDims, SearchConfig, SearchModel};
use scenekg::synth::{generate_dataset, write_dataset, DatasetConfig, NoiseConfig};
use scenekg::train::{
    evaluate, evaluate_baseline, load_manifest, prepare_all, TrainConfig, Trainer,
};
use scenekg::Error;

#[derive(Parser)]
#[command(
    name = "scenekg",
    version,
    about = "Scene classification by searching scene graphs merged with a knowledge graph"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the scene graph of a detection file and print it as JSON.
    Ingest(IngestArgs),
    /// Train a model on a dataset manifest and write a checkpoint.
    Train(TrainArgs),
    /// Classify one detection file.
    Infer(InferArgs),
    /// Report top-1 accuracy of a checkpoint or of the symbolic baseline.
    Eval(EvalArgs),
    /// Write a synthetic dataset and its manifest.
    Generate(GenerateArgs),
    /// Print the bundled knowledge graph.
    DefaultKg(DefaultKgArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    /// Importance scoring ignores the image embedding.
    ObjectLevel,
    /// Importance scoring is conditioned on the image embedding.
    ImageLevel,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    /// Constituent recall over the knowledge graph.
    Kg,
}

#[derive(Args)]
struct SearchFlags {
    /// Importance threshold for expansion.
    #[arg(long)]
    gamma: Option<f64>,
    /// Halting threshold [default: 0.75].
    #[arg(long)]
    lambda: Option<f64>,
    /// Iteration cap per round.
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
}

impl SearchFlags {
    fn apply(&self, base: SearchConfig) -> Result<SearchConfig> {
        let mut cfg = base;
        if let Some(g) = self.gamma {
            cfg.gamma = g;
        }
        if let Some(l) = self.lambda {
            cfg.lambda = l;
        }
        if let Some(t) = self.t_max {
            cfg.t_max = t;
        }
        if let Some(m) = self.mode {
            cfg.image_conditioning = matches!(m, Mode::ImageLevel);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct IngestArgs {
    detections: PathBuf,
    /// Knowledge graph used to flag unknown labels.
    #[arg(long)]
    kg: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    min_confidence: f64,
    /// Width of fallback label embeddings.
    #[arg(long, default_value_t = 32)]
    embedding_dim: usize,
}

#[derive(Args)]
struct TrainArgs {
    manifest: PathBuf,
    #[arg(long)]
    kg: PathBuf,
    /// Where to write the trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Write the metrics report here instead of stdout.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Weight of the importance loss.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    k_hops: usize,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long)]
    no_teacher_forcing: bool,
    #[arg(long, default_value_t = 0.0)]
    min_confidence: f64,
    /// Hidden state width.
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long)]
    sequential: bool,
    #[command(flatten)]
    search: SearchFlags,
}

#[derive(Args)]
struct InferArgs {
    detections: PathBuf,
    #[arg(long)]
    kg: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Include the per-round search trace.
    #[arg(long)]
    explain: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    min_confidence: f64,
    #[command(flatten)]
    search: SearchFlags,
}

#[derive(Args)]
struct EvalArgs {
    manifest: PathBuf,
    #[arg(long)]
    kg: PathBuf,
    #[arg(
        long,
        required_unless_present = "baseline",
        conflicts_with = "baseline"
    )]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    min_confidence: f64,
    /// Embedding width for the baseline's scene graphs.
    #[arg(long, default_value_t = 32)]
    embedding_dim: usize,
    #[arg(long)]
    sequential: bool,
    #[command(flatten)]
    search: SearchFlags,
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory; receives `manifest.jsonl` and `scenes/`.
    #[arg(long)]
    out: PathBuf,
    /// Knowledge graph to draw compounds from [default: bundled graph].
    #[arg(long)]
    kg: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 1)]
    distractors: usize,
    #[arg(long, default_value_t = 0.2)]
    background_fraction: f64,
}

#[derive(Args)]
struct DefaultKgArgs {
    /// The two-compound miniature instead of the full graph.
    #[arg(long)]
    mini: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(inner) if !inner.is_input_error() => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Generate(a) => generate(a),
        Command::DefaultKg(a) => {
            let file: KgFile = if a.mini {
                mini_kg_file()
            } else {
                default_kg_file()
            };
            emit(&file)
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    Ok(std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

fn read_kg(path: &Path) -> Result<scenekg::graph::KnowledgeGraph> {
    let bytes = read(path)?;
    load_kg(&bytes).with_context(|| format!("loading {}", path.display()))
}

fn emit(v: &impl serde::Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn ingest(a: IngestArgs) -> Result<()> {
    let bytes = read(&a.detections)?;
    let (ctx, records) = parse_detection_file(&bytes)
        .with_context(|| format!("reading {}", a.detections.display()))?;
    let cfg = IngestConfig {
        embedding_dim: a.embedding_dim,
        min_confidence: a.min_confidence,
        ..IngestConfig::default()
    };
    let sg = build_scene_graph(&ctx, &records, &cfg)?;
    let nodes: Vec<Value> = sg
        .nodes()
        .iter()
        .map(|n| json!({"id": n.id, "label": n.label, "bbox": n.bbox, "confidence": n.confidence}))
        .collect();
    let mut out = json!({"nodes": nodes, "edges": sg.edges()});
    if let Some(path) = &a.kg {
        let kg = read_kg(path)?;
        let unknown: Vec<&str> = unknown_labels(&records, &kg)
            .into_iter()
            .map(|i| records[i].label.as_str())
            .collect();
        out["unknown_labels"] = json!(unknown);
    }
    emit(&out)
}

fn load_checkpoint(path: &Path, kg: &scenekg::graph::KnowledgeGraph) -> Result<Checkpoint> {
    let bytes = read(path)?;
    Checkpoint::load_for(&bytes, kg).with_context(|| format!("loading {}", path.display()))
}

fn warn_unknown(records: &[scenekg::ingest::DetectionRecord], kg: &scenekg::graph::KnowledgeGraph) {
    for i in unknown_labels(records, kg) {
        eprintln!(
            "warning: detection {i} has label `{}` unknown to the knowledge graph",
            records[i].label
        );
    }
}

fn score_map(classes: &[String], scores: &[f64]) -> Value {
    let m: Map<String, Value> = classes
        .iter()
        .zip(scores)
        .map(|(c, &s)| {
            (
                c.clone(),
                if s.is_finite() { json!(s) } else { Value::Null },
            )
        })
        .collect();
    Value::Object(m)
}

fn infer(a: InferArgs) -> Result<()> {
    let kg = read_kg(&a.kg)?;
    let ck = load_checkpoint(&a.checkpoint, &kg)?;
    let search = a.search.apply(ck.config)?;
    let bytes = read(&a.detections)?;
    let (ctx, records) = parse_detection_file(&bytes)
        .with_context(|| format!("reading {}", a.detections.display()))?;
    warn_unknown(&records, &kg);
    let cfg = IngestConfig {
        embedding_dim: ck.dims.embedding,
        min_confidence: a.min_confidence,
        ..IngestConfig::default()
    };
    let m = merge(build_scene_graph(&ctx, &records, &cfg)?, kg);
    let out = run_search(&m, &ctx, &ck.model, &search, a.seed)?;
    let mut v = json!({
        "prediction": ck.classes[out.prediction],
        "scores": score_map(&ck.classes, &out.scores),
    });
    if a.explain {
        v["trace"] = out.trace.to_json(&m, &ck.classes);
    }
    emit(&v)
}

fn load_set(
    manifest: &Path,
    kg: &scenekg::graph::KnowledgeGraph,
    ingest: &IngestConfig,
    exec: Execution,
) -> Result<Vec<scenekg::train::Prepared>> {
    let examples =
        load_manifest(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    prepare_all(&examples, kg, ingest, exec)
        .with_context(|| format!("preparing {}", manifest.display()))
}

fn train(a: TrainArgs) -> Result<()> {
    let kg = read_kg(&a.kg)?;
    let exec = execution(a.sequential);
    let search = a.search.apply(SearchConfig::default())?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        seed: a.seed,
        alpha: a.alpha,
        teacher_forcing: !a.no_teacher_forcing,
        k_hops: a.k_hops,
        batch_size: a.batch_size,
    };
    let dims = ModelDims {
        hidden: a.hidden,
        ..ModelDims::for_kg(&kg)
    };
    let ingest = IngestConfig {
        embedding_dim: dims.embedding,
        min_confidence: a.min_confidence,
        ..IngestConfig::default()
    };
    let data = load_set(&a.manifest, &kg, &ingest, exec)?;
    let mut trainer = Trainer::new(SearchModel::new(dims, a.seed), cfg, search)?;
    let history = trainer.fit(&data, exec, |s| {
        eprintln!(
            "epoch {}/{}: loss {:.4} (classification {:.4}, importance {:.4}){}",
            s.epoch + 1,
            cfg.epochs,
            s.total,
            s.classification,
            s.importance,
            if s.teacher_forced {
                " [teacher forced]"
            } else {
                ""
            }
        );
    })?;
    let model = trainer.into_model();
    let metrics = evaluate(&data, &model, &search, exec, a.seed)?;
    let ck = Checkpoint::new(model, search, &kg);
    std::fs::write(&a.checkpoint, ck.to_json()).map_err(|e| Error::io(&a.checkpoint, e))?;
    let mut report = serde_json::to_value(&metrics)?;
    report["epochs"] = serde_json::to_value(&history)?;
    report["checkpoint"] = json!(a.checkpoint.display().to_string());
    match &a.metrics {
        Some(path) => {
            let text = serde_json::to_string_pretty(&report)?;
            std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
            Ok(())
        }
        None => emit(&report),
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let kg = read_kg(&a.kg)?;
    let exec = execution(a.sequential);
    let metrics = match (&a.checkpoint, a.baseline) {
        (Some(path), _) => {
            let ck = load_checkpoint(path, &kg)?;
            let search = a.search.apply(ck.config)?;
            let ingest = IngestConfig {
                embedding_dim: ck.dims.embedding,
                min_confidence: a.min_confidence,
                ..IngestConfig::default()
            };
            let data = load_set(&a.manifest, &kg, &ingest, exec)?;
            evaluate(&data, &ck.model, &search, exec, a.seed)?
        }
        (None, _) => {
            let ingest = IngestConfig {
                embedding_dim: a.embedding_dim,
                min_confidence: a.min_confidence,
                ..IngestConfig::default()
            };
            evaluate_baseline(&load_set(&a.manifest, &kg, &ingest, exec)?)?
        }
    };
    emit(&metrics)
}

fn generate(a: GenerateArgs) -> Result<()> {
    let kg = match &a.kg {
        Some(p) => read_kg(p)?,
        None => scenekg::kg::default_kg(),
    };
    let cfg = DatasetConfig {
        scenes: a.scenes,
        background_fraction: a.background_fraction,
        noise: NoiseConfig {
            sigma: a.sigma,
            distractors: a.distractors,
            ..NoiseConfig::default()
        },
    };
    let scenes = generate_dataset(&kg, &cfg, a.seed)?;
    let manifest = write_dataset(&a.out, &scenes)?;
    eprintln!("wrote {} scenes to {}", scenes.len(), manifest.display());
    Ok(())
}
