//! Command-line entry point: dataset synthesis, training, plan execution,
//! evaluation, ablations, and mask reports. Flag names and artifact layouts
//! are documented in `docs/cli.md`.

use clap::{Args, Parser, Subcommand};
use fs2::FileExt;
use modgan::composer::{parse_plan, Composer, CompositionPlan, PlanSource, PlanStep};
use modgan::evaluator::{
    classification_error, export_mask_report, run_ablation, train_classifier, AblationModels,
    AttrClassifier, ClassifierConfig, ComposerTranslator, EvalTable,
};
use modgan::schema_data::{
    synthesize_colormnist, AttributeSchema, DatasetManifest, MnistSource,
};
use modgan::trainer::{Dataset, TrainConfig, Trainer};
use modgan::ModGanError;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "modgan", version, about = "Composable GAN modules for multi-domain image translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the colorized-digit dataset (hermetic; no downloads).
    SynthData(SynthArgs),
    /// Train the module set on a dataset directory.
    Train(TrainArgs),
    /// Run a composition plan starting from an image.
    Translate(PlanArgs),
    /// Run a composition plan starting from a latent draw.
    Generate(GenerateArgs),
    /// Train an attribute classifier and score translated images.
    Evaluate(EvaluateArgs),
    /// Compare full / no-mask / no-cyclic / random-order variants.
    Ablate(AblateArgs),
    /// Render per-step and aggregated transformer masks for plans.
    VisualizeMasks(MaskArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of images to synthesize (train + test).
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// Square image size in pixels (>= 16).
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional IDX image file with real digit glyphs.
    #[arg(long, requires = "mnist_labels")]
    mnist_images: Option<PathBuf>,
    /// Optional IDX label file matching --mnist-images.
    #[arg(long, requires = "mnist_images")]
    mnist_labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (contains manifest.csv and images/).
    #[arg(long)]
    data: PathBuf,
    /// TOML config file; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key config override, e.g. --override epochs_flat=2. Repeatable.
    /// Precedence: command line > file > defaults.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides the config's seed when given.
    #[arg(long)]
    seed: Option<u64>,
    /// Attribute schema: "colormnist", "celeba", or a schema TOML path.
    #[arg(long, default_value = "colormnist")]
    schema: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Plan text, e.g. "img:a.png -> color=red -> out".
    #[arg(long)]
    plan: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Content class for the latent draw.
    #[arg(long)]
    digit: usize,
    /// Transformer step, e.g. --set color=red. Repeatable, applied in order.
    #[arg(long = "set", value_name = "ATTR=VALUE")]
    steps: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Real labeled images for classifier training.
    #[arg(long)]
    train_data: PathBuf,
    /// Held-out real images; also the translation source pool.
    #[arg(long)]
    test_data: PathBuf,
    /// Attribute combinations, e.g. "color;color,style". Defaults to every
    /// single model attribute plus the full chain.
    #[arg(long)]
    combinations: Option<String>,
    /// Reuse a saved classifier directory instead of training one.
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// Minimum held-out accuracy required of every judged classifier head.
    #[arg(long, default_value_t = 0.95)]
    gate: f64,
    #[arg(long, default_value_t = 8)]
    clf_width: usize,
    #[arg(long, default_value_t = 25)]
    clf_epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    clf_lr: f64,
    /// Shuffle the transformer application order independently per image.
    #[arg(long, default_value_t = false)]
    random_order: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Checkpoint of the full model.
    #[arg(long)]
    full: PathBuf,
    /// Checkpoint trained with masks disabled.
    #[arg(long)]
    no_mask: PathBuf,
    /// Checkpoint trained with cyclic losses disabled.
    #[arg(long)]
    no_cyclic: PathBuf,
    /// Saved classifier directory (train one with `evaluate` first).
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long)]
    test_data: PathBuf,
    #[arg(long)]
    combinations: Option<String>,
    #[arg(long, default_value_t = 0.95)]
    gate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Plan text. Repeatable; one report image per plan.
    #[arg(long = "plan", value_name = "PLAN")]
    plans: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    // clap exits with status 2 on unknown flags/subcommands
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // one line, machine-parseable
            eprintln!("error: {}", e.to_string().replace('\n', "; "));
            ExitCode::FAILURE
        }
    }
}

/// Provenance record written into every output directory.
#[derive(Serialize)]
struct RunRecord {
    command: String,
    argv: Vec<String>,
    seed: u64,
    config_hash: Option<String>,
    version: String,
}

/// Create the output directory, take an advisory lock for the lifetime of
/// the process, and write `run.json`.
fn open_out_dir(
    out: &Path,
    command: &str,
    seed: u64,
    config_hash: Option<String>,
) -> modgan::Result<std::fs::File> {
    std::fs::create_dir_all(out).map_err(|e| ModGanError::io(out, e))?;
    let lock_path = out.join(".lock");
    let lock = std::fs::File::create(&lock_path).map_err(|e| ModGanError::io(&lock_path, e))?;
    lock.try_lock_exclusive().map_err(|_| {
        ModGanError::Argument(format!(
            "output directory {} is locked by another invocation",
            out.display()
        ))
    })?;
    let record = RunRecord {
        command: command.to_string(),
        argv: std::env::args().collect(),
        seed,
        config_hash,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let path = out.join("run.json");
    let text = serde_json::to_string_pretty(&record).expect("serializes");
    std::fs::write(&path, text).map_err(|e| ModGanError::io(&path, e))?;
    Ok(lock)
}

fn load_schema(name: &str) -> modgan::Result<AttributeSchema> {
    match name {
        "colormnist" => Ok(AttributeSchema::colormnist()),
        "celeba" => Ok(AttributeSchema::celeba()),
        path => AttributeSchema::load(Path::new(path)),
    }
}

fn parse_combinations(
    spec: Option<&str>,
    config: &TrainConfig,
    schema: &AttributeSchema,
) -> modgan::Result<Vec<Vec<String>>> {
    let combos: Vec<Vec<String>> = match spec {
        Some(text) => text
            .split(';')
            .filter(|s| !s.trim().is_empty())
            .map(|combo| combo.split(',').map(|a| a.trim().to_string()).collect())
            .collect(),
        // default: each model attribute alone, then the full chain
        None => {
            let mut combos: Vec<Vec<String>> =
                config.attributes.iter().map(|a| vec![a.clone()]).collect();
            if config.attributes.len() > 1 {
                combos.push(config.attributes.clone());
            }
            combos
        }
    };
    if combos.is_empty() {
        return Err(ModGanError::Argument("no attribute combinations given".into()));
    }
    for combo in &combos {
        for attr in combo {
            schema.index_of(attr)?;
        }
    }
    Ok(combos)
}

fn write_tables(out: &Path, name: &str, table: &EvalTable) -> modgan::Result<()> {
    let csv_path = out.join(format!("{name}.csv"));
    std::fs::write(&csv_path, table.to_csv()).map_err(|e| ModGanError::io(&csv_path, e))?;
    let txt_path = out.join(format!("{name}.txt"));
    std::fs::write(&txt_path, table.to_text()).map_err(|e| ModGanError::io(&txt_path, e))
}

fn write_composition(
    out: &Path,
    composer: &Composer,
    plan: &CompositionPlan,
    seed: u64,
) -> modgan::Result<()> {
    let result = composer.execute(plan, seed)?;
    let img_path = out.join("output.png");
    modgan::composer::image_to_rgb8(&result.image)
        .save(&img_path)
        .map_err(|e| ModGanError::io(&img_path, std::io::Error::other(e.to_string())))?;
    let size = composer.config().image_size;
    for (i, mask) in result.masks.iter().enumerate() {
        if let Some(m) = mask {
            let up = modgan::composer::aggregate_masks(std::slice::from_ref(m), size)?;
            let path = out.join(format!("mask_{i:03}.png"));
            modgan::composer::mask_to_gray(&up)
                .save(&path)
                .map_err(|e| ModGanError::io(&path, std::io::Error::other(e.to_string())))?;
        }
    }
    #[derive(Serialize)]
    struct PlanRecord<'a> {
        steps: Vec<String>,
        feature_norms: &'a [f64],
    }
    let record = PlanRecord {
        steps: plan.steps.iter().map(|s| format!("{}={}", s.attr, s.value)).collect(),
        feature_norms: &result.feature_norms,
    };
    let path = out.join("result.json");
    std::fs::write(&path, serde_json::to_string_pretty(&record).expect("serializes"))
        .map_err(|e| ModGanError::io(&path, e))
}

fn run(cli: Cli) -> modgan::Result<()> {
    match cli.command {
        Command::SynthData(a) => {
            let _lock = open_out_dir(&a.out, "synth-data", a.seed, None)?;
            let source = match (a.mnist_images, a.mnist_labels) {
                (Some(images), Some(labels)) => MnistSource::Idx { images, labels },
                _ => MnistSource::Builtin,
            };
            let (train, test) = synthesize_colormnist(&source, a.count, a.size, a.seed, &a.out)?;
            println!("train: {} images at {}", train.len(), train.root.display());
            println!("test: {} images at {}", test.len(), test.root.display());
            Ok(())
        }
        Command::Train(a) => {
            let mut config: TrainConfig =
                modgan::config::load_with_overrides(a.config.as_deref(), &a.overrides)?;
            if let Some(seed) = a.seed {
                config.seed = seed;
            }
            let schema = load_schema(&a.schema)?;
            config.validate(&schema)?;
            let _lock = open_out_dir(&a.out, "train", config.seed, Some(config.hash()))?;
            let manifest = DatasetManifest::load(&a.data, &schema)?;
            let dataset = Dataset::load(&manifest, &schema, config.image_size)?;
            let mut trainer = Trainer::new(config, schema)?;
            trainer.train(&dataset, &a.out)?;
            println!("checkpoints: {}", a.out.join("checkpoints").display());
            println!("metrics: {}", a.out.join("metrics.csv").display());
            Ok(())
        }
        Command::Translate(a) => {
            let _lock = open_out_dir(&a.out, "translate", a.seed, None)?;
            let composer = Composer::from_checkpoint(&a.checkpoint)?;
            let plan = parse_plan(&a.plan, composer.schema())?;
            if matches!(plan.source, PlanSource::Generate { .. }) {
                return Err(ModGanError::Argument(
                    "translate expects an img: source; use generate for gen: plans".into(),
                ));
            }
            write_composition(&a.out, &composer, &plan, a.seed)?;
            println!("output: {}", a.out.join("output.png").display());
            Ok(())
        }
        Command::Generate(a) => {
            let _lock = open_out_dir(&a.out, "generate", a.seed, None)?;
            let composer = Composer::from_checkpoint(&a.checkpoint)?;
            let schema = composer.schema();
            let mut steps = Vec::new();
            for spec in &a.steps {
                let (attr, value) = spec.split_once('=').ok_or_else(|| {
                    ModGanError::Argument(format!("--set expects attr=value, got {spec:?}"))
                })?;
                schema.value_index(attr, value)?;
                steps.push(PlanStep { attr: attr.to_string(), value: value.to_string() });
            }
            let plan = CompositionPlan { source: PlanSource::Generate { digit: a.digit }, steps };
            write_composition(&a.out, &composer, &plan, a.seed)?;
            println!("output: {}", a.out.join("output.png").display());
            Ok(())
        }
        Command::Evaluate(a) => {
            let _lock = open_out_dir(&a.out, "evaluate", a.seed, None)?;
            let composer = Composer::from_checkpoint(&a.checkpoint)?;
            let schema = composer.schema().clone();
            let combos = parse_combinations(a.combinations.as_deref(), composer.config(), &schema)?;
            let test_manifest = DatasetManifest::load(&a.test_data, &schema)?;
            let test = Dataset::load(&test_manifest, &schema, composer.config().image_size)?;
            let classifier = match &a.classifier {
                Some(dir) => AttrClassifier::load(dir)?,
                None => {
                    let train_manifest = DatasetManifest::load(&a.train_data, &schema)?;
                    let train =
                        Dataset::load(&train_manifest, &schema, composer.config().image_size)?;
                    let cfg = ClassifierConfig {
                        width: a.clf_width,
                        epochs: a.clf_epochs,
                        lr: a.clf_lr,
                        seed: a.seed,
                        ..ClassifierConfig::default()
                    };
                    let clf = train_classifier(&train, &test, &schema, &cfg)?;
                    clf.save(&a.out.join("classifier"))?;
                    clf
                }
            };
            for (name, acc) in schema.names().iter().zip(&classifier.holdout_accuracy) {
                println!("classifier {name}: held-out accuracy {acc:.4}");
            }
            let translator =
                ComposerTranslator { composer: &composer, shuffle_order: a.random_order };
            let table =
                classification_error(&classifier, &translator, &test, &schema, &combos, a.seed, a.gate)?;
            write_tables(&a.out, "errors", &table)?;
            print!("{}", table.to_text());
            Ok(())
        }
        Command::Ablate(a) => {
            let _lock = open_out_dir(&a.out, "ablate", a.seed, None)?;
            let full = Composer::from_checkpoint(&a.full)?;
            let no_mask = Composer::from_checkpoint(&a.no_mask)?;
            let no_cyclic = Composer::from_checkpoint(&a.no_cyclic)?;
            let schema = full.schema().clone();
            let combos = parse_combinations(a.combinations.as_deref(), full.config(), &schema)?;
            let classifier = AttrClassifier::load(&a.classifier)?;
            let test_manifest = DatasetManifest::load(&a.test_data, &schema)?;
            let test = Dataset::load(&test_manifest, &schema, full.config().image_size)?;
            let models =
                AblationModels { full: &full, no_mask: &no_mask, no_cyclic: &no_cyclic };
            let tables =
                run_ablation(&models, &classifier, &test, &schema, &combos, a.seed, a.gate)?;
            for (name, table) in &tables {
                write_tables(&a.out, name, table)?;
                println!("{name}:");
                print!("{}", table.to_text());
            }
            Ok(())
        }
        Command::VisualizeMasks(a) => {
            let _lock = open_out_dir(&a.out, "visualize-masks", a.seed, None)?;
            if a.plans.is_empty() {
                return Err(ModGanError::Argument("at least one --plan is required".into()));
            }
            let composer = Composer::from_checkpoint(&a.checkpoint)?;
            let plans: Vec<CompositionPlan> = a
                .plans
                .iter()
                .map(|p| parse_plan(p, composer.schema()))
                .collect::<modgan::Result<_>>()?;
            let written = export_mask_report(&composer, &plans, &a.out, a.seed)?;
            for path in written {
                println!("report: {}", path.display());
            }
            Ok(())
        }
    }
}
