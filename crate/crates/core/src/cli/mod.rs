//! Command-line surface.
//!
//! Every command resolves its settings in three layers (built-in default,
//! then the JSON `--config` file, then explicit flags) and writes the
//! resolved settings to `config.json` in its output directory, so feeding
//! that file back through `--config` repeats the run.
//!
//! Exit codes: 0 on success, 1 for usage errors (bad flags, invalid or
//! unreadable configuration), 2 when the work itself fails.

pub mod overlay;
pub mod report;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use candle_core::DType;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::metrics::{self, EvalReport};
use crate::model::{JointModel, ModelConfig};
use crate::scenegen::dataset::{read_dataset, read_manifest, MANIFEST_NAME};
use crate::scenegen::{self, ImageTensor, SceneConfig, Vocabulary};
use crate::trainer::{self, checkpoint, FreezePlan, TrainConfig, TrainingSet};
use report::{RunReport, REPORT_CSV, REPORT_JSON, SWEEP_MD};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const CONFIG_ECHO: &str = "config.json";
pub const DATASET_INFO: &str = "dataset.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const MATCHES_FILE: &str = "matches.jsonl";
pub const OVERLAY_DIR: &str = "overlays";
pub const TRAIN_SPLIT: &str = "train";
pub const VAL_SPLIT: &str = "val";

/// IoU threshold of the `--dump-matches` debug output.
const MATCH_DUMP_IOU: f64 = 0.5;

#[derive(Debug, Parser)]
#[command(name = "capdet", version, about = "Joint captioning and detection on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic train/val dataset with manifests and vocabulary.
    GenData(GenDataArgs),
    /// Train the joint model on a dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Caption one image, optionally with detections and an overlay.
    Infer(InferArgs),
    /// Train and evaluate once per λ value.
    Sweep(SweepArgs),
    /// Collate evaluated run directories into one table.
    Report(ReportArgs),
    /// Convert a COCO-style annotation file into a dataset directory.
    Ingest(IngestArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub num_train: Option<usize>,
    #[arg(long)]
    pub num_val: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Small,
    Large,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory produced by `gen-data` or `ingest`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub freeze_plan: Option<FreezePlan>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write per-detection matches at IoU 0.5 as JSON Lines.
    #[arg(long)]
    pub dump_matches: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Binary PPM image whose sides are multiples of 32.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    pub detect: Toggle,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    /// Where `overlays/` goes; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub beam: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub runs_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Merged instances + captions JSON.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Settings of `gen-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub num_train: usize,
    pub num_val: usize,
    pub seed: u64,
    pub scene: SceneConfig,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            num_train: 8,
            num_val: 4,
            seed: 0,
            scene: SceneConfig::default(),
        }
    }
}

/// Settings of `train`. `model` is filled from the dataset when absent,
/// and always present in the echoed copy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub data: Option<PathBuf>,
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
}

/// Settings of `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub data: Option<PathBuf>,
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub lambdas: Vec<f64>,
    pub beam: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            data: None,
            model: None,
            train: TrainConfig::default(),
            lambdas: trainer::SWEEP_LAMBDAS.to_vec(),
            beam: 5,
        }
    }
}

/// Facts about a dataset directory that training needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    /// Common side length of every image, when there is one.
    pub image_size: Option<usize>,
    /// Category names in class-id order.
    pub class_names: Vec<String>,
    pub num_train: usize,
    pub num_val: usize,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome = std::result::Result<(), Failure>;

trait Phase<T> {
    fn usage(self) -> std::result::Result<T, Failure>;
    fn runtime(self) -> std::result::Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Phase<T> for std::result::Result<T, E> {
    fn usage(self) -> std::result::Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn runtime(self) -> std::result::Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(e)) => {
            eprintln!("usage error: {e:#}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

fn execute(command: Command) -> Outcome {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => collate(a),
        Command::Ingest(a) => ingest(a),
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn split_manifest(data: &Path, split: &str) -> PathBuf {
    data.join(split).join(MANIFEST_NAME)
}

fn read_dataset_info(data: &Path) -> anyhow::Result<DatasetInfo> {
    let path = data.join(DATASET_INFO);
    let text = fs::read_to_string(&path)
        .with_context(|| format!("{} is not a dataset directory (no {DATASET_INFO})", data.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn gen_data(a: GenDataArgs) -> Outcome {
    let mut cfg: GenDataConfig = load_config(a.config.as_deref()).usage()?;
    if let Some(n) = a.num_train {
        cfg.num_train = n;
    }
    if let Some(n) = a.num_val {
        cfg.num_val = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.image_size {
        cfg.scene.image_size = s;
    }
    cfg.scene.validate().usage()?;
    if cfg.num_train == 0 {
        return Err(Failure::Usage(anyhow::anyhow!("--num-train must be at least 1")));
    }

    create_dir(&a.out).runtime()?;
    let train = scenegen::generate_dataset(cfg.seed, cfg.num_train, &cfg.scene).runtime()?;
    // validation seeds continue where the training seeds stop
    let val = scenegen::generate_dataset(cfg.seed + cfg.num_train as u64, cfg.num_val, &cfg.scene).runtime()?;
    for (split, records) in [(TRAIN_SPLIT, &train), (VAL_SPLIT, &val)] {
        scenegen::dataset::write_dataset(records, &a.out.join(split)).runtime()?;
    }
    cfg.scene.vocabulary().write(&a.out.join(VOCAB_FILE)).runtime()?;
    let info = DatasetInfo {
        image_size: Some(cfg.scene.image_size),
        class_names: cfg.scene.shapes.iter().map(|s| s.word().to_string()).collect(),
        num_train: train.len(),
        num_val: val.len(),
    };
    write_json(&a.out.join(DATASET_INFO), &info).runtime()?;
    write_json(&a.out.join(CONFIG_ECHO), &cfg).runtime()?;
    println!("train: {} records", train.len());
    println!("val: {} records", val.len());
    Ok(())
}

/// Toy architecture sized to the dataset's images, classes and vocabulary.
fn model_for_dataset(info: &DatasetInfo, vocab: &Vocabulary) -> anyhow::Result<ModelConfig> {
    let Some(size) = info.image_size else {
        bail!("the dataset has no common image size; give a `model` section in --config");
    };
    let mut cfg = ModelConfig::toy(info.class_names.len(), vocab.len());
    cfg.image_size = size;
    cfg.class_names = info.class_names.clone();
    cfg.validate()?;
    Ok(cfg)
}

/// A fully resolved training setup.
struct TrainPlan {
    data: PathBuf,
    model: ModelConfig,
    train: TrainConfig,
    vocab: Vocabulary,
}

impl TrainPlan {
    fn echo(&self) -> TrainRunConfig {
        TrainRunConfig {
            data: Some(self.data.clone()),
            model: Some(self.model.clone()),
            train: self.train.clone(),
        }
    }
}

fn resolve_train_plan(data: Option<PathBuf>, model: Option<ModelConfig>, train: TrainConfig) -> anyhow::Result<TrainPlan> {
    let Some(data) = data else {
        bail!("no dataset: pass --data or set `data` in the config file");
    };
    train.validate()?;
    let vocab_path = data.join(VOCAB_FILE);
    let vocab = Vocabulary::read(&vocab_path)?;
    let model = match model {
        Some(m) => {
            m.validate()?;
            m
        }
        None => model_for_dataset(&read_dataset_info(&data)?, &vocab)?,
    };
    if model.decoder.vocab_size != vocab.len() {
        bail!(
            "model vocabulary size {} differs from the dataset's {}",
            model.decoder.vocab_size,
            vocab.len()
        );
    }
    Ok(TrainPlan { data, model, train, vocab })
}

fn apply_train_flags(train: &mut TrainConfig, a: &TrainArgs) {
    if let Some(p) = a.preset {
        train.lambda = match p {
            Preset::Small => TrainConfig::small().lambda,
            Preset::Large => TrainConfig::large().lambda,
        };
    }
    if let Some(v) = a.lambda {
        train.lambda = v;
    }
    if let Some(v) = a.freeze_plan {
        train.freeze_plan = v;
    }
    if let Some(v) = a.steps {
        train.steps = v;
    }
    if let Some(v) = a.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        train.learning_rate = v;
    }
    if let Some(v) = a.seed {
        train.seed = v;
    }
}

fn train(a: TrainArgs) -> Outcome {
    let mut cfg: TrainRunConfig = load_config(a.config.as_deref()).usage()?;
    apply_train_flags(&mut cfg.train, &a);
    let plan = resolve_train_plan(a.data.clone().or(cfg.data), cfg.model, cfg.train).usage()?;

    let records = read_dataset(&split_manifest(&plan.data, TRAIN_SPLIT)).runtime()?;
    let model = JointModel::new(&plan.model, plan.train.seed, DType::F32).runtime()?;
    let set = TrainingSet::new(&records, &plan.vocab, &model).runtime()?;
    create_dir(&a.out).runtime()?;
    write_json(&a.out.join(CONFIG_ECHO), &plan.echo()).runtime()?;

    let frozen: Vec<&str> = plan.train.freeze_plan.frozen().iter().map(|p| p.symbol()).collect();
    println!(
        "training {} steps on {} images, λ = {}, freeze plan {} (frozen: {})",
        plan.train.steps,
        records.len(),
        plan.train.effective_lambda(),
        plan.train.freeze_plan,
        if frozen.is_empty() { "none".to_string() } else { frozen.join(", ") }
    );
    let outcome = trainer::train(&model, &set, &plan.vocab, &plan.train, &a.out, a.resume.as_deref()).runtime()?;
    if let Some(last) = outcome.log.last() {
        println!("step {}: total loss {:.5}", last.step, last.loss.total);
    }
    println!("checkpoint: {}", outcome.checkpoint.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> anyhow::Result<(checkpoint::Checkpoint, JointModel, Vocabulary)> {
    let ck = checkpoint::load(path)?;
    let model = ck.build_model(DType::F32)?;
    let vocab = Vocabulary::new(&ck.header.vocab);
    Ok((ck, model, vocab))
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn eval(a: EvalArgs) -> Outcome {
    if a.beam == 0 {
        return Err(Failure::Usage(anyhow::anyhow!("--beam must be at least 1")));
    }
    let (ck, model, vocab) = load_checkpoint(&a.checkpoint).runtime()?;
    let records = read_dataset(&a.manifest).runtime()?;
    let out = a.out.clone().unwrap_or_else(|| parent_dir(&a.checkpoint));
    create_dir(&out).runtime()?;

    let cfg = model.config();
    let preds = metrics::predict(&model, &records, &vocab, a.beam).runtime()?;
    let scores = metrics::score(&preds, &records, cfg.num_classes, cfg.image_size).runtime()?;

    let csv_path = out.join(REPORT_CSV);
    let file = fs::File::create(&csv_path)
        .with_context(|| format!("creating {}", csv_path.display()))
        .runtime()?;
    EvalReport::write_csv(&[(None, scores)], None, file).runtime()?;
    let train = &ck.header.train;
    let run = RunReport {
        checkpoint: a.checkpoint.clone(),
        manifest: a.manifest.clone(),
        step: ck.header.step,
        freeze_plan: train.freeze_plan.to_string(),
        lambda: train.effective_lambda(),
        beam: a.beam,
        images: records.len(),
        metrics: scores,
        size_buckets: metrics::size_bucket_note(cfg.image_size),
    };
    write_json(&out.join(REPORT_JSON), &run).runtime()?;

    if a.dump_matches {
        let examples = metrics::detection_examples(&preds, &records);
        let matches = metrics::match_records(&examples, cfg.num_classes, MATCH_DUMP_IOU).runtime()?;
        let mut text = String::new();
        for m in &matches {
            let mut line = serde_json::to_value(m).runtime()?;
            line["id"] = serde_json::Value::from(records[m.image].id.clone());
            text.push_str(&line.to_string());
            text.push('\n');
        }
        let path = out.join(MATCHES_FILE);
        fs::write(&path, text)
            .with_context(|| format!("writing {}", path.display()))
            .runtime()?;
    }
    let header = report::markdown_table(
        &metrics::REPORT_COLUMNS,
        &[scores.values().iter().map(|v| format!("{v:.4}")).collect()],
    );
    print!("{header}");
    Ok(())
}

#[derive(Debug, Serialize)]
struct InferOutput {
    image: PathBuf,
    caption: String,
    logprob: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    detections: Option<Vec<InferDetection>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    overlay: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct InferDetection {
    #[serde(flatten)]
    detection: crate::detect::Detection,
    name: String,
}

fn infer(a: InferArgs) -> Outcome {
    if a.beam == 0 {
        return Err(Failure::Usage(anyhow::anyhow!("--beam must be at least 1")));
    }
    let image = ImageTensor::read_ppm(&a.image).runtime()?;
    if image.width % 32 != 0 || image.height % 32 != 0 {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "image {} is {}x{}; both sides must be multiples of 32 — resize it (e.g. to the model's training size) and retry",
            a.image.display(),
            image.width,
            image.height
        )));
    }
    let (_, model, vocab) = load_checkpoint(&a.checkpoint).runtime()?;

    let output = match a.detect {
        Toggle::Off => {
            let hyp = model.caption(&image, a.beam).runtime()?;
            debug_assert_eq!(model.detection_access_count(), 0, "captioning touched detection parameters");
            InferOutput {
                image: a.image.clone(),
                caption: vocab.detokenize(&hyp.tokens),
                logprob: hyp.logprob,
                detections: None,
                overlay: None,
            }
        }
        Toggle::On => {
            let (hyp, dets) = model.caption_and_detect(&image, a.beam).runtime()?;
            let caption = vocab.detokenize(&hyp.tokens);
            let cfg = model.config();
            let picture = overlay::render(&image, &dets, &caption, |c| cfg.class_name(c));
            let dir = a.out.clone().unwrap_or_else(|| parent_dir(&a.checkpoint)).join(OVERLAY_DIR);
            create_dir(&dir).runtime()?;
            let stem = a.image.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
            let path = dir.join(format!("{stem}.ppm"));
            picture.write_ppm(&path).runtime()?;
            InferOutput {
                image: a.image.clone(),
                caption,
                logprob: hyp.logprob,
                detections: Some(
                    dets.into_iter()
                        .map(|d| InferDetection {
                            name: cfg.class_name(d.class_id),
                            detection: d,
                        })
                        .collect(),
                ),
                overlay: Some(path),
            }
        }
    };
    println!("{}", serde_json::to_string_pretty(&output).runtime()?);
    Ok(())
}

fn sweep(a: SweepArgs) -> Outcome {
    let mut cfg: SweepConfig = load_config(a.config.as_deref()).usage()?;
    if let Some(l) = a.lambdas {
        cfg.lambdas = l;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(b) = a.beam {
        cfg.beam = b;
    }
    if cfg.lambdas.is_empty() || cfg.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Failure::Usage(anyhow::anyhow!("--lambdas needs non-negative finite values")));
    }
    if cfg.beam == 0 {
        return Err(Failure::Usage(anyhow::anyhow!("--beam must be at least 1")));
    }
    let plan = resolve_train_plan(a.data.clone().or(cfg.data.clone()), cfg.model.clone(), cfg.train.clone()).usage()?;
    let echo = SweepConfig {
        data: Some(plan.data.clone()),
        model: Some(plan.model.clone()),
        ..cfg.clone()
    };

    let train_records = read_dataset(&split_manifest(&plan.data, TRAIN_SPLIT)).runtime()?;
    let val_records = read_dataset(&split_manifest(&plan.data, VAL_SPLIT)).runtime()?;
    create_dir(&a.out).runtime()?;
    write_json(&a.out.join(CONFIG_ECHO), &echo).runtime()?;
    let rows = trainer::lambda_sweep(
        &plan.model,
        &plan.train,
        &cfg.lambdas,
        &train_records,
        &val_records,
        &plan.vocab,
        cfg.beam,
        &a.out,
    )
    .runtime()?;
    let md = report::sweep_markdown(&rows);
    let path = a.out.join(SWEEP_MD);
    fs::write(&path, &md)
        .with_context(|| format!("writing {}", path.display()))
        .runtime()?;
    print!("{md}");
    if rows.iter().all(|r| r.error.is_some()) {
        return Err(Failure::Runtime(anyhow::anyhow!("every λ value failed")));
    }
    Ok(())
}

fn collate(a: ReportArgs) -> Outcome {
    let runs = report::collect_runs(&a.runs_dir).runtime()?;
    let md = report::write_summary(&runs, &a.runs_dir).runtime()?;
    print!("{md}");
    Ok(())
}

fn ingest(a: IngestArgs) -> Outcome {
    let train_dir = a.out.join(TRAIN_SPLIT);
    create_dir(&train_dir).runtime()?;
    let manifest = train_dir.join(MANIFEST_NAME);
    let rep = scenegen::coco::ingest_coco(&a.annotations, &a.images, &manifest).runtime()?;
    let entries = read_manifest(&manifest).runtime()?;
    let words: std::collections::BTreeSet<String> = entries
        .iter()
        .flat_map(|e| e.captions.iter())
        .flat_map(|c| c.split_whitespace().map(str::to_string))
        .collect();
    Vocabulary::new(&words).write(&a.out.join(VOCAB_FILE)).runtime()?;
    let info = DatasetInfo {
        image_size: None,
        class_names: rep.class_names.clone(),
        num_train: rep.written,
        num_val: 0,
    };
    write_json(&a.out.join(DATASET_INFO), &info).runtime()?;
    println!(
        "{} images written to {}, {} skipped without captions, {} classes",
        rep.written,
        rep.manifest.display(),
        rep.skipped_without_captions,
        rep.class_names.len()
    );
    Ok(())
}
