//! The `mixhic` command line: argument parsing, dispatch, run records and
//! exit codes (0 success, 1 invalid input, 2 failed computation).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::evaluation::{
    centred_anchors, corruption_experiment, determined_case, evaluate_samples, identical_case, info_gap_demo,
    perturbation_experiment, proportion_metric, theorem_trials, CorruptionMode, MetricReport, RatioPoint,
};
use crate::genomic_io::{load_manifest, parse_loops, read_bedpe, LoopCall, Split};
use crate::loop_annotation::{annotate_to_bedpe, AnnotationParams};
use crate::model::{InputMode, MixHic, ModelConfig, Task, TaskOutput};
use crate::plot::{read_table, write_line_chart};
use crate::preprocessing::{
    read_archive, write_archive, ArchiveHeader, Dataset, SamplePair, SampleTarget, WindowSampling, ARCHIVE_VERSION,
};
use crate::synthetic::{generate_dataset, SplitLayout, SyntheticSpec, WindowCounts};
use crate::training::{
    finetune, model_from_checkpoint, pretrain, Checkpoint, TrainConfig, TrainOutcome, CHECKPOINT_VERSION,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug, Serialize)]
#[command(name = "mixhic", version, about = "Multimodal Hi-C and epigenomic-track learning on desk-scale data")]
pub struct Cli {
    /// Upper bound on worker threads used by tensor kernels.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// TOML document with [model], [train], [synthetic] and [annotation]
    /// tables; command-line flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run-record path (default: `run_record.json` in an output directory, or
    /// `<file>.run.json` beside a single output file).
    #[arg(long, global = true)]
    pub run_record: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
pub enum Command {
    /// Cut a manifest's files into sample archives, one per split.
    Preprocess(PreprocessArgs),
    /// Write a seeded synthetic dataset (text files, manifest, archives).
    GenerateSynthetic(GenerateArgs),
    /// Self-supervised pretraining on an archive of sample pairs.
    Pretrain(PretrainArgs),
    /// Task fine-tuning, optionally from a pretrained checkpoint.
    Finetune(FinetuneArgs),
    /// Per-sample predictions of a fine-tuned checkpoint.
    Predict(PredictArgs),
    /// Whole-chromosome loop calling to BEDPE.
    AnnotateLoops(AnnotateArgs),
    /// Task metrics of a checkpoint, or the proportion metric of a BEDPE.
    Evaluate(EvaluateArgs),
    /// Anchor attenuation or contact corruption sweeps over ratios.
    Perturb(PerturbArgs),
    /// Information-gap bound on random discrete joints.
    TheoremDemo(TheoremArgs),
    /// Line chart (SVG) of a tab-separated table.
    Plot(PlotArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Preprocess(_) => "preprocess",
            Command::GenerateSynthetic(_) => "generate-synthetic",
            Command::Pretrain(_) => "pretrain",
            Command::Finetune(_) => "finetune",
            Command::Predict(_) => "predict",
            Command::AnnotateLoops(_) => "annotate-loops",
            Command::Evaluate(_) => "evaluate",
            Command::Perturb(_) => "perturb",
            Command::TheoremDemo(_) => "theorem-demo",
            Command::Plot(_) => "plot",
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct SamplingArgs {
    /// Largest x/y origin offset of random windows, in bins.
    #[arg(long, default_value_t = 64)]
    pub max_offset: usize,
    /// Negatives closer than this (bins) to a positive are redrawn.
    #[arg(long, default_value_t = 2)]
    pub negative_exclusion: u64,
    /// Cap on far-negative anchor distances, in bins.
    #[arg(long)]
    pub far_distance_limit: Option<u64>,
}

impl SamplingArgs {
    fn sampling(&self) -> WindowSampling {
        WindowSampling {
            max_offset_bins: self.max_offset,
            negative_exclusion_radius: self.negative_exclusion,
            far_distance_limit: self.far_distance_limit,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// none (pretraining pairs), loop, cage or contact.
    #[arg(long, default_value = "none")]
    pub task: Task,
    /// Windows per split; loop archives hold every balanced positive/negative
    /// pair when omitted.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "train,validation,test")]
    pub splits: Vec<Split>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for `<split>.mxh`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "loop")]
    pub task: Task,
    #[arg(long, default_value_t = 200)]
    pub train_windows: usize,
    #[arg(long, default_value_t = 50)]
    pub validation_windows: usize,
    #[arg(long, default_value_t = 50)]
    pub test_windows: usize,
    /// Chromosomes per split as `train,validation,test`.
    #[arg(long, value_delimiter = ',', default_value = "3,1,1")]
    pub chromosomes: Vec<usize>,
    #[arg(long)]
    pub n_bins: Option<usize>,
    #[arg(long)]
    pub loops: Option<usize>,
    #[arg(long)]
    pub enrichment: Option<f64>,
    /// Peak-anchor coupling in [0, 1].
    #[arg(long)]
    pub coupling: Option<f64>,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 16-bin windows, C=16, one block: trains in seconds on one core.
    #[default]
    Desk,
    /// 50-bin windows, C=128, two blocks, with the published optimizer settings.
    Published,
}

/// Optimizer flags shared by both training commands.
#[derive(Args, Debug, Serialize)]
pub struct OptimArgs {
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Early-stopping patience in epochs.
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Global gradient-norm cap.
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long, conflicts_with = "grad_clip")]
    pub no_grad_clip: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct PretrainArgs {
    /// Archive of training pairs.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub validation: Option<PathBuf>,
    /// Output directory for checkpoints and loss logs.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub task: Task,
    /// bimodal, infer-missing-hic or track-only (default: bimodal, or
    /// infer-missing-hic for contact maps).
    #[arg(long)]
    pub input_mode: Option<InputMode>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub validation: Option<PathBuf>,
    /// Pretrained checkpoint; fresh encoders when absent.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Archive of samples to predict.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub input_mode: Option<InputMode>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// BEDPE output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Chromosomes to annotate (default: the manifest's test split, or every
    /// chromosome when it has none).
    #[arg(long, value_delimiter = ',')]
    pub chromosomes: Vec<String>,
    #[arg(long)]
    pub p_threshold: Option<f64>,
    #[arg(long)]
    pub score_threshold: Option<f64>,
    /// Neighbourhood radius of the density clustering, in bins.
    #[arg(long)]
    pub radius: Option<usize>,
    #[arg(long)]
    pub fdr: Option<f64>,
    /// Largest anchor distance scanned, in bins.
    #[arg(long)]
    pub max_distance: Option<usize>,
    #[arg(long)]
    pub input_mode: Option<InputMode>,
}

#[derive(Args, Debug, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Labelled archive scored by the checkpoint.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Split name written to the report.
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub input_mode: Option<InputMode>,
    /// BEDPE calls for the proportion metric.
    #[arg(long)]
    pub predicted: Option<PathBuf>,
    /// Loop file of validated loops for the proportion metric.
    #[arg(long)]
    pub validated: Option<PathBuf>,
    #[arg(long, default_value_t = 5000)]
    pub resolution: u64,
    #[arg(long, default_value_t = 1)]
    pub slack: u64,
    /// Metric report (TSV).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbKind {
    /// Attenuate track signal at loop anchors; reports recall of positives.
    Anchors,
    /// Zero a fraction of non-zero contacts; reports AUROC.
    Sparsify,
    /// Add noise to a fraction of non-zero contacts; reports AUROC.
    Gaussian,
}

#[derive(Args, Debug, Serialize)]
pub struct PerturbArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Archive of loop-labelled, loop-centred windows.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PerturbKind::Anchors)]
    pub kind: PerturbKind,
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,0.7,0.9")]
    pub ratios: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub input_mode: Option<InputMode>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct TheoremArgs {
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest alphabet size of z1, z2 and t.
    #[arg(long, default_value_t = 4)]
    pub max_alphabet: usize,
    /// Per-trial report (TSV).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct PlotArgs {
    /// Tab-separated table with a header line.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// SVG output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Abscissa column (default: the first).
    #[arg(long)]
    pub x: Option<String>,
    /// Series columns (default: every other numeric column).
    #[arg(long, value_delimiter = ',')]
    pub y: Vec<String>,
    #[arg(long, default_value = "")]
    pub title: String,
    #[arg(long, default_value = "")]
    pub y_label: String,
}

/// Optional overrides of a training configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOverrides {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub early_stop_patience: Option<usize>,
    pub optimizer_betas: Option<(f64, f64)>,
    pub weight_decay: Option<f64>,
    pub grad_clip: Option<f64>,
    pub max_steps: Option<usize>,
}

/// The `--config` document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigDocument {
    pub model: Option<ModelConfig>,
    pub train: TrainOverrides,
    pub synthetic: Option<SyntheticSpec>,
    pub annotation: Option<AnnotationParams>,
}

pub fn load_config(path: &Path) -> Result<ConfigDocument> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
}

/// One record per command invocation, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub argv: Vec<String>,
    /// SHA-256 of the resolved arguments and configuration.
    pub config_digest: String,
    pub seed: Option<u64>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub outputs: Vec<PathBuf>,
    /// SHA-256 of every output file.
    pub output_digests: BTreeMap<String, String>,
    pub versions: BTreeMap<String, String>,
}

impl RunRecord {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("mixhic".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("archive_format".to_string(), ARCHIVE_VERSION.to_string()),
        ("checkpoint_format".to_string(), CHECKPOINT_VERSION.to_string()),
    ])
}

/// What a finished command reports back to the dispatcher.
struct Completed {
    outputs: Vec<PathBuf>,
    seed: Option<u64>,
    /// Default run-record location.
    record_path: PathBuf,
    /// Resolved configuration folded into the digest.
    resolved: serde_json::Value,
}

fn require<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T> {
    value
        .as_ref()
        .ok_or_else(|| Error::validation(format!("missing required flag {flag}")))
}

/// `<file>.run.json` next to a single-file output.
fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(OsString::from).unwrap_or_default();
    name.push(".run.json");
    path.with_file_name(name)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        if !p.as_os_str().is_empty() {
            create_dir(p)?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).unwrap_or(serde_json::Value::Null)
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            eprint!("{}", e.render());
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_INVALID,
            };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .try_init();
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                EXIT_INVALID
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn execute(cli: &Cli, argv: Vec<String>) -> Result<()> {
    if let Some(n) = cli.threads {
        ensure!(n >= 1, "--threads must be at least 1");
        std::env::set_var("RAYON_NUM_THREADS", n.to_string());
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let doc = match &cli.config {
        Some(p) => load_config(p)?,
        None => ConfigDocument::default(),
    };
    let started = now_ms();
    let done = match &cli.command {
        Command::Preprocess(a) => preprocess(a),
        Command::GenerateSynthetic(a) => generate(a, &doc),
        Command::Pretrain(a) => pretrain_cmd(a, &doc),
        Command::Finetune(a) => finetune_cmd(a, &doc),
        Command::Predict(a) => predict_cmd(a),
        Command::AnnotateLoops(a) => annotate_cmd(a, &doc),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Perturb(a) => perturb_cmd(a),
        Command::TheoremDemo(a) => theorem_cmd(a),
        Command::Plot(a) => plot_cmd(a),
    }?;
    let digest_input = serde_json::json!({
        "command": cli.command.name(),
        "args": to_json(&cli.command),
        "config": to_json(&doc),
        "resolved": done.resolved,
    });
    let mut output_digests = BTreeMap::new();
    for p in &done.outputs {
        let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
        output_digests.insert(p.display().to_string(), sha256_hex(&bytes));
    }
    let record = RunRecord {
        command: cli.command.name().to_string(),
        argv,
        config_digest: sha256_hex(digest_input.to_string().as_bytes()),
        seed: done.seed,
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        outputs: done.outputs,
        output_digests,
        versions: versions(),
    };
    let path = cli
        .run_record
        .clone()
        .unwrap_or(done.record_path);
    let text = serde_json::to_string_pretty(&record).map_err(|e| Error::Config(e.to_string()))?;
    write_text(&path, &text)?;
    info!("run record written to {}", path.display());
    Ok(())
}

fn preprocess(a: &PreprocessArgs) -> Result<Completed> {
    let manifest = require(&a.manifest, "--manifest")?;
    let out = require(&a.out, "--out")?;
    ensure!(
        a.task == Task::Loop || a.count.is_some(),
        "--count is required for task {}",
        a.task
    );
    let dataset = Dataset::load(&load_manifest(manifest)?)?;
    create_dir(out)?;
    let mut outputs = Vec::new();
    for &split in &a.splits {
        if dataset.split_chromosomes(split).is_empty() {
            info!("split {split} has no chromosomes; skipped");
            continue;
        }
        let samples = dataset.samples(split, a.task, a.count, a.seed ^ split_salt(split), &a.sampling.sampling())?;
        let path = out.join(format!("{split}.mxh"));
        let n = write_archive(&path, &samples)?;
        info!("{split}: {n} windows -> {}", path.display());
        outputs.push(path);
    }
    Ok(Completed {
        outputs,
        seed: Some(a.seed),
        record_path: out.join("run_record.json"),
        resolved: serde_json::Value::Null,
    })
}

fn split_salt(split: Split) -> u64 {
    match split {
        Split::Train => 0x11,
        Split::Validation => 0x22,
        Split::Test => 0x33,
    }
}

fn generate(a: &GenerateArgs, doc: &ConfigDocument) -> Result<Completed> {
    let out = require(&a.out, "--out")?;
    ensure!(
        a.chromosomes.len() == 3,
        "--chromosomes takes three counts (train,validation,test)"
    );
    let mut spec = doc.synthetic.clone().unwrap_or_default();
    spec.seed = a.seed;
    if let Some(v) = a.n_bins {
        spec.n_bins = v;
    }
    if let Some(v) = a.loops {
        spec.loop_count = v;
    }
    if let Some(v) = a.enrichment {
        spec.enrichment = v;
    }
    if let Some(v) = a.coupling {
        spec.coupling = v;
    }
    let layout = SplitLayout {
        train: a.chromosomes[0],
        validation: a.chromosomes[1],
        test: a.chromosomes[2],
    };
    let counts = WindowCounts {
        train: a.train_windows,
        validation: a.validation_windows,
        test: a.test_windows,
    };
    let generated = generate_dataset(&spec, &layout, &counts, a.task, &a.sampling.sampling(), out)?;
    for (split, (path, n)) in &generated.archives {
        info!("{split}: {n} windows -> {}", path.display());
    }
    info!("manifest -> {}", generated.manifest.display());
    let mut outputs: Vec<PathBuf> = fs::read_dir(out)
        .map_err(|e| Error::io(out, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != "run_record.json"))
        .collect();
    outputs.sort();
    Ok(Completed {
        outputs,
        seed: Some(a.seed),
        record_path: out.join("run_record.json"),
        resolved: to_json(&spec),
    })
}

fn archive_header(samples: &[SamplePair], path: &Path) -> Result<ArchiveHeader> {
    samples
        .first()
        .map(ArchiveHeader::of)
        .ok_or_else(|| Error::validation(format!("archive {} holds no samples", path.display())))
}

fn model_config(preset: Preset, doc: &ConfigDocument, header: ArchiveHeader) -> Result<ModelConfig> {
    let config = match &doc.model {
        Some(m) => m.clone(),
        None => match preset {
            Preset::Desk => ModelConfig::desk(),
            Preset::Published => ModelConfig::default(),
        },
    };
    let enc = &config.encoder;
    ensure!(
        enc.window == header.height as usize
            && enc.track_length == header.track_length as usize
            && enc.track_channels == header.channels as usize,
        "model expects {}x{} windows with {}x{} tracks but the archive holds {}x{} and {}x{}; \
         choose a matching --preset or [model] table",
        enc.window,
        enc.window,
        enc.track_length,
        enc.track_channels,
        header.height,
        header.width,
        header.track_length,
        header.channels
    );
    Ok(config)
}

fn train_config(base: TrainConfig, doc: &TrainOverrides, o: &OptimArgs) -> TrainConfig {
    let mut c = base;
    let flags = TrainOverrides {
        learning_rate: o.learning_rate,
        batch_size: o.batch_size,
        max_epochs: o.epochs,
        early_stop_patience: o.patience,
        optimizer_betas: None,
        weight_decay: o.weight_decay,
        grad_clip: o.grad_clip,
        max_steps: o.max_steps,
    };
    for layer in [doc, &flags] {
        if let Some(v) = layer.learning_rate {
            c.learning_rate = v;
        }
        if let Some(v) = layer.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = layer.max_epochs {
            c.max_epochs = v;
        }
        if let Some(v) = layer.early_stop_patience {
            c.early_stop_patience = v;
        }
        if let Some(v) = layer.optimizer_betas {
            c.optimizer_betas = v;
        }
        if let Some(v) = layer.weight_decay {
            c.weight_decay = v;
        }
        if let Some(v) = layer.grad_clip {
            c.grad_clip = Some(v);
        }
        if let Some(v) = layer.max_steps {
            c.max_steps = Some(v);
        }
    }
    if o.no_grad_clip {
        c.grad_clip = None;
    }
    c
}

fn load_samples(path: Option<&PathBuf>) -> Result<Vec<SamplePair>> {
    match path {
        Some(p) => read_archive(p),
        None => Ok(Vec::new()),
    }
}

fn write_training_outputs(outcome: &TrainOutcome, out: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    let final_path = out.join("final.ckpt");
    let best_path = out.join("best.ckpt");
    let steps = out.join("steps.tsv");
    let epochs = out.join("epochs.tsv");
    outcome.trainer.checkpoint()?.save(&final_path)?;
    outcome.best.save(&best_path)?;
    write_text(&steps, &outcome.step_log())?;
    write_text(&epochs, &outcome.epoch_log())?;
    for e in &outcome.epochs {
        let val = e.val_loss.map_or("NA".to_string(), |v| format!("{v:.6}"));
        info!("epoch {} train {:.6} validation {val}", e.epoch, e.train_loss);
    }
    if outcome.stopped_early {
        info!("stopped early after epoch {}", outcome.trainer.epoch);
    }
    Ok(vec![final_path, best_path, steps, epochs])
}

fn pretrain_cmd(a: &PretrainArgs, doc: &ConfigDocument) -> Result<Completed> {
    let train_path = require(&a.train, "--train")?;
    let out = require(&a.out, "--out")?;
    let seed = *require(&a.seed, "--seed")?;
    let base = match a.optim.preset {
        Preset::Desk => TrainConfig::pretrain(seed),
        Preset::Published => TrainConfig::published_pretrain(seed),
    };
    let config = train_config(base, &doc.train, &a.optim);
    config.validate()?;
    let train = read_archive(train_path)?;
    let validation = load_samples(a.validation.as_ref())?;
    let model = model_config(a.optim.preset, doc, archive_header(&train, train_path)?)?;
    let outcome = pretrain(&train, &validation, &model, &config)?;
    Ok(Completed {
        outputs: write_training_outputs(&outcome, out)?,
        seed: Some(seed),
        record_path: out.join("run_record.json"),
        resolved: serde_json::json!({ "model": to_json(&model), "train": to_json(&config) }),
    })
}

fn finetune_cmd(a: &FinetuneArgs, doc: &ConfigDocument) -> Result<Completed> {
    let seed_for_check = a.seed.unwrap_or(0);
    let base = match a.optim.preset {
        Preset::Desk => TrainConfig::finetune(a.task, seed_for_check),
        Preset::Published => TrainConfig::published_finetune(a.task, seed_for_check),
    };
    let mut config = train_config(base, &doc.train, &a.optim);
    if let Some(m) = a.input_mode {
        config.input_mode = m;
    }
    config.validate()?;
    let train_path = require(&a.train, "--train")?;
    let out = require(&a.out, "--out")?;
    let seed = *require(&a.seed, "--seed")?;
    config.seed = seed;
    let train = read_archive(train_path)?;
    let validation = load_samples(a.validation.as_ref())?;
    let pretrained = a.pretrained.as_ref().map(Checkpoint::load).transpose()?;
    let model = match &pretrained {
        Some(p) if doc.model.is_none() => ModelConfig {
            heads: p.model_config.heads.clone(),
            ..p.model_config.clone()
        },
        _ => model_config(a.optim.preset, doc, archive_header(&train, train_path)?)?,
    };
    let outcome = finetune(&train, &validation, &model, pretrained.as_ref(), &config)?;
    Ok(Completed {
        outputs: write_training_outputs(&outcome, out)?,
        seed: Some(seed),
        record_path: out.join("run_record.json"),
        resolved: serde_json::json!({ "model": to_json(&model), "train": to_json(&config) }),
    })
}

fn default_mode(task: Task) -> InputMode {
    if task == Task::Contact {
        InputMode::InferMissingHic
    } else {
        InputMode::Bimodal
    }
}

fn load_task_model(path: &Path) -> Result<MixHic> {
    let model = model_from_checkpoint(&Checkpoint::load(path)?)?;
    ensure!(
        model.task != Task::None,
        "checkpoint {} is pretrained only; fine-tune it before predicting",
        path.display()
    );
    Ok(model)
}

fn predictions_tsv(samples: &[SamplePair], outputs: &[TaskOutput]) -> String {
    let mut s = String::new();
    let coords = |p: &SamplePair| {
        let (x, y) = (&p.contact.origin_x, &p.contact.origin_y);
        format!("{}\t{}\t{}\t{}\t{}", x.chromosome, x.start, x.end, y.start, y.end)
    };
    match outputs.first() {
        Some(TaskOutput::LoopProbability(_)) | None => s.push_str("chrom\tx_start\tx_end\ty_start\ty_end\tprobability\n"),
        Some(TaskOutput::Cage(v)) => {
            s.push_str("chrom\tx_start\tx_end\ty_start\ty_end");
            for k in 0..v.len() {
                let _ = write!(s, "\tv{k}");
            }
            s.push('\n');
        }
        Some(TaskOutput::Contact(_)) => {}
    }
    for (p, o) in samples.iter().zip(outputs) {
        match o {
            TaskOutput::LoopProbability(v) => {
                let _ = writeln!(s, "{}\t{v:.6}", coords(p));
            }
            TaskOutput::Cage(v) => {
                let vals: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
                let _ = writeln!(s, "{}\t{}", coords(p), vals.join("\t"));
            }
            TaskOutput::Contact(m) => {
                let _ = writeln!(s, "# {}", coords(p));
                for row in m.chunks(p.contact.size) {
                    let vals: Vec<String> = row.iter().map(|x| format!("{x:.6}")).collect();
                    let _ = writeln!(s, "{}", vals.join("\t"));
                }
            }
        }
    }
    s
}

fn predict_cmd(a: &PredictArgs) -> Result<Completed> {
    let ckpt = require(&a.checkpoint, "--checkpoint")?;
    let input = require(&a.input, "--input")?;
    let out = require(&a.out, "--out")?;
    let model = load_task_model(ckpt)?;
    let mode = a.input_mode.unwrap_or(default_mode(model.task));
    let samples = read_archive(input)?;
    let refs: Vec<&SamplePair> = samples.iter().collect();
    let outputs = model.predict(&refs, mode, a.batch_size)?;
    write_text(out, &predictions_tsv(&samples, &outputs))?;
    info!("{} predictions -> {}", outputs.len(), out.display());
    Ok(Completed {
        outputs: vec![out.clone()],
        seed: None,
        record_path: sidecar(out),
        resolved: serde_json::json!({ "input_mode": mode.to_string() }),
    })
}

fn annotate_cmd(a: &AnnotateArgs, doc: &ConfigDocument) -> Result<Completed> {
    let manifest = require(&a.manifest, "--manifest")?;
    let ckpt = require(&a.checkpoint, "--checkpoint")?;
    let out = require(&a.out, "--out")?;
    let mut params = doc.annotation.unwrap_or_default();
    if let Some(v) = a.p_threshold {
        params.p_threshold = v;
    }
    if let Some(v) = a.score_threshold {
        params.score_threshold = v;
    }
    if let Some(v) = a.radius {
        params.neighborhood_radius_bins = v;
    }
    if let Some(v) = a.fdr {
        params.fdr_target = v;
    }
    if let Some(v) = a.max_distance {
        params.max_distance_bins = v;
    }
    if let Some(v) = a.input_mode {
        params.input_mode = v;
    }
    params.validate()?;
    let dataset = Dataset::load(&load_manifest(manifest)?)?;
    let chromosomes: Vec<String> = if !a.chromosomes.is_empty() {
        a.chromosomes.clone()
    } else if !dataset.split_chromosomes(Split::Test).is_empty() {
        dataset.split_chromosomes(Split::Test).iter().map(|c| c.to_string()).collect()
    } else {
        dataset.chromosomes.keys().cloned().collect()
    };
    for c in &chromosomes {
        dataset.chromosome(c)?;
    }
    let model = load_task_model(ckpt)?;
    ensure!(model.task == Task::Loop, "loop calling needs a loop checkpoint, got {}", model.task);
    if let Some(p) = out.parent() {
        if !p.as_os_str().is_empty() {
            create_dir(p)?;
        }
    }
    let annotations = annotate_to_bedpe(&dataset, &model, &chromosomes, &params, out)?;
    for an in &annotations {
        info!(
            "{}: {} calls from {} candidates and {} decoys",
            an.chromosome,
            an.calls.len(),
            an.candidates.len(),
            an.decoys
        );
    }
    Ok(Completed {
        outputs: vec![out.clone()],
        seed: None,
        record_path: sidecar(out),
        resolved: serde_json::json!({ "annotation": to_json(&params), "chromosomes": chromosomes }),
    })
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<Completed> {
    let out = require(&a.out, "--out")?;
    let mut reports: Vec<MetricReport> = Vec::new();
    ensure!(
        a.checkpoint.is_some() || a.predicted.is_some(),
        "evaluate needs --checkpoint with --input, or --predicted with --validated"
    );
    if let Some(ckpt) = &a.checkpoint {
        let input = require(&a.input, "--input")?;
        let model = load_task_model(ckpt)?;
        let mode = a.input_mode.unwrap_or(default_mode(model.task));
        let samples = read_archive(input)?;
        reports.extend(evaluate_samples(&model, &samples, mode, a.split, 64)?);
    }
    if let Some(pred) = &a.predicted {
        let validated = require(&a.validated, "--validated")?;
        let calls: Vec<LoopCall> = read_bedpe(pred)?
            .into_iter()
            .map(|r| LoopCall {
                anchor1: r.anchor1,
                anchor2: r.anchor2,
                probability: r.score,
                density: r.density,
                members: 1,
            })
            .collect();
        let truth = parse_loops(validated)?;
        let value = proportion_metric(&calls, &truth, a.resolution, a.slack)?;
        reports.push(MetricReport {
            metric: "proportion".into(),
            value,
            count: calls.len(),
            task: Task::Loop,
            split: a.split,
        });
    }
    let mut text = format!("{}\n", MetricReport::TSV_HEADER);
    for r in &reports {
        text.push_str(&r.tsv_line());
        text.push('\n');
        info!("{} = {:.6} (n = {})", r.metric, r.value, r.count);
    }
    write_text(out, &text)?;
    Ok(Completed {
        outputs: vec![out.clone()],
        seed: None,
        record_path: sidecar(out),
        resolved: serde_json::Value::Null,
    })
}

fn ratio_tsv(metric: &str, points: &[RatioPoint]) -> String {
    let mut s = format!("ratio\t{metric}\tn\n");
    for p in points {
        let _ = writeln!(s, "{}\t{:.6}\t{}", p.ratio, p.value, p.count);
    }
    s
}

fn perturb_cmd(a: &PerturbArgs) -> Result<Completed> {
    let ckpt = require(&a.checkpoint, "--checkpoint")?;
    let input = require(&a.input, "--input")?;
    let out = require(&a.out, "--out")?;
    ensure!(!a.ratios.is_empty(), "--ratios is empty");
    for r in &a.ratios {
        ensure!((0.0..=1.0).contains(r), "ratio {r} is outside [0, 1]");
    }
    let model = load_task_model(ckpt)?;
    ensure!(model.task == Task::Loop, "perturbation sweeps need a loop checkpoint, got {}", model.task);
    let mode = a.input_mode.unwrap_or(InputMode::Bimodal);
    let samples = read_archive(input)?;
    let text = match a.kind {
        PerturbKind::Anchors => {
            let positives: Vec<SamplePair> = samples
                .into_iter()
                .filter(|s| matches!(s.target, SampleTarget::LoopLabel(1)))
                .collect();
            let anchors = positives.iter().map(centred_anchors).collect::<Result<Vec<_>>>()?;
            let points = perturbation_experiment(&model, &positives, &anchors, &a.ratios, mode, a.threshold)?;
            ratio_tsv("recall", &points)
        }
        PerturbKind::Sparsify | PerturbKind::Gaussian => {
            let corruption = if a.kind == PerturbKind::Sparsify {
                CorruptionMode::Sparsify
            } else {
                CorruptionMode::Gaussian
            };
            let points = corruption_experiment(&model, &samples, &a.ratios, corruption, mode, a.seed)?;
            ratio_tsv("auroc", &points)
        }
    };
    write_text(out, &text)?;
    Ok(Completed {
        outputs: vec![out.clone()],
        seed: Some(a.seed),
        record_path: sidecar(out),
        resolved: serde_json::json!({ "input_mode": mode.to_string() }),
    })
}

fn theorem_cmd(a: &TheoremArgs) -> Result<Completed> {
    let out = require(&a.out, "--out")?;
    let trials = theorem_trials(a.trials, a.seed, a.max_alphabet)?;
    let mut s = String::from(
        "trial\tz1\tz2\tt\tmi_z1\tmi_z2\tmi_joint\tgamma\traw_ce\taligned_ce\tgap\tbound_holds\tchain_rule_error\tdata_processing_holds\n",
    );
    for t in &trials {
        let r = &t.report;
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{:.12}\t{:.12}\t{:.12}\t{:.12}\t{:.12}\t{:.12}\t{:.12}\t{}\t{:.3e}\t{}",
            t.trial,
            t.alphabets.0,
            t.alphabets.1,
            t.alphabets.2,
            r.mi_z1,
            r.mi_z2,
            r.mi_joint,
            r.gamma,
            r.raw_ce,
            r.aligned_ce,
            r.aligned_ce - r.raw_ce,
            r.bound_holds,
            t.chain_rule_error,
            t.data_processing_holds
        );
    }
    write_text(out, &s)?;
    let held = trials.iter().filter(|t| t.report.bound_holds).count();
    info!("bound holds in {held} of {} trials", trials.len());
    for (name, joint) in [("determined", determined_case()), ("identical", identical_case())] {
        let r = info_gap_demo(&joint);
        info!(
            "{name} case: gamma {:.6}, aligned - raw {:.6}, bound holds {}",
            r.gamma,
            r.aligned_ce - r.raw_ce,
            r.bound_holds
        );
    }
    if held < trials.len() {
        return Err(Error::Numeric {
            stage: format!("information-gap bound: violated in {} of {} trials", trials.len() - held, trials.len()),
        });
    }
    Ok(Completed {
        outputs: vec![out.clone()],
        seed: Some(a.seed),
        record_path: sidecar(out),
        resolved: serde_json::Value::Null,
    })
}

fn plot_cmd(a: &PlotArgs) -> Result<Completed> {
    let input = require(&a.input, "--input")?;
    let out = require(&a.out, "--out")?;
    let table = read_table(input, a.x.as_deref(), &a.y)?;
    if let Some(p) = out.parent() {
        if !p.as_os_str().is_empty() {
            create_dir(p)?;
        }
    }
    write_line_chart(&table, &a.title, &a.y_label, out)?;
    Ok(Completed {
        outputs: vec![out.clone()],
        seed: None,
        record_path: sidecar(out),
        resolved: serde_json::Value::Null,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_names_match_subcommands() {
        use clap::CommandFactory;
        let cmd = Cli::command();
        let names: Vec<&str> = cmd.get_subcommands().map(|c| c.get_name()).collect();
        assert_eq!(
            names,
            [
                "preprocess",
                "generate-synthetic",
                "pretrain",
                "finetune",
                "predict",
                "annotate-loops",
                "evaluate",
                "perturb",
                "theorem-demo",
                "plot"
            ]
        );
        cmd.debug_assert();
    }

    #[test]
    fn overrides_apply_in_order() {
        let doc = TrainOverrides {
            learning_rate: Some(0.5),
            batch_size: Some(7),
            ..TrainOverrides::default()
        };
        let flags = OptimArgs {
            preset: Preset::Desk,
            learning_rate: Some(0.25),
            batch_size: None,
            epochs: None,
            max_steps: None,
            patience: None,
            weight_decay: None,
            grad_clip: None,
            no_grad_clip: true,
        };
        let c = train_config(TrainConfig::pretrain(1), &doc, &flags);
        assert_eq!((c.learning_rate, c.batch_size, c.grad_clip), (0.25, 7, None));
    }

    #[test]
    fn config_document_rejects_unknown_tables() {
        assert!(toml::from_str::<ConfigDocument>("[trian]\nlearning_rate = 1.0\n").is_err());
        let doc: ConfigDocument = toml::from_str("[train]\nlearning_rate = 0.1\n[synthetic]\nn_bins = 300\n").unwrap();
        assert_eq!(doc.train.learning_rate, Some(0.1));
        assert_eq!(doc.synthetic.unwrap().n_bins, 300);
    }
}
