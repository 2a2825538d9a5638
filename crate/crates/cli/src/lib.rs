//! The `crosspath` command line. Every artifact-producing subcommand writes
//! a `manifest.json` beside its outputs; `replay` re-runs a manifest and
//! checks that the artifacts come out byte-identical.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage, 3 missing input,
//! 4 schema mismatch.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crosspath_core::explain::{self, Attribution, ExplainConfig};
use crosspath_core::extractor::{self, CriteriaConfig};
use crosspath_core::harness::{self, Dataset, ExperimentConfig};
use crosspath_core::model::{evaluate, ModelArtifact, ModelConfig, ModelKind};
use crosspath_core::schema::{read_jsonl_file, write_jsonl, CrossingInstance, SceneLog, CONTEXT_LEN, TIMESTEP_S};
use crosspath_core::seed::SeedPlan;
use crosspath_core::synthgen::{self, GeneratorConfig};
use crosspath_core::windowing::{
    count_table, make_splits, window_corpus, DataType, NormalizedSample, SequenceSample, Variant, WindowMode,
    WindowingSpec, DEFAULT_FOLDS,
};
use crosspath_core::CoreError;
use crosspath_numkit::NumError;

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING_INPUT: i32 = 3;
pub const EXIT_SCHEMA: i32 = 4;
pub const MANIFEST: &str = "manifest.json";

#[derive(Parser, Debug, Clone)]
#[command(name = "crosspath", version, about = "Context-aware pedestrian crossing trajectory experiments")]
pub struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "CROSSPATH_JOBS", default_value_t = 0)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Generate a synthetic crossing corpus.
    Generate(GenerateArgs),
    /// Window a corpus into model samples and count them.
    Window(WindowArgs),
    /// Train one network on the train/validation pool.
    Train(TrainArgs),
    /// Grid search with cross-validation, then score the winners on test.
    Gridsearch(GridArgs),
    /// Score a trained model on part of a corpus.
    Evaluate(EvaluateArgs),
    /// Paired aux/vanilla grid search and test comparison.
    Compare(GridArgs),
    /// Mine mid-block crossing candidates from scene logs.
    Extract(ExtractArgs),
    /// Shapley attribution of contextual variables to prediction error.
    Explain(ExplainArgs),
    /// Sample-count table and predicted-vs-true trajectory exports.
    Report(ReportArgs),
    /// Re-run a manifest and verify its artifacts.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Generator configuration (TOML or JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub participants: Option<usize>,
    #[arg(long)]
    pub scenarios: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Time,
    Distance,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct WindowArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Time)]
    pub mode: Mode,
    /// Input seconds (time mode).
    #[arg(long, default_value_t = 1.0)]
    pub t1: f64,
    /// Output seconds (time mode).
    #[arg(long, default_value_t = 1.0)]
    pub t2: f64,
    /// Lane widths walked before the split (distance mode).
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long, default_value = "xyod")]
    pub variant: Variant,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Model settings for `train`; file values are overridden by flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub data_type: DataType,
    pub variant: Variant,
    pub kind: ModelKind,
    pub stride_steps: usize,
    pub lstm_layers: usize,
    pub dense_layers: usize,
    pub nodes: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub secondary_loss_weight: f64,
    pub learning_rate: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let base = ModelConfig::aux(4, CONTEXT_LEN, 1);
        Self {
            data_type: DataType::T12,
            variant: Variant::Xyod,
            kind: ModelKind::Aux,
            stride_steps: 1,
            lstm_layers: base.lstm_layers,
            dense_layers: base.dense_layers,
            nodes: base.nodes,
            dropout: base.dropout,
            batch_size: base.batch_size,
            epochs: base.epochs,
            secondary_loss_weight: base.secondary_loss_weight,
            learning_rate: base.learning_rate,
        }
    }
}

impl TrainSettings {
    fn model_config(&self, output_steps: usize) -> ModelConfig {
        let f = self.variant.n_features();
        let mut c = match self.kind {
            ModelKind::Aux => ModelConfig::aux(f, CONTEXT_LEN, output_steps),
            ModelKind::Vanilla => ModelConfig::vanilla(f, output_steps),
        };
        c.lstm_layers = self.lstm_layers;
        c.nodes = self.nodes;
        c.dropout = self.dropout;
        c.batch_size = self.batch_size;
        c.epochs = self.epochs;
        c.learning_rate = self.learning_rate;
        if self.kind == ModelKind::Aux {
            c.dense_layers = self.dense_layers;
            c.secondary_loss_weight = self.secondary_loss_weight;
        }
        c
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Model settings file (TOML or JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data_type: Option<DataType>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub kind: Option<ModelKind>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub lstm_layers: Option<usize>,
    #[arg(long)]
    pub dense_layers: Option<usize>,
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindChoice {
    Aux,
    Vanilla,
    Both,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GridArgs {
    /// Experiment file (TOML or JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from the small CI slice instead of the full grid.
    #[arg(long)]
    pub ci: bool,
    /// Crossing JSONL; the benchmark corpus when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Model kinds to search (gridsearch only; compare always runs both).
    #[arg(long, value_enum, default_value_t = KindChoice::Both)]
    pub kind: KindChoice,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    All,
    Pool,
    Test,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Which part of the seeded instance split to score.
    #[arg(long, value_enum, default_value_t = Part::Test)]
    pub part: Part,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ExtractArgs {
    #[arg(long)]
    pub scenes: PathBuf,
    /// Criteria configuration (TOML or JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub funnel: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Part::All)]
    pub data_part: Part,
    #[arg(long)]
    pub background: PathBuf,
    #[arg(long, value_enum, default_value_t = Part::All)]
    pub background_part: Part,
    #[arg(long, default_value_t = explain::DEFAULT_BACKGROUND)]
    pub background_size: usize,
    /// Attribute each encoded context dimension instead of the six variables.
    #[arg(long)]
    pub encoded: bool,
    /// Explain at most this many samples.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ReportArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "xyod")]
    pub variant: Variant,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Aux model for trajectory exports (needs --vanilla too).
    #[arg(long, requires = "vanilla")]
    pub aux: Option<PathBuf>,
    #[arg(long, requires = "aux")]
    pub vanilla: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Part::Test)]
    pub part: Part,
    /// Number of trajectory files to export.
    #[arg(long, default_value_t = 20)]
    pub samples: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write the re-run here instead of over the original outputs.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Reproducibility record written beside every run's outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub argv: Vec<String>,
    /// The invocation with input paths made absolute; `replay` runs this.
    pub command: Command,
    pub config: serde_json::Value,
    pub seeds: Option<SeedPlan>,
    pub inputs: BTreeMap<String, String>,
    /// Output file (relative to the manifest) to SHA-256.
    pub artifacts: BTreeMap<String, String>,
    pub wall_clock_s: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| {
            CoreError::Schema {
                field: "manifest".into(),
                message: e.to_string(),
            }
            .into()
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_input(path: &Path) -> anyhow::Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        CoreError::Io {
            path: path.display().to_string(),
            source: e,
        }
        .into()
    })
}

/// Output directory that records a checksum for everything written.
struct Outputs {
    dir: PathBuf,
    artifacts: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
}

impl Outputs {
    fn new(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            artifacts: BTreeMap::new(),
            inputs: BTreeMap::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        let bytes = read_input(path)?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }
}

/// What a subcommand hands back for its manifest.
struct RunRecord {
    config: serde_json::Value,
    seeds: Option<SeedPlan>,
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

/// Load a TOML or JSON file by extension.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = String::from_utf8(read_input(path)?).context("config is not UTF-8")?;
    let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let parsed = if json {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|m| {
        CoreError::Config(format!("{}: {m}", path.display())).into()
    })
}

fn absolute(p: &mut PathBuf) {
    if let Ok(a) = std::path::absolute(&*p) {
        *p = a;
    }
}

fn absolute_opt(p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        absolute(p);
    }
}

fn with_dir(dir: &Path, file: &Path) -> PathBuf {
    dir.join(file.file_name().unwrap_or(file.as_os_str()))
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Window(_) => "window",
            Command::Train(_) => "train",
            Command::Gridsearch(_) => "gridsearch",
            Command::Evaluate(_) => "evaluate",
            Command::Compare(_) => "compare",
            Command::Extract(_) => "extract",
            Command::Explain(_) => "explain",
            Command::Report(_) => "report",
            Command::Replay(_) => "replay",
        }
    }

    /// Make every path absolute so a manifest replays from any directory.
    fn absolutize(&mut self) {
        match self {
            Command::Generate(a) => {
                absolute_opt(&mut a.config);
                absolute(&mut a.out);
            }
            Command::Window(a) => {
                absolute(&mut a.data);
                absolute(&mut a.out);
            }
            Command::Train(a) => {
                absolute(&mut a.data);
                absolute_opt(&mut a.config);
                absolute(&mut a.out);
            }
            Command::Gridsearch(a) | Command::Compare(a) => {
                absolute_opt(&mut a.config);
                absolute_opt(&mut a.data);
                absolute(&mut a.out);
            }
            Command::Evaluate(a) => {
                absolute(&mut a.model);
                absolute(&mut a.data);
                absolute(&mut a.out);
            }
            Command::Extract(a) => {
                absolute(&mut a.scenes);
                absolute_opt(&mut a.config);
                absolute(&mut a.out);
                absolute(&mut a.funnel);
            }
            Command::Explain(a) => {
                absolute(&mut a.model);
                absolute(&mut a.data);
                absolute(&mut a.background);
                absolute(&mut a.out);
            }
            Command::Report(a) => {
                absolute(&mut a.data);
                absolute_opt(&mut a.aux);
                absolute_opt(&mut a.vanilla);
                absolute(&mut a.out);
            }
            Command::Replay(a) => {
                absolute(&mut a.manifest);
                absolute_opt(&mut a.out);
            }
        }
    }

    /// Directory holding this command's outputs and manifest.
    pub fn output_dir(&self) -> PathBuf {
        let parent = |p: &Path| p.parent().map(Path::to_path_buf).unwrap_or_default();
        match self {
            Command::Generate(a) => a.out.clone(),
            Command::Window(a) => a.out.clone(),
            Command::Train(a) => a.out.clone(),
            Command::Gridsearch(a) | Command::Compare(a) => a.out.clone(),
            Command::Evaluate(a) => a.out.clone(),
            Command::Extract(a) => parent(&a.out),
            Command::Explain(a) => parent(&a.out),
            Command::Report(a) => a.out.clone(),
            Command::Replay(a) => a.out.clone().unwrap_or_else(|| parent(&a.manifest)),
        }
    }

    /// Point every output at `dir`, keeping file names.
    fn redirect(&mut self, dir: &Path) {
        match self {
            Command::Generate(a) => a.out = dir.to_path_buf(),
            Command::Window(a) => a.out = dir.to_path_buf(),
            Command::Train(a) => a.out = dir.to_path_buf(),
            Command::Gridsearch(a) | Command::Compare(a) => a.out = dir.to_path_buf(),
            Command::Evaluate(a) => a.out = dir.to_path_buf(),
            Command::Extract(a) => {
                a.out = with_dir(dir, &a.out);
                a.funnel = with_dir(dir, &a.funnel);
            }
            Command::Explain(a) => a.out = with_dir(dir, &a.out),
            Command::Report(a) => a.out = dir.to_path_buf(),
            Command::Replay(_) => {}
        }
    }
}

/// Map an error chain to the documented exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            match e {
                CoreError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                    return EXIT_MISSING_INPUT
                }
                CoreError::Schema { .. } | CoreError::SchemaVersion { .. } | CoreError::Parse { .. } => {
                    return EXIT_SCHEMA
                }
                CoreError::Num(NumError::Container(_)) => return EXIT_SCHEMA,
                _ => {}
            }
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            if e.kind() == std::io::ErrorKind::NotFound {
                return EXIT_MISSING_INPUT;
            }
        }
    }
    EXIT_OTHER
}

/// Parse `argv` and run. Usage errors print clap's message and return 2.
pub fn main_with(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match run(cli, argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli, argv: Vec<String>) -> anyhow::Result<()> {
    let mut command = cli.command;
    command.absolutize();
    if let Command::Replay(r) = &command {
        return replay(r, cli.jobs);
    }
    execute(&command, cli.jobs, argv).map(|_| ())
}

/// Run one artifact-producing command and write its manifest.
pub fn execute(command: &Command, jobs: usize, argv: Vec<String>) -> anyhow::Result<RunManifest> {
    let started = Instant::now();
    let mut out = Outputs::new(&command.output_dir())?;
    let rec = match command {
        Command::Generate(a) => generate(a, jobs, &mut out)?,
        Command::Window(a) => window(a, &mut out)?,
        Command::Train(a) => train(a, &mut out)?,
        Command::Gridsearch(a) => gridsearch(a, jobs, false, &mut out)?,
        Command::Compare(a) => gridsearch(a, jobs, true, &mut out)?,
        Command::Evaluate(a) => evaluate_cmd(a, &mut out)?,
        Command::Extract(a) => extract(a, jobs, &mut out)?,
        Command::Explain(a) => explain_cmd(a, jobs, &mut out)?,
        Command::Report(a) => report(a, &mut out)?,
        Command::Replay(_) => bail!("replay does not nest"),
    };
    let manifest = RunManifest {
        tool: "crosspath".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand: command.name().into(),
        argv,
        command: command.clone(),
        config: rec.config,
        seeds: rec.seeds,
        inputs: out.inputs,
        artifacts: out.artifacts,
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    let path = out.dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(manifest)
}

fn replay(r: &ReplayArgs, jobs: usize) -> anyhow::Result<()> {
    let original = RunManifest::load(&r.manifest)?;
    let mut command = original.command.clone();
    if let Some(dir) = &r.out {
        command.redirect(dir);
    }
    let mut argv = original.argv.clone();
    argv.push("(replayed)".into());
    let fresh = execute(&command, jobs, argv)?;
    let mut mismatched = Vec::new();
    for (name, sum) in &original.artifacts {
        match fresh.artifacts.get(name) {
            Some(s) if s == sum => {}
            _ => mismatched.push(name.clone()),
        }
    }
    if mismatched.is_empty() && fresh.artifacts.len() == original.artifacts.len() {
        println!("replay: {} artifacts identical", fresh.artifacts.len());
        Ok(())
    } else {
        bail!("replay produced different artifacts: {}", mismatched.join(", "))
    }
}

fn read_instances(path: &Path, out: &mut Outputs) -> anyhow::Result<Vec<CrossingInstance>> {
    out.input(path)?;
    Ok(read_jsonl_file::<CrossingInstance>(path)?)
}

fn jsonl<T: Serialize>(records: &[T]) -> anyhow::Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, records)?;
    Ok(buf)
}

fn generate(a: &GenerateArgs, jobs: usize, out: &mut Outputs) -> anyhow::Result<RunRecord> {
    let mut cfg = match &a.config {
        Some(p) => {
            out.input(p)?;
            load_config::<GeneratorConfig>(p)?
        }
        None => synthgen::benchmark_config(7),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.participants {
        cfg.n_participants = n;
    }
    if let Some(n) = a.scenarios {
        cfg.scenarios_per_participant = n;
    }
    let instances = synthgen::generate(&cfg, jobs)?;
    let bytes = jsonl(&instances)?;
    let sum = sha256_hex(&bytes);
    out.write("crossings.jsonl", &bytes)?;
    out.write("checksum.txt", format!("{sum}  crossings.jsonl\n").as_bytes())?;
    println!("{} instances, sha256 {sum}", instances.len());
    Ok(RunRecord {
        config: to_value(&cfg),
        seeds: Some(SeedPlan::from_master(cfg.seed)),
    })
}

fn window(a: &WindowArgs, out: &mut Outputs) -> anyhow::Result<RunRecord> {
    let instances = read_instances(&a.data, out)?;
    let mode = match a.mode {
        Mode::Time => WindowMode::TimeBased { t1_s: a.t1, t2_s: a.t2 },
        Mode::Distance => WindowMode::DistanceBased {
            p: a.p.context("--p is required in distance mode")?,
        },
    };
    let spec = WindowingSpec {
        mode,
        variant: a.variant,
        stride_steps: a.stride,
    };
    let corpus = window_corpus(&instances, &spec)?;
    out.write("samples.jsonl", &jsonl(&corpus.samples)?)?;
    let label = match mode {
        WindowMode::TimeBased { t1_s, t2_s } => format!("T_{t1_s}_{t2_s}"),
        WindowMode::DistanceBased { p } => format!("D_{p}"),
    };
    let table = format!(
        "data_type,variant,stride,instances,samples,dropped\n{label},{},{},{},{},{}\n",
        a.variant.name(),
        a.stride,
        instances.len(),
        corpus.samples.len(),
        corpus.dropped.len()
    );
    out.write("counts.csv", table.as_bytes())?;
    println!("{label}: {} samples from {} instances", corpus.samples.len(), instances.len());
    Ok(RunRecord {
        config: to_value(&spec),
        seeds: None,
    })
}

fn train(a: &TrainArgs, out: &mut Outputs) -> anyhow::Result<RunRecord> {
    let mut s = match &a.config {
        Some(p) => {
            out.input(p)?;
            load_config::<TrainSettings>(p)?
        }
        None => TrainSettings::default(),
    };
    macro_rules! flag {
        ($($f:ident => $field:ident),*) => { $( if let Some(v) = a.$f { s.$field = v; } )* };
    }
    flag!(data_type => data_type, variant => variant, kind => kind, stride => stride_steps,
          lstm_layers => lstm_layers, dense_layers => dense_layers, nodes => nodes, dropout => dropout,
          batch_size => batch_size, epochs => epochs, lambda => secondary_loss_weight,
          learning_rate => learning_rate);
    let instances = read_instances(&a.data, out)?;
    let plan = SeedPlan::from_master(a.seed);
    let ds = Dataset::for_type(&instances, s.data_type, s.variant, s.stride_steps, plan.split, DEFAULT_FOLDS)?;
    let config = s.model_config(ds.output_len);
    let (artifact, history) = harness::train_on_pool(&config, &ds, &plan)?;
    out.write("model.bin", &artifact.to_container()?.to_bytes())?;
    out.write("history.csv", history.to_csv().as_bytes())?;
    out.write("split.json", serde_json::to_string_pretty(&ds.split)?.as_bytes())?;
    let last = history.epochs.last().map_or(f64::NAN, |e| e.train_loss);
    println!("{}: trained {} epochs, final train loss {last:.6}", ds.name(), history.epochs.len());
    Ok(RunRecord {
        config: to_value(&s),
        seeds: Some(plan),
    })
}

fn resolve_experiment(a: &GridArgs, out: &mut Outputs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            out.input(p)?;
            ExperimentConfig::from_path(p)?
        }
        None if a.ci => ExperimentConfig::ci(7),
        None => ExperimentConfig::default(),
    };
    if let Some(v) = &a.data {
        cfg.dataset = Some(v.clone());
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.training.epochs = v;
    }
    if let Some(v) = a.stride {
        cfg.stride_steps = v;
    }
    if let Some(v) = a.folds {
        cfg.folds = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gridsearch(a: &GridArgs, jobs: usize, compare: bool, out: &mut Outputs) -> anyhow::Result<RunRecord> {
    let cfg = resolve_experiment(a, out)?;
    let jobs = if jobs == 0 { cfg.jobs } else { jobs };
    let instances = match &cfg.dataset {
        Some(p) => read_instances(p, out)?,
        None => synthgen::benchmark_corpus(cfg.corpus_seed, jobs)?.0,
    };
    let plan = SeedPlan::from_master(cfg.seed);
    let kinds: Vec<ModelKind> = match (compare, a.kind) {
        (true, _) | (false, KindChoice::Both) => vec![ModelKind::Aux, ModelKind::Vanilla],
        (false, KindChoice::Aux) => vec![ModelKind::Aux],
        (false, KindChoice::Vanilla) => vec![ModelKind::Vanilla],
    };
    let mut rows = Vec::new();
    for &dt in &cfg.grid.data_types {
        for &variant in &cfg.grid.variants {
            let ds = Dataset::for_type(&instances, dt, variant, cfg.stride_steps, plan.split, cfg.folds)?;
            let stem = format!("{}_{}", dt.name(), variant.name());
            let mut tests = BTreeMap::new();
            for &kind in &kinds {
                let mut rep = harness::grid_search(&cfg.grid, kind, &ds, &cfg.training, &plan, jobs)?;
                for c in &rep.leaderboard {
                    for f in &c.folds {
                        let name = format!("history/{stem}/{}_fold{}.csv", c.label, f.fold);
                        out.write(&name, f.history.to_csv().as_bytes())?;
                    }
                }
                let fm = harness::final_eval(&mut rep, &ds, &plan)?;
                out.write(&format!("{stem}_{kind}_leaderboard.csv"), rep.leaderboard_csv().as_bytes())?;
                out.write(&format!("{stem}_{kind}_report.json"), serde_json::to_string_pretty(&rep)?.as_bytes())?;
                out.write(&format!("{stem}_{kind}.bin"), &fm.artifact.to_container()?.to_bytes())?;
                out.write(&format!("history/{stem}/{}_final.csv", fm.test.label), fm.history.to_csv().as_bytes())?;
                println!("{stem} {kind}: best {} test RMSE {:.4} m", fm.test.label, fm.test.test_rmse);
                tests.insert(kind.to_string(), fm.test);
            }
            if let (Some(x), Some(v)) = (tests.get("aux"), tests.get("vanilla")) {
                rows.push(harness::ComparisonRow {
                    dataset: ds.name(),
                    aux_label: x.label.clone(),
                    vanilla_label: v.label.clone(),
                    aux_rmse: x.test_rmse,
                    vanilla_rmse: v.test_rmse,
                    improvement_pct: harness::improvement_pct(x.test_rmse, v.test_rmse),
                });
            }
        }
    }
    if !rows.is_empty() {
        out.write("comparison.csv", harness::comparison_csv(&rows).as_bytes())?;
        for r in &rows {
            println!("{}: aux improves on vanilla by {:.1}%", r.dataset, r.improvement_pct);
        }
    }
    Ok(RunRecord {
        config: to_value(&cfg),
        seeds: Some(plan),
    })
}

fn part_ids(instances: &[CrossingInstance], part: Part, seed: u64) -> anyhow::Result<Option<BTreeSet<String>>> {
    if part == Part::All {
        return Ok(None);
    }
    let ids: Vec<String> = instances.iter().map(|i| i.id.clone()).collect();
    let split = make_splits(&ids, SeedPlan::from_master(seed).split, DEFAULT_FOLDS)?;
    let chosen = match part {
        Part::Test => split.test,
        _ => split.folds.into_iter().flatten().collect(),
    };
    Ok(Some(chosen.into_iter().collect()))
}

/// Window `path` the way `artifact` expects and normalize with its scales.
fn model_samples(
    artifact: &ModelArtifact,
    path: &Path,
    part: Part,
    seed: u64,
    out: &mut Outputs,
) -> anyhow::Result<Vec<(SequenceSample, NormalizedSample)>> {
    let instances = read_instances(path, out)?;
    let keep = part_ids(&instances, part, seed)?;
    let instances: Vec<CrossingInstance> = instances
        .into_iter()
        .filter(|i| keep.as_ref().is_none_or(|k| k.contains(&i.id)))
        .collect();
    let corpus = window_corpus(&instances, &artifact.windowing)?;
    let steps = artifact.network.config.output_steps;
    corpus
        .samples
        .into_iter()
        .map(|s| {
            let s = s.with_output_len(steps);
            let n = artifact.normalization.normalize(&s)?;
            Ok((s, n))
        })
        .collect()
}

fn load_model(path: &Path, out: &mut Outputs) -> anyhow::Result<ModelArtifact> {
    out.input(path)?;
    Ok(ModelArtifact::load(path)?)
}

fn evaluate_cmd(a: &EvaluateArgs, out: &mut Outputs) -> anyhow::Result<RunRecord> {
    let artifact = load_model(&a.model, out)?;
    let samples = model_samples(&artifact, &a.data, a.part, a.seed, out)?;
    let norm: Vec<NormalizedSample> = samples.into_iter().map(|(_, n)| n).collect();
    if norm.is_empty() {
        bail!("no samples to evaluate");
    }
    let (loss, rmse) = evaluate(&artifact.network, &norm, &artifact.normalization)?;
    let metrics = serde_json::json!({ "loss": loss, "rmse_m": rmse, "samples": norm.len() });
    out.write("metrics.json", serde_json::to_string_pretty(&metrics)?.as_bytes())?;
    println!("RMSE {rmse:.4} m over {} samples", norm.len());
    Ok(RunRecord {
        config: serde_json::json!({ "part": a.part, "seed": a.seed }),
        seeds: Some(SeedPlan::from_master(a.seed)),
    })
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn extract(a: &ExtractArgs, jobs: usize, out: &mut Outputs) -> anyhow::Result<RunRecord> {
    let cfg = match &a.config {
        Some(p) => {
            out.input(p)?;
            load_config::<CriteriaConfig>(p)?
        }
        None => CriteriaConfig::default(),
    };
    out.input(&a.scenes)?;
    let scenes = read_jsonl_file::<SceneLog>(&a.scenes)?;
    let (events, funnel) = extractor::extract_all(&scenes, &cfg, jobs)?;
    if a.out.parent() != a.funnel.parent() {
        bail!("--out and --funnel must share a directory");
    }
    out.write(&file_name(&a.out), &jsonl(&events)?)?;
    out.write(&file_name(&a.funnel), funnel.to_csv().as_bytes())?;
    println!("{} candidate events from {} scenes", events.len(), scenes.len());
    Ok(RunRecord {
        config: to_value(&cfg),
        seeds: None,
    })
}

fn explain_cmd(a: &ExplainArgs, jobs: usize, out: &mut Outputs) -> anyhow::Result<RunRecord> {
    let artifact = load_model(&a.model, out)?;
    let mut data = model_samples(&artifact, &a.data, a.data_part, a.seed, out)?;
    if let Some(n) = a.limit {
        data.truncate(n);
    }
    let background: Vec<NormalizedSample> = model_samples(&artifact, &a.background, a.background_part, a.seed, out)?
        .into_iter()
        .map(|(_, n)| n)
        .collect();
    let cfg = ExplainConfig {
        background_size: a.background_size,
        seed: SeedPlan::from_master(a.seed).background,
        attribution: if a.encoded { Attribution::Encoded } else { Attribution::Variables },
        jobs,
    };
    let items: Vec<(String, usize, NormalizedSample)> =
        data.into_iter().map(|(s, n)| (s.instance_id, s.start_step, n)).collect();
    let ex = explain::explain_corpus(&artifact, &items, &background, &cfg)?;
    let name = file_name(&a.out);
    out.write(&name, explain::summary_csv(&ex).as_bytes())?;
    let stem = a.out.file_stem().map_or("shap".into(), |s| s.to_string_lossy().into_owned());
    out.write(&format!("{stem}_instances.jsonl"), &jsonl(&ex)?)?;
    println!("explained {} samples", ex.len());
    Ok(RunRecord {
        config: to_value(&cfg),
        seeds: Some(SeedPlan::from_master(a.seed)),
    })
}

fn report(a: &ReportArgs, out: &mut Outputs) -> anyhow::Result<RunRecord> {
    let instances = read_instances(&a.data, out)?;
    let mut table = String::from("data_type,variant,stride,samples\n");
    for (dt, n) in count_table(&instances, a.variant, a.stride)? {
        table.push_str(&format!("{},{},{},{n}\n", dt.name(), a.variant.name(), a.stride));
    }
    out.write("sample_counts.csv", table.as_bytes())?;
    if let (Some(aux_path), Some(van_path)) = (&a.aux, &a.vanilla) {
        let aux = load_model(aux_path, out)?;
        let van = load_model(van_path, out)?;
        if aux.windowing != van.windowing {
            bail!("aux and vanilla models were trained on different windowings");
        }
        let samples = model_samples(&aux, &a.data, a.part, a.seed, out)?;
        let steps = van.network.config.output_steps;
        for (s, n_aux) in samples.iter().take(a.samples) {
            let n_van = van.normalization.normalize(&s.clone().with_output_len(steps))?;
            let pa = aux.network.predict(&aux.normalization, n_aux)?;
            let pv = van.network.predict(&van.normalization, &n_van)?;
            let first = s.start_step + s.input_len();
            let mut csv = String::from("t,x_true,y_true,x_pred_vanilla,y_pred_vanilla,x_pred_aux,y_pred_aux\n");
            let truth = s.target.chunks(2).zip(&s.mask).filter(|(_, m)| **m);
            for (k, ((xy, _), (a_, v_))) in truth.zip(pa.iter().zip(&pv)).enumerate() {
                let t = (first + k) as f64 * TIMESTEP_S;
                csv.push_str(&format!("{t},{},{},{},{},{},{}\n", xy[0], xy[1], v_[0], v_[1], a_[0], a_[1]));
            }
            out.write(&format!("trajectories/{}_{:04}.csv", s.instance_id, s.start_step), csv.as_bytes())?;
        }
    }
    Ok(RunRecord {
        config: serde_json::json!({ "variant": a.variant, "stride": a.stride, "part": a.part, "samples": a.samples }),
        seeds: Some(SeedPlan::from_master(a.seed)),
    })
}
