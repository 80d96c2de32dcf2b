//! `primeflow` command line: synth, train, sample and eval, each writing one
//! run directory with a checksummed manifest.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use numcore::checkpoint::{self, write_atomic};
use numcore::{AdamState, ParameterSet, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_dataset, save_dataset, Condition, SynthRunConfig};
use crate::error::{Error, Result};
use crate::flow::{build_model, TrainConfig, Trainer};
use crate::metrics::{evaluate, pca_scatter_csv, Bandwidth, EvalOptions, LinearAdditive};
use crate::models::FlowModel;
use crate::sampler::{sample_dataset, SamplerConfig, Source};

pub const OUTPUT_ROOT_ENV: &str = "PRIMEFLOW_OUTPUT_ROOT";
pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const EXIT_USER: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "primeflow", version, about = "Conditional flow matching for perturbation responses")]
pub struct Cli {
    /// Base directory for relative output paths.
    #[arg(long, env = OUTPUT_ROOT_ENV, global = true)]
    pub output_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its split.
    Synth(SynthArgs),
    /// Train a flow model on a dataset.
    Train(TrainArgs),
    /// Draw cells for a set of conditions from a checkpoint.
    Sample(SampleArgs),
    /// Score generated cells against a reference dataset.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run directory to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing run directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Previous train run to continue from (model and optimizer state).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SourceArg {
    Gaussian,
    ControlCells,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Train run directory or checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// File with one condition key per line (`pert1+pert2|covariate`), or `all-test`.
    #[arg(long, default_value = "all-test")]
    pub conditions: String,
    /// Dataset supplying test conditions and control cells.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    /// Classifier-free guidance weight.
    #[arg(long = "cfg", default_value_t = 1.0)]
    pub cfg_weight: f64,
    /// Cells per condition.
    #[arg(long = "n", default_value_t = 1000)]
    pub num_samples: usize,
    /// Use the conditional field only.
    #[arg(long)]
    pub conditional_only: bool,
    #[arg(long, value_enum, default_value = "gaussian")]
    pub source: SourceArg,
    /// Clip generated expression at zero.
    #[arg(long)]
    pub clamp: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Generated dataset (a sample run directory).
    #[arg(long)]
    pub generated: PathBuf,
    /// Reference dataset with a test split.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    #[arg(long, default_value_t = 30)]
    pub pcs: usize,
    /// Fixed kernel bandwidth instead of the median heuristic.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Also score the linear-additive baseline.
    #[arg(long)]
    pub baseline: bool,
    /// Seed for the baseline's control resampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub seed: Option<u64>,
    pub config_sha256: Option<String>,
    pub inputs: Vec<String>,
    pub output: String,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
    /// Relative path → sha256 of every file in the run directory.
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n != RUN_MANIFEST) {
            out.push(path.strip_prefix(root).expect("inside root").to_path_buf());
        }
    }
    Ok(())
}

/// Checksums of every file under `dir` except the run manifest.
pub fn artifact_checksums(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files
        .into_iter()
        .map(|rel| {
            let bytes = fs::read(dir.join(&rel))?;
            Ok((rel.to_string_lossy().replace('\\', "/"), sha256_hex(&bytes)))
        })
        .collect()
}

/// Re-hashes every artifact a manifest lists; returns the mismatching paths.
pub fn verify_manifest(dir: &Path) -> Result<Vec<String>> {
    let m: RunManifest = serde_json::from_slice(&fs::read(dir.join(RUN_MANIFEST))?)?;
    let mut bad = Vec::new();
    for (rel, sum) in &m.artifacts {
        match fs::read(dir.join(rel)) {
            Ok(bytes) if sha256_hex(&bytes) == *sum => {}
            _ => bad.push(rel.clone()),
        }
    }
    Ok(bad)
}

struct Run {
    dir: PathBuf,
    started: Instant,
    started_unix: u64,
    command: Vec<String>,
}

impl Run {
    fn start(root: Option<&Path>, common: &Common, command: Vec<String>) -> Result<Self> {
        let dir = match root {
            Some(r) if common.out.is_relative() => r.join(&common.out),
            _ => common.out.clone(),
        };
        if dir.exists() {
            let empty = dir.is_dir() && fs::read_dir(&dir)?.next().is_none();
            if !empty && !common.force {
                return Err(Error::Config(format!(
                    "{} already exists; pass --force to replace it",
                    dir.display()
                )));
            }
            if !empty {
                fs::remove_dir_all(&dir)?;
            }
        }
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            command,
        })
    }

    fn finish(self, seed: Option<u64>, config: Option<&[u8]>, inputs: &[&Path]) -> Result<PathBuf> {
        let manifest = RunManifest {
            command: self.command,
            seed,
            config_sha256: config.map(sha256_hex),
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            output: self.dir.display().to_string(),
            started_unix: self.started_unix,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            artifacts: artifact_checksums(&self.dir)?,
        };
        write_atomic(&self.dir.join(RUN_MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(self.dir)
    }
}

fn read_config(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn parse_json<T: serde::de::DeserializeOwned>(bytes: &[u8], path: &Path) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn cmd_synth(args: &SynthArgs, root: Option<&Path>, command: Vec<String>) -> Result<PathBuf> {
    let raw = read_config(&args.config)?;
    let cfg: SynthRunConfig = parse_json(&raw, &args.config)?;
    let ds = cfg.generate(args.seed)?;
    let run = Run::start(root, &args.common, command)?;
    save_dataset(&ds, &run.dir.join("dataset"))?;
    run.finish(Some(args.seed), Some(&raw), &[&args.config])
}

/// Accepts a dataset directory or a run directory holding `dataset/`.
fn dataset_dir(path: &Path) -> PathBuf {
    let nested = path.join("dataset");
    if nested.join("meta.json").exists() {
        nested
    } else {
        path.to_path_buf()
    }
}

/// Accepts a checkpoint directory or a train run directory holding `checkpoint/`.
fn checkpoint_dir(path: &Path) -> PathBuf {
    let nested = path.join("checkpoint");
    if nested.join(checkpoint::MANIFEST_FILE).exists() {
        nested
    } else {
        path.to_path_buf()
    }
}

fn save_optimizer(dir: &Path, state: &AdamState) -> Result<()> {
    let mut p = ParameterSet::new();
    for (name, m, v) in state.moments() {
        p.insert(format!("m/{name}"), Tensor::new(vec![m.len()], m.to_vec())?);
        p.insert(format!("v/{name}"), Tensor::new(vec![v.len()], v.to_vec())?);
    }
    checkpoint::save(dir, &p, serde_json::json!({ "step": state.step_count() }))?;
    Ok(())
}

fn load_optimizer(dir: &Path) -> Result<AdamState> {
    let (p, manifest) = checkpoint::load(dir)?;
    let step = manifest.metadata["step"]
        .as_u64()
        .ok_or_else(|| Error::Config("optimizer state lacks a step count".into()))?;
    let mut moments = Vec::new();
    for (name, m) in p.iter().filter(|(n, _)| n.starts_with("m/")) {
        let base = &name[2..];
        let v = p
            .get(&format!("v/{base}"))
            .ok_or_else(|| Error::Config(format!("optimizer state lacks the second moment of `{base}`")))?;
        moments.push((base.to_string(), m.data().to_vec(), v.data().to_vec()));
    }
    Ok(AdamState::from_moments(step, moments))
}

fn cmd_train(args: &TrainArgs, root: Option<&Path>, command: Vec<String>) -> Result<PathBuf> {
    let raw = read_config(&args.config)?;
    let cfg: TrainConfig = parse_json(&raw, &args.config)?;
    cfg.validate()?;
    let ds = load_dataset(&dataset_dir(&args.data))?;
    let (mut model, mut trainer) = match &args.resume {
        Some(prev) => {
            let (model, _) = FlowModel::load(&checkpoint_dir(prev))?;
            if model.kind != cfg.model {
                return Err(Error::Config(format!(
                    "resumed checkpoint is a {} model, config asks for {}",
                    model.kind.name(),
                    cfg.model.name()
                )));
            }
            let mut trainer = Trainer::new(cfg.flow())?;
            trainer.adam = load_optimizer(&prev.join("optimizer"))?;
            (model, trainer)
        }
        None => (build_model(&cfg, &ds, args.seed)?, Trainer::new(cfg.flow())?),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(1));
    let run = Run::start(root, &args.common, command)?;
    let losses = trainer.train(&mut model, &ds, cfg.epochs, cfg.max_steps, &mut rng)?;
    let extra = serde_json::json!({ "train_config": cfg, "seed": args.seed, "steps": losses.len() });
    model.save(&run.dir.join("checkpoint"), extra)?;
    save_optimizer(&run.dir.join("optimizer"), &trainer.adam)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(&run.dir.join("loss.csv"), &bytes)?;
    let mut inputs: Vec<&Path> = vec![&args.data, &args.config];
    if let Some(p) = &args.resume {
        inputs.push(p);
    }
    run.finish(Some(args.seed), Some(&raw), &inputs)
}

fn parse_conditions(spec: &str, data: Option<&crate::data::PerturbDataset>) -> Result<Vec<Condition>> {
    if spec == "all-test" {
        let ds = data.ok_or_else(|| Error::Config("--conditions all-test needs --data".into()))?;
        let c = ds.test_conditions();
        if c.is_empty() {
            return Err(Error::Data("dataset has no perturbed test conditions".into()));
        }
        return Ok(c);
    }
    let path = Path::new(spec);
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {spec}: {e}")))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(Condition::from_key)
        .collect()
}

fn cmd_sample(args: &SampleArgs, root: Option<&Path>, command: Vec<String>) -> Result<PathBuf> {
    let (model, _) = FlowModel::load(&checkpoint_dir(&args.checkpoint))?;
    let data = args.data.as_ref().map(|d| load_dataset(&dataset_dir(d))).transpose()?;
    let conditions = parse_conditions(&args.conditions, data.as_ref())?;
    for c in &conditions {
        model.conditions.encode(Some(c))?;
    }
    let cfg = SamplerConfig {
        steps: args.steps,
        cfg_weight: args.cfg_weight,
        num_samples: args.num_samples,
        source: match args.source {
            SourceArg::Gaussian => Source::Gaussian,
            SourceArg::ControlCells => Source::ControlCells,
        },
        conditional_only: args.conditional_only,
        clamp: args.clamp,
    };
    cfg.validate()?;
    if cfg.source == Source::ControlCells && data.is_none() {
        return Err(Error::Config("--source control-cells needs --data".into()));
    }
    let generated = sample_dataset(&model, &conditions, &cfg, data.as_ref(), args.seed)?;
    let run = Run::start(root, &args.common, command)?;
    save_dataset(&generated, &run.dir.join("dataset"))?;
    let cfg_json = serde_json::to_vec(&cfg)?;
    write_atomic(&run.dir.join("sampler.json"), &cfg_json)?;
    let mut inputs: Vec<&Path> = vec![&args.checkpoint];
    if let Some(d) = &args.data {
        inputs.push(d);
    }
    run.finish(Some(args.seed), Some(&cfg_json), &inputs)
}

fn method_of(ds: &crate::data::PerturbDataset) -> String {
    match ds.normalization() {
        crate::data::Normalization::Generated { source } => source.clone(),
        _ => "reference".into(),
    }
}

fn cmd_eval(args: &EvalArgs, root: Option<&Path>, command: Vec<String>) -> Result<PathBuf> {
    let pred = load_dataset(&dataset_dir(&args.generated))?;
    let truth = load_dataset(&dataset_dir(&args.truth))?;
    if pred.genes() != truth.genes() {
        return Err(Error::Data("generated and reference gene lists differ".into()));
    }
    let opts = EvalOptions {
        k: args.k,
        pcs: args.pcs,
        bandwidth: args.bandwidth.map_or(Bandwidth::Median, Bandwidth::Fixed),
    };
    let method = method_of(&pred);
    let mut reports = vec![evaluate(&pred, &truth, &opts, &method)?];
    let mut sets: Vec<(String, crate::data::PerturbDataset)> = vec![(method, pred)];
    if args.baseline {
        let conds: Vec<Condition> = sets[0].1.groups(None).into_keys().filter(|c| !c.is_control()).collect();
        let n = sets[0].1.n_cells() / conds.len().max(1);
        let la = LinearAdditive::fit(&truth)?.sample_dataset(&conds, n.max(1), args.seed)?;
        reports.push(evaluate(&la, &truth, &opts, "linear_additive")?);
        sets.push(("linear_additive".into(), la));
    }
    let run = Run::start(root, &args.common, command)?;
    for r in &reports {
        write_atomic(&run.dir.join(format!("metrics_{}.csv", r.method)), r.to_csv()?.as_bytes())?;
    }
    let summary: Vec<serde_json::Value> = reports.iter().map(|r| r.summary_json()).collect();
    write_atomic(
        &run.dir.join("summary.json"),
        serde_json::to_string_pretty(&serde_json::json!({ "methods": summary }))?.as_bytes(),
    )?;
    let named: Vec<(&str, &crate::data::PerturbDataset)> = sets.iter().map(|(n, d)| (n.as_str(), d)).collect();
    write_atomic(&run.dir.join("pca_scatter.csv"), pca_scatter_csv(&truth, &named)?.as_bytes())?;
    run.finish(None, None, &[&args.generated, &args.truth])
}

/// Runs one command and returns the run directory.
pub fn execute(cli: &Cli, command: Vec<String>) -> Result<PathBuf> {
    let root = cli.output_root.as_deref();
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, root, command),
        Command::Train(a) => cmd_train(a, root, command),
        Command::Sample(a) => cmd_sample(a, root, command),
        Command::Eval(a) => cmd_eval(a, root, command),
    }
}

/// Exit code for an error: 3 for numerical failures, 2 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_USER
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USER } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let command = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, command) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
