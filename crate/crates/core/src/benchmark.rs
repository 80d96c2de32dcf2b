//! Scaled-down covariate-transfer benchmark: a synthetic dataset with
//! bimodal responses, one training run, Euler sampling of every held-out
//! condition and a comparison against the linear additive reference.

use std::time::Instant;

use crate::data::{Condition, PerturbDataset, Split, SynthRunConfig};
use crate::error::{Error, Result};
use crate::flow::{build_model, TrainConfig, Trainer};
use crate::metrics::{evaluate, mmd_rbf, Bandwidth, EvalOptions, LinearAdditive, MetricsReport};
use crate::models::ModelKind;
use crate::sampler::{sample_dataset, SamplerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator and split of the benchmark dataset.
pub const SYNTH_CONFIG: &str = include_str!("../configs/covariate_transfer_synth.json");
/// Training run used for every architecture in the comparison.
pub const TRAIN_CONFIG: &str = include_str!("../configs/covariate_transfer_train.json");

pub fn synth_config() -> SynthRunConfig {
    serde_json::from_str(SYNTH_CONFIG).expect("bundled synth config parses")
}

/// The bundled training config with `model` swapped in; every other
/// hyperparameter is shared so architectures compare like for like.
pub fn train_config(model: ModelKind) -> TrainConfig {
    let mut cfg: TrainConfig = serde_json::from_str(TRAIN_CONFIG).expect("bundled train config parses");
    cfg.model = model;
    cfg
}

pub fn dataset(seed: u64) -> Result<PerturbDataset> {
    synth_config().generate(seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkOptions {
    pub samples_per_condition: usize,
    pub ode_steps: usize,
    pub eval: EvalOptions,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self {
            samples_per_condition: 100,
            ode_steps: 100,
            eval: EvalOptions {
                k: 10,
                ..EvalOptions::default()
            },
        }
    }
}

/// One trained and scored model.
#[derive(Debug, Clone)]
pub struct BenchmarkRun {
    pub model: ModelKind,
    pub seed: u64,
    pub losses: Vec<f64>,
    pub report: MetricsReport,
    pub baseline: MetricsReport,
    /// MMD between each held-out condition and its covariate's train controls.
    pub control_mmd: Vec<(Condition, f64)>,
    pub train_seconds: f64,
    pub sample_seconds: f64,
}

impl BenchmarkRun {
    pub fn conditions(&self) -> impl Iterator<Item = &Condition> {
        self.control_mmd.iter().map(|(c, _)| c)
    }

    fn mean_of(&self, metric: &str) -> f64 {
        self.report.mean(metric).unwrap_or(f64::NAN)
    }

    pub fn mean_mmd(&self) -> f64 {
        self.mean_of("mmd_gex")
    }

    pub fn mean_control_mmd(&self) -> f64 {
        self.control_mmd.iter().map(|(_, v)| v).sum::<f64>() / self.control_mmd.len() as f64
    }

    pub fn mean_recall(&self) -> f64 {
        self.mean_of("deg_recall")
    }

    pub fn mean_rank_mmd(&self) -> f64 {
        self.mean_of("rank_mmd_gex")
    }

    pub fn mean_rank_recall(&self) -> f64 {
        self.mean_of("rank_deg_recall")
    }

    /// Held-out conditions where the model's MMD is below the baseline's.
    pub fn wins_over_baseline(&self) -> usize {
        self.conditions()
            .filter(|c| match (self.report.value(c, "mmd_gex"), self.baseline.value(c, "mmd_gex")) {
                (Some(m), Some(b)) => m < b,
                _ => false,
            })
            .count()
    }
}

/// Trains `cfg` on `ds` and scores samples for every test condition.
/// Network init uses `seed`, minibatch order `seed + 1`, sampling `seed + 2`
/// and the baseline's resampling `seed + 3`.
pub fn run(ds: &PerturbDataset, cfg: &TrainConfig, opts: &BenchmarkOptions, seed: u64) -> Result<BenchmarkRun> {
    cfg.validate()?;
    let conditions = ds.test_conditions();
    if conditions.is_empty() {
        return Err(Error::Data("benchmark dataset has no held-out perturbed conditions".into()));
    }
    let mut model = build_model(cfg, ds, seed)?;
    let mut trainer = Trainer::new(cfg.flow())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let started = Instant::now();
    let losses = trainer.train(&mut model, ds, cfg.epochs, cfg.max_steps, &mut rng)?;
    let train_seconds = started.elapsed().as_secs_f64();

    let sampler = SamplerConfig {
        steps: opts.ode_steps,
        num_samples: opts.samples_per_condition,
        ..SamplerConfig::default()
    };
    let started = Instant::now();
    let generated = sample_dataset(&model, &conditions, &sampler, Some(ds), seed.wrapping_add(2))?;
    let sample_seconds = started.elapsed().as_secs_f64();

    let report = evaluate(&generated, ds, &opts.eval, cfg.model.name())?;
    let la = LinearAdditive::fit(ds)?.sample_dataset(&conditions, opts.samples_per_condition, seed.wrapping_add(3))?;
    let baseline = evaluate(&la, ds, &opts.eval, "linear_additive")?;
    let control_mmd = conditions
        .iter()
        .map(|c| {
            let truth = ds.cells_of(c, Some(Split::Test));
            let ctrl = ds.controls_of(c.covariate())?;
            Ok((c.clone(), mmd_rbf(&ctrl, &truth, Bandwidth::Median)?))
        })
        .collect::<Result<_>>()?;
    Ok(BenchmarkRun {
        model: cfg.model,
        seed,
        losses,
        report,
        baseline,
        control_mmd,
        train_seconds,
        sample_seconds,
    })
}
