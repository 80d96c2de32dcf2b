//! Conditional flow matching training with CFG condition dropout.

use ndarray::{Array2, Axis};
use numcore::{adam_step, clip_grad_norm, AdamState, Graph};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Coupling, FlowConfig, TrainConfig};
use super::coupling::{couple_independent, couple_ot};
use super::path::{cfm_loss, sample_path_point};
use crate::data::{Condition, PerturbDataset, Split};
use crate::encoding::{dropout_condition, ConditionEncoder};
use crate::error::{Error, Result};
use crate::models::{pca_fit, FlowModel, VelocityNet};

/// Initializes the model described by `cfg` for `ds`. PCA models fit their
/// basis on the train split.
pub fn build_model(cfg: &TrainConfig, ds: &PerturbDataset, seed: u64) -> Result<FlowModel> {
    cfg.validate()?;
    let conditions = ConditionEncoder::new(
        ds.perturbation_vocabulary().to_vec(),
        ds.covariate_vocabulary().to_vec(),
    );
    let projector = if cfg.model.uses_pca() {
        let train: Vec<usize> = (0..ds.n_cells()).filter(|&i| ds.splits()[i] == Split::Train).collect();
        Some(pca_fit(&ds.rows(&train), cfg.pca_dim)?)
    } else {
        None
    };
    let state_dim = projector.as_ref().map_or(ds.n_genes(), |p| p.dim());
    let net = VelocityNet::new(cfg.architecture(), state_dim, conditions.dim(), seed)?;
    Ok(FlowModel {
        kind: cfg.model,
        net,
        projector,
        conditions,
        genes: ds.genes().to_vec(),
    })
}

/// A batch before time and noise are drawn.
struct MicroBatch {
    x0: Array2<f64>,
    x1: Array2<f64>,
    conditions: Vec<Condition>,
}

/// Optimizer state that survives across calls, so training can resume.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub flow: FlowConfig,
    pub adam: AdamState,
    /// Per-step mean loss across everything trained so far.
    pub losses: Vec<f64>,
}

impl Trainer {
    pub fn new(flow: FlowConfig) -> Result<Self> {
        flow.validate()?;
        Ok(Self {
            flow,
            adam: AdamState::new(),
            losses: Vec::new(),
        })
    }

    pub fn steps(&self) -> usize {
        self.losses.len()
    }

    /// Runs `epochs` passes, stopping early once `max_steps` optimizer steps
    /// have been taken in total. Returns the losses of this call.
    pub fn train(
        &mut self,
        model: &mut FlowModel,
        ds: &PerturbDataset,
        epochs: usize,
        max_steps: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        if model.genes != ds.genes() {
            return Err(Error::Data("dataset genes differ from the model's".into()));
        }
        let train: Vec<usize> = (0..ds.n_cells()).filter(|&i| ds.splits()[i] == Split::Train).collect();
        if train.is_empty() {
            return Err(Error::Data("dataset has no train cells".into()));
        }
        let states = model.to_state(&ds.rows(&train))?;
        let start = self.losses.len();
        let cap = max_steps.unwrap_or(usize::MAX);
        for _ in 0..epochs {
            if self.losses.len() >= cap {
                break;
            }
            let batches = match &self.flow.coupling {
                Coupling::Independent => self.independent_epoch(ds, &train, &states, rng),
                Coupling::Ot(_) => self.ot_epoch(ds, &train, &states, rng)?,
            };
            for group in batches.chunks(self.flow.grad_accum_batches) {
                if self.losses.len() >= cap {
                    break;
                }
                self.step(model, group, rng)?;
            }
        }
        Ok(self.losses[start..].to_vec())
    }

    /// Shuffled train cells in `batch_size` chunks, each paired with noise.
    fn independent_epoch(
        &self,
        ds: &PerturbDataset,
        train: &[usize],
        states: &Array2<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Vec<MicroBatch> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(rng);
        order
            .chunks(self.flow.batch_size)
            .map(|chunk| {
                let (x0, x1) = couple_independent(states.select(Axis(0), chunk), rng);
                let conditions = chunk.iter().map(|&k| ds.conditions()[train[k]].clone()).collect();
                MicroBatch { x0, x1, conditions }
            })
            .collect()
    }

    /// One coupled set of pairs per perturbed train condition, visited in
    /// shuffled order, with controls of the same covariate as the source.
    fn ot_epoch(
        &self,
        ds: &PerturbDataset,
        train: &[usize],
        states: &Array2<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<MicroBatch>> {
        let Coupling::Ot(ot) = &self.flow.coupling else {
            unreachable!("called for OT coupling only")
        };
        let mut groups: std::collections::BTreeMap<&Condition, Vec<usize>> = Default::default();
        for (k, &i) in train.iter().enumerate() {
            groups.entry(&ds.conditions()[i]).or_default().push(k);
        }
        let mut perturbed: Vec<&Condition> = groups.keys().copied().filter(|c| !c.is_control()).collect();
        perturbed.shuffle(rng);
        let mut out = Vec::new();
        for cond in perturbed {
            let ctrl = cond.control_of();
            let ctrl_rows = groups
                .get(&ctrl)
                .ok_or_else(|| Error::Data(format!("no train control cells for `{}`", cond.covariate())))?;
            let pairs = couple_ot(
                &states.select(Axis(0), ctrl_rows),
                &states.select(Axis(0), &groups[cond]),
                ot,
                rng,
            )?;
            let n = pairs.x0.nrows();
            let mut start = 0;
            while start < n {
                let len = self.flow.batch_size.min(n - start);
                let rows: Vec<usize> = (start..start + len).collect();
                out.push(MicroBatch {
                    x0: pairs.x0.select(Axis(0), &rows),
                    x1: pairs.x1.select(Axis(0), &rows),
                    conditions: vec![cond.clone(); len],
                });
                start += len;
            }
        }
        Ok(out)
    }

    /// Accumulates the averaged gradient over `group`, clips and updates.
    /// Any non-finite value is reported with the index of this step.
    fn step(&mut self, model: &mut FlowModel, group: &[MicroBatch], rng: &mut ChaCha8Rng) -> Result<()> {
        let step = self.losses.len();
        let total = self.accumulate(model, group, rng).map_err(|e| match e {
            Error::Core(inner @ numcore::Error::Evaluation(_)) => Error::Numerical {
                step,
                message: inner.to_string(),
            },
            Error::Numerical { message, .. } => Error::Numerical { step, message },
            other => other,
        })?;
        adam_step(&mut model.net.params, &mut self.adam, self.flow.learning_rate, self.flow.weight_decay)?;
        model.net.params.zero_grad();
        self.losses.push(total);
        Ok(())
    }

    fn accumulate(&self, model: &mut FlowModel, group: &[MicroBatch], rng: &mut ChaCha8Rng) -> Result<f64> {
        let weight = 1.0 / group.len() as f64;
        let use_dropout = model.net.arch.dropout() > 0.0;
        model.net.params.zero_grad();
        let mut total = 0.0;
        for mb in group {
            let n = mb.x1.nrows();
            let t: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let path = sample_path_point(mb.x0.clone(), mb.x1.clone(), t, self.flow.sigma, self.flow.interpolation, rng)?;
            let mut cond = Vec::with_capacity(n * model.conditions.dim());
            for c in &mb.conditions {
                let kept = dropout_condition(c, self.flow.p_uncond, rng)?;
                cond.extend(model.conditions.encode(kept.as_ref())?);
            }
            let mut g = Graph::new();
            let b = g.bind(&model.net.params)?;
            let loss = cfm_loss(&model.net, &mut g, &b, &path, &cond, use_dropout.then_some(&mut *rng))?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Numerical {
                    step: 0,
                    message: format!("training loss became {value}"),
                });
            }
            total += value * weight;
            let scaled = g.scale(loss, weight)?;
            let grads = g.backward(scaled)?;
            b.accumulate(&grads, &mut model.net.params)?;
        }
        for (_, p) in model.net.params.iter_mut() {
            if p.grad().is_none() {
                let zeros = vec![0.0; p.numel()];
                p.accumulate_grad(&zeros)?;
            }
        }
        let norm = clip_grad_norm(&mut model.net.params, self.flow.grad_clip_threshold)?;
        if !norm.is_finite() {
            return Err(Error::Numerical {
                step: 0,
                message: "gradient norm is not finite".into(),
            });
        }
        Ok(total)
    }
}

/// Builds a trainer from `cfg` and runs it with a fresh RNG from `seed`.
pub fn train(model: &mut FlowModel, ds: &PerturbDataset, cfg: &TrainConfig, seed: u64) -> Result<Trainer> {
    let mut trainer = Trainer::new(cfg.flow())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    trainer.train(model, ds, cfg.epochs, cfg.max_steps, &mut rng)?;
    Ok(trainer)
}
