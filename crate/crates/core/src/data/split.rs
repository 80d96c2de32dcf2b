use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Condition, PerturbDataset, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTask {
    CovariateTransfer,
    Combo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitOptions {
    pub holdout_fraction: f64,
    /// Share of the held-out conditions routed to val; the rest go to test.
    #[serde(default)]
    pub val_fraction: f64,
    /// Combo task only: a dataset without duals yields an empty holdout
    /// instead of an error.
    #[serde(default)]
    pub allow_empty: bool,
    pub seed: u64,
}

impl SplitOptions {
    pub fn new(holdout_fraction: f64, seed: u64) -> Self {
        Self {
            holdout_fraction,
            val_fraction: 0.0,
            allow_empty: false,
            seed,
        }
    }
}

pub fn split_covariate_transfer(ds: &PerturbDataset, holdout_fraction: f64, seed: u64) -> Result<PerturbDataset> {
    split_with(ds, SplitTask::CovariateTransfer, &SplitOptions::new(holdout_fraction, seed))
}

pub fn split_combo(ds: &PerturbDataset, holdout_fraction: f64, seed: u64) -> Result<PerturbDataset> {
    split_with(ds, SplitTask::Combo, &SplitOptions::new(holdout_fraction, seed))
}

pub fn split_with(ds: &PerturbDataset, task: SplitTask, opts: &SplitOptions) -> Result<PerturbDataset> {
    if !(0.0..=1.0).contains(&opts.val_fraction) {
        return Err(Error::Config(format!("val_fraction {} outside [0, 1]", opts.val_fraction)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let held = match task {
        SplitTask::CovariateTransfer => covariate_transfer_holdout(ds, opts.holdout_fraction, &mut rng)?,
        SplitTask::Combo => combo_holdout(ds, opts.holdout_fraction, opts.allow_empty, &mut rng)?,
    };

    let mut held: Vec<Condition> = held.into_iter().collect();
    held.shuffle(&mut rng);
    let n_val = (opts.val_fraction * held.len() as f64).round() as usize;
    let assign: BTreeMap<&Condition, Split> = held
        .iter()
        .enumerate()
        .map(|(i, c)| (c, if i < n_val { Split::Val } else { Split::Test }))
        .collect();
    let split = ds
        .conditions()
        .iter()
        .map(|c| assign.get(c).copied().unwrap_or(Split::Train))
        .collect();
    ds.with_splits(split)
}

/// Perturbation sets present per covariate, over single-perturbation
/// conditions.
fn singles_by_covariate(ds: &PerturbDataset) -> BTreeMap<String, Vec<String>> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for c in ds.groups(None).into_keys() {
        if c.n_perturbations() == 1 {
            out.entry(c.covariate().to_string())
                .or_default()
                .push(c.perturbations()[0].clone());
        }
    }
    out
}

fn covariate_transfer_holdout(
    ds: &PerturbDataset,
    frac: f64,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeSet<Condition>> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::Config(format!("holdout_fraction {frac} must lie in (0, 1)")));
    }
    let by_cov = singles_by_covariate(ds);
    if ds.covariate_vocabulary().len() < 2 || by_cov.len() < 2 {
        return Err(Error::Split("covariate transfer needs at least two covariates".into()));
    }

    let mut covs: Vec<&String> = by_cov.keys().collect();
    covs.shuffle(rng);
    let mut queues: BTreeMap<&String, Vec<String>> = BTreeMap::new();
    let mut targets: BTreeMap<&String, usize> = BTreeMap::new();
    for &cov in &covs {
        let mut q = by_cov[cov].clone();
        q.shuffle(rng);
        targets.insert(cov, (frac * q.len() as f64).round() as usize);
        queues.insert(cov, q);
    }

    // (covariate, perturbation) pairs still in train
    let mut in_train: BTreeSet<(String, String)> = by_cov
        .iter()
        .flat_map(|(c, ps)| ps.iter().map(move |p| (c.clone(), p.clone())))
        .collect();
    let mut held: BTreeMap<&String, Vec<String>> = BTreeMap::new();

    // Round-robin so no covariate exhausts the shared train coverage first.
    loop {
        let mut progressed = false;
        for &cov in &covs {
            if held.get(cov).map_or(0, Vec::len) >= targets[cov] {
                continue;
            }
            let q = queues.get_mut(cov).unwrap();
            let pos = q.iter().position(|p| {
                in_train
                    .iter()
                    .any(|(c, pp)| c != cov && pp == p)
            });
            if let Some(pos) = pos {
                let p = q.remove(pos);
                in_train.remove(&(cov.clone(), p.clone()));
                held.entry(cov).or_default().push(p);
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }

    for &cov in &covs {
        let got = held.get(cov).map_or(0, Vec::len);
        if got < targets[cov] {
            let stuck = &queues[cov];
            return Err(Error::Split(format!(
                "covariate `{cov}` can hold out only {got} of {} perturbations; \
                 not observed in train under another covariate: {}",
                targets[cov],
                stuck.join(", ")
            )));
        }
    }

    held.into_iter()
        .flat_map(|(cov, ps)| ps.into_iter().map(move |p| Condition::new([p], cov.as_str())))
        .collect()
}

fn combo_holdout(
    ds: &PerturbDataset,
    frac: f64,
    allow_empty: bool,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeSet<Condition>> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::Config(format!("holdout_fraction {frac} must lie in (0, 1]")));
    }
    let groups = ds.groups(None);
    let mut duals: Vec<&Condition> = groups.keys().filter(|c| c.n_perturbations() == 2).collect();
    if duals.is_empty() {
        return if allow_empty {
            Ok(BTreeSet::new())
        } else {
            Err(Error::Split("dataset has no dual-perturbation conditions".into()))
        };
    }
    let mut missing = BTreeSet::new();
    for d in &duals {
        for p in d.perturbations() {
            let single = Condition::new([p.as_str()], d.covariate())?;
            if !groups.contains_key(&single) {
                missing.insert(format!("{single}"));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Split(format!(
            "singles missing for dual conditions: {}",
            missing.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    duals.shuffle(rng);
    let k = (frac * duals.len() as f64).round() as usize;
    Ok(duals.into_iter().take(k).cloned().collect())
}
