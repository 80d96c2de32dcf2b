//! Synthetic perturb-seq generator.
//!
//! A cell of condition `(P, c)` is
//!
//! ```text
//! x = max(0, baseline_c + Σ_{p∈P} (effect_p + s_p·mode_p) + interaction_P + noise·ξ)
//! ```
//!
//! with `s_p = ±1` drawn with equal probability per cell, so every perturbed
//! condition is a two-component Gaussian mixture whose mean shift is exactly
//! `Σ effect_p (+ interaction_P)`. Values are produced directly in log1p space.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::split::{split_with, SplitOptions, SplitTask};
use super::{Condition, Normalization, PerturbDataset, Split};
use crate::error::{Error, Result};

fn default_baseline_mean() -> f64 {
    2.5
}
fn default_baseline_spread() -> f64 {
    0.5
}
fn default_covariate_effect() -> f64 {
    0.5
}
fn default_effect_scale() -> f64 {
    1.0
}
fn default_noise() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_genes: usize,
    pub covariates: Vec<String>,
    pub perturbations: Vec<String>,
    pub cells_per_condition: usize,
    #[serde(default)]
    pub control_cells_per_covariate: Option<usize>,
    /// Centre of the shared per-gene baseline.
    #[serde(default = "default_baseline_mean")]
    pub baseline_mean: f64,
    /// Half-width of the uniform spread of the shared baseline across genes.
    #[serde(default = "default_baseline_spread")]
    pub baseline_spread: f64,
    /// SD of the per-covariate deviation from the shared baseline.
    #[serde(default = "default_covariate_effect")]
    pub covariate_effect: f64,
    /// Explicit per-covariate baselines; overrides the random draw.
    #[serde(default)]
    pub baselines: Option<Vec<Vec<f64>>>,
    /// Genes touched by each random effect vector (default `n_genes / 3`).
    #[serde(default)]
    pub effect_genes: Option<usize>,
    #[serde(default = "default_effect_scale")]
    pub effect_scale: f64,
    /// Explicit per-perturbation effect vectors.
    #[serde(default)]
    pub effects: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_noise")]
    pub noise_sd: f64,
    /// Scale of the bimodal per-perturbation response; 0 gives unimodal
    /// conditions.
    #[serde(default)]
    pub heterogeneity: f64,
    /// Genes touched by each random mode vector (default `n_genes / 4`).
    #[serde(default)]
    pub mode_genes: Option<usize>,
    /// Explicit per-perturbation mode vectors.
    #[serde(default)]
    pub modes: Option<Vec<Vec<f64>>>,
    /// Perturbation pairs generated as dual conditions in every covariate.
    #[serde(default)]
    pub combos: Vec<(String, String)>,
    /// Scale of the random nonlinear interaction added to each dual.
    #[serde(default)]
    pub interaction_scale: f64,
    /// Perturbations present per covariate (default: all of them everywhere).
    #[serde(default)]
    pub covariate_perturbations: Option<BTreeMap<String, Vec<String>>>,
}

impl SynthConfig {
    /// Defaults for every optional field, 100 cells per condition.
    pub fn new(n_genes: usize, covariates: Vec<String>, perturbations: Vec<String>) -> Self {
        serde_json::from_value(serde_json::json!({
            "n_genes": n_genes,
            "covariates": covariates,
            "perturbations": perturbations,
            "cells_per_condition": 100,
        }))
        .expect("defaults are valid")
    }

    fn validate(&self) -> Result<()> {
        if self.n_genes == 0 {
            return Err(Error::Config("n_genes must be positive".into()));
        }
        if self.perturbations.is_empty() {
            return Err(Error::Config("perturbation list is empty".into()));
        }
        if self.covariates.is_empty() {
            return Err(Error::Config("covariate list is empty".into()));
        }
        if self.cells_per_condition == 0 {
            return Err(Error::Config("cells_per_condition must be positive".into()));
        }
        if self.noise_sd < 0.0 || self.heterogeneity < 0.0 {
            return Err(Error::Config("noise_sd and heterogeneity must be non-negative".into()));
        }
        let check = |name: &str, v: &Option<Vec<Vec<f64>>>, rows: usize| -> Result<()> {
            if let Some(v) = v {
                if v.len() != rows || v.iter().any(|r| r.len() != self.n_genes) {
                    return Err(Error::Config(format!(
                        "{name} must be {rows} vectors of length {}",
                        self.n_genes
                    )));
                }
            }
            Ok(())
        };
        check("baselines", &self.baselines, self.covariates.len())?;
        check("effects", &self.effects, self.perturbations.len())?;
        check("modes", &self.modes, self.perturbations.len())?;
        for (a, b) in &self.combos {
            if a == b || !self.perturbations.contains(a) || !self.perturbations.contains(b) {
                return Err(Error::Config(format!("invalid combination {a}+{b}")));
            }
        }
        if let Some(map) = &self.covariate_perturbations {
            for (cov, perts) in map {
                if !self.covariates.contains(cov) {
                    return Err(Error::Config(format!("unknown covariate `{cov}`")));
                }
                if let Some(p) = perts.iter().find(|p| !self.perturbations.contains(p)) {
                    return Err(Error::Config(format!("unknown perturbation `{p}`")));
                }
            }
        }
        Ok(())
    }

    pub fn gene_names(&self) -> Vec<String> {
        (0..self.n_genes).map(|j| format!("gene{j:03}")).collect()
    }
}

/// Parameters actually used by one generator run.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    pub baselines: Vec<Vec<f64>>,
    pub effects: Vec<Vec<f64>>,
    pub modes: Vec<Vec<f64>>,
    pub interactions: Vec<Vec<f64>>,
}

fn sparse_vector(rng: &mut ChaCha8Rng, m: usize, k: usize, scale: f64) -> Vec<f64> {
    let mut genes: Vec<usize> = (0..m).collect();
    genes.shuffle(rng);
    let mut v = vec![0.0; m];
    for &j in genes.iter().take(k.min(m)) {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        v[j] = sign * scale * rng.gen_range(0.5..1.5);
    }
    v
}

impl SynthConfig {
    /// Draws (or copies) every generator parameter.
    pub fn draw_truth(&self, rng: &mut ChaCha8Rng) -> SynthTruth {
        let m = self.n_genes;
        let baselines = self.baselines.clone().unwrap_or_else(|| {
            let shared: Vec<f64> = (0..m)
                .map(|_| self.baseline_mean + rng.gen_range(-1.0..=1.0) * self.baseline_spread)
                .collect();
            self.covariates
                .iter()
                .map(|_| {
                    shared
                        .iter()
                        .map(|b| b + self.covariate_effect * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect()
        });
        let k_eff = self.effect_genes.unwrap_or((m / 3).max(1));
        let effects = self.effects.clone().unwrap_or_else(|| {
            self.perturbations
                .iter()
                .map(|_| sparse_vector(rng, m, k_eff, self.effect_scale))
                .collect()
        });
        let k_mode = self.mode_genes.unwrap_or((m / 4).max(1));
        let modes = self.modes.clone().unwrap_or_else(|| {
            self.perturbations
                .iter()
                .map(|_| sparse_vector(rng, m, k_mode, self.heterogeneity))
                .collect()
        });
        let interactions = self
            .combos
            .iter()
            .map(|_| {
                (0..m)
                    .map(|_| self.interaction_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        SynthTruth {
            baselines,
            effects,
            modes,
            interactions,
        }
    }
}

/// Generator settings plus an optional split, as stored in a JSON config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRunConfig {
    pub generator: SynthConfig,
    #[serde(default)]
    pub split: Option<SplitSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub task: SplitTask,
    pub holdout_fraction: f64,
    #[serde(default)]
    pub val_fraction: f64,
    #[serde(default)]
    pub allow_empty: bool,
}

impl SynthRunConfig {
    /// Generates the dataset and applies the split, both keyed to `seed`.
    pub fn generate(&self, seed: u64) -> Result<PerturbDataset> {
        let ds = synth_generate(&self.generator, seed)?;
        match &self.split {
            Some(s) => split_with(
                &ds,
                s.task,
                &SplitOptions {
                    holdout_fraction: s.holdout_fraction,
                    val_fraction: s.val_fraction,
                    allow_empty: s.allow_empty,
                    seed,
                },
            ),
            None => Ok(ds),
        }
    }
}

/// Generates a dataset; every cell starts in the train split.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<PerturbDataset> {
    synth_generate_with_truth(cfg, seed).map(|(ds, _)| ds)
}

pub fn synth_generate_with_truth(cfg: &SynthConfig, seed: u64) -> Result<(PerturbDataset, SynthTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = cfg.draw_truth(&mut rng);
    let m = cfg.n_genes;
    let pert_index: BTreeMap<&str, usize> = cfg
        .perturbations
        .iter()
        .enumerate()
        .map(|(i, p)| (p.as_str(), i))
        .collect();

    let mut rows: Vec<f64> = Vec::new();
    let mut conditions = Vec::new();
    for (ci, cov) in cfg.covariates.iter().enumerate() {
        let present: Vec<&String> = match cfg.covariate_perturbations.as_ref().and_then(|m| m.get(cov)) {
            Some(list) => cfg.perturbations.iter().filter(|p| list.contains(p)).collect(),
            None => cfg.perturbations.iter().collect(),
        };
        let mut plan: Vec<(Condition, Vec<usize>, Option<usize>, usize)> = vec![(
            Condition::control(cov.as_str())?,
            vec![],
            None,
            cfg.control_cells_per_covariate.unwrap_or(cfg.cells_per_condition),
        )];
        for p in &present {
            plan.push((
                Condition::new([p.as_str()], cov.as_str())?,
                vec![pert_index[p.as_str()]],
                None,
                cfg.cells_per_condition,
            ));
        }
        for (k, (a, b)) in cfg.combos.iter().enumerate() {
            if present.contains(&a) && present.contains(&b) {
                plan.push((
                    Condition::new([a.as_str(), b.as_str()], cov.as_str())?,
                    vec![pert_index[a.as_str()], pert_index[b.as_str()]],
                    Some(k),
                    cfg.cells_per_condition,
                ));
            }
        }
        for (cond, perts, combo, n) in plan {
            let mut mean = truth.baselines[ci].clone();
            for &p in &perts {
                mean.iter_mut().zip(&truth.effects[p]).for_each(|(a, e)| *a += e);
            }
            if let Some(k) = combo {
                mean.iter_mut().zip(&truth.interactions[k]).for_each(|(a, e)| *a += e);
            }
            for _ in 0..n {
                let signs: Vec<f64> = perts
                    .iter()
                    .map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
                    .collect();
                for j in 0..m {
                    let mut v = mean[j];
                    for (&p, s) in perts.iter().zip(&signs) {
                        v += s * truth.modes[p][j];
                    }
                    v += cfg.noise_sd * rng.sample::<f64, _>(StandardNormal);
                    rows.push(v.max(0.0));
                }
                conditions.push(cond.clone());
            }
        }
    }
    let n = conditions.len();
    let cells = Array2::from_shape_vec((n, m), rows).map_err(|e| Error::Data(e.to_string()))?;
    let ds = PerturbDataset::with_vocabulary(
        cfg.gene_names(),
        cfg.perturbations.clone(),
        cfg.covariates.clone(),
        cells,
        conditions,
        vec![Split::Train; n],
        Normalization::SyntheticLog1p,
    )?;
    Ok((ds, truth))
}
