use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Condition, Normalization, PerturbDataset, Split};
use crate::error::{Error, Result};

/// Mean-only reference: control pseudobulk of the target covariate plus the
/// sum of per-perturbation logFCs estimated from train singles.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearAdditive {
    control_means: BTreeMap<String, Array1<f64>>,
    effects: BTreeMap<String, Array1<f64>>,
    controls: BTreeMap<String, Array2<f64>>,
    genes: Vec<String>,
    perturbations: Vec<String>,
    covariates: Vec<String>,
}

impl LinearAdditive {
    pub fn fit(ds: &PerturbDataset) -> Result<Self> {
        let groups = ds.groups(Some(Split::Train));
        let mut controls = BTreeMap::new();
        let mut control_means = BTreeMap::new();
        for (c, idx) in &groups {
            if c.is_control() {
                let cells = ds.rows(idx);
                control_means.insert(c.covariate().to_string(), cells.mean_axis(Axis(0)).expect("non-empty group"));
                controls.insert(c.covariate().to_string(), cells);
            }
        }
        let mut sums: BTreeMap<String, (Array1<f64>, usize)> = BTreeMap::new();
        for (c, idx) in &groups {
            if c.n_perturbations() != 1 {
                continue;
            }
            let Some(ctrl) = control_means.get(c.covariate()) else {
                continue;
            };
            let lfc = ds.rows(idx).mean_axis(Axis(0)).expect("non-empty group") - ctrl;
            let entry = sums
                .entry(c.perturbations()[0].clone())
                .or_insert_with(|| (Array1::zeros(ds.n_genes()), 0));
            entry.0 += &lfc;
            entry.1 += 1;
        }
        let effects = sums.into_iter().map(|(p, (s, n))| (p, s / n as f64)).collect();
        Ok(Self {
            control_means,
            effects,
            controls,
            genes: ds.genes().to_vec(),
            perturbations: ds.perturbation_vocabulary().to_vec(),
            covariates: ds.covariate_vocabulary().to_vec(),
        })
    }

    /// Predicted logFC of `condition` against its covariate's controls.
    pub fn effect(&self, condition: &Condition) -> Result<Array1<f64>> {
        let mut out = Array1::zeros(self.genes.len());
        let missing: Vec<&str> = condition
            .perturbations()
            .iter()
            .filter(|p| !self.effects.contains_key(*p))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(Error::Coverage(format!(
                "perturbations without a train single: {}",
                missing.join(", ")
            )));
        }
        for p in condition.perturbations() {
            out += &self.effects[p];
        }
        Ok(out)
    }

    /// Predicted pseudobulk mean.
    pub fn predict(&self, condition: &Condition) -> Result<Array1<f64>> {
        let ctrl = self
            .control_means
            .get(condition.covariate())
            .ok_or_else(|| Error::Coverage(format!("no train controls for covariate `{}`", condition.covariate())))?;
        Ok(ctrl + &self.effect(condition)?)
    }

    /// `n` train control cells of the target covariate, drawn with
    /// replacement and shifted by the predicted logFC.
    pub fn sample(&self, condition: &Condition, n: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        let shift = self.effect(condition)?;
        let ctrl = self
            .controls
            .get(condition.covariate())
            .ok_or_else(|| Error::Coverage(format!("no train controls for covariate `{}`", condition.covariate())))?;
        let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..ctrl.nrows())).collect();
        Ok(ctrl.select(Axis(0), &idx) + &shift)
    }

    /// Resampled cells for every condition, packed like model samples.
    pub fn sample_dataset(&self, conditions: &[Condition], n: usize, seed: u64) -> Result<PerturbDataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cells = Array2::zeros((0, self.genes.len()));
        let mut labels = Vec::new();
        for c in conditions {
            let x = self.sample(c, n, &mut rng)?;
            cells.append(Axis(0), x.view()).map_err(|e| Error::Dimension(e.to_string()))?;
            labels.extend(std::iter::repeat_n(c.clone(), n));
        }
        let total = labels.len();
        PerturbDataset::with_vocabulary(
            self.genes.clone(),
            self.perturbations.clone(),
            self.covariates.clone(),
            cells,
            labels,
            vec![Split::Test; total],
            Normalization::Generated {
                source: "linear_additive".into(),
            },
        )
    }
}
