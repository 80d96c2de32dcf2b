//! Perturb-seq shaped datasets: cells × genes in log1p space, one
//! [`Condition`] label and one [`Split`] label per cell.

mod io;
mod split;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_dataset, save_dataset, write_pseudobulk_csv, CELLS_FILE, META_FILE};
pub use split::{split_combo, split_covariate_transfer, split_with, SplitOptions, SplitTask};
pub use synth::{synth_generate, synth_generate_with_truth, SplitSpec, SynthConfig, SynthRunConfig, SynthTruth};

const RESERVED: [char; 2] = ['+', '|'];

/// A set of perturbations applied in one covariate context. The empty set
/// is a control.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Condition {
    perturbations: Vec<String>,
    covariate: String,
}

impl Condition {
    pub fn new<I, S>(perturbations: I, covariate: impl Into<String>) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut perts: Vec<String> = perturbations.into_iter().map(Into::into).collect();
        perts.sort();
        if let Some(w) = perts.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Data(format!("perturbation `{}` listed twice", w[0])));
        }
        let covariate = covariate.into();
        for id in perts.iter().chain(std::iter::once(&covariate)) {
            if id.is_empty() || id.contains(RESERVED) {
                return Err(Error::Data(format!("invalid identifier `{id}`")));
            }
        }
        Ok(Self {
            perturbations: perts,
            covariate,
        })
    }

    pub fn control(covariate: impl Into<String>) -> Result<Self> {
        Self::new(Vec::<String>::new(), covariate)
    }

    pub fn perturbations(&self) -> &[String] {
        &self.perturbations
    }

    pub fn covariate(&self) -> &str {
        &self.covariate
    }

    pub fn n_perturbations(&self) -> usize {
        self.perturbations.len()
    }

    pub fn is_control(&self) -> bool {
        self.perturbations.is_empty()
    }

    pub fn control_of(&self) -> Condition {
        Condition {
            perturbations: vec![],
            covariate: self.covariate.clone(),
        }
    }

    /// `A+B|cov`, or `ctrl|cov` for controls.
    pub fn key(&self) -> String {
        self.to_string()
    }

    pub fn from_key(key: &str) -> Result<Self> {
        let (perts, cov) = key
            .rsplit_once('|')
            .ok_or_else(|| Error::Data(format!("malformed condition key `{key}`")))?;
        if perts == "ctrl" {
            Self::control(cov)
        } else {
            Self::new(perts.split('+'), cov)
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.perturbations.is_empty() {
            write!(f, "ctrl|{}", self.covariate)
        } else {
            write!(f, "{}|{}", self.perturbations.join("+"), self.covariate)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// How the expression values were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Normalization {
    /// Counts scaled to `target_sum` per cell, then `ln(1 + x)`.
    Log1p { target_sum: f64 },
    /// Synthetic cells generated directly in log1p space.
    SyntheticLog1p,
    /// Model samples; values may be slightly negative.
    Generated { source: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbDataset {
    genes: Vec<String>,
    perturbations: Vec<String>,
    covariates: Vec<String>,
    cells: Array2<f64>,
    conditions: Vec<Condition>,
    split: Vec<Split>,
    normalization: Normalization,
}

impl PerturbDataset {
    /// Builds a dataset, deriving the perturbation and covariate vocabularies
    /// from the condition labels.
    pub fn new(
        genes: Vec<String>,
        cells: Array2<f64>,
        conditions: Vec<Condition>,
        split: Vec<Split>,
        normalization: Normalization,
    ) -> Result<Self> {
        let perts: BTreeSet<&String> = conditions.iter().flat_map(|c| &c.perturbations).collect();
        let covs: BTreeSet<&String> = conditions.iter().map(|c| &c.covariate).collect();
        let perturbations = perts.into_iter().cloned().collect();
        let covariates = covs.into_iter().cloned().collect();
        Self::with_vocabulary(genes, perturbations, covariates, cells, conditions, split, normalization)
    }

    /// Builds a dataset over explicit vocabularies (which may list
    /// identifiers no cell carries).
    pub fn with_vocabulary(
        genes: Vec<String>,
        perturbations: Vec<String>,
        covariates: Vec<String>,
        cells: Array2<f64>,
        conditions: Vec<Condition>,
        split: Vec<Split>,
        normalization: Normalization,
    ) -> Result<Self> {
        let ds = Self {
            genes,
            perturbations,
            covariates,
            cells,
            conditions,
            split,
            normalization,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let (n, m) = self.cells.dim();
        if m != self.genes.len() {
            return Err(Error::Dimension(format!(
                "{} genes but {m} expression columns",
                self.genes.len()
            )));
        }
        if self.conditions.len() != n || self.split.len() != n {
            return Err(Error::Dimension(format!(
                "{n} cells but {} condition labels and {} split labels",
                self.conditions.len(),
                self.split.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.genes.iter().find(|g| !seen.insert(*g)) {
            return Err(Error::Data(format!("gene `{dup}` appears twice")));
        }
        let perts: HashSet<&String> = self.perturbations.iter().collect();
        let covs: HashSet<&String> = self.covariates.iter().collect();
        for c in &self.conditions {
            if !covs.contains(&c.covariate) {
                return Err(Error::Vocabulary(format!("unknown covariate `{}`", c.covariate)));
            }
            if let Some(p) = c.perturbations.iter().find(|p| !perts.contains(p)) {
                return Err(Error::Vocabulary(format!("unknown perturbation `{p}`")));
            }
        }
        if let Some((idx, v)) = self.cells.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value {v} at flat index {idx}")));
        }
        if !matches!(self.normalization, Normalization::Generated { .. }) {
            if let Some((idx, v)) = self.cells.iter().enumerate().find(|(_, v)| **v < 0.0) {
                return Err(Error::Data(format!("negative expression {v} at flat index {idx}")));
            }
        }
        Ok(())
    }

    pub fn genes(&self) -> &[String] {
        &self.genes
    }

    pub fn perturbation_vocabulary(&self) -> &[String] {
        &self.perturbations
    }

    pub fn covariate_vocabulary(&self) -> &[String] {
        &self.covariates
    }

    pub fn cells(&self) -> &Array2<f64> {
        &self.cells
    }

    pub fn conditions(&self) -> &[Condition] {
        &self.conditions
    }

    pub fn splits(&self) -> &[Split] {
        &self.split
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn n_cells(&self) -> usize {
        self.cells.nrows()
    }

    pub fn n_genes(&self) -> usize {
        self.cells.ncols()
    }

    /// Same cells with new split labels.
    pub fn with_splits(&self, split: Vec<Split>) -> Result<Self> {
        let mut ds = self.clone();
        ds.split = split;
        ds.validate()?;
        Ok(ds)
    }

    /// Row indices per distinct condition, optionally restricted to one split.
    pub fn groups(&self, split: Option<Split>) -> BTreeMap<Condition, Vec<usize>> {
        let mut out: BTreeMap<Condition, Vec<usize>> = BTreeMap::new();
        for (i, c) in self.conditions.iter().enumerate() {
            if split.is_none_or(|s| s == self.split[i]) {
                out.entry(c.clone()).or_default().push(i);
            }
        }
        out
    }

    pub fn rows(&self, idx: &[usize]) -> Array2<f64> {
        self.cells.select(Axis(0), idx)
    }

    /// Cells of `condition` within `split` (all splits when `None`).
    pub fn cells_of(&self, condition: &Condition, split: Option<Split>) -> Array2<f64> {
        let idx: Vec<usize> = (0..self.n_cells())
            .filter(|&i| self.conditions[i] == *condition && split.is_none_or(|s| s == self.split[i]))
            .collect();
        self.rows(&idx)
    }

    /// Control cells of `covariate` across every split.
    pub fn controls_of(&self, covariate: &str) -> Result<Array2<f64>> {
        let ctrl = Condition::control(covariate)?;
        let cells = self.cells_of(&ctrl, None);
        if cells.nrows() == 0 {
            return Err(Error::Data(format!("no control cells for covariate `{covariate}`")));
        }
        Ok(cells)
    }

    /// Perturbed conditions of the test split, sorted.
    pub fn test_conditions(&self) -> Vec<Condition> {
        self.groups(Some(Split::Test))
            .into_keys()
            .filter(|c| !c.is_control())
            .collect()
    }
}

/// Per-condition mean expression.
#[derive(Debug, Clone, PartialEq)]
pub struct Pseudobulk {
    pub condition: Condition,
    pub mean_expression: Array1<f64>,
    pub cell_count: usize,
}

impl Pseudobulk {
    pub fn from_cells(condition: Condition, cells: &Array2<f64>) -> Result<Self> {
        if cells.nrows() == 0 {
            return Err(Error::Data(format!("no cells for condition {condition}")));
        }
        Ok(Self {
            condition,
            mean_expression: column_means(cells),
            cell_count: cells.nrows(),
        })
    }
}

pub(crate) fn column_means(cells: &Array2<f64>) -> Array1<f64> {
    let n = cells.nrows() as f64;
    let mut sums = Array1::zeros(cells.ncols());
    for row in cells.rows() {
        sums += &row;
    }
    sums / n
}

/// Scales each row to `target_sum` total, then applies `ln(1 + x)`.
pub fn log1p_normalize(counts: &Array2<f64>, target_sum: f64) -> Result<Array2<f64>> {
    if !(target_sum > 0.0) {
        return Err(Error::Config(format!("target_sum must be positive, got {target_sum}")));
    }
    let mut out = counts.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        if row.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::Data(format!("row {i} has negative or non-finite counts")));
        }
        let total: f64 = row.sum();
        if total <= 0.0 {
            return Err(Error::Data(format!("row {i} has zero total count")));
        }
        let scale = target_sum / total;
        row.mapv_inplace(|v| (v * scale).ln_1p());
    }
    Ok(out)
}

/// One pseudobulk per distinct condition in `split`, sorted by condition.
pub fn pseudobulk(ds: &PerturbDataset, split: Split) -> Result<Vec<Pseudobulk>> {
    let groups = ds.groups(Some(split));
    if groups.is_empty() {
        return Err(Error::Data(format!("split {split:?} is empty")));
    }
    groups
        .into_iter()
        .map(|(c, idx)| Pseudobulk::from_cells(c, &ds.rows(&idx)))
        .collect()
}

/// Difference of log1p-space means, perturbed minus control.
pub fn log_fold_change(perturbed: &Pseudobulk, control: &Pseudobulk) -> Result<Array1<f64>> {
    if perturbed.condition.covariate != control.condition.covariate {
        return Err(Error::Data(format!(
            "covariate mismatch: {} vs {}",
            perturbed.condition, control.condition
        )));
    }
    lfc(perturbed.mean_expression.view(), control.mean_expression.view())
}

pub(crate) fn lfc(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("{} vs {} genes", a.len(), b.len())));
    }
    Ok(&a - &b)
}
