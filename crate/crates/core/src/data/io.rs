use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use numcore::checkpoint::{decode_f64, encode_f64, write_atomic};
use serde::{Deserialize, Serialize};

use super::{Condition, Normalization, PerturbDataset, Pseudobulk, Split};
use crate::error::{Error, Result};

pub const META_FILE: &str = "meta.json";
pub const CELLS_FILE: &str = "cells.f64";

#[derive(Debug, Serialize, Deserialize)]
struct ConditionRecord {
    perturbations: Vec<u32>,
    covariate: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    n_cells: usize,
    n_genes: usize,
    genes: Vec<String>,
    perturbations: Vec<String>,
    covariates: Vec<String>,
    condition_table: Vec<ConditionRecord>,
    cell_conditions: Vec<u32>,
    split: Vec<Split>,
    normalization: Normalization,
}

/// Writes `meta.json` and `cells.f64` (little-endian row-major f64) into `dir`.
pub fn save_dataset(ds: &PerturbDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let pert_idx: BTreeMap<&str, u32> = ds
        .perturbations
        .iter()
        .enumerate()
        .map(|(i, p)| (p.as_str(), i as u32))
        .collect();
    let cov_idx: BTreeMap<&str, u32> = ds
        .covariates
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i as u32))
        .collect();

    let mut table: BTreeMap<&Condition, u32> = BTreeMap::new();
    for c in &ds.conditions {
        let next = table.len() as u32;
        table.entry(c).or_insert(next);
    }
    let mut condition_table: Vec<(u32, ConditionRecord)> = table
        .iter()
        .map(|(c, &i)| {
            (
                i,
                ConditionRecord {
                    perturbations: c.perturbations.iter().map(|p| pert_idx[p.as_str()]).collect(),
                    covariate: cov_idx[c.covariate.as_str()],
                },
            )
        })
        .collect();
    condition_table.sort_by_key(|(i, _)| *i);

    let meta = Meta {
        format_version: 1,
        n_cells: ds.n_cells(),
        n_genes: ds.n_genes(),
        genes: ds.genes.clone(),
        perturbations: ds.perturbations.clone(),
        covariates: ds.covariates.clone(),
        condition_table: condition_table.into_iter().map(|(_, r)| r).collect(),
        cell_conditions: ds.conditions.iter().map(|c| table[c]).collect(),
        split: ds.split.clone(),
        normalization: ds.normalization.clone(),
    };
    let data: Vec<f64> = ds.cells.iter().copied().collect();
    write_atomic(&dir.join(CELLS_FILE), &encode_f64(&data)).map_err(core_io)?;
    write_atomic(&dir.join(META_FILE), serde_json::to_string(&meta)?.as_bytes()).map_err(core_io)?;
    Ok(())
}

fn core_io(e: numcore::Error) -> Error {
    match e {
        numcore::Error::Io(io) => Error::Io(io),
        other => Error::Core(other),
    }
}

pub fn load_dataset(dir: &Path) -> Result<PerturbDataset> {
    let meta: Meta = serde_json::from_slice(&fs::read(dir.join(META_FILE))?)?;
    let bytes = fs::read(dir.join(CELLS_FILE))?;
    let values = decode_f64(&bytes).map_err(core_io)?;
    if values.len() != meta.n_cells * meta.n_genes {
        return Err(Error::Data(format!(
            "{} holds {} values, expected {}×{}",
            CELLS_FILE,
            values.len(),
            meta.n_cells,
            meta.n_genes
        )));
    }
    let cells = Array2::from_shape_vec((meta.n_cells, meta.n_genes), values)
        .map_err(|e| Error::Data(e.to_string()))?;
    let table: Vec<Condition> = meta
        .condition_table
        .iter()
        .map(|r| {
            let perts = r
                .perturbations
                .iter()
                .map(|&i| {
                    meta.perturbations
                        .get(i as usize)
                        .cloned()
                        .ok_or_else(|| Error::Vocabulary(format!("perturbation index {i}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let cov = meta
                .covariates
                .get(r.covariate as usize)
                .cloned()
                .ok_or_else(|| Error::Vocabulary(format!("covariate index {}", r.covariate)))?;
            Condition::new(perts, cov)
        })
        .collect::<Result<_>>()?;
    let conditions = meta
        .cell_conditions
        .iter()
        .map(|&i| {
            table
                .get(i as usize)
                .cloned()
                .ok_or_else(|| Error::Data(format!("condition index {i} out of range")))
        })
        .collect::<Result<Vec<_>>>()?;
    PerturbDataset::with_vocabulary(
        meta.genes,
        meta.perturbations,
        meta.covariates,
        cells,
        conditions,
        meta.split,
        meta.normalization,
    )
}

/// One row per pseudobulk: condition key, covariate, cell count, then one
/// column per gene.
pub fn write_pseudobulk_csv(path: &Path, genes: &[String], rows: &[Pseudobulk]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["condition".to_string(), "covariate".into(), "cell_count".into()];
    header.extend(genes.iter().cloned());
    w.write_record(&header)?;
    for pb in rows {
        let mut rec = vec![
            pb.condition.key(),
            pb.condition.covariate().to_string(),
            pb.cell_count.to_string(),
        ];
        rec.extend(pb.mean_expression.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
