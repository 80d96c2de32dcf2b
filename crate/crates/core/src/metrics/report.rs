use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{cosine, deg_recall, logfc, mmd_rbf_with, rank_metric, rmse_mean, Bandwidth};
use crate::data::{Condition, PerturbDataset, Split};
use crate::error::{Error, Result};
use crate::models::{pca_fit, PcaProjector};

/// Metric names and whether lower values are better.
pub const METRICS: [(&str, bool); 5] = [
    ("mmd_gex", true),
    ("mmd_pca", true),
    ("deg_recall", false),
    ("cosine_logfc", false),
    ("rmse_mean", true),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub k: usize,
    pub pcs: usize,
    pub bandwidth: Bandwidth,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k: 50,
            pcs: 30,
            bandwidth: Bandwidth::Median,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionMetrics {
    pub condition: String,
    /// Metric values, rank variants as `rank_<metric>`, and the bandwidths
    /// used as `bandwidth_gex` / `bandwidth_pca`.
    pub values: BTreeMap<String, f64>,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub k: usize,
    pub pcs: usize,
    /// `None` for the median heuristic.
    pub fixed_bandwidth: Option<f64>,
    /// Sorted by condition key.
    pub conditions: Vec<ConditionMetrics>,
}

impl MetricsReport {
    pub fn value(&self, condition: &Condition, metric: &str) -> Option<f64> {
        let key = condition.key();
        self.conditions
            .iter()
            .find(|c| c.condition == key)
            .and_then(|c| c.values.get(metric).copied())
    }

    /// Unweighted mean over the conditions that report `metric`.
    pub fn mean(&self, metric: &str) -> Option<f64> {
        let v: Vec<f64> = self.conditions.iter().filter_map(|c| c.values.get(metric).copied()).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn summary(&self) -> BTreeMap<String, f64> {
        let names: std::collections::BTreeSet<&String> = self.conditions.iter().flat_map(|c| c.values.keys()).collect();
        names.into_iter().filter_map(|n| self.mean(n).map(|v| (n.clone(), v))).collect()
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "method": self.method,
            "k": self.k,
            "pcs": self.pcs,
            "bandwidth": self.fixed_bandwidth.map_or(serde_json::json!("median"), |h| serde_json::json!(h)),
            "n_conditions": self.conditions.len(),
            "mean": self.summary(),
            "flags": self.conditions.iter()
                .filter(|c| !c.flags.is_empty())
                .map(|c| (c.condition.clone(), c.flags.clone()))
                .collect::<BTreeMap<_, _>>(),
        })
    }

    /// One row per condition and metric. Settings go in rows with condition
    /// `*`; flags use the metric name `flag`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "condition", "metric", "value"])?;
        let bw = self.fixed_bandwidth.map_or("median".to_string(), |h| h.to_string());
        for (name, value) in [("k", self.k.to_string()), ("pcs", self.pcs.to_string()), ("bandwidth", bw)] {
            w.write_record([self.method.as_str(), "*", name, &value])?;
        }
        for c in &self.conditions {
            for (name, v) in &c.values {
                w.write_record([self.method.as_str(), &c.condition, name, &v.to_string()])?;
            }
            for f in &c.flags {
                w.write_record([self.method.as_str(), &c.condition, "flag", f])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut method = None;
        let (mut k, mut pcs, mut fixed_bandwidth) = (None, None, None);
        let mut conditions: Vec<ConditionMetrics> = Vec::new();
        let bad = |m: String| Error::Evaluation(format!("malformed metrics CSV: {m}"));
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 4 {
                return Err(bad(format!("row with {} fields", rec.len())));
            }
            method.get_or_insert_with(|| rec[0].to_string());
            let (cond, metric, value) = (&rec[1], &rec[2], &rec[3]);
            if cond == "*" {
                match metric {
                    "k" => k = Some(value.parse().map_err(|_| bad(format!("k = {value}")))?),
                    "pcs" => pcs = Some(value.parse().map_err(|_| bad(format!("pcs = {value}")))?),
                    "bandwidth" if value == "median" => fixed_bandwidth = None,
                    "bandwidth" => fixed_bandwidth = Some(value.parse().map_err(|_| bad(format!("bandwidth = {value}")))?),
                    other => return Err(bad(format!("unknown setting `{other}`"))),
                }
                continue;
            }
            if conditions.last().is_none_or(|c| c.condition != cond) {
                conditions.push(ConditionMetrics {
                    condition: cond.to_string(),
                    values: BTreeMap::new(),
                    flags: Vec::new(),
                });
            }
            let entry = conditions.last_mut().expect("just pushed");
            if metric == "flag" {
                entry.flags.push(value.to_string());
            } else {
                let v: f64 = value.parse().map_err(|_| bad(format!("{metric} = {value}")))?;
                entry.values.insert(metric.to_string(), v);
            }
        }
        Ok(Self {
            method: method.ok_or_else(|| bad("no rows".into()))?,
            k: k.ok_or_else(|| bad("missing k".into()))?,
            pcs: pcs.ok_or_else(|| bad("missing pcs".into()))?,
            fixed_bandwidth,
            conditions,
        })
    }
}

fn reference_projector(truth: &PerturbDataset, pcs: usize) -> Result<(PcaProjector, bool)> {
    let test: Vec<usize> = (0..truth.n_cells()).filter(|&i| truth.splits()[i] == Split::Test).collect();
    let cells = truth.rows(&test);
    let q = pcs.min(cells.nrows().saturating_sub(1)).min(truth.n_genes());
    if q == 0 {
        return Err(Error::Evaluation("too few test cells for a PCA reference".into()));
    }
    Ok((pca_fit(&cells, q)?, q < pcs))
}

/// Scores every perturbed condition of `pred` against the test split of
/// `truth`. Rank variants compare against all test conditions that share
/// the covariate.
pub fn evaluate(pred: &PerturbDataset, truth: &PerturbDataset, opts: &EvalOptions, method: &str) -> Result<MetricsReport> {
    if pred.genes() != truth.genes() {
        return Err(Error::Data("generated and reference datasets have different genes".into()));
    }
    if opts.k == 0 || opts.pcs == 0 {
        return Err(Error::Config("k and pcs must be positive".into()));
    }
    let targets = truth.test_conditions();
    if targets.is_empty() {
        return Err(Error::Evaluation("reference dataset has no perturbed test conditions".into()));
    }
    let predicted: Vec<Condition> = pred.groups(None).into_keys().filter(|c| !c.is_control()).collect();
    let missing: Vec<String> = predicted.iter().filter(|c| !targets.contains(c)).map(|c| c.key()).collect();
    if !missing.is_empty() {
        return Err(Error::Evaluation(format!(
            "conditions absent from the reference test split: {}",
            missing.join(", ")
        )));
    }
    let (projector, pcs_clamped) = reference_projector(truth, opts.pcs)?;
    let true_cells: BTreeMap<&Condition, Array2<f64>> =
        targets.iter().map(|c| (c, truth.cells_of(c, Some(Split::Test)))).collect();
    let true_pca: BTreeMap<&Condition, Array2<f64>> = true_cells
        .iter()
        .map(|(c, x)| Ok((*c, projector.project_rows(x)?)))
        .collect::<Result<_>>()?;
    let mut controls: BTreeMap<&str, Array2<f64>> = BTreeMap::new();
    for c in &targets {
        if !controls.contains_key(c.covariate()) {
            controls.insert(c.covariate(), truth.controls_of(c.covariate())?);
        }
    }

    let mut out = Vec::new();
    for cond in &predicted {
        let x = pred.cells_of(cond, None);
        let x_pca = projector.project_rows(&x)?;
        let ctrl = &controls[cond.covariate()];
        let peers: Vec<&Condition> = targets.iter().filter(|c| c.covariate() == cond.covariate()).collect();
        let own = peers.iter().position(|c| *c == cond).expect("condition is a target");
        let pred_lfc = logfc(&x, ctrl)?;
        let mut rows: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        let mut flags = Vec::new();
        let mut bandwidths = (0.0, 0.0);
        for (j, peer) in peers.iter().enumerate() {
            let y = &true_cells[peer];
            let (gex, h_gex) = mmd_rbf_with(&x, y, opts.bandwidth)?;
            let (pca, h_pca) = mmd_rbf_with(&x_pca, &true_pca[peer], opts.bandwidth)?;
            let true_lfc = logfc(y, ctrl)?;
            if j == own {
                bandwidths = (h_gex.value, h_pca.value);
                if h_gex.fallback {
                    flags.push("bandwidth_fallback_gex".to_string());
                }
                if h_pca.fallback {
                    flags.push("bandwidth_fallback_pca".to_string());
                }
                if pred_lfc.iter().all(|v| *v == 0.0) || true_lfc.iter().all(|v| *v == 0.0) {
                    flags.push("zero_logfc".to_string());
                }
            }
            rows.entry("mmd_gex").or_default().push(gex);
            rows.entry("mmd_pca").or_default().push(pca);
            rows.entry("deg_recall").or_default().push(deg_recall(&x, y, ctrl, opts.k)?);
            rows.entry("cosine_logfc").or_default().push(cosine(&pred_lfc, &true_lfc));
            rows.entry("rmse_mean").or_default().push(rmse_mean(&x, y)?);
        }
        if opts.k > truth.n_genes() {
            flags.push("k_clamped".to_string());
        }
        if pcs_clamped {
            flags.push("pcs_clamped".to_string());
        }
        let mut values = BTreeMap::new();
        for (name, lower) in METRICS {
            let v = &rows[name];
            values.insert(name.to_string(), v[own]);
            if let Some(r) = rank_metric(v, own, lower) {
                values.insert(format!("rank_{name}"), r);
            }
        }
        values.insert("bandwidth_gex".into(), bandwidths.0);
        values.insert("bandwidth_pca".into(), bandwidths.1);
        values.insert("n_cells".into(), x.nrows() as f64);
        out.push(ConditionMetrics {
            condition: cond.key(),
            values,
            flags,
        });
    }
    Ok(MetricsReport {
        method: method.to_string(),
        k: opts.k.min(truth.n_genes()),
        pcs: projector.dim(),
        fixed_bandwidth: match opts.bandwidth {
            Bandwidth::Fixed(h) => Some(h),
            Bandwidth::Median => None,
        },
        conditions: out,
    })
}

/// First two PCs (fit on the reference test split) of the reference test
/// cells, the controls and every named sample set, as CSV.
pub fn pca_scatter_csv(truth: &PerturbDataset, samples: &[(&str, &PerturbDataset)]) -> Result<String> {
    let (projector, _) = reference_projector(truth, 2)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["source", "condition", "pc1", "pc2"])?;
    let mut emit = |source: &str, ds: &PerturbDataset, split: Option<Split>, controls: bool| -> Result<()> {
        for (c, idx) in ds.groups(split) {
            if c.is_control() != controls {
                continue;
            }
            let z = projector.project_rows(&ds.rows(&idx))?;
            for row in z.rows() {
                let pc2 = if row.len() > 1 { row[1] } else { 0.0 };
                w.write_record([source, &c.key(), &row[0].to_string(), &pc2.to_string()])?;
            }
        }
        Ok(())
    };
    emit("truth", truth, Some(Split::Test), false)?;
    emit("control", truth, None, true)?;
    for (name, ds) in samples {
        if ds.genes() != truth.genes() {
            return Err(Error::Data(format!("sample set `{name}` has different genes")));
        }
        emit(name, ds, None, false)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
