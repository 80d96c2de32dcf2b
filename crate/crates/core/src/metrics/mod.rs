//! Distribution and pseudobulk metrics for generated cells.

mod baseline;
mod report;

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::models::PcaProjector;

pub use baseline::LinearAdditive;
pub use report::{evaluate, pca_scatter_csv, ConditionMetrics, EvalOptions, MetricsReport, METRICS};

/// Kernel width for the Gaussian kernel `exp(−‖a − b‖² / 2h²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance over both sets.
    Median,
}

/// Bandwidth that was actually used; `fallback` marks a degenerate median.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedBandwidth {
    pub value: f64,
    pub fallback: bool,
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of all pairwise Euclidean distances over `x ∪ y`, or 1.0 when
/// every point coincides.
pub fn median_bandwidth(x: &Array2<f64>, y: &Array2<f64>) -> ResolvedBandwidth {
    let all: Vec<_> = x.rows().into_iter().chain(y.rows()).collect();
    let mut d = Vec::with_capacity(all.len() * all.len().saturating_sub(1) / 2);
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            d.push(sq_dist(all[i], all[j]));
        }
    }
    if d.is_empty() {
        return ResolvedBandwidth { value: 1.0, fallback: true };
    }
    let mid = d.len() / 2;
    let (_, hi, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let hi = hi.sqrt();
    let h = if d.len() % 2 == 1 {
        hi
    } else {
        let lo = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max).sqrt();
        (lo + hi) / 2.0
    };
    if h > 0.0 && h.is_finite() {
        ResolvedBandwidth { value: h, fallback: false }
    } else {
        ResolvedBandwidth { value: 1.0, fallback: true }
    }
}

fn resolve(x: &Array2<f64>, y: &Array2<f64>, bw: Bandwidth) -> Result<ResolvedBandwidth> {
    match bw {
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => Ok(ResolvedBandwidth { value: h, fallback: false }),
        Bandwidth::Fixed(h) => Err(Error::Config(format!("bandwidth must be positive, got {h}"))),
        Bandwidth::Median => Ok(median_bandwidth(x, y)),
    }
}

fn mean_kernel(x: &Array2<f64>, y: &Array2<f64>, gamma: f64) -> f64 {
    let mut s = 0.0;
    for a in x.rows() {
        for b in y.rows() {
            s += (-gamma * sq_dist(a, b)).exp();
        }
    }
    s / (x.nrows() * y.nrows()) as f64
}

/// Biased MMD² estimate together with the bandwidth it used.
pub fn mmd_rbf_with(x: &Array2<f64>, y: &Array2<f64>, bw: Bandwidth) -> Result<(f64, ResolvedBandwidth)> {
    if x.nrows() == 0 || y.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::Precondition("MMD needs non-empty sets".into()));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::Dimension(format!("MMD sets have {} and {} columns", x.ncols(), y.ncols())));
    }
    let h = resolve(x, y, bw)?;
    let gamma = 1.0 / (2.0 * h.value * h.value);
    let v = mean_kernel(x, x, gamma) + mean_kernel(y, y, gamma) - 2.0 * mean_kernel(x, y, gamma);
    Ok((v.max(0.0), h))
}

/// Biased (V-statistic) MMD² with a Gaussian kernel.
pub fn mmd_rbf(x: &Array2<f64>, y: &Array2<f64>, bw: Bandwidth) -> Result<f64> {
    mmd_rbf_with(x, y, bw).map(|(v, _)| v)
}

/// [`mmd_rbf`] on PCA coordinates.
pub fn mmd_pca(x: &Array2<f64>, y: &Array2<f64>, projector: &PcaProjector, bw: Bandwidth) -> Result<f64> {
    mmd_rbf(&projector.project_rows(x)?, &projector.project_rows(y)?, bw)
}

fn pseudobulk_mean(cells: &Array2<f64>, what: &str) -> Result<Array1<f64>> {
    cells
        .mean_axis(Axis(0))
        .ok_or_else(|| Error::Precondition(format!("{what} cell set is empty")))
}

/// Pseudobulk logFC of `cells` against `control` (log1p space, so a difference).
pub fn logfc(cells: &Array2<f64>, control: &Array2<f64>) -> Result<Array1<f64>> {
    if cells.ncols() != control.ncols() {
        return Err(Error::Dimension(format!(
            "{} genes against {} control genes",
            cells.ncols(),
            control.ncols()
        )));
    }
    Ok(pseudobulk_mean(cells, "perturbed")? - pseudobulk_mean(control, "control")?)
}

/// Indices of the `k` largest `|logFC|`, largest first (ties by index).
/// `k` is clamped to the gene count.
pub fn top_k_degs(logfc: &Array1<f64>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logfc.len()).collect();
    idx.sort_by(|&a, &b| logfc[b].abs().total_cmp(&logfc[a].abs()).then(a.cmp(&b)));
    idx.truncate(k.min(logfc.len()));
    idx
}

/// Share of the true top-`k` DEGs that appear among the predicted top-`k`.
pub fn deg_recall(pred: &Array2<f64>, truth: &Array2<f64>, control: &Array2<f64>, k: usize) -> Result<f64> {
    if pred.ncols() != truth.ncols() {
        return Err(Error::Dimension("predicted and true cells differ in gene count".into()));
    }
    if k == 0 {
        return Err(Error::Config("DEG count must be positive".into()));
    }
    let want = top_k_degs(&logfc(truth, control)?, k);
    let got = top_k_degs(&logfc(pred, control)?, k);
    let hits = want.iter().filter(|g| got.contains(g)).count();
    Ok(hits as f64 / want.len() as f64)
}

/// Cosine of two vectors; 0 when either is zero.
pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.dot(b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine similarity between predicted and true logFC against `control`.
pub fn cosine_logfc(pred: &Array2<f64>, truth: &Array2<f64>, control: &Array2<f64>) -> Result<f64> {
    Ok(cosine(&logfc(pred, control)?, &logfc(truth, control)?))
}

/// RMSE between pseudobulk means.
pub fn rmse_mean(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<f64> {
    if pred.ncols() != truth.ncols() {
        return Err(Error::Dimension("predicted and true cells differ in gene count".into()));
    }
    let d = pseudobulk_mean(pred, "predicted")? - pseudobulk_mean(truth, "true")?;
    Ok((d.mapv(|v| v * v).sum() / d.len() as f64).sqrt())
}

/// Fraction of wrong targets that score better than the right one, ties
/// counted ½. `values[j]` is `metric(pred_i, true_j)`; `None` when fewer than
/// two targets exist.
pub fn rank_metric(values: &[f64], own: usize, lower_is_better: bool) -> Option<f64> {
    if values.len() < 2 || own >= values.len() {
        return None;
    }
    let v = values[own];
    let better: f64 = values
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != own)
        .map(|(_, &x)| {
            if x == v {
                0.5
            } else if (x < v) == lower_is_better {
                1.0
            } else {
                0.0
            }
        })
        .sum();
    Some(better / (values.len() - 1) as f64)
}
