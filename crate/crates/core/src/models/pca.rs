use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Affine projection onto the top-`q` principal axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjector {
    pub mean: Array1<f64>,
    /// `q × m`, orthonormal rows.
    pub components: Array2<f64>,
    /// Variance along each kept axis.
    pub explained_variance: Array1<f64>,
    pub total_variance: f64,
}

pub fn pca_fit(cells: &Array2<f64>, q: usize) -> Result<PcaProjector> {
    let (n, m) = cells.dim();
    if n < 2 {
        return Err(Error::Config(format!("PCA needs at least 2 cells, got {n}")));
    }
    if q == 0 || q > n.min(m) {
        return Err(Error::Config(format!("PCA dimension {q} outside 1..={}", n.min(m))));
    }
    let mean = cells.mean_axis(Axis(0)).expect("n ≥ 2");
    let centered = cells - &mean;
    // Right singular vectors of the centered matrix are the eigenvectors of
    // its Gram matrix; nalgebra's SVD loses accuracy on rank-deficient input.
    let mat = DMatrix::from_fn(n, m, |i, j| centered[[i, j]]);
    let eig = (mat.transpose() * &mat).symmetric_eigen();
    let ev = eig.eigenvalues.map(|v| v.max(0.0));
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| ev[b].total_cmp(&ev[a]).then(a.cmp(&b)));

    let mut components = Array2::zeros((q, m));
    for (r, &k) in order.iter().take(q).enumerate() {
        let row: Vec<f64> = (0..m).map(|j| eig.eigenvectors[(j, k)]).collect();
        let pivot = row
            .iter()
            .enumerate()
            .fold(0, |best, (j, v)| if v.abs() > row[best].abs() { j } else { best });
        let sign = if row[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..m {
            components[[r, j]] = sign * row[j];
        }
    }
    let denom = (n - 1) as f64;
    let explained_variance = order.iter().take(q).map(|&k| ev[k] / denom).collect();
    let total_variance = centered.iter().map(|v| v * v).sum::<f64>() / denom;
    Ok(PcaProjector {
        mean,
        components,
        explained_variance,
        total_variance,
    })
}

impl PcaProjector {
    pub fn dim(&self) -> usize {
        self.components.nrows()
    }

    pub fn n_genes(&self) -> usize {
        self.components.ncols()
    }

    fn check(&self, got: usize, want: usize, what: &str) -> Result<()> {
        if got != want {
            return Err(Error::Dimension(format!("{what} has length {got}, projector expects {want}")));
        }
        Ok(())
    }

    pub fn project(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check(x.len(), self.n_genes(), "expression vector")?;
        Ok(self.components.dot(&(&x - &self.mean)))
    }

    pub fn reconstruct(&self, z: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check(z.len(), self.dim(), "latent vector")?;
        Ok(self.components.t().dot(&z) + &self.mean)
    }

    /// Row-wise [`PcaProjector::project`].
    pub fn project_rows(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(x.ncols(), self.n_genes(), "expression rows")?;
        Ok((x - &self.mean).dot(&self.components.t()))
    }

    pub fn reconstruct_rows(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(z.ncols(), self.dim(), "latent rows")?;
        Ok(z.dot(&self.components) + &self.mean)
    }
}

pub fn pca_project(p: &PcaProjector, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    p.project(x)
}

pub fn pca_reconstruct(p: &PcaProjector, z: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    p.reconstruct(z)
}
