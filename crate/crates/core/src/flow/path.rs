use std::f64::consts::FRAC_PI_2;

use ndarray::Array2;
use numcore::{Bindings, Graph, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::Interpolation;
use crate::error::{Error, Result};
use crate::models::VelocityNet;

/// Interpolation mean and its time derivative at `t`.
pub fn interpolate(x0: &[f64], x1: &[f64], t: f64, kind: Interpolation) -> Result<(Vec<f64>, Vec<f64>)> {
    if x0.len() != x1.len() {
        return Err(Error::Dimension(format!("x0 has {} entries, x1 has {}", x0.len(), x1.len())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Precondition(format!("t = {t} outside [0, 1]")));
    }
    Ok(match kind {
        Interpolation::Linear => (
            x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect(),
            x0.iter().zip(x1).map(|(a, b)| b - a).collect(),
        ),
        Interpolation::Trigonometric => {
            let (s, c) = (FRAC_PI_2 * t).sin_cos();
            (
                x0.iter().zip(x1).map(|(a, b)| c * a + s * b).collect(),
                x0.iter().zip(x1).map(|(a, b)| FRAC_PI_2 * (-s * a + c * b)).collect(),
            )
        }
    })
}

/// Batched points on the conditional path with their regression targets.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub x0: Array2<f64>,
    pub x1: Array2<f64>,
    pub t: Vec<f64>,
    pub x_t: Array2<f64>,
    pub target: Array2<f64>,
}

impl PathSample {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// `x_t = mean + σ·ξ`; no noise is drawn when `σ = 0`.
pub fn sample_path_point(
    x0: Array2<f64>,
    x1: Array2<f64>,
    t: Vec<f64>,
    sigma: f64,
    kind: Interpolation,
    rng: &mut ChaCha8Rng,
) -> Result<PathSample> {
    if x0.dim() != x1.dim() || x0.nrows() != t.len() {
        return Err(Error::Dimension(format!(
            "x0 {:?}, x1 {:?} and {} times do not line up",
            x0.dim(),
            x1.dim(),
            t.len()
        )));
    }
    let (n, m) = x0.dim();
    let mut x_t = Array2::zeros((n, m));
    let mut target = Array2::zeros((n, m));
    for i in 0..n {
        let (mean, u) = interpolate(
            x0.row(i).as_slice().expect("standard layout"),
            x1.row(i).as_slice().expect("standard layout"),
            t[i],
            kind,
        )?;
        for j in 0..m {
            x_t[[i, j]] = if sigma > 0.0 {
                mean[j] + sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                mean[j]
            };
            target[[i, j]] = u[j];
        }
    }
    Ok(PathSample { x0, x1, t, x_t, target })
}

/// Mean over batch and coordinates of `(v̂ − u)²`, as a graph node.
/// `cond` is the row-major `B × C` condition encoding.
pub fn cfm_loss(
    net: &VelocityNet,
    g: &mut Graph,
    b: &Bindings,
    batch: &PathSample,
    cond: &[f64],
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty training batch".into()));
    }
    let (n, m) = batch.x_t.dim();
    let x = g.constant(&[n, m], batch.x_t.iter().copied().collect())?;
    let c = g
        .constant(&[n, net.cond_dim()], cond.to_vec())
        .map_err(|e| Error::Dimension(e.to_string()))?;
    let t = g.constant(&[n], batch.t.clone())?;
    let v = net.forward(g, b, x, c, t, dropout)?;
    let u = g.constant(&[n, m], batch.target.iter().copied().collect())?;
    Ok(g.mse(v, u)?)
}
