//! Source/target pairings: independent Gaussian noise or entropic OT between
//! control and perturbed cells.

use ndarray::{Array2, Axis};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::OtConfig;
use crate::error::{Error, Result};

/// `x1` is the data batch; `x0` is i.i.d. standard Gaussian of the same shape.
pub fn couple_independent(x1: Array2<f64>, rng: &mut ChaCha8Rng) -> (Array2<f64>, Array2<f64>) {
    let x0 = Array2::from_shape_simple_fn(x1.dim(), || rng.sample(StandardNormal));
    (x0, x1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornOutput {
    pub plan: Array2<f64>,
    pub iterations: usize,
    pub residual: f64,
}

impl SinkhornOutput {
    pub fn transport_cost(&self, cost: &Array2<f64>) -> f64 {
        (&self.plan * cost).sum()
    }
}

fn logsumexp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Log-domain entropic Sinkhorn with KL-relaxed marginals.
///
/// `tau_a`, `tau_b` ∈ (0, 1] are the marginal exponents; 1 enforces the
/// marginal exactly. Convergence is measured by the L1 marginal error in the
/// balanced case and by the largest potential update otherwise.
#[allow(clippy::too_many_arguments)]
pub fn sinkhorn(
    cost: &Array2<f64>,
    a: &[f64],
    b: &[f64],
    epsilon: f64,
    tau_a: f64,
    tau_b: f64,
    max_iter: usize,
    tol: f64,
) -> Result<SinkhornOutput> {
    let (n, m) = cost.dim();
    if a.len() != n || b.len() != m || n == 0 || m == 0 {
        return Err(Error::Dimension(format!(
            "cost {n}×{m} with marginals of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let log_a: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|v| v.ln()).collect();
    let balanced = tau_a == 1.0 && tau_b == 1.0;
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];

    let plan_of = |f: &[f64], g: &[f64]| {
        Array2::from_shape_fn((n, m), |(i, j)| (log_a[i] + log_b[j] + (f[i] + g[j] - cost[[i, j]]) / epsilon).exp())
    };

    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        let mut delta: f64 = 0.0;
        for i in 0..n {
            let lse = logsumexp((0..m).map(|j| log_b[j] + (g[j] - cost[[i, j]]) / epsilon));
            let new = -tau_a * epsilon * lse;
            delta = delta.max((new - f[i]).abs());
            f[i] = new;
        }
        for j in 0..m {
            let lse = logsumexp((0..n).map(|i| log_a[i] + (f[i] - cost[[i, j]]) / epsilon));
            let new = -tau_b * epsilon * lse;
            delta = delta.max((new - g[j]).abs());
            g[j] = new;
        }
        if !delta.is_finite() {
            return Err(Error::Numerical {
                step: it,
                message: "Sinkhorn potentials became non-finite".into(),
            });
        }
        if balanced {
            if it % 5 == 0 || it == max_iter {
                let plan = plan_of(&f, &g);
                residual = plan
                    .sum_axis(Axis(1))
                    .iter()
                    .zip(a)
                    .map(|(r, a)| (r - a).abs())
                    .sum();
                if residual < tol {
                    return Ok(SinkhornOutput { plan, iterations: it, residual });
                }
            }
        } else {
            residual = delta / epsilon;
            if residual < tol {
                return Ok(SinkhornOutput {
                    plan: plan_of(&f, &g),
                    iterations: it,
                    residual,
                });
            }
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual,
    })
}

/// Squared Euclidean distances between the rows of `x` and `y`.
pub fn sq_euclidean(x: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_fn((x.nrows(), y.nrows()), |(i, j)| {
        x.row(i).iter().zip(y.row(j)).map(|(a, b)| (a - b) * (a - b)).sum()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OtPairs {
    pub x0: Array2<f64>,
    pub x1: Array2<f64>,
    pub plan: Array2<f64>,
}

fn resample(x: &Array2<f64>, n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let idx: Vec<usize> = if x.nrows() >= n {
        sample(rng, x.nrows(), n).into_vec()
    } else {
        (0..n).map(|_| rng.gen_range(0..x.nrows())).collect()
    };
    x.select(Axis(0), &idx)
}

/// Draws `num_samples_per_condition` cells from each side, solves the OT
/// plan on mean-normalized squared Euclidean cost and samples that many pairs
/// `(i, j) ∝ π_ij`.
pub fn couple_ot(controls: &Array2<f64>, perturbed: &Array2<f64>, cfg: &OtConfig, rng: &mut ChaCha8Rng) -> Result<OtPairs> {
    if controls.nrows() == 0 || perturbed.nrows() == 0 {
        return Err(Error::Precondition("OT coupling needs non-empty control and perturbed sets".into()));
    }
    let n = cfg.num_samples_per_condition;
    let src = resample(controls, n, rng);
    let dst = resample(perturbed, n, rng);
    let mut cost = sq_euclidean(&src, &dst);
    let scale = cost.mean().unwrap_or(0.0);
    if scale > 0.0 {
        cost /= scale;
    }
    let w = vec![1.0 / n as f64; n];
    let sol = sinkhorn(&cost, &w, &w, cfg.epsilon, cfg.tau_a, cfg.tau_b, cfg.max_iter, cfg.tol)?;
    let dist = WeightedIndex::new(sol.plan.iter().copied())
        .map_err(|e| Error::Numerical { step: sol.iterations, message: format!("degenerate OT plan: {e}") })?;
    let (mut i0, mut i1) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let k = dist.sample(rng);
        i0.push(k / n);
        i1.push(k % n);
    }
    Ok(OtPairs {
        x0: src.select(Axis(0), &i0),
        x1: dst.select(Axis(0), &i1),
        plan: sol.plan,
    })
}
