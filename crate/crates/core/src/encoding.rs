//! Input encodings: sinusoidal features, gene embeddings, condition vectors.

use ndarray::Array2;
use numcore::{sinusoidal_frequencies, Graph, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Condition;
use crate::error::{Error, Result};

pub const DEFAULT_MAX_PERIOD: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinusoidalEncoder {
    dim: usize,
    max_period: f64,
}

impl SinusoidalEncoder {
    pub fn new(dim: usize, max_period: f64) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(Error::Config(format!("sinusoidal dimension must be even and positive, got {dim}")));
        }
        if !(max_period > 0.0) {
            return Err(Error::Config(format!("max_period must be positive, got {max_period}")));
        }
        Ok(Self { dim, max_period })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_period(&self) -> f64 {
        self.max_period
    }

    /// Graph version: appends a feature axis of size `dim` to `x`.
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(g.sinusoidal(x, self.dim, self.max_period)?)
    }
}

pub fn encode_scalar(value: f64, enc: &SinusoidalEncoder) -> Vec<f64> {
    let freqs = sinusoidal_frequencies(enc.dim, enc.max_period);
    let mut out: Vec<f64> = freqs.iter().map(|w| (value * w).sin()).collect();
    out.extend(freqs.iter().map(|w| (value * w).cos()));
    out
}

/// One learnable `d`-vector per gene, stored as the `[m, d]` parameter
/// [`GeneEmbeddingTable::PARAM`].
#[derive(Debug, Clone, PartialEq)]
pub struct GeneEmbeddingTable {
    pub weights: Tensor,
}

impl GeneEmbeddingTable {
    pub const PARAM: &'static str = "gene_embedding";

    pub fn init<R: Rng>(n_genes: usize, dim: usize, rng: &mut R) -> Self {
        let data = (0..n_genes * dim).map(|_| rng.sample(StandardNormal)).collect();
        Self {
            weights: Tensor::new(vec![n_genes, dim], data).expect("shape matches data"),
        }
    }

    pub fn zeros(n_genes: usize, dim: usize) -> Self {
        Self {
            weights: Tensor::zeros(&[n_genes, dim]),
        }
    }

    pub fn n_genes(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// `Enc(x_t) + Emb`, shape `[m, d]`.
pub fn encode_state(x_t: &[f64], enc: &SinusoidalEncoder, emb: &GeneEmbeddingTable) -> Result<Array2<f64>> {
    if x_t.len() != emb.n_genes() || enc.dim() != emb.dim() {
        return Err(Error::Dimension(format!(
            "state of length {} with encoder dim {} against a {}×{} embedding table",
            x_t.len(),
            enc.dim(),
            emb.n_genes(),
            emb.dim()
        )));
    }
    let d = enc.dim();
    let w = emb.weights.data();
    let mut out = Array2::zeros((x_t.len(), d));
    for (j, &x) in x_t.iter().enumerate() {
        for (k, s) in encode_scalar(x, enc).into_iter().enumerate() {
            out[[j, k]] = s + w[j * d + k];
        }
    }
    Ok(out)
}

/// Graph version of [`encode_state`] for a batch `x[B, m]` and embedding
/// `[m, d]`; returns `[B, m, d]`.
pub fn encode_state_graph(g: &mut Graph, x: Var, emb: Var, enc: &SinusoidalEncoder) -> Result<Var> {
    let feats = enc.apply(g, x)?;
    Ok(g.add_suffix(feats, emb)?)
}

/// Multi-hot perturbations ‖ one-hot covariate ‖ null flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionEncoder {
    perturbations: Vec<String>,
    covariates: Vec<String>,
}

impl ConditionEncoder {
    pub fn new(perturbations: Vec<String>, covariates: Vec<String>) -> Self {
        Self {
            perturbations,
            covariates,
        }
    }

    pub fn dim(&self) -> usize {
        self.perturbations.len() + self.covariates.len() + 1
    }

    pub fn perturbations(&self) -> &[String] {
        &self.perturbations
    }

    pub fn covariates(&self) -> &[String] {
        &self.covariates
    }

    /// `None` encodes the null (unconditional) condition.
    pub fn encode(&self, c: Option<&Condition>) -> Result<Vec<f64>> {
        let p = self.perturbations.len();
        let mut out = vec![0.0; self.dim()];
        let Some(c) = c else {
            out[self.dim() - 1] = 1.0;
            return Ok(out);
        };
        for name in c.perturbations() {
            let i = self
                .perturbations
                .iter()
                .position(|s| s == name)
                .ok_or_else(|| Error::Vocabulary(format!("unknown perturbation `{name}`")))?;
            out[i] += 1.0;
        }
        let k = self
            .covariates
            .iter()
            .position(|s| s == c.covariate())
            .ok_or_else(|| Error::Vocabulary(format!("unknown covariate `{}`", c.covariate())))?;
        out[p + k] = 1.0;
        Ok(out)
    }

    /// Row-stacked encodings, `B × dim` flattened.
    pub fn encode_batch(&self, cs: &[Option<&Condition>]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(cs.len() * self.dim());
        for c in cs {
            out.extend(self.encode(*c)?);
        }
        Ok(out)
    }
}

pub fn encode_condition(c: Option<&Condition>, enc: &ConditionEncoder) -> Result<Vec<f64>> {
    enc.encode(c)
}

/// Classifier-free guidance dropout: `None` with probability `p_uncond`.
pub fn dropout_condition<R: Rng>(c: &Condition, p_uncond: f64, rng: &mut R) -> Result<Option<Condition>> {
    if !(0.0..=1.0).contains(&p_uncond) {
        return Err(Error::Config(format!("p_uncond {p_uncond} outside [0, 1]")));
    }
    Ok(if rng.gen::<f64>() < p_uncond { None } else { Some(c.clone()) })
}
