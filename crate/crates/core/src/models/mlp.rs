use numcore::Var;
use serde::{Deserialize, Serialize};

use super::layers::Ctx;
use crate::encoding::SinusoidalEncoder;
use crate::error::{Error, Result};

fn two() -> usize {
    2
}
fn default_time_dim() -> usize {
    32
}

/// Three input trunks (state, condition, time) summed, then a decoder whose
/// last layer starts at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden_dim: usize,
    #[serde(default = "two")]
    pub n_layers_gene_expression: usize,
    #[serde(default = "two")]
    pub n_layers_conditions: usize,
    #[serde(default = "two")]
    pub n_layers_time: usize,
    #[serde(default = "two")]
    pub n_layers_decoding: usize,
    #[serde(default)]
    pub dropout: f64,
    /// Width of the sinusoidal time encoding.
    #[serde(default = "default_time_dim")]
    pub time_encoding_dim: usize,
}

impl MlpConfig {
    pub fn new(hidden_dim: usize) -> Self {
        Self {
            hidden_dim,
            n_layers_gene_expression: 2,
            n_layers_conditions: 2,
            n_layers_time: 2,
            n_layers_decoding: 2,
            dropout: 0.0,
            time_encoding_dim: default_time_dim(),
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        SinusoidalEncoder::new(self.time_encoding_dim, crate::encoding::DEFAULT_MAX_PERIOD)?;
        Ok(())
    }
}

/// `x[B, D]`, `c[B, C]`, `t[B]` → `[B, D]`.
pub(crate) fn forward(cfg: &MlpConfig, ctx: &mut Ctx<'_>, x: Var, c: Var, t: Var, out_dim: usize, cond_dim: usize) -> Result<Var> {
    let h = cfg.hidden_dim;
    let enc_t = SinusoidalEncoder::new(cfg.time_encoding_dim, crate::encoding::DEFAULT_MAX_PERIOD)?;
    let tf = enc_t.apply(ctx.g, t)?;
    let hx = ctx.trunk("mlp.state", x, out_dim, h, cfg.n_layers_gene_expression)?;
    let hc = ctx.trunk("mlp.cond", c, cond_dim, h, cfg.n_layers_conditions)?;
    let ht = ctx.trunk("mlp.time", tf, cfg.time_encoding_dim, h, cfg.n_layers_time)?;
    let sum = ctx.g.add(hx, hc)?;
    let mut z = ctx.g.add(sum, ht)?;
    for i in 0..cfg.n_layers_decoding {
        z = ctx.g.silu(z)?;
        z = ctx.dropout(z)?;
        z = ctx.linear(&format!("mlp.dec.{i}"), z, h, h, false)?;
    }
    z = ctx.g.silu(z)?;
    ctx.linear("mlp.out", z, h, out_dim, true)
}
