//! Parameter-resolving layer helpers shared by the velocity fields.
//!
//! Every architecture is written once as a forward pass over a [`Ctx`]. In
//! init mode the context creates each parameter on first use; in bound mode
//! it fetches the graph leaf of the same name and checks its shape.

use numcore::{linear, norm_groups, self_attention, AttentionWeights, Bindings, Graph, ParameterSet, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    /// `U(-1/√fan_in, 1/√fan_in)`
    FanIn(usize),
    Zeros,
    Ones,
}

enum Source<'a> {
    Bound(&'a Bindings),
    Create {
        params: &'a mut ParameterSet,
        rng: &'a mut ChaCha8Rng,
    },
}

pub(crate) struct Ctx<'a> {
    pub g: &'a mut Graph,
    source: Source<'a>,
    dropout: Option<(&'a mut ChaCha8Rng, f64)>,
}

impl<'a> Ctx<'a> {
    pub fn bound(g: &'a mut Graph, b: &'a Bindings, dropout: Option<(&'a mut ChaCha8Rng, f64)>) -> Self {
        Self {
            g,
            source: Source::Bound(b),
            dropout,
        }
    }

    pub fn create(g: &'a mut Graph, params: &'a mut ParameterSet, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            g,
            source: Source::Create { params, rng },
            dropout: None,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        match &mut self.source {
            Source::Bound(b) => {
                let v = b.get(name)?;
                if self.g.shape(v) != shape {
                    return Err(Error::Dimension(format!(
                        "parameter `{name}` has shape {:?}, architecture expects {shape:?}",
                        self.g.shape(v)
                    )));
                }
                Ok(v)
            }
            Source::Create { params, rng } => {
                if params.contains(name) {
                    return Err(Error::Config(format!("duplicate parameter `{name}`")));
                }
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::FanIn(fan_in) => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                    }
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                };
                let t = Tensor::new(shape.to_vec(), data)?;
                let v = self.g.tensor(&t)?;
                params.insert(name, t);
                Ok(v)
            }
        }
    }

    /// Parameter drawn from a caller-supplied generator at creation.
    pub fn param_with(&mut self, name: &str, shape: &[usize], f: impl FnOnce(&mut ChaCha8Rng) -> Tensor) -> Result<Var> {
        match &mut self.source {
            Source::Bound(_) => self.param(name, shape, Init::Zeros),
            Source::Create { params, rng } => {
                let t = f(rng);
                if t.shape() != shape {
                    return Err(Error::Dimension(format!("initializer for `{name}` gave {:?}", t.shape())));
                }
                let v = self.g.tensor(&t)?;
                params.insert(name, t);
                Ok(v)
            }
        }
    }

    pub fn linear(&mut self, name: &str, x: Var, d_in: usize, d_out: usize, zero: bool) -> Result<Var> {
        let init = if zero { Init::Zeros } else { Init::FanIn(d_in) };
        let w = self.param(&format!("{name}.w"), &[d_in, d_out], init)?;
        let b = self.param(&format!("{name}.b"), &[d_out], init)?;
        Ok(linear(self.g, x, w, Some(b))?)
    }

    /// `n ≥ 1` linear layers with SiLU between them (none after the last).
    pub fn trunk(&mut self, name: &str, x: Var, d_in: usize, d_out: usize, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::Config(format!("`{name}` needs at least one layer")));
        }
        let mut h = self.linear(&format!("{name}.0"), x, d_in, d_out, false)?;
        for i in 1..n {
            h = self.g.silu(h)?;
            h = self.linear(&format!("{name}.{i}"), h, d_out, d_out, false)?;
        }
        Ok(h)
    }

    /// Conv over `[B, C, L]` plus per-channel bias.
    pub fn conv(&mut self, name: &str, x: Var, c_in: usize, c_out: usize, k: usize, stride: usize, zero: bool) -> Result<Var> {
        let init = if zero { Init::Zeros } else { Init::FanIn(c_in * k) };
        let w = self.param(&format!("{name}.w"), &[c_out, c_in, k], init)?;
        let b = self.param(&format!("{name}.b"), &[c_out], init)?;
        let y = self.g.conv1d(x, w, stride, k / 2)?;
        Ok(self.g.add_axis(y, b, 1)?)
    }

    pub fn group_norm(&mut self, name: &str, x: Var, channels: usize) -> Result<Var> {
        let gamma = self.param(&format!("{name}.gamma"), &[channels], Init::Ones)?;
        let beta = self.param(&format!("{name}.beta"), &[channels], Init::Zeros)?;
        Ok(self.g.group_norm(x, gamma, beta, norm_groups(channels))?)
    }

    /// Residual self-attention over the length axis of `x[B, C, L]`.
    pub fn attention(&mut self, name: &str, x: Var, channels: usize, heads: usize) -> Result<Var> {
        let h = self.group_norm(&format!("{name}.norm"), x, channels)?;
        let h = self.g.permute(h, &[0, 2, 1])?;
        let w = AttentionWeights {
            w_qkv: self.param(&format!("{name}.qkv.w"), &[channels, 3 * channels], Init::FanIn(channels))?,
            b_qkv: self.param(&format!("{name}.qkv.b"), &[3 * channels], Init::FanIn(channels))?,
            w_out: self.param(&format!("{name}.out.w"), &[channels, channels], Init::FanIn(channels))?,
            b_out: self.param(&format!("{name}.out.b"), &[channels], Init::FanIn(channels))?,
        };
        let h = self_attention(self.g, h, heads, w)?;
        let h = self.g.permute(h, &[0, 2, 1])?;
        Ok(self.g.add(x, h)?)
    }

    /// Inverted dropout; identity outside training.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((rng, p)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let p = *p;
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask = (0..self.g.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        Ok(self.g.mask_mul(x, mask)?)
    }
}
