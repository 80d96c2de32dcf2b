//! 1-D U-Net over the gene axis, in the guided-diffusion layout: residual
//! blocks with group norm and SiLU, per-block embedding gain and offset, attention at
//! selected downsampling factors, concatenating skips.

use ndarray::{s, Array2};
use numcore::Var;
use serde::{Deserialize, Serialize};

use super::layers::Ctx;
use crate::encoding::{encode_state_graph, GeneEmbeddingTable, SinusoidalEncoder, DEFAULT_MAX_PERIOD};
use crate::error::{Error, Result};

fn two() -> usize {
    2
}
fn yes() -> bool {
    true
}
fn default_heads() -> usize {
    8
}
fn default_gene_dim() -> usize {
    16
}
fn default_time_dim() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnetConfig {
    /// Base channel count; must be a multiple of 8.
    pub hidden_dim: usize,
    pub channel_mult: Vec<usize>,
    #[serde(default = "two")]
    pub num_res_blocks: usize,
    /// Downsampling factors (1, 2, 4, …) at which attention is applied.
    #[serde(default)]
    pub attention_resolutions: Vec<usize>,
    #[serde(default = "default_heads")]
    pub num_heads: usize,
    #[serde(default = "yes")]
    pub conv_resample: bool,
    /// Apply the embedding as a gain and offset after the second norm
    /// instead of a plain offset.
    #[serde(default = "yes")]
    pub use_scale_shift_norm: bool,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "two")]
    pub n_layers_gene_expression: usize,
    #[serde(default = "two")]
    pub n_layers_conditions: usize,
    #[serde(default = "two")]
    pub n_layers_time: usize,
    /// Width of `Enc(x_t)` and of the gene embeddings.
    #[serde(default = "default_gene_dim")]
    pub gene_encoding_dim: usize,
    #[serde(default = "default_time_dim")]
    pub time_encoding_dim: usize,
}

impl UnetConfig {
    pub fn levels(&self) -> usize {
        self.channel_mult.len()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(8) {
            return Err(Error::Config(format!("hidden_dim {} must be a positive multiple of 8", self.hidden_dim)));
        }
        if self.channel_mult.is_empty() || self.channel_mult.contains(&0) {
            return Err(Error::Config("channel_mult must be non-empty and positive".into()));
        }
        if self.num_heads == 0 {
            return Err(Error::Config("num_heads must be positive".into()));
        }
        let mut ds = 1;
        for (level, &mult) in self.channel_mult.iter().enumerate() {
            let ch = mult * self.hidden_dim;
            let is_last = level + 1 == self.levels();
            if (self.attention_resolutions.contains(&ds) || is_last) && !ch.is_multiple_of(self.num_heads) {
                return Err(Error::Config(format!(
                    "{ch} channels at level {level} are not divisible by {} heads",
                    self.num_heads
                )));
            }
            ds *= 2;
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        SinusoidalEncoder::new(self.gene_encoding_dim, DEFAULT_MAX_PERIOD)?;
        SinusoidalEncoder::new(self.time_encoding_dim, DEFAULT_MAX_PERIOD)?;
        Ok(())
    }
}

/// Right-padding applied to the gene axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadRecord {
    pub original: usize,
    pub padded: usize,
}

pub fn padded_len(m: usize, levels: usize) -> usize {
    let unit = 1usize << levels.saturating_sub(1);
    m.div_ceil(unit) * unit
}

/// Zero-pads rows of `x[m, d]` up to a multiple of `2^(levels-1)`.
pub fn unet_pad(x: &Array2<f64>, levels: usize) -> (Array2<f64>, PadRecord) {
    let (m, d) = x.dim();
    let padded = padded_len(m, levels);
    let mut out = Array2::zeros((padded, d));
    out.slice_mut(s![..m, ..]).assign(x);
    (out, PadRecord { original: m, padded })
}

pub fn unet_unpad(x: &Array2<f64>, rec: PadRecord) -> Array2<f64> {
    x.slice(s![..rec.original, ..]).to_owned()
}

struct Block<'c, 'a> {
    ctx: &'c mut Ctx<'a>,
    emb: Var,
    emb_dim: usize,
    dropout: bool,
    scale_shift: bool,
}

impl Block<'_, '_> {
    fn res(&mut self, name: &str, x: Var, c_in: usize, c_out: usize) -> Result<Var> {
        let ctx = &mut *self.ctx;
        let h = ctx.group_norm(&format!("{name}.norm1"), x, c_in)?;
        let h = ctx.g.silu(h)?;
        let h = ctx.conv(&format!("{name}.conv1"), h, c_in, c_out, 3, 1, false)?;
        let e = ctx.g.silu(self.emb)?;
        let h = if self.scale_shift {
            let e = ctx.linear(&format!("{name}.emb"), e, self.emb_dim, 2 * c_out, false)?;
            let gain = ctx.g.narrow(e, 1, 0, c_out)?;
            let offset = ctx.g.narrow(e, 1, c_out, c_out)?;
            let h = ctx.group_norm(&format!("{name}.norm2"), h, c_out)?;
            let scaled = ctx.g.mul_prefix(h, gain)?;
            let h = ctx.g.add(h, scaled)?;
            ctx.g.add_prefix(h, offset)?
        } else {
            let e = ctx.linear(&format!("{name}.emb"), e, self.emb_dim, c_out, false)?;
            let h = ctx.g.add_prefix(h, e)?;
            ctx.group_norm(&format!("{name}.norm2"), h, c_out)?
        };
        let h = ctx.g.silu(h)?;
        let h = if self.dropout { ctx.dropout(h)? } else { h };
        let h = ctx.conv(&format!("{name}.conv2"), h, c_out, c_out, 3, 1, false)?;
        let skip = if c_in == c_out {
            x
        } else {
            ctx.conv(&format!("{name}.skip"), x, c_in, c_out, 1, 1, false)?
        };
        Ok(ctx.g.add(skip, h)?)
    }
}

/// `x[B, m]`, `c[B, C]`, `t[B]` → `[B, m]`.
pub(crate) fn forward(cfg: &UnetConfig, ctx: &mut Ctx<'_>, x: Var, c: Var, t: Var, n_genes: usize, cond_dim: usize) -> Result<Var> {
    let batch = ctx.g.shape(x)[0];
    let base = cfg.hidden_dim;
    let d = cfg.gene_encoding_dim;
    let enc_x = SinusoidalEncoder::new(d, DEFAULT_MAX_PERIOD)?;
    let enc_t = SinusoidalEncoder::new(cfg.time_encoding_dim, DEFAULT_MAX_PERIOD)?;

    // Embedding shared by every residual block.
    let tf = enc_t.apply(ctx.g, t)?;
    let te = ctx.trunk("unet.time", tf, cfg.time_encoding_dim, base, cfg.n_layers_time)?;
    let ce = ctx.trunk("unet.cond", c, cond_dim, base, cfg.n_layers_conditions)?;
    let emb = ctx.g.concat(&[te, ce], 1)?;

    let table = ctx.param_with(GeneEmbeddingTable::PARAM, &[n_genes, d], |rng| {
        GeneEmbeddingTable::init(n_genes, d, rng).weights
    })?;
    let h = encode_state_graph(ctx.g, x, table, &enc_x)?;
    let len = padded_len(n_genes, cfg.levels());
    let h = ctx.g.pad_end(h, 1, len - n_genes)?;
    let h = ctx.trunk("unet.input", h, d, base, cfg.n_layers_gene_expression)?;
    let mut h = ctx.g.permute(h, &[0, 2, 1])?;

    let mut blk = Block {
        ctx,
        emb,
        emb_dim: 2 * base,
        dropout: true,
        scale_shift: cfg.use_scale_shift_norm,
    };
    let mut skips: Vec<(Var, usize)> = vec![(h, base)];
    let mut ch = base;
    let mut ds = 1;
    for (level, &mult) in cfg.channel_mult.iter().enumerate() {
        for i in 0..cfg.num_res_blocks {
            let out = mult * base;
            h = blk.res(&format!("unet.down{level}.res{i}"), h, ch, out)?;
            ch = out;
            if cfg.attention_resolutions.contains(&ds) {
                h = blk.ctx.attention(&format!("unet.down{level}.attn{i}"), h, ch, cfg.num_heads)?;
            }
            skips.push((h, ch));
        }
        if level + 1 < cfg.levels() {
            h = if cfg.conv_resample {
                blk.ctx.conv(&format!("unet.down{level}.resample"), h, ch, ch, 3, 2, false)?
            } else {
                // Kernel-1 stride-2 identity keeps every other position.
                let mut eye = vec![0.0; ch * ch];
                (0..ch).for_each(|k| eye[k * ch + k] = 1.0);
                let w = blk.ctx.g.constant(&[ch, ch, 1], eye)?;
                blk.ctx.g.conv1d(h, w, 2, 0)?
            };
            ds *= 2;
            skips.push((h, ch));
        }
    }

    h = blk.res("unet.mid.res0", h, ch, ch)?;
    h = blk.ctx.attention("unet.mid.attn", h, ch, cfg.num_heads)?;
    h = blk.res("unet.mid.res1", h, ch, ch)?;

    for (level, &mult) in cfg.channel_mult.iter().enumerate().rev() {
        for i in 0..=cfg.num_res_blocks {
            let (skip, skip_ch) = skips.pop().expect("one skip per encoder output");
            let cat = blk.ctx.g.concat(&[h, skip], 1)?;
            let out = mult * base;
            h = blk.res(&format!("unet.up{level}.res{i}"), cat, ch + skip_ch, out)?;
            ch = out;
            if cfg.attention_resolutions.contains(&ds) {
                h = blk.ctx.attention(&format!("unet.up{level}.attn{i}"), h, ch, cfg.num_heads)?;
            }
        }
        if level > 0 {
            h = blk.ctx.g.upsample2(h)?;
            if cfg.conv_resample {
                h = blk.ctx.conv(&format!("unet.up{level}.resample"), h, ch, ch, 3, 1, false)?;
            }
            ds /= 2;
        }
    }
    debug_assert!(skips.is_empty());

    let ctx = blk.ctx;
    let h = ctx.group_norm("unet.out.norm", h, ch)?;
    let h = ctx.g.silu(h)?;
    let h = ctx.conv("unet.out.conv", h, ch, 1, 3, 1, true)?;
    let h = ctx.g.reshape(h, &[batch, len])?;
    Ok(ctx.g.narrow(h, 1, 0, n_genes)?)
}
