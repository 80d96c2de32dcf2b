//! Velocity fields and the PCA latent wrapper.

mod layers;
pub mod mlp;
pub mod pca;
pub mod unet;

use std::path::Path;

use ndarray::{Array1, Array2};
use numcore::{checkpoint, Bindings, Graph, ParameterSet, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::ConditionEncoder;
use crate::error::{Error, Result};
use layers::Ctx;
pub use mlp::MlpConfig;
pub use pca::{pca_fit, pca_project, pca_reconstruct, PcaProjector};
pub use unet::{padded_len, unet_pad, unet_unpad, PadRecord, UnetConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Architecture {
    Mlp(MlpConfig),
    Unet(UnetConfig),
}

impl Architecture {
    pub fn dropout(&self) -> f64 {
        match self {
            Architecture::Mlp(c) => c.dropout,
            Architecture::Unet(c) => c.dropout,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Architecture::Mlp(c) => c.validate(),
            Architecture::Unet(c) => c.validate(),
        }
    }
}

/// A velocity field `v(x_t, c, t)` with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNet {
    pub arch: Architecture,
    pub params: ParameterSet,
    state_dim: usize,
    cond_dim: usize,
}

impl VelocityNet {
    pub fn new(arch: Architecture, state_dim: usize, cond_dim: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        if state_dim == 0 || cond_dim == 0 {
            return Err(Error::Config("state and condition dimensions must be positive".into()));
        }
        let mut params = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.constant(&[1, state_dim], vec![0.0; state_dim])?;
        let c = g.constant(&[1, cond_dim], vec![0.0; cond_dim])?;
        let t = g.constant(&[1], vec![0.0])?;
        let mut ctx = Ctx::create(&mut g, &mut params, &mut rng);
        run(&arch, &mut ctx, x, c, t, state_dim, cond_dim)?;
        Ok(Self {
            arch,
            params,
            state_dim,
            cond_dim,
        })
    }

    /// Rebuilds a network around existing parameters, checking that every
    /// expected parameter is present with the right shape.
    pub fn from_params(arch: Architecture, params: ParameterSet, state_dim: usize, cond_dim: usize) -> Result<Self> {
        let fresh = Self::new(arch.clone(), state_dim, cond_dim, 0)?;
        let expected: Vec<(&str, &[usize])> = fresh.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let got: Vec<(&str, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if expected != got {
            return Err(Error::Config("parameter set does not match the architecture".into()));
        }
        Ok(Self {
            arch,
            params,
            state_dim,
            cond_dim,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    /// Graph forward for `x[B, D]`, `c[B, C]`, `t[B]`. Passing an RNG
    /// enables dropout.
    pub fn forward(&self, g: &mut Graph, b: &Bindings, x: Var, c: Var, t: Var, dropout: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let batch = g.shape(t).first().copied().unwrap_or(0);
        if g.shape(t) != [batch] || g.shape(x) != [batch, self.state_dim] || g.shape(c) != [batch, self.cond_dim] {
            return Err(Error::Dimension(format!(
                "velocity inputs x{:?} c{:?} t{:?} for state dim {} and condition dim {}",
                g.shape(x),
                g.shape(c),
                g.shape(t),
                self.state_dim,
                self.cond_dim
            )));
        }
        let p = self.arch.dropout();
        let mut ctx = Ctx::bound(g, b, dropout.map(|r| (r, p)));
        run(&self.arch, &mut ctx, x, c, t, self.state_dim, self.cond_dim)
    }

    /// Evaluates the field on row-major batches without dropout.
    pub fn predict(&self, x: &[f64], c: &[f64], t: &[f64]) -> Result<Vec<f64>> {
        let batch = t.len();
        let mut g = Graph::new();
        let b = g.bind(&self.params)?;
        let xv = g.constant(&[batch, self.state_dim], x.to_vec()).map_err(dim_of)?;
        let cv = g.constant(&[batch, self.cond_dim], c.to_vec()).map_err(dim_of)?;
        let tv = g.constant(&[batch], t.to_vec())?;
        let out = self.forward(&mut g, &b, xv, cv, tv, None)?;
        Ok(g.value(out).to_vec())
    }
}

fn dim_of(e: numcore::Error) -> Error {
    match e {
        numcore::Error::Dimension(m) => Error::Dimension(m),
        other => Error::Core(other),
    }
}

fn run(arch: &Architecture, ctx: &mut Ctx<'_>, x: Var, c: Var, t: Var, state_dim: usize, cond_dim: usize) -> Result<Var> {
    match arch {
        Architecture::Mlp(cfg) => mlp::forward(cfg, ctx, x, c, t, state_dim, cond_dim),
        Architecture::Unet(cfg) => unet::forward(cfg, ctx, x, c, t, state_dim, cond_dim),
    }
}

/// `v̂ = v(x_t, c, t)` on row-major batches.
pub fn velocity_forward(net: &VelocityNet, x_t: &[f64], c: &[f64], t: &[f64]) -> Result<Vec<f64>> {
    net.predict(x_t, c, t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// U-Net over genes.
    #[serde(rename = "primeflow_unet")]
    Unet,
    /// MLP over genes.
    #[serde(rename = "primeflow_mlp")]
    Mlp,
    /// MLP in PCA space.
    FmPca,
    /// MLP in PCA space with OT-coupled training pairs.
    FmPcaOt,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Unet => "primeflow_unet",
            ModelKind::Mlp => "primeflow_mlp",
            ModelKind::FmPca => "fm_pca",
            ModelKind::FmPcaOt => "fm_pca_ot",
        }
    }

    pub fn uses_pca(self) -> bool {
        matches!(self, ModelKind::FmPca | ModelKind::FmPcaOt)
    }
}

/// A trained (or freshly initialized) conditional flow model.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub kind: ModelKind,
    pub net: VelocityNet,
    pub projector: Option<PcaProjector>,
    pub conditions: ConditionEncoder,
    pub genes: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    kind: ModelKind,
    arch: Architecture,
    state_dim: usize,
    cond_dim: usize,
    genes: Vec<String>,
    conditions: ConditionEncoder,
    pca: Option<PcaMeta>,
    #[serde(default)]
    extra: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct PcaMeta {
    dim: usize,
    explained_variance: Vec<f64>,
    total_variance: f64,
}

const PCA_MEAN: &str = "pca.mean";
const PCA_COMPONENTS: &str = "pca.components";

impl FlowModel {
    pub fn state_dim(&self) -> usize {
        self.net.state_dim()
    }

    /// Maps expression rows into the space the flow runs in.
    pub fn to_state(&self, cells: &Array2<f64>) -> Result<Array2<f64>> {
        match &self.projector {
            Some(p) => p.project_rows(cells),
            None => Ok(cells.clone()),
        }
    }

    pub fn from_state(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        match &self.projector {
            Some(p) => p.reconstruct_rows(z),
            None => Ok(z.clone()),
        }
    }

    /// Writes parameters (and the PCA basis) plus a manifest into `dir`.
    pub fn save(&self, dir: &Path, extra: serde_json::Value) -> Result<()> {
        let mut all = self.net.params.clone();
        if let Some(p) = &self.projector {
            all.insert(PCA_MEAN, Tensor::new(vec![p.n_genes()], p.mean.to_vec())?);
            all.insert(
                PCA_COMPONENTS,
                Tensor::new(vec![p.dim(), p.n_genes()], p.components.iter().copied().collect())?,
            );
        }
        let meta = ModelMeta {
            kind: self.kind,
            arch: self.net.arch.clone(),
            state_dim: self.net.state_dim(),
            cond_dim: self.net.cond_dim(),
            genes: self.genes.clone(),
            conditions: self.conditions.clone(),
            pca: self.projector.as_ref().map(|p| PcaMeta {
                dim: p.dim(),
                explained_variance: p.explained_variance.to_vec(),
                total_variance: p.total_variance,
            }),
            extra,
        };
        std::fs::create_dir_all(dir)?;
        checkpoint::save(dir, &all, serde_json::to_value(meta)?)?;
        Ok(())
    }

    /// Loads a model and the free-form metadata stored with it.
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let (mut all, manifest) = checkpoint::load(dir)?;
        let meta: ModelMeta = serde_json::from_value(manifest.metadata)?;
        let projector = match meta.pca {
            Some(pm) => {
                let mean = all.remove(PCA_MEAN).ok_or_else(|| Error::Config("checkpoint lacks the PCA mean".into()))?;
                let comps =
                    all.remove(PCA_COMPONENTS).ok_or_else(|| Error::Config("checkpoint lacks the PCA basis".into()))?;
                let m = mean.numel();
                Some(PcaProjector {
                    mean: Array1::from(mean.into_data()),
                    components: Array2::from_shape_vec((pm.dim, m), comps.into_data())
                        .map_err(|e| Error::Dimension(e.to_string()))?,
                    explained_variance: Array1::from(pm.explained_variance),
                    total_variance: pm.total_variance,
                })
            }
            None => None,
        };
        let net = VelocityNet::from_params(meta.arch, all, meta.state_dim, meta.cond_dim)?;
        Ok((
            Self {
                kind: meta.kind,
                net,
                projector,
                conditions: meta.conditions,
                genes: meta.genes,
            },
            meta.extra,
        ))
    }
}
