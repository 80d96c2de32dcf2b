//! Euler integration of a learned velocity field with classifier-free guidance.

use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Condition, Normalization, PerturbDataset, Split};
use crate::error::{Error, Result};
use crate::models::{FlowModel, VelocityNet};

/// Rows integrated per network call.
const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Gaussian,
    ControlCells,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_weight: f64,
    pub num_samples: usize,
    pub source: Source,
    /// Evaluate only the conditional field, ignoring `cfg_weight`.
    pub conditional_only: bool,
    /// Clip generated expression at zero.
    pub clamp: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            cfg_weight: 1.0,
            num_samples: 1000,
            source: Source::Gaussian,
            conditional_only: false,
            clamp: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.cfg_weight >= 0.0) || !self.cfg_weight.is_finite() {
            return Err(Error::Config(format!("cfg weight must be ≥ 0, got {}", self.cfg_weight)));
        }
        Ok(())
    }
}

/// Anything that maps a row-major batch `(x[B, D], c[B, C], t[B])` to velocities.
pub trait VelocityField {
    fn state_dim(&self) -> usize;
    fn velocity(&self, x: &[f64], c: &[f64], t: &[f64]) -> Result<Vec<f64>>;
}

impl VelocityField for VelocityNet {
    fn state_dim(&self) -> usize {
        VelocityNet::state_dim(self)
    }

    fn velocity(&self, x: &[f64], c: &[f64], t: &[f64]) -> Result<Vec<f64>> {
        self.predict(x, c, t)
    }
}

/// `v(x, t) = a` regardless of condition.
#[derive(Debug, Clone)]
pub struct ConstantField(pub Vec<f64>);

impl VelocityField for ConstantField {
    fn state_dim(&self) -> usize {
        self.0.len()
    }

    fn velocity(&self, _x: &[f64], _c: &[f64], t: &[f64]) -> Result<Vec<f64>> {
        Ok(t.iter().flat_map(|_| self.0.iter().copied()).collect())
    }
}

/// `v(x, t) = c·t` in every coordinate.
#[derive(Debug, Clone)]
pub struct RampField {
    pub slope: f64,
    pub dim: usize,
}

impl VelocityField for RampField {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, _x: &[f64], _c: &[f64], t: &[f64]) -> Result<Vec<f64>> {
        Ok(t.iter().flat_map(|&t| std::iter::repeat_n(self.slope * t, self.dim)).collect())
    }
}

/// Guided combination of the two fields. At `w = 1` and `w = 0` the
/// unused field is not evaluated, so those cases reduce exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Guidance {
    ConditionalOnly,
    Cfg(f64),
}

/// `v_null + w·(v_cond − v_null)`.
pub fn cfg_combine(v_cond: &[f64], v_null: &[f64], w: f64) -> Vec<f64> {
    v_cond.iter().zip(v_null).map(|(c, n)| n + w * (c - n)).collect()
}

/// Left-endpoint Euler from `t = 0` to `1` on a uniform grid. `cond` and
/// `null` are single condition encodings broadcast over the rows.
pub fn euler_integrate<V: VelocityField + ?Sized>(
    field: &V,
    x0: Array2<f64>,
    cond: &[f64],
    null: &[f64],
    guidance: Guidance,
    steps: usize,
) -> Result<Array2<f64>> {
    if steps == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    if x0.ncols() != field.state_dim() {
        return Err(Error::Dimension(format!(
            "start points have {} coordinates, field expects {}",
            x0.ncols(),
            field.state_dim()
        )));
    }
    let mut x = x0;
    let dt = 1.0 / steps as f64;
    let n = x.nrows();
    let mut start = 0;
    while start < n {
        let len = CHUNK.min(n - start);
        let mut block = x.slice_mut(s![start..start + len, ..]);
        let c_cond: Vec<f64> = cond.iter().copied().cycle().take(cond.len() * len).collect();
        let c_null: Vec<f64> = null.iter().copied().cycle().take(null.len() * len).collect();
        let mut state: Vec<f64> = block.iter().copied().collect();
        for k in 0..steps {
            let t = vec![k as f64 / steps as f64; len];
            let v = match guidance {
                Guidance::ConditionalOnly => field.velocity(&state, &c_cond, &t)?,
                Guidance::Cfg(w) if w == 1.0 => field.velocity(&state, &c_cond, &t)?,
                Guidance::Cfg(w) if w == 0.0 => field.velocity(&state, &c_null, &t)?,
                Guidance::Cfg(w) => {
                    let vc = field.velocity(&state, &c_cond, &t)?;
                    let vn = field.velocity(&state, &c_null, &t)?;
                    cfg_combine(&vc, &vn, w)
                }
            };
            state.iter_mut().zip(&v).for_each(|(s, v)| *s += dt * v);
        }
        block.iter_mut().zip(state).for_each(|(b, s)| *b = s);
        start += len;
    }
    Ok(x)
}

/// Integrates `v = c·t` from zero and returns `|x(1) − c/2|`.
pub fn euler_exactness_check(steps: usize, slope: f64) -> Result<f64> {
    let field = RampField { slope, dim: 1 };
    let x = euler_integrate(&field, Array2::zeros((1, 1)), &[], &[], Guidance::ConditionalOnly, steps)?;
    Ok((x[[0, 0]] - slope / 2.0).abs())
}

/// Draws `cfg.num_samples` cells for `condition` in expression space.
/// `controls` supplies the source cells when `cfg.source` asks for them.
pub fn euler_sample(
    model: &FlowModel,
    condition: &Condition,
    cfg: &SamplerConfig,
    controls: Option<&Array2<f64>>,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    let n = cfg.num_samples;
    let d = model.state_dim();
    // x0 is drawn before anything else so every guidance weight sees the
    // same starting points
    let x0 = match cfg.source {
        Source::Gaussian => Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal)),
        Source::ControlCells => {
            let ctrl = controls
                .filter(|c| c.nrows() > 0)
                .ok_or_else(|| Error::Data(format!("no control cells for covariate `{}`", condition.covariate())))?;
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..ctrl.nrows())).collect();
            model.to_state(&ctrl.select(Axis(0), &idx))?
        }
    };
    let cond = model.conditions.encode(Some(condition))?;
    let null = model.conditions.encode(None)?;
    let guidance = if cfg.conditional_only {
        Guidance::ConditionalOnly
    } else {
        Guidance::Cfg(cfg.cfg_weight)
    };
    let z = euler_integrate(&model.net, x0, &cond, &null, guidance, cfg.steps)?;
    let mut x = model.from_state(&z)?;
    if cfg.clamp {
        x.mapv_inplace(|v| v.max(0.0));
    }
    Ok(x)
}

/// Samples every condition in turn from one seeded stream and packs the
/// result as a test-split dataset over the model's vocabularies.
pub fn sample_dataset(
    model: &FlowModel,
    conditions: &[Condition],
    cfg: &SamplerConfig,
    controls: Option<&PerturbDataset>,
    seed: u64,
) -> Result<PerturbDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = model.genes.len();
    let mut cells = Array2::zeros((0, m));
    let mut labels = Vec::new();
    for c in conditions {
        let ctrl = match (cfg.source, controls) {
            (Source::ControlCells, Some(ds)) => Some(ds.controls_of(c.covariate())?),
            _ => None,
        };
        let x = euler_sample(model, c, cfg, ctrl.as_ref(), &mut rng)?;
        cells
            .append(Axis(0), x.view())
            .map_err(|e| Error::Dimension(e.to_string()))?;
        labels.extend(std::iter::repeat_n(c.clone(), x.nrows()));
    }
    let n = labels.len();
    PerturbDataset::with_vocabulary(
        model.genes.clone(),
        model.conditions.perturbations().to_vec(),
        model.conditions.covariates().to_vec(),
        cells,
        labels,
        vec![Split::Test; n],
        Normalization::Generated {
            source: model.kind.name().to_string(),
        },
    )
}
