use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Architecture, MlpConfig, ModelKind, UnetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interpolation {
    #[serde(alias = "linear")]
    Linear,
    #[serde(alias = "trigonometric")]
    Trigonometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverType {
    Balanced,
    Unbalanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtConfig {
    pub num_samples_per_condition: usize,
    pub tau_a: f64,
    pub tau_b: f64,
    /// Entropic regularization relative to the mean pairwise cost.
    pub epsilon: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for OtConfig {
    fn default() -> Self {
        Self {
            num_samples_per_condition: 128,
            tau_a: 1.0,
            tau_b: 1.0,
            epsilon: 0.05,
            max_iter: 5000,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Coupling {
    Independent,
    Ot(OtConfig),
}

/// Training settings other than the network itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub interpolation: Interpolation,
    pub sigma: f64,
    pub p_uncond: f64,
    pub batch_size: usize,
    pub grad_accum_batches: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip_threshold: f64,
    pub coupling: Coupling,
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) {
            return Err(Error::Config(format!("sigma must be ≥ 0, got {}", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::Config(format!("prob_unconditional {} outside [0, 1]", self.p_uncond)));
        }
        if self.batch_size == 0 || self.grad_accum_batches == 0 {
            return Err(Error::Config("batch_size and grad_accum_batches must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 || !(self.grad_clip_threshold > 0.0) {
            return Err(Error::Config(
                "learning_rate and grad_clip_threshold must be positive, weight_decay non-negative".into(),
            ));
        }
        if let Coupling::Ot(ot) = &self.coupling {
            for (name, tau) in [("tau_a", ot.tau_a), ("tau_b", ot.tau_b)] {
                if !(tau > 0.0 && tau <= 1.0) {
                    return Err(Error::Config(format!("{name} {tau} outside (0, 1]")));
                }
            }
            if ot.num_samples_per_condition == 0 || !(ot.epsilon > 0.0) || ot.max_iter == 0 {
                return Err(Error::Config(
                    "num_samples_per_condition, epsilon and max_iter must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

fn d_res_blocks() -> usize {
    2
}
fn d_hidden() -> usize {
    256
}
fn d_dropout() -> f64 {
    0.1
}
fn d_channel_mult() -> Vec<usize> {
    vec![1, 2, 2, 4, 4]
}
fn d_true() -> bool {
    true
}
fn d_heads() -> usize {
    8
}
fn d_attention() -> Vec<usize> {
    vec![16]
}
fn d_two() -> usize {
    2
}
fn d_p_uncond() -> f64 {
    0.2
}
fn d_interp() -> Interpolation {
    Interpolation::Linear
}
fn d_lr() -> f64 {
    5e-5
}
fn d_batch() -> usize {
    54
}
fn d_clip() -> f64 {
    5.0
}
fn d_accum() -> usize {
    4
}
fn d_ot_samples() -> usize {
    128
}
fn d_solver() -> SolverType {
    SolverType::Unbalanced
}
fn d_one() -> f64 {
    1.0
}
fn d_eps() -> f64 {
    0.05
}
fn d_max_iter() -> usize {
    5000
}
fn d_tol() -> f64 {
    1e-8
}
fn d_pca() -> usize {
    30
}
fn d_epochs() -> usize {
    1
}
fn d_gene_dim() -> usize {
    16
}
fn d_time_dim() -> usize {
    32
}

/// Training run configuration. Key names follow the published
/// hyperparameter tables; every key except `model` has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    #[serde(default = "d_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "d_res_blocks")]
    pub num_res_blocks: usize,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
    #[serde(default = "d_channel_mult")]
    pub channel_mult: Vec<usize>,
    #[serde(default = "d_true")]
    pub conv_resample: bool,
    #[serde(default = "d_true")]
    pub use_scale_shift_norm: bool,
    #[serde(default = "d_heads")]
    pub num_heads: usize,
    #[serde(default = "d_attention")]
    pub attention_resolutions: Vec<usize>,
    #[serde(default = "d_two")]
    pub n_layers_gene_expression: usize,
    #[serde(default = "d_two")]
    pub n_layers_conditions: usize,
    #[serde(default = "d_two")]
    pub n_layers_time: usize,
    #[serde(default = "d_two")]
    pub n_layers_decoding: usize,
    #[serde(default = "d_gene_dim")]
    pub gene_encoding_dim: usize,
    #[serde(default = "d_time_dim")]
    pub time_encoding_dim: usize,
    #[serde(default = "d_p_uncond")]
    pub prob_unconditional: f64,
    #[serde(default = "d_interp")]
    pub interpl_type: Interpolation,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_clip")]
    pub grad_clip_threshold: f64,
    #[serde(default = "d_accum")]
    pub grad_accum_batches: usize,
    #[serde(default = "d_ot_samples")]
    pub num_samples_per_condition: usize,
    #[serde(default = "d_solver")]
    pub solver_type: SolverType,
    #[serde(default = "d_one")]
    pub tau_a: f64,
    #[serde(default = "d_one")]
    pub tau_b: f64,
    #[serde(default = "d_eps")]
    pub epsilon: f64,
    #[serde(default = "d_max_iter")]
    pub max_iter: usize,
    #[serde(default = "d_tol")]
    pub tol: f64,
    /// Latent dimension of the PCA models.
    #[serde(default = "d_pca")]
    pub pca_dim: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    /// Optional cap on optimizer steps across all epochs.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl TrainConfig {
    /// Defaults for `model`.
    pub fn new(model: ModelKind) -> Self {
        serde_json::from_value(serde_json::json!({ "model": model })).expect("defaults are valid")
    }

    pub fn architecture(&self) -> Architecture {
        match self.model {
            ModelKind::Unet => Architecture::Unet(UnetConfig {
                hidden_dim: self.hidden_dim,
                channel_mult: self.channel_mult.clone(),
                num_res_blocks: self.num_res_blocks,
                attention_resolutions: self.attention_resolutions.clone(),
                num_heads: self.num_heads,
                conv_resample: self.conv_resample,
                use_scale_shift_norm: self.use_scale_shift_norm,
                dropout: self.dropout,
                n_layers_gene_expression: self.n_layers_gene_expression,
                n_layers_conditions: self.n_layers_conditions,
                n_layers_time: self.n_layers_time,
                gene_encoding_dim: self.gene_encoding_dim,
                time_encoding_dim: self.time_encoding_dim,
            }),
            ModelKind::Mlp | ModelKind::FmPca | ModelKind::FmPcaOt => Architecture::Mlp(MlpConfig {
                hidden_dim: self.hidden_dim,
                n_layers_gene_expression: self.n_layers_gene_expression,
                n_layers_conditions: self.n_layers_conditions,
                n_layers_time: self.n_layers_time,
                n_layers_decoding: self.n_layers_decoding,
                dropout: self.dropout,
                time_encoding_dim: self.time_encoding_dim,
            }),
        }
    }

    pub fn flow(&self) -> FlowConfig {
        let coupling = if self.model == ModelKind::FmPcaOt {
            let (tau_a, tau_b) = match self.solver_type {
                SolverType::Balanced => (1.0, 1.0),
                SolverType::Unbalanced => (self.tau_a, self.tau_b),
            };
            Coupling::Ot(OtConfig {
                num_samples_per_condition: self.num_samples_per_condition,
                tau_a,
                tau_b,
                epsilon: self.epsilon,
                max_iter: self.max_iter,
                tol: self.tol,
            })
        } else {
            Coupling::Independent
        };
        FlowConfig {
            interpolation: self.interpl_type,
            sigma: self.sigma,
            p_uncond: self.prob_unconditional,
            batch_size: self.batch_size,
            grad_accum_batches: self.grad_accum_batches,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            grad_clip_threshold: self.grad_clip_threshold,
            coupling,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.flow().validate()?;
        if self.model.uses_pca() && self.pca_dim == 0 {
            return Err(Error::Config("pca_dim must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_published_table() {
        let cfg = TrainConfig::new(ModelKind::Unet);
        assert_eq!(cfg.num_res_blocks, 2);
        assert_eq!(cfg.hidden_dim, 256);
        assert_eq!(cfg.channel_mult, vec![1, 2, 2, 4, 4]);
        assert_eq!(cfg.attention_resolutions, vec![16]);
        assert_eq!(cfg.num_heads, 8);
        assert_eq!(cfg.prob_unconditional, 0.2);
        assert_eq!(cfg.learning_rate, 5e-5);
        assert_eq!(cfg.batch_size, 54);
        assert_eq!(cfg.grad_accum_batches, 4);
        assert_eq!(cfg.grad_clip_threshold, 5.0);
        assert_eq!(cfg.sigma, 0.0);
        assert_eq!(cfg.interpl_type, Interpolation::Linear);
        cfg.validate().unwrap();
    }

    #[test]
    fn parses_table_keys() {
        let cfg: TrainConfig = serde_json::from_str(
            r#"{"model": "fm_pca_ot", "interpl_type": "Trigonometric", "solver_type": "unbalanced",
                "tau_a": 0.9, "tau_b": 1.0, "num_samples_per_condition": 64}"#,
        )
        .unwrap();
        assert_eq!(cfg.interpl_type, Interpolation::Trigonometric);
        match cfg.flow().coupling {
            Coupling::Ot(ot) => {
                assert_eq!(ot.tau_a, 0.9);
                assert_eq!(ot.num_samples_per_condition, 64);
            }
            other => panic!("{other:?}"),
        }
        let err = serde_json::from_str::<TrainConfig>(r#"{"hidden_dim": 3}"#).unwrap_err();
        assert!(err.to_string().contains("model"), "{err}");
        let err = serde_json::from_str::<TrainConfig>(r#"{"model": "fm_pca", "hiden_dim": 3}"#).unwrap_err();
        assert!(err.to_string().contains("hiden_dim"), "{err}");
    }

    #[test]
    fn invalid_values_rejected() {
        let mut cfg = TrainConfig::new(ModelKind::FmPcaOt);
        cfg.tau_a = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = TrainConfig::new(ModelKind::Mlp);
        cfg.prob_unconditional = 1.5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.prob_unconditional = 0.2;
        cfg.sigma = -1.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
