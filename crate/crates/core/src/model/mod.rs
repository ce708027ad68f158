//! The full encoder/decoder: learnable latent probes compressed from a
//! target cloud by cross-attention (encoder), then injected into a source
//! cloud's features to drive its deformation (decoder), ending in an MLP
//! that emits the registered coordinates.

mod checkpoint;
mod forward;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{
    decode, decode_graph, decode_with_maps, encode, encode_chunked, encode_graph,
    encode_with_maps, register, DecodeGraph, EncodeGraph, ModelVars,
};
pub use params::{MlpParams, MlpVars, ModelParams};

use crate::autodiff::Tensor;
use crate::error::Error;
use crate::scalar::Scalar;
use crate::Result;

/// Architecture hyperparameters. The probe count, latent dimension, and
/// encoder/decoder depth are the main configuration axes; the rest pins
/// the block widths.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_probes: usize,
    pub latent_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// Point-embedder widths; the input is always 3 coordinates and the
    /// last width must equal `latent_dim`.
    pub embedder_widths: Vec<usize>,
    pub ff_hidden: usize,
    /// Final MLP widths; must end at 3 output coordinates.
    pub final_mlp_widths: Vec<usize>,
    /// Radius of the local density estimate that feeds surface attention.
    pub density_radius: f64,
    pub layer_norm: bool,
    /// Emit displacements added to the source coordinates instead of
    /// absolute coordinates.
    pub residual_output: bool,
    /// Area-weight the softmax whenever keys are point-cloud points; with
    /// this off every block runs classic attention (the ablation baseline).
    pub surface_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_probes: 32,
            latent_dim: 64,
            encoder_layers: 8,
            decoder_layers: 8,
            heads: 4,
            embedder_widths: vec![8, 16, 32, 64],
            ff_hidden: 512,
            final_mlp_widths: vec![48, 24, 12, 6, 3],
            density_radius: 0.05,
            layer_norm: true,
            residual_output: false,
            surface_attention: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_probes", self.num_probes),
            ("latent_dim", self.latent_dim),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("heads", self.heads),
            ("ff_hidden", self.ff_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.latent_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "latent_dim {} not divisible by {} heads",
                self.latent_dim, self.heads
            )));
        }
        if self.embedder_widths.last() != Some(&self.latent_dim) {
            return Err(Error::Config(format!(
                "embedder widths {:?} must end at latent_dim {}",
                self.embedder_widths, self.latent_dim
            )));
        }
        if self.final_mlp_widths.last() != Some(&3) {
            return Err(Error::Config(format!(
                "final MLP widths {:?} must end at 3",
                self.final_mlp_widths
            )));
        }
        if self.embedder_widths.is_empty() || self.final_mlp_widths.is_empty() {
            return Err(Error::Config("empty MLP width list".into()));
        }
        if !(self.density_radius > 0.0) || !self.density_radius.is_finite() {
            return Err(Error::Config(format!(
                "density_radius must be positive, got {}",
                self.density_radius
            )));
        }
        Ok(())
    }
}

/// The K latent vectors produced by the encoder: the object refinement
/// optimizes and interpolation blends.
#[derive(Clone, Debug)]
pub struct LatentState<T> {
    vectors: Tensor<T>,
    provenance: String,
}

impl<T: Scalar> LatentState<T> {
    pub fn new(vectors: Tensor<T>, provenance: impl Into<String>) -> Result<Self> {
        if vectors.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "latent state must be rank 2, got {:?}",
                vectors.shape()
            )));
        }
        Ok(LatentState {
            vectors,
            provenance: provenance.into(),
        })
    }

    pub fn vectors(&self) -> &Tensor<T> {
        &self.vectors
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn num_probes(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        if self.num_probes() != cfg.num_probes || self.dim() != cfg.latent_dim {
            return Err(Error::Config(format!(
                "latent state {}x{} does not match model {}x{}",
                self.num_probes(),
                self.dim(),
                cfg.num_probes,
                cfg.latent_dim
            )));
        }
        Ok(())
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ModelConfig::default();
        c.heads = 5;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::default();
        c.embedder_widths = vec![8, 16, 32];
        assert!(c.validate().is_err());

        let mut c = ModelConfig::default();
        c.final_mlp_widths = vec![48, 24];
        assert!(c.validate().is_err());

        let mut c = ModelConfig::default();
        c.density_radius = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn latent_state_checks_config() {
        let cfg = ModelConfig::default();
        let ls = LatentState::new(Tensor::<f64>::zeros(vec![32, 64]), "t").unwrap();
        assert!(ls.check_config(&cfg).is_ok());
        let bad = LatentState::new(Tensor::<f64>::zeros(vec![16, 64]), "t").unwrap();
        assert!(matches!(bad.check_config(&cfg), Err(Error::Config(_))));
    }
}
