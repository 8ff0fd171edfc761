//! Pretrained components used through narrow interfaces.
//!
//! Images are `1 × image_dim` row tensors. All differentiable backends build
//! their computation on a caller-supplied [`Graph`] from constant weights, so
//! they are frozen by construction: gradients reach the encryptor through
//! them but never touch their parameters.

mod external;
mod synthetic;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, RiddleError};
use crate::graph::{Graph, Var};
use crate::latent::{ChunkLayout, LatentCode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use external::{ExternalConfig, EXTERNAL_CONTRACTS};
pub use synthetic::{
    synthetic_generator, synthetic_identity, synthetic_parser, synthetic_perceptual, SyntheticConfig,
    SyntheticDataset, SyntheticGenerator, SyntheticIdentity, SyntheticInverter, SyntheticParser,
    SyntheticPerceptual, PARSER_CHANNELS,
};

/// Maps a latent code to an image.
pub trait GeneratorBackend<T: Scalar>: Send + Sync {
    fn latent_shape(&self) -> (usize, usize);
    fn image_dim(&self) -> usize;
    fn value_range(&self) -> (f64, f64);
    /// `w` is an `L × D` node; returns a `1 × image_dim` node.
    fn generate(&self, g: &mut Graph<T>, w: Var) -> Var;
    fn parameters(&self) -> Vec<&Tensor<T>>;

    fn generate_value(&self, w: &LatentCode<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let v = g.constant(w.values().clone());
        let out = self.generate(&mut g, v);
        g.value(out).clone()
    }
}

/// Face recognition network producing unit-norm identity embeddings.
pub trait IdentityBackend<T: Scalar>: Send + Sync {
    fn embed_dim(&self) -> usize;
    /// Returns a `1 × E` node with unit L2 norm.
    fn embed(&self, g: &mut Graph<T>, image: Var) -> Var;
    fn parameters(&self) -> Vec<&Tensor<T>>;

    fn embed_value(&self, image: &Tensor<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let v = g.constant(image.clone());
        let out = self.embed(&mut g, v);
        g.value(out).clone()
    }
}

/// Perceptual feature extractor.
pub trait PerceptualBackend<T: Scalar>: Send + Sync {
    fn feature_dim(&self) -> usize;
    fn features(&self, g: &mut Graph<T>, image: Var) -> Var;
    fn parameters(&self) -> Vec<&Tensor<T>>;
}

/// Face parser producing a `channels × width` map.
pub trait ParserBackend<T: Scalar>: Send + Sync {
    fn channel_names(&self) -> &[String];
    fn parse(&self, g: &mut Graph<T>, image: Var) -> Var;
    fn parameters(&self) -> Vec<&Tensor<T>>;
}

/// Image-to-latent encoder.
pub trait InverterBackend<T: Scalar>: Send + Sync {
    fn invert(&self, image: &Tensor<T>) -> Result<LatentCode<T>>;
    fn parameters(&self) -> Vec<&Tensor<T>>;
}

/// Finite collection of images for dataset-mode training.
pub trait ImageSource<T: Scalar>: Send + Sync {
    fn len(&self) -> usize;
    fn image(&self, index: usize) -> Tensor<T>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// SHA-256 over the raw bytes of a parameter list.
pub fn fingerprint<T: Scalar>(params: &[&Tensor<T>]) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for p in params {
        buf.clear();
        buf.extend_from_slice(&(p.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(p.cols() as u64).to_le_bytes());
        for &v in p.data() {
            v.write_le(&mut buf);
        }
        h.update(&buf);
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    Synthetic(SyntheticConfig),
    External(ExternalConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Synthetic(SyntheticConfig::default())
    }
}

/// The full set of frozen components.
#[derive(Clone)]
pub struct Backends<T: Scalar> {
    pub generator: Arc<dyn GeneratorBackend<T>>,
    pub identity: Arc<dyn IdentityBackend<T>>,
    /// Recognizer used for evaluation when it should differ from training.
    pub eval_identity: Option<Arc<dyn IdentityBackend<T>>>,
    pub perceptual: Arc<dyn PerceptualBackend<T>>,
    pub parser: Arc<dyn ParserBackend<T>>,
    pub inverter: Option<Arc<dyn InverterBackend<T>>>,
    pub dataset: Option<Arc<dyn ImageSource<T>>>,
}

impl<T: Scalar> Backends<T> {
    pub fn from_config(config: &BackendConfig, layout: ChunkLayout, dim: usize) -> Result<Self> {
        match config {
            BackendConfig::Synthetic(s) => s.build(layout, dim),
            BackendConfig::External(e) => e.load(),
        }
    }

    pub fn evaluation_identity(&self) -> &Arc<dyn IdentityBackend<T>> {
        self.eval_identity.as_ref().unwrap_or(&self.identity)
    }

    /// Digest of every backend parameter, for checking the frozen contract.
    pub fn fingerprint(&self) -> String {
        let mut params = self.generator.parameters();
        params.extend(self.identity.parameters());
        if let Some(e) = &self.eval_identity {
            params.extend(e.parameters());
        }
        params.extend(self.perceptual.parameters());
        params.extend(self.parser.parameters());
        if let Some(inv) = &self.inverter {
            params.extend(inv.parameters());
        }
        fingerprint(&params)
    }

    pub fn check_latent_shape(&self, layout: ChunkLayout, dim: usize) -> Result<()> {
        let shape = self.generator.latent_shape();
        if shape != (layout.levels(), dim) {
            return Err(RiddleError::Config(format!(
                "generator expects {}x{} latents, encryptor produces {}x{}",
                shape.0,
                shape.1,
                layout.levels(),
                dim
            )));
        }
        Ok(())
    }
}
