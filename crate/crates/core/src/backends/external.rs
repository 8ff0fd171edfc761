use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RiddleError};
use crate::scalar::Scalar;

use super::Backends;

/// Tensor contracts a real-weight adapter has to satisfy.
///
/// | component  | input                         | output                                   |
/// |------------|-------------------------------|------------------------------------------|
/// | generator  | `L × D` latent (W+ space)     | flattened RGB image in `[-1, 1]`         |
/// | identity   | flattened image               | `1 × E` unit-norm embedding              |
/// | perceptual | flattened image               | `1 × F` concatenated feature activations |
/// | parser     | flattened image               | `C × (H·W)` channel logits               |
/// | inverter   | flattened image               | `L × D` latent                           |
///
/// The parser must expose channel names including `eyes`, `ears`, `mouth`
/// and `nose`.
pub const EXTERNAL_CONTRACTS: &str = "generator: LxD latent -> flattened image in [-1,1]; \
identity: image -> 1xE unit embedding; perceptual: image -> 1xF features; \
parser: image -> Cx(HW) channel map with eyes/ears/mouth/nose; inverter: image -> LxD latent";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalConfig {
    pub generator_weights: PathBuf,
    pub identity_weights: PathBuf,
    #[serde(default)]
    pub eval_identity_weights: Option<PathBuf>,
    pub perceptual_weights: PathBuf,
    pub parser_weights: PathBuf,
    #[serde(default)]
    pub inverter_weights: Option<PathBuf>,
}

impl ExternalConfig {
    fn paths(&self) -> Vec<(&'static str, &PathBuf)> {
        let mut out = vec![
            ("generator", &self.generator_weights),
            ("identity", &self.identity_weights),
            ("perceptual", &self.perceptual_weights),
            ("parser", &self.parser_weights),
        ];
        if let Some(p) = &self.eval_identity_weights {
            out.push(("eval identity", p));
        }
        if let Some(p) = &self.inverter_weights {
            out.push(("inverter", p));
        }
        out
    }

    /// Checks the weight paths, then reports that no runtime is wired in.
    pub fn load<T: Scalar>(&self) -> Result<Backends<T>> {
        for (what, path) in self.paths() {
            if !path.exists() {
                return Err(RiddleError::Backend(format!(
                    "{what} weights not found at {}",
                    path.display()
                )));
            }
        }
        Err(RiddleError::Backend(format!(
            "external adapters are interface stubs; implement the backend traits for your model runtime ({EXTERNAL_CONTRACTS})"
        )))
    }
}
