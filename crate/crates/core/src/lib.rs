//! Password-conditioned, reversible identity encryption in the latent space
//! of a face generator.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the bottom of this file name the common concrete instantiations.

pub mod archive;
pub mod backends;
pub mod encryptor;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod latent;
pub mod losses;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use encryptor::{EncryptorConfig, EncryptorState, Variant};
pub use error::{Result, RiddleError};
pub use latent::{ChunkLayout, LatentCode, Password, PasswordFile};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Encryptor = EncryptorState<f32>;
pub type Encryptor64 = EncryptorState<f64>;
pub type Latent = LatentCode<f32>;
pub type Latent64 = LatentCode<f64>;
pub type Key = Password<f32>;
pub type Key64 = Password<f64>;
pub type Matrix = Tensor<f32>;
pub type Matrix64 = Tensor<f64>;
pub type SyntheticBackends = backends::Backends<f32>;
