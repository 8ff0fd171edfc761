//! Frozen random-projection stand-ins for the pretrained networks.
//!
//! The generator is `tanh(vec(w)·W + b)`. The suite built by
//! [`SyntheticConfig::build`] splits each image into an identity region read
//! by the recognizer and an attribute region read by the perceptual and
//! parsing backends, so that identity can change while attributes stay put.

use std::ops::Range;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RiddleError};
use crate::graph::{Graph, Var};
use crate::latent::{ChunkLayout, LatentCode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{
    Backends, GeneratorBackend, IdentityBackend, ImageSource, InverterBackend, ParserBackend,
    PerceptualBackend,
};

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub struct SyntheticGenerator<T> {
    levels: usize,
    dim: usize,
    weight: Tensor<T>,
    bias: Tensor<T>,
}

const GENERATOR_BIAS_STD: f64 = 0.1;

/// Fixed random affine map from the flattened latent followed by `tanh`.
pub fn synthetic_generator<T: Scalar>(seed: u64, levels: usize, dim: usize, image_dim: usize) -> SyntheticGenerator<T> {
    let mut rng = rng_for(seed, 1);
    let fan_in = levels * dim;
    SyntheticGenerator {
        levels,
        dim,
        weight: Tensor::randn(fan_in, image_dim, 1.0 / (fan_in as f64).sqrt(), &mut rng),
        bias: Tensor::randn(1, image_dim, GENERATOR_BIAS_STD, &mut rng),
    }
}

impl<T: Scalar> GeneratorBackend<T> for SyntheticGenerator<T> {
    fn latent_shape(&self) -> (usize, usize) {
        (self.levels, self.dim)
    }

    fn image_dim(&self) -> usize {
        self.weight.cols()
    }

    fn value_range(&self) -> (f64, f64) {
        (-1.0, 1.0)
    }

    fn generate(&self, g: &mut Graph<T>, w: Var) -> Var {
        let flat = g.reshape(w, 1, self.levels * self.dim);
        let weight = g.constant(self.weight.clone());
        let bias = g.constant(self.bias.clone());
        let z = g.matmul(flat, weight);
        let z = g.add_row(z, bias);
        g.tanh(z)
    }

    fn parameters(&self) -> Vec<&Tensor<T>> {
        vec![&self.weight, &self.bias]
    }
}

/// Linear projection of an image region, L2-normalized.
pub struct SyntheticIdentity<T> {
    region: Range<usize>,
    proj: Tensor<T>,
}

pub fn synthetic_identity<T: Scalar>(seed: u64, image_dim: usize, embed_dim: usize) -> SyntheticIdentity<T> {
    SyntheticIdentity::with_region(seed, 0..image_dim, embed_dim)
}

impl<T: Scalar> SyntheticIdentity<T> {
    pub fn with_region(seed: u64, region: Range<usize>, embed_dim: usize) -> Self {
        let mut rng = rng_for(seed, 2);
        let n = region.len();
        SyntheticIdentity {
            proj: Tensor::randn(n, embed_dim, 1.0 / (n as f64).sqrt(), &mut rng),
            region,
        }
    }
}

impl<T: Scalar> IdentityBackend<T> for SyntheticIdentity<T> {
    fn embed_dim(&self) -> usize {
        self.proj.cols()
    }

    fn embed(&self, g: &mut Graph<T>, image: Var) -> Var {
        let crop = g.slice_cols(image, self.region.start, self.region.len());
        let proj = g.constant(self.proj.clone());
        let e = g.matmul(crop, proj);
        g.normalize_rows(e)
    }

    fn parameters(&self) -> Vec<&Tensor<T>> {
        vec![&self.proj]
    }
}

pub struct SyntheticPerceptual<T> {
    region: Range<usize>,
    proj: Tensor<T>,
}

pub fn synthetic_perceptual<T: Scalar>(seed: u64, image_dim: usize, feature_dim: usize) -> SyntheticPerceptual<T> {
    SyntheticPerceptual::with_region(seed, 0..image_dim, feature_dim)
}

impl<T: Scalar> SyntheticPerceptual<T> {
    pub fn with_region(seed: u64, region: Range<usize>, feature_dim: usize) -> Self {
        let mut rng = rng_for(seed, 3);
        let n = region.len();
        SyntheticPerceptual {
            proj: Tensor::randn(n, feature_dim, 1.0 / (n as f64).sqrt(), &mut rng),
            region,
        }
    }
}

impl<T: Scalar> PerceptualBackend<T> for SyntheticPerceptual<T> {
    fn feature_dim(&self) -> usize {
        self.proj.cols()
    }

    fn features(&self, g: &mut Graph<T>, image: Var) -> Var {
        let crop = g.slice_cols(image, self.region.start, self.region.len());
        let proj = g.constant(self.proj.clone());
        g.matmul(crop, proj)
    }

    fn parameters(&self) -> Vec<&Tensor<T>> {
        vec![&self.proj]
    }
}

pub const PARSER_CHANNELS: [&str; 6] = ["skin", "eyes", "ears", "mouth", "nose", "hair"];

/// Projection reshaped into one row per named channel.
pub struct SyntheticParser<T> {
    region: Range<usize>,
    width: usize,
    proj: Tensor<T>,
    names: Vec<String>,
}

pub fn synthetic_parser<T: Scalar>(seed: u64, image_dim: usize, width: usize) -> SyntheticParser<T> {
    SyntheticParser::with_region(seed, 0..image_dim, width)
}

impl<T: Scalar> SyntheticParser<T> {
    pub fn with_region(seed: u64, region: Range<usize>, width: usize) -> Self {
        let mut rng = rng_for(seed, 4);
        let n = region.len();
        let channels = PARSER_CHANNELS.len();
        SyntheticParser {
            proj: Tensor::randn(n, channels * width, 1.0 / (n as f64).sqrt(), &mut rng),
            region,
            width,
            names: PARSER_CHANNELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl<T: Scalar> ParserBackend<T> for SyntheticParser<T> {
    fn channel_names(&self) -> &[String] {
        &self.names
    }

    fn parse(&self, g: &mut Graph<T>, image: Var) -> Var {
        let crop = g.slice_cols(image, self.region.start, self.region.len());
        let proj = g.constant(self.proj.clone());
        let flat = g.matmul(crop, proj);
        g.reshape(flat, self.names.len(), self.width)
    }

    fn parameters(&self) -> Vec<&Tensor<T>> {
        vec![&self.proj]
    }
}

/// Minimum-norm inverse of the synthetic generator.
pub struct SyntheticInverter<T> {
    layout: ChunkLayout,
    dim: usize,
    bias: Tensor<T>,
    pinv: Tensor<T>,
}

const ATANH_CLAMP: f64 = 1.0 - 1e-6;

impl<T: Scalar> SyntheticInverter<T> {
    pub fn new(generator: &SyntheticGenerator<T>, layout: ChunkLayout) -> Result<Self> {
        let w = &generator.weight;
        let (fan_in, image_dim) = w.shape();
        let m = DMatrix::from_fn(fan_in, image_dim, |r, c| w[(r, c)].as_f64());
        // vec(w)·W = z  ⇒  vec(w) = z·(WᵀW)⁻¹Wᵀ
        let gram = m.transpose() * &m;
        let inv = gram
            .try_inverse()
            .ok_or_else(|| RiddleError::Backend("synthetic generator is rank deficient".into()))?;
        let pinv = inv * m.transpose();
        let data = (0..image_dim)
            .flat_map(|r| (0..fan_in).map(move |c| (r, c)))
            .map(|(r, c)| T::lit(pinv[(r, c)]))
            .collect();
        Ok(SyntheticInverter {
            layout,
            dim: generator.dim,
            bias: generator.bias.clone(),
            pinv: Tensor::from_vec(image_dim, fan_in, data)?,
        })
    }
}

impl<T: Scalar> InverterBackend<T> for SyntheticInverter<T> {
    fn invert(&self, image: &Tensor<T>) -> Result<LatentCode<T>> {
        if image.shape() != (1, self.pinv.rows()) {
            return Err(RiddleError::shape(format!("1x{}", self.pinv.rows()), format!("{:?}", image.shape())));
        }
        let limit = T::lit(ATANH_CLAMP);
        let z = image.zip_map(&self.bias, |x, b| x.max(-limit).min(limit).atanh() - b);
        let flat = z.matmul(&self.pinv);
        LatentCode::new(flat.reshape(self.layout.levels(), self.dim)?, self.layout)
    }

    fn parameters(&self) -> Vec<&Tensor<T>> {
        vec![&self.bias, &self.pinv]
    }
}

/// Images rendered from standard-normal latents by a frozen generator.
pub struct SyntheticDataset<T> {
    images: Vec<Tensor<T>>,
}

impl<T: Scalar> SyntheticDataset<T> {
    pub fn new(generator: &dyn GeneratorBackend<T>, layout: ChunkLayout, seed: u64, size: usize) -> Self {
        let (_, dim) = generator.latent_shape();
        let mut rng = rng_for(seed, 5);
        let images = (0..size)
            .map(|_| generator.generate_value(&LatentCode::sample_with(&mut rng, layout, dim)))
            .collect();
        SyntheticDataset { images }
    }
}

impl<T: Scalar> ImageSource<T> for SyntheticDataset<T> {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn image(&self, index: usize) -> Tensor<T> {
        self.images[index].clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub image_dim: usize,
    /// Leading image entries read by the recognizer; the rest are attributes.
    pub identity_region: usize,
    pub embed_dim: usize,
    pub perceptual_dim: usize,
    pub parser_width: usize,
    /// Seed of a second recognizer used only for evaluation.
    pub eval_identity_seed: Option<u64>,
    pub dataset_seed: u64,
    pub dataset_size: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 2023,
            image_dim: 64,
            identity_region: 32,
            embed_dim: 32,
            perceptual_dim: 16,
            parser_width: 4,
            eval_identity_seed: None,
            dataset_seed: 7,
            dataset_size: 8192,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_dim < 2 || self.identity_region == 0 || self.identity_region >= self.image_dim {
            return Err(RiddleError::Config(format!(
                "identity_region must lie in 1..{} (image_dim {})",
                self.image_dim, self.image_dim
            )));
        }
        if self.embed_dim < 2 || self.perceptual_dim == 0 || self.parser_width == 0 {
            return Err(RiddleError::Config("embed_dim >= 2, perceptual_dim >= 1 and parser_width >= 1 required".into()));
        }
        Ok(())
    }

    pub fn build<T: Scalar>(&self, layout: ChunkLayout, dim: usize) -> Result<Backends<T>> {
        self.validate()?;
        let generator = synthetic_generator::<T>(self.seed, layout.levels(), dim, self.image_dim);
        let id_region = 0..self.identity_region;
        let attr_region = self.identity_region..self.image_dim;
        let identity = SyntheticIdentity::with_region(self.seed, id_region.clone(), self.embed_dim);
        let eval_identity = self
            .eval_identity_seed
            .map(|s| Arc::new(SyntheticIdentity::with_region(s, id_region.clone(), self.embed_dim)) as Arc<dyn IdentityBackend<T>>);
        let perceptual = SyntheticPerceptual::with_region(self.seed, attr_region.clone(), self.perceptual_dim);
        let parser = SyntheticParser::with_region(self.seed, attr_region, self.parser_width);
        let inverter = SyntheticInverter::new(&generator, layout)?;
        let dataset = SyntheticDataset::new(&generator, layout, self.dataset_seed, self.dataset_size);
        Ok(Backends {
            generator: Arc::new(generator),
            identity: Arc::new(identity),
            eval_identity,
            perceptual: Arc::new(perceptual),
            parser: Arc::new(parser),
            inverter: Some(Arc::new(inverter)),
            dataset: Some(Arc::new(dataset)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::cosine;

    fn layout() -> ChunkLayout {
        ChunkLayout::default_for(6).unwrap()
    }

    #[test]
    fn generator_is_deterministic_and_bounded() {
        let g1 = synthetic_generator::<f64>(3, 6, 32, 64);
        let g2 = synthetic_generator::<f64>(3, 6, 32, 64);
        let w = LatentCode::sample(1, layout(), 32);
        let a = g1.generate_value(&w);
        assert_eq!(a, g2.generate_value(&w));
        assert_eq!(a.shape(), (1, 64));
        let big = LatentCode::new(w.values().scale(50.0), layout()).unwrap();
        assert!(g1.generate_value(&big).data().iter().all(|&x| x > -1.0 && x < 1.0 || x.abs() == 1.0));
        assert!(a.data().iter().all(|&x| x.abs() < 1.0));
    }

    #[test]
    fn identity_is_unit_and_scale_invariant() {
        let id = synthetic_identity::<f64>(4, 64, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let x: Tensor<f64> = Tensor::randn(1, 64, 1.0, &mut rng);
            let e = id.embed_value(&x);
            assert!((e.norm() - 1.0).abs() < 1e-6);
            let e2 = id.embed_value(&x.scale(2.0));
            assert!(e.max_abs_diff(&e2) < 1e-12);
        }
    }

    #[test]
    fn parser_channels_cover_facial_parts() {
        let p = synthetic_parser::<f32>(1, 64, 4);
        for part in crate::losses::PARSING_PARTS {
            assert!(p.channel_names().iter().any(|c| c == part));
        }
        let mut g = Graph::new();
        let img = g.constant(Tensor::filled(1, 64, 0.5));
        let out = p.parse(&mut g, img);
        assert_eq!(g.shape(out), (6, 4));
    }

    #[test]
    fn inverter_recovers_generator_row_space() {
        let gen = synthetic_generator::<f64>(5, 6, 32, 64);
        let inv = SyntheticInverter::new(&gen, layout()).unwrap();
        let w = LatentCode::sample(2, layout(), 32);
        let img = gen.generate_value(&w);
        let w_hat = inv.invert(&img).unwrap();
        let img_hat = gen.generate_value(&w_hat);
        assert!(img.max_abs_diff(&img_hat) < 1e-8);
        assert!(w_hat.values().norm() <= w.values().norm() + 1e-9);
    }

    #[test]
    fn random_latents_get_dissimilar_identities() {
        let backends = SyntheticConfig::default().build::<f64>(layout(), 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut total = 0.0;
        for _ in 0..100 {
            let a = LatentCode::sample_with(&mut rng, layout(), 32);
            let b = LatentCode::sample_with(&mut rng, layout(), 32);
            let ea = backends.identity.embed_value(&backends.generator.generate_value(&a));
            let eb = backends.identity.embed_value(&backends.generator.generate_value(&b));
            total += cosine(ea.data(), eb.data()).abs();
        }
        assert!(total / 100.0 < 0.2, "mean |cos| {}", total / 100.0);
    }

    #[test]
    fn config_validation() {
        assert!(SyntheticConfig { identity_region: 64, ..Default::default() }.validate().is_err());
        assert!(SyntheticConfig { embed_dim: 1, ..Default::default() }.validate().is_err());
    }
}
