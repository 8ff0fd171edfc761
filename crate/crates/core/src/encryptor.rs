//! The latent encryptor.
//!
//! Each level group (coarse, medium, fine) of the code is processed by its
//! own stack of transformer blocks in which the code rows attend to the
//! password rows of the same group. The block outputs are stacked back into
//! an `L × D` matrix, projected row-wise by a fully connected layer and added
//! to the input code. Encryption and decryption are the same call.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RiddleError};
use crate::graph::{Graph, Var};
use crate::latent::{ChunkLayout, LatentCode, Password, CHUNK_NAMES};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Per-level cross-attention blocks.
    #[default]
    Transformer,
    /// Three leaky-ReLU fully connected layers on `[code row ‖ password row]`.
    Mlp,
}

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncryptorConfig {
    pub levels: usize,
    pub dim: usize,
    pub layout: ChunkLayout,
    pub heads: usize,
    pub depth: usize,
    pub hidden_dim: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub variant: Variant,
    /// Standard-deviation scale of the output layer at init. Small values
    /// keep the untrained encryptor close to the identity map.
    #[serde(default = "default_init_gain")]
    pub init_gain: f64,
}

fn default_init_gain() -> f64 {
    0.01
}

impl EncryptorConfig {
    /// Small configuration used throughout the test suite.
    pub fn toy() -> Self {
        Self::with_dims(6, 32)
    }

    pub fn with_dims(levels: usize, dim: usize) -> Self {
        EncryptorConfig {
            levels,
            dim,
            layout: ChunkLayout::default_for(levels).expect("levels >= 3"),
            heads: 4,
            depth: 1,
            hidden_dim: 4 * dim,
            seed: 0,
            variant: Variant::Transformer,
            init_gain: default_init_gain(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layout.levels() != self.levels {
            return Err(RiddleError::Config(format!(
                "layout {:?} covers {} levels, config says {}",
                self.layout.sizes(),
                self.layout.levels(),
                self.levels
            )));
        }
        if self.dim == 0 || self.hidden_dim == 0 {
            return Err(RiddleError::Config("dim and hidden_dim must be positive".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(RiddleError::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if !self.init_gain.is_finite() || self.init_gain < 0.0 {
            return Err(RiddleError::Config(format!("init_gain must be finite and >= 0, got {}", self.init_gain)));
        }
        if self.depth == 0 {
            return Err(RiddleError::Config("depth must be >= 1".into()));
        }
        Ok(())
    }

    /// Parameter names with their shapes and initial standard deviations
    /// (`None` marks ones-initialized scale vectors).
    fn schema(&self) -> Vec<(String, (usize, usize), Init)> {
        let (d, h) = (self.dim, self.hidden_dim);
        let gain2 = self.init_gain * self.init_gain;
        let mut out = Vec::new();
        match self.variant {
            Variant::Transformer => {
                for level in CHUNK_NAMES {
                    for b in 0..self.depth {
                        let p = format!("{level}.block{b}");
                        for ln in ["ln_q", "ln_kv", "ln_ff"] {
                            out.push((format!("{p}.{ln}.gamma"), (1, d), Init::Ones));
                            out.push((format!("{p}.{ln}.beta"), (1, d), Init::Zeros));
                        }
                        for w in ["wq", "wk", "wv", "wo"] {
                            out.push((format!("{p}.attn.{w}"), (d, d), Init::Normal(1.0 / d as f64)));
                        }
                        for bias in ["bq", "bk", "bv", "bo"] {
                            out.push((format!("{p}.attn.{bias}"), (1, d), Init::Zeros));
                        }
                        out.push((format!("{p}.ff.w1"), (d, h), Init::Normal(1.0 / d as f64)));
                        out.push((format!("{p}.ff.b1"), (1, h), Init::Zeros));
                        out.push((format!("{p}.ff.w2"), (h, d), Init::Normal(1.0 / h as f64)));
                        out.push((format!("{p}.ff.b2"), (1, d), Init::Zeros));
                    }
                }
                out.push(("proj.weight".into(), (d, d), Init::Normal(gain2 / d as f64)));
                out.push(("proj.bias".into(), (1, d), Init::Zeros));
            }
            Variant::Mlp => {
                out.push(("mlp.fc1.weight".into(), (2 * d, h), Init::Normal(2.0 / (2 * d) as f64)));
                out.push(("mlp.fc1.bias".into(), (1, h), Init::Zeros));
                out.push(("mlp.fc2.weight".into(), (h, h), Init::Normal(2.0 / h as f64)));
                out.push(("mlp.fc2.bias".into(), (1, h), Init::Zeros));
                out.push(("mlp.fc3.weight".into(), (h, d), Init::Normal(gain2 / h as f64)));
                out.push(("mlp.fc3.bias".into(), (1, d), Init::Zeros));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    /// Normal with the given variance.
    Normal(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncryptorState<T> {
    config: EncryptorConfig,
    params: BTreeMap<String, Tensor<T>>,
}

/// Parameters registered on a [`Graph`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl<T: Scalar> EncryptorState<T> {
    pub fn init(config: EncryptorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = config
            .schema()
            .into_iter()
            .map(|(name, (r, c), init)| {
                let t = match init {
                    Init::Zeros => Tensor::zeros(r, c),
                    Init::Ones => Tensor::filled(r, c, T::one()),
                    Init::Normal(var) => Tensor::randn(r, c, var.sqrt(), &mut rng),
                };
                (name, t)
            })
            .collect();
        Ok(EncryptorState { config, params })
    }

    /// Rebuilds a state from stored parameters, checking them against the schema.
    pub fn from_parts(config: EncryptorConfig, params: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let schema = config.schema();
        if schema.len() != params.len() {
            return Err(RiddleError::Integrity(format!(
                "expected {} parameters, found {}",
                schema.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &schema {
            match params.get(name) {
                Some(t) if t.shape() == *shape => {
                    if !t.all_finite() {
                        return Err(RiddleError::Integrity(format!("parameter `{name}` is not finite")));
                    }
                }
                Some(t) => {
                    return Err(RiddleError::Integrity(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(RiddleError::Integrity(format!("missing parameter `{name}`"))),
            }
        }
        Ok(EncryptorState { config, params })
    }

    pub fn config(&self) -> &EncryptorConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Registers every parameter on `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    fn check_inputs(&self, w: &LatentCode<T>, p: &Password<T>) -> Result<()> {
        let expect = format!("{}x{} latent with layout {:?}", self.config.levels, self.config.dim, self.config.layout.sizes());
        for (shape, layout) in [(w.values().shape(), w.layout()), (p.values().shape(), p.layout())] {
            if shape != (self.config.levels, self.config.dim) || layout != self.config.layout {
                return Err(RiddleError::shape(&expect, format!("{}x{} with layout {:?}", shape.0, shape.1, layout.sizes())));
            }
        }
        Ok(())
    }

    /// Runs the encryptor on `(w, p)`. Decryption is this same call with an
    /// encrypted code as `w`.
    pub fn forward(&self, w: &LatentCode<T>, p: &Password<T>) -> Result<LatentCode<T>> {
        self.check_inputs(w, p)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let wv = g.constant(w.values().clone());
        let pv = g.constant(p.values().clone());
        let out = self.forward_graph(&mut g, &bound, wv, pv);
        LatentCode::new(g.value(out).clone(), self.config.layout)
    }

    /// Same as [`forward`](Self::forward) but insists on the MLP ablation variant.
    pub fn forward_mlp(&self, w: &LatentCode<T>, p: &Password<T>) -> Result<LatentCode<T>> {
        if self.config.variant != Variant::Mlp {
            return Err(RiddleError::Config("state is not an MLP encryptor".into()));
        }
        self.forward(w, p)
    }

    /// Differentiable forward pass on `L × D` nodes.
    pub fn forward_graph(&self, g: &mut Graph<T>, bound: &BoundParams, w: Var, p: Var) -> Var {
        debug_assert_eq!(g.shape(w), (self.config.levels, self.config.dim));
        debug_assert_eq!(g.shape(p), (self.config.levels, self.config.dim));
        let delta = match self.config.variant {
            Variant::Transformer => self.transformer_delta(g, bound, w, p),
            Variant::Mlp => self.mlp_delta(g, bound, w, p),
        };
        g.add(w, delta)
    }

    fn transformer_delta(&self, g: &mut Graph<T>, bound: &BoundParams, w: Var, p: Var) -> Var {
        let mut level_outputs = Vec::with_capacity(3);
        for (level, range) in CHUNK_NAMES.iter().zip(self.config.layout.ranges()) {
            let mut x = g.slice_rows(w, range.start, range.len());
            let key = g.slice_rows(p, range.start, range.len());
            for b in 0..self.config.depth {
                x = self.block(g, bound, &format!("{level}.block{b}"), x, key);
            }
            level_outputs.push(x);
        }
        let stacked = g.concat_rows(&level_outputs);
        let proj = g.matmul(stacked, bound.get("proj.weight"));
        g.add_row(proj, bound.get("proj.bias"))
    }

    fn block(&self, g: &mut Graph<T>, bound: &BoundParams, prefix: &str, x: Var, key: Var) -> Var {
        let param = |name: &str| bound.get(&format!("{prefix}.{name}"));
        let xq = affine_norm(g, x, param("ln_q.gamma"), param("ln_q.beta"));
        let kv = affine_norm(g, key, param("ln_kv.gamma"), param("ln_kv.beta"));
        let q = linear(g, xq, param("attn.wq"), param("attn.bq"));
        let k = linear(g, kv, param("attn.wk"), param("attn.bk"));
        let v = linear(g, kv, param("attn.wv"), param("attn.bv"));

        let heads = self.config.heads;
        let dh = self.config.dim / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            head_outputs.push(g.matmul(attn, vh));
        }
        let merged = if heads == 1 {
            head_outputs[0]
        } else {
            g.concat_cols(&head_outputs)
        };
        let attended = linear(g, merged, param("attn.wo"), param("attn.bo"));
        let x = g.add(x, attended);

        let xn = affine_norm(g, x, param("ln_ff.gamma"), param("ln_ff.beta"));
        let hidden = linear(g, xn, param("ff.w1"), param("ff.b1"));
        let hidden = g.gelu(hidden);
        let ff = linear(g, hidden, param("ff.w2"), param("ff.b2"));
        g.add(x, ff)
    }

    fn mlp_delta(&self, g: &mut Graph<T>, bound: &BoundParams, w: Var, p: Var) -> Var {
        let slope = T::lit(LEAKY_SLOPE);
        let input = g.concat_cols(&[w, p]);
        let h = linear(g, input, bound.get("mlp.fc1.weight"), bound.get("mlp.fc1.bias"));
        let h = g.leaky_relu(h, slope);
        let h = linear(g, h, bound.get("mlp.fc2.weight"), bound.get("mlp.fc2.bias"));
        let h = g.leaky_relu(h, slope);
        linear(g, h, bound.get("mlp.fc3.weight"), bound.get("mlp.fc3.bias"))
    }
}

fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Var {
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

fn affine_norm<T: Scalar>(g: &mut Graph<T>, x: Var, gamma: Var, beta: Var) -> Var {
    let n = g.layer_norm_rows(x);
    let n = g.mul_row(n, gamma);
    g.add_row(n, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::sample_password;

    fn toy<T: Scalar>(variant: Variant) -> EncryptorState<T> {
        let mut cfg = EncryptorConfig::toy();
        cfg.variant = variant;
        cfg.seed = 11;
        EncryptorState::init(cfg).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = toy::<f32>(Variant::Transformer);
        let b = toy::<f32>(Variant::Transformer);
        assert_eq!(a, b);
        let mut cfg = a.config().clone();
        cfg.seed = 12;
        assert_ne!(EncryptorState::<f32>::init(cfg).unwrap(), a);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut cfg = EncryptorConfig::with_dims(18, 512);
        cfg.heads = 3;
        assert!(matches!(EncryptorState::<f32>::init(cfg), Err(RiddleError::Config(_))));
        let mut cfg = EncryptorConfig::toy();
        cfg.depth = 0;
        assert!(EncryptorState::<f32>::init(cfg).is_err());
    }

    #[test]
    fn parameter_count_closed_form() {
        for (levels, dim, heads, depth, hidden) in [(6, 32, 4, 1, 128), (6, 32, 2, 3, 16), (18, 64, 8, 2, 256)] {
            let mut cfg = EncryptorConfig::with_dims(levels, dim);
            cfg.heads = heads;
            cfg.depth = depth;
            cfg.hidden_dim = hidden;
            let (d, h) = (dim, hidden);
            // per block: 3 layer norms (2d each), 4 d×d attention maps with
            // biases, and the d→h→d feed-forward with biases
            let per_block = 3 * 2 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d);
            let expected = 3 * depth * per_block + d * d + d;
            assert_eq!(EncryptorState::<f32>::init(cfg.clone()).unwrap().param_count(), expected);

            cfg.variant = Variant::Mlp;
            let mlp = (2 * d * h + h) + (h * h + h) + (h * d + d);
            assert_eq!(EncryptorState::<f32>::init(cfg).unwrap().param_count(), mlp);
        }
    }

    #[test]
    fn forward_shape_and_determinism() {
        for variant in [Variant::Transformer, Variant::Mlp] {
            let s = toy::<f32>(variant);
            let layout = s.config().layout;
            let w = LatentCode::sample(1, layout, 32);
            let p = sample_password(2, layout, 32);
            let a = s.forward(&w, &p).unwrap();
            let b = s.forward(&w, &p).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.values().shape(), (6, 32));
        }
    }

    #[test]
    fn forward_rejects_wrong_shapes() {
        let s = toy::<f32>(Variant::Transformer);
        let other = ChunkLayout::new(2, 2, 2).unwrap();
        let w = LatentCode::sample(1, other, 32);
        let p = sample_password(2, other, 32);
        assert!(matches!(s.forward(&w, &p), Err(RiddleError::Shape { .. })));
        let layout = s.config().layout;
        let w = LatentCode::sample(1, layout, 16);
        let p = sample_password(2, layout, 16);
        assert!(s.forward(&w, &p).is_err());
        assert!(s.forward_mlp(&LatentCode::sample(1, layout, 32), &sample_password(2, layout, 32)).is_err());
    }

    #[test]
    fn untrained_state_is_near_identity_but_password_sensitive() {
        let s = toy::<f64>(Variant::Transformer);
        let layout = s.config().layout;
        let w = LatentCode::sample(3, layout, 32);
        let out1 = s.forward(&w, &sample_password(4, layout, 32)).unwrap();
        let out2 = s.forward(&w, &sample_password(5, layout, 32)).unwrap();
        let rel = (out1.values().zip_map(w.values(), |a, b| a - b)).norm() / w.values().norm();
        assert!(rel < 0.05, "{rel}");
        assert!(out1.values().max_abs_diff(out2.values()) > 1e-8);
    }

    #[test]
    fn outputs_finite_for_bounded_inputs() {
        let s = toy::<f32>(Variant::Transformer);
        let layout = s.config().layout;
        let w = LatentCode::new(Tensor::filled(6, 32, 10.0), layout).unwrap();
        let p = Password::from_parts(Tensor::filled(6, 32, -10.0), layout, crate::latent::Provenance::Seed { seed: 0 }).unwrap();
        assert!(s.forward(&w, &p).unwrap().values().all_finite());
    }

    #[test]
    fn from_parts_checks_schema() {
        let s = toy::<f32>(Variant::Transformer);
        let mut params = s.params().clone();
        assert!(EncryptorState::from_parts(s.config().clone(), params.clone()).is_ok());
        params.remove("proj.bias");
        assert!(matches!(EncryptorState::from_parts(s.config().clone(), params), Err(RiddleError::Integrity(_))));
    }
}
