//! Training objective terms.
//!
//! Every term exists twice: as a plain function over values, used by
//! evaluation and tests, and as a differentiable builder in [`graph`], used
//! by the training step.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RiddleError};
use crate::latent::LatentCode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn unit_tolerance<T: Scalar>() -> f64 {
    (16.0 * T::epsilon().as_f64()).max(1e-6)
}

/// Checks that `v` has unit norm and returns it renormalized.
fn checked_unit<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(RiddleError::Validation("empty embedding".into()));
    }
    let norm = v.iter().fold(T::zero(), |s, &x| s + x * x).sqrt();
    if !norm.is_finite() || (norm.as_f64() - 1.0).abs() > unit_tolerance::<T>() {
        return Err(RiddleError::Validation(format!(
            "embedding is not L2-normalized (norm {norm})"
        )));
    }
    Ok(v.iter().map(|&x| x / norm).collect())
}

fn stack_units<T: Scalar>(embeds: &[&[T]]) -> Result<Tensor<T>> {
    let dim = embeds.first().map_or(0, |e| e.len());
    let mut data = Vec::with_capacity(embeds.len() * dim);
    for e in embeds {
        if e.len() != dim {
            return Err(RiddleError::shape(format!("embedding of length {dim}"), e.len()));
        }
        data.extend(checked_unit(e)?);
    }
    Tensor::from_vec(embeds.len(), dim, data)
}

/// Cosine similarity of two vectors (not assumed normalized).
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let dot = a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y);
    let na = a.iter().fold(T::zero(), |s, &x| s + x * x).sqrt();
    let nb = b.iter().fold(T::zero(), |s, &x| s + x * x).sqrt();
    dot / (na * nb)
}

/// Pairwise clamped cosine matrix `M[i][j] = max(ε, cos(eᵢ, eⱼ))`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix<T> {
    values: Tensor<T>,
    epsilon: T,
}

impl<T: Scalar> SimilarityMatrix<T> {
    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn epsilon(&self) -> T {
        self.epsilon
    }

    pub fn size(&self) -> usize {
        self.values.rows()
    }
}

pub fn similarity_matrix<T: Scalar>(embeds: &[&[T]], epsilon: T) -> Result<SimilarityMatrix<T>> {
    if embeds.len() < 2 {
        return Err(RiddleError::Validation(format!(
            "similarity matrix needs at least 2 embeddings, got {}",
            embeds.len()
        )));
    }
    let stacked = stack_units(embeds)?;
    let values = stacked.matmul_t(&stacked).map(|c| c.max(epsilon));
    Ok(SimilarityMatrix { values, epsilon })
}

/// Off-diagonal sum of `M` divided by `m²(n+1)²`.
pub fn diversity_loss<T: Scalar>(m_mat: &SimilarityMatrix<T>, m: usize, n: usize) -> Result<T> {
    let k = m * (n + 1);
    if m == 0 || n == 0 || m_mat.size() != k {
        return Err(RiddleError::Validation(format!(
            "similarity matrix has {} rows, expected m(n+1) = {k}",
            m_mat.size()
        )));
    }
    let v = &m_mat.values;
    let trace = (0..k).fold(T::zero(), |s, i| s + v[(i, i)]);
    Ok((v.sum() - trace) / T::lit((k * k) as f64))
}

/// `Σᵢ max(ε, cos(orig, eᵢ))` over the de-identified embeddings.
pub fn deid_loss<T: Scalar>(orig: &[T], deid: &[&[T]], epsilon: T) -> Result<T> {
    let o = checked_unit(orig)?;
    let stacked = stack_units(deid)?;
    if stacked.cols() != o.len() && !deid.is_empty() {
        return Err(RiddleError::shape(o.len(), stacked.cols()));
    }
    Ok((0..stacked.rows())
        .map(|i| dot(stacked.row(i), &o).max(epsilon))
        .sum())
}

/// `Σᵢ (1 − cos(orig, eᵢ))` over the correctly decrypted embeddings.
pub fn recovery_loss<T: Scalar>(orig: &[T], correct: &[&[T]]) -> Result<T> {
    let o = checked_unit(orig)?;
    let stacked = stack_units(correct)?;
    if stacked.cols() != o.len() && !correct.is_empty() {
        return Err(RiddleError::shape(o.len(), stacked.cols()));
    }
    Ok((0..stacked.rows())
        .map(|i| T::one() - dot(stacked.row(i), &o))
        .sum())
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(RiddleError::shape(format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
}

/// Mean absolute difference over all elements.
pub fn pixel_loss<T: Scalar>(x: &Tensor<T>, x_star: &Tensor<T>) -> Result<T> {
    same_shape(x, x_star)?;
    if x.is_empty() {
        return Err(RiddleError::Validation("empty image".into()));
    }
    let total: T = x.data().iter().zip(x_star.data()).map(|(&a, &b)| (a - b).abs()).sum();
    Ok(total / T::lit(x.len() as f64))
}

/// L2 distance between perceptual feature vectors.
pub fn perceptual_loss<T: Scalar>(feat: &Tensor<T>, feat_star: &Tensor<T>) -> Result<T> {
    same_shape(feat, feat_star)?;
    Ok(feat.zip_map(feat_star, |a, b| a - b).norm())
}

/// Channels of a parsing map that enter the parsing loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelMask {
    selected: Vec<bool>,
}

impl ChannelMask {
    pub fn new(selected: Vec<bool>) -> Result<Self> {
        if !selected.iter().any(|&s| s) {
            return Err(RiddleError::Validation("channel mask selects no channels".into()));
        }
        Ok(ChannelMask { selected })
    }

    /// Selects the channels whose names appear in `wanted`.
    pub fn from_names(channels: &[String], wanted: &[&str]) -> Result<Self> {
        Self::new(channels.iter().map(|c| wanted.contains(&c.as_str())).collect())
    }

    pub fn channels(&self) -> usize {
        self.selected.len()
    }

    pub fn is_selected(&self, c: usize) -> bool {
        self.selected[c]
    }

    /// Row mask (`channels × width`) usable with an elementwise product.
    pub fn as_tensor<T: Scalar>(&self, width: usize) -> Tensor<T> {
        let mut t = Tensor::zeros(self.selected.len(), width);
        for (c, &s) in self.selected.iter().enumerate() {
            if s {
                for j in 0..width {
                    t[(c, j)] = T::one();
                }
            }
        }
        t
    }
}

/// Facial-part channels the parsing loss looks at.
pub const PARSING_PARTS: [&str; 4] = ["eyes", "ears", "mouth", "nose"];

/// L2 distance between parsing maps restricted to the masked channels.
pub fn parsing_loss<T: Scalar>(parse: &Tensor<T>, parse_star: &Tensor<T>, mask: &ChannelMask) -> Result<T> {
    same_shape(parse, parse_star)?;
    if parse.rows() != mask.channels() {
        return Err(RiddleError::shape(format!("{} channels", mask.channels()), parse.rows()));
    }
    let mut total = T::zero();
    for c in (0..parse.rows()).filter(|&c| mask.is_selected(c)) {
        for (&a, &b) in parse.row(c).iter().zip(parse_star.row(c)) {
            total = total + (a - b) * (a - b);
        }
    }
    Ok(total.sqrt())
}

/// `Σ ‖w − w*‖₂` over all encrypted and decrypted codes.
pub fn latent_reg_loss<T: Scalar>(w: &LatentCode<T>, w_stars: &[&LatentCode<T>]) -> Result<T> {
    let mut total = T::zero();
    for ws in w_stars {
        same_shape(w.values(), ws.values())?;
        total = total + w.values().zip_map(ws.values(), |a, b| a - b).norm();
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub pix: f64,
    pub lpips: f64,
    pub parse: f64,
    pub latent: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            pix: 0.05,
            lpips: 1.0,
            parse: 0.1,
            latent: 0.01,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            pix: 0.0,
            lpips: 0.0,
            parse: 0.0,
            latent: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("pix", self.pix), ("lpips", self.lpips), ("parse", self.parse), ("latent", self.latent)] {
            if !v.is_finite() || v < 0.0 {
                return Err(RiddleError::Config(format!("loss weight `{name}` must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub div: f64,
    pub deid: f64,
    pub rec: f64,
    pub pix: f64,
    pub lpips: f64,
    pub parse: f64,
    pub latent: f64,
}

impl LossParts {
    pub fn named(&self) -> [(&'static str, f64); 7] {
        [
            ("div", self.div),
            ("deid", self.deid),
            ("rec", self.rec),
            ("pix", self.pix),
            ("lpips", self.lpips),
            ("parse", self.parse),
            ("latent", self.latent),
        ]
    }
}

/// Identity loss plus the weighted quality and regularization terms.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> f64 {
    let identity = parts.div + parts.deid + parts.rec;
    identity
        + weights.pix * parts.pix
        + weights.lpips * parts.lpips
        + weights.parse * parts.parse
        + weights.latent * parts.latent
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub div: f64,
    pub deid: f64,
    pub rec: f64,
    pub pix: f64,
    pub lpips: f64,
    pub parse: f64,
    pub latent: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(parts: LossParts, weights: &LossWeights) -> Self {
        LossReport {
            div: parts.div,
            deid: parts.deid,
            rec: parts.rec,
            pix: parts.pix,
            lpips: parts.lpips,
            parse: parts.parse,
            latent: parts.latent,
            total: total_loss(&parts, weights),
        }
    }

    pub fn parts(&self) -> LossParts {
        LossParts {
            div: self.div,
            deid: self.deid,
            rec: self.rec,
            pix: self.pix,
            lpips: self.lpips,
            parse: self.parse,
            latent: self.latent,
        }
    }

    /// One metrics-log line, without the trailing newline.
    pub fn to_json_line(&self, step: usize) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            step: usize,
            #[serde(flatten)]
            report: &'a LossReport,
        }
        serde_json::to_string(&Line { step, report: self }).expect("report serializes")
    }
}

/// Differentiable versions of the terms.
pub mod graph {
    use crate::graph::{Graph, Var};
    use crate::scalar::Scalar;
    use crate::tensor::Tensor;

    use super::ChannelMask;

    /// Diversity term over the `K × E` matrix of unit embeddings.
    pub fn diversity<T: Scalar>(g: &mut Graph<T>, embeds: Var, m: usize, n: usize, epsilon: T) -> Var {
        let k = g.shape(embeds).0;
        debug_assert_eq!(k, m * (n + 1));
        let sims = g.matmul_t(embeds, embeds);
        let clamped = g.clamp_min(sims, epsilon);
        let mut off_diag = Tensor::filled(k, k, T::one());
        for i in 0..k {
            off_diag[(i, i)] = T::zero();
        }
        let masked = g.mul_const(clamped, off_diag);
        let total = g.sum(masked);
        g.scale(total, T::lit(1.0 / ((m * m * (n + 1) * (n + 1)) as f64)))
    }

    /// De-identification term; `orig` is `1 × E`, `embeds` is `K × E`.
    pub fn deid<T: Scalar>(g: &mut Graph<T>, orig: Var, embeds: Var, epsilon: T) -> Var {
        let cos = g.matmul_t(embeds, orig);
        let clamped = g.clamp_min(cos, epsilon);
        g.sum(clamped)
    }

    /// Recovery term; `correct` is `m × E`.
    pub fn recovery<T: Scalar>(g: &mut Graph<T>, orig: Var, correct: Var) -> Var {
        let m = g.shape(correct).0;
        let cos = g.matmul_t(correct, orig);
        let total = g.sum(cos);
        let count = g.constant(Tensor::scalar(T::lit(m as f64)));
        g.sub(count, total)
    }

    pub fn pixel<T: Scalar>(g: &mut Graph<T>, x: Var, x_star: Var) -> Var {
        let d = g.sub(x, x_star);
        let a = g.abs(d);
        g.mean(a)
    }

    pub fn l2<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
        let d = g.sub(a, b);
        g.norm(d)
    }

    pub fn parsing<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, mask: &ChannelMask) -> Var {
        let width = g.shape(a).1;
        let d = g.sub(a, b);
        let masked = g.mul_const(d, mask.as_tensor(width));
        g.norm(masked)
    }
}
