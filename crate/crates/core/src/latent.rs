//! Latent codes, passwords and the coarse/medium/fine level split.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, RiddleError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Number of generator levels in each of the coarse, medium and fine groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[usize; 3]", try_from = "[usize; 3]")]
pub struct ChunkLayout {
    coarse: usize,
    medium: usize,
    fine: usize,
}

impl ChunkLayout {
    pub fn new(coarse: usize, medium: usize, fine: usize) -> Result<Self> {
        if coarse == 0 || medium == 0 || fine == 0 {
            return Err(RiddleError::Layout(format!(
                "every chunk needs at least one level, got ({coarse}, {medium}, {fine})"
            )));
        }
        Ok(ChunkLayout {
            coarse,
            medium,
            fine,
        })
    }

    /// 4/4/10 for the usual 18-level latent, scaled proportionally otherwise.
    pub fn default_for(levels: usize) -> Result<Self> {
        if levels < 3 {
            return Err(RiddleError::Layout(format!("need at least 3 levels, got {levels}")));
        }
        if levels == 18 {
            return Self::new(4, 4, 10);
        }
        let share = ((levels as f64) * 4.0 / 18.0).round().max(1.0) as usize;
        let share = share.min((levels - 1) / 2);
        Self::new(share, share, levels - 2 * share)
    }

    pub fn levels(&self) -> usize {
        self.coarse + self.medium + self.fine
    }

    pub fn sizes(&self) -> [usize; 3] {
        [self.coarse, self.medium, self.fine]
    }

    pub fn coarse(&self) -> Range<usize> {
        0..self.coarse
    }

    pub fn medium(&self) -> Range<usize> {
        self.coarse..self.coarse + self.medium
    }

    pub fn fine(&self) -> Range<usize> {
        self.coarse + self.medium..self.levels()
    }

    pub fn ranges(&self) -> [Range<usize>; 3] {
        [self.coarse(), self.medium(), self.fine()]
    }
}

impl From<ChunkLayout> for [usize; 3] {
    fn from(l: ChunkLayout) -> Self {
        l.sizes()
    }
}

impl TryFrom<[usize; 3]> for ChunkLayout {
    type Error = RiddleError;

    fn try_from(v: [usize; 3]) -> Result<Self> {
        ChunkLayout::new(v[0], v[1], v[2])
    }
}

pub const CHUNK_NAMES: [&str; 3] = ["coarse", "medium", "fine"];

fn check_matrix<T: Scalar>(values: &Tensor<T>, layout: &ChunkLayout) -> Result<()> {
    if values.rows() != layout.levels() {
        return Err(RiddleError::Layout(format!(
            "layout covers {} levels but latent has {}",
            layout.levels(),
            values.rows()
        )));
    }
    if values.cols() == 0 {
        return Err(RiddleError::Validation("latent dimension must be >= 1".into()));
    }
    if !values.all_finite() {
        return Err(RiddleError::Validation("latent contains non-finite entries".into()));
    }
    Ok(())
}

/// An `L × D` style latent.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<T> {
    values: Tensor<T>,
    layout: ChunkLayout,
}

impl<T: Scalar> LatentCode<T> {
    pub fn new(values: Tensor<T>, layout: ChunkLayout) -> Result<Self> {
        check_matrix(&values, &layout)?;
        Ok(LatentCode { values, layout })
    }

    /// Standard-normal latent from a seeded stream.
    pub fn sample(seed: u64, layout: ChunkLayout, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::sample_with(&mut rng, layout, dim)
    }

    pub fn sample_with<R: rand::Rng + ?Sized>(rng: &mut R, layout: ChunkLayout, dim: usize) -> Self {
        LatentCode {
            values: Tensor::randn(layout.levels(), dim, 1.0, rng),
            layout,
        }
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<T> {
        self.values
    }

    pub fn layout(&self) -> ChunkLayout {
        self.layout
    }

    pub fn levels(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    /// Contiguous row blocks for the coarse, medium and fine levels.
    pub fn chunks(&self) -> [&[T]; 3] {
        chunk_rows(&self.values, &self.layout)
    }
}

fn chunk_rows<'a, T: Scalar>(values: &'a Tensor<T>, layout: &ChunkLayout) -> [&'a [T]; 3] {
    let d = values.cols();
    layout.ranges().map(|r| &values.data()[r.start * d..r.end * d])
}

/// Splits `w` into its three level groups. Concatenating the parts in order
/// gives back `w` exactly.
pub fn chunk_latent<T: Scalar>(w: &LatentCode<T>) -> Result<[Tensor<T>; 3]> {
    check_matrix(&w.values, &w.layout)?;
    Ok(w.layout
        .ranges()
        .map(|r| w.values.slice_rows(r.start, r.len())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Seed { seed: u64 },
    Passphrase { digest: String },
    /// `(1 − t)·p0 + t·p1`, only produced by interpolation sweeps.
    Blend { t: f64 },
}

/// A latent-shaped conditioning value.
#[derive(Debug, Clone, PartialEq)]
pub struct Password<T> {
    values: Tensor<T>,
    layout: ChunkLayout,
    provenance: Provenance,
}

impl<T: Scalar> Password<T> {
    pub fn from_parts(values: Tensor<T>, layout: ChunkLayout, provenance: Provenance) -> Result<Self> {
        check_matrix(&values, &layout)?;
        Ok(Password {
            values,
            layout,
            provenance,
        })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn layout(&self) -> ChunkLayout {
        self.layout
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn chunks(&self) -> [&[T]; 3] {
        chunk_rows(&self.values, &self.layout)
    }

    /// Linear blend of two passwords. The endpoints return exact copies.
    pub fn blend(p0: &Self, p1: &Self, t: f64) -> Result<Self> {
        if p0.values.shape() != p1.values.shape() || p0.layout != p1.layout {
            return Err(RiddleError::shape(
                format!("{:?}", p0.values.shape()),
                format!("{:?}", p1.values.shape()),
            ));
        }
        let values = if t == 0.0 {
            p0.values.clone()
        } else if t == 1.0 {
            p1.values.clone()
        } else {
            let (a, b) = (T::lit(1.0 - t), T::lit(t));
            p0.values.zip_map(&p1.values, |x, y| a * x + b * y)
        };
        Ok(Password {
            values,
            layout: p0.layout,
            provenance: Provenance::Blend { t },
        })
    }
}

/// Standard-normal password drawn from a seeded ChaCha stream.
pub fn sample_password<T: Scalar>(seed: u64, layout: ChunkLayout, dim: usize) -> Password<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Password {
        values: Tensor::randn(layout.levels(), dim, 1.0, &mut rng),
        layout,
        provenance: Provenance::Seed { seed },
    }
}

/// Counter-mode SHA-256 stream turned into standard normals by Box–Muller.
///
/// Block `i` is `SHA-256(digest ‖ i as u64 little-endian)`, read as four
/// little-endian `u64` words. Each word `x` becomes the uniform
/// `((x >> 11) + 1) · 2⁻⁵³ ∈ (0, 1]`, and consecutive uniform pairs
/// `(u1, u2)` yield `√(−2 ln u1)·cos(2πu2)` then `√(−2 ln u1)·sin(2πu2)`.
/// Transcendentals come from `libm` so the stream is identical on every
/// platform.
pub struct PassphraseStream {
    digest: [u8; 32],
    counter: u64,
    words: Vec<u64>,
    spare: Option<f64>,
}

impl PassphraseStream {
    pub fn new(digest: [u8; 32]) -> Self {
        PassphraseStream {
            digest,
            counter: 0,
            words: Vec::new(),
            spare: None,
        }
    }

    fn next_uniform(&mut self) -> f64 {
        if self.words.is_empty() {
            let mut h = Sha256::new();
            h.update(self.digest);
            h.update(self.counter.to_le_bytes());
            let block = h.finalize();
            self.counter += 1;
            // popped from the back, so push in reverse
            self.words = block
                .chunks_exact(8)
                .rev()
                .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
        }
        let x = self.words.pop().expect("refilled");
        ((x >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.next_uniform();
        let u2 = self.next_uniform();
        let r = (-2.0 * libm::log(u1)).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }
}

pub fn passphrase_digest(passphrase: &[u8]) -> [u8; 32] {
    Sha256::digest(passphrase).into()
}

/// Deterministic password from a passphrase.
pub fn derive_password<T: Scalar>(
    passphrase: &[u8],
    layout: ChunkLayout,
    dim: usize,
) -> Result<Password<T>> {
    if passphrase.is_empty() {
        return Err(RiddleError::Validation("passphrase must not be empty".into()));
    }
    if dim == 0 {
        return Err(RiddleError::Validation("latent dimension must be >= 1".into()));
    }
    let digest = passphrase_digest(passphrase);
    let mut stream = PassphraseStream::new(digest);
    let data = (0..layout.levels() * dim)
        .map(|_| T::lit(stream.next_normal()))
        .collect();
    Ok(Password {
        values: Tensor::from_vec(layout.levels(), dim, data)?,
        layout,
        provenance: Provenance::Passphrase {
            digest: hex::encode(digest),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PasswordKind {
    Passphrase,
    Seed,
}

/// On-disk password description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PasswordFile {
    pub kind: PasswordKind,
    pub value: String,
    pub layout: ChunkLayout,
    pub dim: usize,
}

impl PasswordFile {
    pub fn passphrase(value: impl Into<String>, layout: ChunkLayout, dim: usize) -> Self {
        PasswordFile {
            kind: PasswordKind::Passphrase,
            value: value.into(),
            layout,
            dim,
        }
    }

    pub fn seed(seed: u64, layout: ChunkLayout, dim: usize) -> Self {
        PasswordFile {
            kind: PasswordKind::Seed,
            value: seed.to_string(),
            layout,
            dim,
        }
    }

    pub fn to_password<T: Scalar>(&self) -> Result<Password<T>> {
        match self.kind {
            PasswordKind::Passphrase => derive_password(self.value.as_bytes(), self.layout, self.dim),
            PasswordKind::Seed => {
                let seed: u64 = self.value.trim().parse().map_err(|_| {
                    RiddleError::Validation(format!("seed password value `{}` is not a u64", self.value))
                })?;
                if self.dim == 0 {
                    return Err(RiddleError::Validation("latent dimension must be >= 1".into()));
                }
                Ok(sample_password(seed, self.layout, self.dim))
            }
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("password file serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| RiddleError::Integrity(format!("unreadable password file: {e}")))
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| RiddleError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn write(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::archive::write_atomic(path.as_ref(), self.to_json().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_layouts() {
        assert_eq!(ChunkLayout::default_for(18).unwrap().sizes(), [4, 4, 10]);
        assert_eq!(ChunkLayout::default_for(6).unwrap().sizes(), [1, 1, 4]);
        assert_eq!(ChunkLayout::default_for(3).unwrap().sizes(), [1, 1, 1]);
        assert!(ChunkLayout::default_for(2).is_err());
        assert!(ChunkLayout::new(0, 1, 2).is_err());
    }

    #[test]
    fn chunk_shapes_18x512() {
        let layout = ChunkLayout::new(4, 4, 10).unwrap();
        let w = LatentCode::<f32>::sample(1, layout, 512);
        let [c, m, f] = chunk_latent(&w).unwrap();
        assert_eq!(c.shape(), (4, 512));
        assert_eq!(m.shape(), (4, 512));
        assert_eq!(f.shape(), (10, 512));
    }

    #[test]
    fn chunk_minimal_rows() {
        let layout = ChunkLayout::new(1, 1, 1).unwrap();
        let values = Tensor::from_vec(3, 2, vec![0.0f64, 0.5, 1.0, 1.5, 2.0, 2.5]).unwrap();
        let w = LatentCode::new(values, layout).unwrap();
        let [a, b, c] = chunk_latent(&w).unwrap();
        assert_eq!(a.data(), &[0.0, 0.5]);
        assert_eq!(b.data(), &[1.0, 1.5]);
        assert_eq!(c.data(), &[2.0, 2.5]);
        assert_eq!(w.chunks()[2], &[2.0, 2.5]);
    }

    #[test]
    fn latent_rejects_mismatched_layout_and_nan() {
        let layout = ChunkLayout::new(1, 1, 1).unwrap();
        assert!(LatentCode::new(Tensor::<f32>::zeros(4, 2), layout).is_err());
        let mut t = Tensor::<f32>::zeros(3, 2);
        t[(1, 1)] = f32::NAN;
        assert!(matches!(LatentCode::new(t, layout), Err(RiddleError::Validation(_))));
    }

    #[test]
    fn sampled_passwords_are_seed_deterministic() {
        let layout = ChunkLayout::default_for(6).unwrap();
        let a = sample_password::<f32>(7, layout, 32);
        let b = sample_password::<f32>(7, layout, 32);
        let c = sample_password::<f32>(8, layout, 32);
        assert_eq!(a, b);
        assert!(a.values().max_abs_diff(c.values()) > 0.0);
        assert_eq!(a.values().shape(), (6, 32));
        assert_eq!(a.provenance(), &Provenance::Seed { seed: 7 });
    }

    #[test]
    fn derived_passwords() {
        let layout = ChunkLayout::default_for(18).unwrap();
        let a = derive_password::<f64>(b"alice", layout, 512).unwrap();
        let b = derive_password::<f64>(b"alice", layout, 512).unwrap();
        assert!(a.values().data().iter().zip(b.values().data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = derive_password::<f64>(b"alicf", layout, 512).unwrap();
        let differ = a.values().data().iter().zip(c.values().data()).filter(|(x, y)| x != y).count();
        assert!(differ as f64 > 0.99 * a.values().len() as f64);
        assert!(matches!(
            derive_password::<f32>(b"", layout, 512),
            Err(RiddleError::Validation(_))
        ));
    }

    #[test]
    fn derived_password_golden_values() {
        // computed independently with Python's hashlib and math modules
        let golden = [
            -0.02904626107122238,
            0.4854670822509272,
            0.14698057921886612,
            1.0837733295770744,
            -1.2579703191730551,
            0.32271916989983007,
            0.33140713822457557,
            1.7685131664020866,
        ];
        let layout = ChunkLayout::new(1, 1, 1).unwrap();
        let p = derive_password::<f64>(b"alice", layout, 8).unwrap();
        assert_eq!(
            p.provenance(),
            &Provenance::Passphrase {
                digest: "2bd806c97f0e00af1a1fc3328fa763a9269723c8db8fac4f93af71db186d6e90".into()
            }
        );
        for (got, want) in p.values().data().iter().zip(golden) {
            assert!((got - want).abs() <= 1e-14 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn derived_stream_looks_standard_normal() {
        let mut s = PassphraseStream::new(passphrase_digest(b"moments"));
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| s.next_normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "{mean}");
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn password_file_roundtrip_bytes() {
        let layout = ChunkLayout::new(1, 1, 4).unwrap();
        for pf in [PasswordFile::passphrase("hunter2", layout, 32), PasswordFile::seed(42, layout, 32)] {
            let text = pf.to_json();
            let back = PasswordFile::from_json(&text).unwrap();
            assert_eq!(back, pf);
            assert_eq!(back.to_json(), text);
        }
        let p: Password<f32> = PasswordFile::seed(42, layout, 32).to_password().unwrap();
        assert_eq!(p, sample_password(42, layout, 32));
        assert!(PasswordFile::from_json(r#"{"kind":"seed","value":"x","layout":[1,1,4],"dim":32,"extra":1}"#).is_err());
        assert!(PasswordFile::from_json(r#"{"kind":"seed","value":"1","layout":[0,1,4],"dim":32}"#).is_err());
    }

    #[test]
    fn blend_endpoints_are_exact() {
        let layout = ChunkLayout::new(1, 1, 1).unwrap();
        let p0 = sample_password::<f32>(1, layout, 4);
        let p1 = sample_password::<f32>(2, layout, 4);
        assert_eq!(Password::blend(&p0, &p1, 0.0).unwrap().values(), p0.values());
        assert_eq!(Password::blend(&p0, &p1, 1.0).unwrap().values(), p1.values());
    }

    proptest! {
        #[test]
        fn chunk_concat_roundtrip(c in 1usize..5, m in 1usize..5, f in 1usize..8, d in 1usize..9, seed in any::<u64>()) {
            let layout = ChunkLayout::new(c, m, f).unwrap();
            let w = LatentCode::<f64>::sample(seed, layout, d);
            let parts = chunk_latent(&w).unwrap();
            let refs: Vec<&Tensor<f64>> = parts.iter().collect();
            prop_assert_eq!(&Tensor::concat_rows(&refs).unwrap(), w.values());
        }
    }
}
