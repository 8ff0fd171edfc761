//! Identification rates, identity-diversity statistics and password sweeps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{Backends, GeneratorBackend, IdentityBackend};
use crate::encryptor::EncryptorState;
use crate::error::{Result, RiddleError};
use crate::latent::{sample_password, LatentCode, Password};
use crate::losses::cosine;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationPair<T> {
    pub embed_a: Vec<T>,
    pub embed_b: Vec<T>,
    pub same_source: bool,
}

impl<T: Scalar> VerificationPair<T> {
    pub fn new(embed_a: Vec<T>, embed_b: Vec<T>, same_source: bool) -> Self {
        VerificationPair {
            embed_a,
            embed_b,
            same_source,
        }
    }

    pub fn cosine(&self) -> f64 {
        cosine(&self.embed_a, &self.embed_b).as_f64()
    }
}

/// Fraction of pairs whose cosine reaches `threshold`.
pub fn identification_rate<T: Scalar>(pairs: &[VerificationPair<T>], threshold: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(RiddleError::Validation("identification rate of an empty pair list".into()));
    }
    if !(threshold > -1.0 && threshold < 1.0) {
        return Err(RiddleError::Validation(format!("threshold must lie in (-1, 1), got {threshold}")));
    }
    let hits = pairs.iter().filter(|p| p.cosine() >= threshold).count();
    Ok(hits as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub mean_pairwise_cos: f64,
    /// Mean of the pairwise feature angles, in degrees.
    pub mean_pairwise_angle_deg: f64,
    pub mean_cos_to_original: f64,
    pub count: usize,
}

fn angle_deg(c: f64) -> f64 {
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

pub fn diversity_report<T: Scalar>(original: &[T], deid: &[&[T]]) -> Result<DiversityReport> {
    let k = deid.len();
    if k < 2 {
        return Err(RiddleError::Validation(format!("diversity needs at least 2 embeddings, got {k}")));
    }
    let mut cos_sum = 0.0;
    let mut angle_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..k {
        for j in i + 1..k {
            let c = cosine(deid[i], deid[j]).as_f64().clamp(-1.0, 1.0);
            cos_sum += c;
            angle_sum += angle_deg(c);
            pairs += 1;
        }
    }
    let to_orig: f64 = deid.iter().map(|e| cosine(original, e).as_f64()).sum::<f64>() / k as f64;
    Ok(DiversityReport {
        mean_pairwise_cos: cos_sum / pairs as f64,
        mean_pairwise_angle_deg: angle_sum / pairs as f64,
        mean_cos_to_original: to_orig,
        count: k,
    })
}

fn embed_latent<T: Scalar>(
    generator: &dyn GeneratorBackend<T>,
    identity: &dyn IdentityBackend<T>,
    w: &LatentCode<T>,
) -> Vec<T> {
    identity.embed_value(&generator.generate_value(w)).into_vec()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint<T> {
    pub t: f64,
    pub cosine: f64,
    pub output: LatentCode<T>,
}

/// Encrypts `w` along the straight line between two passwords.
///
/// The grid is `t = i / (steps - 1)`; the endpoints reuse `p0` and `p1`
/// unchanged, so they reproduce direct encryption bit for bit.
pub fn interpolation_sweep<T: Scalar>(
    state: &EncryptorState<T>,
    w: &LatentCode<T>,
    p0: &Password<T>,
    p1: &Password<T>,
    steps: usize,
    identity: &dyn IdentityBackend<T>,
    generator: &dyn GeneratorBackend<T>,
) -> Result<Vec<SweepPoint<T>>> {
    if steps < 2 {
        return Err(RiddleError::Validation(format!("a sweep needs at least 2 steps, got {steps}")));
    }
    let reference = embed_latent(generator, identity, w);
    (0..steps)
        .map(|i| {
            let t = i as f64 / (steps - 1) as f64;
            let p = Password::blend(p0, p1, t)?;
            let output = state.forward(w, &p)?;
            let e = embed_latent(generator, identity, &output);
            Ok(SweepPoint {
                t,
                cosine: cosine(&reference, &e).as_f64(),
                output,
            })
        })
        .collect()
}

/// Renders sweep results as `t,cosine` lines with a header.
pub fn sweep_csv<T>(points: &[SweepPoint<T>]) -> String {
    let mut out = String::from("t,cosine\n");
    for p in points {
        out.push_str(&format!("{},{}\n", p.t, p.cosine));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceMode {
    /// Fresh standard-normal latents.
    #[default]
    Latent,
    /// Images rendered from fresh latents, then inverted.
    Inverted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub sources: usize,
    pub passwords: usize,
    /// Wrong decryptions per encrypted code.
    pub wrong_passwords: usize,
    pub threshold: f64,
    pub seed: u64,
    pub source_mode: SourceMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            sources: 50,
            passwords: 4,
            wrong_passwords: 1,
            threshold: 0.5,
            seed: 1234,
            source_mode: SourceMode::Latent,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sources == 0 {
            return Err(RiddleError::Validation("evaluation needs at least one source".into()));
        }
        if self.passwords == 0 || self.wrong_passwords == 0 {
            return Err(RiddleError::Validation("passwords and wrong_passwords must be >= 1".into()));
        }
        if self.passwords * (self.wrong_passwords + 1) < 2 {
            return Err(RiddleError::Validation("diversity needs at least 2 de-identified outputs per source".into()));
        }
        if !(self.threshold > -1.0 && self.threshold < 1.0) {
            return Err(RiddleError::Validation(format!("threshold must lie in (-1, 1), got {}", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceReport {
    pub index: usize,
    pub mean_cos_encrypted: f64,
    pub mean_cos_correct: f64,
    pub mean_cos_wrong: f64,
    pub diversity: DiversityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub deid_rate: f64,
    pub recovery_rate: f64,
    pub wrong_deid_rate: f64,
    pub mean_cos_encrypted: f64,
    pub mean_cos_correct: f64,
    pub mean_cos_wrong: f64,
    /// Mean over sources of the pairwise cosine among that source's
    /// encrypted and wrongly decrypted outputs.
    pub mean_pairwise_cos: f64,
    pub mean_pairwise_angle_deg: f64,
    pub mean_cos_to_original: f64,
    pub sources: Vec<SourceReport>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn eval_source<T: Scalar, R: Rng>(
    rng: &mut R,
    backends: &Backends<T>,
    state: &EncryptorState<T>,
    mode: SourceMode,
) -> Result<LatentCode<T>> {
    let cfg = state.config();
    let fresh = LatentCode::sample_with(rng, cfg.layout, cfg.dim);
    match mode {
        SourceMode::Latent => Ok(fresh),
        SourceMode::Inverted => {
            let inverter = backends
                .inverter
                .as_ref()
                .ok_or_else(|| RiddleError::Config("inverted sources need an inverter backend".into()))?;
            inverter.invert(&backends.generator.generate_value(&fresh))
        }
    }
}

/// Runs the full protocol; the result depends only on the inputs and seed.
pub fn evaluate<T: Scalar>(state: &EncryptorState<T>, backends: &Backends<T>, config: &EvalConfig) -> Result<EvalReport> {
    config.validate()?;
    let enc_cfg = state.config();
    backends.check_latent_shape(enc_cfg.layout, enc_cfg.dim)?;
    let generator = backends.generator.as_ref();
    let identity = backends.evaluation_identity().as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut enc_pairs = Vec::new();
    let mut rec_pairs = Vec::new();
    let mut wrong_pairs = Vec::new();
    let mut sources = Vec::with_capacity(config.sources);
    for index in 0..config.sources {
        let w = eval_source(&mut rng, backends, state, config.source_mode)?;
        let orig = embed_latent(generator, identity, &w);
        let mut deid: Vec<Vec<T>> = Vec::new();
        let (mut c_enc, mut c_rec, mut c_wrong) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..config.passwords {
            let p: Password<T> = sample_password(rng.gen(), enc_cfg.layout, enc_cfg.dim);
            let e = state.forward(&w, &p)?;
            let e_emb = embed_latent(generator, identity, &e);
            let d = state.forward(&e, &p)?;
            let d_emb = embed_latent(generator, identity, &d);
            let pair = VerificationPair::new(orig.clone(), e_emb.clone(), true);
            c_enc.push(pair.cosine());
            enc_pairs.push(pair);
            let pair = VerificationPair::new(orig.clone(), d_emb, true);
            c_rec.push(pair.cosine());
            rec_pairs.push(pair);
            deid.push(e_emb);
            for _ in 0..config.wrong_passwords {
                let q: Password<T> = loop {
                    let q = sample_password(rng.gen(), enc_cfg.layout, enc_cfg.dim);
                    if q.values() != p.values() {
                        break q;
                    }
                };
                let x = state.forward(&e, &q)?;
                let x_emb = embed_latent(generator, identity, &x);
                let pair = VerificationPair::new(orig.clone(), x_emb.clone(), true);
                c_wrong.push(pair.cosine());
                wrong_pairs.push(pair);
                deid.push(x_emb);
            }
        }
        let refs: Vec<&[T]> = deid.iter().map(|e| e.as_slice()).collect();
        sources.push(SourceReport {
            index,
            mean_cos_encrypted: mean(&c_enc),
            mean_cos_correct: mean(&c_rec),
            mean_cos_wrong: mean(&c_wrong),
            diversity: diversity_report(&orig, &refs)?,
        });
    }

    let pick = |f: fn(&SourceReport) -> f64| mean(&sources.iter().map(f).collect::<Vec<_>>());
    Ok(EvalReport {
        config: config.clone(),
        deid_rate: identification_rate(&enc_pairs, config.threshold)?,
        recovery_rate: identification_rate(&rec_pairs, config.threshold)?,
        wrong_deid_rate: identification_rate(&wrong_pairs, config.threshold)?,
        mean_cos_encrypted: pick(|s| s.mean_cos_encrypted),
        mean_cos_correct: pick(|s| s.mean_cos_correct),
        mean_cos_wrong: pick(|s| s.mean_cos_wrong),
        mean_pairwise_cos: pick(|s| s.diversity.mean_pairwise_cos),
        mean_pairwise_angle_deg: pick(|s| s.diversity.mean_pairwise_angle_deg),
        mean_cos_to_original: pick(|s| s.diversity.mean_cos_to_original),
        sources,
    })
}

/// Embedding of a latent through the evaluation recognizer.
pub fn identity_embedding<T: Scalar>(backends: &Backends<T>, w: &LatentCode<T>) -> Tensor<T> {
    let img = backends.generator.generate_value(w);
    backends.evaluation_identity().embed_value(&img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::SyntheticConfig;
    use crate::encryptor::EncryptorConfig;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        unit((0..d).map(|_| StandardNormal.sample(rng)).collect())
    }

    #[test]
    fn identification_rate_examples() {
        let a = vec![1.0, 0.0];
        let same: Vec<_> = (0..4).map(|_| VerificationPair::new(a.clone(), a.clone(), true)).collect();
        assert_eq!(identification_rate(&same, 0.99).unwrap(), 1.0);
        let orth: Vec<_> = (0..4).map(|_| VerificationPair::new(a.clone(), vec![0.0, 1.0], false)).collect();
        assert_eq!(identification_rate(&orth, 0.5).unwrap(), 0.0);
        let mixed: Vec<_> = [0.9f64, 0.4, 0.6]
            .iter()
            .map(|&c| VerificationPair::new(a.clone(), vec![c, (1.0 - c * c).sqrt()], true))
            .collect();
        assert!((identification_rate(&mixed, 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(identification_rate::<f64>(&[], 0.5).is_err());
        assert!(identification_rate(&mixed, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn identification_rate_is_monotone(seed in any::<u64>(), count in 1usize..30, t0 in -0.99f64..0.99, dt in 0.0f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pairs: Vec<_> = (0..count)
                .map(|_| VerificationPair::new(random_unit(&mut rng, 3), random_unit(&mut rng, 3), false))
                .collect();
            let t1 = (t0 + dt).min(0.999);
            prop_assert!(identification_rate(&pairs, t1).unwrap() <= identification_rate(&pairs, t0).unwrap());
        }

        #[test]
        fn diversity_report_matches_double_loop(seed in any::<u64>(), k in 2usize..=10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let orig = random_unit(&mut rng, 6);
            let set: Vec<Vec<f64>> = (0..k).map(|_| random_unit(&mut rng, 6)).collect();
            let refs: Vec<&[f64]> = set.iter().map(|v| v.as_slice()).collect();
            let r = diversity_report(&orig, &refs).unwrap();

            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let (mut cs, mut an, mut cnt) = (0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    if i != j {
                        let c = dot(&set[i], &set[j]).clamp(-1.0, 1.0);
                        cs += c;
                        an += c.acos() * 180.0 / std::f64::consts::PI;
                        cnt += 1.0;
                    }
                }
            }
            let to = set.iter().map(|e| dot(&orig, e)).sum::<f64>() / k as f64;
            prop_assert!((r.mean_pairwise_cos - cs / cnt).abs() <= 1e-9);
            prop_assert!((r.mean_pairwise_angle_deg - an / cnt).abs() <= 1e-9 * (an / cnt).abs().max(1.0));
            prop_assert!((r.mean_cos_to_original - to).abs() <= 1e-9);
            prop_assert!((0.0..=180.0).contains(&r.mean_pairwise_angle_deg));
            prop_assert_eq!(r.count, k);
        }
    }

    #[test]
    fn diversity_report_examples() {
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        let r = diversity_report(&a, &[&a, &a]).unwrap();
        assert!((r.mean_pairwise_cos - 1.0).abs() < 1e-12);
        assert!(r.mean_pairwise_angle_deg.abs() < 1e-6);
        let r = diversity_report(&a, &[&a, &b]).unwrap();
        assert!(r.mean_pairwise_cos.abs() < 1e-12);
        assert!((r.mean_pairwise_angle_deg - 90.0).abs() < 1e-12);
        assert!(diversity_report(&a, &[&a]).is_err());
    }

    fn toy() -> (EncryptorState<f64>, Backends<f64>) {
        let enc = EncryptorConfig::toy();
        let b = SyntheticConfig::default().build(enc.layout, enc.dim).unwrap();
        (EncryptorState::init(enc).unwrap(), b)
    }

    #[test]
    fn untrained_encryptor_anonymizes_nothing() {
        let (state, backends) = toy();
        let cfg = EvalConfig { sources: 5, passwords: 2, ..Default::default() };
        let r = evaluate(&state, &backends, &cfg).unwrap();
        assert_eq!(r.recovery_rate, 1.0);
        assert_eq!(r.deid_rate, 1.0);
        assert_eq!(r.sources.len(), 5);
        assert_eq!(evaluate(&state, &backends, &cfg).unwrap(), r);
    }

    #[test]
    fn empty_sources_rejected() {
        let (state, backends) = toy();
        let cfg = EvalConfig { sources: 0, ..Default::default() };
        assert!(matches!(evaluate(&state, &backends, &cfg), Err(RiddleError::Validation(_))));
    }

    #[test]
    fn inverted_sources_work() {
        let (state, backends) = toy();
        let cfg = EvalConfig { sources: 2, passwords: 2, source_mode: SourceMode::Inverted, ..Default::default() };
        assert!(evaluate(&state, &backends, &cfg).is_ok());
    }

    #[test]
    fn sweep_endpoints_and_continuity() {
        let (state, backends) = toy();
        let layout = state.config().layout;
        let w = LatentCode::sample(3, layout, 32);
        let p0 = sample_password(10, layout, 32);
        let p1 = sample_password(11, layout, 32);
        let gen = backends.generator.as_ref();
        let id = backends.identity.as_ref();
        let pts = interpolation_sweep(&state, &w, &p0, &p1, 11, id, gen).unwrap();
        assert_eq!(pts.len(), 11);
        assert_eq!(pts[0].output, state.forward(&w, &p0).unwrap());
        assert_eq!(pts[10].output, state.forward(&w, &p1).unwrap());
        assert!(pts.windows(2).all(|p| p[0].t < p[1].t));
        assert!(interpolation_sweep(&state, &w, &p0, &p1, 1, id, gen).is_err());

        let mut gaps = Vec::new();
        for steps in [5usize, 17, 65] {
            let pts = interpolation_sweep(&state, &w, &p0, &p1, steps, id, gen).unwrap();
            let gap = pts
                .windows(2)
                .map(|p| p[1].output.values().max_abs_diff(p[0].output.values()))
                .fold(0.0f64, f64::max);
            gaps.push(gap);
        }
        assert!(gaps[1] < gaps[0] && gaps[2] < gaps[1], "{gaps:?}");
        assert!(sweep_csv(&pts).starts_with("t,cosine\n0,"));
    }
}
