//! Two-pass encryption/decryption training.
//!
//! Every step encrypts each source code with `m` fresh passwords, then
//! decrypts every encrypted code with its own password and with `n` fresh
//! wrong ones. All terms of the objective are evaluated on the resulting
//! codes and images, averaged over the batch, and a single Adam update is
//! applied to the encryptor. The backends stay frozen.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::archive::{TensorArchive, write_atomic};
use crate::backends::{Backends, ImageSource, InverterBackend};
use crate::encryptor::{EncryptorConfig, EncryptorState};
use crate::error::{Result, RiddleError};
use crate::graph::{Graph, Var};
use crate::latent::{sample_password, LatentCode, Password};
use crate::losses::{self, ChannelMask, LossParts, LossReport, LossWeights, PARSING_PARTS};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// Latents inverted from dataset images.
    Dataset,
    /// Standard-normal latents; no images needed.
    #[default]
    DataFree,
}

/// What the quality terms and the identity anchor compare against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityReference {
    /// `G(w)`, the rendering of the source code.
    #[default]
    Reconstruction,
    /// The dataset image the code was inverted from (dataset mode only).
    Original,
}

/// Switches for the three identity terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentityTerms {
    pub diversity: bool,
    pub deid: bool,
    pub recovery: bool,
}

impl Default for IdentityTerms {
    fn default() -> Self {
        IdentityTerms {
            diversity: true,
            deid: true,
            recovery: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Encryption passwords per source code.
    pub m: usize,
    /// Wrong decryption passwords per encrypted code.
    pub n: usize,
    pub epsilon: f64,
    pub weights: LossWeights,
    pub terms: IdentityTerms,
    /// Divide the de-identification sum by `m(n+1)`.
    pub normalize_deid: bool,
    pub reference: QualityReference,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub adam: AdamConfig,
    pub seed: u64,
    pub mode: TrainingMode,
    pub checkpoint_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            m: 2,
            n: 2,
            epsilon: 0.0,
            weights: LossWeights::default(),
            terms: IdentityTerms::default(),
            normalize_deid: false,
            reference: QualityReference::Reconstruction,
            steps: 1000,
            batch: 8,
            lr: 1e-4,
            lr_schedule: LrSchedule::Constant,
            adam: AdamConfig::default(),
            seed: 0,
            mode: TrainingMode::DataFree,
            checkpoint_every: 500,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(RiddleError::Config(format!("m and n must be >= 1 (got m={}, n={})", self.m, self.n)));
        }
        if self.batch == 0 {
            return Err(RiddleError::Config("batch must be >= 1".into()));
        }
        if !self.epsilon.is_finite() || !(-1.0..1.0).contains(&self.epsilon) {
            return Err(RiddleError::Config(format!("epsilon must lie in [-1, 1), got {}", self.epsilon)));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(RiddleError::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.reference == QualityReference::Original && self.mode != TrainingMode::Dataset {
            return Err(RiddleError::Config("reference = original needs dataset mode".into()));
        }
        self.weights.validate()
    }

    /// Number of de-identified outputs per source, `m(n+1)`.
    pub fn deid_count(&self) -> usize {
        self.m * (self.n + 1)
    }
}

/// Step-size schedule over a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to zero at the last step.
    Cosine,
}

impl LrSchedule {
    pub fn at(self, lr: f64, step: usize, steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine if steps <= 1 => lr,
            LrSchedule::Cosine => {
                let progress = step as f64 / (steps - 1) as f64;
                0.5 * lr * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// One source code with its optional original image.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample<T> {
    pub latent: LatentCode<T>,
    pub image: Option<Tensor<T>>,
}

/// Draws one training source.
pub fn sample_training_latent<T: Scalar, R: Rng + ?Sized>(
    mode: TrainingMode,
    rng: &mut R,
    layout: crate::latent::ChunkLayout,
    dim: usize,
    inverter: Option<&dyn InverterBackend<T>>,
    dataset: Option<&dyn ImageSource<T>>,
) -> Result<TrainingSample<T>> {
    match mode {
        TrainingMode::DataFree => Ok(TrainingSample {
            latent: LatentCode::sample_with(rng, layout, dim),
            image: None,
        }),
        TrainingMode::Dataset => {
            let inverter = inverter.ok_or_else(|| RiddleError::Config("dataset mode needs an inverter backend".into()))?;
            let dataset = dataset.ok_or_else(|| RiddleError::Config("dataset mode needs a dataset".into()))?;
            if dataset.is_empty() {
                return Err(RiddleError::Config("dataset is empty".into()));
            }
            let image = dataset.image(rng.gen_range(0..dataset.len()));
            Ok(TrainingSample {
                latent: inverter.invert(&image)?,
                image: Some(image),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecryptKind {
    Correct,
    Wrong,
}

/// Codes and embeddings produced for one source during a step.
#[derive(Debug, Clone)]
pub struct StepArtifacts<T> {
    pub encrypted: Vec<Tensor<T>>,
    /// `m(n+1)` codes; for encrypted code `i` the correct one comes first,
    /// followed by its `n` wrong decryptions.
    pub decrypted: Vec<(usize, DecryptKind, Tensor<T>)>,
    /// Embeddings of the encrypted and wrongly decrypted images, in the
    /// order used for the similarity matrix.
    pub deid_embeddings: Tensor<T>,
    pub correct_embeddings: Tensor<T>,
    pub original_embedding: Tensor<T>,
    pub encrypt_passwords: Vec<Password<T>>,
    pub wrong_passwords: Vec<Password<T>>,
}

impl<T: Scalar> StepArtifacts<T> {
    pub fn correct_count(&self) -> usize {
        self.decrypted.iter().filter(|d| d.1 == DecryptKind::Correct).count()
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome<T> {
    pub report: LossReport,
    pub artifacts: Vec<StepArtifacts<T>>,
}

/// Draws `count` passwords with pairwise distinct seeds and values.
fn unique_passwords<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    count: usize,
    layout: crate::latent::ChunkLayout,
    dim: usize,
) -> Result<Vec<Password<T>>> {
    let mut seeds: Vec<u64> = Vec::with_capacity(count);
    while seeds.len() < count {
        let s = rng.gen::<u64>();
        if !seeds.contains(&s) {
            seeds.push(s);
        }
    }
    let pw: Vec<Password<T>> = seeds.into_iter().map(|s| sample_password(s, layout, dim)).collect();
    for i in 0..pw.len() {
        for j in i + 1..pw.len() {
            if pw[i].values() == pw[j].values() {
                return Err(RiddleError::Validation("password collision within a sample".into()));
            }
        }
    }
    Ok(pw)
}

struct SampleGraph<T> {
    parts: [Option<Var>; 7],
    total: Option<Var>,
    artifacts: StepArtifacts<T>,
}

/// Names of the objective parts, in [`LossParts`] order.
pub const PART_NAMES: [&str; 7] = ["div", "deid", "rec", "pix", "lpips", "parse", "latent"];

#[allow(clippy::too_many_arguments)]
fn build_sample<T: Scalar>(
    g: &mut Graph<T>,
    state: &EncryptorState<T>,
    bound: &crate::encryptor::BoundParams,
    backends: &Backends<T>,
    config: &TrainingConfig,
    sample: &TrainingSample<T>,
    enc_pw: Vec<Password<T>>,
    wrong_pw: Vec<Password<T>>,
    mask: &ChannelMask,
) -> Result<SampleGraph<T>> {
    let (m, n) = (config.m, config.n);
    let eps = T::lit(config.epsilon);
    let w = g.constant(sample.latent.values().clone());

    let reference = match (config.reference, &sample.image) {
        (QualityReference::Original, Some(img)) => g.constant(img.clone()),
        (QualityReference::Original, None) => {
            return Err(RiddleError::Config("reference = original but the sample has no image".into()))
        }
        (QualityReference::Reconstruction, _) => backends.generator.generate(g, w),
    };
    let orig_embed = backends.identity.embed(g, reference);
    let orig_embed = g.normalize_rows(orig_embed);
    let ref_feat = backends.perceptual.features(g, reference);
    let ref_parse = backends.parser.parse(g, reference);

    // pass 1: encryption
    let mut encrypted = Vec::with_capacity(m);
    for p in &enc_pw {
        let pv = g.constant(p.values().clone());
        encrypted.push((state.forward_graph(g, bound, w, pv), pv));
    }
    // pass 2: decryption with the correct and the wrong passwords
    let mut correct = Vec::with_capacity(m);
    let mut wrong = Vec::with_capacity(m * n);
    for (i, &(e, pv)) in encrypted.iter().enumerate() {
        correct.push(state.forward_graph(g, bound, e, pv));
        for p in &wrong_pw[i * n..(i + 1) * n] {
            let wv = g.constant(p.values().clone());
            wrong.push(state.forward_graph(g, bound, e, wv));
        }
    }

    let embed = |g: &mut Graph<T>, code: Var| {
        let img = backends.generator.generate(g, code);
        let e = backends.identity.embed(g, img);
        (img, g.normalize_rows(e))
    };

    let mut deid_rows = Vec::with_capacity(m * (n + 1));
    let mut images = Vec::with_capacity(m * (n + 2));
    for (i, &(e, _)) in encrypted.iter().enumerate() {
        let (img, emb) = embed(g, e);
        images.push(img);
        deid_rows.push(emb);
        for &d in &wrong[i * n..(i + 1) * n] {
            let (img, emb) = embed(g, d);
            images.push(img);
            deid_rows.push(emb);
        }
    }
    let mut correct_rows = Vec::with_capacity(m);
    for &c in &correct {
        let (img, emb) = embed(g, c);
        images.push(img);
        correct_rows.push(emb);
    }
    let deid_embeds = g.concat_rows(&deid_rows);
    let correct_embeds = g.concat_rows(&correct_rows);

    let div = losses::graph::diversity(g, deid_embeds, m, n, eps);
    let mut deid = losses::graph::deid(g, orig_embed, deid_embeds, eps);
    if config.normalize_deid {
        deid = g.scale(deid, T::lit(1.0 / config.deid_count() as f64));
    }
    let rec = losses::graph::recovery(g, orig_embed, correct_embeds);

    let per_image = T::lit(1.0 / images.len() as f64);
    let mut pix_terms = Vec::new();
    let mut lpips_terms = Vec::new();
    let mut parse_terms = Vec::new();
    for &img in &images {
        pix_terms.push((per_image, losses::graph::pixel(g, reference, img)));
        let f = backends.perceptual.features(g, img);
        lpips_terms.push((per_image, losses::graph::l2(g, ref_feat, f)));
        let p = backends.parser.parse(g, img);
        parse_terms.push((per_image, losses::graph::parsing(g, ref_parse, p, mask)));
    }
    let pix = g.weighted_sum(&pix_terms);
    let lpips = g.weighted_sum(&lpips_terms);
    let parse = g.weighted_sum(&parse_terms);

    let codes: Vec<Var> = encrypted
        .iter()
        .map(|&(e, _)| e)
        .chain(correct.iter().copied())
        .chain(wrong.iter().copied())
        .collect();
    let latent_terms: Vec<(T, Var)> = codes.iter().map(|&c| (T::one(), losses::graph::l2(g, w, c))).collect();
    let latent = g.weighted_sum(&latent_terms);

    let weights = &config.weights;
    let terms = config.terms;
    let parts = [
        terms.diversity.then_some(div),
        terms.deid.then_some(deid),
        terms.recovery.then_some(rec),
        Some(pix),
        Some(lpips),
        Some(parse),
        Some(latent),
    ];
    let coefficients = [1.0, 1.0, 1.0, weights.pix, weights.lpips, weights.parse, weights.latent];
    let weighted: Vec<(T, Var)> = parts
        .iter()
        .zip(coefficients)
        .filter_map(|(p, c)| p.filter(|_| c != 0.0).map(|v| (T::lit(c), v)))
        .collect();
    let total = (!weighted.is_empty()).then(|| g.weighted_sum(&weighted));

    let decrypted = (0..m)
        .flat_map(|i| {
            std::iter::once((i, DecryptKind::Correct, correct[i]))
                .chain(wrong[i * n..(i + 1) * n].iter().map(move |&d| (i, DecryptKind::Wrong, d)))
        })
        .map(|(i, k, v)| (i, k, g.value(v).clone()))
        .collect();
    let artifacts = StepArtifacts {
        encrypted: encrypted.iter().map(|&(e, _)| g.value(e).clone()).collect(),
        decrypted,
        deid_embeddings: g.value(deid_embeds).clone(),
        correct_embeddings: g.value(correct_embeds).clone(),
        original_embedding: g.value(orig_embed).clone(),
        encrypt_passwords: enc_pw,
        wrong_passwords: wrong_pw,
    };
    Ok(SampleGraph { parts, total, artifacts })
}

/// The objective for a single sample, left on its graph.
pub struct Objective<T: Scalar> {
    pub graph: Graph<T>,
    pub params: crate::encryptor::BoundParams,
    /// One entry per [`PART_NAMES`]; `None` for disabled identity terms.
    pub parts: [Option<Var>; 7],
    /// Weighted total, `None` when every coefficient is zero.
    pub total: Option<Var>,
    pub artifacts: StepArtifacts<T>,
}

/// Builds the objective of one sample with explicit passwords: `m`
/// encryption passwords and `m·n` wrong ones, grouped per encrypted code.
pub fn sample_objective<T: Scalar>(
    state: &EncryptorState<T>,
    backends: &Backends<T>,
    config: &TrainingConfig,
    sample: &TrainingSample<T>,
    encrypt: Vec<Password<T>>,
    wrong: Vec<Password<T>>,
) -> Result<Objective<T>> {
    config.validate()?;
    if encrypt.len() != config.m || wrong.len() != config.m * config.n {
        return Err(RiddleError::Validation(format!(
            "need {} encryption and {} wrong passwords, got {} and {}",
            config.m,
            config.m * config.n,
            encrypt.len(),
            wrong.len()
        )));
    }
    let mask = ChannelMask::from_names(backends.parser.channel_names(), &PARSING_PARTS)?;
    let mut graph = Graph::new();
    let params = state.bind(&mut graph, true);
    let s = build_sample(&mut graph, state, &params, backends, config, sample, encrypt, wrong, &mask)?;
    Ok(Objective {
        graph,
        params,
        parts: s.parts,
        total: s.total,
        artifacts: s.artifacts,
    })
}

/// Runs one training step on `batch` and updates `state` in place.
pub fn training_step<T: Scalar, R: Rng + ?Sized>(
    state: &mut EncryptorState<T>,
    optimizer: &mut Adam<T>,
    batch: &[TrainingSample<T>],
    config: &TrainingConfig,
    backends: &Backends<T>,
    rng: &mut R,
    step: usize,
) -> Result<StepOutcome<T>> {
    if batch.is_empty() {
        return Err(RiddleError::Validation("empty batch".into()));
    }
    let layout = state.config().layout;
    let dim = state.config().dim;
    for s in batch {
        if s.latent.layout() != layout || s.latent.dim() != dim {
            return Err(RiddleError::shape(
                format!("{}x{dim} latent", layout.levels()),
                format!("{}x{}", s.latent.levels(), s.latent.dim()),
            ));
        }
    }
    let mask = ChannelMask::from_names(backends.parser.channel_names(), &PARSING_PARTS)?;

    let mut g = Graph::new();
    let bound = state.bind(&mut g, true);
    let mut samples = Vec::with_capacity(batch.len());
    for s in batch {
        let enc = unique_passwords(rng, config.deid_count(), layout, dim)?;
        let mut enc = enc.into_iter();
        let enc_pw: Vec<Password<T>> = enc.by_ref().take(config.m).collect();
        let wrong_pw: Vec<Password<T>> = enc.collect();
        samples.push(build_sample(&mut g, state, &bound, backends, config, s, enc_pw, wrong_pw, &mask)?);
    }

    let scale = T::lit(1.0 / batch.len() as f64);
    let mut parts = [0.0f64; 7];
    for s in &samples {
        for (k, p) in s.parts.iter().enumerate() {
            if let Some(v) = p {
                parts[k] += g.value(*v).item().as_f64() / batch.len() as f64;
            }
        }
    }
    for (name, v) in PART_NAMES.iter().zip(parts) {
        if !v.is_finite() {
            return Err(RiddleError::NonFinite { term: name, step });
        }
    }
    let parts = LossParts {
        div: parts[0],
        deid: parts[1],
        rec: parts[2],
        pix: parts[3],
        lpips: parts[4],
        parse: parts[5],
        latent: parts[6],
    };
    let report = LossReport::new(parts, &config.weights);

    let totals: Vec<(T, Var)> = samples.iter().filter_map(|s| s.total.map(|t| (scale, t))).collect();
    let mut grads = BTreeMap::new();
    if !totals.is_empty() {
        let total = g.weighted_sum(&totals);
        let mut gradients = g.backward(total);
        for (name, v) in bound.iter() {
            if let Some(t) = gradients.take(v) {
                grads.insert(name.to_string(), t);
            }
        }
    }
    optimizer.step(state.params_mut(), &grads);

    Ok(StepOutcome {
        report,
        artifacts: samples.into_iter().map(|s| s.artifacts).collect(),
    })
}

/// Receives per-step reports and checkpoints during [`train`].
pub trait TrainObserver<T: Scalar> {
    fn on_step(&mut self, _step: usize, _report: &LossReport) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _step: usize, _state: &EncryptorState<T>, _is_final: bool) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct NoopObserver;

impl<T: Scalar> TrainObserver<T> for NoopObserver {}

#[derive(Debug, Clone)]
pub struct TrainRun<T> {
    pub state: EncryptorState<T>,
    pub log: Vec<LossReport>,
}

/// Full training run. `(config, seeds)` determine the result exactly.
pub fn train<T: Scalar>(
    encryptor: &EncryptorConfig,
    config: &TrainingConfig,
    backends: &Backends<T>,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainRun<T>> {
    config.validate()?;
    let mut state = EncryptorState::init(encryptor.clone())?;
    backends.check_latent_shape(encryptor.layout, encryptor.dim)?;
    let mut optimizer = Adam::new(config.lr, config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = Vec::with_capacity(config.steps);
    let inverter = backends.inverter.as_deref();
    let dataset = backends.dataset.as_deref();

    for step in 0..config.steps {
        let batch = (0..config.batch)
            .map(|_| sample_training_latent(config.mode, &mut rng, encryptor.layout, encryptor.dim, inverter, dataset))
            .collect::<Result<Vec<_>>>()?;
        optimizer.set_lr(config.lr_schedule.at(config.lr, step, config.steps));
        let outcome = training_step(&mut state, &mut optimizer, &batch, config, backends, &mut rng, step)?;
        if step % 100 == 0 {
            info!("step {step}: total {:.5}", outcome.report.total);
        }
        debug!("step {step}: {:?}", outcome.report);
        observer.on_step(step, &outcome.report)?;
        log.push(outcome.report);
        let done = step + 1;
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.steps {
            observer.on_checkpoint(done, &state, false)?;
        }
    }
    observer.on_checkpoint(config.steps, &state, true)?;
    Ok(TrainRun { state, log })
}

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointConfig {
    version: u32,
    encryptor: EncryptorConfig,
    #[serde(default)]
    run: Option<Value>,
}

/// An encryptor state plus the run configuration it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub state: EncryptorState<T>,
    pub run: Option<Value>,
}

pub fn save_checkpoint<T: Scalar>(state: &EncryptorState<T>, path: &Path, run: Option<&Value>) -> Result<()> {
    let mut archive = TensorArchive::new();
    archive.tensors = state.params().clone();
    let cfg = CheckpointConfig {
        version: CHECKPOINT_VERSION,
        encryptor: state.config().clone(),
        run: run.cloned(),
    };
    let mut text = serde_json::to_string_pretty(&cfg)?;
    text.push('\n');
    archive.write_dir(path, &[(CONFIG_FILE, text.into_bytes())])
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let config_path = path.join(CONFIG_FILE);
    let text = crate::archive::read_file(&config_path)?;
    let cfg: CheckpointConfig = serde_json::from_slice(&text)
        .map_err(|e| RiddleError::Integrity(format!("unreadable checkpoint config: {e}")))?;
    if cfg.version != CHECKPOINT_VERSION {
        return Err(RiddleError::Integrity(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            cfg.version
        )));
    }
    let archive = TensorArchive::<T>::read_dir(path)?;
    Ok(Checkpoint {
        state: EncryptorState::from_parts(cfg.encryptor, archive.tensors)?,
        run: cfg.run,
    })
}

/// Writes the metrics log and checkpoints under an output directory:
/// `metrics.jsonl`, `checkpoints/step-NNNNNN/` and the final `checkpoint/`.
pub struct RunDirectory {
    root: PathBuf,
    run: Option<Value>,
    metrics: BufWriter<File>,
}

impl RunDirectory {
    pub const METRICS: &'static str = "metrics.jsonl";
    pub const FINAL: &'static str = "checkpoint";

    pub fn create(root: impl Into<PathBuf>, run: Option<Value>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| RiddleError::io(&root, e))?;
        let path = root.join(Self::METRICS);
        let file = File::create(&path).map_err(|e| RiddleError::io(&path, e))?;
        Ok(RunDirectory {
            root,
            run,
            metrics: BufWriter::new(file),
        })
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join(Self::FINAL)
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join(Self::METRICS)
    }
}

impl<T: Scalar> TrainObserver<T> for RunDirectory {
    fn on_step(&mut self, step: usize, report: &LossReport) -> Result<()> {
        let path = self.metrics_path();
        writeln!(self.metrics, "{}", report.to_json_line(step)).map_err(|e| RiddleError::io(&path, e))
    }

    fn on_checkpoint(&mut self, step: usize, state: &EncryptorState<T>, is_final: bool) -> Result<()> {
        let path = self.metrics_path();
        self.metrics.flush().map_err(|e| RiddleError::io(&path, e))?;
        let dir = if is_final {
            self.final_checkpoint()
        } else {
            self.root.join("checkpoints").join(format!("step-{step:06}"))
        };
        save_checkpoint(state, &dir, self.run.as_ref())
    }
}

/// Writes a complete metrics log in one go.
pub fn write_metrics(path: &Path, log: &[LossReport]) -> Result<()> {
    let mut text = String::new();
    for (i, r) in log.iter().enumerate() {
        text.push_str(&r.to_json_line(i));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}
