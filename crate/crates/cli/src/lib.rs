//! Command implementations behind the `riddle` binary.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use riddle_core::archive::{load_latent, save_latent, write_atomic};
use riddle_core::backends::{BackendConfig, Backends};
use riddle_core::evaluation::{evaluate, interpolation_sweep, sweep_csv, EvalConfig};
use riddle_core::latent::derive_password;
use riddle_core::training::{load_checkpoint, train, Checkpoint, RunDirectory, TrainingConfig};
use riddle_core::{EncryptorConfig, EncryptorState, LatentCode, Password, PasswordFile};

/// Everything one run needs, read from a TOML file.
///
/// The top-level `seed` is the only source of randomness: it overrides the
/// seeds of the encryptor init, the training loop and the evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default = "EncryptorConfig::toy")]
    pub encryptor: EncryptorConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: None,
            encryptor: EncryptorConfig::toy(),
            training: TrainingConfig::default(),
            backend: BackendConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("invalid run config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.encryptor.validate()?;
        self.training.validate()?;
        self.eval.validate()?;
        if let BackendConfig::Synthetic(s) = &self.backend {
            s.validate()?;
        }
        Ok(())
    }

    /// Pushes the run seed into every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.encryptor.seed = seed;
        self.training.seed = seed;
        self.eval.seed = seed;
        self
    }

    pub fn backends(&self) -> Result<Backends<f32>> {
        Ok(Backends::from_config(&self.backend, self.encryptor.layout, self.encryptor.dim)?)
    }
}

#[derive(Debug, Parser)]
#[command(name = "riddle", version, about = "Password-conditioned identity encryption in latent space")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an encryptor and write metrics plus checkpoints.
    Train(TrainArgs),
    /// Encrypt a latent file with a password.
    Encrypt(TransformArgs),
    /// Decrypt a latent file; the same network as encryption.
    Decrypt(TransformArgs),
    /// Evaluate a checkpoint and write a JSON report.
    Eval(EvalArgs),
    /// Sweep between two passwords and write a t,cosine CSV.
    Interpolate(InterpolateArgs),
    /// Write a standard-normal latent file.
    SampleLatent(SampleArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(id = "key", required = true, multiple = false)]
pub struct KeyArgs {
    /// Password file (JSON).
    #[arg(long, group = "key")]
    pub password: Option<PathBuf>,
    #[arg(long, group = "key")]
    pub passphrase: Option<String>,
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input latent file.
    #[arg(long)]
    pub latent: PathBuf,
    #[command(flatten)]
    pub key: KeyArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run config; defaults to the one stored in the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub latent: PathBuf,
    /// Two password files, `p0` then `p1`.
    #[arg(long, num_args = 1, conflicts_with = "passphrase")]
    pub password: Vec<PathBuf>,
    /// Two passphrases, `p0` then `p1`.
    #[arg(long, num_args = 1)]
    pub passphrase: Vec<String>,
    #[arg(long, default_value_t = 11)]
    pub steps: usize,
    /// Run config for the backends; defaults to the one in the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a.config, a.seed, a.out.as_deref()).map(|_| ()),
        Command::Encrypt(a) | Command::Decrypt(a) => cmd_transform(&a.checkpoint, &a.latent, &a.key, &a.out),
        Command::Eval(a) => cmd_eval(&a.checkpoint, a.config.as_deref(), a.seed, &a.out),
        Command::Interpolate(a) => cmd_interpolate(&a),
        Command::SampleLatent(a) => cmd_sample_latent(&a.checkpoint, a.seed, &a.out),
    }
}

/// Trains per the config and returns the output directory.
pub fn cmd_train(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<PathBuf> {
    let cfg = RunConfig::load(config)?;
    let seed = seed.unwrap_or(cfg.seed);
    let cfg = cfg.with_seed(seed);
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.out.clone())
        .context("no output directory: pass --out or set `out` in the config")?;
    let backends = cfg.backends()?;
    let run_json = serde_json::to_value(&cfg)?;
    let mut dir = RunDirectory::create(&out, Some(run_json))?;
    info!("training {} steps into {}", cfg.training.steps, out.display());
    train(&cfg.encryptor, &cfg.training, &backends, &mut dir)?;
    info!("checkpoint written to {}", dir.final_checkpoint().display());
    Ok(out)
}

fn open_checkpoint(path: &Path) -> Result<Checkpoint<f32>> {
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    load_checkpoint(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn run_config_for(checkpoint: &Checkpoint<f32>, config: Option<&Path>) -> Result<RunConfig> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => match &checkpoint.run {
            Some(v) => serde_json::from_value(v.clone()).context("checkpoint carries an unreadable run config")?,
            None => RunConfig {
                encryptor: checkpoint.state.config().clone(),
                ..RunConfig::default()
            },
        },
    };
    let enc = checkpoint.state.config();
    if cfg.encryptor.layout != enc.layout || cfg.encryptor.dim != enc.dim {
        bail!("run config latent shape does not match the checkpoint");
    }
    Ok(cfg)
}

/// Resolves a password from a file or a passphrase for the given state.
pub fn resolve_password(state: &EncryptorState<f32>, file: Option<&Path>, passphrase: Option<&str>) -> Result<Password<f32>> {
    let cfg = state.config();
    let p = match (file, passphrase) {
        (Some(f), None) => {
            let pf = PasswordFile::read(f).with_context(|| format!("cannot read password file {}", f.display()))?;
            if pf.layout != cfg.layout || pf.dim != cfg.dim {
                bail!(
                    "password file {} is for a {:?}x{} latent, checkpoint expects {:?}x{}",
                    f.display(),
                    pf.layout.sizes(),
                    pf.dim,
                    cfg.layout.sizes(),
                    cfg.dim
                );
            }
            pf.to_password()?
        }
        (None, Some(s)) => derive_password(s.as_bytes(), cfg.layout, cfg.dim)?,
        _ => bail!("give exactly one of --password or --passphrase"),
    };
    Ok(p)
}

/// Encryption and decryption are the same forward pass.
pub fn cmd_transform(checkpoint: &Path, latent: &Path, key: &KeyArgs, out: &Path) -> Result<()> {
    let ck = open_checkpoint(checkpoint)?;
    let w: LatentCode<f32> = load_latent(latent).with_context(|| format!("cannot load latent {}", latent.display()))?;
    let p = resolve_password(&ck.state, key.password.as_deref(), key.passphrase.as_deref())?;
    let y = ck.state.forward(&w, &p)?;
    save_latent(out, &y)?;
    Ok(())
}

pub fn cmd_eval(checkpoint: &Path, config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let ck = open_checkpoint(checkpoint)?;
    let mut cfg = run_config_for(&ck, config)?;
    if let Some(s) = seed {
        cfg.eval.seed = s;
    }
    let backends = cfg.backends()?;
    let report = evaluate(&ck.state, &backends, &cfg.eval)?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    write_atomic(out, text.as_bytes())?;
    info!(
        "de-id rate {:.3}, recovery rate {:.3}, wrong-password rate {:.3}",
        report.deid_rate, report.recovery_rate, report.wrong_deid_rate
    );
    Ok(())
}

pub fn cmd_interpolate(args: &InterpolateArgs) -> Result<()> {
    let ck = open_checkpoint(&args.checkpoint)?;
    let cfg = run_config_for(&ck, args.config.as_deref())?;
    let (p0, p1) = match (args.password.as_slice(), args.passphrase.as_slice()) {
        ([a, b], []) => (
            resolve_password(&ck.state, Some(a), None)?,
            resolve_password(&ck.state, Some(b), None)?,
        ),
        ([], [a, b]) => (
            resolve_password(&ck.state, None, Some(a))?,
            resolve_password(&ck.state, None, Some(b))?,
        ),
        _ => bail!("interpolate needs exactly two --password files or two --passphrase values"),
    };
    let w: LatentCode<f32> = load_latent(&args.latent).with_context(|| format!("cannot load latent {}", args.latent.display()))?;
    let backends = cfg.backends()?;
    let points = interpolation_sweep(
        &ck.state,
        &w,
        &p0,
        &p1,
        args.steps,
        backends.evaluation_identity().as_ref(),
        backends.generator.as_ref(),
    )?;
    write_atomic(&args.out, sweep_csv(&points).as_bytes())?;
    Ok(())
}

pub fn cmd_sample_latent(checkpoint: &Path, seed: u64, out: &Path) -> Result<()> {
    let ck = open_checkpoint(checkpoint)?;
    let cfg = ck.state.config();
    save_latent(out, &LatentCode::<f32>::sample(seed, cfg.layout, cfg.dim))?;
    Ok(())
}
