use std::path::{Path, PathBuf};

use clap::Args;
use pyrdiff::data::DatasetSpec;
use pyrdiff::pipeline::TrainConfig;
use pyrdiff::{Error, Result};
use serde::{Deserialize, Serialize};

/// Effective configuration of one command. Every field has a default, a
/// JSON file may replace any subset, and flags override both.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DatasetSpec,
    pub paths: Paths,
    pub sample_seed: u64,
    pub eval_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub manifest: PathBuf,
    /// Defaults to `<output_dir>/checkpoints` when empty.
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("data/manifest.jsonl"),
            checkpoint_dir: PathBuf::new(),
            output_dir: PathBuf::from("run"),
        }
    }
}

impl Paths {
    pub fn checkpoint_dir(&self) -> PathBuf {
        if self.checkpoint_dir.as_os_str().is_empty() {
            self.output_dir.join("checkpoints")
        } else {
            self.checkpoint_dir.clone()
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Write `resolved-config.json` into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        let path = dir.join("resolved-config.json");
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|source| Error::Io { path, source })
    }
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.into(), source })
}

/// Options shared by every command.
#[derive(Args, Debug, Default)]
pub struct CommonArgs {
    /// JSON configuration file; flags take precedence over its values.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = RunConfig::load(self.config.as_deref())?;
        if let Some(o) = &self.out {
            c.paths.output_dir = o.clone();
        }
        Ok(c)
    }
}

#[derive(Args, Debug, Default)]
pub struct DataArgs {
    /// Number of pairs.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Strength of the nonlinear intensity mapping between modalities, in [0, 1].
    #[arg(long)]
    pub difficulty: Option<f64>,
    #[arg(long)]
    pub val_count: Option<usize>,
    #[arg(long)]
    pub test_count: Option<usize>,
}

impl DataArgs {
    pub fn apply(&self, d: &mut DatasetSpec) {
        set(&mut d.count, self.count);
        set(&mut d.seed, self.seed);
        set(&mut d.height, self.height);
        set(&mut d.width, self.width);
        set(&mut d.difficulty, self.difficulty);
        set(&mut d.val_count, self.val_count);
        set(&mut d.test_count, self.test_count);
    }
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// Pyramid levels.
    #[arg(long)]
    pub levels: Option<usize>,
    /// Per-level downscaling factor, in (0, 1).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Diffusion steps.
    #[arg(long)]
    pub timesteps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Total epochs; a resumed run continues up to this count.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the cross-granularity regularizer.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Mask ratio of the finest level.
    #[arg(long)]
    pub r_fine: Option<f64>,
    /// Mask ratio of the coarsest level.
    #[arg(long)]
    pub r_coarse: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Save a checkpoint every this many epochs (0: only at the end).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub encoder_blocks: Option<usize>,
    #[arg(long)]
    pub decoder_blocks: Option<usize>,
}

impl TrainArgs {
    pub fn apply(&self, t: &mut TrainConfig) {
        set(&mut t.num_levels, self.levels);
        set(&mut t.alpha, self.alpha);
        set(&mut t.timesteps, self.timesteps);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.epochs, self.epochs);
        set(&mut t.learning_rate, self.lr);
        set(&mut t.lambda, self.lambda);
        set(&mut t.r_fine, self.r_fine);
        set(&mut t.r_coarse, self.r_coarse);
        set(&mut t.seed, self.seed);
        set(&mut t.checkpoint_every, self.checkpoint_every);
        set(&mut t.denoiser.patch_size, self.patch_size);
        set(&mut t.denoiser.embed_dim, self.embed_dim);
        set(&mut t.denoiser.num_heads, self.heads);
        set(&mut t.denoiser.num_encoder_blocks, self.encoder_blocks);
        set(&mut t.denoiser.num_decoder_blocks, self.decoder_blocks);
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Hash of the settings a resumed run must share with its checkpoint.
/// The epoch target and checkpoint cadence may change between invocations.
pub fn resume_hash(c: &TrainConfig) -> u64 {
    TrainConfig { epochs: 0, checkpoint_every: 0, ..c.clone() }.hash()
}
