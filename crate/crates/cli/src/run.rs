//! Run configuration, run-directory locking, and dataset loading.

use std::fs::{self, File, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use satswin::config::{check_config, HeadConfig, ModelConfig};
use satswin::data::{crop_and_pad_chip, Chip, DatasetManifest, Split};
use satswin::training::LoopConfig;

use crate::UserError;

/// Everything one pretraining or finetuning run needs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Required for finetuning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadConfig>,
    /// Schedule and loop settings; `train.seed` seeds initialization too.
    pub train: LoopConfig,
    pub data: DataConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Dump a reconstruction triptych every N steps (0 = never).
    #[serde(default)]
    pub image_every: usize,
    /// Save a resumable checkpoint every N steps (0 = only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Validate every N finetuning steps.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_eval_every() -> usize {
    10
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Relative paths resolve against the config file's directory.
    pub manifest: PathBuf,
    /// Drop chips whose cloud score exceeds this fraction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_cloud: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| UserError::new(format!("reading config {}: {e}", path.display())))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| UserError::new(format!("parsing config {}: {e}", path.display())))?;
        if cfg.data.manifest.is_relative() {
            let base = path.parent().unwrap_or(Path::new(""));
            cfg.data.manifest = base.join(&cfg.data.manifest);
        }
        Ok(cfg)
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        check_config(&self.model)?;
        self.train.validate()?;
        if let Some(c) = self.data.max_cloud {
            if !(0.0..=1.0).contains(&c) {
                return Err(UserError::new(format!("max_cloud {c} outside [0, 1]")).into());
            }
        }
        if self.eval_every == 0 {
            return Err(UserError::new("eval_every must be positive").into());
        }
        Ok(())
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        self.out.clone().ok_or_else(|| UserError::new("no output directory: set `out` in the config or pass --out").into())
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        let m = DatasetManifest::load(&self.data.manifest)
            .with_context(|| format!("loading manifest {}", self.data.manifest.display()))?;
        Ok(match self.data.max_cloud {
            Some(c) => m.filter_cloud(c),
            None => m,
        })
    }
}

/// Reads a split, checks band and frame counts, and crops or pads each chip
/// to the model's spatial size.
pub fn load_chips(manifest: &DatasetManifest, split: Split, cfg: &ModelConfig) -> Result<Vec<Chip>> {
    let chips = manifest.load_split(split)?;
    chips
        .into_iter()
        .enumerate()
        .map(|(i, chip)| {
            chip.check_bands(cfg.num_bands)?;
            if chip.cube.timesteps() != cfg.num_timesteps {
                return Err(UserError::new(format!(
                    "{split:?} chip {i} has {} frames, the model expects {}",
                    chip.cube.timesteps(),
                    cfg.num_timesteps
                ))
                .into());
            }
            Ok(crop_and_pad_chip(&chip, cfg.input_height, cfg.input_width).0)
        })
        .collect()
}

const LOCK_FILE: &str = ".lock";
pub const CONFIG_ECHO: &str = "config.json";

/// Exclusive ownership of an output directory for the life of the value.
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Creates `path` if needed, takes its lock, and writes `config` as the
    /// effective configuration.
    pub fn open(path: &Path, config: &impl Serialize) -> Result<Self> {
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        let lock = path.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => writeln!(f, "{}", std::process::id())?,
            Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                return Err(UserError::new(format!(
                    "run directory {} is locked by another process (remove {} if it is stale)",
                    path.display(),
                    lock.display()
                ))
                .into())
            }
            Err(e) => return Err(e).with_context(|| format!("locking {}", path.display())),
        }
        let dir = Self { path: path.to_path_buf() };
        fs::write(dir.file(CONFIG_ECHO), serde_json::to_string_pretty(config)? + "\n")?;
        Ok(dir)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn create(&self, name: &str) -> Result<File> {
        let p = self.file(name);
        File::create(&p).with_context(|| format!("creating {}", p.display()))
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join(LOCK_FILE));
    }
}
