//! Command implementations behind the `vlight` binary.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use vlight::config::RunConfig;
use vlight::inference::Binarization;

pub mod commands;

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub dataset_root: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub scales: Option<Vec<f64>>,
    pub patch: Option<usize>,
    pub overlap: Option<f64>,
    pub threshold: Option<Binarization>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(r) = &self.dataset_root {
            cfg.dataset.root = r.clone();
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(s) = &self.scales {
            cfg.inference.scales = s.clone();
        }
        if let Some(p) = self.patch {
            cfg.inference.patch = p;
        }
        if let Some(o) = self.overlap {
            cfg.inference.overlap = o;
        }
        if let Some(t) = self.threshold {
            cfg.inference.binarization = t;
        }
    }
}

/// Loads a config file, applies overrides and validates the result.
pub fn resolve_config(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    overrides.apply(&mut cfg);
    cfg.validate()
        .with_context(|| format!("{} after command-line overrides", path.display()))?;
    Ok(cfg)
}

#[derive(Debug)]
pub struct LockBusy(pub PathBuf);

impl std::fmt::Display for LockBusy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "run directory {} is in use (remove its .lock file if no other run is active)",
            self.0.display()
        )
    }
}

impl std::error::Error for LockBusy {}

/// A run directory held exclusively for the lifetime of the value.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    /// Creates `<output_dir>/<kind>-<fingerprint>`, takes its lock and
    /// writes the fully resolved config.
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        Self::open_at(cfg.run_dir(), cfg)
    }

    pub fn open_at(path: PathBuf, cfg: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        let lock = path.join(".lock");
        let mut f: File = match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(LockBusy(path)),
            Err(e) => return Err(e).with_context(|| format!("creating {}", lock.display())),
        };
        writeln!(f, "{}", std::process::id())?;
        let dir = RunDir { path, lock };
        let resolved = dir.path.join("config.toml");
        std::fs::write(&resolved, cfg.to_toml()?)
            .with_context(|| format!("writing {}", resolved.display()))?;
        info!("run directory {}", dir.path.display());
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if let Err(e) = std::fs::remove_file(&self.lock) {
            warn!("could not remove {}: {e}", self.lock.display());
        }
    }
}

/// Process exit status for a failed command, by error category.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use vlight::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<LockBusy>().is_some() {
            return 6;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::Spec(_) => 2,
                E::MissingFile { .. } | E::UnknownId(_) | E::Decode { .. } | E::Io { .. } => 3,
                E::Checkpoint(_) => 5,
                _ => 4,
            };
        }
    }
    1
}
