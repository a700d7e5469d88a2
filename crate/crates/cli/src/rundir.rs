//! Append-only run directories and their manifests.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use nnn_core::config::{Precision, RunConfig};
use nnn_core::io::load_nnt;
use nnn_core::pipeline::{make_split, model_input};
use nnn_core::tensor::Split;
use nnn_core::{MediaTensor, Nnn, NnnError, Result, Scalar};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "model.nnck";
pub const CONFIG: &str = "config.cfg";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Seeds {
    pub model: u64,
    pub train: u64,
    pub split: u64,
    pub probe: u64,
}

impl Seeds {
    pub fn of(cfg: &RunConfig) -> Self {
        Self {
            model: cfg.model.seed,
            train: cfg.train.seed,
            split: cfg.split.seed,
            probe: cfg.probe.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub created_unix: u64,
    /// Text form of the run configuration, when the command used one.
    pub config: Option<String>,
    pub seeds: Option<Seeds>,
    pub dataset: Option<DatasetRef>,
    /// Run directory this one was derived from.
    pub source_run: Option<PathBuf>,
    /// Relative to the run directory.
    pub checkpoint: Option<String>,
    pub artifacts: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| io_at(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn io_at(path: &Path, e: std::io::Error) -> NnnError {
    NnnError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub struct RunDir {
    pub path: PathBuf,
    pub manifest: Manifest,
}

impl RunDir {
    /// Creates `root/<command>-<unix seconds>[-n]`, never reusing a name.
    pub fn create(root: &Path, command: &str) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| io_at(root, e))?;
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let mut n = 0;
        let path = loop {
            let name = if n == 0 { format!("{command}-{now}") } else { format!("{command}-{now}-{n}") };
            let p = root.join(name);
            match std::fs::create_dir(&p) {
                Ok(()) => break p,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
                Err(e) => return Err(io_at(&p, e)),
            }
        };
        Ok(Self {
            path,
            manifest: Manifest {
                tool: "nnn".into(),
                version: env!("CARGO_PKG_VERSION").into(),
                command: command.into(),
                created_unix: now,
                config: None,
                seeds: None,
                dataset: None,
                source_run: None,
                checkpoint: None,
                artifacts: Vec::new(),
            },
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Writes `bytes` to `name` and lists it as an artifact.
    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.file(name);
        std::fs::write(&p, bytes).map_err(|e| io_at(&p, e))?;
        self.manifest.artifacts.push(name.to_string());
        Ok(p)
    }

    pub fn write_json<S: Serialize>(&mut self, name: &str, value: &S) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    pub fn record_config(&mut self, cfg: &RunConfig) -> Result<()> {
        let text = cfg.to_text();
        self.write(CONFIG, &text)?;
        self.manifest.config = Some(text);
        self.manifest.seeds = Some(Seeds::of(cfg));
        Ok(())
    }

    pub fn record_checkpoint<T: Scalar>(&mut self, model: &Nnn<T>) -> Result<()> {
        model.params.save(self.file(CHECKPOINT))?;
        self.manifest.artifacts.push(CHECKPOINT.into());
        self.manifest.checkpoint = Some(CHECKPOINT.into());
        Ok(())
    }

    /// Writes the manifest after checking every listed artifact exists.
    pub fn finish(mut self) -> Result<PathBuf> {
        for a in &self.manifest.artifacts {
            if !self.file(a).is_file() {
                return Err(NnnError::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("artifact {a} missing from {}", self.path.display()),
                )));
            }
        }
        self.manifest.artifacts.push(MANIFEST.into());
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        let p = self.file(MANIFEST);
        std::fs::write(&p, text).map_err(|e| io_at(&p, e))?;
        Ok(self.path)
    }
}

pub fn read_manifest(run: &Path) -> Result<Manifest> {
    let p = run.join(MANIFEST);
    let text = std::fs::read_to_string(&p).map_err(|e| io_at(&p, e))?;
    serde_json::from_str(&text).map_err(|e| NnnError::Format(format!("{}: {e}", p.display())))
}

pub fn dataset_ref(path: &Path) -> Result<DatasetRef> {
    let abs = path.canonicalize().map_err(|e| io_at(path, e))?;
    Ok(DatasetRef {
        sha256: sha256_file(&abs)?,
        path: abs,
    })
}

pub fn load_dataset<T: Scalar>(path: &Path) -> Result<MediaTensor<T>> {
    if !path.is_file() {
        return Err(io_at(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    load_nnt(path)
}

/// A trained run loaded back from disk.
pub struct Loaded<T> {
    pub dir: PathBuf,
    pub cfg: RunConfig,
    pub manifest: Manifest,
    /// Model input (volume-only when the run was trained that way).
    pub x: MediaTensor<T>,
    pub model: Nnn<T>,
    pub split: Split,
}

pub fn run_precision(run: &Path) -> Result<Precision> {
    Ok(RunConfig::load(run.join(CONFIG))?.precision)
}

pub fn load_run<T: Scalar>(run: &Path) -> Result<Loaded<T>> {
    let manifest = read_manifest(run)?;
    let cfg = RunConfig::load(run.join(CONFIG))?;
    let ds = manifest
        .dataset
        .clone()
        .ok_or_else(|| NnnError::Config(format!("{} has no dataset", run.display())))?;
    let hash = sha256_file(&ds.path)?;
    if hash != ds.sha256 {
        return Err(NnnError::Format(format!("dataset {} changed since the run (sha256 mismatch)", ds.path.display())));
    }
    let ckpt = manifest
        .checkpoint
        .clone()
        .ok_or_else(|| NnnError::Config(format!("{} has no checkpoint", run.display())))?;
    let x = model_input(&load_dataset::<T>(&ds.path)?, &cfg);
    let params = nnn_core::diff::params::ParamStore::<T>::load(run.join(&ckpt))?;
    let model = Nnn::from_parts(cfg.model.clone(), x.channels(), x.geos(), x.width(), params)?;
    let split = make_split(x.weeks(), x.geos(), &cfg)?;
    Ok(Loaded {
        dir: run.to_path_buf(),
        cfg,
        manifest,
        x,
        model,
        split,
    })
}
