//! Run directories and run records.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sscvae::checkpoint::bytes_hash;
use sscvae::data::layout::MANIFEST_FILE;
use sscvae::training::Stage;
use sscvae::{Error, Result};

pub const RUNS_ENV: &str = "SSCVAE_RUNS_DIR";
pub const DEFAULT_RUNS_DIR: &str = "runs";

/// Build-time revision tag; falls back to the crate version.
pub fn source_revision() -> String {
    option_env!("SSCVAE_SOURCE_REV").map(str::to_string).unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

/// `runs/<run_id>/{config,checkpoints,metrics.log,report,figures/}` plus
/// one record per subcommand under `records/`.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub id: String,
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(runs_root: &Path, id: &str) -> Result<Self> {
        let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) && id != "." && id != "..";
        if !ok {
            return Err(Error::InvalidInput(format!("run id {id:?} may only use letters, digits, '-', '_' and '.'")));
        }
        Ok(Self { id: id.to_string(), root: runs_root.join(id) })
    }

    pub fn create(&self) -> Result<()> {
        for d in [self.root.clone(), self.checkpoints(), self.root.join("records")] {
            fs::create_dir_all(&d).map_err(|e| io_err(&d, e))?;
        }
        Ok(())
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.checkpoints().join(format!("{stage}.ckpt"))
    }

    pub fn metrics_log(&self) -> PathBuf {
        self.root.join("metrics.log")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn figures(&self) -> PathBuf {
        self.root.join("figures")
    }

    pub fn stage_result(&self, stage: Stage) -> PathBuf {
        self.root.join(format!("{stage}_result.json"))
    }

    pub fn sweep_table(&self) -> PathBuf {
        self.root.join("sweep.csv")
    }

    pub fn record(&self, command: &str) -> PathBuf {
        self.root.join("records").join(format!("{command}.json"))
    }
}

pub fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

/// SHA-256 of the manifest under `data`, if there is one.
pub fn manifest_hash(data: &Path) -> Result<Option<String>> {
    let path = data.join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
    Ok(Some(bytes_hash(&bytes)))
}

#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub run_id: String,
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub source_revision: String,
    pub manifest_hash: Option<String>,
    pub outputs: Vec<String>,
}

impl RunRecord {
    pub fn write(&self, run: &RunDir) -> Result<PathBuf> {
        run.create()?;
        let path = run.record(&self.command);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::InvalidInput(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
        Ok(path)
    }
}
