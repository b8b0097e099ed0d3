//! On-disk project layout.
//!
//! ```text
//! <root>/pipeline.dac  params.dac  lock.dac
//! <root>/.dac/cache/       object store
//! <root>/.dac/runcache/    fingerprint -> outputs
//! <root>/.dac/revs/        revision records
//! <root>/.dac/refs/<kind>/ branch, tag and experiment refs
//! <root>/.dac/HEAD
//! <root>/.dac/expqueue/    experiment records
//! <root>/.dac/nodes/       managed attribute files
//! <root>/.dac/scratch/     read-only historical checkouts
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::cas::ObjectStore;
use crate::error::{Error, IoContext, Result};
use crate::executor::lock::{emit_lock, parse_lock, LockFile, RunCache};
use crate::pipeline::{emit_params, parse_params, parse_pipeline, ParamTree, PipelineDef};

pub const DAC_DIR: &str = ".dac";
pub const PIPELINE_FILE: &str = "pipeline.dac";
pub const PARAMS_FILE: &str = "params.dac";
pub const LOCK_FILE: &str = "lock.dac";
/// Metadata files tracked by revisions.
pub const TRACKED_FILES: [&str; 3] = [LOCK_FILE, PARAMS_FILE, PIPELINE_FILE];

#[derive(Debug)]
pub struct Project {
    root: PathBuf,
    store: ObjectStore,
    fixed_time: Option<u64>,
}

impl Project {
    pub fn init(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let dac = root.join(DAC_DIR);
        if dac.exists() {
            return Err(Error::AlreadyInitialized(root));
        }
        for sub in ["cache", "runcache", "revs", "refs/branch", "refs/tag", "refs/experiment", "expqueue"] {
            let dir = dac.join(sub);
            fs::create_dir_all(&dir).at(&dir)?;
        }
        write_atomic(&dac.join("HEAD"), b"ref: branch/main\n")?;
        let pipeline = root.join(PIPELINE_FILE);
        if !pipeline.exists() {
            write_atomic(&pipeline, b"stages: {}\n")?;
        }
        let params = root.join(PARAMS_FILE);
        if !params.exists() {
            write_atomic(&params, emit_params(&ParamTree::new()).as_bytes())?;
        }
        Self::open(root)
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let dac = root.join(DAC_DIR);
        if !dac.is_dir() {
            return Err(Error::NotInitialized(root));
        }
        let store = ObjectStore::create(dac.join("cache"))?;
        Ok(Project {
            root,
            store,
            fixed_time: None,
        })
    }

    /// Open the nearest ancestor of `start` that contains `.dac/`.
    pub fn discover(start: &Path) -> Result<Self> {
        let mut dir = Some(start);
        while let Some(d) = dir {
            if d.join(DAC_DIR).is_dir() {
                return Self::open(d);
            }
            dir = d.parent();
        }
        Err(Error::NotInitialized(start.to_path_buf()))
    }

    /// Pin revision timestamps, for reproducible ids.
    pub fn with_fixed_time(mut self, t: u64) -> Self {
        self.fixed_time = Some(t);
        self
    }

    pub fn now(&self) -> u64 {
        self.fixed_time.unwrap_or_else(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dac_dir(&self) -> PathBuf {
        self.root.join(DAC_DIR)
    }

    pub fn store(&self) -> &ObjectStore {
        &self.store
    }

    pub fn run_cache(&self) -> RunCache {
        RunCache::new(self.dac_dir().join("runcache"))
    }

    /// Workspace path of a project-relative path.
    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load_pipeline(&self) -> Result<PipelineDef> {
        let path = self.path(PIPELINE_FILE);
        parse_pipeline(&read_text(&path)?).map_err(|e| with_file(e, &path))
    }

    pub fn load_params(&self) -> Result<ParamTree> {
        let path = self.path(PARAMS_FILE);
        if !path.exists() {
            return Ok(ParamTree::new());
        }
        parse_params(&read_text(&path)?).map_err(|e| with_file(e, &path))
    }

    pub fn load_lock(&self) -> Result<LockFile> {
        let path = self.path(LOCK_FILE);
        if !path.exists() {
            return Ok(LockFile::default());
        }
        parse_lock(&read_text(&path)?).map_err(|e| with_file(e, &path))
    }

    pub fn save_lock(&self, lock: &LockFile) -> Result<()> {
        write_atomic(&self.path(LOCK_FILE), emit_lock(lock).as_bytes())
    }
}

fn with_file(err: Error, path: &Path) -> Error {
    match err {
        Error::Syntax { line, msg } => Error::Syntax {
            line,
            msg: format!("{}: {msg}", path.file_name().unwrap_or_default().to_string_lossy()),
        },
        other => other,
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).at(path)
}

/// Write via a sibling temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).at(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).at(dir)?;
    tmp.write_all(bytes).at(tmp.path())?;
    tmp.as_file().sync_all().at(tmp.path())?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
