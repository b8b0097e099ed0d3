use std::io;
use std::path::{Path, PathBuf};

use crate::cas::ObjectId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0}: no such file or directory")]
    NotFound(PathBuf),
    #[error("invalid object id '{0}': expected 64 lowercase hex characters")]
    InvalidObjectId(String),
    #[error("object {0} is missing from the cache")]
    ObjectMissing(ObjectId),
    #[error("object {oid} is corrupt (content hashes to {actual})")]
    Corrupt { oid: ObjectId, actual: ObjectId },

    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: duplicate stage '{name}'")]
    DuplicateStage { name: String, line: usize },
    #[error("output '{path}' is declared by both '{first}' and '{second}'")]
    DuplicateOutput {
        path: String,
        first: String,
        second: String,
    },
    #[error("stage '{stage}' depends on '{reference}', which no stage provides")]
    DanglingReference { stage: String, reference: String },
    #[error("dependency cycle: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("param '{0}' is not defined")]
    KeyMissing(String),
    #[error("invalid override '{spec}': {msg}")]
    Override { spec: String, msg: String },
    #[error("stage '{stage}': {msg}")]
    Unresolved { stage: String, msg: String },

    #[error("not a dac project (no .dac directory found from {0})")]
    NotInitialized(PathBuf),
    #[error("{0} is already a dac project")]
    AlreadyInitialized(PathBuf),
    #[error("unknown stage '{0}'")]
    UnknownStage(String),
    #[error("dependency '{path}' of stage '{stage}' is missing")]
    DependencyMissing { stage: String, path: String },

    #[error("unknown revision '{0}'")]
    UnknownRevision(String),
    #[error("'{path}' is not tracked at revision {rev}")]
    PathAbsentAtRev { rev: String, path: String },
    #[error("nothing to commit: no tracked metadata files exist")]
    NothingTracked,
    #[error("tracked files have uncommitted changes: {}", .0.join(", "))]
    DirtyWorkspace(Vec<String>),
    #[error("no revision has been committed yet")]
    NoCommits,
    #[error("branch '{0}' already exists")]
    BranchExists(String),
    #[error("invalid ref name '{0}'")]
    InvalidRefName(String),

    #[error("unknown experiment '{0}'")]
    UnknownExperiment(String),
    #[error("experiment '{name}' is {status}, not done")]
    ExperimentNotDone { name: String, status: String },
    #[error("no queued experiments")]
    EmptyQueue,

    #[error("stage '{stage}' has no results at revision {rev}")]
    NoResults { stage: String, rev: String },
    #[error("stage '{stage}' does not declare '{attr}'")]
    UndeclaredAttr { stage: String, attr: String },
    #[error("managed attribute file for '{stage}' is invalid: {msg}")]
    BadAttrFile { stage: String, msg: String },

    #[error("remote {0} is not a directory")]
    BadRemote(PathBuf),
    #[error("object {0} is missing on the remote")]
    RemoteObjectMissing(ObjectId),

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        let path = path.as_ref().to_path_buf();
        if source.kind() == io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Whether the failure was caused by bad input rather than an
    /// environment or internal problem.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::Json(_) | Error::Corrupt { .. })
    }
}

pub(crate) trait IoContext<T> {
    fn at(self, path: impl AsRef<Path>) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: impl AsRef<Path>) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
