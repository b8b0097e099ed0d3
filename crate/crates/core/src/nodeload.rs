//! Lazy, revision-addressed access to a stage's params and outputs.
//!
//! Building a handle reads only the small metadata files of the revision.
//! Output data is read on first attribute access and memoized.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use crate::cas::{hash_path, CheckoutMode, Content, ObjectId, ObjectStore};
use crate::error::{Error, IoContext, Result};
use crate::executor::attr_from_json;
use crate::executor::lock::{parse_lock, LockRecord};
use crate::pipeline::{managed_file, parse_params, parse_pipeline, ParamTree, StageDef};
use crate::project::{Project, LOCK_FILE, PARAMS_FILE, PIPELINE_FILE};
use crate::remote::{fetch_content, Remote};
use crate::revstore::{RevStore, Revision};

#[derive(Clone, Debug, PartialEq)]
pub enum AttrValue {
    Json(serde_json::Value),
    /// Read-only scratch checkout of a path output.
    Path(PathBuf),
}

impl std::fmt::Display for AttrValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttrValue::Json(v) => write!(f, "{v}"),
            AttrValue::Path(p) => write!(f, "{}", p.display()),
        }
    }
}

#[derive(Debug)]
pub struct NodeHandle<'a> {
    store: &'a ObjectStore,
    remote: Option<&'a Remote>,
    scratch: PathBuf,
    stage: StageDef,
    rev: ObjectId,
    params: BTreeMap<String, serde_json::Value>,
    record: LockRecord,
    memo: Mutex<BTreeMap<String, AttrValue>>,
    data_reads: AtomicU64,
    fetches: AtomicU64,
}

fn metadata(local: &ObjectStore, remote: Option<&Remote>, rev: &Revision, file: &str) -> Result<Option<String>> {
    let Some(oid) = rev.tree.get(file) else {
        return Ok(None);
    };
    let bytes = match local.read_metadata(oid) {
        Ok(b) => b,
        Err(Error::ObjectMissing(_)) if remote.is_some() => remote
            .expect("checked")
            .store()
            .read_metadata(oid)
            .map_err(|_| Error::RemoteObjectMissing(oid.clone()))?,
        Err(e) => return Err(e),
    };
    Ok(Some(String::from_utf8_lossy(&bytes).into_owned()))
}

/// Resolve `rev` locally, falling back to the remote's history.
fn find_revision(project: &Project, remote: Option<&Remote>, rev: &str) -> Result<Revision> {
    let local = RevStore::open(project);
    match local.resolve_revision(rev) {
        Err(Error::UnknownRevision(_)) | Err(Error::NoCommits) if remote.is_some() => {
            remote.expect("checked").revs().resolve_revision(rev)
        }
        other => other,
    }
}

impl<'a> NodeHandle<'a> {
    pub fn from_rev(project: &'a Project, stage: &str, rev: &str, remote: Option<&'a Remote>) -> Result<Self> {
        let store = project.store();
        let revision = find_revision(project, remote, rev)?;
        let pipeline_text = metadata(store, remote, &revision, PIPELINE_FILE)?.unwrap_or_default();
        let pipeline = parse_pipeline(&pipeline_text)?;
        let stage_def = pipeline.stage(stage)?.clone();
        let no_results = || Error::NoResults {
            stage: stage.to_string(),
            rev: rev.to_string(),
        };
        let lock_text = metadata(store, remote, &revision, LOCK_FILE)?.ok_or_else(no_results)?;
        let record = parse_lock(&lock_text)?
            .stages
            .remove(stage)
            .ok_or_else(no_results)?;
        let tree = match metadata(store, remote, &revision, PARAMS_FILE)? {
            Some(t) => parse_params(&t)?,
            None => ParamTree::new(),
        };
        let params = stage_def
            .params
            .iter()
            .map(|k| Ok((k.clone(), tree.get(k)?.to_json())))
            .collect::<Result<_>>()?;
        let scratch = project
            .dac_dir()
            .join("scratch")
            .join(revision.id.as_str())
            .join(stage);
        Ok(NodeHandle {
            store,
            remote,
            scratch,
            stage: stage_def,
            rev: revision.id,
            params,
            record,
            memo: Mutex::new(BTreeMap::new()),
            data_reads: AtomicU64::new(0),
            fetches: AtomicU64::new(0),
        })
    }

    pub fn stage(&self) -> &StageDef {
        &self.stage
    }

    pub fn rev(&self) -> &ObjectId {
        &self.rev
    }

    /// Declared params of the stage at this revision.
    pub fn params(&self) -> &BTreeMap<String, serde_json::Value> {
        &self.params
    }

    /// Locked output contents, without reading them.
    pub fn outputs(&self) -> &BTreeMap<String, Content> {
        &self.record.outs
    }

    /// Data objects read from the local store by this handle.
    pub fn data_reads(&self) -> u64 {
        self.data_reads.load(Ordering::Relaxed)
    }

    /// Objects fetched from the remote by this handle.
    pub fn fetches(&self) -> u64 {
        self.fetches.load(Ordering::Relaxed)
    }

    pub fn get_attr(&self, attr: &str) -> Result<AttrValue> {
        if let Some(v) = self.memo.lock().expect("memo lock").get(attr) {
            return Ok(v.clone());
        }
        let value = self.resolve(attr)?;
        self.memo
            .lock()
            .expect("memo lock")
            .insert(attr.to_string(), value.clone());
        Ok(value)
    }

    fn resolve(&self, attr: &str) -> Result<AttrValue> {
        let name = &self.stage.name;
        if let Some(kind) = self.stage.attr_kind(attr) {
            let file = managed_file(name, kind);
            let content = self.locked(&file)?;
            self.ensure_local(content)?;
            let bytes = self.store.read(content.oid())?;
            self.data_reads.fetch_add(1, Ordering::Relaxed);
            return attr_from_json(name, attr, &bytes).map(AttrValue::Json);
        }
        let qualified = format!("{name}.{attr}");
        for key in [attr, qualified.as_str()] {
            if let Some(v) = self.params.get(key) {
                return Ok(AttrValue::Json(v.clone()));
            }
        }
        let is_path = self.stage.outs_path.iter().chain(&self.stage.plots).any(|p| p == attr);
        if is_path {
            let content = self.locked(attr)?.clone();
            return self.materialize(attr, &content).map(AttrValue::Path);
        }
        Err(Error::UndeclaredAttr {
            stage: name.clone(),
            attr: attr.to_string(),
        })
    }

    fn locked(&self, path: &str) -> Result<&Content> {
        self.record.outs.get(path).ok_or_else(|| Error::NoResults {
            stage: self.stage.name.clone(),
            rev: self.rev.to_string(),
        })
    }

    fn ensure_local(&self, content: &Content) -> Result<()> {
        let complete = self.store.has(content.oid())
            && (!content.is_dir() || self.store.closure(content)?.iter().all(|o| self.store.has(o)));
        if complete {
            return Ok(());
        }
        match self.remote {
            Some(r) => {
                let n = fetch_content(self.store, r.store(), content)?;
                self.fetches.fetch_add(n as u64, Ordering::Relaxed);
                Ok(())
            }
            None => Err(Error::ObjectMissing(content.oid().clone())),
        }
    }

    fn materialize(&self, rel: &str, content: &Content) -> Result<PathBuf> {
        let dest = self.scratch.join(rel);
        if dest.exists() && &hash_path(&dest)? == content {
            return Ok(dest);
        }
        self.ensure_local(content)?;
        if dest.exists() {
            make_writable(&dest)?;
        }
        self.store.checkout_content(content, &dest, CheckoutMode::Copy)?;
        self.data_reads.fetch_add(1, Ordering::Relaxed);
        let actual = hash_path(&dest)?;
        if &actual != content {
            return Err(Error::Corrupt {
                oid: content.oid().clone(),
                actual: actual.oid().clone(),
            });
        }
        make_readonly(&dest)?;
        Ok(dest)
    }
}

fn set_readonly(path: &Path, readonly: bool) -> Result<()> {
    if path.is_dir() {
        for entry in fs::read_dir(path).at(path)? {
            set_readonly(&entry.at(path)?.path(), readonly)?;
        }
        return Ok(());
    }
    let mut perms = fs::metadata(path).at(path)?.permissions();
    #[allow(clippy::permissions_set_readonly_false)]
    perms.set_readonly(readonly);
    fs::set_permissions(path, perms).at(path)
}

fn make_readonly(path: &Path) -> Result<()> {
    set_readonly(path, true)
}

fn make_writable(path: &Path) -> Result<()> {
    set_readonly(path, false)
}
