//! Directory remotes.
//!
//! A remote is a plain directory laid out like the local metadata dir:
//! `cache/` (sharded objects), `revs/` and `refs/`. Objects are copied via a
//! temporary file and rename on both sides, so a reader never sees a
//! partial object.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::cas::{Content, ObjectId, ObjectStore};
use crate::error::{Error, IoContext, Result};
use crate::executor::lock::{parse_lock, LockFile};
use crate::project::{write_atomic, Project, LOCK_FILE};
use crate::revstore::{RevStore, Revision};

#[derive(Debug)]
pub struct Remote {
    root: PathBuf,
    store: ObjectStore,
}

impl Remote {
    /// Open an existing remote directory.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if !root.is_dir() {
            return Err(Error::BadRemote(root));
        }
        let store = ObjectStore::create(root.join("cache"))?;
        Ok(Remote { root, store })
    }

    /// Open a remote, creating its directory first if needed.
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if root.exists() && !root.is_dir() {
            return Err(Error::BadRemote(root));
        }
        fs::create_dir_all(&root).at(&root)?;
        Self::open(root)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn store(&self) -> &ObjectStore {
        &self.store
    }

    pub fn revs(&self) -> RevStore<'_> {
        RevStore::at(&self.root, &self.store)
    }
}

/// Copy one object from `from` to `to` unless already present.
fn transfer(from: &ObjectStore, to: &ObjectStore, oid: &ObjectId, missing: fn(ObjectId) -> Error) -> Result<bool> {
    if to.has(oid) {
        return Ok(false);
    }
    if !from.has(oid) {
        return Err(missing(oid.clone()));
    }
    to.import(from, oid)
}

/// Object ids referenced by a lock: every dep and output plus directory
/// manifest members. Manifests are read from `store`.
fn lock_closure(lock: &LockFile, store: &ObjectStore, into: &mut BTreeSet<ObjectId>) -> Result<()> {
    for rec in lock.stages.values() {
        for content in rec.deps.values().chain(rec.outs.values()) {
            add_content(content, store, into)?;
        }
    }
    Ok(())
}

fn add_content(content: &Content, store: &ObjectStore, into: &mut BTreeSet<ObjectId>) -> Result<()> {
    into.insert(content.oid().clone());
    if content.is_dir() && store.has(content.oid()) {
        for entry in store.read_manifest(content.oid())? {
            into.insert(entry.oid);
        }
    }
    Ok(())
}

fn revision_lock(store: &ObjectStore, rev: &Revision) -> Result<LockFile> {
    match rev.tree.get(LOCK_FILE) {
        Some(oid) => {
            let bytes = store.read_metadata(oid)?;
            parse_lock(&String::from_utf8_lossy(&bytes))
        }
        None => Ok(LockFile::default()),
    }
}

fn copy_revisions(from: &RevStore<'_>, to: &RevStore<'_>, overwrite_refs: bool) -> Result<()> {
    for id in from.list_revisions()? {
        if !to.has_revision(&id) {
            let src = from.revs_dir().join(id.as_str());
            let bytes = fs::read(&src).at(&src)?;
            write_atomic(&to.revs_dir().join(id.as_str()), &bytes)?;
        }
    }
    for (kind, name, id) in from.list_refs()? {
        if overwrite_refs || to.get_ref(kind, &name)?.is_none() {
            to.set_ref(kind, &name, &id)?;
        }
    }
    Ok(())
}

/// Upload the objects of the workspace lock and of every revision, then
/// export revision records and refs. Returns the number of objects copied.
pub fn push(project: &Project, remote: &Remote) -> Result<usize> {
    let local = project.store();
    let revs = RevStore::open(project);
    let mut wanted = BTreeSet::new();
    lock_closure(&project.load_lock()?, local, &mut wanted)?;
    for id in revs.list_revisions()? {
        let rev = revs.load(&id)?;
        wanted.extend(rev.tree.values().cloned());
        lock_closure(&revision_lock(local, &rev)?, local, &mut wanted)?;
    }
    let mut count = 0;
    for oid in &wanted {
        if transfer(local, remote.store(), oid, Error::ObjectMissing)? {
            count += 1;
        }
    }
    copy_revisions(&revs, &remote.revs(), true)?;
    Ok(count)
}

/// Import history from the remote and download every object that `rev`
/// (default `HEAD`) needs. Returns the number of objects copied.
pub fn pull(project: &Project, remote: &Remote, rev: Option<&str>) -> Result<usize> {
    let local = project.store();
    let revs = RevStore::open(project);
    copy_revisions(&remote.revs(), &revs, false)?;
    let target = revs.resolve_revision(rev.unwrap_or("HEAD"))?;

    let mut count = 0;
    for oid in target.tree.values() {
        if transfer(remote.store(), local, oid, Error::RemoteObjectMissing)? {
            count += 1;
        }
    }
    let lock = revision_lock(local, &target)?;
    let mut seen = BTreeSet::new();
    for rec in lock.stages.values() {
        for content in rec.deps.values().chain(rec.outs.values()) {
            if seen.insert(content.clone()) {
                count += fetch_content(local, remote.store(), content)?;
            }
        }
    }
    Ok(count)
}

/// Fetch `content` and, for directories, its members from `remote`.
pub fn fetch_content(local: &ObjectStore, remote: &ObjectStore, content: &Content) -> Result<usize> {
    let mut count = usize::from(transfer(remote, local, content.oid(), Error::RemoteObjectMissing)?);
    if content.is_dir() {
        for entry in local.read_manifest(content.oid())? {
            count += usize::from(transfer(remote, local, &entry.oid, Error::RemoteObjectMissing)?);
        }
    }
    Ok(count)
}
