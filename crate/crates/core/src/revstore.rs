//! Revision history for the tracked metadata files.
//!
//! A revision is a small canonical text record naming the object ids of
//! `pipeline.dac`, `params.dac` and `lock.dac`, its parent, a message and a
//! timestamp. Its id is the SHA-256 of that record, and records live at
//! `revs/<id>`. Refs are files at `refs/<kind>/<name>` holding an id, and
//! `HEAD` holds either `ref: <kind>/<name>` or a bare id.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::path::PathBuf;

use crate::cas::{hash_bytes, ObjectId, ObjectStore};
use crate::error::{Error, IoContext, Result};
use crate::pipeline::block::{self, syntax, Node, NodeKind};
use crate::project::{write_atomic, Project, TRACKED_FILES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RefKind {
    Branch,
    Tag,
    Experiment,
}

impl RefKind {
    pub const ALL: [RefKind; 3] = [RefKind::Branch, RefKind::Tag, RefKind::Experiment];

    pub fn dir_name(self) -> &'static str {
        match self {
            RefKind::Branch => "branch",
            RefKind::Tag => "tag",
            RefKind::Experiment => "experiment",
        }
    }
}

impl fmt::Display for RefKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Revision {
    pub id: ObjectId,
    pub parent: Option<ObjectId>,
    pub message: String,
    pub timestamp: u64,
    /// Tracked path -> object id of its bytes.
    pub tree: BTreeMap<String, ObjectId>,
}

fn render_record(
    tree: &BTreeMap<String, ObjectId>,
    parent: Option<&ObjectId>,
    message: &str,
    timestamp: u64,
) -> String {
    let mut fields = Vec::new();
    if let Some(p) = parent {
        fields.push(("parent".to_string(), Node::plain(p.to_string())));
    }
    fields.push(("timestamp".to_string(), Node::plain(timestamp.to_string())));
    fields.push(("message".to_string(), Node::quoted(message)));
    fields.push((
        "tree".to_string(),
        Node::map(
            tree.iter()
                .map(|(k, v)| (k.clone(), Node::plain(v.to_string())))
                .collect(),
        ),
    ));
    block::emit(&Node::map(fields))
}

fn parse_record(id: ObjectId, text: &str) -> Result<Revision> {
    let root = block::parse(text)?;
    let NodeKind::Map(fields) = &root.kind else {
        return Err(syntax(root.line, "revision record must be a mapping"));
    };
    let get = |name: &str| fields.iter().find(|(k, _)| k == name).map(|(_, v)| v);
    let scalar = |name: &str| -> Result<Option<String>> {
        match get(name) {
            None => Ok(None),
            Some(n) => n
                .as_scalar()
                .map(|s| Some(s.text.clone()))
                .ok_or_else(|| syntax(n.line, format!("'{name}' must be a scalar"))),
        }
    };
    let parent = scalar("parent")?.map(|p| p.parse()).transpose()?;
    let timestamp = scalar("timestamp")?
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| syntax(root.line, "revision record has no valid timestamp"))?;
    let message = scalar("message")?.unwrap_or_default();
    let mut tree = BTreeMap::new();
    if let Some(node) = get("tree") {
        if let NodeKind::Map(entries) = &node.kind {
            for (path, v) in entries {
                let oid = v
                    .as_scalar()
                    .ok_or_else(|| syntax(v.line, "tree entries must be object ids"))?
                    .text
                    .parse()?;
                tree.insert(path.clone(), oid);
            }
        }
    }
    Ok(Revision {
        id,
        parent,
        message,
        timestamp,
        tree,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Head {
    Branch(String),
    Detached(ObjectId),
}

pub fn validate_ref_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && !name.starts_with(['.', '-'])
        && !name.contains("..")
        && name != "HEAD"
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidRefName(name.to_string()))
    }
}

/// Held while mutating history; released on drop.
pub struct WriteLock {
    _file: File,
}

/// Access to revision records and refs under a metadata directory (the
/// project's `.dac/`, or the root of a directory remote).
pub struct RevStore<'a> {
    meta: PathBuf,
    store: &'a ObjectStore,
}

impl<'a> RevStore<'a> {
    pub fn open(project: &'a Project) -> Self {
        RevStore {
            meta: project.dac_dir(),
            store: project.store(),
        }
    }

    pub fn at(meta: impl Into<PathBuf>, store: &'a ObjectStore) -> Self {
        RevStore {
            meta: meta.into(),
            store,
        }
    }

    pub fn store(&self) -> &'a ObjectStore {
        self.store
    }

    pub fn revs_dir(&self) -> PathBuf {
        self.meta.join("revs")
    }

    pub fn refs_dir(&self) -> PathBuf {
        self.meta.join("refs")
    }

    /// Take the single-writer lock.
    pub fn lock(&self) -> Result<WriteLock> {
        let path = self.meta.join("revstore.lock");
        let file = File::options()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .at(&path)?;
        file.lock().at(&path)?;
        Ok(WriteLock { _file: file })
    }

    /// Append a revision record. Existing records are never rewritten.
    pub fn write_revision(
        &self,
        tree: BTreeMap<String, ObjectId>,
        parent: Option<ObjectId>,
        message: &str,
        timestamp: u64,
    ) -> Result<Revision> {
        let text = render_record(&tree, parent.as_ref(), message, timestamp);
        let id = hash_bytes(text.as_bytes());
        let path = self.revs_dir().join(id.as_str());
        if !path.exists() {
            write_atomic(&path, text.as_bytes())?;
        }
        Ok(Revision {
            id,
            parent,
            message: message.to_string(),
            timestamp,
            tree,
        })
    }

    pub fn has_revision(&self, id: &ObjectId) -> bool {
        self.revs_dir().join(id.as_str()).is_file()
    }

    pub fn load(&self, id: &ObjectId) -> Result<Revision> {
        let path = self.revs_dir().join(id.as_str());
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::UnknownRevision(id.to_string()))
            }
            Err(e) => return Err(Error::io(&path, e)),
        };
        let actual = hash_bytes(text.as_bytes());
        if &actual != id {
            return Err(Error::Corrupt {
                oid: id.clone(),
                actual,
            });
        }
        parse_record(id.clone(), &text)
    }

    pub fn list_revisions(&self) -> Result<Vec<ObjectId>> {
        let dir = self.revs_dir();
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut ids = Vec::new();
        for entry in fs::read_dir(&dir).at(&dir)? {
            let entry = entry.at(&dir)?;
            if let Ok(id) = entry.file_name().to_string_lossy().parse::<ObjectId>() {
                ids.push(id);
            }
        }
        ids.sort();
        Ok(ids)
    }

    fn ref_path(&self, kind: RefKind, name: &str) -> PathBuf {
        self.refs_dir().join(kind.dir_name()).join(name)
    }

    pub fn get_ref(&self, kind: RefKind, name: &str) -> Result<Option<ObjectId>> {
        let path = self.ref_path(kind, name);
        match fs::read_to_string(&path) {
            Ok(text) => Ok(Some(text.trim_end().parse()?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    pub fn set_ref(&self, kind: RefKind, name: &str, id: &ObjectId) -> Result<()> {
        validate_ref_name(name)?;
        write_atomic(&self.ref_path(kind, name), format!("{id}\n").as_bytes())
    }

    /// Every ref, sorted by kind then name.
    pub fn list_refs(&self) -> Result<Vec<(RefKind, String, ObjectId)>> {
        let mut out = Vec::new();
        for kind in RefKind::ALL {
            let dir = self.refs_dir().join(kind.dir_name());
            if !dir.is_dir() {
                continue;
            }
            let mut names = Vec::new();
            for entry in fs::read_dir(&dir).at(&dir)? {
                let entry = entry.at(&dir)?;
                names.push(entry.file_name().to_string_lossy().into_owned());
            }
            names.sort();
            for name in names {
                if let Some(id) = self.get_ref(kind, &name)? {
                    out.push((kind, name, id));
                }
            }
        }
        Ok(out)
    }

    pub fn head(&self) -> Result<Head> {
        let path = self.meta.join("HEAD");
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Ok(Head::Branch("main".into()))
            }
            Err(e) => return Err(Error::io(&path, e)),
        };
        let text = text.trim_end();
        match text.strip_prefix("ref: ") {
            Some(r) => {
                let name = r.strip_prefix("branch/").unwrap_or(r);
                Ok(Head::Branch(name.to_string()))
            }
            None => Ok(Head::Detached(text.parse()?)),
        }
    }

    pub fn set_head(&self, head: &Head) -> Result<()> {
        let text = match head {
            Head::Branch(b) => format!("ref: branch/{b}\n"),
            Head::Detached(id) => format!("{id}\n"),
        };
        write_atomic(&self.meta.join("HEAD"), text.as_bytes())
    }

    /// The revision HEAD points at, or `None` on an unborn branch.
    pub fn head_id(&self) -> Result<Option<ObjectId>> {
        match self.head()? {
            Head::Branch(b) => self.get_ref(RefKind::Branch, &b),
            Head::Detached(id) => Ok(Some(id)),
        }
    }

    /// Resolve `HEAD`, a full id, a branch, tag or experiment name, or a
    /// unique id prefix of at least four characters.
    pub fn resolve(&self, rev: &str) -> Result<ObjectId> {
        if rev == "HEAD" {
            return self.head_id()?.ok_or(Error::NoCommits);
        }
        if let Ok(id) = rev.parse::<ObjectId>() {
            if self.has_revision(&id) {
                return Ok(id);
            }
        }
        if validate_ref_name(rev).is_ok() {
            for kind in RefKind::ALL {
                if let Some(id) = self.get_ref(kind, rev)? {
                    return Ok(id);
                }
            }
        }
        if rev.len() >= 4 && rev.bytes().all(|b| b.is_ascii_hexdigit()) {
            let matches: Vec<ObjectId> = self
                .list_revisions()?
                .into_iter()
                .filter(|id| id.as_str().starts_with(rev))
                .collect();
            if let [only] = matches.as_slice() {
                return Ok(only.clone());
            }
        }
        Err(Error::UnknownRevision(rev.to_string()))
    }

    pub fn resolve_revision(&self, rev: &str) -> Result<Revision> {
        self.load(&self.resolve(rev)?)
    }

    /// Historical bytes of a tracked file.
    pub fn read_file_at(&self, rev: &str, path: &str) -> Result<Vec<u8>> {
        let revision = self.resolve_revision(rev)?;
        let oid = revision.tree.get(path).ok_or_else(|| Error::PathAbsentAtRev {
            rev: rev.to_string(),
            path: path.to_string(),
        })?;
        self.store.read_metadata(oid)
    }

    /// Revisions from `start` back to the root.
    pub fn log(&self, start: &ObjectId) -> Result<Vec<Revision>> {
        let mut out = Vec::new();
        let mut next = Some(start.clone());
        while let Some(id) = next {
            let rev = self.load(&id)?;
            next = rev.parent.clone();
            out.push(rev);
        }
        Ok(out)
    }
}

/// Outcome of [`commit`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommitOutcome {
    pub id: ObjectId,
    /// False when the tree matched HEAD and nothing was recorded.
    pub created: bool,
}

fn workspace_tree(project: &Project) -> Result<BTreeMap<String, ObjectId>> {
    let mut tree = BTreeMap::new();
    for name in TRACKED_FILES {
        let path = project.path(name);
        if path.is_file() {
            tree.insert(name.to_string(), project.store().store(&path)?);
        }
    }
    Ok(tree)
}

/// Record the tracked metadata files as a new revision on top of HEAD.
pub fn commit(project: &Project, message: &str) -> Result<CommitOutcome> {
    let revs = RevStore::open(project);
    let _guard = revs.lock()?;
    let tree = workspace_tree(project)?;
    if tree.is_empty() {
        return Err(Error::NothingTracked);
    }
    let head = revs.head()?;
    let parent = revs.head_id()?;
    if let Some(p) = &parent {
        if revs.load(p)?.tree == tree {
            return Ok(CommitOutcome {
                id: p.clone(),
                created: false,
            });
        }
    }
    let rev = revs.write_revision(tree, parent, message, project.now())?;
    match head {
        Head::Branch(b) => revs.set_ref(RefKind::Branch, &b, &rev.id)?,
        Head::Detached(_) => revs.set_head(&Head::Detached(rev.id.clone()))?,
    }
    Ok(CommitOutcome {
        id: rev.id,
        created: true,
    })
}

/// Tracked files whose workspace bytes differ from `reference`.
fn differing(project: &Project, reference: &BTreeMap<String, ObjectId>) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for name in TRACKED_FILES {
        let path = project.path(name);
        let current = if path.is_file() {
            Some(crate::cas::hash_file(&path)?)
        } else {
            None
        };
        if current.as_ref() != reference.get(name) {
            out.push(name.to_string());
        }
    }
    Ok(out)
}

/// Tracked files with changes relative to HEAD (every existing tracked
/// file when nothing is committed).
pub fn dirty_files(project: &Project) -> Result<Vec<String>> {
    let revs = RevStore::open(project);
    match revs.head_id()? {
        Some(id) => differing(project, &revs.load(&id)?.tree),
        None => Ok(TRACKED_FILES
            .iter()
            .filter(|f| project.path(f).is_file())
            .map(|f| f.to_string())
            .collect()),
    }
}

/// Restore the tracked files of `rev` into the workspace and move HEAD.
pub fn checkout_rev(project: &Project, rev: &str, force: bool) -> Result<ObjectId> {
    let revs = RevStore::open(project);
    let _guard = revs.lock()?;
    let id = revs.resolve(rev)?;
    let target = revs.load(&id)?;
    if !force {
        let dirty = match revs.head_id()? {
            Some(h) => differing(project, &revs.load(&h)?.tree)?,
            // Nothing committed: only files that would be overwritten count.
            None => differing(project, &target.tree)?
                .into_iter()
                .filter(|f| project.path(f).exists())
                .collect(),
        };
        if !dirty.is_empty() {
            return Err(Error::DirtyWorkspace(dirty));
        }
    }
    write_tree(project, &revs, &target.tree)?;
    let on_branch = rev != "HEAD"
        && validate_ref_name(rev).is_ok()
        && revs.get_ref(RefKind::Branch, rev)?.as_ref() == Some(&id);
    if on_branch {
        revs.set_head(&Head::Branch(rev.to_string()))?;
    } else if rev != "HEAD" {
        revs.set_head(&Head::Detached(id.clone()))?;
    }
    Ok(id)
}

pub(crate) fn write_tree(project: &Project, revs: &RevStore<'_>, tree: &BTreeMap<String, ObjectId>) -> Result<()> {
    for name in TRACKED_FILES {
        let path = project.path(name);
        match tree.get(name) {
            Some(oid) => {
                let bytes = revs.store().read_metadata(oid)?;
                write_atomic(&path, &bytes)?;
            }
            None => crate::cas::remove_path(&path)?,
        }
    }
    Ok(())
}
