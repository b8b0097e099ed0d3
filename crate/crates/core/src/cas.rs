//! Content-addressed object store.
//!
//! Blobs are keyed by the SHA-256 of their bytes and live at
//! `<root>/<first 2 hex>/<remaining 62 hex>`. Objects are written to a
//! temporary file and renamed into place, so readers only ever observe
//! complete objects. Directories are stored as a manifest object listing
//! `<oid> <relative path>` lines sorted by path.

use std::fmt;
use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObjectId(String);

impl ObjectId {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn short(&self) -> &str {
        &self.0[..8]
    }

    fn from_digest(digest: &[u8]) -> Self {
        ObjectId(hex::encode(digest))
    }
}

impl FromStr for ObjectId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            Ok(ObjectId(s.to_string()))
        } else {
            Err(Error::InvalidObjectId(s.to_string()))
        }
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ObjectId({})", self.short())
    }
}

pub fn hash_bytes(data: &[u8]) -> ObjectId {
    ObjectId::from_digest(&Sha256::digest(data))
}

pub fn hash_reader(mut reader: impl Read) -> io::Result<ObjectId> {
    let mut hasher = Sha256::new();
    io::copy(&mut reader, &mut hasher)?;
    Ok(ObjectId::from_digest(&hasher.finalize()))
}

pub fn hash_file(path: &Path) -> Result<ObjectId> {
    let file = File::open(path).at(path)?;
    hash_reader(file).at(path)
}

/// Hashed content of a tracked path.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Content {
    File(ObjectId),
    /// Object id of the directory manifest.
    Dir(ObjectId),
}

impl Content {
    pub fn oid(&self) -> &ObjectId {
        match self {
            Content::File(oid) | Content::Dir(oid) => oid,
        }
    }

    pub fn is_dir(&self) -> bool {
        matches!(self, Content::Dir(_))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CheckoutMode {
    #[default]
    Copy,
    Link,
}

/// One `<oid> <relative path>` line of a directory manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub oid: ObjectId,
}

pub fn render_manifest(entries: &[ManifestEntry]) -> String {
    let mut sorted: Vec<&ManifestEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.path.cmp(&b.path));
    let mut out = String::new();
    for e in sorted {
        out.push_str(e.oid.as_str());
        out.push(' ');
        out.push_str(&e.path);
        out.push('\n');
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let (oid, path) = line.split_once(' ').ok_or_else(|| Error::Syntax {
            line: i + 1,
            msg: "malformed manifest line".into(),
        })?;
        if path.is_empty() || path.starts_with('/') || path.split('/').any(|c| c == "..") {
            return Err(Error::Syntax {
                line: i + 1,
                msg: format!("invalid manifest path '{path}'"),
            });
        }
        entries.push(ManifestEntry {
            path: path.to_string(),
            oid: oid.parse()?,
        });
    }
    Ok(entries)
}

fn walk_files(base: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
    for entry in fs::read_dir(dir).at(dir)? {
        let entry = entry.at(dir)?;
        let path = entry.path();
        let ty = entry.file_type().at(&path)?;
        if ty.is_dir() {
            walk_files(base, &path, out)?;
        } else if ty.is_file() {
            let rel = path
                .strip_prefix(base)
                .expect("walked path is under base")
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            out.push((rel, path));
        }
    }
    Ok(())
}

/// Hash a file or directory without writing anything to a store.
pub fn hash_path(path: &Path) -> Result<Content> {
    let meta = fs::metadata(path).at(path)?;
    if meta.is_dir() {
        let mut files = Vec::new();
        walk_files(path, path, &mut files)?;
        let entries = files
            .into_iter()
            .map(|(rel, full)| Ok(ManifestEntry { path: rel, oid: hash_file(&full)? }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Content::Dir(hash_bytes(render_manifest(&entries).as_bytes())))
    } else {
        Ok(Content::File(hash_file(path)?))
    }
}

#[derive(Debug)]
pub struct ObjectStore {
    root: PathBuf,
    reads: AtomicU64,
    meta_reads: AtomicU64,
}

impl ObjectStore {
    /// Open an existing store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if !root.is_dir() {
            return Err(Error::NotInitialized(root));
        }
        Ok(ObjectStore {
            root,
            reads: AtomicU64::new(0),
            meta_reads: AtomicU64::new(0),
        })
    }

    /// Open the store, creating the root directory if needed.
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).at(&root)?;
        Self::open(root)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn object_path(&self, oid: &ObjectId) -> PathBuf {
        let s = oid.as_str();
        self.root.join(&s[..2]).join(&s[2..])
    }

    pub fn has(&self, oid: &ObjectId) -> bool {
        self.object_path(oid).is_file()
    }

    /// Number of data-object reads served so far (reads and file checkouts).
    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    fn temp_file(&self) -> Result<tempfile::NamedTempFile> {
        let tmp = self.root.join("tmp");
        fs::create_dir_all(&tmp).at(&tmp)?;
        tempfile::NamedTempFile::new_in(&tmp).at(&tmp)
    }

    fn publish(&self, tmp: tempfile::NamedTempFile, oid: &ObjectId) -> Result<()> {
        let dest = self.object_path(oid);
        if dest.is_file() {
            return Ok(());
        }
        let shard = dest.parent().expect("object path has a shard dir");
        fs::create_dir_all(shard).at(shard)?;
        let mut perms = tmp.as_file().metadata().at(tmp.path())?.permissions();
        perms.set_readonly(true);
        fs::set_permissions(tmp.path(), perms).at(tmp.path())?;
        tmp.persist(&dest).map_err(|e| Error::io(&dest, e.error))?;
        Ok(())
    }

    /// Ingest a regular file. Returns its id; a no-op when already present.
    pub fn store(&self, path: &Path) -> Result<ObjectId> {
        let meta = fs::metadata(path).at(path)?;
        if !meta.is_file() {
            return Err(Error::io(
                path,
                io::Error::new(io::ErrorKind::InvalidInput, "not a regular file"),
            ));
        }
        let oid = hash_file(path)?;
        if self.has(&oid) {
            return Ok(oid);
        }
        // The published id is the hash of what was actually copied, so a file
        // mutated mid-ingest can never end up under the wrong name.
        let mut tmp = self.temp_file()?;
        let mut src = File::open(path).at(path)?;
        let mut tee = HashingWriter::new(tmp.as_file_mut());
        io::copy(&mut src, &mut tee).at(path)?;
        let copied = tee.finish();
        tmp.as_file().sync_all().at(tmp.path())?;
        self.publish(tmp, &copied)?;
        Ok(copied)
    }

    pub fn store_bytes(&self, data: &[u8]) -> Result<ObjectId> {
        let oid = hash_bytes(data);
        if self.has(&oid) {
            return Ok(oid);
        }
        let mut tmp = self.temp_file()?;
        tmp.write_all(data).at(tmp.path())?;
        tmp.as_file().sync_all().at(tmp.path())?;
        self.publish(tmp, &oid)?;
        Ok(oid)
    }

    /// Ingest a file or a directory (as a manifest plus one object per file).
    pub fn store_path(&self, path: &Path) -> Result<Content> {
        let meta = fs::metadata(path).at(path)?;
        if meta.is_dir() {
            let mut files = Vec::new();
            walk_files(path, path, &mut files)?;
            let entries = files
                .into_iter()
                .map(|(rel, full)| Ok(ManifestEntry { path: rel, oid: self.store(&full)? }))
                .collect::<Result<Vec<_>>>()?;
            let manifest = render_manifest(&entries);
            Ok(Content::Dir(self.store_bytes(manifest.as_bytes())?))
        } else {
            Ok(Content::File(self.store(path)?))
        }
    }

    /// Copy an object from another store, verifying its content.
    pub fn import(&self, from: &ObjectStore, oid: &ObjectId) -> Result<bool> {
        if self.has(oid) {
            return Ok(false);
        }
        let src_path = from.object_path(oid);
        let mut src = File::open(&src_path).at(&src_path)?;
        let mut tmp = self.temp_file()?;
        let mut tee = HashingWriter::new(tmp.as_file_mut());
        io::copy(&mut src, &mut tee).at(&src_path)?;
        let actual = tee.finish();
        if &actual != oid {
            return Err(Error::Corrupt {
                oid: oid.clone(),
                actual,
            });
        }
        tmp.as_file().sync_all().at(tmp.path())?;
        self.publish(tmp, oid)?;
        Ok(true)
    }

    fn read_raw(&self, oid: &ObjectId) -> Result<Vec<u8>> {
        let path = self.object_path(oid);
        match fs::read(&path) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(Error::ObjectMissing(oid.clone())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    /// Read a data object. Counted by [`ObjectStore::reads`].
    pub fn read(&self, oid: &ObjectId) -> Result<Vec<u8>> {
        let bytes = self.read_raw(oid)?;
        self.reads.fetch_add(1, Ordering::Relaxed);
        Ok(bytes)
    }

    /// Read a metadata object (revision files, manifests). Counted separately
    /// so data reads can be measured on their own.
    pub fn read_metadata(&self, oid: &ObjectId) -> Result<Vec<u8>> {
        let bytes = self.read_raw(oid)?;
        self.meta_reads.fetch_add(1, Ordering::Relaxed);
        Ok(bytes)
    }

    pub fn metadata_reads(&self) -> u64 {
        self.meta_reads.load(Ordering::Relaxed)
    }

    pub fn read_manifest(&self, oid: &ObjectId) -> Result<Vec<ManifestEntry>> {
        let bytes = self.read_metadata(oid)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Syntax {
            line: 0,
            msg: format!("manifest {oid} is not UTF-8"),
        })?;
        parse_manifest(&text)
    }

    /// Materialize an object at `dest`, replacing whatever is there.
    pub fn checkout(&self, oid: &ObjectId, dest: &Path, mode: CheckoutMode) -> Result<()> {
        let src = self.object_path(oid);
        if !src.is_file() {
            return Err(Error::ObjectMissing(oid.clone()));
        }
        if let Some(parent) = dest.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).at(parent)?;
            }
        }
        remove_path(dest)?;
        let linked = mode == CheckoutMode::Link && fs::hard_link(&src, dest).is_ok();
        if !linked {
            let tmp_dest = dest.with_file_name(format!(
                ".{}.dac-tmp",
                dest.file_name().unwrap_or_default().to_string_lossy()
            ));
            fs::copy(&src, &tmp_dest).at(&tmp_dest)?;
            make_writable(&tmp_dest)?;
            fs::rename(&tmp_dest, dest).at(dest)?;
        }
        self.reads.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    pub fn checkout_content(&self, content: &Content, dest: &Path, mode: CheckoutMode) -> Result<()> {
        match content {
            Content::File(oid) => self.checkout(oid, dest, mode),
            Content::Dir(oid) => {
                let entries = self.read_manifest(oid)?;
                if let Some(missing) = entries.iter().find(|e| !self.has(&e.oid)) {
                    return Err(Error::ObjectMissing(missing.oid.clone()));
                }
                remove_path(dest)?;
                fs::create_dir_all(dest).at(dest)?;
                for e in &entries {
                    self.checkout(&e.oid, &dest.join(&e.path), mode)?;
                }
                Ok(())
            }
        }
    }

    /// Every object id referenced by `content`, including manifest members.
    pub fn closure(&self, content: &Content) -> Result<Vec<ObjectId>> {
        match content {
            Content::File(oid) => Ok(vec![oid.clone()]),
            Content::Dir(oid) => {
                let mut ids = vec![oid.clone()];
                ids.extend(self.read_manifest(oid)?.into_iter().map(|e| e.oid));
                Ok(ids)
            }
        }
    }

    /// All object ids currently in the store, sorted.
    pub fn list(&self) -> Result<Vec<ObjectId>> {
        let mut ids = Vec::new();
        for shard in fs::read_dir(&self.root).at(&self.root)? {
            let shard = shard.at(&self.root)?;
            let name = shard.file_name().to_string_lossy().into_owned();
            if name.len() != 2 || !shard.path().is_dir() {
                continue;
            }
            for obj in fs::read_dir(shard.path()).at(shard.path())? {
                let obj = obj.at(shard.path())?;
                let rest = obj.file_name().to_string_lossy().into_owned();
                if let Ok(oid) = format!("{name}{rest}").parse() {
                    ids.push(oid);
                }
            }
        }
        ids.sort();
        Ok(ids)
    }
}

pub(crate) fn remove_path(path: &Path) -> Result<()> {
    match fs::symlink_metadata(path) {
        Ok(meta) if meta.is_dir() => fs::remove_dir_all(path).at(path),
        Ok(_) => fs::remove_file(path).at(path),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn make_writable(path: &Path) -> Result<()> {
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(path, fs::Permissions::from_mode(0o644)).at(path)
    }
    #[cfg(not(unix))]
    {
        let mut perms = fs::metadata(path).at(path)?.permissions();
        #[allow(clippy::permissions_set_readonly_false)]
        perms.set_readonly(false);
        fs::set_permissions(path, perms).at(path)
    }
}

struct HashingWriter<W> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> HashingWriter<W> {
    fn new(inner: W) -> Self {
        HashingWriter {
            inner,
            hasher: Sha256::new(),
        }
    }

    fn finish(self) -> ObjectId {
        ObjectId::from_digest(&self.hasher.finalize())
    }
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}
