//! `lock.dac` records and the run cache.
//!
//! Directory contents are keyed with a trailing `/` so a checkout knows to
//! expand the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use crate::cas::{Content, ObjectId};
use crate::error::{Error, IoContext, Result};
use crate::graph::Fingerprint;
use crate::pipeline::block::{self, syntax, Node, NodeKind};
use crate::project::write_atomic;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LockRecord {
    pub fingerprint: Fingerprint,
    /// Canonical rendering of each declared param at run time.
    pub params: BTreeMap<String, String>,
    pub deps: BTreeMap<String, Content>,
    pub outs: BTreeMap<String, Content>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LockFile {
    pub stages: BTreeMap<String, LockRecord>,
}

fn content_map_node(map: &BTreeMap<String, Content>) -> Node {
    Node::map(
        map.iter()
            .map(|(k, c)| {
                let key = if c.is_dir() { format!("{k}/") } else { k.clone() };
                (key, Node::plain(c.oid().to_string()))
            })
            .collect(),
    )
}

fn parse_content_map(node: &Node) -> Result<BTreeMap<String, Content>> {
    let entries: &[(String, Node)] = match &node.kind {
        NodeKind::Map(e) => e,
        NodeKind::Null => &[],
        _ => return Err(syntax(node.line, "expected a mapping of path: object id")),
    };
    let mut out = BTreeMap::new();
    for (key, value) in entries {
        let oid: ObjectId = value
            .as_scalar()
            .ok_or_else(|| syntax(value.line, "expected an object id"))?
            .text
            .parse()
            .map_err(|e: Error| syntax(value.line, e.to_string()))?;
        let (name, content) = match key.strip_suffix('/') {
            Some(dir) => (dir.to_string(), Content::Dir(oid)),
            None => (key.clone(), Content::File(oid)),
        };
        if out.insert(name, content).is_some() {
            return Err(syntax(value.line, format!("duplicate entry '{key}'")));
        }
    }
    Ok(out)
}

fn field<'a>(entries: &'a [(String, Node)], name: &str) -> Option<&'a Node> {
    entries.iter().find(|(k, _)| k == name).map(|(_, v)| v)
}

pub fn emit_lock(lock: &LockFile) -> String {
    let stages = lock
        .stages
        .iter()
        .map(|(name, rec)| {
            let params = Node::map(
                rec.params
                    .iter()
                    .map(|(k, v)| (k.clone(), Node::plain(v.clone())))
                    .collect(),
            );
            (
                name.clone(),
                Node::map(vec![
                    ("fingerprint".into(), Node::plain(rec.fingerprint.to_string())),
                    ("params".into(), params),
                    ("deps".into(), content_map_node(&rec.deps)),
                    ("outs".into(), content_map_node(&rec.outs)),
                ]),
            )
        })
        .collect();
    block::emit(&Node::map(vec![("stages".into(), Node::map(stages))]))
}

pub fn parse_lock(text: &str) -> Result<LockFile> {
    let root = block::parse(text)?;
    let NodeKind::Map(top) = &root.kind else {
        return Err(syntax(root.line, "lock file must be a mapping"));
    };
    let mut lock = LockFile::default();
    let Some(stages) = field(top, "stages") else {
        return Ok(lock);
    };
    let entries: &[(String, Node)] = match &stages.kind {
        NodeKind::Map(e) => e,
        NodeKind::Null => &[],
        _ => return Err(syntax(stages.line, "'stages' must be a mapping")),
    };
    for (name, node) in entries {
        let NodeKind::Map(fields) = &node.kind else {
            return Err(syntax(node.line, format!("lock entry '{name}' must be a mapping")));
        };
        let fp = field(fields, "fingerprint")
            .and_then(Node::as_scalar)
            .ok_or_else(|| syntax(node.line, format!("lock entry '{name}' has no fingerprint")))?;
        let fingerprint = Fingerprint(
            fp.text
                .parse()
                .map_err(|e: Error| syntax(node.line, e.to_string()))?,
        );
        let mut params = BTreeMap::new();
        if let Some(p) = field(fields, "params") {
            if let NodeKind::Map(items) = &p.kind {
                for (k, v) in items {
                    let text = v
                        .as_scalar()
                        .ok_or_else(|| syntax(v.line, "expected a param value"))?;
                    params.insert(k.clone(), text.text.clone());
                }
            }
        }
        let deps = field(fields, "deps").map(parse_content_map).transpose()?.unwrap_or_default();
        let outs = field(fields, "outs").map(parse_content_map).transpose()?.unwrap_or_default();
        let record = LockRecord {
            fingerprint,
            params,
            deps,
            outs,
        };
        if lock.stages.insert(name.clone(), record).is_some() {
            return Err(syntax(node.line, format!("duplicate lock entry '{name}'")));
        }
    }
    Ok(lock)
}

/// Fingerprint -> output contents, one file per fingerprint.
#[derive(Clone, Debug)]
pub struct RunCache {
    dir: PathBuf,
}

impl RunCache {
    pub fn new(dir: PathBuf) -> Self {
        RunCache { dir }
    }

    pub fn get(&self, fp: &Fingerprint) -> Result<Option<BTreeMap<String, Content>>> {
        let path = self.dir.join(fp.to_string());
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let root = block::parse(&text)?;
        match &root.kind {
            NodeKind::Map(top) => match field(top, "outs") {
                Some(outs) => Ok(Some(parse_content_map(outs)?)),
                None => Ok(Some(BTreeMap::new())),
            },
            _ => Err(syntax(root.line, "run cache entry must be a mapping")),
        }
    }

    pub fn put(&self, fp: &Fingerprint, outs: &BTreeMap<String, Content>) -> Result<()> {
        fs::create_dir_all(&self.dir).at(&self.dir)?;
        let text = block::emit(&Node::map(vec![("outs".into(), content_map_node(outs))]));
        write_atomic(&self.dir.join(fp.to_string()), text.as_bytes())
    }
}
