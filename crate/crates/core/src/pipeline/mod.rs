//! Pipeline definitions: stages, their declared inputs and outputs, and the
//! canonical `pipeline.dac` text form.
//!
//! ```text
//! stages:
//!   MyNode:
//!     cmd: dac builtin shift-add --data data.txt --shift ${MyNode.shift} --stage MyNode
//!     params:
//!       - MyNode.shift
//!     deps_path:
//!       - data.txt
//!     outs_attr:
//!       - result
//! ```
//!
//! Managed attributes (`outs_attr`, `metrics`) are written by the stage as
//! JSON objects at `.dac/nodes/<stage>/outs.json` and `metrics.json`; those
//! files are implicit path outputs.

pub mod block;
pub mod overrides;
pub mod params;

use std::collections::{BTreeMap, BTreeSet};

use block::{syntax, Node, NodeKind};
pub use overrides::{expand_grid, parse_set_override, Override};
pub use params::{emit_params, parse_params, ParamNode, ParamTree, ParamValue};

use crate::error::{Error, Result};

pub const NODES_DIR: &str = ".dac/nodes";

const FIELDS: [&str; 8] = [
    "cmd",
    "params",
    "deps_path",
    "deps_attr",
    "outs_path",
    "outs_attr",
    "metrics",
    "plots",
];

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StageDef {
    pub name: String,
    pub cmd: String,
    pub params: Vec<String>,
    pub deps_path: Vec<String>,
    /// `<stage>.<attr>` references to another stage's managed attributes.
    pub deps_attr: Vec<String>,
    pub outs_path: Vec<String>,
    pub outs_attr: Vec<String>,
    pub metrics: Vec<String>,
    pub plots: Vec<String>,
}

/// Which managed file an attribute lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttrKind {
    Out,
    Metric,
}

impl StageDef {
    pub fn new(name: impl Into<String>, cmd: impl Into<String>) -> Self {
        StageDef {
            name: name.into(),
            cmd: cmd.into(),
            ..Default::default()
        }
    }

    pub fn outs_file(&self) -> Option<String> {
        (!self.outs_attr.is_empty()).then(|| managed_file(&self.name, AttrKind::Out))
    }

    pub fn metrics_file(&self) -> Option<String> {
        (!self.metrics.is_empty()).then(|| managed_file(&self.name, AttrKind::Metric))
    }

    pub fn attr_kind(&self, attr: &str) -> Option<AttrKind> {
        if self.outs_attr.iter().any(|a| a == attr) {
            Some(AttrKind::Out)
        } else if self.metrics.iter().any(|a| a == attr) {
            Some(AttrKind::Metric)
        } else {
            None
        }
    }

    /// Every path this stage produces: explicit outs, plots and managed files.
    pub fn output_paths(&self) -> Vec<String> {
        let mut paths: Vec<String> = self
            .outs_path
            .iter()
            .chain(&self.plots)
            .cloned()
            .chain(self.outs_file())
            .chain(self.metrics_file())
            .collect();
        paths.sort();
        paths
    }

    /// Output declarations that enter the fingerprint.
    pub fn output_declarations(&self) -> Vec<String> {
        let mut decls = self.output_paths();
        decls.extend(self.outs_attr.iter().map(|a| format!("{}.{a}", self.name)));
        decls.extend(self.metrics.iter().map(|a| format!("{}.{a}", self.name)));
        decls.sort();
        decls
    }

    /// `${key}` placeholders used in `cmd`.
    pub fn placeholders(&self) -> Result<Vec<String>> {
        let mut keys = Vec::new();
        let mut rest = self.cmd.as_str();
        while let Some(start) = rest.find("${") {
            let after = &rest[start + 2..];
            let end = after.find('}').ok_or_else(|| Error::Unresolved {
                stage: self.name.clone(),
                msg: "unterminated '${' in cmd".into(),
            })?;
            keys.push(after[..end].trim().to_string());
            rest = &after[end + 1..];
        }
        Ok(keys)
    }

    /// The command with `${key}` placeholders replaced by param values.
    pub fn render_cmd(&self, params: &ParamTree) -> Result<String> {
        let mut out = String::new();
        let mut rest = self.cmd.as_str();
        while let Some(start) = rest.find("${") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            let end = after.find('}').ok_or_else(|| Error::Unresolved {
                stage: self.name.clone(),
                msg: "unterminated '${' in cmd".into(),
            })?;
            let key = after[..end].trim();
            let value = params.get_value(key).map_err(|_| Error::Unresolved {
                stage: self.name.clone(),
                msg: format!("param '{key}' used in cmd is not defined"),
            })?;
            out.push_str(&value.as_arg());
            rest = &after[end + 1..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

pub fn managed_file(stage: &str, kind: AttrKind) -> String {
    let file = match kind {
        AttrKind::Out => "outs.json",
        AttrKind::Metric => "metrics.json",
    };
    format!("{NODES_DIR}/{stage}/{file}")
}

/// Split `<stage>.<attr>`.
pub fn split_attr_ref(reference: &str) -> Option<(&str, &str)> {
    let (stage, attr) = reference.split_once('.')?;
    (is_stage_name(stage) && is_attr_name(attr)).then_some((stage, attr))
}

pub fn is_stage_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

fn is_attr_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Normalize a workspace-relative path: `./` prefixes and trailing `/`
/// are dropped; absolute paths and `..` are rejected.
pub fn normalize_path(path: &str) -> Option<String> {
    let trimmed = path.trim_end_matches('/');
    if trimmed.is_empty() || trimmed.starts_with('/') || trimmed.contains('\\') {
        return None;
    }
    let parts: Vec<&str> = trimmed
        .split('/')
        .filter(|p| !p.is_empty() && *p != ".")
        .collect();
    if parts.is_empty() || parts.contains(&"..") {
        return None;
    }
    Some(parts.join("/"))
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PipelineDef {
    pub stages: BTreeMap<String, StageDef>,
}

impl PipelineDef {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stage(&self, name: &str) -> Result<&StageDef> {
        self.stages
            .get(name)
            .ok_or_else(|| Error::UnknownStage(name.to_string()))
    }

    /// Add a stage, replacing any stage of the same name.
    pub fn insert(&mut self, stage: StageDef) {
        self.stages.insert(stage.name.clone(), stage);
    }

    /// The stage that declares `path` among its outputs, if any.
    pub fn producer_of(&self, path: &str) -> Option<&StageDef> {
        self.stages
            .values()
            .find(|s| s.output_paths().iter().any(|p| p == path))
    }

    /// Check cross-stage invariants: single producer per output path,
    /// resolvable attribute references, defined command placeholders.
    pub fn validate(&self) -> Result<()> {
        let mut producers: BTreeMap<String, &str> = BTreeMap::new();
        for stage in self.stages.values() {
            for path in stage.output_paths() {
                if let Some(first) = producers.insert(path.clone(), &stage.name) {
                    return Err(Error::DuplicateOutput {
                        path,
                        first: first.to_string(),
                        second: stage.name.clone(),
                    });
                }
            }
        }
        for stage in self.stages.values() {
            for reference in &stage.deps_attr {
                let resolved = split_attr_ref(reference).and_then(|(producer, attr)| {
                    self.stages.get(producer)?.attr_kind(attr)
                });
                if resolved.is_none() {
                    return Err(Error::DanglingReference {
                        stage: stage.name.clone(),
                        reference: reference.clone(),
                    });
                }
            }
            for key in stage.placeholders()? {
                if !stage.params.contains(&key) {
                    return Err(Error::Unresolved {
                        stage: stage.name.clone(),
                        msg: format!("cmd uses ${{{key}}} but '{key}' is not listed in params"),
                    });
                }
            }
        }
        Ok(())
    }
}

fn string_list(stage: &str, field: &str, node: &Node) -> Result<Vec<String>> {
    let items = match &node.kind {
        NodeKind::Null => return Ok(Vec::new()),
        NodeKind::Seq(items) => items,
        _ => {
            return Err(syntax(
                node.line,
                format!("stage '{stage}': '{field}' must be a list, found a {}", node.kind_name()),
            ))
        }
    };
    let mut out: Vec<String> = Vec::new();
    for item in items {
        let text = &item.as_scalar().expect("sequence items are scalars").text;
        let value = match field {
            "deps_path" | "outs_path" | "plots" => normalize_path(text).ok_or_else(|| {
                syntax(item.line, format!("stage '{stage}': invalid path '{text}'"))
            })?,
            "outs_attr" | "metrics" if !is_attr_name(text) => {
                return Err(syntax(
                    item.line,
                    format!("stage '{stage}': invalid attribute name '{text}'"),
                ))
            }
            "deps_attr" if split_attr_ref(text).is_none() => {
                return Err(syntax(
                    item.line,
                    format!("stage '{stage}': '{text}' is not a <stage>.<attr> reference"),
                ))
            }
            "params" if text.is_empty() || text.split('.').any(str::is_empty) => {
                return Err(syntax(item.line, format!("stage '{stage}': invalid param key '{text}'")))
            }
            _ => text.clone(),
        };
        if matches!(field, "outs_path" | "plots") && value.starts_with(".dac/") {
            return Err(syntax(
                item.line,
                format!("stage '{stage}': outputs may not live under .dac/"),
            ));
        }
        if out.contains(&value) {
            return Err(syntax(item.line, format!("stage '{stage}': duplicate entry '{value}' in {field}")));
        }
        out.push(value);
    }
    Ok(out)
}

fn parse_stage(name: &str, node: &Node) -> Result<StageDef> {
    let NodeKind::Map(fields) = &node.kind else {
        return Err(syntax(node.line, format!("stage '{name}' must be a mapping")));
    };
    let mut stage = StageDef {
        name: name.to_string(),
        ..Default::default()
    };
    let mut seen = BTreeSet::new();
    let mut has_cmd = false;
    for (key, value) in fields {
        if !FIELDS.contains(&key.as_str()) {
            return Err(syntax(value.line, format!("stage '{name}': unknown key '{key}'")));
        }
        if !seen.insert(key.as_str()) {
            return Err(syntax(value.line, format!("stage '{name}': duplicate key '{key}'")));
        }
        match key.as_str() {
            "cmd" => {
                let cmd = value.as_scalar().map(|s| s.text.trim()).unwrap_or("");
                if cmd.is_empty() {
                    return Err(syntax(value.line, format!("stage '{name}': cmd must be a non-empty string")));
                }
                stage.cmd = cmd.to_string();
                has_cmd = true;
            }
            "params" => stage.params = string_list(name, key, value)?,
            "deps_path" => stage.deps_path = string_list(name, key, value)?,
            "deps_attr" => stage.deps_attr = string_list(name, key, value)?,
            "outs_path" => stage.outs_path = string_list(name, key, value)?,
            "outs_attr" => stage.outs_attr = string_list(name, key, value)?,
            "metrics" => stage.metrics = string_list(name, key, value)?,
            "plots" => stage.plots = string_list(name, key, value)?,
            _ => unreachable!(),
        }
    }
    if !has_cmd {
        return Err(syntax(node.line, format!("stage '{name}' has no cmd")));
    }
    if let Some(dup) = stage.metrics.iter().find(|m| stage.outs_attr.contains(m)) {
        return Err(syntax(
            node.line,
            format!("stage '{name}': '{dup}' is both an outs_attr and a metric"),
        ));
    }
    Ok(stage)
}

pub fn parse_pipeline(text: &str) -> Result<PipelineDef> {
    let root = block::parse(text)?;
    let NodeKind::Map(top) = &root.kind else {
        return Err(syntax(root.line, "pipeline must be a mapping"));
    };
    let mut pipeline = PipelineDef::new();
    for (i, (key, value)) in top.iter().enumerate() {
        if key != "stages" {
            return Err(syntax(value.line, format!("unknown top-level key '{key}'")));
        }
        if i > 0 {
            return Err(syntax(value.line, "duplicate key 'stages'"));
        }
        let stages: &[(String, Node)] = match &value.kind {
            NodeKind::Null => &[],
            NodeKind::Map(entries) => entries,
            _ => return Err(syntax(value.line, "'stages' must be a mapping")),
        };
        for (name, node) in stages {
            if !is_stage_name(name) {
                return Err(syntax(node.line, format!("invalid stage name '{name}'")));
            }
            if pipeline.stages.contains_key(name) {
                return Err(Error::DuplicateStage {
                    name: name.clone(),
                    line: node.line,
                });
            }
            pipeline.insert(parse_stage(name, node)?);
        }
    }
    pipeline.validate()?;
    Ok(pipeline)
}

fn list_node(items: &[String]) -> Node {
    Node::seq(items.iter().map(|s| Node::plain(s.clone())).collect())
}

pub fn emit_pipeline(pipeline: &PipelineDef) -> String {
    let stages = pipeline
        .stages
        .values()
        .map(|s| {
            let mut fields = vec![("cmd".to_string(), Node::plain(s.cmd.clone()))];
            for (key, list) in [
                ("params", &s.params),
                ("deps_path", &s.deps_path),
                ("deps_attr", &s.deps_attr),
                ("outs_path", &s.outs_path),
                ("outs_attr", &s.outs_attr),
                ("metrics", &s.metrics),
                ("plots", &s.plots),
            ] {
                if !list.is_empty() {
                    fields.push((key.to_string(), list_node(list)));
                }
            }
            (s.name.clone(), Node::map(fields))
        })
        .collect();
    block::emit(&Node::map(vec![("stages".into(), Node::map(stages))]))
}
