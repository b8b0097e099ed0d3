//! Typed parameter trees and their file format.

use std::collections::BTreeMap;
use std::fmt;

use super::block::{self, syntax, Node, NodeKind};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
}

impl ParamValue {
    /// Type an unquoted literal: integer, float, `true`/`false`, else string.
    pub fn from_literal(text: &str) -> Self {
        match text {
            "true" => return ParamValue::Bool(true),
            "false" => return ParamValue::Bool(false),
            _ => {}
        }
        if is_int_literal(text) {
            if let Ok(i) = text.parse::<i64>() {
                return ParamValue::Int(i);
            }
        } else if is_float_literal(text) {
            if let Ok(f) = text.parse::<f64>() {
                if f.is_finite() {
                    return ParamValue::Float(f);
                }
            }
        }
        ParamValue::Str(text.to_string())
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            ParamValue::Int(i) => (*i).into(),
            ParamValue::Float(f) => serde_json::Number::from_f64(*f)
                .map(serde_json::Value::Number)
                .unwrap_or(serde_json::Value::Null),
            ParamValue::Bool(b) => (*b).into(),
            ParamValue::Str(s) => s.clone().into(),
        }
    }

    /// JSON-style rendering used for fingerprints and records.
    pub fn canonical(&self) -> String {
        self.to_json().to_string()
    }

    /// Rendering for command-line interpolation: strings verbatim.
    pub fn as_arg(&self) -> String {
        match self {
            ParamValue::Str(s) => s.clone(),
            other => other.canonical(),
        }
    }

    pub(crate) fn to_node(&self) -> Node {
        match self {
            ParamValue::Str(s) if ParamValue::from_literal(s) == *self => Node::plain(s.clone()),
            ParamValue::Str(s) => Node::quoted(s.clone()),
            ParamValue::Float(f) => Node::plain(format!("{f:?}")),
            other => Node::plain(other.canonical()),
        }
    }

    pub(crate) fn from_scalar(s: &block::Scalar) -> Self {
        if s.quoted {
            ParamValue::Str(s.text.clone())
        } else {
            ParamValue::from_literal(&s.text)
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

fn is_int_literal(s: &str) -> bool {
    let digits = s.strip_prefix(['-', '+']).unwrap_or(s);
    !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit())
}

fn is_float_literal(s: &str) -> bool {
    let body = s.strip_prefix(['-', '+']).unwrap_or(s);
    let (mantissa, exponent) = match body.find(['e', 'E']) {
        Some(i) => (&body[..i], Some(&body[i + 1..])),
        None => (body, None),
    };
    let (int_part, frac_part) = match mantissa.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (mantissa, None),
    };
    let all_digits = |p: &str| p.bytes().all(|b| b.is_ascii_digit());
    if !all_digits(int_part) || !frac_part.is_none_or(all_digits) {
        return false;
    }
    if int_part.is_empty() && frac_part.is_none_or(str::is_empty) {
        return false;
    }
    match exponent {
        Some(e) => is_int_literal(e),
        None => frac_part.is_some(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ParamNode {
    Value(ParamValue),
    Tree(ParamTree),
}

impl ParamNode {
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            ParamNode::Value(v) => v.to_json(),
            ParamNode::Tree(t) => serde_json::Value::Object(
                t.entries
                    .iter()
                    .map(|(k, v)| (k.clone(), v.to_json()))
                    .collect(),
            ),
        }
    }

    /// JSON-style rendering with sorted keys.
    pub fn canonical(&self) -> String {
        self.to_json().to_string()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamTree {
    entries: BTreeMap<String, ParamNode>,
}

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Result<&ParamNode> {
        let mut parts = key.split('.');
        let first = parts.next().unwrap_or_default();
        let mut node = self
            .entries
            .get(first)
            .ok_or_else(|| Error::KeyMissing(key.to_string()))?;
        for part in parts {
            node = match node {
                ParamNode::Tree(t) => t.entries.get(part),
                ParamNode::Value(_) => None,
            }
            .ok_or_else(|| Error::KeyMissing(key.to_string()))?;
        }
        Ok(node)
    }

    pub fn get_value(&self, key: &str) -> Result<&ParamValue> {
        match self.get(key)? {
            ParamNode::Value(v) => Ok(v),
            ParamNode::Tree(_) => Err(Error::KeyMissing(key.to_string())),
        }
    }

    /// Insert or replace a value, creating intermediate tables.
    pub fn insert(&mut self, key: &str, value: ParamValue) {
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().expect("split yields one part");
        let mut tree = self;
        for part in parts {
            let slot = tree
                .entries
                .entry(part.to_string())
                .or_insert_with(|| ParamNode::Tree(ParamTree::new()));
            if let ParamNode::Value(_) = slot {
                *slot = ParamNode::Tree(ParamTree::new());
            }
            tree = match slot {
                ParamNode::Tree(t) => t,
                ParamNode::Value(_) => unreachable!(),
            };
        }
        tree.entries
            .insert(last.to_string(), ParamNode::Value(value));
    }

    /// Replace an existing scalar. An integer written over a float stays a
    /// float so `shift=1` and `shift: 1.0` compare equal.
    pub fn set_existing(&mut self, key: &str, value: ParamValue) -> Result<()> {
        let current = self.get_value(key)?;
        let value = match (current, value) {
            (ParamValue::Float(_), ParamValue::Int(i)) => ParamValue::Float(i as f64),
            (_, v) => v,
        };
        self.insert(key, value);
        Ok(())
    }

    /// Every scalar leaf as `(dotted key, value)`, sorted by key.
    pub fn leaves(&self) -> Vec<(String, &ParamValue)> {
        let mut out = Vec::new();
        self.collect_leaves("", &mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ParamValue)>) {
        for (k, v) in &self.entries {
            let key = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            match v {
                ParamNode::Value(val) => out.push((key, val)),
                ParamNode::Tree(t) => t.collect_leaves(&key, out),
            }
        }
    }

    fn to_node(&self) -> Node {
        Node::map(
            self.entries
                .iter()
                .map(|(k, v)| {
                    let node = match v {
                        ParamNode::Value(val) => val.to_node(),
                        ParamNode::Tree(t) => t.to_node(),
                    };
                    (k.clone(), node)
                })
                .collect(),
        )
    }
}

fn tree_from_entries(entries: &[(String, Node)]) -> Result<ParamTree> {
    let mut tree = ParamTree::new();
    for (key, node) in entries {
        if key.is_empty() || key.contains('.') {
            return Err(syntax(node.line, format!("invalid param key '{key}'")));
        }
        if tree.entries.contains_key(key) {
            return Err(syntax(node.line, format!("duplicate key '{key}'")));
        }
        let value = match &node.kind {
            NodeKind::Scalar(s) => ParamNode::Value(ParamValue::from_scalar(s)),
            NodeKind::Map(inner) => ParamNode::Tree(tree_from_entries(inner)?),
            NodeKind::Null => return Err(syntax(node.line, format!("param '{key}' has no value"))),
            NodeKind::Seq(_) => {
                return Err(syntax(node.line, format!("param '{key}': lists are not supported")))
            }
        };
        tree.entries.insert(key.clone(), value);
    }
    Ok(tree)
}

pub fn parse_params(text: &str) -> Result<ParamTree> {
    let root = block::parse(text)?;
    match &root.kind {
        NodeKind::Map(entries) => tree_from_entries(entries),
        _ => Err(syntax(root.line, "params file must be a mapping")),
    }
}

pub fn emit_params(tree: &ParamTree) -> String {
    block::emit(&tree.to_node())
}
