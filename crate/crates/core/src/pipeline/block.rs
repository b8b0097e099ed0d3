//! Restricted block-style text format used by every metadata file.
//!
//! Supported: block mappings (`key: value`, `key:` + nested block), block
//! sequences of scalars (`- item`), plain / double-quoted / single-quoted
//! scalars, `#` comments, and the inline forms `{}`, `[]` and `[a, b]`.
//! Rejected: tabs in indentation, anchors, aliases, tags, block scalars,
//! non-empty flow mappings and document markers.
//!
//! The emitter writes 2-space indentation and LF line endings, and quotes a
//! scalar only when the plain form would not read back identically.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub line: usize,
    pub kind: NodeKind,
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeKind {
    Null,
    Scalar(Scalar),
    Seq(Vec<Node>),
    /// Entries in source order; duplicates are kept for the caller to reject.
    Map(Vec<(String, Node)>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scalar {
    pub text: String,
    /// Written with quotes in the source, or must be quoted when emitted.
    pub quoted: bool,
}

impl Node {
    fn new(line: usize, kind: NodeKind) -> Self {
        Node { line, kind }
    }

    pub fn null() -> Self {
        Node::new(0, NodeKind::Null)
    }

    /// A scalar that may be emitted plain when that is unambiguous.
    pub fn plain(text: impl Into<String>) -> Self {
        Node::new(
            0,
            NodeKind::Scalar(Scalar {
                text: text.into(),
                quoted: false,
            }),
        )
    }

    /// A scalar that is always emitted quoted.
    pub fn quoted(text: impl Into<String>) -> Self {
        Node::new(
            0,
            NodeKind::Scalar(Scalar {
                text: text.into(),
                quoted: true,
            }),
        )
    }

    pub fn seq(items: Vec<Node>) -> Self {
        Node::new(0, NodeKind::Seq(items))
    }

    pub fn map(entries: Vec<(String, Node)>) -> Self {
        Node::new(0, NodeKind::Map(entries))
    }

    pub fn as_scalar(&self) -> Option<&Scalar> {
        match &self.kind {
            NodeKind::Scalar(s) => Some(s),
            _ => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            NodeKind::Null => "empty value",
            NodeKind::Scalar(_) => "scalar",
            NodeKind::Seq(_) => "sequence",
            NodeKind::Map(_) => "mapping",
        }
    }
}

pub(crate) fn syntax(line: usize, msg: impl Into<String>) -> Error {
    Error::Syntax {
        line,
        msg: msg.into(),
    }
}

struct Line<'a> {
    no: usize,
    indent: usize,
    content: &'a str,
}

impl Line<'_> {
    fn is_seq_item(&self) -> bool {
        self.content == "-" || self.content.starts_with("- ")
    }
}

/// Parse a whole document. Empty input yields an empty mapping.
pub fn parse(text: &str) -> Result<Node> {
    let lines = split_lines(text)?;
    match lines.as_slice() {
        [] => return Ok(Node::new(1, NodeKind::Map(Vec::new()))),
        [only] if only.content == "{}" && only.indent == 0 => {
            return Ok(Node::new(only.no, NodeKind::Map(Vec::new())))
        }
        _ => {}
    }
    if lines[0].indent != 0 {
        return Err(syntax(lines[0].no, "document must start at column 1"));
    }
    let mut parser = Parser { lines, pos: 0 };
    let root = parser.block(0)?;
    if let Some(extra) = parser.lines.get(parser.pos) {
        return Err(syntax(extra.no, "unexpected indentation"));
    }
    Ok(root)
}

fn split_lines(text: &str) -> Result<Vec<Line<'_>>> {
    let mut out = Vec::new();
    for (i, raw) in text.split('\n').enumerate() {
        let no = i + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        let indent = raw.len() - raw.trim_start_matches(' ').len();
        let rest = &raw[indent..];
        if rest.starts_with('\t') {
            return Err(syntax(no, "tabs are not allowed in indentation"));
        }
        let content = strip_comment(rest).trim_end();
        if content.is_empty() {
            continue;
        }
        if content == "---" || content == "..." {
            return Err(syntax(no, "multiple documents are not supported"));
        }
        out.push(Line { no, indent, content });
    }
    Ok(out)
}

fn strip_comment(s: &str) -> &str {
    let bytes = s.as_bytes();
    let mut in_double = false;
    let mut in_single = false;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' if in_double => i += 1,
            b'"' if !in_single => in_double = !in_double,
            b'\'' if !in_double => in_single = !in_single,
            b'#' if !in_double && !in_single && (i == 0 || bytes[i - 1] == b' ') => {
                return &s[..i];
            }
            _ => {}
        }
        i += 1;
    }
    s
}

struct Parser<'a> {
    lines: Vec<Line<'a>>,
    pos: usize,
}

impl Parser<'_> {
    fn block(&mut self, indent: usize) -> Result<Node> {
        let line = &self.lines[self.pos];
        if line.is_seq_item() {
            self.seq(indent)
        } else {
            self.map(indent)
        }
    }

    fn map(&mut self, indent: usize) -> Result<Node> {
        let start = self.lines[self.pos].no;
        let mut entries = Vec::new();
        while let Some(line) = self.lines.get(self.pos) {
            if line.indent < indent {
                break;
            }
            if line.indent > indent {
                return Err(syntax(line.no, "unexpected indentation"));
            }
            if line.is_seq_item() {
                return Err(syntax(line.no, "sequence item where a mapping key was expected"));
            }
            let no = line.no;
            let (key, rest) = split_key(line.content, no)?;
            self.pos += 1;
            let value = if rest.is_empty() {
                // nested values report the line of their key
                let mut value = match self.lines.get(self.pos) {
                    Some(next) if next.indent > indent => {
                        let child = next.indent;
                        self.block(child)?
                    }
                    Some(next) if next.indent == indent && next.is_seq_item() => self.seq(indent)?,
                    _ => Node::new(no, NodeKind::Null),
                };
                value.line = no;
                value
            } else {
                inline_value(rest, no)?
            };
            entries.push((key, value));
        }
        Ok(Node::new(start, NodeKind::Map(entries)))
    }

    fn seq(&mut self, indent: usize) -> Result<Node> {
        let start = self.lines[self.pos].no;
        let mut items = Vec::new();
        while let Some(line) = self.lines.get(self.pos) {
            if line.indent != indent || !line.is_seq_item() {
                if line.indent > indent {
                    return Err(syntax(line.no, "nested blocks inside sequences are not supported"));
                }
                break;
            }
            let no = line.no;
            let rest = line.content[1..].trim_start();
            if rest.is_empty() {
                return Err(syntax(no, "empty sequence item"));
            }
            if rest.starts_with('-') && (rest.len() == 1 || rest[1..].starts_with(' ')) {
                return Err(syntax(no, "nested sequences are not supported"));
            }
            if !rest.starts_with(['"', '\'']) && find_mapping_colon(rest).is_some() {
                return Err(syntax(no, "mappings inside sequences are not supported"));
            }
            items.push(inline_value(rest, no)?);
            self.pos += 1;
        }
        Ok(Node::new(start, NodeKind::Seq(items)))
    }
}

fn find_mapping_colon(s: &str) -> Option<usize> {
    s.find(": ").or_else(|| s.ends_with(':').then(|| s.len() - 1))
}

fn split_key(content: &str, line: usize) -> Result<(String, &str)> {
    let (key, after) = if content.starts_with(['"', '\'']) {
        let (key, used) = quoted_prefix(content, line)?;
        (key, &content[used..])
    } else {
        let at = find_mapping_colon(content)
            .ok_or_else(|| syntax(line, format!("expected 'key: value', found '{content}'")))?;
        let key = content[..at].trim_end();
        check_plain(key, line)?;
        (key.to_string(), &content[at..])
    };
    let rest = after
        .strip_prefix(':')
        .ok_or_else(|| syntax(line, "expected ':' after key"))?;
    if !rest.is_empty() && !rest.starts_with(' ') {
        return Err(syntax(line, "expected a space after ':'"));
    }
    Ok((key, rest.trim()))
}

/// Parse a leading quoted scalar, returning its value and byte length.
fn quoted_prefix(s: &str, line: usize) -> Result<(String, usize)> {
    let bytes = s.as_bytes();
    if bytes[0] == b'"' {
        let mut i = 1;
        while i < bytes.len() {
            match bytes[i] {
                b'\\' => i += 2,
                b'"' => {
                    let value: String = serde_json::from_str(&s[..=i])
                        .map_err(|e| syntax(line, format!("bad double-quoted string: {e}")))?;
                    return Ok((value, i + 1));
                }
                _ => i += 1,
            }
        }
        Err(syntax(line, "unterminated double-quoted string"))
    } else {
        let mut value = String::new();
        let mut chars = s.char_indices().skip(1).peekable();
        while let Some((i, c)) = chars.next() {
            if c == '\'' {
                if matches!(chars.peek(), Some((_, '\''))) {
                    value.push('\'');
                    chars.next();
                } else {
                    return Ok((value, i + 1));
                }
            } else {
                value.push(c);
            }
        }
        Err(syntax(line, "unterminated single-quoted string"))
    }
}

fn check_plain(text: &str, line: usize) -> Result<()> {
    match text.chars().next() {
        Some(c @ ('&' | '*' | '!' | '|' | '>' | '%' | '@' | '`')) => {
            Err(syntax(line, format!("'{c}' at the start of a scalar is not supported")))
        }
        Some('{') | Some('[') => Err(syntax(line, "flow collections are not supported here")),
        None => Err(syntax(line, "empty key")),
        _ => Ok(()),
    }
}

fn inline_value(text: &str, line: usize) -> Result<Node> {
    if text == "{}" {
        return Ok(Node::new(line, NodeKind::Map(Vec::new())));
    }
    if text.starts_with('{') {
        return Err(syntax(line, "non-empty flow mappings are not supported"));
    }
    if let Some(inner) = text.strip_prefix('[') {
        return flow_seq(inner, line);
    }
    scalar(text, line).map(|s| Node::new(line, NodeKind::Scalar(s)))
}

fn scalar(text: &str, line: usize) -> Result<Scalar> {
    if text.starts_with(['"', '\'']) {
        let (value, used) = quoted_prefix(text, line)?;
        if !text[used..].trim().is_empty() {
            return Err(syntax(line, "unexpected text after quoted string"));
        }
        return Ok(Scalar {
            text: value,
            quoted: true,
        });
    }
    check_plain(text, line)?;
    if text.contains(": ") {
        return Err(syntax(line, "plain scalar contains ': '; quote it"));
    }
    Ok(Scalar {
        text: text.to_string(),
        quoted: false,
    })
}

fn flow_seq(inner: &str, line: usize) -> Result<Node> {
    let mut items = Vec::new();
    let mut rest = inner.trim_start();
    if let Some(after) = rest.strip_prefix(']') {
        if !after.trim().is_empty() {
            return Err(syntax(line, "unexpected text after ']'"));
        }
        return Ok(Node::new(line, NodeKind::Seq(items)));
    }
    loop {
        let (item, used) = if rest.starts_with(['"', '\'']) {
            let (value, used) = quoted_prefix(rest, line)?;
            (
                Scalar {
                    text: value,
                    quoted: true,
                },
                used,
            )
        } else {
            let end = rest
                .find([',', ']'])
                .ok_or_else(|| syntax(line, "unterminated '['"))?;
            let text = rest[..end].trim();
            if text.is_empty() {
                return Err(syntax(line, "empty item in '[...]'"));
            }
            if text.starts_with(['[', '{']) {
                return Err(syntax(line, "nested flow collections are not supported"));
            }
            (scalar(text, line)?, end)
        };
        items.push(Node::new(line, NodeKind::Scalar(item)));
        rest = rest[used..].trim_start();
        if let Some(after) = rest.strip_prefix(',') {
            rest = after.trim_start();
        } else if let Some(after) = rest.strip_prefix(']') {
            if !after.trim().is_empty() {
                return Err(syntax(line, "unexpected text after ']'"));
            }
            return Ok(Node::new(line, NodeKind::Seq(items)));
        } else {
            return Err(syntax(line, "expected ',' or ']'"));
        }
    }
}

/// Whether `s` must be quoted to read back as the same plain text.
fn needs_quotes(s: &str) -> bool {
    let Some(first) = s.chars().next() else {
        return true;
    };
    if s.trim() != s || s.contains(": ") || s.contains(" #") || s.ends_with(':') {
        return true;
    }
    if s.chars().any(|c| c.is_control()) {
        return true;
    }
    match first {
        '-' | '?' | ':' => s.len() == 1 || s[1..].starts_with(' '),
        ',' | '[' | ']' | '{' | '}' | '#' | '&' | '*' | '!' | '|' | '>' | '\'' | '"' | '%'
        | '@' | '`' => true,
        _ => false,
    }
}

fn fmt_scalar(s: &Scalar) -> String {
    if s.quoted || needs_quotes(&s.text) {
        serde_json::to_string(&s.text).expect("strings always serialize")
    } else {
        s.text.clone()
    }
}

fn fmt_key(k: &str) -> String {
    fmt_scalar(&Scalar {
        text: k.to_string(),
        quoted: false,
    })
}

/// Emit a document. The root must be a mapping.
pub fn emit(root: &Node) -> String {
    let mut out = String::new();
    match &root.kind {
        NodeKind::Map(entries) if entries.is_empty() => out.push_str("{}\n"),
        NodeKind::Map(entries) => emit_map(entries, 0, &mut out),
        _ => panic!("document root must be a mapping"),
    }
    out
}

fn emit_map(entries: &[(String, Node)], indent: usize, out: &mut String) {
    let pad = " ".repeat(indent);
    for (key, value) in entries {
        out.push_str(&pad);
        out.push_str(&fmt_key(key));
        out.push(':');
        match &value.kind {
            NodeKind::Null => out.push('\n'),
            NodeKind::Scalar(s) => {
                out.push(' ');
                out.push_str(&fmt_scalar(s));
                out.push('\n');
            }
            NodeKind::Map(inner) if inner.is_empty() => out.push_str(" {}\n"),
            NodeKind::Map(inner) => {
                out.push('\n');
                emit_map(inner, indent + 2, out);
            }
            NodeKind::Seq(items) if items.is_empty() => out.push_str(" []\n"),
            NodeKind::Seq(items) => {
                out.push('\n');
                let item_pad = " ".repeat(indent + 2);
                for item in items {
                    let s = item
                        .as_scalar()
                        .expect("sequences hold scalars only");
                    out.push_str(&item_pad);
                    out.push_str("- ");
                    out.push_str(&fmt_scalar(s));
                    out.push('\n');
                }
            }
        }
    }
}
