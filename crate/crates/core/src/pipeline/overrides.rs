//! `-S key=v1,v2,...` and `-S key=range(a,b[,c])` parameter overrides.

use super::block;
use super::params::ParamValue;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub key: String,
    pub values: Vec<ParamValue>,
}

fn bad(spec: &str, msg: impl Into<String>) -> Error {
    Error::Override {
        spec: spec.to_string(),
        msg: msg.into(),
    }
}

pub fn parse_set_override(spec: &str) -> Result<Override> {
    let (key, rhs) = spec
        .split_once('=')
        .ok_or_else(|| bad(spec, "expected 'key=values'"))?;
    let key = key.trim();
    if key.is_empty()
        || key.split('.').any(str::is_empty)
        || key.contains(char::is_whitespace)
    {
        return Err(bad(spec, format!("invalid key '{key}'")));
    }
    let rhs = rhs.trim();
    let values = match rhs
        .strip_prefix("range(")
        .and_then(|r| r.strip_suffix(')'))
    {
        Some(args) => expand_range(spec, args)?,
        None => split_list(spec, rhs)?,
    };
    Ok(Override {
        key: key.to_string(),
        values,
    })
}

/// Half-open integer range, Python-style.
fn expand_range(spec: &str, args: &str) -> Result<Vec<ParamValue>> {
    let nums = args
        .split(',')
        .map(|a| {
            a.trim()
                .parse::<i64>()
                .map_err(|_| bad(spec, format!("range argument '{}' is not an integer", a.trim())))
        })
        .collect::<Result<Vec<_>>>()?;
    let (start, stop, step) = match nums.as_slice() {
        [a, b] => (*a, *b, 1),
        [a, b, c] => (*a, *b, *c),
        _ => return Err(bad(spec, "range takes 2 or 3 arguments")),
    };
    if step == 0 {
        return Err(bad(spec, "range step must not be zero"));
    }
    let mut values = Vec::new();
    let mut x = start;
    while (step > 0 && x < stop) || (step < 0 && x > stop) {
        values.push(ParamValue::Int(x));
        x = match x.checked_add(step) {
            Some(next) => next,
            None => break,
        };
    }
    if values.is_empty() {
        return Err(bad(spec, "range is empty"));
    }
    Ok(values)
}

fn split_list(spec: &str, rhs: &str) -> Result<Vec<ParamValue>> {
    let mut items = Vec::new();
    let mut current = String::new();
    let mut quote: Option<char> = None;
    for c in rhs.chars() {
        match (quote, c) {
            (None, ',') => items.push(std::mem::take(&mut current)),
            (None, '"' | '\'') => {
                quote = Some(c);
                current.push(c);
            }
            (Some(q), c) if c == q => {
                quote = None;
                current.push(c);
            }
            _ => current.push(c),
        }
    }
    if quote.is_some() {
        return Err(bad(spec, "unterminated quote"));
    }
    items.push(current);
    items
        .iter()
        .map(|item| {
            let item = item.trim();
            if item.is_empty() {
                return Err(bad(spec, "empty value"));
            }
            if item.starts_with(['"', '\'']) {
                let doc = block::parse(&format!("v: {item}\n"))
                    .map_err(|e| bad(spec, e.to_string()))?;
                if let block::NodeKind::Map(entries) = doc.kind {
                    if let Some(s) = entries[0].1.as_scalar() {
                        return Ok(ParamValue::from_scalar(s));
                    }
                }
                return Err(bad(spec, format!("bad quoted value {item}")));
            }
            Ok(ParamValue::from_literal(item))
        })
        .collect()
}

/// Cartesian product of override lists; the first override varies slowest.
pub fn expand_grid(overrides: &[Override]) -> Result<Vec<Vec<(String, ParamValue)>>> {
    for (i, o) in overrides.iter().enumerate() {
        if overrides[..i].iter().any(|p| p.key == o.key) {
            return Err(bad(&o.key, "key given more than once"));
        }
    }
    let mut grid: Vec<Vec<(String, ParamValue)>> = vec![Vec::new()];
    for o in overrides {
        grid = grid
            .into_iter()
            .flat_map(|point| {
                o.values.iter().map(move |v| {
                    let mut p = point.clone();
                    p.push((o.key.clone(), v.clone()));
                    p
                })
            })
            .collect();
    }
    if overrides.is_empty() {
        grid.clear();
    }
    Ok(grid)
}
