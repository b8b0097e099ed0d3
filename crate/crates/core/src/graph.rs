//! Stage dependency graph, ordering and fingerprints.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::cas::{hash_bytes, ObjectId};
use crate::error::{Error, Result};
use crate::pipeline::{split_attr_ref, ParamTree, PipelineDef, StageDef};

/// Acyclic graph of stages; an edge `(producer, consumer)` means the
/// consumer reads something the producer writes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    nodes: BTreeSet<String>,
    edges: BTreeSet<(String, String)>,
    parents: BTreeMap<String, BTreeSet<String>>,
    children: BTreeMap<String, BTreeSet<String>>,
}

impl Graph {
    /// Build from explicit nodes and edges, rejecting cycles and unknown
    /// endpoints.
    pub fn from_edges<N, E>(nodes: N, edges: E) -> Result<Self>
    where
        N: IntoIterator,
        N::Item: Into<String>,
        E: IntoIterator<Item = (String, String)>,
    {
        let nodes: BTreeSet<String> = nodes.into_iter().map(Into::into).collect();
        let mut parents: BTreeMap<String, BTreeSet<String>> =
            nodes.iter().map(|n| (n.clone(), BTreeSet::new())).collect();
        let mut children = parents.clone();
        let mut edge_set = BTreeSet::new();
        for (from, to) in edges {
            for end in [&from, &to] {
                if !nodes.contains(end) {
                    return Err(Error::UnknownStage(end.clone()));
                }
            }
            children.get_mut(&from).unwrap().insert(to.clone());
            parents.get_mut(&to).unwrap().insert(from.clone());
            edge_set.insert((from, to));
        }
        let graph = Graph {
            nodes,
            edges: edge_set,
            parents,
            children,
        };
        if let Some(cycle) = graph.find_cycle() {
            return Err(Error::Cycle(cycle));
        }
        Ok(graph)
    }

    pub fn nodes(&self) -> &BTreeSet<String> {
        &self.nodes
    }

    pub fn edges(&self) -> &BTreeSet<(String, String)> {
        &self.edges
    }

    pub fn parents(&self, node: &str) -> impl Iterator<Item = &String> {
        self.parents.get(node).into_iter().flatten()
    }

    pub fn children(&self, node: &str) -> impl Iterator<Item = &String> {
        self.children.get(node).into_iter().flatten()
    }

    fn find_cycle(&self) -> Option<Vec<String>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Open,
            Done,
        }
        fn visit<'a>(
            g: &'a Graph,
            node: &'a String,
            marks: &mut BTreeMap<&'a String, Mark>,
            path: &mut Vec<&'a String>,
        ) -> Option<Vec<String>> {
            match marks.get(node) {
                Some(Mark::Done) => return None,
                Some(Mark::Open) => {
                    let start = path.iter().position(|n| *n == node).unwrap();
                    let mut cycle: Vec<String> = path[start..].iter().map(|s| s.to_string()).collect();
                    cycle.push(node.clone());
                    return Some(cycle);
                }
                None => {}
            }
            marks.insert(node, Mark::Open);
            path.push(node);
            for child in g.children(node) {
                if let Some(c) = visit(g, child, marks, path) {
                    return Some(c);
                }
            }
            path.pop();
            marks.insert(node, Mark::Done);
            None
        }
        let mut marks = BTreeMap::new();
        for node in &self.nodes {
            if let Some(c) = visit(self, node, &mut marks, &mut Vec::new()) {
                return Some(c);
            }
        }
        None
    }

    /// `targets` plus everything they transitively depend on.
    pub fn ancestor_closure<'a>(&self, targets: impl IntoIterator<Item = &'a str>) -> Result<BTreeSet<String>> {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<String> = Vec::new();
        for t in targets {
            if !self.nodes.contains(t) {
                return Err(Error::UnknownStage(t.to_string()));
            }
            stack.push(t.to_string());
        }
        while let Some(n) = stack.pop() {
            if seen.insert(n.clone()) {
                stack.extend(self.parents(&n).cloned());
            }
        }
        Ok(seen)
    }

    /// Everything reachable from `node`, excluding `node` itself.
    pub fn descendants(&self, node: &str) -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<&String> = self.children(node).collect();
        while let Some(n) = stack.pop() {
            if seen.insert(n.clone()) {
                stack.extend(self.children(n));
            }
        }
        seen
    }

    /// Deterministic DOT rendering with sorted nodes and edges.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph dag {\n");
        for n in &self.nodes {
            out.push_str(&format!("  \"{n}\";\n"));
        }
        for (a, b) in &self.edges {
            out.push_str(&format!("  \"{a}\" -> \"{b}\";\n"));
        }
        out.push_str("}\n");
        out
    }
}

pub fn build_graph(pipeline: &PipelineDef) -> Result<Graph> {
    let mut producers: BTreeMap<String, &str> = BTreeMap::new();
    for stage in pipeline.stages.values() {
        for path in stage.output_paths() {
            producers.insert(path, &stage.name);
        }
    }
    let mut edges = Vec::new();
    for stage in pipeline.stages.values() {
        for reference in &stage.deps_attr {
            let (producer, attr) = split_attr_ref(reference).ok_or_else(|| Error::DanglingReference {
                stage: stage.name.clone(),
                reference: reference.clone(),
            })?;
            match pipeline.stages.get(producer) {
                Some(p) if p.attr_kind(attr).is_some() => {
                    edges.push((producer.to_string(), stage.name.clone()))
                }
                _ => {
                    return Err(Error::DanglingReference {
                        stage: stage.name.clone(),
                        reference: reference.clone(),
                    })
                }
            }
        }
        for path in &stage.deps_path {
            if let Some(producer) = producer_covering(&producers, path) {
                edges.push((producer.to_string(), stage.name.clone()));
            }
        }
    }
    Graph::from_edges(pipeline.stages.keys().cloned(), edges)
}

/// The stage producing `path` itself or a directory containing it.
pub(crate) fn producer_covering<'a>(producers: &BTreeMap<String, &'a str>, path: &str) -> Option<&'a str> {
    if let Some(p) = producers.get(path) {
        return Some(p);
    }
    producers.iter().find_map(|(out, stage)| {
        path.strip_prefix(out.as_str())
            .filter(|rest| rest.starts_with('/'))
            .map(|_| *stage)
    })
}

/// Kahn's algorithm; among ready stages the lexicographically smallest goes
/// first.
pub fn topo_sort(graph: &Graph) -> Vec<String> {
    let mut indegree: BTreeMap<&str, usize> = graph
        .nodes
        .iter()
        .map(|n| (n.as_str(), graph.parents(n).count()))
        .collect();
    let mut ready: BTreeSet<&str> = indegree
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(n, _)| *n)
        .collect();
    let mut order = Vec::with_capacity(graph.nodes.len());
    while let Some(n) = ready.pop_first() {
        order.push(n.to_string());
        for child in graph.children(n) {
            let d = indegree.get_mut(child.as_str()).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.insert(child);
            }
        }
    }
    order
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Fingerprint(pub ObjectId);

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({})", self.0.short())
    }
}

/// Canonical input description of a stage:
///
/// ```text
/// cmd <cmd>
/// param <key>=<canonical value>     (sorted by key)
/// dep <name>:<oid>                  (sorted by name)
/// out <declaration>                 (sorted)
/// ```
pub fn describe(
    stage: &StageDef,
    params: &ParamTree,
    dep_hashes: &BTreeMap<String, ObjectId>,
) -> Result<String> {
    let mut text = format!("cmd {}\n", stage.cmd);
    let mut param_lines = stage
        .params
        .iter()
        .map(|key| {
            let value = params.get(key)?;
            Ok(format!("param {key}={}\n", value.canonical()))
        })
        .collect::<Result<Vec<_>>>()?;
    param_lines.sort();
    param_lines.dedup();
    text.extend(param_lines);

    let mut deps: Vec<&String> = stage.deps_path.iter().chain(&stage.deps_attr).collect();
    deps.sort();
    deps.dedup();
    for name in deps {
        let oid = dep_hashes.get(name).ok_or_else(|| Error::Unresolved {
            stage: stage.name.clone(),
            msg: format!("dependency '{name}' has no hash"),
        })?;
        text.push_str(&format!("dep {name}:{oid}\n"));
    }
    for decl in stage.output_declarations() {
        text.push_str(&format!("out {decl}\n"));
    }
    Ok(text)
}

pub fn fingerprint(
    stage: &StageDef,
    params: &ParamTree,
    dep_hashes: &BTreeMap<String, ObjectId>,
) -> Result<Fingerprint> {
    let text = describe(stage, params, dep_hashes)?;
    Ok(Fingerprint(hash_bytes(text.as_bytes())))
}
