//! Incremental, parallel execution of a pipeline graph.
//!
//! A stage is fresh when its lock entry carries the current fingerprint and
//! every locked output is either in the workspace unchanged or restorable
//! from the object store. Stale stages first consult the run cache by
//! fingerprint and only execute their command on a miss.
//!
//! The coordinator (the calling thread) owns the lock and all scheduling
//! decisions. Up to `workers` stages run at once on scoped threads; ready
//! stages are dispatched in name order.

pub mod lock;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::time::Instant;

use crate::cas::{hash_bytes, hash_path, CheckoutMode, Content, ObjectId};
use crate::error::{Error, IoContext, Result};
use crate::graph::{fingerprint, producer_covering, topo_sort, Graph};
use crate::pipeline::{managed_file, split_attr_ref, AttrKind, ParamTree, PipelineDef, StageDef};
use crate::project::{write_atomic, Project, LOCK_FILE};
use lock::{emit_lock, LockFile, LockRecord};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StaleReason {
    Param(String),
    Dependency(String),
    /// Command or output declarations changed.
    Definition,
    OutputMissing(String),
    OutputModified(String),
    Upstream(String),
}

impl fmt::Display for StaleReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StaleReason::Param(k) => write!(f, "param {k} changed"),
            StaleReason::Dependency(d) => write!(f, "dependency {d} changed"),
            StaleReason::Definition => f.write_str("stage definition changed"),
            StaleReason::OutputMissing(p) => write!(f, "output {p} missing"),
            StaleReason::OutputModified(p) => write!(f, "output {p} modified"),
            StaleReason::Upstream(s) => write!(f, "upstream stage {s} is stale"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StageState {
    Fresh,
    NeverRun,
    Stale(StaleReason),
}

impl StageState {
    pub fn is_fresh(&self) -> bool {
        matches!(self, StageState::Fresh)
    }

    pub fn label(&self) -> &'static str {
        match self {
            StageState::Fresh => "fresh",
            StageState::NeverRun => "never-run",
            StageState::Stale(_) => "stale",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StageFailure {
    Command { code: Option<i32>, stderr: String },
    OutputMissing(String),
    Upstream(String),
    Error(String),
}

impl fmt::Display for StageFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageFailure::Command { code, stderr } => {
                match code {
                    Some(c) => write!(f, "command exited with status {c}")?,
                    None => f.write_str("command was terminated by a signal")?,
                }
                let tail = stderr.trim();
                if !tail.is_empty() {
                    write!(f, ": {tail}")?;
                }
                Ok(())
            }
            StageFailure::OutputMissing(p) => write!(f, "declared output {p} was not produced"),
            StageFailure::Upstream(s) => write!(f, "not started: upstream stage {s} failed"),
            StageFailure::Error(m) => f.write_str(m),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageTiming {
    /// Seconds since the run started.
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunReport {
    /// Stages whose command ran, in start order.
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
    /// Run-cache hits.
    pub restored: Vec<String>,
    pub failed: BTreeMap<String, StageFailure>,
    pub timings: BTreeMap<String, StageTiming>,
    pub wall_time: f64,
}

impl RunReport {
    pub fn success(&self) -> bool {
        self.failed.is_empty()
    }

    pub fn summary(&self) -> String {
        format!(
            "{} executed, {} skipped, {} restored, {} failed",
            self.executed.len(),
            self.skipped.len(),
            self.restored.len(),
            self.failed.len()
        )
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub workers: usize,
    /// Restrict the run to these stages and their ancestors.
    pub targets: Option<Vec<String>>,
    /// Extra environment for stage commands.
    pub env: Vec<(String, String)>,
    /// Persist the lock to `lock.dac` after each stage.
    pub write_lock: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            workers: 1,
            targets: None,
            env: Vec::new(),
            write_lock: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Outcome {
    Skipped,
    Restored,
    Executed,
}

struct StageResult {
    name: String,
    result: std::result::Result<(Outcome, LockRecord), StageFailure>,
    start: Instant,
    end: Instant,
}

pub struct Executor<'a> {
    project: &'a Project,
    pipeline: &'a PipelineDef,
    graph: &'a Graph,
    params: &'a ParamTree,
}

impl<'a> Executor<'a> {
    pub fn new(project: &'a Project, pipeline: &'a PipelineDef, graph: &'a Graph, params: &'a ParamTree) -> Self {
        Executor {
            project,
            pipeline,
            graph,
            params,
        }
    }

    fn stage(&self, name: &str) -> &StageDef {
        &self.pipeline.stages[name]
    }

    fn producers(&self) -> BTreeMap<String, &str> {
        let mut map = BTreeMap::new();
        for s in self.pipeline.stages.values() {
            for p in s.output_paths() {
                map.insert(p, s.name.as_str());
            }
        }
        map
    }

    /// Classify every stage. A stage below a non-fresh stage is reported
    /// stale because its inputs cannot be known until the parent reruns.
    pub fn status(&self, lock: &LockFile) -> Result<BTreeMap<String, StageState>> {
        let mut states: BTreeMap<String, StageState> = BTreeMap::new();
        for name in topo_sort(self.graph) {
            let stage = self.stage(&name);
            let Some(rec) = lock.stages.get(&name) else {
                states.insert(name, StageState::NeverRun);
                continue;
            };
            let stale_parent = self.graph.parents(&name).find(|p| !states[p.as_str()].is_fresh());
            if let Some(parent) = stale_parent {
                let reason = StaleReason::Upstream(parent.clone());
                states.insert(name, StageState::Stale(reason));
                continue;
            }
            let deps = self.dep_hashes(stage, Some(lock), false)?;
            let fp = fingerprint(stage, self.params, &oids(&deps))?;
            let state = if fp != rec.fingerprint {
                StageState::Stale(self.explain(stage, rec, &deps))
            } else {
                match self.check_outputs(rec)? {
                    OutputCheck::Ok | OutputCheck::Restorable(_) => StageState::Fresh,
                    OutputCheck::Missing(p) => StageState::Stale(StaleReason::OutputMissing(p)),
                    OutputCheck::Modified(p) => StageState::Stale(StaleReason::OutputModified(p)),
                }
            };
            states.insert(name, state);
        }
        Ok(states)
    }

    /// Stages that `run` would have to bring up to date.
    pub fn plan(&self, lock: &LockFile) -> Result<BTreeSet<String>> {
        Ok(self
            .status(lock)?
            .into_iter()
            .filter(|(_, s)| !s.is_fresh())
            .map(|(n, _)| n)
            .collect())
    }

    fn explain(&self, stage: &StageDef, rec: &LockRecord, deps: &BTreeMap<String, Content>) -> StaleReason {
        for key in &stage.params {
            let now = self.params.get(key).map(|v| v.canonical()).ok();
            if now.as_ref() != rec.params.get(key) {
                return StaleReason::Param(key.clone());
            }
        }
        for (name, content) in deps {
            if rec.deps.get(name).map(Content::oid) != Some(content.oid()) {
                return StaleReason::Dependency(name.clone());
            }
        }
        StaleReason::Definition
    }

    /// Hash every declared dependency. With `ingest`, path dependencies and
    /// attribute values are also written to the object store.
    fn dep_hashes(&self, stage: &StageDef, lock: Option<&LockFile>, ingest: bool) -> Result<BTreeMap<String, Content>> {
        let store = self.project.store();
        let producers = self.producers();
        let mut out = BTreeMap::new();
        for path in &stage.deps_path {
            let full = self.project.path(path);
            let content = if full.exists() {
                if ingest {
                    store.store_path(&full)?
                } else {
                    hash_path(&full)?
                }
            } else {
                let locked = producer_covering(&producers, path)
                    .and_then(|p| lock?.stages.get(p)?.outs.get(path).cloned());
                locked.ok_or_else(|| Error::DependencyMissing {
                    stage: stage.name.clone(),
                    path: path.clone(),
                })?
            };
            out.insert(path.clone(), content);
        }
        for reference in &stage.deps_attr {
            let value = self.read_attr(reference, lock)?;
            let bytes = value.to_string();
            let oid = if ingest {
                store.store_bytes(bytes.as_bytes())?
            } else {
                hash_bytes(bytes.as_bytes())
            };
            out.insert(reference.clone(), Content::File(oid));
        }
        Ok(out)
    }

    fn read_attr(&self, reference: &str, lock: Option<&LockFile>) -> Result<serde_json::Value> {
        let (producer, attr) = split_attr_ref(reference).ok_or_else(|| Error::DanglingReference {
            stage: String::new(),
            reference: reference.to_string(),
        })?;
        let kind = self
            .pipeline
            .stage(producer)?
            .attr_kind(attr)
            .ok_or_else(|| Error::UndeclaredAttr {
                stage: producer.to_string(),
                attr: attr.to_string(),
            })?;
        let rel = managed_file(producer, kind);
        let full = self.project.path(&rel);
        let bytes = if full.exists() {
            fs::read(&full).at(&full)?
        } else {
            let locked = lock
                .and_then(|l| l.stages.get(producer))
                .and_then(|r| r.outs.get(&rel))
                .ok_or_else(|| Error::DependencyMissing {
                    stage: producer.to_string(),
                    path: rel.clone(),
                })?;
            self.project.store().read(locked.oid())?
        };
        attr_from_json(producer, attr, &bytes)
    }

    fn check_outputs(&self, rec: &LockRecord) -> Result<OutputCheck> {
        let store = self.project.store();
        let mut restorable = Vec::new();
        for (path, content) in &rec.outs {
            let full = self.project.path(path);
            if full.exists() {
                if &hash_path(&full)? != content {
                    return Ok(OutputCheck::Modified(path.clone()));
                }
            } else {
                let present = store.has(content.oid())
                    && store.closure(content)?.iter().all(|o| store.has(o));
                if !present {
                    return Ok(OutputCheck::Missing(path.clone()));
                }
                restorable.push(path.clone());
            }
        }
        if restorable.is_empty() {
            Ok(OutputCheck::Ok)
        } else {
            Ok(OutputCheck::Restorable(restorable))
        }
    }

    /// Bring the target closure up to date.
    pub fn run(&self, lock: &mut LockFile, opts: &RunOptions) -> Result<RunReport> {
        let workers = opts.workers.max(1);
        let closure = match &opts.targets {
            Some(t) => self.graph.ancestor_closure(t.iter().map(String::as_str))?,
            None => self.graph.nodes().clone(),
        };
        lock.stages.retain(|name, _| self.pipeline.stages.contains_key(name));

        let t0 = Instant::now();
        let mut report = RunReport::default();
        let mut remaining: BTreeMap<&str, usize> = closure
            .iter()
            .map(|n| (n.as_str(), self.graph.parents(n).filter(|p| closure.contains(*p)).count()))
            .collect();
        let mut ready: BTreeSet<&str> = remaining.iter().filter(|(_, d)| **d == 0).map(|(n, _)| *n).collect();
        let mut blocked: BTreeSet<String> = BTreeSet::new();
        let mut started: Vec<(Instant, String)> = Vec::new();
        let mut running = 0usize;

        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = mpsc::channel::<StageResult>();
            let mut lock_dirty = false;
            loop {
                while running < workers {
                    let Some(name) = ready.pop_first() else { break };
                    let prev = lock.stages.get(name).cloned();
                    let tx = tx.clone();
                    let env = &opts.env;
                    running += 1;
                    scope.spawn(move || {
                        let start = Instant::now();
                        let result = self.process(name, prev, env);
                        let end = Instant::now();
                        let _ = tx.send(StageResult {
                            name: name.to_string(),
                            result,
                            start,
                            end,
                        });
                    });
                }
                // Persist only after newly ready stages are on their way, so
                // the write stays off the critical path.
                if lock_dirty && opts.write_lock {
                    write_atomic(&self.project.path(LOCK_FILE), emit_lock(lock).as_bytes())?;
                }
                lock_dirty = false;
                if running == 0 {
                    break;
                }
                let done = rx.recv().expect("worker threads hold a sender");
                running -= 1;
                report.timings.insert(
                    done.name.clone(),
                    StageTiming {
                        start: (done.start - t0).as_secs_f64(),
                        end: (done.end - t0).as_secs_f64(),
                    },
                );
                match done.result {
                    Ok((outcome, record)) => {
                        lock.stages.insert(done.name.clone(), record);
                        lock_dirty = true;
                        match outcome {
                            Outcome::Executed => started.push((done.start, done.name.clone())),
                            Outcome::Skipped => report.skipped.push(done.name.clone()),
                            Outcome::Restored => report.restored.push(done.name.clone()),
                        }
                        for child in self.graph.children(&done.name) {
                            if let Some(d) = remaining.get_mut(child.as_str()) {
                                *d -= 1;
                                if *d == 0 && !blocked.contains(child) {
                                    ready.insert(child.as_str());
                                }
                            }
                        }
                    }
                    Err(failure) => {
                        for desc in self.graph.descendants(&done.name) {
                            if closure.contains(&desc) && blocked.insert(desc.clone()) {
                                report
                                    .failed
                                    .insert(desc, StageFailure::Upstream(done.name.clone()));
                            }
                        }
                        report.failed.insert(done.name.clone(), failure);
                    }
                }
            }
            Ok(())
        })?;

        started.sort();
        report.executed = started.into_iter().map(|(_, n)| n).collect();
        report.wall_time = t0.elapsed().as_secs_f64();
        Ok(report)
    }

    fn process(
        &self,
        name: &str,
        prev: Option<LockRecord>,
        env: &[(String, String)],
    ) -> std::result::Result<(Outcome, LockRecord), StageFailure> {
        let fail = |e: Error| StageFailure::Error(e.to_string());
        let stage = self.stage(name);
        let store = self.project.store();
        let deps = self.dep_hashes(stage, None, true).map_err(fail)?;
        let fp = fingerprint(stage, self.params, &oids(&deps)).map_err(fail)?;
        let params = stage
            .params
            .iter()
            .map(|k| Ok((k.clone(), self.params.get(k)?.canonical())))
            .collect::<Result<BTreeMap<_, _>>>()
            .map_err(fail)?;
        let record = |outs| LockRecord {
            fingerprint: fp.clone(),
            params: params.clone(),
            deps: deps.clone(),
            outs,
        };

        if let Some(prev) = prev.filter(|p| p.fingerprint == fp) {
            match self.check_outputs(&prev).map_err(fail)? {
                OutputCheck::Ok => return Ok((Outcome::Skipped, record(prev.outs))),
                OutputCheck::Restorable(paths) => {
                    for p in paths {
                        store
                            .checkout_content(&prev.outs[&p], &self.project.path(&p), CheckoutMode::Copy)
                            .map_err(fail)?;
                    }
                    return Ok((Outcome::Skipped, record(prev.outs)));
                }
                OutputCheck::Missing(_) | OutputCheck::Modified(_) => {}
            }
        }

        let declared = stage.output_paths();
        if !declared.is_empty() {
            if let Some(outs) = self.project.run_cache().get(&fp).map_err(fail)? {
                if self.restore_from_cache(&declared, &outs).map_err(fail)? {
                    return Ok((Outcome::Restored, record(outs)));
                }
            }
        }

        let cmd = stage.render_cmd(self.params).map_err(fail)?;
        for p in &declared {
            crate::cas::remove_path(&self.project.path(p)).map_err(fail)?;
        }
        let nodes_dir = self.project.path(&format!("{}/{}", crate::pipeline::NODES_DIR, name));
        fs::create_dir_all(&nodes_dir).map_err(|e| fail(Error::io(&nodes_dir, e)))?;
        let output = shell(&cmd)
            .current_dir(self.project.root())
            .env("DAC_DIR", self.project.root())
            .env("DAC_STAGE", name)
            .envs(env.iter().map(|(k, v)| (k, v)))
            .stdin(Stdio::null())
            .output()
            .map_err(|e| StageFailure::Error(format!("could not start command: {e}")))?;
        if !output.status.success() {
            let stderr = String::from_utf8_lossy(&output.stderr);
            let tail: Vec<&str> = stderr.lines().rev().take(5).collect();
            return Err(StageFailure::Command {
                code: output.status.code(),
                stderr: tail.into_iter().rev().collect::<Vec<_>>().join("\n"),
            });
        }

        let mut outs = BTreeMap::new();
        for p in &declared {
            let full = self.project.path(p);
            if !full.exists() {
                return Err(StageFailure::OutputMissing(p.clone()));
            }
            outs.insert(p.clone(), store.store_path(&full).map_err(fail)?);
        }
        for (kind, attrs) in [(AttrKind::Out, &stage.outs_attr), (AttrKind::Metric, &stage.metrics)] {
            if attrs.is_empty() {
                continue;
            }
            let full = self.project.path(&managed_file(name, kind));
            let bytes = fs::read(&full).map_err(|e| fail(Error::io(&full, e)))?;
            for attr in attrs {
                attr_from_json(name, attr, &bytes).map_err(fail)?;
            }
        }
        if !outs.is_empty() {
            self.project.run_cache().put(&fp, &outs).map_err(fail)?;
        }
        Ok((Outcome::Executed, record(outs)))
    }

    fn restore_from_cache(&self, declared: &[String], outs: &BTreeMap<String, Content>) -> Result<bool> {
        let store = self.project.store();
        if !declared.iter().eq(outs.keys()) {
            return Ok(false);
        }
        for content in outs.values() {
            if !store.has(content.oid()) || !store.closure(content)?.iter().all(|o| store.has(o)) {
                return Ok(false);
            }
        }
        for (p, content) in outs {
            store.checkout_content(content, &self.project.path(p), CheckoutMode::Copy)?;
        }
        Ok(true)
    }
}

enum OutputCheck {
    Ok,
    Restorable(Vec<String>),
    Missing(String),
    Modified(String),
}

fn oids(deps: &BTreeMap<String, Content>) -> BTreeMap<String, ObjectId> {
    deps.iter().map(|(k, c)| (k.clone(), c.oid().clone())).collect()
}

pub(crate) fn attr_from_json(stage: &str, attr: &str, bytes: &[u8]) -> Result<serde_json::Value> {
    let doc: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| Error::BadAttrFile {
        stage: stage.to_string(),
        msg: e.to_string(),
    })?;
    doc.get(attr).cloned().ok_or_else(|| Error::BadAttrFile {
        stage: stage.to_string(),
        msg: format!("attribute '{attr}' is missing"),
    })
}

#[cfg(unix)]
fn shell(cmd: &str) -> Command {
    let mut c = Command::new("sh");
    c.arg("-c").arg(cmd);
    c
}

#[cfg(not(unix))]
fn shell(cmd: &str) -> Command {
    let mut c = Command::new("cmd");
    c.arg("/C").arg(cmd);
    c
}

/// Result of restoring workspace data from a lock.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CheckoutSummary {
    pub restored: Vec<String>,
    pub unchanged: Vec<String>,
}

/// Materialize every locked output and path dependency whose workspace
/// content differs from the lock.
pub fn checkout_workspace(
    project: &Project,
    pipeline: &PipelineDef,
    lock: &LockFile,
    mode: CheckoutMode,
) -> Result<CheckoutSummary> {
    let mut wanted: BTreeMap<&str, &Content> = BTreeMap::new();
    for (name, rec) in &lock.stages {
        let Some(stage) = pipeline.stages.get(name) else { continue };
        for (path, content) in &rec.outs {
            wanted.insert(path, content);
        }
        for path in &stage.deps_path {
            if let Some(content) = rec.deps.get(path) {
                wanted.entry(path).or_insert(content);
            }
        }
    }
    let mut summary = CheckoutSummary::default();
    for (path, content) in wanted {
        let full = project.path(path);
        if full.exists() && &hash_path(&full)? == content {
            summary.unchanged.push(path.to_string());
            continue;
        }
        project.store().checkout_content(content, &full, mode)?;
        summary.restored.push(path.to_string());
    }
    Ok(summary)
}

/// Snapshot of a set of workspace paths, used to put data back after
/// running experiments.
#[derive(Clone, Debug)]
pub struct WorkspaceSnapshot {
    entries: BTreeMap<String, Option<Content>>,
}

impl WorkspaceSnapshot {
    pub fn capture(project: &Project, paths: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for p in paths {
            let full = project.path(&p);
            let content = if full.exists() {
                Some(project.store().store_path(&full)?)
            } else {
                None
            };
            entries.insert(p, content);
        }
        Ok(WorkspaceSnapshot { entries })
    }

    pub fn restore(&self, project: &Project) -> Result<()> {
        for (p, content) in &self.entries {
            let full = project.path(p);
            match content {
                Some(c) => {
                    if !(full.exists() && &hash_path(&full)? == c) {
                        project.store().checkout_content(c, &full, CheckoutMode::Copy)?;
                    }
                }
                None => crate::cas::remove_path(&full)?,
            }
        }
        Ok(())
    }
}

/// All workspace paths a pipeline reads or writes as files.
pub fn data_paths(pipeline: &PipelineDef) -> BTreeSet<String> {
    pipeline
        .stages
        .values()
        .flat_map(|s| s.output_paths().into_iter().chain(s.deps_path.iter().cloned()))
        .collect()
}
