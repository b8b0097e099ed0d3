//! Parameter-override experiments.
//!
//! Each queued experiment is a record in `.dac/expqueue/<name>`. Running the
//! queue replays the pipeline of the base revision with the overrides
//! applied in memory, records the outcome as a detached revision whose
//! parent is the base, and then puts the workspace data back the way it
//! was. Tracked workspace files are never written.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;

use crate::cas::{hash_bytes, CheckoutMode, ObjectId};
use crate::error::{Error, IoContext, Result};
use crate::executor::lock::{emit_lock, parse_lock, LockFile};
use crate::executor::{checkout_workspace, data_paths, Executor, RunOptions, RunReport, StageFailure, WorkspaceSnapshot};
use crate::graph::build_graph;
use crate::pipeline::block::{self, syntax, Node, NodeKind};
use crate::pipeline::{emit_params, expand_grid, parse_params, parse_pipeline, parse_set_override, ParamTree, ParamValue};
use crate::project::{write_atomic, Project, LOCK_FILE, PARAMS_FILE, PIPELINE_FILE};
use crate::revstore::{self, validate_ref_name, RefKind, RevStore, Revision};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl ExpStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ExpStatus::Queued => "queued",
            ExpStatus::Running => "running",
            ExpStatus::Done => "done",
            ExpStatus::Failed => "failed",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [ExpStatus::Queued, ExpStatus::Running, ExpStatus::Done, ExpStatus::Failed]
            .into_iter()
            .find(|st| st.as_str() == s)
    }
}

impl fmt::Display for ExpStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub name: String,
    /// Queue position; experiments run in this order.
    pub seq: u64,
    pub base: ObjectId,
    pub overrides: Vec<(String, ParamValue)>,
    pub status: ExpStatus,
    pub result: Option<ObjectId>,
    pub error: Option<String>,
}

impl Experiment {
    /// `key=value` pairs joined by spaces.
    pub fn overrides_text(&self) -> String {
        override_lines(&self.overrides).join(" ")
    }

    fn render(&self) -> String {
        let mut fields = vec![
            ("name".to_string(), Node::plain(self.name.clone())),
            ("seq".to_string(), Node::plain(self.seq.to_string())),
            ("base".to_string(), Node::plain(self.base.to_string())),
            ("status".to_string(), Node::plain(self.status.as_str())),
            (
                "overrides".to_string(),
                Node::map(self.overrides.iter().map(|(k, v)| (k.clone(), v.to_node())).collect()),
            ),
        ];
        if let Some(r) = &self.result {
            fields.push(("result".to_string(), Node::plain(r.to_string())));
        }
        if let Some(e) = &self.error {
            fields.push(("error".to_string(), Node::quoted(e.clone())));
        }
        block::emit(&Node::map(fields))
    }

    fn parse(text: &str) -> Result<Self> {
        let root = block::parse(text)?;
        let NodeKind::Map(fields) = &root.kind else {
            return Err(syntax(root.line, "experiment record must be a mapping"));
        };
        let get = |k: &str| fields.iter().find(|(name, _)| name == k).map(|(_, v)| v);
        let text_of = |k: &str| -> Option<String> { get(k)?.as_scalar().map(|s| s.text.clone()) };
        let required = |k: &str| text_of(k).ok_or_else(|| syntax(root.line, format!("experiment record lacks '{k}'")));
        let mut overrides = Vec::new();
        if let Some(Node { kind: NodeKind::Map(items), .. }) = get("overrides") {
            for (k, v) in items {
                let s = v.as_scalar().ok_or_else(|| syntax(v.line, "override values must be scalars"))?;
                overrides.push((k.clone(), ParamValue::from_scalar(s)));
            }
        }
        let status = required("status")?;
        Ok(Experiment {
            name: required("name")?,
            seq: required("seq")?
                .parse()
                .map_err(|_| syntax(root.line, "bad 'seq'"))?,
            base: required("base")?.parse()?,
            overrides,
            status: ExpStatus::parse(&status)
                .ok_or_else(|| syntax(root.line, format!("unknown status '{status}'")))?,
            result: text_of("result").map(|r| r.parse()).transpose()?,
            error: text_of("error"),
        })
    }
}

fn override_lines(overrides: &[(String, ParamValue)]) -> Vec<String> {
    overrides.iter().map(|(k, v)| format!("{k}={}", v.canonical())).collect()
}

/// `exp-` plus six hex digits of the hash of the sorted override lines.
pub fn auto_name(overrides: &[(String, ParamValue)]) -> String {
    let mut lines = override_lines(overrides);
    lines.sort();
    let digest = hash_bytes(lines.join("\n").as_bytes());
    format!("exp-{}", &digest.as_str()[..6])
}

fn queue_dir(project: &Project) -> std::path::PathBuf {
    project.dac_dir().join("expqueue")
}

fn save(project: &Project, exp: &Experiment) -> Result<()> {
    write_atomic(&queue_dir(project).join(&exp.name), exp.render().as_bytes())
}

pub fn load_experiment(project: &Project, name: &str) -> Result<Experiment> {
    let path = queue_dir(project).join(name);
    if validate_ref_name(name).is_err() || !path.is_file() {
        return Err(Error::UnknownExperiment(name.to_string()));
    }
    Experiment::parse(&fs::read_to_string(&path).at(&path)?)
}

/// Every experiment record, sorted by name.
pub fn list_experiments(project: &Project) -> Result<Vec<Experiment>> {
    let dir = queue_dir(project);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut names = Vec::new();
    for entry in fs::read_dir(&dir).at(&dir)? {
        let entry = entry.at(&dir)?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !name.starts_with('.') && entry.path().is_file() {
            names.push(name);
        }
    }
    names.sort();
    names.iter().map(|n| load_experiment(project, n)).collect()
}

/// One `exp list` line.
pub fn list_line(exp: &Experiment) -> String {
    let rev = exp.result.as_ref().map_or("-".to_string(), ToString::to_string);
    format!("{}\t{}\t{}\t{}", exp.name, exp.status, rev, exp.overrides_text())
}

/// Queue one experiment per grid point of the given `-S` specs.
pub fn queue_experiments(project: &Project, specs: &[String]) -> Result<Vec<String>> {
    let revs = RevStore::open(project);
    let base = revs.head_id()?.ok_or(Error::NoCommits)?;
    let dirty = revstore::dirty_files(project)?;
    if !dirty.is_empty() {
        return Err(Error::DirtyWorkspace(dirty));
    }
    let overrides = specs
        .iter()
        .map(|s| parse_set_override(s))
        .collect::<Result<Vec<_>>>()?;
    let params = params_at(&revs, &revs.load(&base)?)?;
    for o in &overrides {
        params.get_value(&o.key)?;
    }
    let grid = expand_grid(&overrides)?;

    let _guard = revs.lock()?;
    let existing = list_experiments(project)?;
    let mut seq = existing.iter().map(|e| e.seq).max().unwrap_or(0);
    let mut taken: std::collections::BTreeSet<String> = existing.into_iter().map(|e| e.name).collect();
    let mut names = Vec::new();
    for point in grid {
        let stem = auto_name(&point);
        let mut name = stem.clone();
        let mut n = 2;
        while taken.contains(&name) || revs.get_ref(RefKind::Experiment, &name)?.is_some() {
            name = format!("{stem}-{n}");
            n += 1;
        }
        seq += 1;
        let exp = Experiment {
            name: name.clone(),
            seq,
            base: base.clone(),
            overrides: point,
            status: ExpStatus::Queued,
            result: None,
            error: None,
        };
        save(project, &exp)?;
        taken.insert(name.clone());
        names.push(name);
    }
    Ok(names)
}

fn read_tracked(revs: &RevStore<'_>, rev: &Revision, file: &str) -> Result<Option<String>> {
    match rev.tree.get(file) {
        Some(oid) => {
            let bytes = revs.store().read_metadata(oid)?;
            String::from_utf8(bytes)
                .map(Some)
                .map_err(|_| syntax(0, format!("{file} at {} is not UTF-8", rev.id.short())))
        }
        None => Ok(None),
    }
}

fn params_at(revs: &RevStore<'_>, rev: &Revision) -> Result<ParamTree> {
    match read_tracked(revs, rev, PARAMS_FILE)? {
        Some(t) => parse_params(&t),
        None => Ok(ParamTree::new()),
    }
}

/// Outcome of one experiment in [`run_queue`].
#[derive(Debug)]
pub struct ExperimentRun {
    pub experiment: Experiment,
    /// Absent when the pipeline could not be started at all.
    pub report: Option<RunReport>,
}

/// Run every queued experiment in queue order.
pub fn run_queue(project: &Project, workers: usize) -> Result<Vec<ExperimentRun>> {
    let mut queued: Vec<Experiment> = list_experiments(project)?
        .into_iter()
        .filter(|e| e.status == ExpStatus::Queued)
        .collect();
    if queued.is_empty() {
        return Err(Error::EmptyQueue);
    }
    queued.sort_by_key(|e| e.seq);
    let mut out = Vec::new();
    for mut exp in queued {
        exp.status = ExpStatus::Running;
        save(project, &exp)?;
        let report = match run_one(project, &exp, workers) {
            Ok((report, result)) => {
                match result {
                    Some(id) => {
                        exp.status = ExpStatus::Done;
                        exp.result = Some(id);
                    }
                    None => {
                        exp.status = ExpStatus::Failed;
                        exp.error = Some(describe_failures(&report));
                    }
                }
                Some(report)
            }
            Err(e) => {
                exp.status = ExpStatus::Failed;
                exp.error = Some(e.to_string());
                None
            }
        };
        save(project, &exp)?;
        out.push(ExperimentRun { experiment: exp, report });
    }
    Ok(out)
}

fn describe_failures(report: &RunReport) -> String {
    report
        .failed
        .iter()
        .filter(|(_, f)| !matches!(f, StageFailure::Upstream(_)))
        .map(|(stage, f)| format!("stage {stage}: {f}"))
        .collect::<Vec<_>>()
        .join("; ")
}

fn run_one(project: &Project, exp: &Experiment, workers: usize) -> Result<(RunReport, Option<ObjectId>)> {
    let revs = RevStore::open(project);
    let base = revs.load(&exp.base)?;
    let pipeline_text = read_tracked(&revs, &base, PIPELINE_FILE)?.unwrap_or_else(|| "stages: {}\n".into());
    let pipeline = parse_pipeline(&pipeline_text)?;
    let mut params = params_at(&revs, &base)?;
    for (k, v) in &exp.overrides {
        params.set_existing(k, v.clone())?;
    }
    let mut lock = match read_tracked(&revs, &base, LOCK_FILE)? {
        Some(t) => parse_lock(&t)?,
        None => LockFile::default(),
    };
    let graph = build_graph(&pipeline)?;

    let snapshot = WorkspaceSnapshot::capture(project, data_paths(&pipeline))?;
    let opts = RunOptions {
        workers,
        write_lock: false,
        ..RunOptions::default()
    };
    let run = Executor::new(project, &pipeline, &graph, &params).run(&mut lock, &opts);
    let restored = snapshot.restore(project);
    let report = run?;
    restored?;
    if !report.success() {
        return Ok((report, None));
    }

    let store = project.store();
    let mut tree = BTreeMap::new();
    tree.insert(PIPELINE_FILE.to_string(), store.store_bytes(pipeline_text.as_bytes())?);
    tree.insert(PARAMS_FILE.to_string(), store.store_bytes(emit_params(&params).as_bytes())?);
    tree.insert(LOCK_FILE.to_string(), store.store_bytes(emit_lock(&lock).as_bytes())?);
    let _guard = revs.lock()?;
    let message = format!("experiment {}: {}", exp.name, exp.overrides_text());
    let rev = revs.write_revision(tree, Some(exp.base.clone()), &message, project.now())?;
    revs.set_ref(RefKind::Experiment, &exp.name, &rev.id)?;
    Ok((report, Some(rev.id)))
}

/// Metric values per revision, keyed `<stage>.<metric>`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsTable {
    /// Column labels as given by the caller.
    pub revs: Vec<String>,
    pub rows: BTreeMap<String, Vec<Option<serde_json::Value>>>,
}

impl MetricsTable {
    /// Tab-separated rendering. With more than one revision, each later
    /// column is followed by its difference from the first.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut header = vec!["metric".to_string()];
        for (i, r) in self.revs.iter().enumerate() {
            header.push(r.clone());
            if i > 0 {
                header.push(format!("change({r})"));
            }
        }
        out.push_str(&header.join("\t"));
        out.push('\n');
        for (key, cells) in &self.rows {
            let mut line = vec![key.clone()];
            for (i, cell) in cells.iter().enumerate() {
                line.push(cell.as_ref().map_or("-".to_string(), ToString::to_string));
                if i > 0 {
                    line.push(delta(cells[0].as_ref(), cell.as_ref()).map_or("-".to_string(), |d| d.to_string()));
                }
            }
            out.push_str(&line.join("\t"));
            out.push('\n');
        }
        out
    }
}

/// `b - a` for numeric cells.
pub fn delta(a: Option<&serde_json::Value>, b: Option<&serde_json::Value>) -> Option<serde_json::Value> {
    let (a, b) = (a?, b?);
    if let (Some(x), Some(y)) = (a.as_i64(), b.as_i64()) {
        return Some(serde_json::Value::from(y.checked_sub(x)?));
    }
    Some(serde_json::Value::from(b.as_f64()? - a.as_f64()?))
}

/// Read the metrics recorded at each revision.
pub fn diff_metrics(project: &Project, revs_wanted: &[String]) -> Result<MetricsTable> {
    let revs = RevStore::open(project);
    let mut per_rev = Vec::new();
    for r in revs_wanted {
        let rev = revs.resolve_revision(r)?;
        per_rev.push(metrics_at(&revs, &rev)?);
    }
    let mut table = MetricsTable {
        revs: revs_wanted.to_vec(),
        rows: BTreeMap::new(),
    };
    let keys: std::collections::BTreeSet<&String> = per_rev.iter().flat_map(|m| m.keys()).collect();
    for key in keys {
        let cells = per_rev.iter().map(|m| m.get(key).cloned()).collect();
        table.rows.insert(key.clone(), cells);
    }
    Ok(table)
}

fn metrics_at(revs: &RevStore<'_>, rev: &Revision) -> Result<BTreeMap<String, serde_json::Value>> {
    let mut out = BTreeMap::new();
    let Some(pipeline_text) = read_tracked(revs, rev, PIPELINE_FILE)? else {
        return Ok(out);
    };
    let pipeline = parse_pipeline(&pipeline_text)?;
    let lock = match read_tracked(revs, rev, LOCK_FILE)? {
        Some(t) => parse_lock(&t)?,
        None => return Ok(out),
    };
    for stage in pipeline.stages.values() {
        let Some(file) = stage.metrics_file() else { continue };
        let Some(content) = lock.stages.get(&stage.name).and_then(|r| r.outs.get(&file)) else {
            continue;
        };
        let doc: serde_json::Value = serde_json::from_slice(&revs.store().read(content.oid())?)
            .map_err(|e| Error::BadAttrFile {
                stage: stage.name.clone(),
                msg: e.to_string(),
            })?;
        for m in &stage.metrics {
            if let Some(v) = doc.get(m) {
                out.insert(format!("{}.{m}", stage.name), v.clone());
            }
        }
    }
    Ok(out)
}

/// Create branch `branch` at a new commit carrying the experiment's
/// result tree, parented at its base, and check it out.
pub fn promote(project: &Project, name: &str, branch: &str) -> Result<ObjectId> {
    let exp = load_experiment(project, name)?;
    let result = match (&exp.status, &exp.result) {
        (ExpStatus::Done, Some(r)) => r.clone(),
        (status, _) => {
            return Err(Error::ExperimentNotDone {
                name: name.to_string(),
                status: status.to_string(),
            })
        }
    };
    validate_ref_name(branch)?;
    let revs = RevStore::open(project);
    let dirty = revstore::dirty_files(project)?;
    if !dirty.is_empty() {
        return Err(Error::DirtyWorkspace(dirty));
    }
    let id = {
        let _guard = revs.lock()?;
        if revs.get_ref(RefKind::Branch, branch)?.is_some() {
            return Err(Error::BranchExists(branch.to_string()));
        }
        let source = revs.load(&result)?;
        let message = format!("promote {name}: {}", exp.overrides_text());
        let rev = revs.write_revision(source.tree, Some(exp.base.clone()), &message, project.now())?;
        revs.set_ref(RefKind::Branch, branch, &rev.id)?;
        rev.id
    };
    revstore::checkout_rev(project, branch, false)?;
    let pipeline = project.load_pipeline()?;
    checkout_workspace(project, &pipeline, &project.load_lock()?, CheckoutMode::Copy)?;
    Ok(id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn value(s: &str) -> ParamValue {
        ParamValue::from_literal(s)
    }

    #[test]
    fn record_roundtrip() {
        let exp = Experiment {
            name: "exp-abcdef".into(),
            seq: 3,
            base: hash_bytes(b"base"),
            overrides: vec![("MyNode.shift".into(), value("1.0")), ("tag".into(), ParamValue::Str("2".into()))],
            status: ExpStatus::Failed,
            result: None,
            error: Some("stage a: command exited with status 1".into()),
        };
        assert_eq!(Experiment::parse(&exp.render()).unwrap(), exp);
        assert_eq!(list_line(&exp), "exp-abcdef\tfailed\t-\tMyNode.shift=1.0 tag=\"2\"");
    }

    #[test]
    fn names_depend_on_overrides_only() {
        let a = auto_name(&[("x".into(), value("1")), ("y".into(), value("2"))]);
        let b = auto_name(&[("y".into(), value("2")), ("x".into(), value("1"))]);
        let c = auto_name(&[("x".into(), value("2"))]);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.starts_with("exp-") && a.len() == 10);
        // sha256 of "x=1\ny=2"
        assert_eq!(a, "exp-fd7ba2");
    }

    #[test]
    fn deltas() {
        use serde_json::json;
        assert_eq!(delta(Some(&json!(3.0)), Some(&json!(4.0))), Some(json!(1.0)));
        assert_eq!(delta(Some(&json!(3)), Some(&json!(3))), Some(json!(0)));
        assert_eq!(delta(Some(&json!("a")), Some(&json!(1))), None);
        assert_eq!(delta(None, Some(&json!(1))), None);
    }

    #[test]
    fn render_table() {
        use serde_json::json;
        let table = MetricsTable {
            revs: vec!["v1".into(), "v2".into()],
            rows: BTreeMap::from([
                ("MyNode.result".to_string(), vec![Some(json!(3.0)), Some(json!(4.0))]),
                ("Other.loss".to_string(), vec![None, Some(json!(0.5))]),
            ]),
        };
        assert_eq!(
            table.render(),
            "metric\tv1\tv2\tchange(v2)\nMyNode.result\t3.0\t4.0\t1.0\nOther.loss\t-\t0.5\t-\n"
        );
    }

    #[test]
    fn queue_requires_commit_and_known_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = Project::init(dir.path()).unwrap();
        fs::write(dir.path().join("params.dac"), "MyNode:\n  shift: 1.0\n").unwrap();
        assert!(matches!(queue_experiments(&p, &["MyNode.shift=1".into()]), Err(Error::NoCommits)));
        revstore::commit(&p, "base").unwrap();
        assert!(matches!(
            queue_experiments(&p, &["MyNode.nope=1".into()]),
            Err(Error::KeyMissing(_))
        ));
        let names = queue_experiments(&p, &["MyNode.shift=1,2,3,4".into()]).unwrap();
        assert_eq!(names.len(), 4);
        let again = queue_experiments(&p, &["MyNode.shift=1".into()]).unwrap();
        assert_eq!(again, vec![format!("{}-2", names[0])]);
        let listed: Vec<String> = list_experiments(&p).unwrap().into_iter().map(|e| e.name).collect();
        let mut sorted = listed.clone();
        sorted.sort();
        assert_eq!(listed, sorted);
        assert_eq!(listed.len(), 5);

        fs::write(dir.path().join("params.dac"), "MyNode:\n  shift: 5.0\n").unwrap();
        assert!(matches!(
            queue_experiments(&p, &["MyNode.shift=1".into()]),
            Err(Error::DirtyWorkspace(_))
        ));
    }

    #[test]
    fn promote_rejects_unfinished() {
        let dir = tempfile::tempdir().unwrap();
        let p = Project::init(dir.path()).unwrap();
        fs::write(dir.path().join("params.dac"), "a: 1\n").unwrap();
        revstore::commit(&p, "base").unwrap();
        let names = queue_experiments(&p, &["a=2".into()]).unwrap();
        assert!(matches!(promote(&p, &names[0], "best"), Err(Error::ExperimentNotDone { .. })));
        assert!(matches!(promote(&p, "exp-nope", "best"), Err(Error::UnknownExperiment(_))));
    }
}
