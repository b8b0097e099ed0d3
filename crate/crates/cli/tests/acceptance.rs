//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.
//!
//! Run with `cargo test -p dac-cli --test acceptance`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Display;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode, Output};
use std::time::{Duration, Instant};

use dac_core::executor::lock::LockFile;
use dac_core::experiments;
use dac_core::pipeline::{emit_pipeline, parse_pipeline};
use dac_core::revstore::RevStore;
use dac_core::{build_graph, topo_sort, AttrValue, Content, Executor, Graph, NodeHandle, PipelineDef, Project, RunOptions, RunReport, StageDef};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use sha2::{Digest, Sha256};

const BIN: &str = env!("CARGO_BIN_EXE_dac");

type R<T> = Result<T, String>;

fn ctx<E: Display>(what: &'static str) -> impl Fn(E) -> String {
    move |e| format!("{what}: {e}")
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> R<()> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn dac(dir: &Path, args: &[&str]) -> R<Output> {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("DAC_DIR")
        .env_remove("DAC_STAGE")
        .output()
        .map_err(|e| format!("spawning dac: {e}"))
}

/// Run `dac` and require success; returns stdout.
fn dac_ok(dir: &Path, args: &[&str]) -> R<String> {
    let out = dac(dir, args)?;
    ensure(out.status.success(), || {
        format!(
            "dac {} exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        )
    })?;
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn new_project(pipeline: &str, params: &str) -> R<tempfile::TempDir> {
    let dir = tempfile::tempdir().map_err(ctx("tempdir"))?;
    dac_ok(dir.path(), &["init"])?;
    write(dir.path(), "pipeline.dac", pipeline)?;
    write(dir.path(), "params.dac", params)?;
    Ok(dir)
}

fn write(root: &Path, rel: &str, text: &str) -> R<()> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(ctx("mkdir"))?;
    }
    fs::write(&path, text).map_err(|e| format!("{}: {e}", path.display()))
}

fn open(dir: &Path) -> R<Project> {
    Project::open(dir).map_err(ctx("open project"))
}

fn lib_repro(p: &Project, workers: usize) -> R<RunReport> {
    let pipeline = p.load_pipeline().map_err(ctx("pipeline"))?;
    let params = p.load_params().map_err(ctx("params"))?;
    let graph = build_graph(&pipeline).map_err(ctx("graph"))?;
    let mut lock = p.load_lock().map_err(ctx("lock"))?;
    let opts = RunOptions {
        workers,
        ..RunOptions::default()
    };
    let report = Executor::new(p, &pipeline, &graph, &params)
        .run(&mut lock, &opts)
        .map_err(ctx("run"))?;
    p.save_lock(&lock).map_err(ctx("save lock"))?;
    Ok(report)
}

fn names(items: &[String]) -> BTreeSet<String> {
    items.iter().cloned().collect()
}

fn set(items: &[&str]) -> BTreeSet<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// Every non-hidden workspace file plus managed attribute files, with bytes.
fn workspace_files(root: &Path) -> R<BTreeMap<String, Vec<u8>>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) -> R<()> {
        for entry in fs::read_dir(dir).map_err(ctx("read_dir"))? {
            let path = entry.map_err(ctx("dir entry"))?.path();
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
            if rel == ".dac" {
                continue;
            }
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                out.insert(rel, fs::read(&path).map_err(ctx("read"))?);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out)?;
    let nodes = root.join(".dac/nodes");
    if nodes.is_dir() {
        let mut managed = BTreeMap::new();
        walk(&nodes, &nodes, &mut managed)?;
        out.extend(managed.into_iter().map(|(k, v)| (format!(".dac/nodes/{k}"), v)));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// 1 and 2: the five-stage graph n1->n2, n1->n4, n2->n3, n4->n5, n5->n3.

const FIVE_EDGES: [(&str, &str); 5] = [("n1", "n2"), ("n1", "n4"), ("n2", "n3"), ("n4", "n5"), ("n5", "n3")];

fn five_pipeline() -> String {
    let c = |args: &str| format!("\"'{BIN}' builtin consume {args}\"");
    format!(
        "stages:
  n1:
    cmd: {}
    deps_path: [in1.txt]
    outs_path: [d/n1.txt]
  n2:
    cmd: {}
    deps_path: [d/n1.txt]
    outs_path: [d/n2.txt]
  n3:
    cmd: {}
    deps_path: [d/n2.txt, d/n5.txt]
    outs_path: [d/n3.txt]
  n4:
    cmd: {}
    deps_path: [d/n1.txt, in4.txt]
    outs_path: [d/n4.txt]
  n5:
    cmd: {}
    deps_path: [d/n4.txt]
    outs_path: [d/n5.txt]
",
        c("--data in1.txt --out d/n1.txt"),
        c("--data d/n1.txt --out d/n2.txt"),
        c("--data d/n2.txt --data d/n5.txt --out d/n3.txt"),
        c("--data d/n1.txt --data in4.txt --out d/n4.txt"),
        c("--data d/n4.txt --out d/n5.txt"),
    )
}

fn five_project() -> R<tempfile::TempDir> {
    let dir = new_project(&five_pipeline(), "{}\n")?;
    write(dir.path(), "in1.txt", "1.0")?;
    write(dir.path(), "in4.txt", "2.0")?;
    Ok(dir)
}

fn criterion_1() -> R<String> {
    let dir = five_project()?;
    let started = Instant::now();
    let first = dac_ok(dir.path(), &["repro"])?;
    ensure(first.starts_with("5 executed, 0 skipped"), || format!("first repro: {}", first.trim()))?;
    let second = dac_ok(dir.path(), &["repro"])?;
    let elapsed = started.elapsed();
    ensure(second.starts_with("0 executed, 5 skipped"), || format!("second repro: {}", second.trim()))?;
    // n3 = n2 + n5 = in1 + (in1 + in4) = 4
    let n3 = fs::read_to_string(dir.path().join("d/n3.txt")).map_err(ctx("n3"))?;
    ensure(n3 == "4.0", || format!("d/n3.txt = {n3}"))?;
    let graph = build_graph(&open(dir.path())?.load_pipeline().map_err(ctx("pipeline"))?).map_err(ctx("graph"))?;
    let want: BTreeSet<(String, String)> = FIVE_EDGES.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
    ensure(graph.edges() == &want, || format!("edges {:?}", graph.edges()))?;
    ensure(elapsed < Duration::from_secs(2), || format!("took {elapsed:?}"))?;
    Ok(format!("second run executed 0 of 5 stages; both runs took {:.2}s", elapsed.as_secs_f64()))
}

/// Stages reachable from `start` over the hand-written edge list.
fn reachable(start: &str) -> BTreeSet<String> {
    let mut seen = set(&[start]);
    let mut queue = VecDeque::from([start.to_string()]);
    while let Some(n) = queue.pop_front() {
        for (a, b) in FIVE_EDGES {
            if a == n && seen.insert(b.to_string()) {
                queue.push_back(b.to_string());
            }
        }
    }
    seen
}

fn criterion_2() -> R<String> {
    let dir = five_project()?;
    dac_ok(dir.path(), &["repro"])?;
    write(dir.path(), "in4.txt", "5.0")?;
    let oracle = reachable("n4");
    ensure(oracle == set(&["n3", "n4", "n5"]), || format!("reachability oracle {oracle:?}"))?;

    let status = dac_ok(dir.path(), &["status"])?;
    let stale: BTreeSet<String> = status
        .lines()
        .filter_map(|l| {
            let mut cols = l.split('\t');
            let stage = cols.next()?;
            (cols.next()? == "stale").then(|| stage.to_string())
        })
        .collect();
    ensure(stale == oracle, || format!("status reported stale {stale:?}"))?;

    let report = lib_repro(&open(dir.path())?, 1)?;
    ensure(names(&report.executed) == oracle, || format!("executed {:?}", report.executed))?;
    ensure(names(&report.skipped) == set(&["n1", "n2"]), || format!("skipped {:?}", report.skipped))?;
    ensure(report.restored.is_empty() && report.failed.is_empty(), || report.summary())?;
    Ok("stale = executed = {n3, n4, n5}; skipped = {n1, n2}".into())
}

// ---------------------------------------------------------------------------
// 3: diamond a -> {b, c} -> d of half-second sleeps.

fn diamond_pipeline() -> String {
    let s = |out: &str| format!("\"'{BIN}' builtin sleep --seconds 0.5 --out {out}\"");
    format!(
        "stages:
  a:
    cmd: {}
    outs_path: [a.txt]
  b:
    cmd: {}
    deps_path: [a.txt]
    outs_path: [b.txt]
  c:
    cmd: {}
    deps_path: [a.txt]
    outs_path: [c.txt]
  d:
    cmd: {}
    deps_path: [b.txt, c.txt]
    outs_path: [d.txt]
",
        s("a.txt"),
        s("b.txt"),
        s("c.txt"),
        s("d.txt"),
    )
}

const PARALLEL_RATIO_MAX: f64 = 0.75;

fn criterion_3() -> R<String> {
    let started = Instant::now();
    let mut walls = Vec::new();
    for workers in [1, 2] {
        let dir = new_project(&diamond_pipeline(), "{}\n")?;
        let p = open(dir.path())?;
        let report = lib_repro(&p, workers)?;
        ensure(report.executed.len() == 4, || report.summary())?;
        let graph = build_graph(&p.load_pipeline().map_err(ctx("pipeline"))?).map_err(ctx("graph"))?;
        for (from, to) in graph.edges() {
            let (f, t) = (&report.timings[from], &report.timings[to]);
            ensure(f.end <= t.start, || {
                format!("workers={workers}: {to} started at {:.3}s before {from} ended at {:.3}s", t.start, f.end)
            })?;
        }
        walls.push(report.wall_time);
    }
    let elapsed = started.elapsed();
    let ratio = walls[1] / walls[0];
    let detail = format!(
        "serial {:.3}s, workers=2 {:.3}s, ratio {ratio:.4} (max {PARALLEL_RATIO_MAX}); took {:.2}s",
        walls[0],
        walls[1],
        elapsed.as_secs_f64()
    );
    ensure(ratio <= PARALLEL_RATIO_MAX, || detail.clone())?;
    ensure(elapsed < Duration::from_secs(10), || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 4: experiments share the cached upstream stages.

fn chain_pipeline() -> String {
    format!(
        "stages:
  gen:
    cmd: \"'{BIN}' builtin gen-data --value 2.0 --out data/raw.txt\"
    outs_path: [data/raw.txt]
  prepare:
    cmd: \"'{BIN}' builtin consume --data data/raw.txt --out data/prep.txt\"
    deps_path: [data/raw.txt]
    outs_path: [data/prep.txt]
  compute:
    cmd: \"'{BIN}' builtin shift-add --data data/prep.txt --shift ${{compute.shift}} --metric score\"
    params: [compute.shift]
    deps_path: [data/prep.txt]
    outs_attr: [result]
    metrics: [score]
"
    )
}

fn criterion_4() -> R<String> {
    let started = Instant::now();
    let dir = new_project(&chain_pipeline(), "compute:\n  shift: 0\n")?;
    dac_ok(dir.path(), &["commit", "-m", "base"])?;
    let queued = dac_ok(dir.path(), &["exp", "queue", "-S", "compute.shift=range(1000,1800,50)"])?;
    ensure(queued == "queued 16 experiments\n", || format!("queue said {}", queued.trim()))?;

    let p = open(dir.path())?;
    let runs = experiments::run_queue(&p, 1).map_err(ctx("run_queue"))?;
    ensure(runs.len() == 16, || format!("{} runs", runs.len()))?;
    let mut executed: BTreeMap<&str, usize> = BTreeMap::new();
    let mut restored: BTreeMap<&str, usize> = BTreeMap::new();
    for run in &runs {
        let report = run
            .report
            .as_ref()
            .ok_or_else(|| format!("{} has no report: {:?}", run.experiment.name, run.experiment.error))?;
        ensure(report.success(), || format!("{}: {}", run.experiment.name, report.summary()))?;
        for s in &report.executed {
            *executed.entry(s.as_str()).or_default() += 1;
        }
        for s in &report.restored {
            *restored.entry(s.as_str()).or_default() += 1;
        }
    }
    let count = |m: &BTreeMap<&str, usize>, k: &str| m.get(k).copied().unwrap_or(0);
    let counts = format!(
        "executed gen={} prepare={} compute={}; restored gen={} prepare={} compute={}",
        count(&executed, "gen"),
        count(&executed, "prepare"),
        count(&executed, "compute"),
        count(&restored, "gen"),
        count(&restored, "prepare"),
        count(&restored, "compute"),
    );
    ensure(
        [(1, 15), (1, 15), (16, 0)]
            == [
                (count(&executed, "gen"), count(&restored, "gen")),
                (count(&executed, "prepare"), count(&restored, "prepare")),
                (count(&executed, "compute"), count(&restored, "compute")),
            ],
        || counts.clone(),
    )?;
    // each compute result is 2.0 + shift
    for run in &runs {
        let shift = match &run.experiment.overrides[..] {
            [(k, v)] if k == "compute.shift" => v.to_string().parse::<f64>().map_err(ctx("shift"))?,
            other => return Err(format!("overrides {other:?}")),
        };
        let h = NodeHandle::from_rev(&p, "compute", &run.experiment.name, None).map_err(ctx("from_rev"))?;
        let got = h.get_attr("result").map_err(ctx("get_attr"))?;
        ensure(got.to_string() == format!("{:.1}", 2.0 + shift), || {
            format!("{}: result {got}, want {}", run.experiment.name, 2.0 + shift)
        })?;
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("16 experiments; {counts}; took {:.2}s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------------------
// 5: loading node attributes from tagged revisions.

fn my_node_pipeline() -> String {
    format!(
        "stages:
  MyNode:
    cmd: \"'{BIN}' builtin shift-add --data data.txt --shift ${{MyNode.shift}} --stage MyNode --metric score\"
    params: [MyNode.shift]
    deps_path: [data.txt]
    outs_attr: [result]
    metrics: [score]
"
    )
}

fn criterion_5() -> R<String> {
    let dir = new_project(&my_node_pipeline(), "MyNode:\n  shift: 1.0\n")?;
    write(dir.path(), "data.txt", "2.0")?;
    dac_ok(dir.path(), &["repro"])?;
    dac_ok(dir.path(), &["commit", "-m", "v1"])?;
    dac_ok(dir.path(), &["tag", "v1"])?;
    write(dir.path(), "params.dac", "MyNode:\n  shift: 2.0\n")?;
    dac_ok(dir.path(), &["repro"])?;
    dac_ok(dir.path(), &["commit", "-m", "v2"])?;
    dac_ok(dir.path(), &["tag", "v2"])?;

    let v1 = dac_ok(dir.path(), &["get", "MyNode", "result", "--rev", "v1"])?;
    let v2 = dac_ok(dir.path(), &["get", "MyNode", "result", "--rev", "v2"])?;
    ensure(v1 == "3.0\n" && v2 == "4.0\n", || format!("v1={} v2={}", v1.trim(), v2.trim()))?;

    let p = open(dir.path())?;
    let before = p.store().reads();
    let handle = NodeHandle::from_rev(&p, "MyNode", "v1", None).map_err(ctx("from_rev"))?;
    let lazy_reads = p.store().reads() - before;
    ensure(lazy_reads == 0 && handle.data_reads() == 0, || {
        format!("from_rev read {lazy_reads} data objects (handle counter {})", handle.data_reads())
    })?;
    let value = handle.get_attr("result").map_err(ctx("get_attr"))?;
    ensure(matches!(&value, AttrValue::Json(v) if v.as_f64() == Some(3.0)), || format!("v1 handle gave {value}"))?;
    ensure(handle.data_reads() == 1, || format!("one access counted {} reads", handle.data_reads()))?;
    Ok("v1 = 3.0, v2 = 4.0; from_rev made 0 data reads".into())
}

// ---------------------------------------------------------------------------
// 6 and 7: restoring data from the cache and through a remote.

fn data_pipeline() -> String {
    format!(
        "stages:
  gen:
    cmd: \"'{BIN}' builtin gen-data --value 2.0 --out raw/a.txt\"
    outs_path: [raw/a.txt]
  shard:
    cmd: mkdir -p shards/sub && cp raw/a.txt shards/x.txt && cp raw/a.txt shards/sub/y.txt && echo z > shards/z.txt
    deps_path: [raw/a.txt]
    outs_path: [shards]
  MyNode:
    cmd: \"'{BIN}' builtin shift-add --data raw/a.txt --shift ${{MyNode.shift}} --stage MyNode\"
    params: [MyNode.shift]
    deps_path: [raw/a.txt, notes.txt]
    outs_attr: [result]
"
    )
}

fn data_project() -> R<tempfile::TempDir> {
    let dir = new_project(&data_pipeline(), "MyNode:\n  shift: 1.0\n")?;
    write(dir.path(), "notes.txt", "hand-written input\n")?;
    dac_ok(dir.path(), &["repro"])?;
    Ok(dir)
}

/// Files under `dir` as sorted `<sha256> <relpath>` lines.
fn independent_manifest(dir: &Path) -> R<String> {
    let files = workspace_files(dir)?;
    Ok(files.iter().map(|(rel, bytes)| format!("{} {rel}\n", sha256_hex(bytes))).collect())
}

fn criterion_6() -> R<String> {
    let dir = data_project()?;
    let lock: LockFile = open(dir.path())?.load_lock().map_err(ctx("lock"))?;
    let outs: BTreeMap<String, Content> = lock.stages.values().flat_map(|r| r.outs.clone()).collect();
    ensure(outs.values().any(Content::is_dir), || "no directory output in the lock".into())?;
    for path in outs.keys() {
        let full = dir.path().join(path);
        if full.is_dir() {
            fs::remove_dir_all(&full).map_err(ctx("rm dir"))?;
        } else {
            fs::remove_file(&full).map_err(ctx("rm file"))?;
        }
    }
    dac_ok(dir.path(), &["checkout"])?;
    let mut files = 0;
    for (path, content) in &outs {
        let full = dir.path().join(path);
        let digest = match content {
            Content::File(_) => {
                files += 1;
                sha256_hex(&fs::read(&full).map_err(|e| format!("{path}: {e}"))?)
            }
            Content::Dir(_) => {
                let manifest = independent_manifest(&full)?;
                files += manifest.lines().count();
                sha256_hex(manifest.as_bytes())
            }
        };
        ensure(digest == content.oid().to_string(), || {
            format!("{path}: sha256 {digest} but lock has {}", content.oid())
        })?;
    }
    Ok(format!("{} outputs ({files} files) restored bit-identical", outs.len()))
}

fn copy_tree(from: &Path, to: &Path) -> R<()> {
    fs::create_dir_all(to).map_err(ctx("mkdir"))?;
    for entry in fs::read_dir(from).map_err(ctx("read_dir"))? {
        let path = entry.map_err(ctx("entry"))?.path();
        let dest = to.join(path.file_name().unwrap());
        if path.is_dir() {
            copy_tree(&path, &dest)?;
        } else {
            fs::copy(&path, &dest).map_err(ctx("copy"))?;
        }
    }
    Ok(())
}

fn criterion_7() -> R<String> {
    let origin = data_project()?;
    dac_ok(origin.path(), &["commit", "-m", "shared"])?;
    let remote = tempfile::tempdir().map_err(ctx("tempdir"))?;
    let remote_path = remote.path().join("store");
    let remote_arg = remote_path.to_string_lossy().into_owned();
    dac_ok(origin.path(), &["push", "--remote", &remote_arg])?;

    let clone = tempfile::tempdir().map_err(ctx("tempdir"))?;
    dac_ok(clone.path(), &["init"])?;
    for meta in [".dac/revs", ".dac/refs"] {
        copy_tree(&origin.path().join(meta), &clone.path().join(meta))?;
    }
    for file in [".dac/HEAD", "pipeline.dac", "params.dac", "lock.dac"] {
        fs::copy(origin.path().join(file), clone.path().join(file)).map_err(|e| format!("{file}: {e}"))?;
    }
    dac_ok(clone.path(), &["pull", "--remote", &remote_arg])?;
    dac_ok(clone.path(), &["checkout"])?;

    let want = workspace_files(origin.path())?;
    let got = workspace_files(clone.path())?;
    let want_keys: BTreeSet<&String> = want.keys().collect();
    let got_keys: BTreeSet<&String> = got.keys().collect();
    ensure(want_keys == got_keys, || format!("files differ: origin {want_keys:?} clone {got_keys:?}"))?;
    if let Some(path) = want.keys().find(|k| want[*k] != got[*k]) {
        return Err(format!("{path} differs after pull"));
    }
    let repro = dac_ok(clone.path(), &["repro"])?;
    ensure(repro.starts_with("0 executed"), || format!("repro in clone: {}", repro.trim()))?;
    Ok(format!("{} files byte-identical; clone repro: {}", want.len(), repro.trim()))
}

// ---------------------------------------------------------------------------
// 8: promoting the best experiment.

fn criterion_8() -> R<String> {
    let dir = new_project(&my_node_pipeline(), "MyNode:\n  shift: 1.0\n")?;
    write(dir.path(), "data.txt", "2.0")?;
    dac_ok(dir.path(), &["repro"])?;
    let base = dac_ok(dir.path(), &["commit", "-m", "base"])?.trim().to_string();
    dac_ok(dir.path(), &["exp", "queue", "-S", "MyNode.shift=0.5,3.5,1.5,2.5"])?;
    dac_ok(dir.path(), &["exp", "run"])?;

    let p = open(dir.path())?;
    let exps = experiments::list_experiments(&p).map_err(ctx("list"))?;
    ensure(exps.len() == 4, || format!("{} experiments", exps.len()))?;
    let mut scored = Vec::new();
    for e in &exps {
        let table = experiments::diff_metrics(&p, &[e.name.clone()]).map_err(ctx("metrics"))?;
        let score = table
            .rows
            .get("MyNode.score")
            .and_then(|row| row[0].as_ref())
            .and_then(|v| v.as_f64())
            .ok_or_else(|| format!("{} has no score", e.name))?;
        scored.push((score, e.name.clone()));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (best_score, best) = scored.last().cloned().unwrap();
    ensure(best_score == 5.5, || format!("best score {best_score}"))?;

    dac_ok(dir.path(), &["exp", "promote", &best, "best"])?;
    let revs = RevStore::open(&p);
    let exp_params = revs.read_file_at(&best, "params.dac").map_err(ctx("exp params"))?;
    let branch_params = revs.read_file_at("best", "params.dac").map_err(ctx("branch params"))?;
    ensure(exp_params == branch_params, || "params differ between experiment and branch".into())?;
    ensure(exp_params == b"MyNode:\n  shift: 3.5\n", || {
        format!("params {:?}", String::from_utf8_lossy(&exp_params))
    })?;
    let workspace = fs::read(dir.path().join("params.dac")).map_err(ctx("params"))?;
    ensure(workspace == exp_params, || "workspace params differ after promote".into())?;
    let branch = revs.resolve_revision("best").map_err(ctx("resolve"))?;
    let parent = branch.parent.map(|id| id.to_string());
    ensure(parent.as_deref() == Some(base.as_str()), || format!("parent {parent:?}, base {base}"))?;
    Ok(format!("promoted {best} (score 5.5); params byte-equal; parent is base"))
}

// ---------------------------------------------------------------------------
// 9: format round trips and topological order.

const PIPELINES: usize = 200;

fn ident(rng: &mut StdRng, first: &[u8], rest: &[u8], max: usize) -> String {
    let mut s = String::new();
    s.push(*first.choose(rng).unwrap() as char);
    for _ in 0..rng.gen_range(0..max) {
        s.push(*rest.choose(rng).unwrap() as char);
    }
    s
}

const ALPHA: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ_";
const ALNUM: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ_0123456789";

/// Fragments chosen to stress quoting in the emitter.
const CMD_WORDS: &[&str] = &[
    "python", "run.py", "--flag", "-x", "a: b", "#not-a-comment", "x#y", "'single'", "\"double\"", "[list]",
    "{map}", "&&", "|", ">", "out.txt", "null", "true", "~", "- dash", "key:", "100", "1e3", "*glob*", "%pct",
    "@at", "!bang", "`tick`", "tab\there",
];

fn random_path(rng: &mut StdRng, taken: &mut BTreeSet<String>) -> String {
    loop {
        let depth = rng.gen_range(1..=3);
        let mut parts: Vec<String> = (0..depth).map(|_| ident(rng, ALNUM, b"abcxyz019_-.", 6)).collect();
        if rng.gen_bool(0.1) {
            parts.push("with space.txt".into());
        }
        let path = parts.join("/");
        if !path.starts_with(".dac") && taken.iter().all(|t| !related(t, &path)) && taken.insert(path.clone()) {
            return path;
        }
    }
}

/// True if one path is the other or contains it.
fn related(a: &str, b: &str) -> bool {
    a == b || a.starts_with(&format!("{b}/")) || b.starts_with(&format!("{a}/"))
}

fn random_pipeline(rng: &mut StdRng) -> PipelineDef {
    let mut pipeline = PipelineDef::new();
    let mut outputs: Vec<String> = Vec::new();
    let mut attrs: Vec<String> = Vec::new();
    let mut taken = BTreeSet::new();
    let count = rng.gen_range(0..=6);
    let mut stage_names = BTreeSet::new();
    while stage_names.len() < count {
        stage_names.insert(ident(rng, ALPHA, b"abcdefXYZ0123_-", 8));
    }
    let mut order: Vec<String> = stage_names.into_iter().collect();
    order.shuffle(rng);
    for name in order {
        let mut stage = StageDef::new(name.clone(), String::new());
        let n_params = rng.gen_range(0..=3);
        let mut params = BTreeSet::new();
        while params.len() < n_params {
            let segs = rng.gen_range(1..=3);
            let key: Vec<String> = (0..segs).map(|_| ident(rng, ALPHA, ALNUM, 5)).collect();
            params.insert(key.join("."));
        }
        stage.params = params.into_iter().collect();
        stage.params.shuffle(rng);

        let mut words: Vec<String> = (0..rng.gen_range(1..=6))
            .map(|_| CMD_WORDS.choose(rng).unwrap().to_string())
            .collect();
        for key in &stage.params {
            if rng.gen_bool(0.7) {
                words.insert(rng.gen_range(0..=words.len()), format!("${{{key}}}"));
            }
        }
        stage.cmd = words.join(" ").trim().to_string();

        for _ in 0..rng.gen_range(0..=2) {
            stage.deps_path.push(random_path(rng, &mut taken));
        }
        for out in &outputs {
            if rng.gen_bool(0.3) {
                stage.deps_path.push(out.clone());
            }
        }
        for a in &attrs {
            if rng.gen_bool(0.3) {
                stage.deps_attr.push(a.clone());
            }
        }
        for _ in 0..rng.gen_range(0..=2) {
            stage.outs_path.push(random_path(rng, &mut taken));
        }
        for _ in 0..rng.gen_range(0..=1) {
            stage.plots.push(random_path(rng, &mut taken));
        }
        let mut managed = BTreeSet::new();
        for _ in 0..rng.gen_range(0..=4) {
            managed.insert(ident(rng, ALPHA, ALNUM, 6));
        }
        for m in managed {
            if rng.gen_bool(0.5) {
                stage.outs_attr.push(m);
            } else {
                stage.metrics.push(m);
            }
        }
        outputs.extend(stage.outs_path.iter().chain(&stage.plots).cloned());
        attrs.extend(stage.outs_attr.iter().chain(&stage.metrics).map(|a| format!("{name}.{a}")));
        pipeline.insert(stage);
    }
    pipeline
}

fn check_round_trips(rng: &mut StdRng) -> R<usize> {
    let mut stages = 0;
    for i in 0..PIPELINES {
        let original = random_pipeline(rng);
        original.validate().map_err(|e| format!("generator made an invalid pipeline #{i}: {e}"))?;
        stages += original.stages.len();
        let text = emit_pipeline(&original);
        let parsed = parse_pipeline(&text).map_err(|e| format!("pipeline #{i} failed to parse: {e}\n{text}"))?;
        ensure(parsed == original, || format!("pipeline #{i} changed on parse:\n{text}"))?;
        let again = emit_pipeline(&parsed);
        ensure(again == text, || format!("pipeline #{i} emit is not a fixpoint:\n{text}\n---\n{again}"))?;
        let reparsed = parse_pipeline(&again).map_err(|e| format!("pipeline #{i} reparse: {e}"))?;
        ensure(reparsed == parsed, || format!("pipeline #{i} unstable"))?;
    }
    Ok(stages)
}

/// First ordering of `names` in lexicographic permutation order that
/// respects every edge, found by trying permutations one by one.
fn brute_force_order(names: &[String], edges: &[(usize, usize)]) -> Option<Vec<String>> {
    let mut perm: Vec<usize> = (0..names.len()).collect();
    perm.sort_by(|a, b| names[*a].cmp(&names[*b]));
    let mut pos = vec![0; names.len()];
    loop {
        for (i, &n) in perm.iter().enumerate() {
            pos[n] = i;
        }
        if edges.iter().all(|&(a, b)| pos[a] < pos[b]) {
            return Some(perm.iter().map(|&i| names[i].clone()).collect());
        }
        if !next_permutation(&mut perm, |a, b| names[*a] < names[*b]) {
            return None;
        }
    }
}

fn next_permutation<T>(v: &mut [T], less: impl Fn(&T, &T) -> bool) -> bool {
    let Some(i) = (1..v.len()).rev().find(|&i| less(&v[i - 1], &v[i])) else {
        return false;
    };
    let j = (i..v.len()).rev().find(|&j| less(&v[i - 1], &v[j])).unwrap();
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

fn compare_topo(names: &[String], edges: &[(usize, usize)]) -> R<bool> {
    let oracle = brute_force_order(names, edges);
    let named = edges.iter().map(|&(a, b)| (names[a].clone(), names[b].clone()));
    match (Graph::from_edges(names.iter().cloned(), named), oracle) {
        (Ok(graph), Some(want)) => {
            let got = topo_sort(&graph);
            ensure(got == want, || format!("edges {edges:?} over {names:?}: topo_sort {got:?}, oracle {want:?}"))?;
            Ok(true)
        }
        (Err(_), None) => Ok(false),
        (Ok(_), None) => Err(format!("cyclic edges {edges:?} accepted")),
        (Err(e), Some(_)) => Err(format!("acyclic edges {edges:?} rejected: {e}")),
    }
}

/// Node labels deliberately out of index order.
const LABELS: [&str; 6] = ["m", "c", "x", "a", "q", "b"];

/// Number of labeled DAGs on n nodes, n = 1..=5.
const LABELED_DAGS: [usize; 5] = [1, 3, 25, 543, 29281];

fn check_topo() -> R<String> {
    let mut checked = 0;
    for n in 1..=5usize {
        let names: Vec<String> = LABELS[..n].iter().map(|s| s.to_string()).collect();
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        let mut dags = 0;
        for code in 0..3usize.pow(pairs.len() as u32) {
            let mut c = code;
            let mut edges = Vec::new();
            for &(i, j) in &pairs {
                match c % 3 {
                    1 => edges.push((i, j)),
                    2 => edges.push((j, i)),
                    _ => {}
                }
                c /= 3;
            }
            if compare_topo(&names, &edges)? {
                dags += 1;
            }
        }
        ensure(dags == LABELED_DAGS[n - 1], || format!("{dags} DAGs on {n} nodes"))?;
        checked += dags;
    }
    // Six nodes: every edge set oriented by index, under three labelings.
    let pairs: Vec<(usize, usize)> = (0..6).flat_map(|i| (i + 1..6).map(move |j| (i, j))).collect();
    let labelings: [[&str; 6]; 3] = [
        ["a", "b", "c", "d", "e", "f"],
        ["f", "e", "d", "c", "b", "a"],
        LABELS,
    ];
    for labels in labelings {
        let names: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
        for mask in 0u32..1 << pairs.len() {
            let edges: Vec<(usize, usize)> = pairs
                .iter()
                .enumerate()
                .filter(|(k, _)| mask & (1 << k) != 0)
                .map(|(_, &p)| p)
                .collect();
            ensure(compare_topo(&names, &edges)?, || format!("mask {mask} rejected"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} DAGs match the permutation oracle"))
}

fn criterion_9() -> R<String> {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(0x5eed_dac9);
    let stages = check_round_trips(&mut rng)?;
    let round_trips = started.elapsed();
    let topo = check_topo()?;
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{PIPELINES} pipelines ({stages} stages) reach a fixpoint in {:.2}s; {topo}; took {:.2}s",
        round_trips.as_secs_f64(),
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> R<String>); 9] = [
        ("no-op reproduction", criterion_1),
        ("minimal invalidation", criterion_2),
        ("parallel schedule and speedup", criterion_3),
        ("shared upstream caching across experiments", criterion_4),
        ("historical node loading", criterion_5),
        ("cache restore bit-equality", criterion_6),
        ("collaboration roundtrip", criterion_7),
        ("experiment promotion", criterion_8),
        ("parser and topological order stability", criterion_9),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let started = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("[PASS] {id} {name}: {detail} [{secs:.2}s]"),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {id} {name}: {why} [{secs:.2}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
