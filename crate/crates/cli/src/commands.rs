use std::path::PathBuf;

use dac_core::executor::{checkout_workspace, StageState};
use dac_core::experiments::{self, ExpStatus};
use dac_core::revstore::{self, RefKind, RevStore};
use dac_core::{build_graph, remote, CheckoutMode, Executor, NodeHandle, Project, Remote, RunOptions};

use crate::{Cli, Command, ExpCommand, Failure, MetricsCommand};

type CmdResult = Result<(), Failure>;

fn start_dir() -> Result<PathBuf, Failure> {
    match std::env::var_os("DAC_DIR") {
        Some(d) if !d.is_empty() => Ok(PathBuf::from(d)),
        _ => std::env::current_dir().map_err(|e| Failure {
            code: 2,
            message: format!("cannot read the current directory: {e}"),
        }),
    }
}

fn open(cli_time: bool) -> Result<Project, Failure> {
    let dir = start_dir()?;
    let project = if std::env::var_os("DAC_DIR").is_some_and(|d| !d.is_empty()) {
        Project::open(dir)?
    } else {
        Project::discover(&dir)?
    };
    Ok(if cli_time { project.with_fixed_time(0) } else { project })
}

pub fn dispatch(cli: Cli) -> CmdResult {
    let fixed = cli.deterministic_time;
    match cli.command {
        Command::Init => {
            let dir = start_dir()?;
            let project = Project::init(&dir)?;
            println!("initialized dac project in {}", project.root().display());
            Ok(())
        }
        Command::Repro { workers, targets } => repro(&open(fixed)?, workers, targets),
        Command::Status => status(&open(fixed)?),
        Command::Dag => {
            let project = open(fixed)?;
            print!("{}", build_graph(&project.load_pipeline()?)?.to_dot());
            Ok(())
        }
        Command::Commit { message } => {
            let out = revstore::commit(&open(fixed)?, &message)?;
            if !out.created {
                eprintln!("warning: nothing changed since {}; no revision created", out.id.short());
            }
            println!("{}", out.id);
            Ok(())
        }
        Command::Log => {
            let project = open(fixed)?;
            let revs = RevStore::open(&project);
            let Some(head) = revs.head_id()? else {
                return Err(dac_core::Error::NoCommits.into());
            };
            for rev in revs.log(&head)? {
                println!("{}\t{}\t{}", rev.id, rev.timestamp, rev.message);
            }
            Ok(())
        }
        Command::Checkout { rev, force } => checkout(&open(fixed)?, rev.as_deref(), force),
        Command::Tag { name, rev } => {
            let project = open(fixed)?;
            let revs = RevStore::open(&project);
            let id = revs.resolve(rev.as_deref().unwrap_or("HEAD"))?;
            let _guard = revs.lock()?;
            revs.set_ref(RefKind::Tag, &name, &id)?;
            println!("{name}\t{id}");
            Ok(())
        }
        Command::Refs => {
            let project = open(fixed)?;
            for (kind, name, id) in RevStore::open(&project).list_refs()? {
                println!("{kind}\t{name}\t{id}");
            }
            Ok(())
        }
        Command::Exp(cmd) => exp(&open(fixed)?, cmd),
        Command::Metrics(cmd) => {
            let project = open(fixed)?;
            let revs = match cmd {
                MetricsCommand::Show { rev } => vec![rev.unwrap_or_else(|| "HEAD".into())],
                MetricsCommand::Diff { revs } => revs,
            };
            print!("{}", experiments::diff_metrics(&project, &revs)?.render());
            Ok(())
        }
        Command::Push(args) => {
            let project = open(fixed)?;
            let n = remote::push(&project, &Remote::create(&args.remote)?)?;
            println!("pushed {n} objects");
            Ok(())
        }
        Command::Pull { remote: args, rev } => {
            let project = open(fixed)?;
            let n = remote::pull(&project, &Remote::open(&args.remote)?, rev.as_deref())?;
            println!("pulled {n} objects");
            Ok(())
        }
        Command::Get {
            stage,
            attr,
            rev,
            remote,
        } => {
            let project = open(fixed)?;
            let remote = remote.map(Remote::open).transpose()?;
            let handle = NodeHandle::from_rev(&project, &stage, &rev, remote.as_ref())?;
            println!("{}", handle.get_attr(&attr)?);
            Ok(())
        }
        Command::Builtin(b) => crate::builtin::run(b),
    }
}

fn repro(project: &Project, workers: usize, targets: Vec<String>) -> CmdResult {
    if workers == 0 {
        return Err(Failure::user("--workers must be at least 1"));
    }
    let pipeline = project.load_pipeline()?;
    let params = project.load_params()?;
    let graph = build_graph(&pipeline)?;
    let mut lock = project.load_lock()?;
    let opts = RunOptions {
        workers,
        targets: (!targets.is_empty()).then_some(targets),
        ..RunOptions::default()
    };
    let report = Executor::new(project, &pipeline, &graph, &params).run(&mut lock, &opts)?;
    project.save_lock(&lock)?;
    println!("{}", report.summary());
    if report.success() {
        return Ok(());
    }
    for (stage, failure) in &report.failed {
        eprintln!("stage {stage} failed: {failure}");
    }
    Err(Failure::user(""))
}

fn status(project: &Project) -> CmdResult {
    let pipeline = project.load_pipeline()?;
    let params = project.load_params()?;
    let graph = build_graph(&pipeline)?;
    let states = Executor::new(project, &pipeline, &graph, &params).status(&project.load_lock()?)?;
    for (stage, state) in states {
        let reason = match &state {
            StageState::Stale(r) => r.to_string(),
            _ => "-".to_string(),
        };
        println!("{stage}\t{}\t{reason}", state.label());
    }
    Ok(())
}

fn checkout(project: &Project, rev: Option<&str>, force: bool) -> CmdResult {
    if let Some(rev) = rev {
        let id = revstore::checkout_rev(project, rev, force)?;
        println!("HEAD is now {}", id.short());
    }
    let pipeline = project.load_pipeline()?;
    let summary = checkout_workspace(project, &pipeline, &project.load_lock()?, CheckoutMode::Copy)?;
    println!(
        "restored {} files, {} unchanged",
        summary.restored.len(),
        summary.unchanged.len()
    );
    Ok(())
}

fn exp(project: &Project, cmd: ExpCommand) -> CmdResult {
    match cmd {
        ExpCommand::Queue { set } => {
            let names = experiments::queue_experiments(project, &set)?;
            println!("queued {} experiments", names.len());
            Ok(())
        }
        ExpCommand::Run { workers } => {
            if workers == 0 {
                return Err(Failure::user("--workers must be at least 1"));
            }
            let runs = experiments::run_queue(project, workers)?;
            let mut failed = 0;
            for run in &runs {
                let exp = &run.experiment;
                let detail = match (&exp.status, &run.report) {
                    (ExpStatus::Done, Some(r)) => r.summary(),
                    _ => exp.error.clone().unwrap_or_default(),
                };
                if exp.status == ExpStatus::Failed {
                    failed += 1;
                    eprintln!("experiment {} failed: {detail}", exp.name);
                }
                println!("{}\t{}\t{detail}", exp.name, exp.status);
            }
            if failed > 0 {
                return Err(Failure::user(format!("{failed} of {} experiments failed", runs.len())));
            }
            Ok(())
        }
        ExpCommand::List => {
            for e in experiments::list_experiments(project)? {
                println!("{}", experiments::list_line(&e));
            }
            Ok(())
        }
        ExpCommand::Promote { name, branch } => {
            let id = experiments::promote(project, &name, &branch)?;
            println!("{branch}\t{id}");
            Ok(())
        }
    }
}
