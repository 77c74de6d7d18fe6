use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use mpe_core::correction::{CurateOptions, Curator, PlanLineage};
use mpe_core::dataset::{
    self, avg_steps, build_dpo_pairs, build_sft_all, build_sft_success, success_table, write_atomic, LineageCorpus,
    StatTable,
};
use mpe_core::exec::{execute_plan, execute_plan_parallel, ExecutionTrace, Workspace};
use mpe_core::metrics::{score_output, ExecutedPlan, ScoreOptions};
use mpe_core::plan::{lint_plan, parse_plan_str, validate_plan, Diagnostic};
use mpe_core::synth::synthetic_requests;
use mpe_core::Plan;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{FileConfig, RunConfig};
use crate::request::{load_request, request_files, RequestFile};
use crate::{exit_code, Cli, Command, SftMode, EXIT_DOMAIN, EXIT_OK};

pub fn run(cli: Cli) -> Result<u8> {
    let file = match &cli.global.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let cfg = RunConfig::resolve(file, cli.global.overrides())?;
    let out = cli.global.out.as_deref();
    match &cli.command {
        Command::Validate { plan } => validate(&cfg, plan),
        Command::Lint { plan } => lint(&cfg, plan),
        Command::Run { plan } => run_plan(&cfg, plan, out),
        Command::Curate { requests } => curate(&cfg, requests, out),
        Command::Score { plan, trace } => score(&cfg, plan, trace, out),
        Command::Stats { corpus } => stats(corpus, out),
        Command::Sft { corpus, mode } => sft(&cfg, corpus, *mode, out),
        Command::Pairs {
            corpus,
            allow_failed_losers,
        } => pairs(&cfg, corpus, *allow_failed_losers, out),
        Command::Synth { per_task } => synth(&cfg, *per_task, out),
    }
}

fn read_plan(path: &Path) -> Result<Plan> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_plan_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Writes to `out`, or standard output when no path is given.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn diagnostic_line(d: &Diagnostic) -> String {
    format!("{}\t{}\t{}", d.kind, d.step, d.message)
}

fn print_diagnostics(diagnostics: &[Diagnostic]) {
    let mut stdout = io::stdout().lock();
    for d in diagnostics {
        let _ = writeln!(stdout, "{}", diagnostic_line(d));
    }
}

fn validate(cfg: &RunConfig, path: &Path) -> Result<u8> {
    let plan = read_plan(path)?;
    let diagnostics = validate_plan(&plan, &cfg.library);
    print_diagnostics(&diagnostics);
    Ok(if diagnostics.is_empty() { EXIT_OK } else { EXIT_DOMAIN })
}

fn lint(cfg: &RunConfig, path: &Path) -> Result<u8> {
    let plan = read_plan(path)?;
    let diagnostics = validate_plan(&plan, &cfg.library);
    if !diagnostics.is_empty() {
        print_diagnostics(&diagnostics);
        return Ok(EXIT_DOMAIN);
    }
    let mut stdout = io::stdout().lock();
    for a in lint_plan(&plan, &cfg.library) {
        let step = a.step.map_or("-".to_string(), |s| s.to_string());
        writeln!(stdout, "{}\t{step}\t{}", a.rule, a.message)?;
    }
    Ok(EXIT_OK)
}

fn workspace_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.workspace
        .as_deref()
        .ok_or_else(|| anyhow!("--workspace is required for this command"))
}

fn run_plan(cfg: &RunConfig, path: &Path, out: Option<&Path>) -> Result<u8> {
    let plan = read_plan(path)?;
    let diagnostics = validate_plan(&plan, &cfg.library);
    if !diagnostics.is_empty() {
        print_diagnostics(&diagnostics);
        return Ok(EXIT_DOMAIN);
    }
    let ws = Workspace::open(workspace_dir(cfg)?)?;
    let backend = cfg.backend();
    let executed = if cfg.parallel {
        execute_plan_parallel(&plan, &cfg.library, backend.as_ref(), &ws)
    } else {
        execute_plan(&plan, &cfg.library, backend.as_ref(), &ws)
    };
    match executed {
        Ok(trace) => {
            emit(out, &pretty(&trace))?;
            Ok(if trace.overall_success { EXIT_OK } else { EXIT_DOMAIN })
        }
        Err(e) => {
            emit(out, &pretty(e.trace()))?;
            Err(e.into())
        }
    }
}

fn score(cfg: &RunConfig, plan_path: &Path, trace_path: &Path, out: Option<&Path>) -> Result<u8> {
    let plan = read_plan(plan_path)?;
    let text = fs::read_to_string(trace_path).with_context(|| format!("reading {}", trace_path.display()))?;
    let trace: ExecutionTrace =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", trace_path.display()))?;
    if trace.plan_id != plan.plan_id() {
        bail!("{} was not produced by {}", trace_path.display(), plan_path.display());
    }
    let ws = Workspace::open(workspace_dir(cfg)?)?;
    let backend = cfg.backend();
    let scorer = cfg.scorer();
    let run = ExecutedPlan {
        plan: &plan,
        trace: &trace,
        lib: &cfg.library,
        backend: backend.as_ref(),
        workspace: &ws,
    };
    let options = ScoreOptions {
        score_failed_plans: cfg.score_failed_plans,
    };
    let report = score_output(&run, scorer.as_ref(), options)?;
    emit(out, &pretty(&report))?;
    Ok(EXIT_OK)
}

fn curate_one(cfg: &RunConfig, path: &Path) -> Result<PlanLineage> {
    let request = load_request(path)?;
    let generator = cfg.generator();
    let critic = cfg.critic();
    let backend = cfg.backend();
    let scorer = cfg.scorer();
    let curator = Curator {
        lib: &cfg.library,
        generator: generator.as_ref(),
        critic: critic.as_ref(),
        backend: backend.as_ref(),
        scorer: scorer.as_ref(),
        options: CurateOptions {
            retries: cfg.retries,
            execute_plan1: cfg.exec_plan1,
            score_failed_plans: cfg.score_failed_plans,
            parallel: cfg.parallel,
            workspace_root: cfg.workspace.clone(),
        },
    };
    curator
        .curate(&request)
        .with_context(|| format!("curating {}", path.display()))
}

fn curate(cfg: &RunConfig, input: &Path, out: Option<&Path>) -> Result<u8> {
    if !input.is_dir() {
        let lineage = curate_one(cfg, input)?;
        let text = pretty(&lineage.to_value());
        match out {
            Some(dir) if dir.is_dir() => emit(Some(&dir.join(format!("{}.json", lineage.request_id))), &text)?,
            other => emit(other, &text)?,
        }
        return Ok(EXIT_OK);
    }

    let out = out.ok_or_else(|| anyhow!("--out <dir> is required when curating a directory"))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let files = request_files(input)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .context("starting worker pool")?;
    let results: Vec<(PathBuf, Result<()>)> = pool.install(|| {
        files
            .par_iter()
            .map(|path| {
                let written = curate_one(cfg, path).and_then(|l| {
                    let target = out.join(format!("{}.json", l.request_id));
                    emit(Some(&target), &pretty(&l.to_value()))
                });
                (path.clone(), written)
            })
            .collect()
    });

    let mut first_error = None;
    let mut done = 0;
    for (path, result) in results {
        match result {
            Ok(()) => done += 1,
            Err(e) => {
                log::error!("{}: {e:#}", path.display());
                first_error.get_or_insert(e);
            }
        }
    }
    log::info!("curated {done} of {} requests", files.len());
    match first_error {
        Some(e) => Err(e),
        None => Ok(EXIT_OK),
    }
}

const STEP_ROWS: [&str; 3] = ["Plan 1", "Plan 2", "Plan 3"];
const SUCCESS_ROWS: [&str; 2] = ["Plan 2", "Plan 3"];

fn stats(corpus_dir: &Path, out: Option<&Path>) -> Result<u8> {
    let corpus = LineageCorpus::load_dir(corpus_dir)?;
    let (steps, success) = if corpus.is_empty() {
        log::warn!("{} holds no lineages", corpus_dir.display());
        (StatTable::blank(&STEP_ROWS, 1), StatTable::blank(&SUCCESS_ROWS, 0))
    } else {
        (avg_steps(&corpus)?, success_table(&corpus)?)
    };
    match out {
        Some(dir) => {
            write_atomic(&dir.join("stats_steps.csv"), steps.render(',').as_bytes())?;
            write_atomic(&dir.join("stats_success.csv"), success.render(',').as_bytes())?;
            let manifest = dataset::manifest("stats", corpus.len(), None, None, &corpus);
            write_atomic(&dir.join("stats.manifest.json"), pretty(&manifest).as_bytes())?;
        }
        None => emit(None, &format!("{}\n{}", steps.render(','), success.render(',')))?,
    }
    Ok(EXIT_OK)
}

fn dataset_out(out: Option<&Path>, default: &str) -> PathBuf {
    out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(default))
}

fn sft(cfg: &RunConfig, corpus_dir: &Path, mode: SftMode, out: Option<&Path>) -> Result<u8> {
    let corpus = LineageCorpus::load_dir(corpus_dir)?;
    let (kind, records) = match mode {
        SftMode::All => ("sft_all", build_sft_all(&corpus, cfg.seed)),
        SftMode::Success => ("sft_success", build_sft_success(&corpus, cfg.seed)),
    };
    let path = dataset_out(out, &format!("{kind}.jsonl"));
    let manifest = dataset::manifest(kind, records.len(), Some(cfg.seed), None, &corpus);
    dataset::write_dataset(&path, &records, &manifest)?;
    log::info!("{} records -> {}", records.len(), path.display());
    Ok(EXIT_OK)
}

fn pairs(cfg: &RunConfig, corpus_dir: &Path, allow_failed_losers: bool, out: Option<&Path>) -> Result<u8> {
    let corpus = LineageCorpus::load_dir(corpus_dir)?;
    let pairs = build_dpo_pairs(&corpus, cfg.epsilon, allow_failed_losers);
    let path = dataset_out(out, "pairs.jsonl");
    let manifest = dataset::manifest("pairs", pairs.len(), None, Some(cfg.epsilon), &corpus);
    dataset::write_dataset(&path, &pairs, &manifest)?;
    log::info!("{} pairs -> {}", pairs.len(), path.display());
    Ok(EXIT_OK)
}

fn synth(cfg: &RunConfig, per_task: usize, out: Option<&Path>) -> Result<u8> {
    let dir = out.ok_or_else(|| anyhow!("--out <dir> is required"))?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for r in synthetic_requests(per_task, cfg.seed) {
        for m in &r.materials {
            write_atomic(&dir.join(m.artifact.filename()), &m.bytes)?;
        }
        let file = RequestFile {
            request_id: r.request_id.clone(),
            query: r.query.clone(),
            task_type: r.task_type,
            materials: r.materials.iter().map(|m| m.artifact.filename().to_string()).collect(),
        };
        write_atomic(&dir.join(format!("{}.json", r.request_id)), pretty(&file).as_bytes())?;
    }
    Ok(EXIT_OK)
}

/// Runs the CLI and maps failures to exit codes, logging the error chain.
pub fn main_with(cli: Cli) -> u8 {
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e:#}");
            code
        }
    }
}
