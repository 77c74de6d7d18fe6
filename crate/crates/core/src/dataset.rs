//! Corpus statistics and training-set construction from plan lineages.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::correction::{LineageError, PlanLineage};
use crate::digest::sha256_hex;
use crate::exec::ExecutionTrace;
use crate::metrics::MetricReport;
use crate::plan::{serialize_plan, Plan, TaskType};

pub const DEFAULT_EPSILON: f64 = 0.05;
pub const DEFAULT_SHUFFLE_SEED: u64 = 0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("duplicate request_id {0}")]
    DuplicateRequest(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Lineage {
        path: PathBuf,
        #[source]
        source: LineageError,
    },
    #[error("empty corpus")]
    EmptyCorpus,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LineageCorpus {
    lineages: Vec<PlanLineage>,
}

impl LineageCorpus {
    pub fn new(lineages: Vec<PlanLineage>) -> Result<Self, DatasetError> {
        let mut seen = BTreeSet::new();
        for l in &lineages {
            if !seen.insert(l.request_id.as_str()) {
                return Err(DatasetError::DuplicateRequest(l.request_id.clone()));
            }
        }
        Ok(Self { lineages })
    }

    /// Reads every `*.json` lineage file in `dir`, ordered by request_id.
    pub fn load_dir(dir: &Path) -> Result<Self, DatasetError> {
        let mut paths = Vec::new();
        for entry in fs::read_dir(dir).map_err(io_err(dir))? {
            let path = entry.map_err(io_err(dir))?.path();
            if path.extension().is_some_and(|e| e == "json") && path.is_file() {
                paths.push(path);
            }
        }
        paths.sort();
        let mut lineages = paths
            .par_iter()
            .map(|path| {
                let text = fs::read_to_string(path).map_err(io_err(path))?;
                let value: Value = serde_json::from_str(&text).map_err(|e| DatasetError::Malformed {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
                PlanLineage::from_value(&value).map_err(|source| DatasetError::Lineage {
                    path: path.clone(),
                    source,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        lineages.sort_by(|a, b| a.request_id.cmp(&b.request_id));
        Self::new(lineages)
    }

    pub fn lineages(&self) -> &[PlanLineage] {
        &self.lineages
    }

    pub fn len(&self) -> usize {
        self.lineages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lineages.is_empty()
    }

    /// sha256 over the canonical, timing-free lineage documents.
    pub fn digest(&self) -> String {
        let mut all = String::new();
        for l in &self.lineages {
            let mut l = l.clone();
            l.strip_timing();
            all.push_str(&l.to_value().to_string());
            all.push('\n');
        }
        sha256_hex(all.as_bytes())
    }
}

/// Rows of plan versions (or models) against task-type columns.
#[derive(Debug, Clone, PartialEq)]
pub struct StatTable {
    pub rows: Vec<String>,
    pub columns: Vec<TaskType>,
    /// `cells[row][column]`, `None` where no lineage contributes.
    pub cells: Vec<Vec<Option<f64>>>,
    pub decimals: usize,
}

impl StatTable {
    /// A table with every cell absent.
    pub fn blank(rows: &[&str], decimals: usize) -> Self {
        table(rows.iter().map(|r| r.to_string()).collect(), decimals, |_, _| None)
    }

    pub fn cell(&self, row: &str, task: TaskType) -> Option<f64> {
        let r = self.rows.iter().position(|x| x == row)?;
        let c = self.columns.iter().position(|&t| t == task)?;
        self.cells[r][c]
    }

    pub fn render(&self, delimiter: char) -> String {
        let mut out = String::from("plan");
        for c in &self.columns {
            out.push(delimiter);
            out.push_str(c.code());
        }
        out.push('\n');
        for (name, row) in self.rows.iter().zip(&self.cells) {
            out.push_str(name);
            for cell in row {
                out.push(delimiter);
                match cell {
                    Some(v) => write!(out, "{v:.*}", self.decimals).expect("string write"),
                    None => out.push('-'),
                }
            }
            out.push('\n');
        }
        out
    }
}

fn table(rows: Vec<String>, decimals: usize, cell: impl Fn(usize, TaskType) -> Option<f64>) -> StatTable {
    let cells = (0..rows.len())
        .map(|r| TaskType::ALL.iter().map(|&t| cell(r, t)).collect())
        .collect();
    StatTable {
        rows,
        columns: TaskType::ALL.to_vec(),
        cells,
        decimals,
    }
}

/// Mean step count per task type and plan version.
pub fn avg_steps(corpus: &LineageCorpus) -> Result<StatTable, DatasetError> {
    if corpus.is_empty() {
        return Err(DatasetError::EmptyCorpus);
    }
    let rows = (1..=3).map(|v| format!("Plan {v}")).collect();
    Ok(table(rows, 1, |version, task| {
        let counts: Vec<usize> = corpus
            .lineages
            .iter()
            .filter(|l| l.task_type == task)
            .map(|l| l.plans()[version].steps.len())
            .collect();
        (!counts.is_empty()).then(|| counts.iter().sum::<usize>() as f64 / counts.len() as f64)
    }))
}

/// Percentage of successful executions per task type for each executed plan
/// version. Plan 1 appears only when some lineage executed it.
pub fn success_table(corpus: &LineageCorpus) -> Result<StatTable, DatasetError> {
    if corpus.is_empty() {
        return Err(DatasetError::EmptyCorpus);
    }
    let trace = |l: &PlanLineage, v: usize| -> Option<bool> {
        match v {
            1 => l.trace1.as_ref().map(|t| t.overall_success),
            2 => Some(l.trace2.overall_success),
            _ => Some(l.trace3.overall_success),
        }
    };
    let versions: Vec<usize> = if corpus.lineages.iter().any(|l| l.trace1.is_some()) {
        vec![1, 2, 3]
    } else {
        vec![2, 3]
    };
    let rows = versions.iter().map(|v| format!("Plan {v}")).collect();
    Ok(table(rows, 0, |r, task| {
        let outcomes: Vec<bool> = corpus
            .lineages
            .iter()
            .filter(|l| l.task_type == task)
            .filter_map(|l| trace(l, versions[r]))
            .collect();
        let ok = outcomes.iter().filter(|&&s| s).count();
        (!outcomes.is_empty()).then(|| 100.0 * ok as f64 / outcomes.len() as f64)
    }))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub query: String,
    pub materials: Vec<String>,
    pub library_digest: String,
}

impl Prompt {
    fn of(l: &PlanLineage) -> Self {
        Self {
            query: l.query.clone(),
            materials: l.materials.clone(),
            library_digest: l.library_digest.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub request_id: String,
    pub plan_version: u8,
    pub prompt: Prompt,
    pub target: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub request_id: String,
    pub prompt: Prompt,
    pub winner: Value,
    pub loser: Value,
    pub margin: f64,
}

/// Plan version, plan, trace and report of each stage in a lineage.
pub fn stages(l: &PlanLineage) -> [(u8, &Plan, Option<&ExecutionTrace>, Option<&MetricReport>); 3] {
    [
        (1, &l.plan1, l.trace1.as_ref(), l.report1.as_ref()),
        (2, &l.plan2, Some(&l.trace2), l.report2.as_ref()),
        (3, &l.plan3, Some(&l.trace3), l.report3.as_ref()),
    ]
}

fn record(l: &PlanLineage, version: u8, plan: &Plan) -> SftRecord {
    SftRecord {
        request_id: l.request_id.clone(),
        plan_version: version,
        prompt: Prompt::of(l),
        target: serialize_plan(plan),
    }
}

fn shuffled<T>(mut records: Vec<T>, seed: u64) -> Vec<T> {
    records.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    records
}

/// Every plan of every lineage.
pub fn build_sft_all(corpus: &LineageCorpus, seed: u64) -> Vec<SftRecord> {
    let records = corpus
        .lineages
        .par_iter()
        .flat_map_iter(|l| stages(l).map(|(v, p, _, _)| record(l, v, p)))
        .collect();
    shuffled(records, seed)
}

/// Only plans whose execution succeeded.
pub fn build_sft_success(corpus: &LineageCorpus, seed: u64) -> Vec<SftRecord> {
    let records = corpus
        .lineages
        .par_iter()
        .flat_map_iter(|l| {
            stages(l)
                .into_iter()
                .filter(|(_, _, t, _)| t.is_some_and(|t| t.overall_success))
                .map(|(v, p, _, _)| record(l, v, p))
        })
        .collect();
    shuffled(records, seed)
}

/// All within-lineage ordered pairs whose aggregate gap is at least
/// `epsilon`. Losers must have succeeded too unless `allow_failed_losers`.
pub fn build_dpo_pairs(corpus: &LineageCorpus, epsilon: f64, allow_failed_losers: bool) -> Vec<PreferencePair> {
    corpus
        .lineages
        .par_iter()
        .flat_map_iter(|l| {
            let scored: Vec<_> = stages(l)
                .into_iter()
                .filter_map(|(v, p, t, r)| Some((v, p, t?.overall_success, r?.aggregate)))
                .collect();
            let mut pairs = Vec::new();
            for &(_, wp, wok, wa) in &scored {
                for &(_, lp, lok, la) in &scored {
                    let margin = wa - la;
                    if wok && (lok || allow_failed_losers) && margin >= epsilon && margin > 0.0 {
                        pairs.push(PreferencePair {
                            request_id: l.request_id.clone(),
                            prompt: Prompt::of(l),
                            winner: serialize_plan(wp),
                            loser: serialize_plan(lp),
                            margin,
                        });
                    }
                }
            }
            pairs
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub count: usize,
    pub empty: bool,
    pub seed: Option<u64>,
    pub epsilon: Option<f64>,
    pub corpus_digest: String,
}

/// Writes `records` as one JSON object per line and a sidecar
/// `<name>.manifest.json`. Both files are replaced atomically.
pub fn write_dataset<T: Serialize>(path: &Path, records: &[T], manifest: &Manifest) -> Result<(), DatasetError> {
    let mut body = String::new();
    for r in records {
        body.push_str(&serde_json::to_string(r).expect("record serializes"));
        body.push('\n');
    }
    write_atomic(path, body.as_bytes())?;
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes") + "\n";
    write_atomic(&manifest_path(path), text.as_bytes())
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| DatasetError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

pub fn manifest(kind: &str, count: usize, seed: Option<u64>, epsilon: Option<f64>, corpus: &LineageCorpus) -> Manifest {
    Manifest {
        kind: kind.to_string(),
        count,
        empty: count == 0,
        seed,
        epsilon,
        corpus_digest: corpus.digest(),
    }
}
