//! Batch front end: validate, execute, curate and turn lineages into datasets.

pub mod commands;
pub mod config;
pub mod request;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mpe_core::correction::{CorrectionError, CriticError, LineageError};
use mpe_core::dataset::DatasetError;
use mpe_core::exec::{ExecutionError, WorkspaceError};
use mpe_core::metrics::{MetricsError, ScorerError};
use mpe_core::registry::RegistryError;
use mpe_core::PlanError;

use crate::config::Overrides;
use crate::request::RequestError;

pub const EXIT_OK: u8 = 0;
pub const EXIT_DOMAIN: u8 = 1;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_WORKSPACE: u8 = 3;
pub const EXIT_UPSTREAM: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "mpe", version, about = "Typed multimedia generation plans")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default, Clone)]
pub struct GlobalArgs {
    /// TOML file with defaults for every option below
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Tool library document (defaults to the bundled library)
    #[arg(long, global = true)]
    pub library: Option<PathBuf>,
    #[arg(long, global = true)]
    pub workspace: Option<PathBuf>,
    /// `mock`, `remote` or a URL
    #[arg(long, global = true)]
    pub backend: Option<String>,
    /// `rule`, `remote` or a URL
    #[arg(long, global = true)]
    pub critic: Option<String>,
    /// `stub`, `remote` or a URL
    #[arg(long, global = true)]
    pub scorer: Option<String>,
    /// `template`, `remote` or a URL
    #[arg(long, global = true)]
    pub generator: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Per-step failure probability of the mock backend
    #[arg(long, global = true)]
    pub fail_prob: Option<f64>,
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    /// Also execute and score the generator's first plan
    #[arg(long, global = true)]
    pub exec_plan1: bool,
    #[arg(long, global = true)]
    pub score_failed_plans: bool,
    #[arg(long, global = true)]
    pub retries: Option<usize>,
    /// Run independent steps concurrently
    #[arg(long, global = true)]
    pub parallel: bool,
    /// Worker threads when curating a directory
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

impl GlobalArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            library: self.library.clone(),
            workspace: self.workspace.clone(),
            backend: self.backend.clone(),
            critic: self.critic.clone(),
            scorer: self.scorer.clone(),
            generator: self.generator.clone(),
            seed: self.seed,
            fail_prob: self.fail_prob,
            epsilon: self.epsilon,
            exec_plan1: self.exec_plan1,
            score_failed_plans: self.score_failed_plans,
            retries: self.retries,
            parallel: self.parallel,
            jobs: self.jobs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SftMode {
    All,
    Success,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Type-check a plan
    Validate { plan: PathBuf },
    /// Type-check a plan and print completeness advisories
    Lint { plan: PathBuf },
    /// Execute a plan inside `--workspace`
    Run { plan: PathBuf },
    /// Curate one request file, or every request file in a directory
    Curate { requests: PathBuf },
    /// Score an executed plan from its trace and workspace
    Score {
        plan: PathBuf,
        #[arg(long)]
        trace: PathBuf,
    },
    /// Average-step and success-rate tables for a lineage corpus
    Stats { corpus: PathBuf },
    /// Supervised fine-tuning records
    Sft {
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        mode: SftMode,
    },
    /// Preference pairs
    Pairs {
        corpus: PathBuf,
        #[arg(long)]
        allow_failed_losers: bool,
    },
    /// Write synthetic request files with placeholder materials
    Synth {
        #[arg(long, default_value_t = 10)]
        per_task: usize,
    },
}

/// Maps an error to the exit-code contract by its first recognised cause.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CorrectionError>() {
            return match e {
                CorrectionError::Critic(c) => critic_code(c),
                CorrectionError::GeneratorOutput(_) => EXIT_DOMAIN,
                CorrectionError::Workspace(_) => EXIT_WORKSPACE,
                CorrectionError::Metrics(m) => metrics_code(m),
            };
        }
        if let Some(e) = cause.downcast_ref::<CriticError>() {
            return critic_code(e);
        }
        if let Some(e) = cause.downcast_ref::<MetricsError>() {
            return metrics_code(e);
        }
        if cause.is::<ScorerError>() {
            return EXIT_UPSTREAM;
        }
        if cause.is::<WorkspaceError>() || cause.is::<ExecutionError>() {
            return EXIT_WORKSPACE;
        }
        if let Some(e) = cause.downcast_ref::<RequestError>() {
            return match e {
                RequestError::MissingMaterial { .. } => EXIT_WORKSPACE,
                _ => EXIT_INPUT,
            };
        }
        if cause.is::<PlanError>()
            || cause.is::<RegistryError>()
            || cause.is::<LineageError>()
            || cause.is::<DatasetError>()
            || cause.is::<serde_json::Error>()
            || cause.is::<toml::de::Error>()
            || cause.is::<std::io::Error>()
        {
            return EXIT_INPUT;
        }
    }
    EXIT_INPUT
}

fn critic_code(e: &CriticError) -> u8 {
    match e {
        CriticError::Unavailable(_) => EXIT_UPSTREAM,
        CriticError::Unsupported(_) => EXIT_DOMAIN,
    }
}

fn metrics_code(e: &MetricsError) -> u8 {
    match e {
        MetricsError::Scorer(_) => EXIT_UPSTREAM,
        MetricsError::MissingArtifact(_) => EXIT_WORKSPACE,
        _ => EXIT_DOMAIN,
    }
}
