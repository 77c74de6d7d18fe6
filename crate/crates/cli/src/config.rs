use std::env;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use mpe_core::correction::{CriticClient, RuleCritic};
use mpe_core::dataset::DEFAULT_EPSILON;
use mpe_core::exec::{FailureModel, MockBackend, ToolBackend};
use mpe_core::metrics::{Scorer, StubScorer};
use mpe_core::registry::load_library;
use mpe_core::remote::{RemoteBackend, RemoteCritic, RemoteScorer, DEFAULT_TIMEOUT};
use mpe_core::synth::TemplateGenerator;
use mpe_core::ToolLibrary;
use serde::Deserialize;

pub const TOOL_URL_ENV: &str = "MPE_REMOTE_TOOL_URL";
pub const CRITIC_URL_ENV: &str = "MPE_REMOTE_CRITIC_URL";
pub const SCORER_URL_ENV: &str = "MPE_REMOTE_SCORER_URL";

/// Built-in implementation or a remote endpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selector {
    Builtin,
    Remote(String),
}

impl Selector {
    /// Accepts the built-in name, `remote` (URL from `env_var`) or a URL.
    pub fn parse(value: &str, builtin: &str, env_var: &str) -> Result<Self> {
        if value == builtin {
            Ok(Self::Builtin)
        } else if value == "remote" {
            match env::var(env_var) {
                Ok(url) if !url.is_empty() => Ok(Self::Remote(url)),
                _ => bail!("`remote` selected but {env_var} is not set"),
            }
        } else if value.starts_with("http://") || value.starts_with("https://") {
            Ok(Self::Remote(value.to_string()))
        } else {
            bail!("unknown selector `{value}`: expected `{builtin}`, `remote` or an http(s) URL")
        }
    }
}

/// Keys accepted in a `--config` TOML file. Flags override them.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub library: Option<PathBuf>,
    pub workspace: Option<PathBuf>,
    pub backend: Option<String>,
    pub critic: Option<String>,
    pub scorer: Option<String>,
    pub generator: Option<String>,
    pub seed: Option<u64>,
    pub fail_prob: Option<f64>,
    pub epsilon: Option<f64>,
    pub exec_plan1: Option<bool>,
    pub score_failed_plans: Option<bool>,
    pub retries: Option<usize>,
    pub parallel: Option<bool>,
    pub jobs: Option<usize>,
    pub timeout_secs: Option<u64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Flag values before merging with the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub library: Option<PathBuf>,
    pub workspace: Option<PathBuf>,
    pub backend: Option<String>,
    pub critic: Option<String>,
    pub scorer: Option<String>,
    pub generator: Option<String>,
    pub seed: Option<u64>,
    pub fail_prob: Option<f64>,
    pub epsilon: Option<f64>,
    pub exec_plan1: bool,
    pub score_failed_plans: bool,
    pub retries: Option<usize>,
    pub parallel: bool,
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub library_path: Option<PathBuf>,
    pub library: ToolLibrary,
    pub workspace: Option<PathBuf>,
    pub backend: Selector,
    pub critic: Selector,
    pub scorer: Selector,
    pub generator: Selector,
    pub seed: u64,
    pub fail_prob: f64,
    pub epsilon: f64,
    pub exec_plan1: bool,
    pub score_failed_plans: bool,
    pub retries: usize,
    pub parallel: bool,
    pub jobs: usize,
    pub timeout: Duration,
}

impl RunConfig {
    pub fn resolve(file: FileConfig, flags: Overrides) -> Result<Self> {
        let library_path = flags.library.or(file.library);
        let library = match &library_path {
            None => ToolLibrary::builtin(),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading library {}", p.display()))?;
                load_library(&text).with_context(|| format!("loading library {}", p.display()))?
            }
        };
        let pick = |flag: Option<String>, file: Option<String>, builtin: &str, env_var: &str| {
            Selector::parse(&flag.or(file).unwrap_or_else(|| builtin.to_string()), builtin, env_var)
        };
        let fail_prob = flags.fail_prob.or(file.fail_prob).unwrap_or(0.0);
        if !(0.0..=1.0).contains(&fail_prob) {
            bail!("failure probability must lie in [0, 1], got {fail_prob}");
        }
        let epsilon = flags.epsilon.or(file.epsilon).unwrap_or(DEFAULT_EPSILON);
        if epsilon.is_nan() || epsilon <= 0.0 {
            bail!("epsilon must be positive, got {epsilon}");
        }
        Ok(Self {
            library_path,
            library,
            workspace: flags.workspace.or(file.workspace),
            backend: pick(flags.backend, file.backend, "mock", TOOL_URL_ENV)?,
            critic: pick(flags.critic, file.critic, "rule", CRITIC_URL_ENV)?,
            scorer: pick(flags.scorer, file.scorer, "stub", SCORER_URL_ENV)?,
            generator: pick(flags.generator, file.generator, "template", CRITIC_URL_ENV)?,
            seed: flags.seed.or(file.seed).unwrap_or(0),
            fail_prob,
            epsilon,
            exec_plan1: flags.exec_plan1 || file.exec_plan1.unwrap_or(false),
            score_failed_plans: flags.score_failed_plans || file.score_failed_plans.unwrap_or(false),
            retries: flags.retries.or(file.retries).unwrap_or(mpe_core::correction::DEFAULT_RETRIES),
            parallel: flags.parallel || file.parallel.unwrap_or(false),
            jobs: flags.jobs.or(file.jobs).unwrap_or(4).max(1),
            timeout: file.timeout_secs.map(Duration::from_secs).unwrap_or(DEFAULT_TIMEOUT),
        })
    }

    pub fn backend(&self) -> Box<dyn ToolBackend> {
        match &self.backend {
            Selector::Builtin => Box::new(MockBackend::new(FailureModel::new(self.fail_prob, self.seed))),
            Selector::Remote(url) => Box::new(RemoteBackend::new(url.clone(), self.timeout)),
        }
    }

    pub fn critic(&self) -> Box<dyn CriticClient> {
        match &self.critic {
            Selector::Builtin => Box::new(RuleCritic::default()),
            Selector::Remote(url) => Box::new(RemoteCritic::new(url.clone(), self.timeout)),
        }
    }

    pub fn generator(&self) -> Box<dyn CriticClient> {
        match &self.generator {
            Selector::Builtin => Box::new(TemplateGenerator::new(self.seed)),
            Selector::Remote(url) => Box::new(RemoteCritic::new(url.clone(), self.timeout)),
        }
    }

    pub fn scorer(&self) -> Box<dyn Scorer> {
        match &self.scorer {
            Selector::Builtin => Box::new(StubScorer::new(self.seed)),
            Selector::Remote(url) => Box::new(RemoteScorer::new(url.clone(), self.timeout)),
        }
    }
}
