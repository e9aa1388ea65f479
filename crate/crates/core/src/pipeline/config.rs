//! Run configuration, read from TOML. Relative paths resolve against the
//! directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::exec::chat::ChatConfig;
use crate::exec::Comparison;
use crate::meta_correction::TrainConfig;
use crate::reward_model::{fnv1a64, FeaturizerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub problems: PathBuf,
    pub run_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyConfig {
    /// Scripted candidates and completions from a JSON file.
    Mock { script: PathBuf },
    Chat {
        #[serde(flatten)]
        client: ChatConfig,
        /// Replaces the bundled few-shot example.
        #[serde(default)]
        few_shot: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SandboxConfig {
    /// Table-driven outcomes, no execution.
    Stub { table: PathBuf },
    /// External runner speaking the JSON-lines protocol.
    Process {
        runner: PathBuf,
        #[serde(default)]
        args: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerConfig {
    /// The trained hashed-feature scorer from the `train` stage.
    #[default]
    Linear,
    /// A live model answering `+`/`-`; scoring only, never trained.
    Generative {
        #[serde(flatten)]
        client: ChatConfig,
    },
}

fn default_k() -> usize {
    8
}

fn default_workers() -> usize {
    4
}

fn default_temperature() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Monte Carlo completions per partial solution.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Candidates per problem.
    #[serde(default = "default_k")]
    pub n: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Sampling temperature for generation and completion.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub comparison: Comparison,
    pub paths: Paths,
    pub policy: PolicyConfig,
    pub sandbox: SandboxConfig,
    #[serde(default)]
    pub scorer: ScorerConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub featurizer: FeaturizerConfig,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub n: Option<usize>,
    pub workers: Option<usize>,
    pub run_dir: Option<PathBuf>,
    pub problems: Option<PathBuf>,
    pub iterations: Option<usize>,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            PipelineError::Config(m) => PipelineError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.paths.problems);
        resolve(base, &mut self.paths.run_dir);
        match &mut self.policy {
            PolicyConfig::Mock { script } => resolve(base, script),
            PolicyConfig::Chat { few_shot: Some(p), .. } => resolve(base, p),
            PolicyConfig::Chat { .. } => {}
        }
        match &mut self.sandbox {
            SandboxConfig::Stub { table } => resolve(base, table),
            SandboxConfig::Process { runner, .. } => {
                if runner.components().count() > 1 {
                    resolve(base, runner);
                }
            }
        }
    }

    /// Command-line paths are taken relative to the working directory.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
            self.train.seed = v;
        }
        if let Some(v) = o.k {
            self.k = v;
        }
        if let Some(v) = o.n {
            self.n = v;
        }
        if let Some(v) = o.workers {
            self.workers = v;
        }
        if let Some(v) = &o.run_dir {
            self.paths.run_dir = v.clone();
        }
        if let Some(v) = &o.problems {
            self.paths.problems = v.clone();
        }
        if let Some(v) = o.iterations {
            self.train.iterations = v;
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad(format!("temperature {} must be a non-negative number", self.temperature));
        }
        if self.featurizer.dim < 2 {
            return bad(format!("featurizer.dim {} must be at least 2", self.featurizer.dim));
        }
        self.train.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        let must_exist = |what: &str, p: &Path| {
            if p.exists() {
                Ok(())
            } else {
                Err(PipelineError::Config(format!("{what} `{}` does not exist", p.display())))
            }
        };
        match &self.policy {
            PolicyConfig::Mock { script } => must_exist("policy.script", script)?,
            PolicyConfig::Chat { few_shot: Some(p), .. } => must_exist("policy.few_shot", p)?,
            PolicyConfig::Chat { .. } => {}
        }
        if let SandboxConfig::Stub { table } = &self.sandbox {
            must_exist("sandbox.table", table)?;
        }
        Ok(())
    }

    /// Short hash of everything that affects training output.
    pub fn train_hash(&self) -> String {
        let key = serde_json::json!({
            "train": self.train,
            "featurizer": self.featurizer,
            "k": self.k,
            "n": self.n,
        });
        format!("{:016x}", fnv1a64(key.to_string().as_bytes()))[..12].to_string()
    }

    pub fn train_dir(&self) -> PathBuf {
        self.paths.run_dir.join(format!("train-{}-s{}", self.train_hash(), self.train.seed))
    }
}
