//! Stage orchestration: ingest, generate, label, train, select, report.
//! Every stage reads and writes only under the run directory.

pub mod config;

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

pub use config::{Overrides, PolicyConfig, RunConfig, SandboxConfig, ScorerConfig};

use crate::exec::chat::{ChatClient, ChatPolicy, GenerativeScorer};
use crate::exec::{
    build_datasets, evaluate_final, ExecError, LabelOptions, MetaLabel, MockPolicy, NoisyLabel, PolicyAdapter,
    PolicyError, Problem, ProcessSandbox, Sandbox, SandboxError, StubSandbox, Trajectory,
};
use crate::meta_correction::{meta_loss, train, MetaDataset, MetaError, MetaRow, NoisyDataset, NoisyRow, RewardKey, TraceRecord};
use crate::records::{read_json, read_jsonl, write_json, write_jsonl, RecordError};
use crate::reward_model::{featurize, FeaturizerConfig, LinearScorer, ModelError, ParamsSidecar, PrmParams, StepScorer};
use crate::selection::{best_of_n, summarize, CandidateSet, PassSummary, ReportRow, ScoreMode};
use crate::step_parser::{
    decompose_or_whole, prefix, validate_cof, whole_program, CofReport, ParseError, Provenance, SourceProgram, StepSequence,
};
use crate::synthetic::{planted_instance, PlantedSpec};
use crate::prompts;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Policy(String),
    #[error("{0}")]
    Sandbox(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Data(_) => 2,
            PipelineError::Policy(_) => 3,
            PipelineError::Sandbox(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Data(_) => "data",
            PipelineError::Policy(_) => "policy",
            PipelineError::Sandbox(_) => "sandbox",
        }
    }

    /// Machine-readable form printed on stderr by the CLI.
    pub fn record(&self) -> serde_json::Value {
        json!({
            "schema_version": crate::SCHEMA_VERSION,
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        })
    }
}

impl From<RecordError> for PipelineError {
    fn from(e: RecordError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<SandboxError> for PipelineError {
    fn from(e: SandboxError) -> Self {
        PipelineError::Sandbox(e.to_string())
    }
}

impl From<PolicyError> for PipelineError {
    fn from(e: PolicyError) -> Self {
        PipelineError::Policy(e.to_string())
    }
}

impl From<ExecError> for PipelineError {
    fn from(e: ExecError) -> Self {
        match e {
            ExecError::Sandbox(s) => s.into(),
            ExecError::Policy(p) => p.into(),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Backend(m) => PipelineError::Policy(m),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<MetaError> for PipelineError {
    fn from(e: MetaError) -> Self {
        match e {
            MetaError::InvalidConfig(m) => PipelineError::Config(m),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<ParseError> for PipelineError {
    fn from(e: ParseError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Run directory layout
// ---------------------------------------------------------------------------

pub const PROBLEMS_FILE: &str = "problems.jsonl";
pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const GENERATION_ERRORS_FILE: &str = "generation_errors.jsonl";
pub const NOISY_FILE: &str = "labels/noisy.jsonl";
pub const META_FILE: &str = "labels/meta.jsonl";
pub const COMPLETIONS_FILE: &str = "labels/completions.jsonl";
pub const PARAMS_FILE: &str = "params.bin";
pub const SIDECAR_FILE: &str = "params.json";
pub const TABLE_FILE: &str = "reward_table.jsonl";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const TRAIN_SUMMARY_FILE: &str = "summary.json";
pub const TRUTH_FILE: &str = "truth.jsonl";
pub const LOG_FILE: &str = "run.log";

pub fn selection_file(mode: ScoreMode) -> String {
    format!("selection_{}.jsonl", mode.as_str())
}

pub fn report_file(mode: ScoreMode) -> String {
    format!("report_{}.jsonl", mode.as_str())
}

pub fn report_summary_file(mode: ScoreMode) -> String {
    format!("report_{}_summary.json", mode.as_str())
}

/// Timestamped progress log. The only place wall-clock time is written.
#[derive(Debug)]
pub struct RunLog {
    file: Mutex<std::fs::File>,
}

impl RunLog {
    pub fn open(run_dir: &Path) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(run_dir).map_err(|e| PipelineError::Data(format!("{}: {e}", run_dir.display())))?;
        let path = run_dir.join(LOG_FILE);
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
        Ok(Self { file: Mutex::new(file) })
    }

    pub fn line(&self, stage: &str, message: &str) {
        let now = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).unwrap_or_default();
        let mut f = self.file.lock().expect("log lock");
        let _ = writeln!(f, "{}.{:03} [{stage}] {message}", now.as_secs(), now.subsec_millis());
    }
}

// ---------------------------------------------------------------------------
// Ingest
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq)]
pub enum IngestError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate problem_id `{id}` on lines {first} and {second}")]
    DuplicateId { id: String, first: usize, second: usize },
}

impl From<IngestError> for PipelineError {
    fn from(e: IngestError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

/// Problems in file order, indexed by id.
#[derive(Debug, Clone, Default)]
pub struct ProblemStore {
    pub problems: Vec<Problem>,
    index: HashMap<String, usize>,
}

impl ProblemStore {
    pub fn from_problems(problems: Vec<Problem>) -> Result<Self, IngestError> {
        let mut index = HashMap::with_capacity(problems.len());
        for (i, p) in problems.iter().enumerate() {
            if let Some(prev) = index.insert(p.problem_id.clone(), i) {
                return Err(IngestError::DuplicateId { id: p.problem_id.clone(), first: prev + 1, second: i + 1 });
            }
        }
        Ok(Self { problems, index })
    }

    pub fn len(&self) -> usize {
        self.problems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.problems.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Problem> {
        self.index.get(id).map(|&i| &self.problems[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn by_id(&self) -> HashMap<String, Problem> {
        self.problems.iter().map(|p| (p.problem_id.clone(), p.clone())).collect()
    }
}

/// Parses a problems file: one `{problem_id, statement, difficulty, tests}`
/// object per line. Blank lines are skipped; line numbers are 1-based.
pub fn ingest_str(text: &str) -> Result<ProblemStore, IngestError> {
    let mut problems = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let p: Problem = serde_json::from_str(line).map_err(|e| IngestError::Parse { line: line_no, message: e.to_string() })?;
        if p.problem_id.is_empty() {
            return Err(IngestError::Parse { line: line_no, message: "empty problem_id".into() });
        }
        if p.tests.is_empty() {
            return Err(IngestError::Parse { line: line_no, message: format!("problem `{}` has no tests", p.problem_id) });
        }
        for t in &p.tests {
            t.validate().map_err(|message| IngestError::Parse { line: line_no, message })?;
        }
        if let Some(&first) = seen.get(&p.problem_id) {
            return Err(IngestError::DuplicateId { id: p.problem_id, first, second: line_no });
        }
        seen.insert(p.problem_id.clone(), line_no);
        problems.push(p);
    }
    ProblemStore::from_problems(problems)
}

pub fn ingest(path: &Path) -> Result<ProblemStore, IngestError> {
    let text = std::fs::read_to_string(path).map_err(|e| IngestError::Io { path: path.display().to_string(), message: e.to_string() })?;
    ingest_str(&text)
}

pub fn load_problems(run_dir: &Path) -> Result<ProblemStore, PipelineError> {
    let problems: Vec<Problem> = read_jsonl(&run_dir.join(PROBLEMS_FILE))?;
    Ok(ProblemStore::from_problems(problems)?)
}

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

pub fn build_policy(cfg: &RunConfig) -> Result<Box<dyn PolicyAdapter>, PipelineError> {
    match &cfg.policy {
        PolicyConfig::Mock { script } => {
            let p = MockPolicy::load(script).map_err(|e| PipelineError::Config(e.to_string()))?;
            Ok(Box::new(p))
        }
        PolicyConfig::Chat { client, few_shot } => {
            let few_shot = match few_shot {
                Some(p) => std::fs::read_to_string(p).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?,
                None => prompts::DEFAULT_FEW_SHOT.to_string(),
            };
            let chat = ChatClient::from_env(client.clone())?;
            let chat = chat.with_log(&cfg.paths.run_dir.join("chat_log.jsonl")).map_err(|e| PipelineError::Data(e.to_string()))?;
            Ok(Box::new(ChatPolicy::new(chat, &few_shot)))
        }
    }
}

pub fn build_sandbox(cfg: &RunConfig) -> Result<Box<dyn Sandbox>, PipelineError> {
    match &cfg.sandbox {
        SandboxConfig::Stub { table } => Ok(Box::new(StubSandbox::load(table).map_err(|e| PipelineError::Config(e.to_string()))?)),
        SandboxConfig::Process { runner, args } => Ok(Box::new(ProcessSandbox::connect(runner, args.clone())?)),
    }
}

// ---------------------------------------------------------------------------
// Generate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub problem_id: String,
    pub trajectory_id: String,
    /// Candidate position within its problem.
    pub candidate: usize,
    /// Position in the run's trajectory list.
    pub index: u64,
    pub seed: u64,
    pub provenance: Provenance,
    pub text: String,
    pub steps: Vec<String>,
    /// Why the whole-program fallback was used, if it was.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
    pub cof: CofReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationError {
    pub problem_id: String,
    pub candidate: usize,
    pub seed: u64,
    pub message: String,
}

pub fn trajectory_id(problem_id: &str, candidate: usize) -> String {
    format!("{problem_id}/c{candidate}")
}

pub fn candidate_seed(base_seed: u64, problem_index: u64, j: u64) -> u64 {
    base_seed.wrapping_mul(1_000_000).wrapping_add(problem_index.wrapping_mul(1_000)).wrapping_add(j)
}

/// Splits a program into steps, falling back to one whole-program step.
pub fn decompose_candidate(program: &SourceProgram) -> (StepSequence, Option<String>) {
    match decompose_or_whole(program) {
        Ok((seq, err)) => (seq, err.map(|e| e.to_string())),
        Err(e) => (whole_program(program), Some(e.to_string())),
    }
}

#[derive(Debug, Default)]
pub struct GenerateOutput {
    pub trajectories: Vec<TrajectoryRecord>,
    pub errors: Vec<GenerationError>,
}

/// `n` candidates per problem. A policy failure on any candidate skips that
/// problem and is recorded; the run continues.
pub fn generate_trajectories(
    store: &ProblemStore,
    policy: &dyn PolicyAdapter,
    n: usize,
    seed: u64,
    temperature: f64,
    workers: usize,
) -> GenerateOutput {
    type Slot = Mutex<Option<Result<Vec<TrajectoryRecord>, GenerationError>>>;
    let slots: Vec<Slot> = store.problems.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, store.len().max(1)) {
            s.spawn(|| loop {
                let pi = next.fetch_add(1, Ordering::Relaxed);
                let Some(problem) = store.problems.get(pi) else { break };
                let mut out = Vec::with_capacity(n);
                let mut failed = None;
                for j in 0..n {
                    let cseed = candidate_seed(seed, pi as u64, j as u64);
                    match policy.generate(problem, temperature, cseed) {
                        Ok(program) => {
                            let (seq, fallback) = decompose_candidate(&program);
                            out.push(TrajectoryRecord {
                                problem_id: problem.problem_id.clone(),
                                trajectory_id: trajectory_id(&problem.problem_id, j),
                                candidate: j,
                                index: 0,
                                seed: cseed,
                                provenance: program.provenance,
                                steps: seq.step_names().iter().map(|s| s.to_string()).collect(),
                                cof: validate_cof(&seq),
                                text: program.text,
                                fallback,
                            });
                        }
                        Err(e) => {
                            failed = Some(GenerationError {
                                problem_id: problem.problem_id.clone(),
                                candidate: j,
                                seed: cseed,
                                message: e.to_string(),
                            });
                            break;
                        }
                    }
                }
                *slots[pi].lock().expect("slot lock") = Some(match failed {
                    Some(e) => Err(e),
                    None => Ok(out),
                });
            });
        }
    });
    let mut output = GenerateOutput::default();
    for slot in slots {
        match slot.into_inner().expect("slot lock").expect("slot filled") {
            Ok(trajs) => output.trajectories.extend(trajs),
            Err(e) => output.errors.push(e),
        }
    }
    for (i, t) in output.trajectories.iter_mut().enumerate() {
        t.index = i as u64;
    }
    output
}

/// Re-derives step sequences from stored trajectories and checks they still
/// decompose the way they did at generation time.
pub fn load_trajectories(run_dir: &Path) -> Result<Vec<(TrajectoryRecord, Trajectory)>, PipelineError> {
    let records: Vec<TrajectoryRecord> = read_jsonl(&run_dir.join(TRAJECTORIES_FILE))?;
    records
        .into_iter()
        .map(|r| {
            let program = SourceProgram::new(&r.problem_id, &r.text, r.provenance);
            let (seq, _) = decompose_candidate(&program);
            if seq.step_names() != r.steps.iter().map(String::as_str).collect::<Vec<_>>() {
                return Err(PipelineError::Data(format!("trajectory `{}` no longer decomposes into its recorded steps", r.trajectory_id)));
            }
            let t = Trajectory { trajectory_id: r.trajectory_id.clone(), index: r.index, seq };
            Ok((r, t))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Training data
// ---------------------------------------------------------------------------

/// Featurizes label rows using the problem statements and the stored
/// trajectory texts.
pub fn datasets_from_labels(
    noisy: &[NoisyLabel],
    meta: &[MetaLabel],
    trajectories: &[(TrajectoryRecord, Trajectory)],
    problems: &ProblemStore,
    featurizer: &FeaturizerConfig,
) -> Result<(NoisyDataset, MetaDataset), PipelineError> {
    let by_id: HashMap<&str, &Trajectory> = trajectories.iter().map(|(r, t)| (r.trajectory_id.as_str(), t)).collect();
    let lookup = |pid: &str, tid: &str| -> Result<(&Problem, &Trajectory), PipelineError> {
        let p = problems.get(pid).ok_or_else(|| PipelineError::Data(format!("label references unknown problem `{pid}`")))?;
        let t = by_id.get(tid).ok_or_else(|| PipelineError::Data(format!("label references unknown trajectory `{tid}`")))?;
        Ok((p, t))
    };
    let mut noisy_rows = Vec::with_capacity(noisy.len());
    for l in noisy {
        let (p, t) = lookup(&l.problem_id, &l.trajectory_id)?;
        let text = prefix(&t.seq, l.step_index)?.text;
        noisy_rows.push(NoisyRow {
            key: RewardKey::new(&l.problem_id, &l.trajectory_id, l.step_index),
            features: featurize(featurizer, &p.statement, &text)?,
            base: l.value,
        });
    }
    let mut meta_rows = Vec::with_capacity(meta.len());
    for l in meta {
        let (p, t) = lookup(&l.problem_id, &l.trajectory_id)?;
        let text = prefix(&t.seq, t.seq.len())?.text;
        meta_rows.push(MetaRow { features: featurize(featurizer, &p.statement, &text)?, reward: l.value });
    }
    Ok((NoisyDataset::new(noisy_rows)?, MetaDataset::new(meta_rows)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub problem_id: String,
    pub trajectory_id: String,
    pub step_index: usize,
    pub truth: f64,
    pub corrupted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub schema_version: u32,
    pub synthetic: bool,
    pub iterations: usize,
    pub eta: f64,
    pub eta_meta: f64,
    pub noisy_rows: usize,
    pub meta_rows: usize,
    pub initial_meta_loss: f64,
    pub final_meta_loss: f64,
    /// Present only when a planted truth is known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_truth_mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_truth_mse: Option<f64>,
}

fn full_meta_loss(params: &PrmParams, meta: &MetaDataset) -> Result<f64, PipelineError> {
    let rows: Vec<&MetaRow> = meta.rows.iter().collect();
    Ok(meta_loss(params, &rows)?)
}

fn mse(a: impl Iterator<Item = f64>, b: &[f64]) -> f64 {
    a.zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / b.len() as f64
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

/// Validates the problems file and copies it into the run directory.
pub fn run_ingest(cfg: &RunConfig, log: &RunLog) -> Result<serde_json::Value, PipelineError> {
    let store = ingest(&cfg.paths.problems)?;
    write_jsonl(&cfg.paths.run_dir.join(PROBLEMS_FILE), &store.problems)?;
    log.line("ingest", &format!("{} problems from {}", store.len(), cfg.paths.problems.display()));
    Ok(json!({"stage": "ingest", "problems": store.len()}))
}

pub fn run_generate(cfg: &RunConfig, log: &RunLog) -> Result<serde_json::Value, PipelineError> {
    let store = load_problems(&cfg.paths.run_dir)?;
    let policy = build_policy(cfg)?;
    let out = generate_trajectories(&store, policy.as_ref(), cfg.n, cfg.seed, cfg.temperature, cfg.workers);
    write_jsonl(&cfg.paths.run_dir.join(TRAJECTORIES_FILE), &out.trajectories)?;
    write_jsonl(&cfg.paths.run_dir.join(GENERATION_ERRORS_FILE), &out.errors)?;
    for e in &out.errors {
        log.line("generate", &format!("skipped `{}`: {}", e.problem_id, e.message));
    }
    let fallbacks = out.trajectories.iter().filter(|t| t.fallback.is_some()).count();
    log.line("generate", &format!("{} trajectories, {} skipped problems, {fallbacks} fallbacks", out.trajectories.len(), out.errors.len()));
    if out.trajectories.is_empty() && !out.errors.is_empty() {
        return Err(PipelineError::Policy(format!("every problem failed to generate; first error: {}", out.errors[0].message)));
    }
    Ok(json!({
        "stage": "generate",
        "trajectories": out.trajectories.len(),
        "skipped_problems": out.errors.len(),
        "fallbacks": fallbacks,
    }))
}

pub fn run_label(cfg: &RunConfig, log: &RunLog) -> Result<serde_json::Value, PipelineError> {
    let store = load_problems(&cfg.paths.run_dir)?;
    let trajs = load_trajectories(&cfg.paths.run_dir)?;
    let sandbox = build_sandbox(cfg)?;
    let policy = build_policy(cfg)?;
    let opts = LabelOptions {
        k: cfg.k,
        base_seed: cfg.seed,
        temperature: cfg.temperature,
        comparison: cfg.comparison,
        workers: cfg.workers,
    };
    let plain: Vec<Trajectory> = trajs.into_iter().map(|(_, t)| t).collect();
    let labels = build_datasets(&plain, &store.by_id(), policy.as_ref(), sandbox.as_ref(), &opts)?;
    let dir = &cfg.paths.run_dir;
    write_jsonl(&dir.join(NOISY_FILE), &labels.noisy)?;
    write_jsonl(&dir.join(META_FILE), &labels.meta)?;
    write_jsonl(&dir.join(COMPLETIONS_FILE), &labels.completions)?;
    log.line("label", &format!("{} noisy, {} meta, {} completions", labels.noisy.len(), labels.meta.len(), labels.completions.len()));
    Ok(json!({
        "stage": "label",
        "noisy": labels.noisy.len(),
        "meta": labels.meta.len(),
        "completions": labels.completions.len(),
    }))
}

/// Trains on the run's labels, or with `synthetic` on a planted instance
/// seeded by the run seed.
pub fn run_train(cfg: &RunConfig, synthetic: bool, log: &RunLog) -> Result<serde_json::Value, PipelineError> {
    let (noisy, meta, featurizer, truth) = if synthetic {
        let spec = PlantedSpec::default();
        let inst = planted_instance(&spec, cfg.seed);
        let truth: Vec<TruthRecord> = inst
            .noisy
            .rows
            .iter()
            .zip(&inst.truth)
            .zip(&inst.corrupted)
            .map(|((r, &truth), &corrupted)| TruthRecord {
                problem_id: r.key.problem_id.clone(),
                trajectory_id: r.key.trajectory_id.clone(),
                step_index: r.key.step_index,
                truth,
                corrupted,
            })
            .collect();
        (inst.noisy, inst.meta, FeaturizerConfig { dim: spec.dim }, Some(truth))
    } else {
        let dir = &cfg.paths.run_dir;
        let store = load_problems(dir)?;
        let trajs = load_trajectories(dir)?;
        let noisy_labels: Vec<NoisyLabel> = read_jsonl(&dir.join(NOISY_FILE))?;
        let meta_labels: Vec<MetaLabel> = read_jsonl(&dir.join(META_FILE))?;
        let (noisy, meta) = datasets_from_labels(&noisy_labels, &meta_labels, &trajs, &store, &cfg.featurizer)?;
        (noisy, meta, cfg.featurizer.clone(), None)
    };
    if noisy.is_empty() {
        return Err(PipelineError::Data("no noisy rows to train on (every trajectory has a single step?)".into()));
    }
    if meta.is_empty() {
        return Err(PipelineError::Data("no meta rows to train on".into()));
    }
    let init = PrmParams::zeros(featurizer.dim);
    let initial_meta_loss = full_meta_loss(&init, &meta)?;
    let outcome = train(&noisy, &meta, init, &cfg.train)?;
    let final_meta_loss = full_meta_loss(&outcome.params, &meta)?;

    let (initial_truth_mse, final_truth_mse) = match &truth {
        Some(t) => {
            let tv: Vec<f64> = t.iter().map(|r| r.truth).collect();
            let initial = mse(noisy.rows.iter().map(|r| r.base), &tv);
            let corrected: Vec<f64> = noisy.rows.iter().map(|r| outcome.table.corrected(&r.key)).collect::<Result<_, _>>()?;
            (Some(initial), Some(mse(corrected.into_iter(), &tv)))
        }
        None => (None, None),
    };

    let out = cfg.train_dir();
    std::fs::create_dir_all(&out).map_err(|e| PipelineError::Data(format!("{}: {e}", out.display())))?;
    outcome.params.save(&out.join(PARAMS_FILE)).map_err(|e| PipelineError::Data(format!("{}: {e}", out.display())))?;
    write_json(&out.join(SIDECAR_FILE), &ParamsSidecar::new(featurizer))?;
    write_jsonl(&out.join(TABLE_FILE), &outcome.table.records())?;
    write_jsonl(&out.join(TRACE_FILE), &outcome.trace.records)?;
    if let Some(t) = &truth {
        write_jsonl(&out.join(TRUTH_FILE), t)?;
    }
    let summary = TrainSummary {
        schema_version: crate::SCHEMA_VERSION,
        synthetic,
        iterations: cfg.train.iterations,
        eta: cfg.train.eta,
        eta_meta: cfg.train.eta_meta,
        noisy_rows: noisy.len(),
        meta_rows: meta.len(),
        initial_meta_loss,
        final_meta_loss,
        initial_truth_mse,
        final_truth_mse,
    };
    write_json(&out.join(TRAIN_SUMMARY_FILE), &summary)?;
    log.line("train", &format!("{} iterations -> {}", cfg.train.iterations, out.display()));
    Ok(json!({"stage": "train", "dir": out, "summary": summary}))
}

pub fn load_trace(train_dir: &Path) -> Result<Vec<TraceRecord>, PipelineError> {
    Ok(read_jsonl(&train_dir.join(TRACE_FILE))?)
}

pub fn load_linear_scorer(train_dir: &Path) -> Result<LinearScorer, PipelineError> {
    let params_path = train_dir.join(PARAMS_FILE);
    if !params_path.exists() {
        return Err(PipelineError::Data(format!("no trained model at {} (run `train` first)", params_path.display())));
    }
    let params = PrmParams::load(&params_path).map_err(|e| PipelineError::Data(format!("{}: {e}", params_path.display())))?;
    let sidecar: ParamsSidecar = read_json(&train_dir.join(SIDECAR_FILE))?;
    Ok(LinearScorer::new(params, sidecar.featurizer)?)
}

pub fn build_scorer(cfg: &RunConfig) -> Result<Box<dyn StepScorer + Send + Sync>, PipelineError> {
    match &cfg.scorer {
        ScorerConfig::Linear => Ok(Box::new(load_linear_scorer(&cfg.train_dir())?)),
        ScorerConfig::Generative { client } => Ok(Box::new(GenerativeScorer::new(ChatClient::from_env(client.clone())?))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub problem_id: String,
    pub mode: ScoreMode,
    pub chosen_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory_id: Option<String>,
    pub scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

/// Candidate sets in problem order; problems without trajectories get an
/// empty set.
pub fn candidate_sets(store: &ProblemStore, trajs: &[(TrajectoryRecord, Trajectory)]) -> Vec<(CandidateSet, Vec<String>)> {
    let mut grouped: BTreeMap<usize, Vec<&(TrajectoryRecord, Trajectory)>> = BTreeMap::new();
    for t in trajs {
        if let Some(pos) = store.position(&t.0.problem_id) {
            grouped.entry(pos).or_default().push(t);
        }
    }
    store
        .problems
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut members = grouped.remove(&i).unwrap_or_default();
            members.sort_by_key(|(r, _)| r.candidate);
            let ids = members.iter().map(|(r, _)| r.trajectory_id.clone()).collect();
            let set = CandidateSet { problem_id: p.problem_id.clone(), candidates: members.into_iter().map(|(_, t)| t.seq.clone()).collect() };
            (set, ids)
        })
        .collect()
}

pub fn select_all(store: &ProblemStore, sets: &[(CandidateSet, Vec<String>)], scorer: &dyn StepScorer, mode: ScoreMode) -> Vec<SelectionRow> {
    store
        .problems
        .iter()
        .zip(sets)
        .map(|(p, (set, ids))| match best_of_n(set, &p.statement, scorer, mode) {
            Ok(sel) => SelectionRow {
                problem_id: p.problem_id.clone(),
                mode,
                chosen_index: Some(sel.chosen_index),
                trajectory_id: Some(ids[sel.chosen_index].clone()),
                scores: sel.scores,
                diagnostic: None,
            },
            Err(e) => SelectionRow {
                problem_id: p.problem_id.clone(),
                mode,
                chosen_index: None,
                trajectory_id: None,
                scores: Vec::new(),
                diagnostic: Some(e.to_string()),
            },
        })
        .collect()
}

pub fn run_select(cfg: &RunConfig, mode: ScoreMode, log: &RunLog) -> Result<serde_json::Value, PipelineError> {
    let dir = &cfg.paths.run_dir;
    let store = load_problems(dir)?;
    let trajs = load_trajectories(dir)?;
    let scorer = build_scorer(cfg)?;
    let sets = candidate_sets(&store, &trajs);
    let rows = select_all(&store, &sets, scorer.as_ref(), mode);
    let failed = rows.iter().filter(|r| r.diagnostic.is_some()).count();
    for r in rows.iter().filter(|r| r.diagnostic.is_some()) {
        log.line("select", &format!("`{}`: {}", r.problem_id, r.diagnostic.as_deref().unwrap_or("")));
    }
    write_jsonl(&dir.join(selection_file(mode)), &rows)?;
    log.line("select", &format!("mode {} over {} problems, {failed} failed", mode.as_str(), rows.len()));
    Ok(json!({"stage": "select", "mode": mode, "problems": rows.len(), "failed": failed}))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    #[serde(flatten)]
    pub summary: PassSummary,
    /// pass@1 when always taking candidate 0.
    pub first_candidate_pass_at_1: f64,
    /// Fraction of problems with at least one passing candidate.
    pub oracle_pass_at_1: f64,
}

pub fn run_report(cfg: &RunConfig, mode: ScoreMode, log: &RunLog) -> Result<serde_json::Value, PipelineError> {
    let dir = &cfg.paths.run_dir;
    let store = load_problems(dir)?;
    let trajs = load_trajectories(dir)?;
    let selections: Vec<SelectionRow> = read_jsonl(&dir.join(selection_file(mode)))?;
    let sandbox = build_sandbox(cfg)?;
    let sets = candidate_sets(&store, &trajs);

    // Every candidate is judged once so the baseline and oracle rates come
    // from the same outcomes as the selected one.
    let mut verdicts: HashMap<String, Vec<bool>> = HashMap::new();
    for (p, (set, _)) in store.problems.iter().zip(&sets) {
        let mut v = Vec::with_capacity(set.candidates.len());
        for seq in &set.candidates {
            let program = SourceProgram::new(&p.problem_id, prefix(seq, seq.len())?.text, seq.program.provenance);
            v.push(evaluate_final(sandbox.as_ref(), &program, &p.tests, cfg.comparison)?.1.passed());
        }
        verdicts.insert(p.problem_id.clone(), v);
    }

    let mut rows = Vec::with_capacity(selections.len());
    for s in &selections {
        let p = store.get(&s.problem_id).ok_or_else(|| PipelineError::Data(format!("selection for unknown problem `{}`", s.problem_id)))?;
        let v = &verdicts[&s.problem_id];
        let passed = match s.chosen_index {
            Some(i) => *v.get(i).ok_or_else(|| PipelineError::Data(format!("selection index {i} out of range for `{}`", s.problem_id)))?,
            None => false,
        };
        rows.push(ReportRow {
            problem_id: s.problem_id.clone(),
            mode,
            chosen_index: s.chosen_index,
            scores: s.scores.clone(),
            passed,
            difficulty: p.difficulty.clone(),
            diagnostic: s.diagnostic.clone(),
        });
    }
    let n = sets.iter().map(|(s, _)| s.candidates.len()).max().unwrap_or(0);
    let total = store.len().max(1) as f64;
    let summary = ReportSummary {
        summary: summarize(&rows, mode, n),
        first_candidate_pass_at_1: verdicts.values().filter(|v| v.first() == Some(&true)).count() as f64 / total,
        oracle_pass_at_1: verdicts.values().filter(|v| v.iter().any(|&b| b)).count() as f64 / total,
    };
    write_jsonl(&dir.join(report_file(mode)), &rows)?;
    write_json(&dir.join(report_summary_file(mode)), &summary)?;
    log.line("report", &format!("mode {} pass@1 {:.4}", mode.as_str(), summary.summary.pass_at_1));
    Ok(json!({"stage": "report", "summary": summary}))
}

/// Loads, overrides and validates a config file.
pub fn prepare(config_path: &Path, overrides: &Overrides) -> Result<RunConfig, PipelineError> {
    let mut cfg = RunConfig::load(config_path)?;
    cfg.apply(overrides);
    cfg.validate()?;
    Ok(cfg)
}
