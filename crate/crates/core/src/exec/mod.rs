//! Unit-test rewards for final programs and Monte Carlo rewards for
//! partial programs.

pub mod chat;
pub mod policy;
pub mod sandbox;

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::step_parser::{prefix, ParseError, PartialSolution, SourceProgram, StepSequence};
pub use policy::{MockPolicy, PolicyAdapter, PolicyError};
pub use sandbox::{Comparison, ProcessSandbox, Sandbox, SandboxError, SandboxRequest, StubSandbox, TestResult};

#[derive(Debug, Error)]
pub enum ExecError {
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("no tests for problem `{0}`")]
    NoTests(String),
    #[error("unknown problem `{0}`")]
    UnknownProblem(String),
    #[error("k must be at least 1")]
    ZeroSamples,
    #[error("partial solution has {step_count} steps but the trajectory has T = {total}; final steps are not Monte Carlo estimated")]
    FinalStep { step_count: usize, total: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMode {
    StdinStdout,
    Assertion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub id: String,
    pub mode: TestMode,
    /// Stdin text, or the assertion source in assertion mode.
    pub input: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_output: Option<String>,
    pub time_limit_ms: u64,
}

impl TestCase {
    pub fn validate(&self) -> Result<(), String> {
        if self.time_limit_ms == 0 {
            return Err(format!("test `{}`: time_limit_ms must be positive", self.id));
        }
        match self.mode {
            TestMode::StdinStdout if self.expected_output.is_none() => {
                Err(format!("test `{}`: stdin_stdout mode requires expected_output", self.id))
            }
            TestMode::Assertion if self.input.trim().is_empty() => {
                Err(format!("test `{}`: assertion mode requires assertion source", self.id))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestStatus {
    Pass,
    Fail,
    Error,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub problem_id: String,
    pub statement: String,
    #[serde(default)]
    pub difficulty: Option<String>,
    pub tests: Vec<TestCase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub results: Vec<TestResult>,
    pub runner_version: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalReward {
    pub value: f64,
}

impl FinalReward {
    pub fn passed(&self) -> bool {
        self.value == 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisyReward {
    pub value: f64,
    pub k: usize,
    pub passes: usize,
}

impl NoisyReward {
    pub fn new(passes: usize, k: usize) -> Self {
        assert!(k >= 1 && passes <= k);
        Self { value: passes as f64 / k as f64, k, passes }
    }
}

/// Collapses every whitespace run to one space and trims the ends.
pub fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// True when `full` starts with `partial` once whitespace is normalized.
pub fn extends(full: &str, partial: &str) -> bool {
    let p = normalize_ws(partial);
    let f = normalize_ws(full);
    p.is_empty() || (f.starts_with(&p) && (f.len() == p.len() || f.as_bytes()[p.len()] == b' '))
}

/// Runs every test; reward 1 iff all pass. Candidate failures are returned
/// as statuses, only infrastructure problems become errors.
pub fn evaluate_final(
    sandbox: &dyn Sandbox,
    solution: &SourceProgram,
    tests: &[TestCase],
    comparison: Comparison,
) -> Result<(EvalOutcome, FinalReward), ExecError> {
    if tests.is_empty() {
        return Err(ExecError::NoTests(solution.problem_id.clone()));
    }
    let request = SandboxRequest::new(&solution.text, tests, comparison);
    let response = sandbox.run(&request)?;
    let all_pass = response.results.iter().all(|r| r.status == TestStatus::Pass);
    let outcome = EvalOutcome { results: response.results, runner_version: response.runner_version };
    Ok((outcome, FinalReward { value: if all_pass { 1.0 } else { 0.0 } }))
}

/// Seed for the `i`-th completion of any partial from trajectory
/// `traj_index`. The step index is not part of the seed.
pub fn completion_seed(base_seed: u64, traj_index: u64, i: u64) -> u64 {
    base_seed.wrapping_mul(1_000_000).wrapping_add(traj_index.wrapping_mul(1_000)).wrapping_add(i)
}

#[derive(Debug, Clone, Copy)]
pub struct SamplingContext {
    pub base_seed: u64,
    pub traj_index: u64,
    pub temperature: f64,
    pub comparison: Comparison,
}

/// One sampled completion, kept for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub sample: usize,
    pub seed: u64,
    pub text: String,
    pub passed: bool,
}

/// Samples `k` completions of `partial` and returns the fraction that pass
/// every test, together with the completions themselves.
pub fn mc_estimate(
    problem: &Problem,
    partial: &PartialSolution,
    total_steps: usize,
    policy: &dyn PolicyAdapter,
    k: usize,
    sandbox: &dyn Sandbox,
    ctx: SamplingContext,
) -> Result<(NoisyReward, Vec<Completion>), ExecError> {
    if k == 0 {
        return Err(ExecError::ZeroSamples);
    }
    if partial.step_count >= total_steps {
        return Err(ExecError::FinalStep { step_count: partial.step_count, total: total_steps });
    }
    let mut passes = 0;
    let mut completions = Vec::with_capacity(k);
    for i in 0..k {
        let seed = completion_seed(ctx.base_seed, ctx.traj_index, i as u64);
        let program = policy.complete(problem, &partial.text, ctx.temperature, seed)?;
        if !extends(&program.text, &partial.text) {
            return Err(PolicyError::NotAnExtension { problem_id: problem.problem_id.clone(), seed }.into());
        }
        let (_, reward) = evaluate_final(sandbox, &program, &problem.tests, ctx.comparison)?;
        if reward.passed() {
            passes += 1;
        }
        completions.push(Completion { sample: i, seed, text: program.text, passed: reward.passed() });
    }
    Ok((NoisyReward::new(passes, k), completions))
}

/// A decomposed candidate program.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub trajectory_id: String,
    /// Position in the run's trajectory list; feeds the completion seeds.
    pub index: u64,
    pub seq: StepSequence,
}

impl Trajectory {
    pub fn problem_id(&self) -> &str {
        &self.seq.program.problem_id
    }
}

pub fn partial_text_ref(trajectory_id: &str, t: usize) -> String {
    format!("{trajectory_id}#t={t}")
}

pub fn final_text_ref(trajectory_id: &str) -> String {
    format!("{trajectory_id}#final")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyLabel {
    pub problem_id: String,
    pub trajectory_id: String,
    pub step_index: usize,
    pub partial_text_ref: String,
    pub value: f64,
    pub k: usize,
    pub passes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaLabel {
    pub problem_id: String,
    pub trajectory_id: String,
    pub final_text_ref: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub problem_id: String,
    pub trajectory_id: String,
    pub step_index: usize,
    #[serde(flatten)]
    pub completion: Completion,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelSet {
    pub noisy: Vec<NoisyLabel>,
    pub meta: Vec<MetaLabel>,
    pub completions: Vec<CompletionRecord>,
}

#[derive(Debug, Clone, Copy)]
pub struct LabelOptions {
    pub k: usize,
    pub base_seed: u64,
    pub temperature: f64,
    pub comparison: Comparison,
    pub workers: usize,
}

fn label_trajectory(
    traj: &Trajectory,
    problem: &Problem,
    policy: &dyn PolicyAdapter,
    sandbox: &dyn Sandbox,
    opts: &LabelOptions,
) -> Result<LabelSet, ExecError> {
    let total = traj.seq.len();
    let ctx = SamplingContext {
        base_seed: opts.base_seed,
        traj_index: traj.index,
        temperature: opts.temperature,
        comparison: opts.comparison,
    };
    let mut out = LabelSet::default();
    for t in 1..total {
        let partial = prefix(&traj.seq, t)?;
        let (reward, completions) = mc_estimate(problem, &partial, total, policy, opts.k, sandbox, ctx)?;
        out.noisy.push(NoisyLabel {
            problem_id: problem.problem_id.clone(),
            trajectory_id: traj.trajectory_id.clone(),
            step_index: t,
            partial_text_ref: partial_text_ref(&traj.trajectory_id, t),
            value: reward.value,
            k: reward.k,
            passes: reward.passes,
        });
        out.completions.extend(completions.into_iter().map(|completion| CompletionRecord {
            problem_id: problem.problem_id.clone(),
            trajectory_id: traj.trajectory_id.clone(),
            step_index: t,
            completion,
        }));
    }
    let final_program = prefix(&traj.seq, total)?;
    let program = SourceProgram::new(&problem.problem_id, final_program.text, traj.seq.program.provenance);
    let (_, reward) = evaluate_final(sandbox, &program, &problem.tests, opts.comparison)?;
    out.meta.push(MetaLabel {
        problem_id: problem.problem_id.clone(),
        trajectory_id: traj.trajectory_id.clone(),
        final_text_ref: final_text_ref(&traj.trajectory_id),
        value: reward.value,
    });
    Ok(out)
}

/// Labels every trajectory: clean rewards for full programs, Monte Carlo
/// estimates for every proper prefix. Work is spread over `opts.workers`
/// threads; the output order follows the input order regardless.
pub fn build_datasets(
    trajectories: &[Trajectory],
    problems: &HashMap<String, Problem>,
    policy: &dyn PolicyAdapter,
    sandbox: &dyn Sandbox,
    opts: &LabelOptions,
) -> Result<LabelSet, ExecError> {
    if opts.k == 0 {
        return Err(ExecError::ZeroSamples);
    }
    for traj in trajectories {
        let p = problems.get(traj.problem_id()).ok_or_else(|| ExecError::UnknownProblem(traj.problem_id().to_string()))?;
        if p.tests.is_empty() {
            return Err(ExecError::NoTests(p.problem_id.clone()));
        }
    }
    let slots: Vec<Mutex<Option<Result<LabelSet, ExecError>>>> = trajectories.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = opts.workers.clamp(1, trajectories.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(traj) = trajectories.get(i) else { break };
                let problem = &problems[traj.problem_id()];
                let res = label_trajectory(traj, problem, policy, sandbox, opts);
                *slots[i].lock().expect("slot lock") = Some(res);
            });
        }
    });
    let mut out = LabelSet::default();
    for slot in slots {
        let part = slot.into_inner().expect("slot lock").expect("every slot filled")?;
        out.noisy.extend(part.noisy);
        out.meta.extend(part.meta);
        out.completions.extend(part.completions);
    }
    Ok(out)
}
