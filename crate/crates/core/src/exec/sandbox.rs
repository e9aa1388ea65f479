//! Client side of the sandbox runner protocol, plus a table-driven stub.
//!
//! The runner is a long-lived child process. It prints one handshake line on
//! startup, then answers each JSON request line on stdin with exactly one
//! JSON response line on stdout.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{TestCase, TestStatus};

pub const PROTOCOL_VERSION: u32 = 1;
pub const MIN_TIME_LIMIT_MS: u64 = 100;
pub const MAX_TIME_LIMIT_MS: u64 = 60_000;

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("sandbox unavailable: {0}")]
    Unavailable(String),
    #[error("sandbox protocol violation: {0}")]
    Protocol(String),
    #[error("runner rejected request as malformed: {0}")]
    MalformedRequest(String),
    #[error("invalid sandbox request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    Exact,
    #[default]
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxRequest {
    pub solution_source: String,
    pub tests: Vec<TestCase>,
    pub time_limit_ms: u64,
    pub comparison: Comparison,
}

impl SandboxRequest {
    /// Builds a request whose time limit is the largest per-test limit,
    /// clamped to the protocol's accepted range.
    pub fn new(solution_source: &str, tests: &[TestCase], comparison: Comparison) -> Self {
        let limit = tests.iter().map(|t| t.time_limit_ms).max().unwrap_or(MIN_TIME_LIMIT_MS);
        Self {
            solution_source: solution_source.to_string(),
            tests: tests.to_vec(),
            time_limit_ms: limit.clamp(MIN_TIME_LIMIT_MS, MAX_TIME_LIMIT_MS),
            comparison,
        }
    }

    pub fn validate(&self) -> Result<(), SandboxError> {
        if self.tests.is_empty() {
            return Err(SandboxError::InvalidRequest("no tests".into()));
        }
        if !(MIN_TIME_LIMIT_MS..=MAX_TIME_LIMIT_MS).contains(&self.time_limit_ms) {
            return Err(SandboxError::InvalidRequest(format!("time_limit_ms {} outside [100, 60000]", self.time_limit_ms)));
        }
        for t in &self.tests {
            t.validate().map_err(SandboxError::InvalidRequest)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub test_id: String,
    pub status: TestStatus,
    #[serde(default)]
    pub stdout: String,
    #[serde(default)]
    pub stderr: String,
    #[serde(default)]
    pub duration_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxResponse {
    pub results: Vec<TestResult>,
    pub runner_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub runner_version: String,
    pub protocol_version: u32,
}

/// Either a normal response or a protocol-level rejection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WireResponse {
    Ok(SandboxResponse),
    Error { error: String, #[serde(default)] message: String },
}

/// Executes candidate programs against tests.
pub trait Sandbox: Send + Sync {
    fn run(&self, request: &SandboxRequest) -> Result<SandboxResponse, SandboxError>;
}

/// Checks that a response answers the request: one result per test, in order.
pub fn check_response(request: &SandboxRequest, response: &SandboxResponse) -> Result<(), SandboxError> {
    if response.results.len() != request.tests.len() {
        return Err(SandboxError::Protocol(format!(
            "expected {} results, got {}",
            request.tests.len(),
            response.results.len()
        )));
    }
    for (t, r) in request.tests.iter().zip(&response.results) {
        if t.id != r.test_id {
            return Err(SandboxError::Protocol(format!("result for `{}` where `{}` was expected", r.test_id, t.id)));
        }
    }
    Ok(())
}

pub fn decode_response_line(request: &SandboxRequest, line: &str) -> Result<SandboxResponse, SandboxError> {
    let wire: WireResponse =
        serde_json::from_str(line.trim_end()).map_err(|e| SandboxError::Protocol(format!("undecodable response: {e}")))?;
    match wire {
        WireResponse::Ok(resp) => {
            check_response(request, &resp)?;
            Ok(resp)
        }
        WireResponse::Error { error, message } if error == "MalformedRequest" => Err(SandboxError::MalformedRequest(message)),
        WireResponse::Error { error, message } => Err(SandboxError::Protocol(format!("{error}: {message}"))),
    }
}

// ---------------------------------------------------------------------------
// Runner worker processes
// ---------------------------------------------------------------------------

struct Worker {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl Worker {
    fn spawn(program: &Path, args: &[String]) -> Result<(Self, Handshake), SandboxError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| SandboxError::Unavailable(format!("cannot start {}: {e}", program.display())))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let mut stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut line = String::new();
        let n = stdout.read_line(&mut line).map_err(|e| SandboxError::Unavailable(format!("handshake read failed: {e}")))?;
        if n == 0 {
            let _ = child.kill();
            return Err(SandboxError::Unavailable("runner exited before handshake".into()));
        }
        let hs: Handshake = serde_json::from_str(line.trim_end())
            .map_err(|e| SandboxError::Protocol(format!("bad handshake `{}`: {e}", line.trim_end())))?;
        if hs.protocol_version != PROTOCOL_VERSION {
            let _ = child.kill();
            return Err(SandboxError::Protocol(format!(
                "runner speaks protocol {}, expected {PROTOCOL_VERSION}",
                hs.protocol_version
            )));
        }
        Ok((Self { child, stdin, stdout }, hs))
    }

    fn roundtrip(&mut self, request_line: &str) -> Result<String, SandboxError> {
        self.stdin
            .write_all(request_line.as_bytes())
            .and_then(|_| self.stdin.write_all(b"\n"))
            .and_then(|_| self.stdin.flush())
            .map_err(|e| SandboxError::Unavailable(format!("runner stdin closed: {e}")))?;
        let mut line = String::new();
        let n = self.stdout.read_line(&mut line).map_err(|e| SandboxError::Unavailable(format!("runner read failed: {e}")))?;
        if n == 0 {
            return Err(SandboxError::Unavailable("runner exited mid-request".into()));
        }
        Ok(line)
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Pool of runner worker processes, spawned on demand. Each worker handles
/// one request at a time; concurrent callers get separate workers.
pub struct ProcessSandbox {
    program: PathBuf,
    args: Vec<String>,
    idle: Mutex<Vec<Worker>>,
    runner_version: Mutex<Option<String>>,
}

impl ProcessSandbox {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        Self { program: program.into(), args, idle: Mutex::new(Vec::new()), runner_version: Mutex::new(None) }
    }

    /// Starts one worker eagerly so a missing runner is reported up front.
    pub fn connect(program: impl Into<PathBuf>, args: Vec<String>) -> Result<Self, SandboxError> {
        let sb = Self::new(program, args);
        let worker = sb.spawn_worker()?;
        sb.idle.lock().expect("pool lock").push(worker);
        Ok(sb)
    }

    pub fn runner_version(&self) -> Option<String> {
        self.runner_version.lock().expect("version lock").clone()
    }

    fn spawn_worker(&self) -> Result<Worker, SandboxError> {
        let (w, hs) = Worker::spawn(&self.program, &self.args)?;
        *self.runner_version.lock().expect("version lock") = Some(hs.runner_version);
        Ok(w)
    }
}

impl Sandbox for ProcessSandbox {
    fn run(&self, request: &SandboxRequest) -> Result<SandboxResponse, SandboxError> {
        request.validate()?;
        let line = serde_json::to_string(request).map_err(|e| SandboxError::InvalidRequest(e.to_string()))?;
        let pooled = self.idle.lock().expect("pool lock").pop();
        let mut worker = match pooled {
            Some(w) => w,
            None => self.spawn_worker()?,
        };
        // A worker that fails mid-request is dropped (and killed), not pooled.
        let reply = worker.roundtrip(&line)?;
        let decoded = decode_response_line(request, &reply);
        if !matches!(decoded, Err(SandboxError::Protocol(_))) {
            self.idle.lock().expect("pool lock").push(worker);
        }
        decoded
    }
}

// ---------------------------------------------------------------------------
// Table-driven stub
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubRule {
    /// Matches when the solution source contains this substring.
    pub contains: String,
    pub status: TestStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubExact {
    pub source: String,
    /// One status per test, or a single status applied to every test.
    pub statuses: Vec<TestStatus>,
}

/// Serialized form of a [`StubSandbox`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubTable {
    #[serde(default = "crate::schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub exact: Vec<StubExact>,
    #[serde(default)]
    pub rules: Vec<StubRule>,
    pub default: TestStatus,
}

/// Sandbox stand-in that looks outcomes up instead of executing code.
/// Exact source matches win, then the first matching substring rule, then
/// the default status.
#[derive(Debug, Clone)]
pub struct StubSandbox {
    exact: HashMap<String, Vec<TestStatus>>,
    rules: Vec<StubRule>,
    default: TestStatus,
}

fn stub_key(source: &str) -> String {
    super::normalize_ws(source)
}

impl StubSandbox {
    pub fn new(default: TestStatus) -> Self {
        Self { exact: HashMap::new(), rules: Vec::new(), default }
    }

    pub fn with_rule(mut self, contains: impl Into<String>, status: TestStatus) -> Self {
        self.rules.push(StubRule { contains: contains.into(), status });
        self
    }

    pub fn with_exact(mut self, source: &str, statuses: Vec<TestStatus>) -> Self {
        self.exact.insert(stub_key(source), statuses);
        self
    }

    pub fn from_table(table: StubTable) -> Self {
        let mut sb = Self::new(table.default);
        for e in table.exact {
            sb = sb.with_exact(&e.source, e.statuses);
        }
        sb.rules = table.rules;
        sb
    }

    pub fn load(path: &Path) -> Result<Self, SandboxError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SandboxError::Unavailable(format!("cannot read stub table {}: {e}", path.display())))?;
        let table: StubTable =
            serde_json::from_str(&text).map_err(|e| SandboxError::Unavailable(format!("bad stub table {}: {e}", path.display())))?;
        Ok(Self::from_table(table))
    }

    fn statuses_for(&self, source: &str, n: usize) -> Vec<TestStatus> {
        if let Some(s) = self.exact.get(&stub_key(source)) {
            return if s.len() == n { s.clone() } else { vec![s.first().copied().unwrap_or(self.default); n] };
        }
        let status = self.rules.iter().find(|r| source.contains(&r.contains)).map_or(self.default, |r| r.status);
        vec![status; n]
    }
}

impl Sandbox for StubSandbox {
    fn run(&self, request: &SandboxRequest) -> Result<SandboxResponse, SandboxError> {
        request.validate()?;
        let statuses = self.statuses_for(&request.solution_source, request.tests.len());
        let results = request
            .tests
            .iter()
            .zip(statuses)
            .map(|(t, status)| TestResult {
                test_id: t.id.clone(),
                status,
                stdout: String::new(),
                stderr: String::new(),
                duration_ms: if status == TestStatus::Timeout { request.time_limit_ms } else { 0 },
            })
            .collect();
        Ok(SandboxResponse { results, runner_version: "stub".into() })
    }
}
