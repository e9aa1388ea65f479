//! Blocking client for chat-completion style HTTP backends, used both as a
//! generation policy and as a `+`/`-` token scorer.

use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::policy::{PolicyAdapter, PolicyError};
use super::{extends, Problem};
use crate::prompts;
use crate::reward_model::{generative_score, ModelError, StepScorer, TokenProbPair};
use crate::step_parser::{Provenance, SourceProgram};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_backoff")]
    pub retry_backoff_ms: u64,
    #[serde(default)]
    pub max_tokens: Option<u32>,
}

fn default_retries() -> usize {
    2
}

fn default_timeout() -> u64 {
    120
}

fn default_backoff() -> u64 {
    500
}

pub struct ChatClient {
    config: ChatConfig,
    api_key: String,
    agent: ureq::Agent,
    log: Option<Mutex<std::fs::File>>,
}

impl std::fmt::Debug for ChatClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChatClient").field("config", &self.config).field("api_key", &"<redacted>").finish()
    }
}

/// Outcome of one attempt: retryable failures are retried, others returned.
enum Attempt {
    Done(Value),
    Retry(String),
    Fatal(PolicyError),
}

impl ChatClient {
    /// Reads the API key from the configured variable; fails before any
    /// network traffic when it is missing.
    pub fn from_env(config: ChatConfig) -> Result<Self, PolicyError> {
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| PolicyError::MissingApiKey(config.api_key_env.clone()))?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { config, api_key, agent, log: None })
    }

    /// Appends request and response bodies to `path` as JSON lines.
    pub fn with_log(mut self, path: &Path) -> std::io::Result<Self> {
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        self.log = Some(Mutex::new(f));
        Ok(self)
    }

    fn log(&self, direction: &str, body: &Value) {
        if let Some(log) = &self.log {
            let line = json!({"direction": direction, "endpoint": self.config.endpoint, "authorization": "Bearer <redacted>", "body": body});
            let mut f = log.lock().expect("log lock");
            let _ = writeln!(f, "{line}");
        }
    }

    fn attempt(&self, body: &Value) -> Attempt {
        let resp = self
            .agent
            .post(&self.config.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .header("Content-Type", "application/json")
            .send_json(body);
        let mut resp = match resp {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        if status == 429 || status >= 500 {
            return Attempt::Retry(format!("HTTP {status}: {}", truncate(&text, 200)));
        }
        if !(200..300).contains(&status) {
            return Attempt::Fatal(PolicyError::Http { status, body: truncate(&text, 2000) });
        }
        match serde_json::from_str(&text) {
            Ok(v) => Attempt::Done(v),
            Err(e) => Attempt::Fatal(PolicyError::BadResponse(format!("invalid JSON: {e}"))),
        }
    }

    /// Posts `body`, retrying transport errors, 429 and 5xx up to
    /// `max_retries` times.
    pub fn post(&self, body: &Value) -> Result<Value, PolicyError> {
        self.log("request", body);
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 && self.config.retry_backoff_ms > 0 {
                std::thread::sleep(Duration::from_millis(self.config.retry_backoff_ms * attempt as u64));
            }
            match self.attempt(body) {
                Attempt::Done(v) => {
                    self.log("response", &v);
                    return Ok(v);
                }
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(msg) => last = msg,
            }
        }
        Err(PolicyError::Transport { attempts, message: last })
    }

    pub fn model(&self) -> &str {
        &self.config.model
    }
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}

fn first_message_content(v: &Value) -> Result<&str, PolicyError> {
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| PolicyError::BadResponse("missing choices[0].message.content".into()))
}

/// Generation policy backed by a live chat model.
#[derive(Debug)]
pub struct ChatPolicy {
    client: ChatClient,
    system_prompt: String,
}

impl ChatPolicy {
    pub fn new(client: ChatClient, few_shot: &str) -> Self {
        Self { client, system_prompt: prompts::cof_system_prompt(few_shot) }
    }

    fn request(&self, messages: Value, temperature: f64, seed: u64) -> Value {
        let mut body = json!({
            "model": self.client.model(),
            "messages": messages,
            "temperature": temperature,
            "seed": seed,
        });
        if let Some(m) = self.client.config.max_tokens {
            body["max_tokens"] = json!(m);
        }
        body
    }
}

impl PolicyAdapter for ChatPolicy {
    fn generate(&self, problem: &Problem, temperature: f64, seed: u64) -> Result<SourceProgram, PolicyError> {
        let messages = json!([
            {"role": "system", "content": self.system_prompt},
            {"role": "user", "content": prompts::generation_user_message(&problem.statement)},
        ]);
        let reply = self.client.post(&self.request(messages, temperature, seed))?;
        let code = prompts::extract_code(first_message_content(&reply)?);
        Ok(SourceProgram::new(&problem.problem_id, code, Provenance::Llm))
    }

    /// The partial program goes in as an assistant prefix; the reply is
    /// taken as its continuation unless it already restates the prefix.
    fn complete(&self, problem: &Problem, partial: &str, temperature: f64, seed: u64) -> Result<SourceProgram, PolicyError> {
        let messages = json!([
            {"role": "system", "content": self.system_prompt},
            {"role": "user", "content": prompts::generation_user_message(&problem.statement)},
            {"role": "assistant", "content": partial},
        ]);
        let reply = self.client.post(&self.request(messages, temperature, seed))?;
        let content = first_message_content(&reply)?;
        let tail = if content.contains("```") { prompts::extract_code(content) } else { content.to_string() };
        let text = if extends(&tail, partial) { tail } else { format!("{}\n{}", partial.trim_end(), tail) };
        Ok(SourceProgram::new(&problem.problem_id, text, Provenance::Llm))
    }
}

/// Sums the probability mass the backend assigns to `+` and `-` among the
/// top candidates for the first generated token.
pub fn token_pair_from_response(v: &Value) -> Result<TokenProbPair, PolicyError> {
    let top = v
        .pointer("/choices/0/logprobs/content/0/top_logprobs")
        .and_then(Value::as_array)
        .ok_or_else(|| PolicyError::BadResponse("missing choices[0].logprobs.content[0].top_logprobs".into()))?;
    let (mut p_plus, mut p_minus) = (0.0, 0.0);
    for entry in top {
        let token = entry.get("token").and_then(Value::as_str).unwrap_or("").trim();
        let Some(lp) = entry.get("logprob").and_then(Value::as_f64) else { continue };
        match token {
            "+" => p_plus += lp.exp(),
            "-" => p_minus += lp.exp(),
            _ => {}
        }
    }
    Ok(TokenProbPair { p_plus, p_minus })
}

/// Step scorer backed by a live model answering `+` or `-`.
#[derive(Debug)]
pub struct GenerativeScorer {
    client: ChatClient,
    top_logprobs: u32,
}

impl GenerativeScorer {
    pub fn new(client: ChatClient) -> Self {
        Self { client, top_logprobs: 20 }
    }

    pub fn token_pair(&self, problem_statement: &str, text: &str) -> Result<TokenProbPair, PolicyError> {
        let body = json!({
            "model": self.client.model(),
            "messages": [
                {"role": "system", "content": prompts::PRM_SYSTEM_PROMPT},
                {"role": "user", "content": prompts::prm_user_message(problem_statement, text)},
            ],
            "temperature": 0,
            "max_tokens": 1,
            "logprobs": true,
            "top_logprobs": self.top_logprobs,
        });
        token_pair_from_response(&self.client.post(&body)?)
    }
}

impl StepScorer for GenerativeScorer {
    fn score_text(&self, problem_statement: &str, text: &str) -> Result<f64, ModelError> {
        let pair = self.token_pair(problem_statement, text).map_err(|e| ModelError::Backend(e.to_string()))?;
        generative_score(pair)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read};
    use std::net::TcpListener;
    use std::sync::Arc;

    /// Serves the canned (status, body) replies in order, one per
    /// connection, and records request bodies.
    fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>, std::thread::JoinHandle<()>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let seen2 = Arc::clone(&seen);
        let handle = std::thread::spawn(move || {
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream);
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                seen2.lock().unwrap().push(String::from_utf8(buf).unwrap());
                let mut stream = reader.into_inner();
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (url, seen, handle)
    }

    fn client(url: &str, var: &str) -> ChatClient {
        std::env::set_var(var, "sk-test");
        ChatClient::from_env(ChatConfig {
            endpoint: url.into(),
            model: "m".into(),
            api_key_env: var.into(),
            max_retries: 2,
            timeout_secs: 10,
            retry_backoff_ms: 0,
            max_tokens: None,
        })
        .unwrap()
    }

    fn problem() -> Problem {
        Problem { problem_id: "p".into(), statement: "Print 1.".into(), difficulty: None, tests: vec![] }
    }

    #[test]
    fn missing_key_fails_before_network() {
        let err = ChatClient::from_env(ChatConfig {
            endpoint: "http://127.0.0.1:1/unused".into(),
            model: "m".into(),
            api_key_env: "PRM_TEST_DEFINITELY_UNSET".into(),
            max_retries: 2,
            timeout_secs: 1,
            retry_backoff_ms: 0,
            max_tokens: None,
        })
        .unwrap_err();
        assert!(matches!(err, PolicyError::MissingApiKey(v) if v == "PRM_TEST_DEFINITELY_UNSET"));
    }

    #[test]
    fn retries_server_errors_then_succeeds() {
        let ok = json!({"choices": [{"message": {"role": "assistant", "content": "```python\nprint(1)\n```"}}]}).to_string();
        let (url, seen, h) = serve(vec![(500, "{}".into()), (429, "{}".into()), (200, ok)]);
        let policy = ChatPolicy::new(client(&url, "PRM_TEST_KEY_A"), prompts::DEFAULT_FEW_SHOT);
        let prog = policy.generate(&problem(), 0.8, 7).unwrap();
        h.join().unwrap();
        assert_eq!(prog.text, "print(1)\n");
        let bodies = seen.lock().unwrap();
        assert_eq!(bodies.len(), 3);
        let req: Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(req["seed"], 7);
        assert!(req["messages"][0]["content"].as_str().unwrap().contains("Function organization"));
    }

    #[test]
    fn gives_up_after_retry_budget() {
        let (url, _, h) = serve(vec![(503, "{}".into()), (503, "{}".into()), (503, "{}".into())]);
        let policy = ChatPolicy::new(client(&url, "PRM_TEST_KEY_B"), "");
        let err = policy.generate(&problem(), 0.8, 0).unwrap_err();
        h.join().unwrap();
        assert!(matches!(err, PolicyError::Transport { attempts: 3, .. }));
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, seen, h) = serve(vec![(401, r#"{"error":"bad key"}"#.into())]);
        let policy = ChatPolicy::new(client(&url, "PRM_TEST_KEY_C"), "");
        assert!(matches!(policy.generate(&problem(), 0.8, 0), Err(PolicyError::Http { status: 401, .. })));
        h.join().unwrap();
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn completion_continues_the_prefix() {
        let reply = json!({"choices": [{"message": {"content": "def g():\n    return 2\n"}}]}).to_string();
        let (url, _, h) = serve(vec![(200, reply)]);
        let policy = ChatPolicy::new(client(&url, "PRM_TEST_KEY_D"), "");
        let prog = policy.complete(&problem(), "def f():\n    return 1\n", 0.8, 3).unwrap();
        h.join().unwrap();
        assert!(extends(&prog.text, "def f():\n    return 1"));
        assert!(prog.text.ends_with("return 2\n"));
    }

    #[test]
    fn scorer_reads_token_probabilities() {
        let reply = json!({"choices": [{"logprobs": {"content": [{"token": "+", "logprob": (0.6f64).ln(), "top_logprobs": [
            {"token": "+", "logprob": (0.6f64).ln()},
            {"token": " -", "logprob": (0.2f64).ln()},
            {"token": "x", "logprob": (0.1f64).ln()},
        ]}]}}]})
        .to_string();
        let (url, seen, h) = serve(vec![(200, reply)]);
        let scorer = GenerativeScorer::new(client(&url, "PRM_TEST_KEY_E"));
        let s = scorer.score_text("stmt", "code").unwrap();
        h.join().unwrap();
        assert!((s - 0.75).abs() < 1e-12);
        let req: Value = serde_json::from_str(&seen.lock().unwrap()[0]).unwrap();
        assert_eq!(req["temperature"], 0);
        assert!(req["messages"][1]["content"].as_str().unwrap().contains("<code>\ncode\n</code>"));
    }
}
