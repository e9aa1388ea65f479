//! Policy adapters: the code generator that proposes candidate programs and
//! continues partial ones.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Problem;
use crate::step_parser::{Provenance, SourceProgram};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("API key environment variable `{0}` is not set")]
    MissingApiKey(String),
    #[error("transport error after {attempts} attempts: {message}")]
    Transport { attempts: usize, message: String },
    #[error("backend returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("unusable backend response: {0}")]
    BadResponse(String),
    #[error("mock script: {0}")]
    Script(String),
    #[error("completion for `{problem_id}` (seed {seed}) does not extend the partial solution")]
    NotAnExtension { problem_id: String, seed: u64 },
}

pub trait PolicyAdapter: Send + Sync {
    /// A full candidate program for `problem`.
    fn generate(&self, problem: &Problem, temperature: f64, seed: u64) -> Result<SourceProgram, PolicyError>;

    /// A full program whose text extends `partial`.
    fn complete(&self, problem: &Problem, partial: &str, temperature: f64, seed: u64) -> Result<SourceProgram, PolicyError>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockChoice {
    /// Entry `seed % len`.
    #[default]
    SeedMod,
    /// Entry `splitmix64(seed) % len`.
    Hashed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockProblemScript {
    /// Full programs returned by `generate`.
    pub candidates: Vec<String>,
    /// Code appended to a partial solution by `complete`.
    #[serde(default)]
    pub tails: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    /// How `generate` picks a candidate.
    #[serde(default)]
    pub choice: MockChoice,
    /// How `complete` picks a tail.
    #[serde(default)]
    pub tail_choice: MockChoice,
    pub problems: BTreeMap<String, MockProblemScript>,
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Deterministic scripted policy. Output depends only on the script and
/// the seed; temperature is ignored.
#[derive(Debug, Clone)]
pub struct MockPolicy {
    script: MockScript,
}

impl MockPolicy {
    pub fn new(script: MockScript) -> Self {
        Self { script }
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path).map_err(|e| PolicyError::Script(format!("cannot read {}: {e}", path.display())))?;
        let script = serde_json::from_str(&text).map_err(|e| PolicyError::Script(format!("{}: {e}", path.display())))?;
        Ok(Self::new(script))
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    fn entry<'a>(choice: MockChoice, items: &'a [String], seed: u64, what: &str, problem_id: &str) -> Result<&'a str, PolicyError> {
        if items.is_empty() {
            return Err(PolicyError::Script(format!("no {what} scripted for `{problem_id}`")));
        }
        let pick = match choice {
            MockChoice::SeedMod => seed,
            MockChoice::Hashed => splitmix64(seed),
        };
        Ok(&items[(pick % items.len() as u64) as usize])
    }

    fn problem(&self, problem_id: &str) -> Result<&MockProblemScript, PolicyError> {
        self.script.problems.get(problem_id).ok_or_else(|| PolicyError::Script(format!("unknown problem `{problem_id}`")))
    }
}

impl PolicyAdapter for MockPolicy {
    fn generate(&self, problem: &Problem, _temperature: f64, seed: u64) -> Result<SourceProgram, PolicyError> {
        let ps = self.problem(&problem.problem_id)?;
        let text = Self::entry(self.script.choice, &ps.candidates, seed, "candidates", &problem.problem_id)?;
        Ok(SourceProgram::new(&problem.problem_id, text, Provenance::Mock))
    }

    fn complete(&self, problem: &Problem, partial: &str, _temperature: f64, seed: u64) -> Result<SourceProgram, PolicyError> {
        let ps = self.problem(&problem.problem_id)?;
        let tail = Self::entry(self.script.tail_choice, &ps.tails, seed, "tails", &problem.problem_id)?;
        let text = format!("{}\n\n{}", partial.trim_end(), tail);
        Ok(SourceProgram::new(&problem.problem_id, text, Provenance::Mock))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem(id: &str) -> Problem {
        Problem { problem_id: id.into(), statement: "s".into(), difficulty: None, tests: vec![] }
    }

    fn policy(choice: MockChoice) -> MockPolicy {
        MockPolicy::new(MockScript {
            choice,
            tail_choice: choice,
            problems: [(
                "a".to_string(),
                MockProblemScript { candidates: vec!["c0".into(), "c1".into(), "c2".into()], tails: vec!["t0".into(), "t1".into()] },
            )]
            .into(),
        })
    }

    #[test]
    fn seed_mod_cycles() {
        let p = policy(MockChoice::SeedMod);
        let texts: Vec<_> = (0..4).map(|s| p.generate(&problem("a"), 0.8, s).unwrap().text).collect();
        assert_eq!(texts, ["c0", "c1", "c2", "c0"]);
        assert_eq!(p.complete(&problem("a"), "def f():\n    pass\n\n", 0.8, 3).unwrap().text, "def f():\n    pass\n\nt1");
    }

    #[test]
    fn hashed_is_deterministic_and_errors_are_reported() {
        let p = policy(MockChoice::Hashed);
        for s in 0..20 {
            assert_eq!(p.generate(&problem("a"), 0.0, s).unwrap(), p.generate(&problem("a"), 1.0, s).unwrap());
        }
        assert!(matches!(p.generate(&problem("zz"), 0.0, 0), Err(PolicyError::Script(_))));
    }

    #[test]
    fn script_round_trips_through_json() {
        let p = policy(MockChoice::Hashed);
        let json = serde_json::to_string(p.script()).unwrap();
        let back: MockScript = serde_json::from_str(&json).unwrap();
        assert_eq!(&back, p.script());
    }
}
