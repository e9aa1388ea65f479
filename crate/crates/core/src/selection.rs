//! Best-of-N selection and pass@1 reporting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reward_model::{score_trajectory, ModelError, StepScorer};
use crate::step_parser::{prefix, StepSequence};

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("candidate set for `{0}` is empty")]
    Empty(String),
    #[error("candidate {index} belongs to `{found}`, not `{expected}`")]
    ProblemMismatch { index: usize, expected: String, found: String },
    #[error("scoring candidate {index} failed: {source}")]
    Scoring { index: usize, source: ModelError },
    #[error("candidate {index} scored {value}")]
    NonFiniteScore { index: usize, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Mean step score over every prefix.
    Prm,
    /// Score of the full program only.
    Orm,
}

impl ScoreMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreMode::Prm => "prm",
            ScoreMode::Orm => "orm",
        }
    }
}

impl std::str::FromStr for ScoreMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "prm" => Ok(ScoreMode::Prm),
            "orm" => Ok(ScoreMode::Orm),
            other => Err(format!("unknown mode `{other}` (expected prm or orm)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub problem_id: String,
    pub candidates: Vec<StepSequence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub chosen_index: usize,
    pub scores: Vec<f64>,
    pub mode: ScoreMode,
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some(b) if s <= scores[b] => {}
            _ => best = Some(i),
        }
    }
    best
}

pub fn candidate_score(scorer: &dyn StepScorer, seq: &StepSequence, statement: &str, mode: ScoreMode) -> Result<f64, ModelError> {
    match mode {
        ScoreMode::Prm => score_trajectory(scorer, seq, statement),
        ScoreMode::Orm => scorer.score_text(statement, &prefix(seq, seq.len())?.text),
    }
}

/// Scores every candidate and picks the best. Any scoring failure fails
/// the whole selection.
pub fn best_of_n(set: &CandidateSet, statement: &str, scorer: &dyn StepScorer, mode: ScoreMode) -> Result<SelectionResult, SelectionError> {
    if set.candidates.is_empty() {
        return Err(SelectionError::Empty(set.problem_id.clone()));
    }
    let mut scores = Vec::with_capacity(set.candidates.len());
    for (index, seq) in set.candidates.iter().enumerate() {
        if seq.program.problem_id != set.problem_id {
            return Err(SelectionError::ProblemMismatch {
                index,
                expected: set.problem_id.clone(),
                found: seq.program.problem_id.clone(),
            });
        }
        let value = candidate_score(scorer, seq, statement, mode).map_err(|source| SelectionError::Scoring { index, source })?;
        if !value.is_finite() {
            return Err(SelectionError::NonFiniteScore { index, value });
        }
        scores.push(value);
    }
    let chosen_index = argmax_first(&scores).expect("non-empty");
    Ok(SelectionResult { chosen_index, scores, mode })
}

/// Input for pass@1 evaluation of one problem.
#[derive(Debug, Clone)]
pub struct ProblemEntry<'a> {
    pub problem_id: &'a str,
    pub statement: &'a str,
    pub difficulty: Option<&'a str>,
    pub candidates: &'a CandidateSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub problem_id: String,
    pub mode: ScoreMode,
    pub chosen_index: Option<usize>,
    pub scores: Vec<f64>,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassSummary {
    pub schema_version: u32,
    pub mode: ScoreMode,
    /// Largest candidate count over the evaluated problems.
    pub n: usize,
    pub problems: usize,
    pub pass_at_1: f64,
    pub per_difficulty: BTreeMap<String, f64>,
    pub failed_selections: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassReport {
    pub rows: Vec<ReportRow>,
    pub summary: PassSummary,
}

pub fn summarize(rows: &[ReportRow], mode: ScoreMode, n: usize) -> PassSummary {
    let rate = |rs: &[&ReportRow]| if rs.is_empty() { 0.0 } else { rs.iter().filter(|r| r.passed).count() as f64 / rs.len() as f64 };
    let all: Vec<&ReportRow> = rows.iter().collect();
    let mut by_diff: BTreeMap<String, Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        if let Some(d) = &r.difficulty {
            by_diff.entry(d.clone()).or_default().push(r);
        }
    }
    PassSummary {
        schema_version: crate::SCHEMA_VERSION,
        mode,
        n,
        problems: rows.len(),
        pass_at_1: rate(&all),
        per_difficulty: by_diff.into_iter().map(|(k, v)| (k, rate(&v))).collect(),
        failed_selections: rows.iter().filter(|r| r.diagnostic.is_some()).count(),
    }
}

/// Selects one candidate per problem and asks `judge(problem_id, index)`
/// whether it passes. Problems whose selection fails count as not passed.
pub fn evaluate_pass_at_1<E: std::fmt::Display>(
    problems: &[ProblemEntry<'_>],
    scorer: &dyn StepScorer,
    mode: ScoreMode,
    mut judge: impl FnMut(&str, usize) -> Result<bool, E>,
) -> Result<PassReport, E> {
    let mut rows = Vec::with_capacity(problems.len());
    let mut n = 0;
    for p in problems {
        n = n.max(p.candidates.candidates.len());
        let difficulty = p.difficulty.map(str::to_string);
        let row = match best_of_n(p.candidates, p.statement, scorer, mode) {
            Ok(sel) => ReportRow {
                problem_id: p.problem_id.to_string(),
                mode,
                chosen_index: Some(sel.chosen_index),
                passed: judge(p.problem_id, sel.chosen_index)?,
                scores: sel.scores,
                difficulty,
                diagnostic: None,
            },
            Err(e) => ReportRow {
                problem_id: p.problem_id.to_string(),
                mode,
                chosen_index: None,
                scores: Vec::new(),
                passed: false,
                difficulty,
                diagnostic: Some(e.to_string()),
            },
        };
        rows.push(row);
    }
    let summary = summarize(&rows, mode, n);
    Ok(PassReport { rows, summary })
}
