//! Function-level decomposition of Python-syntax candidate programs.
//!
//! A candidate is split into a preamble (imports, class header), one step per
//! top-level function (or per method of a single wrapping class), and a
//! trailer holding whatever top-level code follows the last function. The
//! scanner is indentation-aware and understands strings, comments, brackets
//! and line continuations, which is all the structure the step boundaries
//! need.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Name given to the single step of a program that has no function definitions.
pub const WHOLE_PROGRAM_STEP: &str = "<module>";

/// Entry-function names accepted as a valid first step by default.
pub const DEFAULT_ENTRY_NAMES: [&str; 2] = ["main", "solve"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("syntax error at line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("program contains no function definitions")]
    NoFunctions,
    #[error("step index {index} out of range 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("empty source program")]
    EmptyProgram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Llm,
    Mock,
    Fixture,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceProgram {
    pub problem_id: String,
    pub text: String,
    pub provenance: Provenance,
}

impl SourceProgram {
    pub fn new(problem_id: impl Into<String>, text: impl Into<String>, provenance: Provenance) -> Self {
        Self { problem_id: problem_id.into(), text: text.into(), provenance }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    /// `def` at module level.
    Function,
    /// `def` directly inside the single wrapping class.
    Method,
    /// Fallback step covering a program with no usable function structure.
    WholeProgram,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionStep {
    /// 1-based.
    pub index: usize,
    pub name: String,
    pub docstring: Option<String>,
    pub source_span: Range<usize>,
    pub kind: StepKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepSequence {
    pub program: SourceProgram,
    pub preamble_span: Range<usize>,
    pub steps: Vec<FunctionStep>,
    pub trailer_span: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialSolution {
    pub problem_id: String,
    pub step_count: usize,
    pub text: String,
}

impl StepSequence {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn preamble(&self) -> &str {
        &self.program.text[self.preamble_span.clone()]
    }

    pub fn trailer(&self) -> &str {
        &self.program.text[self.trailer_span.clone()]
    }

    pub fn step_source(&self, step: &FunctionStep) -> &str {
        &self.program.text[step.source_span.clone()]
    }

    pub fn step_names(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.name.as_str()).collect()
    }

    /// True when the sequence came from the whole-program fallback.
    pub fn is_fallback(&self) -> bool {
        self.steps.iter().any(|s| s.kind == StepKind::WholeProgram)
    }

    fn parts_through(&self, t: usize) -> Vec<&str> {
        let mut parts = Vec::with_capacity(t + 2);
        let pre = self.preamble();
        if !pre.is_empty() {
            parts.push(pre);
        }
        for step in &self.steps[..t] {
            parts.push(self.step_source(step));
        }
        if t == self.steps.len() {
            let tr = self.trailer();
            if !tr.is_empty() {
                parts.push(tr);
            }
        }
        parts
    }
}

/// Joins definition-level parts with a single blank line between them.
fn join_parts(parts: &[&str]) -> String {
    let mut out = parts.join("\n\n");
    out.push('\n');
    out
}

// ---------------------------------------------------------------------------
// Line scanner
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LineKind {
    Blank,
    Comment,
    Code,
}

#[derive(Debug, Clone)]
struct Line {
    start: usize,
    /// Exclusive, before the newline.
    end: usize,
    indent: usize,
    kind: LineKind,
    /// Starts inside an open bracket, string, or after a backslash.
    continuation: bool,
}

#[derive(Debug, Clone)]
struct Logical {
    first: usize,
    last: usize,
    indent: usize,
}

fn indent_width(line: &str) -> usize {
    let mut w = 0;
    for ch in line.chars() {
        match ch {
            ' ' => w += 1,
            '\t' => w = (w / 8 + 1) * 8,
            '\x0c' => w = 0,
            _ => break,
        }
    }
    w
}

fn scan_lines(text: &str) -> Result<Vec<Line>, ParseError> {
    let bytes = text.as_bytes();
    let mut lines = Vec::new();
    let mut depth: i64 = 0;
    // (quote byte, triple) of the open string literal, if any.
    let mut open_string: Option<(u8, bool, usize)> = None;
    let mut line_no = 0;
    let mut continued = false;

    let mut offset = 0;
    for segment in text.split('\n') {
        line_no += 1;
        let start = offset;
        let end = start + segment.len();
        offset = end + 1;
        let raw = &text[start..end];
        let continuation = continued || depth > 0 || open_string.is_some();
        let trimmed = raw.trim_start_matches([' ', '\t', '\x0c', '\r']);
        let kind = if continuation {
            LineKind::Code
        } else if trimmed.is_empty() {
            LineKind::Blank
        } else if trimmed.starts_with('#') {
            LineKind::Comment
        } else {
            LineKind::Code
        };
        continued = false;

        let mut i = start;
        while i < end {
            let b = bytes[i];
            if let Some((q, triple, _)) = open_string {
                if b == b'\\' {
                    i += 2;
                    continue;
                }
                if b == q {
                    if !triple {
                        open_string = None;
                    } else if i + 2 < bytes.len() && bytes[i + 1] == q && bytes[i + 2] == q {
                        open_string = None;
                        i += 3;
                        continue;
                    }
                }
                i += 1;
                continue;
            }
            match b {
                b'#' => break,
                b'\'' | b'"' => {
                    let triple = i + 2 < bytes.len() && bytes[i + 1] == b && bytes[i + 2] == b;
                    open_string = Some((b, triple, line_no));
                    i += if triple { 3 } else { 1 };
                    continue;
                }
                b'(' | b'[' | b'{' => depth += 1,
                b')' | b']' | b'}' => {
                    depth -= 1;
                    if depth < 0 {
                        return Err(ParseError::Syntax {
                            line: line_no,
                            message: format!("unmatched '{}'", b as char),
                        });
                    }
                }
                b'\\' if i + 1 == end || (i + 2 == end && bytes[i + 1] == b'\r') => {
                    continued = true;
                }
                _ => {}
            }
            i += 1;
        }
        if let Some((_, triple, _)) = open_string {
            if !triple {
                // A backslash right before the newline keeps a short string open.
                let escaped = end > start && bytes[end - 1] == b'\\';
                if !escaped {
                    return Err(ParseError::Syntax {
                        line: line_no,
                        message: "unterminated string literal".into(),
                    });
                }
            }
        }

        lines.push(Line { start, end, indent: indent_width(raw), kind, continuation });
    }

    if let Some((_, _, opened)) = open_string {
        return Err(ParseError::Syntax { line: opened, message: "unterminated triple-quoted string".into() });
    }
    if depth > 0 {
        return Err(ParseError::Syntax { line: line_no, message: "unclosed bracket at end of input".into() });
    }
    Ok(lines)
}

fn group_logical(lines: &[Line]) -> Vec<Logical> {
    let mut out: Vec<Logical> = Vec::new();
    for (idx, line) in lines.iter().enumerate() {
        if line.continuation {
            if let Some(last) = out.last_mut() {
                last.last = idx;
            }
            continue;
        }
        if line.kind == LineKind::Code {
            out.push(Logical { first: idx, last: idx, indent: line.indent });
        }
    }
    out
}

/// Returns the identifier after a leading keyword sequence such as `def` or
/// `async def`, if the statement starts with it.
fn definition_name<'a>(stmt: &'a str, keyword: &str) -> Option<&'a str> {
    let mut rest = stmt.trim_start();
    if keyword == "def" {
        if let Some(r) = rest.strip_prefix("async") {
            if r.starts_with([' ', '\t']) {
                rest = r.trim_start();
            }
        }
    }
    let r = rest.strip_prefix(keyword)?;
    if !r.starts_with([' ', '\t']) {
        return None;
    }
    let r = r.trim_start();
    let end = r.find(|c: char| !(c.is_alphanumeric() || c == '_')).unwrap_or(r.len());
    if end == 0 {
        return None;
    }
    Some(&r[..end])
}

/// Byte offset of the colon ending a compound-statement header, skipping
/// brackets and strings. Returns the offset and whether code follows it.
fn header_colon(stmt: &str) -> Option<(usize, bool)> {
    let bytes = stmt.as_bytes();
    let mut depth = 0i64;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        match b {
            b'#' => return None,
            b'\'' | b'"' => {
                i = skip_string(bytes, i)?;
                continue;
            }
            b'(' | b'[' | b'{' => depth += 1,
            b')' | b']' | b'}' => depth -= 1,
            b':' if depth == 0 => {
                let rest = &stmt[i + 1..];
                let code = rest
                    .lines()
                    .map(|l| l.split('#').next().unwrap_or("").trim())
                    .any(|l| !l.is_empty() && l != "\\");
                return Some((i, code));
            }
            _ => {}
        }
        i += 1;
    }
    None
}

/// Skips a string literal starting at `i`; returns the index after it.
fn skip_string(bytes: &[u8], i: usize) -> Option<usize> {
    let q = bytes[i];
    let triple = i + 2 < bytes.len() && bytes[i + 1] == q && bytes[i + 2] == q;
    let mut j = i + if triple { 3 } else { 1 };
    while j < bytes.len() {
        if bytes[j] == b'\\' {
            j += 2;
            continue;
        }
        if bytes[j] == q {
            if !triple {
                return Some(j + 1);
            }
            if j + 2 < bytes.len() && bytes[j + 1] == q && bytes[j + 2] == q {
                return Some(j + 3);
            }
        }
        j += 1;
    }
    None
}

/// Extracts a leading string literal's contents if `stmt` begins with one.
fn leading_string_literal(stmt: &str) -> Option<String> {
    let s = stmt.trim_start();
    let prefix_len = s.find(['"', '\'']).filter(|&p| {
        p <= 2 && s[..p].chars().all(|c| matches!(c, 'r' | 'R' | 'u' | 'U' | 'b' | 'B' | 'f' | 'F'))
    })?;
    let bytes = s.as_bytes();
    let end = skip_string(bytes, prefix_len)?;
    let q = bytes[prefix_len];
    let triple = prefix_len + 2 < bytes.len() && bytes[prefix_len + 1] == q && bytes[prefix_len + 2] == q;
    let open = if triple { 3 } else { 1 };
    Some(clean_docstring(&s[prefix_len + open..end - open]))
}

/// Indentation cleanup equivalent to Python's `inspect.cleandoc`.
fn clean_docstring(raw: &str) -> String {
    let lines: Vec<&str> = raw.lines().collect();
    if lines.is_empty() {
        return String::new();
    }
    let margin = lines
        .iter()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.len() - l.trim_start().len())
        .min()
        .unwrap_or(0);
    let mut out: Vec<String> = Vec::with_capacity(lines.len());
    out.push(lines[0].trim().to_string());
    for l in &lines[1..] {
        let cut = margin.min(l.len() - l.trim_start().len());
        out.push(l[cut..].trim_end().to_string());
    }
    while out.first().is_some_and(|l| l.is_empty()) {
        out.remove(0);
    }
    while out.last().is_some_and(|l| l.is_empty()) {
        out.pop();
    }
    out.join("\n")
}

struct Scanned<'a> {
    text: &'a str,
    lines: Vec<Line>,
    logical: Vec<Logical>,
}

impl<'a> Scanned<'a> {
    fn stmt_text(&self, lg: &Logical) -> &'a str {
        &self.text[self.lines[lg.first].start..self.lines[lg.last].end]
    }

    fn first_line_trimmed(&self, lg: &Logical) -> &'a str {
        let l = &self.lines[lg.first];
        self.text[l.start..l.end].trim()
    }

    /// Index (into `logical`) one past the block owned by the compound
    /// statement at `header`, plus the physical line index of its last line.
    fn block_end(&self, header: usize) -> (usize, usize) {
        let indent = self.logical[header].indent;
        let mut last_line = self.logical[header].last;
        let mut next = header + 1;
        while next < self.logical.len() && self.logical[next].indent > indent {
            next += 1;
        }
        let stop_line = self.logical.get(next).map_or(self.lines.len(), |lg| lg.first);
        for idx in self.logical[header].last + 1..stop_line {
            let line = &self.lines[idx];
            if line.kind == LineKind::Blank {
                continue;
            }
            if line.continuation || line.indent > indent {
                last_line = idx;
            }
        }
        (next, last_line)
    }
}

struct StepCandidate {
    /// Logical index of the `def` header.
    header: usize,
    /// Logical index of the first decorator, or the header.
    first: usize,
    name: String,
    kind: StepKind,
}

fn trim_span(text: &str, span: Range<usize>) -> Range<usize> {
    let slice = &text[span.clone()];
    let trimmed_end = slice.trim_end();
    let end = span.start + trimmed_end.len();
    // Drop leading blank lines but keep the first line's indentation.
    let mut start = span.start;
    for line in text[span.start..end].split_inclusive('\n') {
        if line.trim().is_empty() {
            start += line.len();
        } else {
            break;
        }
    }
    if start >= end {
        end..end
    } else {
        start..end
    }
}

/// Decomposes a program into function-level steps.
pub fn decompose(program: &SourceProgram) -> Result<StepSequence, ParseError> {
    let text = program.text.as_str();
    if text.trim().is_empty() {
        return Err(ParseError::EmptyProgram);
    }
    let lines = scan_lines(text)?;
    let logical = group_logical(&lines);
    let sc = Scanned { text, lines, logical };

    if let Some(first) = sc.logical.first() {
        if first.indent > 0 {
            return Err(ParseError::Syntax { line: first.first + 1, message: "unexpected indent".into() });
        }
    }

    // Validate every compound `def`/`class` header and find its body.
    for (li, lg) in sc.logical.iter().enumerate() {
        let stmt = sc.stmt_text(lg);
        let is_def = definition_name(stmt, "def").is_some();
        let is_class = definition_name(stmt, "class").is_some();
        if !(is_def || is_class) {
            continue;
        }
        let Some((_, inline)) = header_colon(stmt) else {
            return Err(ParseError::Syntax { line: lg.first + 1, message: "expected ':' after definition header".into() });
        };
        if !inline {
            let has_body = sc.logical.get(li + 1).is_some_and(|n| n.indent > lg.indent);
            if !has_body {
                return Err(ParseError::Syntax { line: lg.first + 1, message: "expected an indented block".into() });
            }
        }
    }

    let top: Vec<usize> = (0..sc.logical.len()).filter(|&i| sc.logical[i].indent == 0).collect();
    let classes: Vec<usize> = top
        .iter()
        .copied()
        .filter(|&i| definition_name(sc.stmt_text(&sc.logical[i]), "class").is_some())
        .collect();

    let mut headers: Vec<(usize, StepKind)> = top
        .iter()
        .copied()
        .filter(|&i| definition_name(sc.stmt_text(&sc.logical[i]), "def").is_some())
        .map(|i| (i, StepKind::Function))
        .collect();

    if classes.len() == 1 {
        let class_idx = classes[0];
        let (block_end, _) = sc.block_end(class_idx);
        if class_idx + 1 < block_end {
            let body_indent = sc.logical[class_idx + 1].indent;
            for i in class_idx + 1..block_end {
                let lg = &sc.logical[i];
                if lg.indent == body_indent && definition_name(sc.stmt_text(lg), "def").is_some() {
                    headers.push((i, StepKind::Method));
                }
            }
        }
    }
    headers.sort_by_key(|&(i, _)| i);

    if headers.is_empty() {
        return Err(ParseError::NoFunctions);
    }

    let candidates: Vec<StepCandidate> = headers
        .into_iter()
        .map(|(h, kind)| {
            let indent = sc.logical[h].indent;
            let mut first = h;
            while first > 0 {
                let prev = &sc.logical[first - 1];
                if prev.indent == indent && sc.first_line_trimmed(prev).starts_with('@') {
                    first -= 1;
                } else {
                    break;
                }
            }
            let name = definition_name(sc.stmt_text(&sc.logical[h]), "def").unwrap_or_default().to_string();
            StepCandidate { header: h, first, name, kind }
        })
        .collect();

    let line_start = |logical_idx: usize| sc.lines[sc.logical[logical_idx].first].start;

    let mut steps = Vec::with_capacity(candidates.len());
    for (n, cand) in candidates.iter().enumerate() {
        let start = line_start(cand.first);
        let raw_end = match candidates.get(n + 1) {
            Some(next) => line_start(next.first),
            None => {
                let (_, last_line) = sc.block_end(cand.header);
                sc.lines[last_line].end
            }
        };
        let span = trim_span(text, start..raw_end);
        let docstring = docstring_of(&sc, cand.header);
        steps.push(FunctionStep { index: n + 1, name: cand.name.clone(), docstring, source_span: span, kind: cand.kind });
    }

    let first_start = steps[0].source_span.start;
    let last_end = steps.last().map(|s| s.source_span.end).unwrap_or(0);
    let preamble_span = trim_span(text, 0..first_start);
    let trailer_span = trim_span(text, last_end..text.len());

    Ok(StepSequence { program: program.clone(), preamble_span, steps, trailer_span })
}

fn docstring_of(sc: &Scanned<'_>, header: usize) -> Option<String> {
    let hdr = &sc.logical[header];
    let stmt = sc.stmt_text(hdr);
    let (colon, inline) = header_colon(stmt)?;
    if inline {
        return leading_string_literal(&stmt[colon + 1..]);
    }
    let body = sc.logical.get(header + 1).filter(|n| n.indent > hdr.indent)?;
    leading_string_literal(sc.stmt_text(body))
}

/// Like [`decompose`], but programs that fail to parse or contain no
/// functions become a single whole-program step. The error that triggered
/// the fallback is returned alongside.
pub fn decompose_or_whole(program: &SourceProgram) -> Result<(StepSequence, Option<ParseError>), ParseError> {
    match decompose(program) {
        Ok(seq) => Ok((seq, None)),
        Err(ParseError::EmptyProgram) => Err(ParseError::EmptyProgram),
        Err(err) => Ok((whole_program(program), Some(err))),
    }
}

/// A one-step sequence covering the whole program.
pub fn whole_program(program: &SourceProgram) -> StepSequence {
    let span = trim_span(&program.text, 0..program.text.len());
    StepSequence {
        program: program.clone(),
        preamble_span: 0..0,
        steps: vec![FunctionStep {
            index: 1,
            name: WHOLE_PROGRAM_STEP.to_string(),
            docstring: None,
            source_span: span.clone(),
            kind: StepKind::WholeProgram,
        }],
        trailer_span: span.end..span.end,
    }
}

/// Partial solution through step `t` (1-based). For `t = T` the trailer is
/// included and the text equals [`reassemble`].
pub fn prefix(seq: &StepSequence, t: usize) -> Result<PartialSolution, ParseError> {
    if t == 0 || t > seq.steps.len() {
        return Err(ParseError::IndexOutOfRange { index: t, len: seq.steps.len() });
    }
    Ok(PartialSolution {
        problem_id: seq.program.problem_id.clone(),
        step_count: t,
        text: join_parts(&seq.parts_through(t)),
    })
}

/// Preamble, steps and trailer joined with single blank lines.
pub fn reassemble(seq: &StepSequence) -> SourceProgram {
    SourceProgram {
        problem_id: seq.program.problem_id.clone(),
        text: join_parts(&seq.parts_through(seq.steps.len())),
        provenance: seq.program.provenance,
    }
}

/// Builds a sequence directly from stored parts, without re-parsing.
pub fn from_parts(
    problem_id: &str,
    provenance: Provenance,
    preamble: &str,
    steps: &[(String, Option<String>, String, StepKind)],
    trailer: &str,
) -> StepSequence {
    let mut text = String::new();
    let push = |s: &str, text: &mut String| -> Range<usize> {
        if !text.is_empty() {
            text.push_str("\n\n");
        }
        let start = text.len();
        text.push_str(s);
        start..text.len()
    };
    let preamble_span = if preamble.is_empty() { 0..0 } else { push(preamble, &mut text) };
    let mut out_steps = Vec::with_capacity(steps.len());
    for (i, (name, doc, src, kind)) in steps.iter().enumerate() {
        let span = push(src, &mut text);
        out_steps.push(FunctionStep { index: i + 1, name: name.clone(), docstring: doc.clone(), source_span: span, kind: *kind });
    }
    let trailer_span = if trailer.is_empty() {
        text.len()..text.len()
    } else {
        push(trailer, &mut text)
    };
    text.push('\n');
    StepSequence {
        program: SourceProgram::new(problem_id, text, provenance),
        preamble_span,
        steps: out_steps,
        trailer_span,
    }
}

// ---------------------------------------------------------------------------
// Chain-of-Function structure checks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepFlags {
    pub has_docstring: bool,
    pub is_top_level: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CofRule {
    MissingDocstring,
    NotTopLevel,
    EntryNotFirst,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CofViolation {
    pub step: usize,
    pub rule: CofRule,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CofReport {
    pub flags: Vec<StepFlags>,
    pub ordering_ok: bool,
    pub violations: Vec<CofViolation>,
}

impl CofReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_cof(seq: &StepSequence) -> CofReport {
    validate_cof_with(seq, &DEFAULT_ENTRY_NAMES)
}

pub fn validate_cof_with(seq: &StepSequence, entry_names: &[&str]) -> CofReport {
    let mut violations = Vec::new();
    let flags: Vec<StepFlags> = seq
        .steps
        .iter()
        .map(|s| StepFlags {
            has_docstring: s.docstring.as_deref().is_some_and(|d| !d.trim().is_empty()),
            is_top_level: s.kind != StepKind::WholeProgram,
        })
        .collect();

    let ordering_ok = seq.steps.first().is_some_and(|s| match s.kind {
        StepKind::Method => true,
        StepKind::Function => entry_names.contains(&s.name.as_str()),
        StepKind::WholeProgram => false,
    });
    if !ordering_ok {
        let name = seq.steps.first().map_or("", |s| s.name.as_str());
        violations.push(CofViolation {
            step: 1,
            rule: CofRule::EntryNotFirst,
            message: format!("first step `{name}` is not a high-level entry function"),
        });
    }
    for (step, f) in seq.steps.iter().zip(&flags) {
        if !f.is_top_level {
            violations.push(CofViolation {
                step: step.index,
                rule: CofRule::NotTopLevel,
                message: format!("step `{}` is not a top-level function", step.name),
            });
        }
        if !f.has_docstring {
            violations.push(CofViolation {
                step: step.index,
                rule: CofRule::MissingDocstring,
                message: format!("step `{}` has no docstring", step.name),
            });
        }
    }
    violations.sort_by_key(|v| v.step);
    CofReport { flags, ordering_ok, violations }
}
