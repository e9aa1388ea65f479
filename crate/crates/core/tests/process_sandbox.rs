use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};

use prm_core::exec::sandbox::{decode_response_line, Handshake};
use prm_core::exec::{evaluate_final, Comparison, ProcessSandbox, Sandbox, SandboxError, SandboxRequest, TestCase, TestMode, TestStatus};
use prm_core::step_parser::{Provenance, SourceProgram};

fn runner() -> Option<PathBuf> {
    let ok = Command::new("python3").arg("--version").output().is_ok_and(|o| o.status.success());
    if !ok {
        eprintln!("python3 not found; skipping");
        return None;
    }
    Some(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/fake_runner.py"))
}

fn sandbox(path: PathBuf) -> ProcessSandbox {
    ProcessSandbox::connect("python3", vec![path.to_string_lossy().into_owned()]).unwrap()
}

fn stdin_test(id: &str, input: &str, expected: &str) -> TestCase {
    TestCase { id: id.into(), mode: TestMode::StdinStdout, input: input.into(), expected_output: Some(expected.into()), time_limit_ms: 2000 }
}

fn assertion(id: &str, src: &str) -> TestCase {
    TestCase { id: id.into(), mode: TestMode::Assertion, input: src.into(), expected_output: None, time_limit_ms: 5000 }
}

const KTH: &str = include_str!("fixtures/cof/leetcode_kth_character.py");

#[test]
fn printed_leetcode_solution_passes_and_a_raising_one_scores_zero() {
    let Some(path) = runner() else { return };
    let sb = sandbox(path);
    let tests = vec![
        assertion("k5", "assert Solution().kthCharacter(5) == 'b'"),
        assertion("k10", "assert Solution().kthCharacter(10) == 'c'"),
    ];
    let good = SourceProgram::new("kth", KTH, Provenance::Fixture);
    let (outcome, reward) = evaluate_final(&sb, &good, &tests, Comparison::Normalized).unwrap();
    assert!(reward.passed(), "{outcome:?}");
    assert_eq!(outcome.runner_version, "fake-runner/0.1");

    let bad = SourceProgram::new("kth", KTH.replace("return word[k - 1]", "raise ValueError(k)"), Provenance::Fixture);
    let (outcome, reward) = evaluate_final(&sb, &bad, &tests, Comparison::Normalized).unwrap();
    assert_eq!(reward.value, 0.0);
    assert!(outcome.results.iter().all(|r| r.status == TestStatus::Error));
    assert!(outcome.results[0].stderr.contains("ValueError"));
}

#[test]
fn stdin_comparison_and_timeouts() {
    let Some(path) = runner() else { return };
    let sb = sandbox(path);
    let echo = "print(input() + ' ')";
    let req = SandboxRequest::new(echo, &[stdin_test("a", "5\n", "5")], Comparison::Exact);
    assert_eq!(sb.run(&req).unwrap().results[0].status, TestStatus::Fail);
    let req = SandboxRequest::new(echo, &[stdin_test("a", "5\n", "5")], Comparison::Normalized);
    assert_eq!(sb.run(&req).unwrap().results[0].status, TestStatus::Pass);

    let mut spin = stdin_test("spin", "", "");
    spin.time_limit_ms = 300;
    let req = SandboxRequest::new("while True:\n    pass\n", &[spin], Comparison::Normalized);
    let r = &sb.run(&req).unwrap().results[0];
    assert_eq!(r.status, TestStatus::Timeout);
    assert!(r.duration_ms >= 300);
}

#[test]
fn concurrent_callers_get_their_own_workers() {
    let Some(path) = runner() else { return };
    let sb = sandbox(path);
    std::thread::scope(|s| {
        for i in 0..3 {
            let sb = &sb;
            s.spawn(move || {
                let req = SandboxRequest::new("print(int(input()) * 2)", &[stdin_test("t", &format!("{i}\n"), &format!("{}", i * 2))], Comparison::Normalized);
                assert_eq!(sb.run(&req).unwrap().results[0].status, TestStatus::Pass);
            });
        }
    });
}

#[test]
fn malformed_lines_are_rejected_by_the_runner() {
    let Some(path) = runner() else { return };
    let mut child = Command::new("python3").arg(path).stdin(Stdio::piped()).stdout(Stdio::piped()).spawn().unwrap();
    let mut stdin = child.stdin.take().unwrap();
    let mut out = BufReader::new(child.stdout.take().unwrap());
    let mut line = String::new();
    out.read_line(&mut line).unwrap();
    let hs: Handshake = serde_json::from_str(&line).unwrap();
    assert_eq!(hs.protocol_version, 1);

    let req = SandboxRequest::new("print(1)", &[stdin_test("t", "", "1")], Comparison::Normalized);
    for bad in ["not json", "{}", r#"{"solution_source":"x","tests":[],"time_limit_ms":500,"comparison":"exact"}"#] {
        writeln!(stdin, "{bad}").unwrap();
        line.clear();
        out.read_line(&mut line).unwrap();
        assert!(matches!(decode_response_line(&req, &line), Err(SandboxError::MalformedRequest(_))), "{line}");
    }
    drop(stdin);
    child.wait().unwrap();
}

#[test]
fn missing_runner_is_unavailable() {
    let err = ProcessSandbox::connect("/nonexistent/runner", vec![]).err().unwrap();
    assert!(matches!(err, SandboxError::Unavailable(_)));
}
