use std::collections::BTreeMap;
use std::path::PathBuf;

use prm_core::step_parser::{decompose, decompose_or_whole, prefix, reassemble, validate_cof, Provenance, SourceProgram, StepKind};
use serde::Deserialize;

#[derive(Deserialize)]
struct Expected {
    steps: Vec<String>,
    fallback: bool,
}

fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/cof")
}

fn corpus() -> Vec<(String, SourceProgram, Expected)> {
    let dir = corpus_dir();
    let manifest: BTreeMap<String, Expected> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("expected.json")).unwrap()).unwrap();
    manifest
        .into_iter()
        .map(|(name, exp)| {
            let text = std::fs::read_to_string(dir.join(&name)).unwrap();
            let program = SourceProgram::new(name.trim_end_matches(".py"), text, Provenance::Fixture);
            (name, program, exp)
        })
        .collect()
}

#[test]
fn manifest_covers_every_fixture() {
    let corpus = corpus();
    let on_disk = std::fs::read_dir(corpus_dir())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "py"))
        .count();
    assert_eq!(on_disk, corpus.len());
    assert!(corpus.len() >= 20);
    assert!(corpus.iter().filter(|(n, _, _)| n.starts_with("adv_")).count() >= 5);
}

#[test]
fn step_names_match_hand_labels() {
    for (name, program, exp) in corpus() {
        let (seq, err) = decompose_or_whole(&program).unwrap();
        assert_eq!(seq.step_names(), exp.steps, "{name}");
        assert_eq!(seq.is_fallback(), exp.fallback, "{name}");
        assert_eq!(err.is_some(), exp.fallback, "{name}: {err:?}");
    }
}

#[test]
fn reassembly_is_a_fixed_point() {
    for (name, program, exp) in corpus() {
        let (seq, _) = decompose_or_whole(&program).unwrap();
        let once = reassemble(&seq);
        let (seq2, _) = decompose_or_whole(&once).unwrap();
        assert_eq!(seq2.step_names(), seq.step_names(), "{name}");
        let twice = reassemble(&seq2);
        assert_eq!(twice.text, once.text, "{name}");
        if !exp.fallback {
            let seq3 = decompose(&once).unwrap();
            for (a, b) in seq.steps.iter().zip(&seq3.steps) {
                assert_eq!(seq.step_source(a), seq3.step_source(b), "{name}");
                assert_eq!(a.docstring, b.docstring, "{name}");
            }
        }
    }
}

#[test]
fn steps_cover_every_significant_line() {
    for (name, program, _) in corpus() {
        let (seq, _) = decompose_or_whole(&program).unwrap();
        let whole = reassemble(&seq).text;
        let rebuilt: Vec<&str> = whole.lines().map(str::trim_end).filter(|l| !l.trim().is_empty()).collect();
        let original: Vec<&str> = program.text.lines().map(str::trim_end).filter(|l| !l.trim().is_empty()).collect();
        assert_eq!(rebuilt, original, "{name}");
    }
}

#[test]
fn prefixes_grow_monotonically() {
    for (name, program, _) in corpus() {
        let (seq, _) = decompose_or_whole(&program).unwrap();
        let mut last = String::new();
        for t in 1..=seq.len() {
            let p = prefix(&seq, t).unwrap();
            assert_eq!(p.step_count, t);
            assert!(p.text.starts_with(last.trim_end()), "{name} t={t}");
            assert!(p.text.len() > last.len(), "{name} t={t}");
            for step in &seq.steps[..t] {
                assert!(p.text.contains(seq.step_source(step)), "{name} t={t}");
            }
            last = p.text;
        }
        assert_eq!(last, reassemble(&seq).text, "{name}");
        assert!(prefix(&seq, 0).is_err());
        assert!(prefix(&seq, seq.len() + 1).is_err());
    }
}

#[test]
fn printed_solutions_keep_their_docstrings() {
    let corpus = corpus();
    let get = |n: &str| corpus.iter().find(|(name, _, _)| name == n).unwrap();

    let (_, lc, _) = get("leetcode_kth_character.py");
    let seq = decompose(lc).unwrap();
    assert!(seq.steps.iter().all(|s| s.kind == StepKind::Method));
    let doc = seq.steps[0].docstring.as_deref().unwrap();
    assert!(doc.contains("until length >= k. Return the k-th character (1-indexed)."));
    assert!(validate_cof(&seq).is_clean());

    let (_, ac, _) = get("atcoder_two_subsequences.py");
    let seq = decompose(ac).unwrap();
    assert!(seq.preamble().is_empty());
    assert!(seq.trailer().is_empty());
    assert!(seq.steps.iter().all(|s| s.docstring.is_some()));
    assert!(validate_cof(&seq).is_clean());
}

#[test]
fn structure_checks_flag_the_adversarial_cases() {
    let corpus = corpus();
    let report = |n: &str| {
        let (_, p, _) = corpus.iter().find(|(name, _, _)| name == n).unwrap();
        validate_cof(&decompose_or_whole(p).unwrap().0)
    };
    assert!(!report("adv_helpers_first.py").ordering_ok);
    assert!(!report("adv_missing_docstrings.py").is_clean());
    assert!(!report("adv_zero_functions.py").is_clean());
    assert!(report("graph_bfs.py").is_clean());
}
