//! Prompt text sent to live model backends.

pub const COF_INTRO: &str = "You will be given a question (problem specification) and will generate a correct Python program that matches the specification and passes all tests. Follow the code organization guidelines below:";

/// Section headers the generation prompt must carry verbatim.
pub const COF_SECTION_HEADERS: [&str; 4] =
    ["Logic decomposition", "Function organization", "Docstrings in each function", "Example demonstration"];

const COF_SECTION_BODIES: [&str; 4] = [
    "Extract logic into separate functions when operations are repeated or when complex calculations can be isolated.",
    "Place high-level solving functions first (e.g., main()). Follow with helper functions that implement specific subtasks. Avoid nested functions; keep all functions at the top level.",
    "Add a docstring using triple quotes at the beginning of each function. Main methods should explain the approach, algorithm choice, strategy, and key steps; helper methods should explain their specific logic and purpose.",
    "The following example illustrates the code structure and docstring style only. Solve the actual problem, not the example algorithm.",
];

/// Bundled few-shot program, replaceable through the run config.
pub const DEFAULT_FEW_SHOT: &str = r#"import sys


def main():
    """
    Read n integers and print the length of the longest strictly increasing
    contiguous run. Scan once, tracking the current run and the best seen.
    """
    data = sys.stdin.read().split()
    n = int(data[0])
    values = [int(x) for x in data[1:1 + n]]
    print(longest_increasing_run(values))


def longest_increasing_run(values):
    """
    Return the length of the longest strictly increasing contiguous run,
    or 0 for an empty list.
    """
    best = 0
    current = 0
    for i, v in enumerate(values):
        current = current + 1 if i > 0 and v > values[i - 1] else 1
        best = max(best, current)
    return best


if __name__ == "__main__":
    main()
"#;

/// Full generation system prompt with `few_shot` in the example slot.
pub fn cof_system_prompt(few_shot: &str) -> String {
    let mut out = String::from(COF_INTRO);
    for (header, body) in COF_SECTION_HEADERS.iter().zip(COF_SECTION_BODIES) {
        out.push_str("\n\n");
        out.push_str(header);
        out.push_str(": ");
        out.push_str(body);
    }
    out.push_str("\n\n```python\n");
    out.push_str(few_shot.trim_end());
    out.push_str("\n```");
    out
}

pub const PRM_SYSTEM_PROMPT: &str = "You are an advanced AI assistant designed to serve as a process supervision model for coding problems. The programming problem is described in <problem>...</problem>, and the solution to be evaluated (which may be partial or complete) is provided in <code>...</code>. Your role is to assess whether the code and reasoning expressed so far are correct with respect to the requirements stated in <problem>...</problem>.\n\nFor each step, respond with + if you believe the solution is correct up to and including the given <code>...</code>, and respond with - if you detect any issues, errors, or incorrect logic up to this point. Only respond with + or -. Do not provide any additional explanations, comments, or justifications. Your task is strictly to verify the correctness of the solution prefix provided so far.";

pub fn prm_user_message(problem_statement: &str, code: &str) -> String {
    format!("<problem>\n{problem_statement}\n</problem>\n<code>\n{code}\n</code>")
}

pub fn generation_user_message(problem_statement: &str) -> String {
    format!("Question:\n{problem_statement}\n\nReturn the complete program in a single ```python code block.")
}

/// Pulls the program out of a model reply: the first fenced block if there
/// is one, otherwise the whole reply.
pub fn extract_code(reply: &str) -> String {
    if let Some(start) = reply.find("```") {
        let after = &reply[start + 3..];
        let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
        let body = &after[body_start..];
        let end = body.find("```").unwrap_or(body.len());
        return body[..end].trim_end().to_string() + "\n";
    }
    reply.trim().to_string() + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::step_parser::{decompose, validate_cof, Provenance, SourceProgram};

    #[test]
    fn prompt_carries_all_headers_and_example() {
        let p = cof_system_prompt(DEFAULT_FEW_SHOT);
        for h in COF_SECTION_HEADERS {
            assert!(p.contains(h), "{h}");
        }
        assert!(p.contains("def longest_increasing_run(values):"));
        assert!(PRM_SYSTEM_PROMPT.contains("Only respond with + or -"));
    }

    #[test]
    fn few_shot_is_itself_well_formed() {
        let seq = decompose(&SourceProgram::new("ex", DEFAULT_FEW_SHOT, Provenance::Fixture)).unwrap();
        assert_eq!(seq.step_names(), ["main", "longest_increasing_run"]);
        assert!(validate_cof(&seq).is_clean());
    }

    #[test]
    fn code_extraction() {
        assert_eq!(extract_code("Here:\n```python\nprint(1)\n```\nDone"), "print(1)\n");
        assert_eq!(extract_code("print(2)"), "print(2)\n");
        assert_eq!(extract_code("```\nx = 1\n"), "x = 1\n");
    }
}
