//! Shared fixtures for unit tests.

use std::sync::Arc;
use std::time::Duration;

use crate::domain::{CodeSample, ExecutionFeedback, Task, TestCase, Verdict, VerdictStatus};
use crate::error::ExecError;
use crate::executor::{build_feedback, Executor};
use crate::policy::{MockScript, Policy, ScriptedModel};

/// Interprets a `# pass N` marker line: the first N tests pass, the rest
/// are wrong answers. `# crash` fails every test with a runtime error.
pub struct MarkerExecutor;

pub fn marker_passes(code: &str) -> Option<usize> {
    code.lines()
        .find_map(|l| l.trim().strip_prefix("# pass "))
        .and_then(|n| n.trim().parse().ok())
}

impl Executor for MarkerExecutor {
    fn run_tests(&self, code: &CodeSample, tests: &[TestCase]) -> Result<ExecutionFeedback, ExecError> {
        let crash = code.code.contains("# crash");
        let passes = marker_passes(&code.code).unwrap_or(0);
        let verdicts = tests
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let status = if crash {
                    VerdictStatus::RuntimeError
                } else if i < passes {
                    VerdictStatus::Pass
                } else {
                    VerdictStatus::WrongAnswer
                };
                Verdict {
                    status,
                    input_excerpt: t.input.clone(),
                    expected_excerpt: t.expected_output.clone(),
                    stdout_excerpt: String::new(),
                    stderr_excerpt: String::new(),
                    wall_time: Duration::ZERO,
                }
            })
            .collect();
        Ok(build_feedback(verdicts, 2000))
    }
}

pub fn task(n_public: usize, n_private: usize) -> Task {
    let case = |i: usize| TestCase::new(format!("{i}\n"), format!("{}\n", i * 2));
    Task {
        id: "double".into(),
        statement: "Print twice the input integer.".into(),
        public_tests: (0..n_public).map(case).collect(),
        private_tests: (n_public..n_public + n_private).map(case).collect(),
    }
}

pub fn policy(script: &str) -> Policy {
    let script: MockScript = serde_json::from_str(script).expect("valid script");
    Policy::new(Arc::new(ScriptedModel::new(script).expect("valid rules")))
}

pub fn code_reply(body: &str) -> String {
    format!("Here you go.\n```python\n{body}\n```")
}
