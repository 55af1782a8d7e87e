//! Runs candidate programs against stdin/stdout test cases in a subprocess
//! sandbox and renders the results as prompt-ready feedback.
//!
//! Isolation is best-effort: every test gets a fresh process in its own
//! process group, the working directory is an ephemeral temp dir that is
//! removed afterwards, the environment is cleared (HOME and TMPDIR point at
//! the workdir, proxy variables point at a dead port), and an optional
//! address-space limit is applied. This is not a security boundary and is
//! unsuitable for hostile code.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::process::{Command, ExitStatus, Stdio};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{outputs_match, CodeId, CodeSample, ExecutionFeedback, TestCase, Verdict, VerdictStatus};
use crate::error::ExecError;
use crate::sync::Semaphore;

pub const PROGRAM_PLACEHOLDER: &str = "{program}";
const CAPTURE_CAP: usize = 1 << 20;
const POLL_INTERVAL: Duration = Duration::from_millis(2);
const ELISION_MARKER: &str = "\n[... truncated]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkdirPolicy {
    #[default]
    EphemeralPerRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxConfig {
    /// Command line with a `{program}` placeholder for the program file.
    pub interpreter_command: String,
    pub program_filename: String,
    #[serde(with = "duration_secs")]
    pub per_test_timeout: Duration,
    pub memory_limit: Option<u64>,
    pub excerpt_limit: usize,
    pub summary_limit: usize,
    pub workdir_policy: WorkdirPolicy,
    /// Maximum simultaneous subprocesses across all calls on one sandbox.
    pub max_workers: usize,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            interpreter_command: "python3 {program}".into(),
            program_filename: "main.py".into(),
            per_test_timeout: Duration::from_secs(10),
            memory_limit: None,
            excerpt_limit: 400,
            summary_limit: 2000,
            workdir_policy: WorkdirPolicy::EphemeralPerRun,
            max_workers: thread::available_parallelism().map_or(4, |n| n.get()),
        }
    }
}

impl SandboxConfig {
    pub fn validate(&self) -> Result<(), ExecError> {
        if self.per_test_timeout.is_zero() {
            return Err(ExecError::Config("per_test_timeout must be > 0".into()));
        }
        if self.excerpt_limit == 0 {
            return Err(ExecError::Config("excerpt_limit must be > 0".into()));
        }
        if self.max_workers == 0 {
            return Err(ExecError::Config("max_workers must be > 0".into()));
        }
        let argv = shlex::split(&self.interpreter_command)
            .ok_or_else(|| ExecError::Config("interpreter_command is not valid shell syntax".into()))?;
        if argv.is_empty() {
            return Err(ExecError::Config("interpreter_command is empty".into()));
        }
        if !argv.iter().any(|a| a.contains(PROGRAM_PLACEHOLDER)) {
            return Err(ExecError::Config(format!(
                "interpreter_command lacks the {PROGRAM_PLACEHOLDER} placeholder"
            )));
        }
        if self.program_filename.contains('/') || self.program_filename.is_empty() {
            return Err(ExecError::Config("program_filename must be a bare file name".into()));
        }
        Ok(())
    }
}

/// Anything that can turn a program plus tests into feedback.
pub trait Executor: Send + Sync {
    fn run_tests(&self, code: &CodeSample, tests: &[TestCase]) -> Result<ExecutionFeedback, ExecError>;
}

impl<E: Executor + ?Sized> Executor for Arc<E> {
    fn run_tests(&self, code: &CodeSample, tests: &[TestCase]) -> Result<ExecutionFeedback, ExecError> {
        (**self).run_tests(code, tests)
    }
}

#[derive(Debug)]
pub struct SubprocessSandbox {
    config: SandboxConfig,
    argv: Vec<String>,
    workers: Semaphore,
}

impl SubprocessSandbox {
    pub fn new(config: SandboxConfig) -> Result<Self, ExecError> {
        config.validate()?;
        let argv = shlex::split(&config.interpreter_command).unwrap_or_default();
        let workers = Semaphore::new(config.max_workers);
        Ok(Self {
            config,
            argv,
            workers,
        })
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.config
    }

    fn run_one(&self, workdir: &Path, program: &Path, test: &TestCase) -> Verdict {
        let _permit = self.workers.acquire();
        let limit = self.config.excerpt_limit;
        let program = program.to_string_lossy();
        let args: Vec<String> = self
            .argv
            .iter()
            .map(|a| a.replace(PROGRAM_PLACEHOLDER, &program))
            .collect();

        let mut cmd = Command::new(&args[0]);
        cmd.args(&args[1..])
            .current_dir(workdir)
            .env_clear()
            .env("PATH", std::env::var_os("PATH").unwrap_or_default())
            .env("HOME", workdir)
            .env("TMPDIR", workdir)
            .env("LANG", "C.UTF-8")
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .env("PYTHONHASHSEED", "0");
        for var in ["http_proxy", "https_proxy", "HTTP_PROXY", "HTTPS_PROXY", "ALL_PROXY", "all_proxy"] {
            cmd.env(var, "http://127.0.0.1:9");
        }
        cmd.stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        configure_child(&mut cmd, self.config.memory_limit);

        let verdict = |status, stdout: &str, stderr: &str, wall_time| Verdict {
            status,
            input_excerpt: truncate_chars(&test.input, limit),
            expected_excerpt: truncate_chars(&test.expected_output, limit),
            stdout_excerpt: truncate_chars(stdout, limit),
            stderr_excerpt: truncate_chars(stderr, limit),
            wall_time,
        };

        let started = Instant::now();
        let mut child = match cmd.spawn() {
            Ok(child) => child,
            Err(e) => {
                return verdict(
                    VerdictStatus::SetupError,
                    "",
                    &format!("cannot start interpreter `{}`: {e}", args[0]),
                    Duration::ZERO,
                )
            }
        };
        let pid = child.id();

        let mut stdin = child.stdin.take().expect("piped stdin");
        let input = test.input.clone().into_bytes();
        let feeder = thread::spawn(move || {
            // A program that never reads its input closes the pipe early.
            let _ = stdin.write_all(&input);
        });
        let out_reader = spawn_capture(child.stdout.take().expect("piped stdout"));
        let err_reader = spawn_capture(child.stderr.take().expect("piped stderr"));

        let deadline = started + self.config.per_test_timeout;
        let mut timed_out = false;
        let exit: Option<ExitStatus> = loop {
            match child.try_wait() {
                Ok(Some(status)) => break Some(status),
                Ok(None) if Instant::now() >= deadline => {
                    timed_out = true;
                    kill_group(pid);
                    let _ = child.kill();
                    break child.wait().ok();
                }
                Ok(None) => thread::sleep(POLL_INTERVAL),
                Err(_) => break None,
            }
        };
        let wall_time = started.elapsed();
        // Reap any leftover children holding the pipes open.
        kill_group(pid);
        let _ = feeder.join();
        let stdout = out_reader.join().unwrap_or_default();
        let stderr = err_reader.join().unwrap_or_default();

        let status = if timed_out {
            VerdictStatus::Timeout
        } else {
            match exit {
                Some(s) if s.success() => {
                    if outputs_match(&stdout, &test.expected_output) {
                        VerdictStatus::Pass
                    } else {
                        VerdictStatus::WrongAnswer
                    }
                }
                _ => VerdictStatus::RuntimeError,
            }
        };
        verdict(status, &stdout, &stderr, wall_time)
    }
}

impl Executor for SubprocessSandbox {
    fn run_tests(&self, code: &CodeSample, tests: &[TestCase]) -> Result<ExecutionFeedback, ExecError> {
        if tests.is_empty() {
            return Err(ExecError::NoTests);
        }
        let workdir = tempfile::Builder::new()
            .prefix("revsearch-run-")
            .tempdir()
            .map_err(ExecError::Workdir)?;
        let program = workdir.path().join(&self.config.program_filename);
        std::fs::write(&program, &code.code).map_err(ExecError::Workdir)?;

        let verdicts: Vec<Verdict> = tests
            .iter()
            .map(|t| self.run_one(workdir.path(), &program, t))
            .collect();
        drop(workdir);
        Ok(build_feedback(verdicts, self.config.summary_limit))
    }
}

pub fn build_feedback(verdicts: Vec<Verdict>, summary_limit: usize) -> ExecutionFeedback {
    let passed_all = verdicts.iter().all(|v| v.status == VerdictStatus::Pass);
    let mut fb = ExecutionFeedback {
        verdicts,
        passed_all,
        summary: String::new(),
    };
    fb.summary = feedback_summary(&fb, summary_limit);
    fb
}

/// Deterministic textual rendering of feedback, at most `limit` characters.
pub fn feedback_summary(fb: &ExecutionFeedback, limit: usize) -> String {
    let total = fb.verdicts.len();
    let mut out = String::new();
    if fb.passed_all {
        out.push_str(&format!("All tests passed ({total}/{total})."));
    } else {
        out.push_str(&format!("Passed {}/{} tests.", fb.passed_count(), total));
        for (i, v) in fb.verdicts.iter().enumerate() {
            out.push_str(&format!("\nTest {}: {}", i + 1, v.status));
            match v.status {
                VerdictStatus::Pass => {}
                VerdictStatus::WrongAnswer => {
                    push_field(&mut out, "input", &v.input_excerpt);
                    push_field(&mut out, "expected", &v.expected_excerpt);
                    push_field(&mut out, "got", &v.stdout_excerpt);
                }
                VerdictStatus::RuntimeError => {
                    push_field(&mut out, "input", &v.input_excerpt);
                    push_field(&mut out, "stderr", &v.stderr_excerpt);
                }
                VerdictStatus::Timeout => {
                    push_field(&mut out, "input", &v.input_excerpt);
                    out.push_str("\n  time limit exceeded");
                }
                VerdictStatus::SetupError => push_field(&mut out, "error", &v.stderr_excerpt),
            }
        }
    }
    elide(out, limit)
}

fn push_field(out: &mut String, label: &str, value: &str) {
    out.push_str("\n  ");
    out.push_str(label);
    out.push_str(": ");
    out.push_str(&value.trim_end().replace('\n', "\n    "));
}

fn elide(text: String, limit: usize) -> String {
    if text.chars().count() <= limit {
        return text;
    }
    let marker_len = ELISION_MARKER.chars().count();
    if limit <= marker_len {
        return ELISION_MARKER.chars().skip(marker_len - limit).collect();
    }
    let mut kept = truncate_chars(&text, limit - marker_len);
    kept.push_str(ELISION_MARKER);
    kept
}

pub fn truncate_chars(s: &str, limit: usize) -> String {
    match s.char_indices().nth(limit) {
        Some((idx, _)) => s[..idx].to_string(),
        None => s.to_string(),
    }
}

fn spawn_capture<R: Read + Send + 'static>(mut pipe: R) -> thread::JoinHandle<String> {
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut buf = [0u8; 8192];
        loop {
            match pipe.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = CAPTURE_CAP.saturating_sub(kept.len());
                    kept.extend_from_slice(&buf[..n.min(room)]);
                }
            }
        }
        String::from_utf8_lossy(&kept).into_owned()
    })
}

#[cfg(unix)]
fn configure_child(cmd: &mut Command, memory_limit: Option<u64>) {
    use std::os::unix::process::CommandExt;
    cmd.process_group(0);
    if let Some(bytes) = memory_limit {
        // SAFETY: setrlimit is async-signal-safe and touches only the child.
        unsafe {
            cmd.pre_exec(move || {
                let lim = libc::rlimit {
                    rlim_cur: bytes as libc::rlim_t,
                    rlim_max: bytes as libc::rlim_t,
                };
                if libc::setrlimit(libc::RLIMIT_AS, &lim) != 0 {
                    return Err(std::io::Error::last_os_error());
                }
                Ok(())
            });
        }
    }
}

#[cfg(not(unix))]
fn configure_child(_cmd: &mut Command, _memory_limit: Option<u64>) {}

#[cfg(unix)]
fn kill_group(pid: u32) {
    // SAFETY: signalling our own child's process group.
    unsafe {
        libc::kill(-(pid as libc::pid_t), libc::SIGKILL);
    }
}

#[cfg(not(unix))]
fn kill_group(_pid: u32) {}

/// Memoizes feedback per (program, test list). Sound only for deterministic
/// programs, which is what the judge assumes anyway.
pub struct CachedExecutor<E> {
    inner: E,
    cache: Mutex<HashMap<(CodeId, [u8; 32]), ExecutionFeedback>>,
}

impl<E: Executor> CachedExecutor<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.cache.lock().map(|c| c.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn tests_digest(tests: &[TestCase]) -> [u8; 32] {
    let mut h = Sha256::new();
    for t in tests {
        h.update((t.input.len() as u64).to_le_bytes());
        h.update(t.input.as_bytes());
        h.update((t.expected_output.len() as u64).to_le_bytes());
        h.update(t.expected_output.as_bytes());
    }
    h.finalize().into()
}

impl<E: Executor> Executor for CachedExecutor<E> {
    fn run_tests(&self, code: &CodeSample, tests: &[TestCase]) -> Result<ExecutionFeedback, ExecError> {
        let key = (code.id.clone(), tests_digest(tests));
        if let Some(hit) = self.cache.lock().unwrap_or_else(|e| e.into_inner()).get(&key) {
            return Ok(hit.clone());
        }
        let fb = self.inner.run_tests(code, tests)?;
        self.cache
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(key, fb.clone());
        Ok(fb)
    }
}

mod duration_secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}
