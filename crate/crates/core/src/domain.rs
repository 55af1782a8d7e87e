//! Domain types shared across the engine: tasks, code samples, execution
//! feedback, composite scores, and the Pass@k estimator.

use std::cmp::Ordering;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::DomainError;

/// One stdin/stdout test case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub input: String,
    pub expected_output: String,
}

impl TestCase {
    pub fn new(input: impl Into<String>, expected_output: impl Into<String>) -> Self {
        Self {
            input: input.into(),
            expected_output: expected_output.into(),
        }
    }
}

/// A code-generation problem: statement, public tests, private tests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub statement: String,
    pub public_tests: Vec<TestCase>,
    #[serde(default)]
    pub private_tests: Vec<TestCase>,
}

impl Task {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.id.trim().is_empty() {
            return Err(DomainError::InvalidTask("task id is empty".into()));
        }
        if self.public_tests.is_empty() {
            return Err(DomainError::InvalidTask(format!(
                "task {} has no public tests",
                self.id
            )));
        }
        Ok(())
    }

    /// Tests used for final correctness: public plus private.
    pub fn all_tests(&self) -> Vec<TestCase> {
        self.public_tests
            .iter()
            .chain(self.private_tests.iter())
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Draft,
    HcRevision,
    GaCrossover,
    TreeRevision,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl TokenUsage {
    pub fn new(prompt_tokens: u64, completion_tokens: u64) -> Self {
        Self {
            prompt_tokens,
            completion_tokens,
        }
    }

    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

impl std::ops::Add for TokenUsage {
    type Output = TokenUsage;

    fn add(self, rhs: TokenUsage) -> TokenUsage {
        TokenUsage {
            prompt_tokens: self.prompt_tokens + rhs.prompt_tokens,
            completion_tokens: self.completion_tokens + rhs.completion_tokens,
        }
    }
}

impl std::ops::AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: TokenUsage) {
        *self = *self + rhs;
    }
}

/// Content digest of a program's exact bytes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CodeId(String);

impl CodeId {
    pub fn of(code: &str) -> Self {
        let digest = Sha256::digest(code.as_bytes());
        CodeId(hex::encode(&digest[..8]))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One candidate program plus provenance. Identity is the code digest only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSample {
    pub id: CodeId,
    pub code: String,
    pub origin: Origin,
    pub parent_ids: Vec<CodeId>,
    pub token_usage: TokenUsage,
}

impl CodeSample {
    pub fn new(code: impl Into<String>, origin: Origin, parent_ids: Vec<CodeId>) -> Self {
        let code = code.into();
        Self {
            id: CodeId::of(&code),
            code,
            origin,
            parent_ids,
            token_usage: TokenUsage::default(),
        }
    }

    pub fn draft(code: impl Into<String>) -> Self {
        Self::new(code, Origin::Draft, Vec::new())
    }

    pub fn with_usage(mut self, usage: TokenUsage) -> Self {
        self.token_usage = usage;
        self
    }
}

/// Byte-wise lexicographic order on the UTF-8 code text.
pub fn canonical_code_order(a: &CodeSample, b: &CodeSample) -> Ordering {
    a.code.as_bytes().cmp(b.code.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VerdictStatus {
    Pass,
    WrongAnswer,
    RuntimeError,
    Timeout,
    SetupError,
}

impl fmt::Display for VerdictStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            VerdictStatus::Pass => "Pass",
            VerdictStatus::WrongAnswer => "WrongAnswer",
            VerdictStatus::RuntimeError => "RuntimeError",
            VerdictStatus::Timeout => "Timeout",
            VerdictStatus::SetupError => "SetupError",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub status: VerdictStatus,
    pub input_excerpt: String,
    pub expected_excerpt: String,
    pub stdout_excerpt: String,
    pub stderr_excerpt: String,
    #[serde(with = "duration_millis")]
    pub wall_time: Duration,
}

/// Per-test verdicts plus a prompt-ready summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionFeedback {
    pub verdicts: Vec<Verdict>,
    pub passed_all: bool,
    pub summary: String,
}

impl ExecutionFeedback {
    pub fn passed_count(&self) -> usize {
        self.verdicts
            .iter()
            .filter(|v| v.status == VerdictStatus::Pass)
            .count()
    }

    pub fn failed_count(&self) -> usize {
        self.verdicts.len() - self.passed_count()
    }

    pub fn has_runtime_error(&self) -> bool {
        self.verdicts
            .iter()
            .any(|v| v.status == VerdictStatus::RuntimeError)
    }

    pub fn statuses(&self) -> Vec<VerdictStatus> {
        self.verdicts.iter().map(|v| v.status).collect()
    }
}

/// Trim trailing whitespace on every line and drop trailing blank lines.
pub fn normalize_output(s: &str) -> String {
    let mut lines: Vec<&str> = s.lines().map(|l| l.trim_end()).collect();
    while lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    lines.join("\n")
}

pub fn outputs_match(actual: &str, expected: &str) -> bool {
    normalize_output(actual) == normalize_output(expected)
}

/// A reward value: finite, or the negative-infinity sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reward(f64);

impl Reward {
    pub const NEG_INFINITY: Reward = Reward(f64::NEG_INFINITY);

    pub fn new(value: f64) -> Result<Self, DomainError> {
        if value.is_finite() || value == f64::NEG_INFINITY {
            Ok(Reward(value))
        } else {
            Err(DomainError::NonFiniteReward(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_sentinel(self) -> bool {
        self.0 == f64::NEG_INFINITY
    }
}

impl Eq for Reward {}

impl PartialOrd for Reward {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Reward {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl Serialize for Reward {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if self.is_sentinel() {
            serializer.serialize_str("-inf")
        } else {
            serializer.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Reward {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Num(v) => Reward::new(v).map_err(serde::de::Error::custom),
            Raw::Text(s) if s == "-inf" => Ok(Reward::NEG_INFINITY),
            Raw::Text(s) => Err(serde::de::Error::custom(format!("invalid reward {s:?}"))),
        }
    }
}

impl fmt::Display for Reward {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_sentinel() {
            f.write_str("-inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

/// Lexicographic (passes_public, reward) score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositeScore {
    pub passes_public: bool,
    pub reward: Reward,
}

impl CompositeScore {
    pub fn new(passes_public: bool, reward: Reward) -> Self {
        Self {
            passes_public,
            reward,
        }
    }

    pub fn sentinel() -> Self {
        Self::new(false, Reward::NEG_INFINITY)
    }
}

impl PartialOrd for CompositeScore {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for CompositeScore {
    fn cmp(&self, other: &Self) -> Ordering {
        compare_scores(self, other)
    }
}

pub fn compare_scores(a: &CompositeScore, b: &CompositeScore) -> Ordering {
    a.passes_public
        .cmp(&b.passes_public)
        .then_with(|| a.reward.cmp(&b.reward))
}

/// Index of the best candidate: max score, ties to the byte-wise smallest code.
pub fn argmax_candidate(candidates: &[CodeSample], scores: &[CompositeScore]) -> Option<usize> {
    debug_assert_eq!(candidates.len(), scores.len());
    (0..candidates.len()).reduce(|best, i| {
        match compare_scores(&scores[i], &scores[best]) {
            Ordering::Greater => i,
            Ordering::Less => best,
            Ordering::Equal => {
                if canonical_code_order(&candidates[i], &candidates[best]) == Ordering::Less {
                    i
                } else {
                    best
                }
            }
        }
    })
}

/// One search step: what was tried, what was observed, how it scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub sample: CodeSample,
    pub feedback: ExecutionFeedback,
    pub score: CompositeScore,
}

/// Append-only trajectory of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    entries: Vec<HistoryEntry>,
}

impl History {
    pub fn push(&mut self, entry: HistoryEntry) {
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[HistoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Unbiased Pass@k estimator `1 - C(n-c, k) / C(n, k)`, evaluated as the
/// running product `prod_{i=n-c+1}^{n} (1 - k/i)`.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64, DomainError> {
    if c > n {
        return Err(DomainError::PassAtK(format!("c={c} exceeds n={n}")));
    }
    if k == 0 || k > n {
        return Err(DomainError::PassAtK(format!("k={k} outside 1..={n}")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let kf = k as f64;
    let prod = ((n - c + 1)..=n).fold(1.0_f64, |acc, i| acc * (1.0 - kf / i as f64));
    Ok((1.0 - prod).clamp(0.0, 1.0))
}

mod duration_millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}
