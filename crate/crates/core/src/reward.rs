//! Candidate evaluation: pluggable reward scorers and the pass-gated
//! scoring rule that turns raw rewards into composite scores.

use std::time::Duration;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::domain::{CodeSample, CompositeScore, ExecutionFeedback, Reward, Task};
use crate::error::{DomainError, PolicyError, ScorerError};
use crate::policy::{CallContext, Policy};

pub const FEATURE_NAMES: [&str; 5] = [
    "public_pass_fraction",
    "failing_test_fraction",
    "runtime_error",
    "code_length",
    "edit_distance_to_reference",
];

/// Code length (in chars) at which the length feature saturates.
pub const LENGTH_SCALE: f64 = 2000.0;

/// Everything a scorer may look at for one candidate.
#[derive(Clone, Copy)]
pub struct ScoreInput<'a> {
    pub task: &'a Task,
    pub code: &'a CodeSample,
    pub feedback: &'a ExecutionFeedback,
    /// The program this candidate was derived from (the incumbent), if any.
    pub reference: Option<&'a CodeSample>,
    pub ctx: CallContext<'a>,
}

pub trait Scorer: Send + Sync {
    fn name(&self) -> &'static str;
    fn score(&self, input: &ScoreInput<'_>) -> Result<f64, ScorerError>;
}

/// Serializable choice of scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardScorer {
    PassRate,
    SelfEval,
    ExternalRm { endpoint: String },
    LocalBt { weights: Vec<f64> },
}

impl RewardScorer {
    pub fn build(&self, policy: &Policy) -> Result<Box<dyn Scorer>, String> {
        Ok(match self {
            RewardScorer::PassRate => Box::new(PassRateScorer),
            RewardScorer::SelfEval => Box::new(SelfEvalScorer::new(policy.clone())),
            RewardScorer::ExternalRm { endpoint } => Box::new(ExternalRmScorer::new(endpoint)?),
            RewardScorer::LocalBt { weights } => Box::new(LocalBtScorer::new(weights.clone())?),
        })
    }
}

pub fn pass_rate(fb: &ExecutionFeedback) -> Result<f64, DomainError> {
    if fb.verdicts.is_empty() {
        return Err(DomainError::InvalidTask("pass rate of zero verdicts".into()));
    }
    Ok(fb.passed_count() as f64 / fb.verdicts.len() as f64)
}

pub struct PassRateScorer;

impl Scorer for PassRateScorer {
    fn name(&self) -> &'static str {
        "pass_rate"
    }

    fn score(&self, input: &ScoreInput<'_>) -> Result<f64, ScorerError> {
        Ok(pass_rate(input.feedback)?)
    }
}

pub struct SelfEvalScorer {
    policy: Policy,
}

impl SelfEvalScorer {
    pub fn new(policy: Policy) -> Self {
        Self { policy }
    }
}

impl Scorer for SelfEvalScorer {
    fn name(&self) -> &'static str {
        "self_eval"
    }

    fn score(&self, input: &ScoreInput<'_>) -> Result<f64, ScorerError> {
        match self.policy.self_evaluate(input.task, input.code, &input.ctx) {
            Ok(v) => Ok(v),
            Err(PolicyError::Parse(msg)) => {
                warn!("self-evaluation of {} unparseable ({msg}); scoring 0", input.code.id);
                Ok(0.0)
            }
            Err(e) => Err(e.into()),
        }
    }
}

/// Client for a reward-model service: `POST {endpoint}/score` with
/// `{"statement", "code"}`, answered by `{"score": number}`.
pub struct ExternalRmScorer {
    endpoint: String,
    agent: ureq::Agent,
}

impl ExternalRmScorer {
    pub fn new(endpoint: &str) -> Result<Self, String> {
        if !(endpoint.starts_with("http://") || endpoint.starts_with("https://")) {
            return Err(format!("reward endpoint {endpoint:?} is not an http(s) URL"));
        }
        Ok(Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(120))
                .build(),
        })
    }
}

impl Scorer for ExternalRmScorer {
    fn name(&self) -> &'static str {
        "external_rm"
    }

    fn score(&self, input: &ScoreInput<'_>) -> Result<f64, ScorerError> {
        external_rm_score_with(&self.agent, input.task, input.code, &self.endpoint)
    }
}

pub fn external_rm_score(task: &Task, code: &CodeSample, endpoint: &str) -> Result<f64, ScorerError> {
    external_rm_score_with(&ureq::agent(), task, code, endpoint.trim_end_matches('/'))
}

fn external_rm_score_with(agent: &ureq::Agent, task: &Task, code: &CodeSample, endpoint: &str) -> Result<f64, ScorerError> {
    let resp = agent
        .post(&format!("{endpoint}/score"))
        .send_json(json!({"statement": task.statement, "code": code.code}))
        .map_err(|e| ScorerError::Transport(e.to_string()))?;
    let body: serde_json::Value = resp
        .into_json()
        .map_err(|e| ScorerError::Shape(format!("response is not JSON: {e}")))?;
    let score = body
        .get("score")
        .and_then(serde_json::Value::as_f64)
        .ok_or_else(|| ScorerError::Shape(format!("missing numeric \"score\" in {body}")))?;
    if !score.is_finite() {
        return Err(ScorerError::Shape(format!("non-finite score {score}")));
    }
    Ok(score)
}

/// Fixed-length feature vector in [0, 1]^5, ordered as [`FEATURE_NAMES`].
pub fn extract_features(code: &str, fb: &ExecutionFeedback, reference: Option<&str>) -> Vec<f64> {
    let total = fb.verdicts.len().max(1) as f64;
    let len = code.chars().count();
    let edit = match reference {
        Some(r) => {
            let denom = len.max(r.chars().count()).max(1) as f64;
            (strsim::levenshtein(code, r) as f64 / denom).min(1.0)
        }
        None => 0.0,
    };
    vec![
        fb.passed_count() as f64 / total,
        fb.failed_count() as f64 / total,
        if fb.has_runtime_error() { 1.0 } else { 0.0 },
        (len as f64 / LENGTH_SCALE).min(1.0),
        edit,
    ]
}

pub fn local_bt_score(features: &[f64], weights: &[f64]) -> Result<f64, ScorerError> {
    if features.len() != weights.len() {
        return Err(ScorerError::LengthMismatch {
            features: features.len(),
            weights: weights.len(),
        });
    }
    Ok(features.iter().zip(weights).map(|(f, w)| f * w).sum())
}

/// Linear Bradley-Terry reward over [`extract_features`].
pub struct LocalBtScorer {
    weights: Vec<f64>,
}

impl LocalBtScorer {
    pub fn new(weights: Vec<f64>) -> Result<Self, String> {
        if weights.len() != FEATURE_NAMES.len() {
            return Err(format!(
                "local_bt expects {} weights, got {}",
                FEATURE_NAMES.len(),
                weights.len()
            ));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err("local_bt weights must be finite".into());
        }
        Ok(Self { weights })
    }
}

impl Scorer for LocalBtScorer {
    fn name(&self) -> &'static str {
        "local_bt"
    }

    fn score(&self, input: &ScoreInput<'_>) -> Result<f64, ScorerError> {
        let features = extract_features(
            &input.code.code,
            input.feedback,
            input.reference.map(|r| r.code.as_str()),
        );
        local_bt_score(&features, &self.weights)
    }
}

/// Pass-gated scoring. With no candidate passing every public test, all
/// candidates are ranked by the scorer; otherwise passing candidates get the
/// scorer's value and the rest get the `-inf` sentinel. Scorers run
/// concurrently and only on candidates whose score is not already fixed.
pub fn evaluate_candidates(
    candidates: &[CodeSample],
    feedbacks: &[ExecutionFeedback],
    task: &Task,
    scorer: &dyn Scorer,
    reference: Option<&CodeSample>,
    ctx: CallContext<'_>,
) -> Result<Vec<CompositeScore>, ScorerError> {
    if candidates.len() != feedbacks.len() {
        return Err(ScorerError::Misaligned(format!(
            "{} candidates vs {} feedbacks",
            candidates.len(),
            feedbacks.len()
        )));
    }
    if candidates.is_empty() {
        return Err(ScorerError::Misaligned("no candidates".into()));
    }
    let any_pass = feedbacks.iter().any(|f| f.passed_all);
    candidates
        .par_iter()
        .zip(feedbacks.par_iter())
        .map(|(code, fb)| {
            if any_pass && !fb.passed_all {
                return Ok(CompositeScore::sentinel());
            }
            let raw = scorer.score(&ScoreInput {
                task,
                code,
                feedback: fb,
                reference,
                ctx,
            })?;
            if !raw.is_finite() {
                return Err(ScorerError::Domain(DomainError::NonFiniteReward(raw)));
            }
            Ok(CompositeScore::new(fb.passed_all, Reward::new(raw)?))
        })
        .collect()
}
