//! Deterministic scripted policy for tests and offline runs.
//!
//! A script is a JSON document holding an ordered list of rules. A call is
//! answered by the first rule whose `kind` matches (absent = any kind),
//! whose `when` substrings all occur in the rendered prompt, whose `unless`
//! substrings all do not, and whose `sample_index` (if set) equals the
//! call's. The response is picked from `responses` by sample index, by a
//! seeded digest of the request, or always the first. Answers depend only
//! on the request, never on call order, so concurrent callers see the same
//! script behavior as sequential ones.
//!
//! ```json
//! {
//!   "default_usage": {"prompt_tokens": 200, "completion_tokens": 100},
//!   "rules": [
//!     {"kind": "draft_plans", "when": ["Sum two"], "responses": ["[OBSERVATION]add[/OBSERVATION]"]},
//!     {"kind": "revise", "unavailable": true}
//!   ]
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::client::estimate_tokens;
use super::{CallKind, ChatModel, ChatRequest, GenerationResult};
use crate::domain::TokenUsage;
use crate::error::PolicyError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pick {
    #[default]
    SampleIndex,
    Seeded,
    First,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default)]
    pub kind: Option<CallKind>,
    #[serde(default)]
    pub when: Vec<String>,
    #[serde(default)]
    pub unless: Vec<String>,
    #[serde(default)]
    pub sample_index: Option<usize>,
    #[serde(default)]
    pub responses: Vec<String>,
    #[serde(default)]
    pub pick: Pick,
    #[serde(default)]
    pub usage: Option<TokenUsage>,
    /// Simulates a transport outage for matching calls.
    #[serde(default)]
    pub unavailable: bool,
}

impl MockRule {
    fn matches(&self, req: &ChatRequest) -> bool {
        self.kind.is_none_or(|k| k == req.kind)
            && self.sample_index.is_none_or(|i| i == req.sample_index)
            && self.when.iter().all(|w| req.prompt.contains(w.as_str()))
            && !self.unless.iter().any(|u| req.prompt.contains(u.as_str()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    /// Usage charged when a rule sets none; absent means estimate from text.
    #[serde(default)]
    pub default_usage: Option<TokenUsage>,
    pub rules: Vec<MockRule>,
}

impl MockScript {
    pub fn from_path(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read mock script {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("invalid mock script {}: {e}", path.display()))
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedModel {
    script: MockScript,
}

impl ScriptedModel {
    pub fn new(script: MockScript) -> Result<Self, String> {
        for (i, rule) in script.rules.iter().enumerate() {
            if rule.responses.is_empty() && !rule.unavailable {
                return Err(format!("mock rule {i} has no responses"));
            }
        }
        Ok(Self { script })
    }

    pub fn from_path(path: &Path) -> Result<Self, String> {
        Self::new(MockScript::from_path(path)?)
    }
}

fn seeded_index(req: &ChatRequest, len: usize) -> usize {
    let mut h = Sha256::new();
    h.update(req.seed.to_le_bytes());
    h.update((req.sample_index as u64).to_le_bytes());
    h.update(req.prompt.as_bytes());
    let digest = h.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(word) % len as u64) as usize
}

impl ChatModel for ScriptedModel {
    fn complete(&self, req: &ChatRequest) -> Result<GenerationResult, PolicyError> {
        let rule = self
            .script
            .rules
            .iter()
            .find(|r| r.matches(req))
            .ok_or_else(|| {
                PolicyError::Unavailable(format!(
                    "mock script has no rule for {:?} call (sample {})",
                    req.kind, req.sample_index
                ))
            })?;
        if rule.unavailable {
            return Err(PolicyError::Unavailable("scripted outage".into()));
        }
        let n = rule.responses.len();
        let idx = match rule.pick {
            Pick::SampleIndex => req.sample_index % n,
            Pick::Seeded => seeded_index(req, n),
            Pick::First => 0,
        };
        let text = rule.responses[idx].clone();
        let token_usage = rule.usage.or(self.script.default_usage).unwrap_or_else(|| {
            TokenUsage::new(estimate_tokens(&req.prompt), estimate_tokens(&text))
        });
        Ok(GenerationResult {
            text,
            token_usage,
            estimated: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(kind: CallKind, prompt: &str, sample_index: usize, seed: u64) -> ChatRequest {
        ChatRequest {
            kind,
            prompt: prompt.into(),
            sample_index,
            seed,
        }
    }

    fn model(json: &str) -> ScriptedModel {
        ScriptedModel::new(serde_json::from_str(json).unwrap()).unwrap()
    }

    #[test]
    fn first_matching_rule_wins() {
        let m = model(
            r#"{"default_usage":{"prompt_tokens":3,"completion_tokens":2},"rules":[
                {"kind":"revise","when":["bug"],"responses":["fixed"]},
                {"responses":["fallback"]}]}"#,
        );
        let r = m.complete(&req(CallKind::Revise, "has bug", 0, 0)).unwrap();
        assert_eq!(r.text, "fixed");
        assert_eq!(r.token_usage.total(), 5);
        let r = m.complete(&req(CallKind::Revise, "clean", 0, 0)).unwrap();
        assert_eq!(r.text, "fallback");
        let r = m.complete(&req(CallKind::DraftPlans, "has bug", 0, 0)).unwrap();
        assert_eq!(r.text, "fallback");
    }

    #[test]
    fn sample_index_cycles() {
        let m = model(r#"{"rules":[{"responses":["a","b"]}]}"#);
        let texts: Vec<_> = (0..4)
            .map(|i| m.complete(&req(CallKind::DirectDraft, "p", i, 0)).unwrap().text)
            .collect();
        assert_eq!(texts, ["a", "b", "a", "b"]);
    }

    #[test]
    fn seeded_pick_is_stable() {
        let m = model(r#"{"rules":[{"pick":"seeded","responses":["a","b","c","d","e"]}]}"#);
        let a: Vec<_> = (0..20)
            .map(|s| m.complete(&req(CallKind::Revise, "p", 1, s)).unwrap().text)
            .collect();
        let b: Vec<_> = (0..20)
            .map(|s| m.complete(&req(CallKind::Revise, "p", 1, s)).unwrap().text)
            .collect();
        assert_eq!(a, b);
        assert!(a.iter().any(|t| t != &a[0]));
    }

    #[test]
    fn unmatched_and_outage_are_unavailable() {
        let m = model(r#"{"rules":[{"kind":"revise","unavailable":true}]}"#);
        assert!(matches!(
            m.complete(&req(CallKind::Revise, "p", 0, 0)),
            Err(PolicyError::Unavailable(_))
        ));
        assert!(matches!(
            m.complete(&req(CallKind::DraftPlans, "p", 0, 0)),
            Err(PolicyError::Unavailable(_))
        ));
    }

    #[test]
    fn rule_without_responses_rejected() {
        let script: MockScript = serde_json::from_str(r#"{"rules":[{"kind":"revise"}]}"#).unwrap();
        assert!(ScriptedModel::new(script).is_err());
    }
}
