//! Blocking client for OpenAI-compatible `/chat/completions` endpoints.

use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{ChatModel, ChatRequest, GenerationResult};
use crate::domain::TokenUsage;
use crate::error::PolicyError;
use crate::sync::Semaphore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    /// Base delay; doubles after every failed attempt.
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            backoff_ms: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub endpoint: String,
    pub model_name: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens_per_call: u32,
    pub retry_policy: RetryPolicy,
    pub max_in_flight: usize,
    pub request_timeout_secs: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model_name: "Qwen2.5-32B-Instruct".into(),
            api_key: None,
            temperature: 0.2,
            top_p: 0.95,
            max_tokens_per_call: 2048,
            retry_policy: RetryPolicy::default(),
            max_in_flight: 4,
            request_timeout_secs: 300,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.endpoint.trim().is_empty() {
            return Err("endpoint is required".into());
        }
        if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return Err(format!("endpoint {:?} is not an http(s) URL", self.endpoint));
        }
        if !(self.temperature >= 0.0) {
            return Err("temperature must be >= 0".into());
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err("top_p must be in (0, 1]".into());
        }
        if self.max_in_flight == 0 {
            return Err("max_in_flight must be >= 1".into());
        }
        Ok(())
    }
}

/// Character heuristic used when the provider omits a usage report.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

pub struct OpenAiChatClient {
    config: PolicyConfig,
    agent: ureq::Agent,
    in_flight: Semaphore,
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

impl OpenAiChatClient {
    pub fn new(config: PolicyConfig) -> Result<Self, PolicyError> {
        config.validate().map_err(PolicyError::Unavailable)?;
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(config.request_timeout_secs))
            .build();
        let in_flight = Semaphore::new(config.max_in_flight);
        Ok(Self {
            config,
            agent,
            in_flight,
        })
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'))
    }

    fn attempt(&self, body: &serde_json::Value, prompt: &str) -> Result<GenerationResult, Attempt> {
        let mut req = self.agent.post(&self.url());
        if let Some(key) = &self.config.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = match req.send_json(body.clone()) {
            Ok(resp) => resp,
            Err(ureq::Error::Status(code, resp)) => {
                let detail = resp.into_string().unwrap_or_default();
                let msg = format!("HTTP {code}: {}", detail.chars().take(200).collect::<String>());
                return Err(if code == 429 || code >= 500 {
                    Attempt::Retry(msg)
                } else {
                    Attempt::Fatal(msg)
                });
            }
            Err(e) => return Err(Attempt::Retry(e.to_string())),
        };
        let parsed: CompletionResponse = resp
            .into_json()
            .map_err(|e| Attempt::Fatal(format!("malformed completion response: {e}")))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Attempt::Fatal("completion response has no message content".into()))?;
        Ok(match parsed.usage {
            Some(u) => GenerationResult {
                token_usage: TokenUsage::new(u.prompt_tokens, u.completion_tokens),
                text,
                estimated: false,
            },
            None => GenerationResult {
                token_usage: TokenUsage::new(estimate_tokens(prompt), estimate_tokens(&text)),
                text,
                estimated: true,
            },
        })
    }
}

impl ChatModel for OpenAiChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<GenerationResult, PolicyError> {
        let body = json!({
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": self.config.temperature,
            "top_p": self.config.top_p,
            "max_tokens": self.config.max_tokens_per_call,
        });
        let _permit = self.in_flight.acquire();
        let retry = &self.config.retry_policy;
        let mut delay = Duration::from_millis(retry.backoff_ms);
        let mut last = String::new();
        for attempt in 0..=retry.max_retries {
            if attempt > 0 {
                std::thread::sleep(delay);
                delay *= 2;
            }
            match self.attempt(&body, &request.prompt) {
                Ok(result) => return Ok(result),
                Err(Attempt::Fatal(msg)) => return Err(PolicyError::Unavailable(msg)),
                Err(Attempt::Retry(msg)) => {
                    warn!("chat completion attempt {} failed: {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(PolicyError::Unavailable(format!(
            "gave up after {} attempts: {last}",
            retry.max_retries + 1
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(PolicyConfig::default().validate().is_err());
        let ok = PolicyConfig {
            endpoint: "http://localhost:8000/v1".into(),
            ..PolicyConfig::default()
        };
        assert!(ok.validate().is_ok());
        let bad = PolicyConfig {
            top_p: 0.0,
            ..ok.clone()
        };
        assert!(bad.validate().is_err());
        let bad = PolicyConfig {
            temperature: -1.0,
            ..ok
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn estimate_rounds_up() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("abcde"), 2);
    }
}
