//! The code-writing policy: prompt rendering, a chat-model abstraction,
//! response parsing, and per-call token accounting.

pub mod client;
pub mod ledger;
pub mod mock;
pub mod parse;
pub mod templates;

use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};

pub use client::{OpenAiChatClient, PolicyConfig, RetryPolicy};
pub use ledger::TokenLedger;
pub use mock::{MockRule, MockScript, Pick, ScriptedModel};
pub use templates::PromptTemplates;

use crate::domain::{CodeSample, ExecutionFeedback, Origin, Task, TestCase, TokenUsage};
use crate::error::PolicyError;
use templates::render;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    DraftPlans,
    GenerateCode,
    DirectDraft,
    ProposeStrategies,
    ReviseWithStrategy,
    Crossover,
    Revise,
    SelfEvaluate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub kind: CallKind,
    pub prompt: String,
    /// Distinguishes repeated samples from an identical prompt.
    pub sample_index: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub text: String,
    pub token_usage: TokenUsage,
    /// Usage came from the chars/4 heuristic, not the provider.
    pub estimated: bool,
}

/// Single-turn text completion backend.
pub trait ChatModel: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<GenerationResult, PolicyError>;
}

/// A natural-language revision direction for the hill-climbing neighborhood.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevisionStrategy {
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
}

impl RevisionStrategy {
    pub fn new(description: impl Into<String>) -> Result<Self, PolicyError> {
        let description = description.into();
        if description.trim().is_empty() {
            return Err(PolicyError::Precondition("revision strategy is empty".into()));
        }
        Ok(Self {
            description,
            explanation: None,
        })
    }
}

/// Per-call context: where usage is booked and how the call is sampled.
#[derive(Debug, Clone, Copy)]
pub struct CallContext<'a> {
    pub ledger: &'a TokenLedger,
    pub seed: u64,
    pub sample_index: usize,
    pub include_feedback: bool,
}

impl<'a> CallContext<'a> {
    pub fn new(ledger: &'a TokenLedger, seed: u64) -> Self {
        Self {
            ledger,
            seed,
            sample_index: 0,
            include_feedback: true,
        }
    }

    pub fn sample(self, sample_index: usize) -> Self {
        Self {
            sample_index,
            ..self
        }
    }

    pub fn feedback(self, include_feedback: bool) -> Self {
        Self {
            include_feedback,
            ..self
        }
    }
}

#[derive(Clone)]
pub struct Policy {
    model: Arc<dyn ChatModel>,
    templates: PromptTemplates,
}

impl std::fmt::Debug for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Policy").finish_non_exhaustive()
    }
}

pub fn render_tests(tests: &[TestCase]) -> String {
    tests
        .iter()
        .enumerate()
        .map(|(i, t)| {
            format!(
                "Test {}:\nInput:\n{}\nExpected output:\n{}",
                i + 1,
                t.input.trim_end(),
                t.expected_output.trim_end()
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn feedback_section(fb: &ExecutionFeedback, include: bool) -> String {
    if include {
        format!("\n\nExecution feedback on public tests:\n{}", fb.summary)
    } else {
        String::new()
    }
}

impl Policy {
    pub fn new(model: Arc<dyn ChatModel>) -> Self {
        Self::with_templates(model, PromptTemplates::default())
    }

    pub fn with_templates(model: Arc<dyn ChatModel>, templates: PromptTemplates) -> Self {
        Self { model, templates }
    }

    pub fn templates(&self) -> &PromptTemplates {
        &self.templates
    }

    /// Issue one completion and book its usage, whether or not it parses.
    fn call(&self, kind: CallKind, prompt: String, ctx: &CallContext<'_>) -> Result<GenerationResult, PolicyError> {
        let request = ChatRequest {
            kind,
            prompt,
            sample_index: ctx.sample_index,
            seed: ctx.seed,
        };
        let result = self.model.complete(&request)?;
        ctx.ledger.record(result.token_usage);
        Ok(result)
    }

    fn code_from(result: GenerationResult, origin: Origin, parents: Vec<crate::domain::CodeId>) -> Result<CodeSample, PolicyError> {
        let code = parse::extract_code_block(&result.text)
            .ok_or_else(|| PolicyError::Parse("response contains no fenced code block".into()))?;
        Ok(CodeSample::new(code, origin, parents).with_usage(result.token_usage))
    }

    pub fn draft_plans(&self, task: &Task, n: usize, ctx: &CallContext<'_>) -> Result<Vec<String>, PolicyError> {
        if n == 0 {
            return Err(PolicyError::Precondition("n must be >= 1".into()));
        }
        let n_text = n.to_string();
        let prompt = render(
            &self.templates.draft_plans,
            &[
                ("n", &n_text),
                ("statement", &task.statement),
                ("public_tests", &render_tests(&task.public_tests)),
            ],
        );
        let result = self.call(CallKind::DraftPlans, prompt, ctx)?;
        let mut plans = parse::extract_tagged(&result.text, "OBSERVATION");
        if plans.is_empty() {
            return Err(PolicyError::Parse("no [OBSERVATION] blocks in response".into()));
        }
        if plans.len() < n {
            warn!("task {}: asked for {n} plans, parsed {}", task.id, plans.len());
        }
        plans.truncate(n);
        Ok(plans)
    }

    pub fn generate_code_from_plan(&self, task: &Task, plan: &str, ctx: &CallContext<'_>) -> Result<CodeSample, PolicyError> {
        if plan.trim().is_empty() {
            return Err(PolicyError::Precondition("plan is empty".into()));
        }
        let prompt = render(
            &self.templates.generate_code,
            &[
                ("statement", &task.statement),
                ("public_tests", &render_tests(&task.public_tests)),
                ("plan", plan),
            ],
        );
        let result = self.call(CallKind::GenerateCode, prompt, ctx)?;
        Self::code_from(result, Origin::Draft, Vec::new())
    }

    /// Plain sampling straight from the statement (no plan).
    pub fn draft_direct(&self, task: &Task, ctx: &CallContext<'_>) -> Result<CodeSample, PolicyError> {
        let prompt = render(
            &self.templates.direct_draft,
            &[
                ("statement", &task.statement),
                ("public_tests", &render_tests(&task.public_tests)),
            ],
        );
        let result = self.call(CallKind::DirectDraft, prompt, ctx)?;
        Self::code_from(result, Origin::Draft, Vec::new())
    }

    /// One call returning up to `k` directions; a shortfall is padded by
    /// repeating the last direction.
    pub fn propose_strategies(
        &self,
        task: &Task,
        incumbent: &CodeSample,
        fb: &ExecutionFeedback,
        k: usize,
        ctx: &CallContext<'_>,
    ) -> Result<Vec<RevisionStrategy>, PolicyError> {
        if k == 0 {
            return Err(PolicyError::Precondition("k must be >= 1".into()));
        }
        let prompt = render(
            &self.templates.hc_strategies,
            &[
                ("statement", &task.statement),
                ("code", &incumbent.code),
                ("feedback_section", &feedback_section(fb, ctx.include_feedback)),
            ],
        );
        let result = self.call(CallKind::ProposeStrategies, prompt, ctx)?;
        let explanation = parse::extract_tagged(&result.text, "explanation").into_iter().next();
        let mut directions = parse::extract_tagged(&result.text, "direction");
        if directions.is_empty() {
            return Err(PolicyError::Parse("no [direction] blocks in response".into()));
        }
        if directions.len() < k {
            warn!(
                "task {}: parsed {} of {k} directions, repeating the last",
                task.id,
                directions.len()
            );
            let last = directions.last().cloned().unwrap_or_default();
            directions.resize(k, last);
        }
        directions.truncate(k);
        Ok(directions
            .into_iter()
            .map(|description| RevisionStrategy {
                description,
                explanation: explanation.clone(),
            })
            .collect())
    }

    pub fn revise_with_strategy(
        &self,
        task: &Task,
        incumbent: &CodeSample,
        fb: &ExecutionFeedback,
        strategy: &RevisionStrategy,
        ctx: &CallContext<'_>,
    ) -> Result<CodeSample, PolicyError> {
        if strategy.description.trim().is_empty() {
            return Err(PolicyError::Precondition("revision strategy is empty".into()));
        }
        let prompt = render(
            &self.templates.hc_revise,
            &[
                ("statement", &task.statement),
                ("code", &incumbent.code),
                ("feedback_section", &feedback_section(fb, ctx.include_feedback)),
                ("explanation", strategy.explanation.as_deref().unwrap_or("(none)")),
                ("strategy", &strategy.description),
            ],
        );
        let result = self.call(CallKind::ReviseWithStrategy, prompt, ctx)?;
        Self::code_from(result, Origin::HcRevision, vec![incumbent.id.clone()])
    }

    pub fn crossover_revise(
        &self,
        task: &Task,
        parent_a: &CodeSample,
        fb_a: &ExecutionFeedback,
        parent_b: &CodeSample,
        fb_b: &ExecutionFeedback,
        ctx: &CallContext<'_>,
    ) -> Result<CodeSample, PolicyError> {
        if parent_a.id == parent_b.id {
            return Err(PolicyError::Precondition(format!(
                "crossover parents must differ (both {})",
                parent_a.id
            )));
        }
        let prompt = render(
            &self.templates.ga_crossover,
            &[
                ("statement", &task.statement),
                ("code_a", &parent_a.code),
                ("feedback_section_a", &feedback_section(fb_a, ctx.include_feedback)),
                ("code_b", &parent_b.code),
                ("feedback_section_b", &feedback_section(fb_b, ctx.include_feedback)),
            ],
        );
        let result = self.call(CallKind::Crossover, prompt, ctx)?;
        Self::code_from(
            result,
            Origin::GaCrossover,
            vec![parent_a.id.clone(), parent_b.id.clone()],
        )
    }

    /// Tree-building revision of an incorrect program.
    pub fn revise(
        &self,
        task: &Task,
        code: &CodeSample,
        fb: &ExecutionFeedback,
        ctx: &CallContext<'_>,
    ) -> Result<CodeSample, PolicyError> {
        if fb.passed_all {
            return Err(PolicyError::Precondition(
                "only failing programs are revised".into(),
            ));
        }
        self.revise_as(task, code, fb, Origin::TreeRevision, ctx)
    }

    /// Strategy-free revision for the hill-climbing neighborhood; unlike
    /// [`Policy::revise`] it accepts passing programs.
    pub fn revise_direct(
        &self,
        task: &Task,
        code: &CodeSample,
        fb: &ExecutionFeedback,
        ctx: &CallContext<'_>,
    ) -> Result<CodeSample, PolicyError> {
        self.revise_as(task, code, fb, Origin::HcRevision, ctx)
    }

    fn revise_as(
        &self,
        task: &Task,
        code: &CodeSample,
        fb: &ExecutionFeedback,
        origin: Origin,
        ctx: &CallContext<'_>,
    ) -> Result<CodeSample, PolicyError> {
        let prompt = render(
            &self.templates.revise,
            &[
                ("statement", &task.statement),
                ("code", &code.code),
                ("feedback_section", &feedback_section(fb, ctx.include_feedback)),
            ],
        );
        let result = self.call(CallKind::Revise, prompt, ctx)?;
        Self::code_from(result, origin, vec![code.id.clone()])
    }

    /// 0-100 self-assessed quality scaled to [0, 1].
    pub fn self_evaluate(&self, task: &Task, code: &CodeSample, ctx: &CallContext<'_>) -> Result<f64, PolicyError> {
        let prompt = render(
            &self.templates.self_eval,
            &[("statement", &task.statement), ("code", &code.code)],
        );
        let result = self.call(CallKind::SelfEvaluate, prompt, ctx)?;
        let value = parse::first_integer(&result.text)
            .ok_or_else(|| PolicyError::Parse("no integer in self-evaluation".into()))?;
        Ok(value.min(100) as f64 / 100.0)
    }
}
