//! The revision local-search loop.
//!
//! A run drafts an initial population, then repeatedly generates a
//! neighborhood around the incumbent, evaluates it, and moves greedily to
//! the best neighbor, keeping the best-so-far program for anytime return.
//! Hill climbing builds the neighborhood from strategy-guided revisions of
//! the incumbent; the genetic variant crosses over two fit parents under an
//! aging limit; best-of-N is the plain-sampling baseline.
//!
//! Generation calls are issued one at a time and the token budget is checked
//! before each one, so a run overshoots its budget by at most one call and
//! the trip point does not depend on thread timing. Execution and scoring of
//! a neighborhood fan out concurrently.

pub mod transcript;

use std::collections::BTreeMap;
use std::cmp::Ordering;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use transcript::{CallStatus, RunTranscript, StopReason, TranscriptEvent};

use crate::domain::{
    argmax_candidate, canonical_code_order, compare_scores, CodeId, CodeSample, CompositeScore,
    ExecutionFeedback, History, HistoryEntry, Task, TokenUsage,
};
use crate::error::{PolicyError, SearchError};
use crate::executor::Executor;
use crate::policy::{CallContext, CallKind, Policy, TokenLedger};
use crate::reward::{evaluate_candidates, pass_rate, Scorer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Hc,
    Ga,
    Bon,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hc" | "hill_climbing" => Some(Variant::Hc),
            "ga" | "genetic" => Some(Variant::Ga),
            "bon" | "best_of_n" => Some(Variant::Bon),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Hc => "hc",
            Variant::Ga => "ga",
            Variant::Bon => "bon",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParentSelection {
    #[default]
    TopTwo,
    /// Seeded rank-weighted roulette among eligible candidates.
    Roulette,
}

/// Component switches for ablation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    pub use_plans: bool,
    pub use_strategies: bool,
    pub use_feedback: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Self {
            use_plans: true,
            use_strategies: true,
            use_feedback: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub variant: Variant,
    pub n_drafts: usize,
    pub branching: usize,
    pub iteration_limit: usize,
    pub token_budget: u64,
    pub max_parent_uses: usize,
    pub seed: u64,
    pub parent_selection: ParentSelection,
    /// End the run once the best-so-far passes every public test.
    pub stop_when_solved: bool,
    /// Safety cap on best-of-N draws when calls report zero usage.
    pub max_samples: usize,
    pub ablations: Ablations,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Hc,
            n_drafts: 5,
            branching: 3,
            iteration_limit: 20,
            token_budget: 7000,
            max_parent_uses: 3,
            seed: 0,
            parent_selection: ParentSelection::TopTwo,
            stop_when_solved: true,
            max_samples: 1000,
            ablations: Ablations::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if self.n_drafts == 0 {
            return Err(SearchError::Config("n_drafts must be >= 1".into()));
        }
        if self.branching == 0 {
            return Err(SearchError::Config("branching must be >= 1".into()));
        }
        if self.max_parent_uses == 0 {
            return Err(SearchError::Config("max_parent_uses must be >= 1".into()));
        }
        if self.variant == Variant::Ga && self.n_drafts < 2 {
            return Err(SearchError::Config("the genetic variant needs n_drafts >= 2".into()));
        }
        Ok(())
    }
}

/// The three pluggable collaborators of a run.
#[derive(Clone, Copy)]
pub struct Components<'a> {
    pub policy: &'a Policy,
    pub executor: &'a dyn Executor,
    pub scorer: &'a dyn Scorer,
}

/// An evaluated candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub sample: CodeSample,
    pub feedback: ExecutionFeedback,
    pub score: CompositeScore,
}

#[derive(Debug, Clone, Default)]
pub struct SearchState {
    pub history: History,
    pub incumbent: Option<Scored>,
    pub best: Option<Scored>,
    pub iteration: usize,
    pub parent_uses: BTreeMap<CodeId, usize>,
    /// Parent pool for the genetic variant: the drafts plus every candidate
    /// evaluated so far, first occurrence per code id.
    pub pool: Vec<Scored>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best: Option<Scored>,
    pub transcript: RunTranscript,
    pub tokens: TokenUsage,
    pub degraded: bool,
    pub stop_reason: StopReason,
    pub state: SearchState,
}

impl SearchOutcome {
    pub fn solved_public(&self) -> bool {
        self.best.as_ref().is_some_and(|b| b.feedback.passed_all)
    }
}

/// Greedy move: best score, ties to the byte-wise smallest code.
pub fn update_incumbent(candidates: &[CodeSample], scores: &[CompositeScore]) -> Option<usize> {
    argmax_candidate(candidates, scores)
}

/// Picks two distinct parents among pool members used fewer than
/// `max_parent_uses` times and increments their use counts. `None` when
/// fewer than two are eligible.
pub fn ga_select_parents(
    pool: &[Scored],
    parent_uses: &mut BTreeMap<CodeId, usize>,
    config: &SearchConfig,
    iteration: usize,
) -> Option<(usize, usize)> {
    let mut eligible: Vec<usize> = (0..pool.len())
        .filter(|&i| parent_uses.get(&pool[i].sample.id).copied().unwrap_or(0) < config.max_parent_uses)
        .collect();
    if eligible.len() < 2 {
        return None;
    }
    eligible.sort_by(|&a, &b| {
        compare_scores(&pool[b].score, &pool[a].score)
            .then_with(|| canonical_code_order(&pool[a].sample, &pool[b].sample))
    });
    let (a, b) = match config.parent_selection {
        ParentSelection::TopTwo => (eligible[0], eligible[1]),
        ParentSelection::Roulette => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let first = roulette_pick(&mut rng, eligible.len(), None);
            let second = roulette_pick(&mut rng, eligible.len(), Some(first));
            (eligible[first], eligible[second])
        }
    };
    for i in [a, b] {
        *parent_uses.entry(pool[i].sample.id.clone()).or_insert(0) += 1;
    }
    Some((a, b))
}

/// Rank-weighted draw over sorted positions 0..n (position 0 weighs n).
fn roulette_pick(rng: &mut ChaCha8Rng, n: usize, exclude: Option<usize>) -> usize {
    let weight = |i: usize| if Some(i) == exclude { 0 } else { n - i };
    let total: usize = (0..n).map(weight).sum();
    let mut ticket = rng.gen_range(0..total);
    for i in 0..n {
        let w = weight(i);
        if ticket < w {
            return i;
        }
        ticket -= w;
    }
    unreachable!("ticket within total weight")
}

enum Gen<T> {
    Done(T),
    Failed,
    Stopped,
}

struct Run<'a> {
    task: &'a Task,
    config: &'a SearchConfig,
    comps: Components<'a>,
    ledger: TokenLedger,
    transcript: RunTranscript,
    state: SearchState,
    degraded: bool,
    stop: Option<StopReason>,
}

/// Runs the configured variant on one task.
pub fn run(task: &Task, config: &SearchConfig, comps: Components<'_>) -> Result<SearchOutcome, SearchError> {
    task.validate()?;
    config.validate()?;
    let mut r = Run {
        task,
        config,
        comps,
        ledger: TokenLedger::new(),
        transcript: RunTranscript::default(),
        state: SearchState::default(),
        degraded: false,
        stop: None,
    };
    r.transcript.push(TranscriptEvent::RunStarted {
        task_id: task.id.clone(),
        config: config.clone(),
    });
    match config.variant {
        Variant::Bon => r.best_of_n()?,
        Variant::Hc | Variant::Ga => r.local_search()?,
    }
    Ok(r.finish())
}

/// Best-of-N baseline entry point.
pub fn bon_run(task: &Task, config: &SearchConfig, comps: Components<'_>) -> Result<SearchOutcome, SearchError> {
    let config = SearchConfig {
        variant: Variant::Bon,
        ..config.clone()
    };
    run(task, &config, comps)
}

impl<'a> Run<'a> {
    fn ctx(&self) -> CallContext<'_> {
        CallContext::new(&self.ledger, self.config.seed).feedback(self.config.ablations.use_feedback)
    }

    fn warn(&mut self, message: String) {
        warn!("task {}: {message}", self.task.id);
        self.transcript.push(TranscriptEvent::Warning {
            iteration: self.state.iteration,
            message,
        });
    }

    fn checkpoint(&mut self, exhausted: bool) {
        self.transcript.push(TranscriptEvent::BudgetCheckpoint {
            iteration: self.state.iteration,
            ledger_total: self.ledger.total(),
            budget: self.config.token_budget,
            exhausted,
        });
    }

    /// Issues one generation call unless the run is stopping or the budget
    /// is spent. Usage is taken as the ledger delta, which is exact because
    /// generation calls never overlap.
    fn generate<T>(
        &mut self,
        kind: CallKind,
        sample_index: usize,
        f: impl FnOnce(&Policy, &CallContext<'_>) -> Result<T, PolicyError>,
    ) -> Gen<T> {
        if self.stop.is_some() {
            return Gen::Stopped;
        }
        if self.ledger.total() >= self.config.token_budget {
            self.stop = Some(StopReason::BudgetExhausted);
            self.checkpoint(true);
            return Gen::Stopped;
        }
        let before = self.ledger.usage();
        let result = {
            let ctx = self.ctx().sample(sample_index);
            f(self.comps.policy, &ctx)
        };
        let after = self.ledger.usage();
        let usage = TokenUsage::new(
            after.prompt_tokens - before.prompt_tokens,
            after.completion_tokens - before.completion_tokens,
        );
        let (status, message, out) = match result {
            Ok(v) => (CallStatus::Ok, None, Gen::Done(v)),
            Err(PolicyError::Parse(m)) => (CallStatus::ParseFailure, Some(m), Gen::Failed),
            Err(PolicyError::Precondition(m)) => (CallStatus::Precondition, Some(m), Gen::Failed),
            Err(PolicyError::Unavailable(m)) => {
                self.degraded = true;
                self.stop = Some(StopReason::PolicyUnavailable);
                (CallStatus::Unavailable, Some(m), Gen::Stopped)
            }
        };
        self.transcript.push(TranscriptEvent::Generation {
            iteration: self.state.iteration,
            call: kind,
            sample_index,
            usage,
            ledger_total: self.ledger.total(),
            status,
            message,
        });
        out
    }

    fn execute(&self, samples: &[CodeSample]) -> Result<Vec<ExecutionFeedback>, SearchError> {
        let tests = &self.task.public_tests;
        samples
            .par_iter()
            .map(|s| self.comps.executor.run_tests(s, tests).map_err(SearchError::from))
            .collect()
    }

    /// Scores a candidate set; a scorer failure is retried once, then stops
    /// the run as degraded.
    fn evaluate(
        &mut self,
        samples: &[CodeSample],
        feedbacks: &[ExecutionFeedback],
        reference: Option<&CodeSample>,
    ) -> Option<Vec<CompositeScore>> {
        let mut last_err = None;
        for _ in 0..2 {
            match evaluate_candidates(samples, feedbacks, self.task, self.comps.scorer, reference, self.ctx()) {
                Ok(scores) => return Some(scores),
                Err(e) => last_err = Some(e),
            }
        }
        let err = last_err.expect("loop ran");
        self.warn(format!("scoring failed: {err}"));
        self.degraded = true;
        self.stop = Some(StopReason::ScorerFailure);
        None
    }

    fn record_candidates(&mut self, samples: &[CodeSample], feedbacks: &[ExecutionFeedback], scores: &[CompositeScore]) {
        for ((s, fb), score) in samples.iter().zip(feedbacks).zip(scores) {
            self.transcript.push(TranscriptEvent::Candidate {
                iteration: self.state.iteration,
                code_id: s.id.clone(),
                origin: s.origin,
                parent_ids: s.parent_ids.clone(),
                statuses: fb.statuses(),
                pass_rate: pass_rate(fb).unwrap_or(0.0),
                score: *score,
                code: s.code.clone(),
            });
            self.state.history.push(HistoryEntry {
                iteration: self.state.iteration,
                sample: s.clone(),
                feedback: fb.clone(),
                score: *score,
            });
            if !self.state.pool.iter().any(|p| p.sample.id == s.id) {
                self.state.pool.push(Scored {
                    sample: s.clone(),
                    feedback: fb.clone(),
                    score: *score,
                });
            }
        }
    }

    fn set_best(&mut self, best: Scored) {
        self.transcript.push(TranscriptEvent::BestUpdated {
            iteration: self.state.iteration,
            code_id: best.sample.id.clone(),
            score: best.score,
            pass_rate: pass_rate(&best.feedback).unwrap_or(0.0),
        });
        self.state.best = Some(best);
    }

    fn draft_population(&mut self) -> Result<Vec<CodeSample>, SearchError> {
        let (task, n) = (self.task, self.config.n_drafts);
        let mut drafts = Vec::new();
        let mut parse_failures = 0;
        if self.config.ablations.use_plans {
            let plans = match self.generate(CallKind::DraftPlans, 0, |p, ctx| p.draft_plans(task, n, ctx)) {
                Gen::Done(plans) => plans,
                Gen::Failed => return Err(SearchError::DraftFailure),
                Gen::Stopped => return Ok(drafts),
            };
            for (i, plan) in plans.iter().enumerate() {
                match self.generate(CallKind::GenerateCode, i, |p, ctx| p.generate_code_from_plan(task, plan, ctx)) {
                    Gen::Done(code) => drafts.push(code),
                    Gen::Failed => parse_failures += 1,
                    Gen::Stopped => break,
                }
            }
        } else {
            for i in 0..n {
                match self.generate(CallKind::DirectDraft, i, |p, ctx| p.draft_direct(task, ctx)) {
                    Gen::Done(code) => drafts.push(code),
                    Gen::Failed => parse_failures += 1,
                    Gen::Stopped => break,
                }
            }
        }
        if drafts.is_empty() && parse_failures > 0 && self.stop.is_none() {
            return Err(SearchError::DraftFailure);
        }
        if parse_failures > 0 {
            self.warn(format!("{parse_failures} draft(s) failed to parse"));
        }
        Ok(drafts)
    }

    fn hc_neighborhood(&mut self, incumbent: &Scored) -> Vec<CodeSample> {
        let (task, k, t) = (self.task, self.config.branching, self.state.iteration);
        let mut out = Vec::new();
        if self.config.ablations.use_strategies {
            let strategies = match self.generate(CallKind::ProposeStrategies, t, |p, ctx| {
                p.propose_strategies(task, &incumbent.sample, &incumbent.feedback, k, ctx)
            }) {
                Gen::Done(s) => s,
                Gen::Failed | Gen::Stopped => return out,
            };
            self.transcript.push(TranscriptEvent::Strategies {
                iteration: t,
                strategies: strategies.iter().map(|s| s.description.clone()).collect(),
            });
            for (i, strategy) in strategies.iter().enumerate() {
                match self.generate(CallKind::ReviseWithStrategy, i, |p, ctx| {
                    p.revise_with_strategy(task, &incumbent.sample, &incumbent.feedback, strategy, ctx)
                }) {
                    Gen::Done(c) => out.push(c),
                    Gen::Failed => {}
                    Gen::Stopped => break,
                }
            }
        } else {
            for i in 0..k {
                match self.generate(CallKind::Revise, i, |p, ctx| {
                    p.revise_direct(task, &incumbent.sample, &incumbent.feedback, ctx)
                }) {
                    Gen::Done(c) => out.push(c),
                    Gen::Failed => {}
                    Gen::Stopped => break,
                }
            }
        }
        out
    }

    fn ga_neighborhood(&mut self) -> Vec<CodeSample> {
        let (task, k, t) = (self.task, self.config.branching, self.state.iteration);
        let Some((ia, ib)) = ga_select_parents(&self.state.pool, &mut self.state.parent_uses, self.config, t) else {
            self.warn("fewer than two parents remain eligible".into());
            self.stop = Some(StopReason::ParentPoolExhausted);
            return Vec::new();
        };
        let a = self.state.pool[ia].clone();
        let b = self.state.pool[ib].clone();
        let uses = |id: &CodeId| self.state.parent_uses.get(id).copied().unwrap_or(0);
        let event = TranscriptEvent::ParentsSelected {
            iteration: t,
            uses: [uses(&a.sample.id), uses(&b.sample.id)],
            parents: [a.sample.id.clone(), b.sample.id.clone()],
        };
        self.transcript.push(event);
        let mut out = Vec::new();
        for i in 0..k {
            match self.generate(CallKind::Crossover, i, |p, ctx| {
                p.crossover_revise(task, &a.sample, &a.feedback, &b.sample, &b.feedback, ctx)
            }) {
                Gen::Done(c) => out.push(c),
                Gen::Failed => {}
                Gen::Stopped => break,
            }
        }
        out
    }

    fn local_search(&mut self) -> Result<(), SearchError> {
        let drafts = self.draft_population()?;
        if drafts.is_empty() {
            self.degraded = true;
            return Ok(());
        }
        let feedbacks = self.execute(&drafts)?;
        let Some(scores) = self.evaluate(&drafts, &feedbacks, None) else {
            return Ok(());
        };
        self.record_candidates(&drafts, &feedbacks, &scores);
        let i0 = update_incumbent(&drafts, &scores).expect("nonempty drafts");
        let first = Scored {
            sample: drafts[i0].clone(),
            feedback: feedbacks[i0].clone(),
            score: scores[i0],
        };
        self.transcript.push(TranscriptEvent::IncumbentSelected {
            iteration: 0,
            code_id: first.sample.id.clone(),
            score: first.score,
        });
        self.state.incumbent = Some(first.clone());
        self.set_best(first);
        self.checkpoint(self.ledger.total() >= self.config.token_budget);

        for t in 1..=self.config.iteration_limit {
            if self.stop.is_some() {
                break;
            }
            if self.config.stop_when_solved && self.state.best.as_ref().is_some_and(|b| b.score.passes_public) {
                self.stop = Some(StopReason::Solved);
                break;
            }
            self.state.iteration = t;
            let incumbent = self.state.incumbent.clone().expect("incumbent set after drafting");
            let candidates = match self.config.variant {
                Variant::Hc => self.hc_neighborhood(&incumbent),
                Variant::Ga => self.ga_neighborhood(),
                Variant::Bon => unreachable!("best-of-n has no neighborhood"),
            };
            if candidates.is_empty() {
                if self.stop.is_none() {
                    self.warn(format!("iteration {t} produced no parseable candidates"));
                    self.checkpoint(false);
                }
                continue;
            }
            let feedbacks = self.execute(&candidates)?;
            let Some(scores) = self.evaluate(&candidates, &feedbacks, Some(&incumbent.sample)) else {
                break;
            };
            self.record_candidates(&candidates, &feedbacks, &scores);
            let it = update_incumbent(&candidates, &scores).expect("nonempty neighborhood");
            let next = Scored {
                sample: candidates[it].clone(),
                feedback: feedbacks[it].clone(),
                score: scores[it],
            };
            self.transcript.push(TranscriptEvent::IncumbentSelected {
                iteration: t,
                code_id: next.sample.id.clone(),
                score: next.score,
            });
            let improves = self
                .state
                .best
                .as_ref()
                .is_none_or(|b| compare_scores(&next.score, &b.score) == Ordering::Greater);
            self.state.incumbent = Some(next.clone());
            if improves {
                self.set_best(next);
            }
            if self.stop.is_none() {
                self.checkpoint(self.ledger.total() >= self.config.token_budget);
            }
        }
        if self.stop.is_none() {
            self.stop = Some(if self.config.stop_when_solved && self.solved() {
                StopReason::Solved
            } else {
                StopReason::IterationLimit
            });
        }
        Ok(())
    }

    fn solved(&self) -> bool {
        self.state.best.as_ref().is_some_and(|b| b.score.passes_public)
    }

    /// Independent direct drafts until the budget runs out; the best is
    /// chosen by (public pass rate, scorer reward), ties to smaller code.
    fn best_of_n(&mut self) -> Result<(), SearchError> {
        let task = self.task;
        let mut best_key: Option<(f64, CompositeScore)> = None;
        for i in 0.. {
            if self.config.stop_when_solved && self.solved() {
                self.stop = Some(StopReason::Solved);
                break;
            }
            if i >= self.config.max_samples {
                self.stop = Some(StopReason::SampleLimit);
                break;
            }
            self.state.iteration = i;
            let sample = match self.generate(CallKind::DirectDraft, i, |p, ctx| p.draft_direct(task, ctx)) {
                Gen::Done(s) => s,
                Gen::Failed => continue,
                Gen::Stopped => break,
            };
            let samples = [sample];
            let feedbacks = self.execute(&samples)?;
            let Some(scores) = self.evaluate(&samples, &feedbacks, None) else {
                break;
            };
            self.record_candidates(&samples, &feedbacks, &scores);
            let [sample] = samples;
            let [feedback]: [ExecutionFeedback; 1] = feedbacks.try_into().expect("one feedback");
            let rate = pass_rate(&feedback).unwrap_or(0.0);
            let key = (rate, scores[0]);
            let better = match (&best_key, &self.state.best) {
                (Some((r, s)), Some(b)) => match rate.total_cmp(r).then_with(|| compare_scores(&key.1, s)) {
                    Ordering::Greater => true,
                    Ordering::Equal => canonical_code_order(&sample, &b.sample) == Ordering::Less,
                    Ordering::Less => false,
                },
                _ => true,
            };
            if better {
                best_key = Some(key);
                self.set_best(Scored {
                    sample,
                    feedback,
                    score: scores[0],
                });
            }
        }
        if self.state.best.is_none() {
            self.degraded = true;
        }
        Ok(())
    }

    fn finish(mut self) -> SearchOutcome {
        let stop_reason = self.stop.unwrap_or(StopReason::IterationLimit);
        if self.state.best.is_none() {
            self.degraded = true;
        }
        let tokens = self.ledger.usage();
        self.transcript.push(TranscriptEvent::RunFinished {
            best_id: self.state.best.as_ref().map(|b| b.sample.id.clone()),
            best_score: self.state.best.as_ref().map(|b| b.score),
            iterations: self.state.iteration,
            tokens,
            degraded: self.degraded,
            stop_reason,
        });
        SearchOutcome {
            best: self.state.best.clone(),
            transcript: self.transcript,
            tokens,
            degraded: self.degraded,
            stop_reason,
            state: self.state,
        }
    }
}

#[cfg(test)]
mod tests;
