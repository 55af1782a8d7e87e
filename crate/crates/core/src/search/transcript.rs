//! JSONL run transcripts. Every generation call, evaluation, incumbent
//! choice and budget checkpoint is recorded; nothing timing-dependent is,
//! so a scripted run yields byte-identical transcripts.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SearchConfig;
use crate::domain::{CodeId, CompositeScore, Origin, TokenUsage, VerdictStatus};
use crate::policy::CallKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallStatus {
    Ok,
    ParseFailure,
    Unavailable,
    Precondition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    IterationLimit,
    BudgetExhausted,
    Solved,
    PolicyUnavailable,
    ScorerFailure,
    ParentPoolExhausted,
    SampleLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TranscriptEvent {
    /// Caller-supplied provenance, e.g. the resolved CLI configuration.
    Provenance {
        config: serde_json::Value,
    },
    RunStarted {
        task_id: String,
        config: SearchConfig,
    },
    Generation {
        iteration: usize,
        call: CallKind,
        sample_index: usize,
        usage: TokenUsage,
        ledger_total: u64,
        status: CallStatus,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        message: Option<String>,
    },
    Strategies {
        iteration: usize,
        strategies: Vec<String>,
    },
    ParentsSelected {
        iteration: usize,
        parents: [CodeId; 2],
        uses: [usize; 2],
    },
    Candidate {
        iteration: usize,
        code_id: CodeId,
        origin: Origin,
        parent_ids: Vec<CodeId>,
        statuses: Vec<VerdictStatus>,
        pass_rate: f64,
        score: CompositeScore,
        code: String,
    },
    IncumbentSelected {
        iteration: usize,
        code_id: CodeId,
        score: CompositeScore,
    },
    BestUpdated {
        iteration: usize,
        code_id: CodeId,
        score: CompositeScore,
        pass_rate: f64,
    },
    BudgetCheckpoint {
        iteration: usize,
        ledger_total: u64,
        budget: u64,
        exhausted: bool,
    },
    Warning {
        iteration: usize,
        message: String,
    },
    RunFinished {
        best_id: Option<CodeId>,
        best_score: Option<CompositeScore>,
        iterations: usize,
        tokens: TokenUsage,
        degraded: bool,
        stop_reason: StopReason,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTranscript {
    pub events: Vec<TranscriptEvent>,
}

impl RunTranscript {
    pub fn push(&mut self, event: TranscriptEvent) {
        self.events.push(event);
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("transcript events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(self.to_jsonl().as_bytes())
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let events = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { events })
    }

    pub fn read(path: &Path) -> std::io::Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut events = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            events.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
        }
        Ok(Self { events })
    }

    /// Generation calls actually issued (excludes budget-skipped calls,
    /// which are never recorded).
    pub fn generation_calls(&self) -> impl Iterator<Item = &TranscriptEvent> {
        self.events
            .iter()
            .filter(|e| matches!(e, TranscriptEvent::Generation { .. }))
    }

    pub fn best_updates(&self) -> Vec<(CompositeScore, f64)> {
        self.events
            .iter()
            .filter_map(|e| match e {
                TranscriptEvent::BestUpdated { score, pass_rate, .. } => Some((*score, *pass_rate)),
                _ => None,
            })
            .collect()
    }

    pub fn parent_selections(&self) -> Vec<[CodeId; 2]> {
        self.events
            .iter()
            .filter_map(|e| match e {
                TranscriptEvent::ParentsSelected { parents, .. } => Some(parents.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn finished(&self) -> Option<&TranscriptEvent> {
        self.events
            .iter()
            .rev()
            .find(|e| matches!(e, TranscriptEvent::RunFinished { .. }))
    }
}
