use std::sync::Mutex;

use crate::domain::TokenUsage;

/// Run-level token accumulator. Additions are serialized, so totals are
/// exact sums regardless of which thread issued the call.
#[derive(Debug, Default)]
pub struct TokenLedger {
    state: Mutex<LedgerState>,
}

#[derive(Debug, Default, Clone, Copy)]
struct LedgerState {
    usage: TokenUsage,
    calls: u64,
}

impl TokenLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, usage: TokenUsage) {
        let mut s = self.state.lock().unwrap_or_else(|e| e.into_inner());
        s.usage += usage;
        s.calls += 1;
    }

    pub fn usage(&self) -> TokenUsage {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).usage
    }

    pub fn total(&self) -> u64 {
        self.usage().total()
    }

    pub fn calls(&self) -> u64 {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).calls
    }
}
