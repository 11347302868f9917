use serde::Serialize;

/// Counters and per-stage wall-clock sums (milliseconds).
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StageMetrics {
    pub rounds: u64,
    /// Tokens committed by decode rounds (the prefill token is not counted).
    pub committed_total: u64,
    pub accepted_total: u64,
    pub base_forward_calls: u64,
    pub draft_forward_calls: u64,
    pub prefill_tokens_computed: u64,
    pub prefix_hit_tokens: u64,
    /// Rounds that fell back to a plain step (tree truncated to nothing).
    pub fallback_steps: u64,
    /// Tree-mask entries that would cross a local-attention chunk.
    pub chunk_crossings: u64,
    pub prefill_ms: f64,
    pub dispatch_ms: f64,
    pub draft_ms: f64,
    pub validate_ms: f64,
    pub sample_ms: f64,
    pub bookkeep_ms: f64,
}

impl StageMetrics {
    /// Tokens per call; 0 when no round ran.
    pub fn tpc(&self) -> f64 {
        if self.rounds == 0 {
            0.0
        } else {
            self.committed_total as f64 / self.rounds as f64
        }
    }

    pub fn decode_ms(&self) -> f64 {
        self.dispatch_ms + self.draft_ms + self.validate_ms + self.sample_ms + self.bookkeep_ms
    }

    pub fn merge(&mut self, o: &StageMetrics) {
        self.rounds += o.rounds;
        self.committed_total += o.committed_total;
        self.accepted_total += o.accepted_total;
        self.base_forward_calls += o.base_forward_calls;
        self.draft_forward_calls += o.draft_forward_calls;
        self.prefill_tokens_computed += o.prefill_tokens_computed;
        self.prefix_hit_tokens += o.prefix_hit_tokens;
        self.fallback_steps += o.fallback_steps;
        self.chunk_crossings += o.chunk_crossings;
        self.prefill_ms += o.prefill_ms;
        self.dispatch_ms += o.dispatch_ms;
        self.draft_ms += o.draft_ms;
        self.validate_ms += o.validate_ms;
        self.sample_ms += o.sample_ms;
        self.bookkeep_ms += o.bookkeep_ms;
    }
}
