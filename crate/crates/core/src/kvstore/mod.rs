//! Key/value caches for the base and draft models.
//!
//! A cache holds, per sequence, a committed prefix of K/V rows (one row per
//! token position, all heads side by side, keys stored post-rotary). Slots
//! past the committed length are scratch: tree passes write their rows there,
//! then [`KvBackend::compact_accepted`] moves the accepted rows down and
//! [`KvBackend::rewind`] fixes the new committed length.

mod flat;
mod paged;
mod persistent;
mod tape;

pub use flat::FlatKvCache;
pub use paged::{BlockId, PagedKvCache, PagedKvConfig};
pub use persistent::{BlockKey, BlockPayload, PersistentKvStore};
pub use tape::HiddenTape;

use serde::Serialize;

use crate::error::Result;
use crate::numcore::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SeqId(pub u64);

/// Counters exported with benchmark reports.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    /// Blocks satisfied from cached or persisted prefixes.
    pub hit_blocks: u64,
    /// Blocks moved from the paged pool into the persistent store.
    pub evictions: u64,
    /// Blocks currently mapped by live sequences.
    pub mapped_blocks: usize,
    /// Blocks held in the pool for possible reuse.
    pub cached_blocks: usize,
    /// Entries in the persistent store.
    pub persisted_blocks: usize,
}

/// Result of a prompt-prefix lookup.
#[derive(Debug, Clone)]
pub struct PrefixHit {
    /// Number of leading prompt tokens whose K/V is now committed.
    pub matched_len: usize,
    /// Stored hidden-state rows for the matched positions, if the cache keeps them.
    pub hidden: Option<Matrix>,
}

impl PrefixHit {
    pub fn miss() -> Self {
        Self {
            matched_len: 0,
            hidden: None,
        }
    }
}

/// Multi-sequence K/V storage used by the model forward passes.
pub trait KvBackend: Send {
    fn n_layers(&self) -> usize;

    /// Width of one K (or V) row.
    fn kv_dim(&self) -> usize;

    fn open_seq(&mut self) -> SeqId;

    /// Ends a sequence. `tokens` are the tokens at the committed positions and
    /// `hidden` their hidden-state rows; full blocks may be retained for reuse.
    fn close_seq(&mut self, seq: SeqId, tokens: &[u32], hidden: Option<&HiddenTape>) -> Result<()>;

    fn committed_len(&self, seq: SeqId) -> Result<usize>;

    /// Makes slots `[0, total_slots)` writable.
    fn reserve(&mut self, seq: SeqId, total_slots: usize) -> Result<()>;

    /// Committed keys and values of one layer as contiguous matrices.
    fn read_committed(&self, seq: SeqId, layer: usize) -> Result<(Matrix, Matrix)>;

    /// Writes rows into consecutive slots starting at `start`.
    fn write_slots(&mut self, seq: SeqId, layer: usize, start: usize, k: &Matrix, v: &Matrix) -> Result<()>;

    /// Copies the rows at `from_slots` (every layer) to consecutive slots from `dest_start`.
    fn compact_accepted(&mut self, seq: SeqId, from_slots: &[usize], dest_start: usize) -> Result<()>;

    /// Sets the committed length and discards everything written past it.
    fn rewind(&mut self, seq: SeqId, new_len: usize) -> Result<()>;

    /// Maps the longest reusable block-aligned prefix of `tokens` into a fresh sequence.
    fn lookup_prefix(&mut self, seq: SeqId, tokens: &[u32]) -> Result<PrefixHit>;

    fn stats(&self) -> CacheStats;
}

/// A backend plus the sequence a forward pass operates on.
pub struct KvHandle<'a> {
    pub cache: &'a mut dyn KvBackend,
    pub seq: SeqId,
}

impl<'a> KvHandle<'a> {
    pub fn new(cache: &'a mut dyn KvBackend, seq: SeqId) -> Self {
        Self { cache, seq }
    }

    pub fn committed_len(&self) -> Result<usize> {
        self.cache.committed_len(self.seq)
    }
}

/// Blocks needed so that `committed + n_draft_nodes + 1` slots fit.
pub fn blocks_for_step(block_size: usize, committed: usize, n_draft_nodes: usize) -> usize {
    (committed + n_draft_nodes + 1).div_ceil(block_size)
}

/// Reserves room for a speculative step: the pending root token plus every tree node.
pub fn alloc_for_step(cache: &mut dyn KvBackend, seq: SeqId, n_draft_nodes: usize) -> Result<()> {
    let committed = cache.committed_len(seq)?;
    cache.reserve(seq, committed + n_draft_nodes + 1)
}

/// Per-block storage for a draft cache that keeps the same block count as the base cache.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CacheSizing {
    pub num_blocks: usize,
    /// Per-block byte size relative to the base cache's per-block size.
    pub bytes_per_block_ratio: f64,
}

/// Draft cache sizing: identical block count, per-block bytes scaled by the layer ratio.
pub fn draft_cache_capacity(base_capacity_blocks: usize, n_base_layers: usize, n_draft_layers: usize) -> Result<CacheSizing> {
    if n_base_layers == 0 || n_draft_layers == 0 {
        return Err(crate::error::Error::InvalidArgument(
            "layer counts must be >= 1".into(),
        ));
    }
    Ok(CacheSizing {
        num_blocks: base_capacity_blocks,
        bytes_per_block_ratio: n_draft_layers as f64 / n_base_layers as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_allocation_arithmetic() {
        assert_eq!(blocks_for_step(16, 30, 6), 3);
        assert_eq!(blocks_for_step(16, 0, 3), 1);
    }

    #[test]
    fn draft_sizing_keeps_block_count() {
        let s = draft_cache_capacity(100, 8, 2).unwrap();
        assert_eq!(s.num_blocks, 100);
        assert!((s.bytes_per_block_ratio - 0.25).abs() < 1e-15);
        assert_eq!(draft_cache_capacity(10, 4, 4).unwrap().bytes_per_block_ratio, 1.0);
        assert_eq!(draft_cache_capacity(10, 4, 1).unwrap().bytes_per_block_ratio, 0.25);
        assert!(draft_cache_capacity(10, 0, 1).is_err());
    }
}
