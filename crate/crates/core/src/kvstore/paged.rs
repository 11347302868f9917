//! Block-paged K/V cache with in-pool prefix reuse and LRU eviction into a
//! [`PersistentKvStore`].
//!
//! Block lifecycle: `Free` → `Mapped` (owned by exactly one live sequence) →
//! on sequence close, full blocks become `Cached` (still in the pool, keyed by
//! prefix hash, reusable) and partial ones go back to `Free`. When the pool
//! runs dry, the least recently used `Cached` blocks are evicted into the
//! persistent store. A block is never mapped and persisted at the same time.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::persistent::{BlockKey, BlockPayload, PersistentKvStore};
use super::{CacheStats, HiddenTape, KvBackend, PrefixHit, SeqId};
use crate::error::{Error, Result};
use crate::numcore::Matrix;

pub type BlockId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PagedKvConfig {
    pub block_size: usize,
    pub num_blocks: usize,
    pub persistent_blocks: usize,
}

impl Default for PagedKvConfig {
    fn default() -> Self {
        Self {
            block_size: 16,
            num_blocks: 256,
            persistent_blocks: 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlockState {
    Free,
    Mapped(SeqId),
    Cached { key: BlockKey, last_use: u64 },
}

#[derive(Debug)]
struct Block {
    state: BlockState,
    // [layer][k, v][slot][kv_dim]; allocated on first use
    kv: Vec<f64>,
    // [slot][hidden_dim]
    hidden: Vec<f64>,
}

#[derive(Debug, Default)]
struct SeqEntry {
    table: Vec<BlockId>,
    committed: usize,
    written: usize,
}

#[derive(Debug)]
pub struct PagedKvCache {
    cfg: PagedKvConfig,
    n_layers: usize,
    kv_dim: usize,
    hidden_dim: usize,
    blocks: Vec<Block>,
    free: Vec<BlockId>,
    cached_index: HashMap<BlockKey, BlockId>,
    seqs: BTreeMap<SeqId, SeqEntry>,
    store: PersistentKvStore,
    next_seq: u64,
    clock: u64,
    hit_blocks: u64,
    evictions: u64,
    eviction_log: Vec<BlockKey>,
}

impl PagedKvCache {
    /// `hidden_dim` > 0 keeps hidden-state rows alongside K/V so prefix hits
    /// can restore them (used for the base cache).
    pub fn new(cfg: PagedKvConfig, n_layers: usize, kv_dim: usize, hidden_dim: usize) -> Result<Self> {
        if cfg.block_size == 0 || cfg.num_blocks == 0 {
            return Err(Error::Config("block_size and num_blocks must be >= 1".into()));
        }
        let blocks = (0..cfg.num_blocks)
            .map(|_| Block {
                state: BlockState::Free,
                kv: Vec::new(),
                hidden: Vec::new(),
            })
            .collect();
        Ok(Self {
            cfg,
            n_layers,
            kv_dim,
            hidden_dim,
            blocks,
            free: (0..cfg.num_blocks).rev().collect(),
            cached_index: HashMap::new(),
            seqs: BTreeMap::new(),
            store: PersistentKvStore::new(cfg.persistent_blocks),
            next_seq: 0,
            clock: 0,
            hit_blocks: 0,
            evictions: 0,
            eviction_log: Vec::new(),
        })
    }

    pub fn config(&self) -> &PagedKvConfig {
        &self.cfg
    }

    pub fn block_size(&self) -> usize {
        self.cfg.block_size
    }

    pub fn store(&self) -> &PersistentKvStore {
        &self.store
    }

    /// Every block key moved to the persistent store so far, in eviction order.
    pub fn eviction_log(&self) -> &[BlockKey] {
        &self.eviction_log
    }

    pub fn block_table(&self, seq: SeqId) -> Result<&[BlockId]> {
        Ok(&self.entry(seq)?.table)
    }

    /// Keys of blocks held in the pool for reuse.
    pub fn cached_keys(&self) -> Vec<BlockKey> {
        let mut k: Vec<_> = self.cached_index.keys().copied().collect();
        k.sort();
        k
    }

    /// Number of blocks that `evict_lru` could currently move out.
    pub fn evictable(&self) -> usize {
        self.cached_index.len()
    }

    fn block_len(&self) -> usize {
        self.n_layers * 2 * self.cfg.block_size * self.kv_dim
    }

    fn entry(&self, seq: SeqId) -> Result<&SeqEntry> {
        self.seqs.get(&seq).ok_or(Error::UnknownSequence(seq.0))
    }

    fn entry_mut(&mut self, seq: SeqId) -> Result<&mut SeqEntry> {
        self.seqs.get_mut(&seq).ok_or(Error::UnknownSequence(seq.0))
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    #[inline]
    fn offset(&self, layer: usize, is_value: bool, slot_in_block: usize) -> usize {
        ((layer * 2 + is_value as usize) * self.cfg.block_size + slot_in_block) * self.kv_dim
    }

    /// Moves the `n` least recently used cached blocks into the persistent store.
    pub fn evict_lru(&mut self, n: usize) -> Result<Vec<BlockKey>> {
        if n > self.cached_index.len() {
            return Err(Error::Capacity {
                needed: n,
                available: self.cached_index.len(),
            });
        }
        let mut candidates: Vec<(u64, BlockId, BlockKey)> = self
            .cached_index
            .iter()
            .map(|(&key, &id)| match self.blocks[id].state {
                BlockState::Cached { last_use, .. } => (last_use, id, key),
                _ => unreachable!("cached index points at a non-cached block"),
            })
            .collect();
        candidates.sort();
        let mut out = Vec::with_capacity(n);
        for &(_, id, key) in candidates.iter().take(n) {
            self.cached_index.remove(&key);
            let block = &mut self.blocks[id];
            let payload = BlockPayload {
                kv: std::mem::take(&mut block.kv),
                hidden: std::mem::take(&mut block.hidden),
            };
            block.state = BlockState::Free;
            self.store.insert(key, payload);
            self.free.push(id);
            self.evictions += 1;
            self.eviction_log.push(key);
            out.push(key);
        }
        Ok(out)
    }

    fn alloc_block(&mut self, owner: SeqId) -> Result<BlockId> {
        if self.free.is_empty() {
            if self.cached_index.is_empty() {
                return Err(Error::Capacity {
                    needed: 1,
                    available: 0,
                });
            }
            self.evict_lru(1)?;
        }
        let id = self.free.pop().expect("free list refilled by eviction");
        let len = self.block_len();
        let hlen = self.cfg.block_size * self.hidden_dim;
        let b = &mut self.blocks[id];
        b.state = BlockState::Mapped(owner);
        b.kv.clear();
        b.kv.resize(len, 0.0);
        b.hidden.clear();
        b.hidden.resize(hlen, 0.0);
        Ok(id)
    }

    fn release_block(&mut self, id: BlockId) {
        let b = &mut self.blocks[id];
        b.state = BlockState::Free;
        b.kv = Vec::new();
        b.hidden = Vec::new();
        self.free.push(id);
    }

    fn slot_location(&self, entry: &SeqEntry, slot: usize) -> Result<(BlockId, usize)> {
        let bs = self.cfg.block_size;
        let b = slot / bs;
        entry
            .table
            .get(b)
            .map(|&id| (id, slot % bs))
            .ok_or(Error::Capacity {
                needed: b + 1,
                available: entry.table.len(),
            })
    }
}

impl KvBackend for PagedKvCache {
    fn n_layers(&self) -> usize {
        self.n_layers
    }

    fn kv_dim(&self) -> usize {
        self.kv_dim
    }

    fn open_seq(&mut self) -> SeqId {
        let id = SeqId(self.next_seq);
        self.next_seq += 1;
        self.seqs.insert(id, SeqEntry::default());
        id
    }

    fn close_seq(&mut self, seq: SeqId, tokens: &[u32], hidden: Option<&HiddenTape>) -> Result<()> {
        let entry = self.seqs.remove(&seq).ok_or(Error::UnknownSequence(seq.0))?;
        let bs = self.cfg.block_size;
        let full = entry.committed.min(tokens.len()) / bs;
        let keys = BlockKey::for_prefix(&tokens[..full * bs], bs);
        for (b, &id) in entry.table.iter().enumerate() {
            let key = keys.get(b).copied();
            let keep = key.filter(|k| !self.cached_index.contains_key(k) && !self.store.contains(k));
            match keep {
                Some(key) => {
                    if let Some(tape) = hidden.filter(|_| self.hidden_dim > 0) {
                        let start = b * bs;
                        let end = ((b + 1) * bs).min(tape.len());
                        let dst = &mut self.blocks[id].hidden;
                        for (i, pos) in (start..end).enumerate() {
                            dst[i * self.hidden_dim..(i + 1) * self.hidden_dim].copy_from_slice(tape.row(pos));
                        }
                    }
                    let last_use = self.tick();
                    self.blocks[id].state = BlockState::Cached { key, last_use };
                    self.cached_index.insert(key, id);
                }
                None => self.release_block(id),
            }
        }
        Ok(())
    }

    fn committed_len(&self, seq: SeqId) -> Result<usize> {
        Ok(self.entry(seq)?.committed)
    }

    fn reserve(&mut self, seq: SeqId, total_slots: usize) -> Result<()> {
        let needed = total_slots.div_ceil(self.cfg.block_size);
        let have = self.entry(seq)?.table.len();
        for _ in have..needed {
            let id = self.alloc_block(seq)?;
            self.entry_mut(seq)?.table.push(id);
        }
        Ok(())
    }

    fn read_committed(&self, seq: SeqId, layer: usize) -> Result<(Matrix, Matrix)> {
        let entry = self.entry(seq)?;
        let n = entry.committed;
        let d = self.kv_dim;
        let bs = self.cfg.block_size;
        let mut k = Vec::with_capacity(n * d);
        let mut v = Vec::with_capacity(n * d);
        for (b, &id) in entry.table.iter().enumerate() {
            let start = b * bs;
            if start >= n {
                break;
            }
            let rows = (n - start).min(bs);
            let blk = &self.blocks[id].kv;
            let ko = self.offset(layer, false, 0);
            let vo = self.offset(layer, true, 0);
            k.extend_from_slice(&blk[ko..ko + rows * d]);
            v.extend_from_slice(&blk[vo..vo + rows * d]);
        }
        Ok((Matrix::from_vec(n, d, k)?, Matrix::from_vec(n, d, v)?))
    }

    fn write_slots(&mut self, seq: SeqId, layer: usize, start: usize, k: &Matrix, v: &Matrix) -> Result<()> {
        if k.cols() != self.kv_dim || v.cols() != self.kv_dim || k.rows() != v.rows() {
            return Err(Error::shape("PagedKvCache::write_slots", "k/v width"));
        }
        let d = self.kv_dim;
        let entry = self.seqs.get(&seq).ok_or(Error::UnknownSequence(seq.0))?;
        let mut locs = Vec::with_capacity(k.rows());
        for r in 0..k.rows() {
            locs.push(self.slot_location(entry, start + r)?);
        }
        for (r, (id, s)) in locs.into_iter().enumerate() {
            let ko = self.offset(layer, false, s);
            let vo = self.offset(layer, true, s);
            let blk = &mut self.blocks[id].kv;
            blk[ko..ko + d].copy_from_slice(k.row(r));
            blk[vo..vo + d].copy_from_slice(v.row(r));
        }
        let e = self.entry_mut(seq)?;
        e.written = e.written.max(start + k.rows());
        Ok(())
    }

    fn compact_accepted(&mut self, seq: SeqId, from_slots: &[usize], dest_start: usize) -> Result<()> {
        let d = self.kv_dim;
        let entry = self.seqs.get(&seq).ok_or(Error::UnknownSequence(seq.0))?;
        let written = entry.written;
        let mut moves = Vec::with_capacity(from_slots.len());
        for (i, &src) in from_slots.iter().enumerate() {
            if src >= written {
                return Err(Error::Rewind {
                    requested: src + 1,
                    written,
                });
            }
            let dst = dest_start + i;
            if src != dst {
                moves.push((self.slot_location(entry, src)?, self.slot_location(entry, dst)?));
            }
        }
        for ((sb, ss), (db, ds)) in moves {
            for layer in 0..self.n_layers {
                for is_value in [false, true] {
                    let so = self.offset(layer, is_value, ss);
                    let dof = self.offset(layer, is_value, ds);
                    if sb == db {
                        self.blocks[sb].kv.copy_within(so..so + d, dof);
                    } else {
                        let row: Vec<f64> = self.blocks[sb].kv[so..so + d].to_vec();
                        self.blocks[db].kv[dof..dof + d].copy_from_slice(&row);
                    }
                }
            }
        }
        let e = self.entry_mut(seq)?;
        e.written = e.written.max(dest_start + from_slots.len());
        Ok(())
    }

    fn rewind(&mut self, seq: SeqId, new_len: usize) -> Result<()> {
        let bs = self.cfg.block_size;
        let e = self.entry_mut(seq)?;
        if new_len > e.written.max(e.committed) {
            return Err(Error::Rewind {
                requested: new_len,
                written: e.written,
            });
        }
        e.committed = new_len;
        e.written = new_len;
        let keep = new_len.div_ceil(bs);
        let dropped: Vec<BlockId> = e.table.drain(keep.min(e.table.len())..).collect();
        for id in dropped {
            self.release_block(id);
        }
        Ok(())
    }

    fn lookup_prefix(&mut self, seq: SeqId, tokens: &[u32]) -> Result<PrefixHit> {
        let bs = self.cfg.block_size;
        {
            let e = self.entry(seq)?;
            if e.committed != 0 || !e.table.is_empty() {
                return Err(Error::InvalidArgument(
                    "prefix lookup needs a fresh sequence".into(),
                ));
            }
        }
        // leave at least one token for the caller to run through the model
        let usable = tokens.len().saturating_sub(1) / bs;
        let keys = BlockKey::for_prefix(&tokens[..usable * bs], bs);
        let mut matched = 0;
        let mut hidden = Vec::new();
        for key in keys {
            let id = if let Some(id) = self.cached_index.remove(&key) {
                self.blocks[id].state = BlockState::Mapped(seq);
                id
            } else if self.store.contains(&key) {
                let id = self.alloc_block(seq)?;
                // allocation may have evicted; the wanted entry is the newest-but-one at worst
                let Some(payload) = self.store.take(&key) else {
                    self.release_block(id);
                    break;
                };
                self.blocks[id].kv = payload.kv;
                self.blocks[id].hidden = payload.hidden;
                id
            } else {
                break;
            };
            if self.hidden_dim > 0 {
                hidden.extend_from_slice(&self.blocks[id].hidden);
            }
            self.entry_mut(seq)?.table.push(id);
            matched += bs;
            self.hit_blocks += 1;
        }
        let e = self.entry_mut(seq)?;
        e.committed = matched;
        e.written = matched;
        let hidden = (self.hidden_dim > 0 && matched > 0)
            .then(|| Matrix::from_vec(matched, self.hidden_dim, hidden))
            .transpose()?;
        Ok(PrefixHit {
            matched_len: matched,
            hidden,
        })
    }

    fn stats(&self) -> CacheStats {
        CacheStats {
            hit_blocks: self.hit_blocks,
            evictions: self.evictions,
            mapped_blocks: self
                .blocks
                .iter()
                .filter(|b| matches!(b.state, BlockState::Mapped(_)))
                .count(),
            cached_blocks: self.cached_index.len(),
            persisted_blocks: self.store.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cache(num_blocks: usize) -> PagedKvCache {
        PagedKvCache::new(
            PagedKvConfig {
                block_size: 16,
                num_blocks,
                persistent_blocks: 64,
            },
            2,
            4,
            3,
        )
        .unwrap()
    }

    fn rows(n: usize, base: f64) -> Matrix {
        Matrix::from_fn(n, 4, |r, c| base + r as f64 + c as f64 * 0.01)
    }

    /// Writes `n` committed positions with recognisable values.
    fn fill(c: &mut PagedKvCache, seq: SeqId, n: usize, base: f64) {
        c.reserve(seq, n).unwrap();
        for l in 0..2 {
            c.write_slots(seq, l, 0, &rows(n, base + l as f64 * 1000.0), &rows(n, -base)).unwrap();
        }
        c.rewind(seq, n).unwrap();
    }

    fn tape(n: usize) -> HiddenTape {
        let mut t = HiddenTape::new(3);
        for i in 0..n {
            t.push(&[i as f64, 0.5, -1.0]).unwrap();
        }
        t
    }

    #[test]
    fn alloc_for_step_uses_ceiling_and_is_idempotent() {
        let mut c = cache(8);
        let s = c.open_seq();
        fill(&mut c, s, 30, 0.0);
        super::super::alloc_for_step(&mut c, s, 6).unwrap();
        assert_eq!(c.block_table(s).unwrap().len(), 3);
        super::super::alloc_for_step(&mut c, s, 6).unwrap();
        assert_eq!(c.block_table(s).unwrap().len(), 3);

        let s2 = c.open_seq();
        super::super::alloc_for_step(&mut c, s2, 3).unwrap();
        assert_eq!(c.block_table(s2).unwrap().len(), 1);
    }

    #[test]
    fn read_spans_blocks() {
        let mut c = cache(8);
        let s = c.open_seq();
        fill(&mut c, s, 37, 0.0);
        let (k, v) = c.read_committed(s, 1).unwrap();
        assert_eq!(k, rows(37, 1000.0));
        assert_eq!(v, rows(37, 0.0));
    }

    #[test]
    fn compaction_and_rewind() {
        let mut c = cache(8);
        let s = c.open_seq();
        fill(&mut c, s, 10, 0.0);
        c.reserve(s, 14).unwrap();
        let tree_k = Matrix::from_fn(4, 4, |r, _| 100.0 + r as f64);
        for l in 0..2 {
            c.write_slots(s, l, 10, &tree_k, &tree_k).unwrap();
        }
        // accept slots 10 (root) and 12
        c.compact_accepted(s, &[10, 12], 10).unwrap();
        c.rewind(s, 12).unwrap();
        let (k, _) = c.read_committed(s, 0).unwrap();
        assert_eq!(k.rows(), 12);
        assert_eq!(k.get(10, 0), 100.0);
        assert_eq!(k.get(11, 0), 102.0);
        assert!(matches!(c.rewind(s, 13), Err(Error::Rewind { .. })));
        // no-op rewind
        c.rewind(s, 12).unwrap();
        assert_eq!(c.committed_len(s).unwrap(), 12);
    }

    #[test]
    fn rewind_unmaps_trailing_blocks() {
        let mut c = cache(8);
        let s = c.open_seq();
        fill(&mut c, s, 40, 0.0);
        assert_eq!(c.block_table(s).unwrap().len(), 3);
        c.rewind(s, 16).unwrap();
        assert_eq!(c.block_table(s).unwrap().len(), 1);
        assert_eq!(c.stats().mapped_blocks, 1);
    }

    #[test]
    fn prefix_lookup_after_eviction() {
        let mut c = cache(4);
        let s = c.open_seq();
        let toks: Vec<u32> = (0..40).collect();
        fill(&mut c, s, 40, 5.0);
        c.close_seq(s, &toks, Some(&tape(40))).unwrap();
        assert_eq!(c.stats().cached_blocks, 2);
        let evicted = c.evict_lru(2).unwrap();
        assert_eq!(evicted, BlockKey::for_prefix(&toks[..32], 16));
        assert_eq!(c.stats().persisted_blocks, 2);

        let s2 = c.open_seq();
        let hit = c.lookup_prefix(s2, &toks).unwrap();
        assert_eq!(hit.matched_len, 32);
        assert_eq!(hit.hidden.as_ref().unwrap().get(20, 0), 20.0);
        let (k, _) = c.read_committed(s2, 0).unwrap();
        assert_eq!(k, rows(32, 5.0));
        // not resident in the store while mapped
        assert_eq!(c.stats().persisted_blocks, 0);
    }

    #[test]
    fn prefix_lookup_misses() {
        let mut c = cache(4);
        let s = c.open_seq();
        assert_eq!(c.lookup_prefix(s, &(0..40).collect::<Vec<_>>()).unwrap().matched_len, 0);

        let toks: Vec<u32> = (0..40).collect();
        let s = c.open_seq();
        fill(&mut c, s, 40, 0.0);
        c.close_seq(s, &toks, None).unwrap();
        let mut changed = toks.clone();
        changed[2] = 77;
        let s3 = c.open_seq();
        assert_eq!(c.lookup_prefix(s3, &changed).unwrap().matched_len, 0);
    }

    #[test]
    fn older_finished_sequence_is_evicted_first() {
        let mut c = cache(8);
        let a = c.open_seq();
        let b = c.open_seq();
        let ta: Vec<u32> = (0..32).collect();
        let tb: Vec<u32> = (100..132).collect();
        fill(&mut c, a, 32, 0.0);
        fill(&mut c, b, 32, 1.0);
        c.close_seq(a, &ta, None).unwrap();
        c.close_seq(b, &tb, None).unwrap();
        let ev = c.evict_lru(2).unwrap();
        assert_eq!(ev, BlockKey::for_prefix(&ta, 16));
        assert!(c.evict_lru(0).unwrap().is_empty());
        assert!(c.evict_lru(5).is_err());
    }

    #[test]
    fn pool_exhaustion_evicts_then_errors() {
        let mut c = cache(2);
        let a = c.open_seq();
        let ta: Vec<u32> = (0..32).collect();
        fill(&mut c, a, 32, 0.0);
        c.close_seq(a, &ta, None).unwrap();
        let b = c.open_seq();
        c.reserve(b, 32).unwrap();
        assert_eq!(c.stats().evictions, 2);
        assert!(matches!(c.reserve(b, 33), Err(Error::Capacity { .. })));
    }
}
