use std::hash::{DefaultHasher, Hash, Hasher};

use indexmap::IndexMap;

/// Identity of a block's contents: a rolling hash of every token from the
/// start of the sequence through the end of the block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockKey(pub u64);

impl BlockKey {
    pub fn chain(prev: Option<BlockKey>, block_tokens: &[u32]) -> BlockKey {
        let mut h = DefaultHasher::new();
        prev.map(|k| k.0).hash(&mut h);
        block_tokens.hash(&mut h);
        BlockKey(h.finish())
    }

    /// Keys of every full block of `tokens`.
    pub fn for_prefix(tokens: &[u32], block_size: usize) -> Vec<BlockKey> {
        let mut prev = None;
        tokens
            .chunks_exact(block_size)
            .map(|c| {
                let k = BlockKey::chain(prev, c);
                prev = Some(k);
                k
            })
            .collect()
    }
}

/// K/V (and optional hidden-state) contents of one evicted block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPayload {
    pub kv: Vec<f64>,
    pub hidden: Vec<f64>,
}

/// LRU map of evicted blocks. Front is least recently used.
#[derive(Debug, Clone)]
pub struct PersistentKvStore {
    capacity: usize,
    entries: IndexMap<BlockKey, BlockPayload>,
    dropped: u64,
}

impl PersistentKvStore {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: IndexMap::new(),
            dropped: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &BlockKey) -> bool {
        self.entries.contains_key(key)
    }

    /// Inserts as most recently used, dropping the oldest entry when full.
    pub fn insert(&mut self, key: BlockKey, payload: BlockPayload) {
        if self.capacity == 0 {
            self.dropped += 1;
            return;
        }
        self.entries.shift_remove(&key);
        while self.entries.len() >= self.capacity {
            self.entries.shift_remove_index(0);
            self.dropped += 1;
        }
        self.entries.insert(key, payload);
    }

    /// Removes and returns an entry; the block becomes live again elsewhere.
    pub fn take(&mut self, key: &BlockKey) -> Option<BlockPayload> {
        self.entries.shift_remove(key)
    }

    /// Keys from least to most recently used.
    pub fn keys(&self) -> impl Iterator<Item = &BlockKey> {
        self.entries.keys()
    }

    /// Entries discarded because the store was full.
    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}
