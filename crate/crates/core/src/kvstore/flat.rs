use std::collections::BTreeMap;

use super::{CacheStats, HiddenTape, KvBackend, PrefixHit, SeqId};
use crate::error::{Error, Result};
use crate::numcore::Matrix;

#[derive(Debug, Default)]
struct FlatSeq {
    // per layer: slots × kv_dim
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    committed: usize,
    written: usize,
    reserved: usize,
}

/// One growable contiguous buffer per sequence and layer. No paging, no reuse.
#[derive(Debug)]
pub struct FlatKvCache {
    n_layers: usize,
    kv_dim: usize,
    seqs: BTreeMap<SeqId, FlatSeq>,
    next: u64,
}

impl FlatKvCache {
    pub fn new(n_layers: usize, kv_dim: usize) -> Self {
        Self {
            n_layers,
            kv_dim,
            seqs: BTreeMap::new(),
            next: 0,
        }
    }

    fn seq(&self, id: SeqId) -> Result<&FlatSeq> {
        self.seqs.get(&id).ok_or(Error::UnknownSequence(id.0))
    }

    fn seq_mut(&mut self, id: SeqId) -> Result<&mut FlatSeq> {
        self.seqs.get_mut(&id).ok_or(Error::UnknownSequence(id.0))
    }
}

impl KvBackend for FlatKvCache {
    fn n_layers(&self) -> usize {
        self.n_layers
    }

    fn kv_dim(&self) -> usize {
        self.kv_dim
    }

    fn open_seq(&mut self) -> SeqId {
        let id = SeqId(self.next);
        self.next += 1;
        self.seqs.insert(
            id,
            FlatSeq {
                keys: vec![Vec::new(); self.n_layers],
                values: vec![Vec::new(); self.n_layers],
                ..Default::default()
            },
        );
        id
    }

    fn close_seq(&mut self, seq: SeqId, _tokens: &[u32], _hidden: Option<&HiddenTape>) -> Result<()> {
        self.seqs.remove(&seq).ok_or(Error::UnknownSequence(seq.0))?;
        Ok(())
    }

    fn committed_len(&self, seq: SeqId) -> Result<usize> {
        Ok(self.seq(seq)?.committed)
    }

    fn reserve(&mut self, seq: SeqId, total_slots: usize) -> Result<()> {
        let d = self.kv_dim;
        let s = self.seq_mut(seq)?;
        if total_slots > s.reserved {
            for l in 0..s.keys.len() {
                s.keys[l].resize(total_slots * d, 0.0);
                s.values[l].resize(total_slots * d, 0.0);
            }
            s.reserved = total_slots;
        }
        Ok(())
    }

    fn read_committed(&self, seq: SeqId, layer: usize) -> Result<(Matrix, Matrix)> {
        let s = self.seq(seq)?;
        let n = s.committed * self.kv_dim;
        Ok((
            Matrix::from_vec(s.committed, self.kv_dim, s.keys[layer][..n].to_vec())?,
            Matrix::from_vec(s.committed, self.kv_dim, s.values[layer][..n].to_vec())?,
        ))
    }

    fn write_slots(&mut self, seq: SeqId, layer: usize, start: usize, k: &Matrix, v: &Matrix) -> Result<()> {
        let d = self.kv_dim;
        let s = self.seq_mut(seq)?;
        let end = start + k.rows();
        if end > s.reserved {
            return Err(Error::Capacity {
                needed: end,
                available: s.reserved,
            });
        }
        s.keys[layer][start * d..end * d].copy_from_slice(k.data());
        s.values[layer][start * d..end * d].copy_from_slice(v.data());
        s.written = s.written.max(end);
        Ok(())
    }

    fn compact_accepted(&mut self, seq: SeqId, from_slots: &[usize], dest_start: usize) -> Result<()> {
        let d = self.kv_dim;
        let s = self.seq_mut(seq)?;
        for (i, &src) in from_slots.iter().enumerate() {
            let dst = dest_start + i;
            if src >= s.written || dst >= s.reserved {
                return Err(Error::Rewind {
                    requested: src.max(dst) + 1,
                    written: s.written,
                });
            }
            if src == dst {
                continue;
            }
            for l in 0..s.keys.len() {
                s.keys[l].copy_within(src * d..(src + 1) * d, dst * d);
                s.values[l].copy_within(src * d..(src + 1) * d, dst * d);
            }
        }
        s.written = s.written.max(dest_start + from_slots.len());
        Ok(())
    }

    fn rewind(&mut self, seq: SeqId, new_len: usize) -> Result<()> {
        let s = self.seq_mut(seq)?;
        if new_len > s.written.max(s.committed) {
            return Err(Error::Rewind {
                requested: new_len,
                written: s.written,
            });
        }
        s.committed = new_len;
        s.written = new_len;
        Ok(())
    }

    fn lookup_prefix(&mut self, seq: SeqId, _tokens: &[u32]) -> Result<PrefixHit> {
        self.seq(seq)?;
        Ok(PrefixHit::miss())
    }

    fn stats(&self) -> CacheStats {
        CacheStats::default()
    }
}
