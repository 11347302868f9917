use super::{BaseModel, DraftModel, LayerWeights, ModelConfig, TiedWeights, NORM_EPS};
use crate::attention::{tree_attention, KvSpan};
use crate::error::{Error, Result};
use crate::kvstore::KvHandle;
use crate::numcore::{matmul, rmsnorm, rope_apply, BoolMatrix, Matrix};

/// Post-final-norm hidden states and LM-head logits, one row per input token.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub hidden: Matrix,
    pub logits: Matrix,
}

/// In-flight K/V rows that are not yet committed to the cache.
///
/// Rows are also written back to the cache at `start_slot + row`, so that
/// accepted ones can later be compacted in place; attention over these rows
/// always reads from this buffer.
#[derive(Debug, Clone)]
pub struct SuffixKv {
    pub start_slot: usize,
    pub positions: Vec<usize>,
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
}

impl SuffixKv {
    pub fn new(n_layers: usize, start_slot: usize) -> Self {
        Self {
            start_slot,
            positions: Vec::new(),
            keys: vec![Matrix::zeros(0, 0); n_layers],
            values: vec![Matrix::zeros(0, 0); n_layers],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

pub(crate) fn embed(tied: &TiedWeights, tokens: &[u32]) -> Result<Matrix> {
    let vocab = tied.embedding.rows();
    let idx = tokens
        .iter()
        .map(|&t| {
            if (t as usize) < vocab {
                Ok(t as usize)
            } else {
                Err(Error::InvalidArgument(format!("token {t} outside vocab {vocab}")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(tied.embedding.select_rows(&idx))
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Pre-norm decoder blocks, final norm and tied LM head.
///
/// `mask` is `x.rows() × (suffix.len() + x.rows())`: visibility of the
/// earlier in-flight rows and of the new rows themselves. The committed
/// cache prefix is always visible (subject to local chunking).
#[allow(clippy::too_many_arguments)]
pub(crate) fn decoder_stack(
    cfg: &ModelConfig,
    layers: &[LayerWeights],
    final_norm: &[f64],
    tied: &TiedWeights,
    mut x: Matrix,
    positions: &[usize],
    mask: &BoolMatrix,
    kv: &mut KvHandle<'_>,
    suffix: &mut SuffixKv,
) -> Result<ForwardOutput> {
    let n = x.rows();
    if positions.len() != n {
        return Err(Error::shape("forward", format!("{} positions for {n} rows", positions.len())));
    }
    if mask.rows() != n || mask.cols() != suffix.len() + n {
        return Err(Error::shape(
            "forward",
            format!(
                "mask {}x{} for {n} new rows after {} in flight",
                mask.rows(),
                mask.cols(),
                suffix.len()
            ),
        ));
    }
    let committed = kv.committed_len()?;
    if suffix.start_slot < committed {
        return Err(Error::InvalidArgument(format!(
            "suffix starts at slot {} inside committed prefix of {committed}",
            suffix.start_slot
        )));
    }
    let first_slot = suffix.start_slot + suffix.len();
    let prefix_pos: Vec<usize> = (0..committed).collect();
    let mut suffix_pos = suffix.positions.clone();
    suffix_pos.extend_from_slice(positions);

    for (l, layer) in layers.iter().enumerate() {
        let h = rmsnorm(&x, &layer.attn_norm, NORM_EPS)?;
        let q = rope_apply(&matmul(&h, &layer.wq)?, positions, cfg.head_dim, cfg.rope_theta)?;
        let k = rope_apply(&matmul(&h, &layer.wk)?, positions, cfg.head_dim, cfg.rope_theta)?;
        let v = matmul(&h, &layer.wv)?;
        kv.cache.write_slots(kv.seq, l, first_slot, &k, &v)?;
        suffix.keys[l] = suffix.keys[l].vstack(&k)?;
        suffix.values[l] = suffix.values[l].vstack(&v)?;

        let (ck, cv) = kv.cache.read_committed(kv.seq, l)?;
        let att = tree_attention(
            &q,
            positions,
            KvSpan {
                k: &ck,
                v: &cv,
                positions: &prefix_pos,
            },
            KvSpan {
                k: &suffix.keys[l],
                v: &suffix.values[l],
                positions: &suffix_pos,
            },
            mask,
            cfg.n_heads,
            cfg.layer_chunk(l),
        )?;
        x.add_assign(&matmul(&att, &layer.wo)?)?;

        let h = rmsnorm(&x, &layer.ffn_norm, NORM_EPS)?;
        let mut gate = matmul(&h, layer.w_gate.weight())?;
        let up = matmul(&h, layer.w_up.weight())?;
        for (g, u) in gate.data_mut().iter_mut().zip(up.data()) {
            *g = silu(*g) * u;
        }
        x.add_assign(&matmul(&gate, layer.w_down.weight())?)?;
    }
    suffix.positions.extend_from_slice(positions);

    let hidden = rmsnorm(&x, final_norm, NORM_EPS)?;
    let logits = matmul(&hidden, &tied.lm_head)?;
    if !logits.is_finite() {
        return Err(Error::NonFinite("logits"));
    }
    Ok(ForwardOutput { hidden, logits })
}

/// Runs `forward` as a plain causal append at the end of the committed prefix.
fn append_with<F>(kv: &mut KvHandle<'_>, n_layers: usize, n: usize, forward: F) -> Result<ForwardOutput>
where
    F: FnOnce(&[usize], &BoolMatrix, &mut KvHandle<'_>, &mut SuffixKv) -> Result<ForwardOutput>,
{
    let committed = kv.committed_len()?;
    kv.cache.reserve(kv.seq, committed + n)?;
    let positions: Vec<usize> = (committed..committed + n).collect();
    let mut suffix = SuffixKv::new(n_layers, committed);
    let out = forward(&positions, &BoolMatrix::causal(n), kv, &mut suffix)?;
    kv.cache.rewind(kv.seq, committed + n)?;
    Ok(out)
}

impl BaseModel {
    /// General forward over new rows that extend `suffix`.
    pub fn forward(
        &self,
        tokens: &[u32],
        positions: &[usize],
        mask: &BoolMatrix,
        kv: &mut KvHandle<'_>,
        suffix: &mut SuffixKv,
    ) -> Result<ForwardOutput> {
        let tied = self.tied_read();
        let x = embed(&tied, tokens)?;
        decoder_stack(&self.config, &self.layers, &self.final_norm, &tied, x, positions, mask, kv, suffix)
    }

    /// Causal forward of `tokens` after the committed prefix; their K/V is committed.
    pub fn base_forward(&self, tokens: &[u32], kv: &mut KvHandle<'_>) -> Result<ForwardOutput> {
        append_with(kv, self.config.n_layers, tokens.len(), |pos, mask, kv, suffix| {
            self.forward(tokens, pos, mask, kv, suffix)
        })
    }
}

impl DraftModel {
    /// Fusion input: `concat(embed(token), prev_hidden) · fusion`.
    pub fn fuse(&self, tokens: &[u32], prev_hidden: &Matrix) -> Result<Matrix> {
        if prev_hidden.rows() != tokens.len() || prev_hidden.cols() != self.config.dim {
            return Err(Error::shape(
                "draft fuse",
                format!(
                    "{} tokens with {}x{} hidden",
                    tokens.len(),
                    prev_hidden.rows(),
                    prev_hidden.cols()
                ),
            ));
        }
        let tied = self.tied_read();
        let e = embed(&tied, tokens)?;
        matmul(&e.hstack(prev_hidden)?, &self.fusion)
    }

    pub fn forward(
        &self,
        tokens: &[u32],
        prev_hidden: &Matrix,
        positions: &[usize],
        mask: &BoolMatrix,
        kv: &mut KvHandle<'_>,
        suffix: &mut SuffixKv,
    ) -> Result<ForwardOutput> {
        let x = self.fuse(tokens, prev_hidden)?;
        let tied = self.tied_read();
        decoder_stack(&self.config, &self.layers, &self.final_norm, &tied, x, positions, mask, kv, suffix)
    }

    /// Causal draft forward after the committed prefix; K/V is committed.
    pub fn draft_forward(&self, tokens: &[u32], prev_hidden: &Matrix, kv: &mut KvHandle<'_>) -> Result<ForwardOutput> {
        append_with(kv, self.config.n_layers, tokens.len(), |pos, mask, kv, suffix| {
            self.forward(tokens, prev_hidden, pos, mask, kv, suffix)
        })
    }
}
