//! Tree attention as two partial passes merged by log-sum-exp.
//!
//! The prefix pass attends every tree query to the committed context with no
//! mask (or only the local-chunk restriction). The suffix pass attends the
//! queries to the tree's own keys under the ancestor mask. Each pass returns
//! its output together with the per-query log-sum-exp of the scores, which is
//! all that is needed to combine them into exact attention over the union.

use crate::drafttree::TreeSpec;
use crate::error::{Error, Result};
use crate::numcore::{dot, BoolMatrix, Matrix};

/// Which keys a query may see.
#[derive(Debug, Clone)]
pub enum AttentionBias {
    /// Every one of the `context_len` keys is visible.
    CausalPrefix { context_len: usize },
    /// Keys are visible only when they fall in the query's chunk of length `chunk_len`.
    LocalChunk {
        chunk_len: usize,
        query_positions: Vec<usize>,
        key_positions: Vec<usize>,
    },
    /// Explicit query × key visibility.
    TreeSuffix(BoolMatrix),
}

impl AttentionBias {
    fn visible(&self, q: usize, k: usize) -> bool {
        match self {
            AttentionBias::CausalPrefix { .. } => true,
            AttentionBias::LocalChunk {
                chunk_len,
                query_positions,
                key_positions,
            } => query_positions[q] / chunk_len == key_positions[k] / chunk_len,
            AttentionBias::TreeSuffix(m) => m.get(q, k),
        }
    }

    fn check(&self, nq: usize, nk: usize) -> Result<()> {
        match self {
            AttentionBias::CausalPrefix { context_len } if *context_len != nk => Err(Error::shape(
                "attend",
                format!("context_len {context_len} but {nk} keys"),
            )),
            AttentionBias::LocalChunk {
                chunk_len,
                query_positions,
                key_positions,
            } => {
                if *chunk_len == 0 {
                    return Err(Error::InvalidArgument("chunk_len must be >= 1".into()));
                }
                if query_positions.len() != nq || key_positions.len() != nk {
                    return Err(Error::shape("attend", "local chunk positions do not match q/k"));
                }
                Ok(())
            }
            AttentionBias::TreeSuffix(m) if m.rows() != nq || m.cols() != nk => Err(Error::shape(
                "attend",
                format!("mask {}x{} for {nq}x{nk} scores", m.rows(), m.cols()),
            )),
            _ => Ok(()),
        }
    }
}

/// Attention output over a subset of keys plus the per-query log-sum-exp.
#[derive(Debug, Clone)]
pub struct PartialAttention {
    pub out: Matrix,
    pub lse: Vec<f64>,
    /// Query rows that saw no key; their `out` row is zero and `lse` is `-inf`.
    pub masked: Vec<bool>,
}

impl PartialAttention {
    pub fn empty(queries: usize, dim_v: usize) -> Self {
        Self {
            out: Matrix::zeros(queries, dim_v),
            lse: vec![f64::NEG_INFINITY; queries],
            masked: vec![true; queries],
        }
    }

    /// Errors on the first fully-masked query row.
    pub fn require_visible(&self) -> Result<()> {
        match self.masked.iter().position(|&m| m) {
            Some(row) => Err(Error::FullyMasked { row }),
            None => Ok(()),
        }
    }
}

/// Single-head attention `softmax(q·kᵀ·scale + bias)·v`.
pub fn attend(q: &Matrix, k: &Matrix, v: &Matrix, bias: &AttentionBias, scale: f64) -> Result<PartialAttention> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::shape(
            "attend",
            format!(
                "q {}x{}, k {}x{}, v {}x{}",
                q.rows(),
                q.cols(),
                k.rows(),
                k.cols(),
                v.rows(),
                v.cols()
            ),
        ));
    }
    bias.check(q.rows(), k.rows())?;
    let (nq, nk, dv) = (q.rows(), k.rows(), v.cols());
    let mut out = Matrix::zeros(nq, dv);
    let mut lse = vec![f64::NEG_INFINITY; nq];
    let mut masked = vec![true; nq];
    let mut scores = vec![0.0; nk];
    let mut vis = vec![false; nk];
    for i in 0..nq {
        let qi = q.row(i);
        let mut m = f64::NEG_INFINITY;
        for j in 0..nk {
            vis[j] = bias.visible(i, j);
            if vis[j] {
                scores[j] = dot(qi, k.row(j)) * scale;
                m = m.max(scores[j]);
            }
        }
        if m == f64::NEG_INFINITY {
            continue;
        }
        masked[i] = false;
        let orow = out.row_mut(i);
        let mut sum = 0.0;
        for j in 0..nk {
            if !vis[j] {
                continue;
            }
            let w = (scores[j] - m).exp();
            sum += w;
            for (o, x) in orow.iter_mut().zip(v.row(j)) {
                *o += w * x;
            }
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
        lse[i] = m + sum.ln();
    }
    Ok(PartialAttention { out, lse, masked })
}

/// Combines partial results computed over disjoint key sets.
pub fn merge_attentions(parts: &[PartialAttention]) -> Result<PartialAttention> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("merge of zero parts".into()))?;
    let (nq, dv) = (first.out.rows(), first.out.cols());
    if parts
        .iter()
        .any(|p| p.out.rows() != nq || p.out.cols() != dv || p.lse.len() != nq)
    {
        return Err(Error::shape("merge_attentions", "parts disagree in shape"));
    }
    let mut out = Matrix::zeros(nq, dv);
    let mut lse = vec![f64::NEG_INFINITY; nq];
    for i in 0..nq {
        let m = parts
            .iter()
            .filter(|p| !p.masked[i])
            .map(|p| p.lse[i])
            .fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return Err(Error::FullyMasked { row: i });
        }
        let mut denom = 0.0;
        let orow = out.row_mut(i);
        for p in parts.iter().filter(|p| !p.masked[i]) {
            let w = (p.lse[i] - m).exp();
            denom += w;
            for (o, x) in orow.iter_mut().zip(p.out.row(i)) {
                *o += w * x;
            }
        }
        for o in orow.iter_mut() {
            *o /= denom;
        }
        lse[i] = m + denom.ln();
    }
    Ok(PartialAttention {
        out,
        lse,
        masked: vec![false; nq],
    })
}

/// Keys and values for one side of the split, with absolute positions.
#[derive(Debug, Clone, Copy)]
pub struct KvSpan<'a> {
    pub k: &'a Matrix,
    pub v: &'a Matrix,
    pub positions: &'a [usize],
}

/// Multi-head split tree attention.
///
/// `q` holds one row per query (all heads side by side), `prefix` the
/// committed context and `suffix` the in-flight tree keys. `suffix_mask` is
/// queries × suffix keys. With `local_chunk` set, both passes additionally
/// hide keys outside the query's chunk.
pub fn tree_attention(
    q: &Matrix,
    q_positions: &[usize],
    prefix: KvSpan<'_>,
    suffix: KvSpan<'_>,
    suffix_mask: &BoolMatrix,
    n_heads: usize,
    local_chunk: Option<usize>,
) -> Result<Matrix> {
    let dim = q.cols();
    if n_heads == 0 || dim % n_heads != 0 {
        return Err(Error::shape("tree_attention", format!("{dim} not divisible by {n_heads} heads")));
    }
    if q_positions.len() != q.rows() || suffix_mask.rows() != q.rows() || suffix_mask.cols() != suffix.k.rows() {
        return Err(Error::shape("tree_attention", "query/mask/suffix sizes disagree"));
    }
    let hd = dim / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let prefix_bias = match local_chunk {
        None => AttentionBias::CausalPrefix {
            context_len: prefix.k.rows(),
        },
        Some(chunk_len) => AttentionBias::LocalChunk {
            chunk_len,
            query_positions: q_positions.to_vec(),
            key_positions: prefix.positions.to_vec(),
        },
    };
    let suffix_bias = AttentionBias::TreeSuffix(match local_chunk {
        None => suffix_mask.clone(),
        Some(c) => BoolMatrix::from_fn(q.rows(), suffix.k.rows(), |i, j| {
            suffix_mask.get(i, j) && q_positions[i] / c == suffix.positions[j] / c
        }),
    });
    let mut out = Matrix::zeros(q.rows(), dim);
    for h in 0..n_heads {
        let qh = q.col_block(h * hd, hd);
        let pre = if prefix.k.rows() == 0 {
            PartialAttention::empty(q.rows(), hd)
        } else {
            attend(
                &qh,
                &prefix.k.col_block(h * hd, hd),
                &prefix.v.col_block(h * hd, hd),
                &prefix_bias,
                scale,
            )?
        };
        let suf = attend(
            &qh,
            &suffix.k.col_block(h * hd, hd),
            &suffix.v.col_block(h * hd, hd),
            &suffix_bias,
            scale,
        )?;
        let merged = merge_attentions(&[pre, suf])?;
        out.set_col_block(h * hd, &merged.out);
    }
    Ok(out)
}

/// One-pass reference: attention over `full_k`/`full_v` with an explicit mask.
pub fn naive_tree_attention(
    q: &Matrix,
    full_k: &Matrix,
    full_v: &Matrix,
    explicit_mask: &BoolMatrix,
    n_heads: usize,
) -> Result<Matrix> {
    let dim = q.cols();
    if n_heads == 0 || dim % n_heads != 0 {
        return Err(Error::shape("naive_tree_attention", "bad head count"));
    }
    if explicit_mask.rows() != q.rows() || explicit_mask.cols() != full_k.rows() {
        return Err(Error::shape("naive_tree_attention", "mask does not match q/k"));
    }
    let hd = dim / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Matrix::zeros(q.rows(), dim);
    for h in 0..n_heads {
        let qh = q.col_block(h * hd, hd);
        let kh = full_k.col_block(h * hd, hd);
        let vh = full_v.col_block(h * hd, hd);
        for i in 0..q.rows() {
            let scores: Vec<Option<f64>> = (0..kh.rows())
                .map(|j| explicit_mask.get(i, j).then(|| dot(qh.row(i), kh.row(j)) * scale))
                .collect();
            let m = scores.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(Error::FullyMasked { row: i });
            }
            let w: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |s| (s - m).exp())).collect();
            let total: f64 = w.iter().sum();
            for c in 0..hd {
                let acc: f64 = w.iter().enumerate().map(|(j, wj)| wj * vh.get(j, c)).sum();
                out.set(i, h * hd + c, acc / total);
            }
        }
    }
    Ok(out)
}

/// Context-plus-suffix mask for [`naive_tree_attention`]: context columns
/// first (all visible unless `local_chunk` hides them), then suffix columns.
pub fn explicit_tree_mask(
    context_positions: &[usize],
    q_positions: &[usize],
    suffix_positions: &[usize],
    suffix_mask: &BoolMatrix,
    local_chunk: Option<usize>,
) -> BoolMatrix {
    let ctx = context_positions.len();
    let same_chunk = |a: usize, b: usize| local_chunk.is_none_or(|c| a / c == b / c);
    BoolMatrix::from_fn(q_positions.len(), ctx + suffix_positions.len(), |i, j| {
        if j < ctx {
            same_chunk(q_positions[i], context_positions[j])
        } else {
            suffix_mask.get(i, j - ctx) && same_chunk(q_positions[i], suffix_positions[j - ctx])
        }
    })
}

/// Absolute position of a tree node when `committed_len` tokens are committed:
/// the root (newest committed token) sits at `committed_len - 1`.
pub fn node_position(committed_len: usize, depth: usize) -> usize {
    committed_len + depth - 1
}

/// Drops tree nodes that would land outside the root token's attention chunk.
///
/// Returns `None` when nothing survives, in which case the caller takes a
/// plain non-speculative step.
pub fn truncate_draft_at_boundary(tree: &TreeSpec, committed_len: usize, chunk_len: Option<usize>) -> Option<TreeSpec> {
    let Some(chunk) = chunk_len else {
        return Some(tree.clone());
    };
    let root_chunk = committed_len.saturating_sub(1) / chunk;
    tree.retain(|i| node_position(committed_len, tree.depth(i)) / chunk == root_chunk)
}

/// Counts visible (query, key) pairs whose positions fall in different chunks.
pub fn chunk_crossings(mask: &BoolMatrix, q_positions: &[usize], k_positions: &[usize], chunk_len: usize) -> usize {
    let mut n = 0;
    for i in 0..mask.rows() {
        for j in 0..mask.cols() {
            if mask.get(i, j) && q_positions[i] / chunk_len != k_positions[j] / chunk_len {
                n += 1;
            }
        }
    }
    n
}

/// Depth of every node in `tree` as a flat position list, root first.
pub fn rooted_positions(tree: &TreeSpec, committed_len: usize) -> Vec<usize> {
    let mut pos = vec![committed_len - 1];
    pos.extend((0..tree.len()).map(|i| node_position(committed_len, tree.depth(i))));
    pos
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drafttree::{build_chain, build_full_tree, suffix_mask};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = Matrix::from_rows(&[vec![0.5, -1.0]]).unwrap();
        let k = Matrix::from_rows(&[vec![2.0, 1.0]]).unwrap();
        let v = Matrix::from_rows(&[vec![7.0, 8.0, 9.0]]).unwrap();
        let r = attend(&q, &k, &v, &AttentionBias::CausalPrefix { context_len: 1 }, 1.0).unwrap();
        assert_eq!(r.out.row(0), v.row(0));
        assert!((r.lse[0] - 0.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_scores_average_values() {
        let q = Matrix::zeros(1, 2);
        let k = Matrix::from_fn(4, 2, |r, c| (r + c) as f64);
        let v = Matrix::from_fn(4, 1, |r, _| r as f64);
        let r = attend(&q, &k, &v, &AttentionBias::CausalPrefix { context_len: 4 }, 1.0).unwrap();
        assert!((r.out.get(0, 0) - 1.5).abs() < 1e-15);
        assert!((r.lse[0] - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn chain_suffix_equals_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (q, k, v) = (rand_matrix(&mut rng, 3, 4), rand_matrix(&mut rng, 3, 4), rand_matrix(&mut rng, 3, 4));
        let mask = suffix_mask(&build_chain(3).unwrap()).into_matrix();
        let tree = attend(&q, &k, &v, &AttentionBias::TreeSuffix(mask), 0.5).unwrap();
        for i in 0..3 {
            let rows: Vec<usize> = (0..=i).collect();
            let causal = attend(
                &q.select_rows(&[i]),
                &k.select_rows(&rows),
                &v.select_rows(&rows),
                &AttentionBias::CausalPrefix { context_len: i + 1 },
                0.5,
            )
            .unwrap();
            for c in 0..4 {
                assert!((tree.out.get(i, c) - causal.out.get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fully_masked_rows_are_flagged() {
        let q = Matrix::zeros(2, 2);
        let k = Matrix::zeros(2, 2);
        let mask = BoolMatrix::from_fn(2, 2, |r, _| r == 0);
        let r = attend(&q, &k, &k, &AttentionBias::TreeSuffix(mask), 1.0).unwrap();
        assert_eq!(r.masked, vec![false, true]);
        assert!(r.out.is_finite());
        assert!(matches!(r.require_visible(), Err(Error::FullyMasked { row: 1 })));
        assert!(matches!(merge_attentions(&[r.clone(), r]), Err(Error::FullyMasked { row: 1 })));
    }

    #[test]
    fn merge_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (q, k, v) = (rand_matrix(&mut rng, 2, 3), rand_matrix(&mut rng, 5, 3), rand_matrix(&mut rng, 5, 3));
        let a = attend(&q, &k, &v, &AttentionBias::CausalPrefix { context_len: 5 }, 1.0).unwrap();
        let same = merge_attentions(&[a.clone(), a.clone()]).unwrap();
        assert!(same.out.max_abs_diff(&a.out) < 1e-15);
        let dead = PartialAttention::empty(2, 3);
        let only_a = merge_attentions(&[a.clone(), dead]).unwrap();
        assert!(only_a.out.max_abs_diff(&a.out) < 1e-15);
    }

    #[test]
    fn random_split_matches_single_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let nk = rng.gen_range(2..=64);
            let nq = rng.gen_range(1..=4);
            let (q, k, v) = (rand_matrix(&mut rng, nq, 8), rand_matrix(&mut rng, nk, 8), rand_matrix(&mut rng, nk, 8));
            let full = attend(&q, &k, &v, &AttentionBias::CausalPrefix { context_len: nk }, 0.35).unwrap();
            // random partition into up to three parts
            let labels: Vec<usize> = (0..nk).map(|_| rng.gen_range(0..3)).collect();
            let parts: Vec<PartialAttention> = (0..3)
                .map(|part| {
                    let mask = BoolMatrix::from_fn(nq, nk, |_, j| labels[j] == part);
                    attend(&q, &k, &v, &AttentionBias::TreeSuffix(mask), 0.35).unwrap()
                })
                .collect();
            let merged = merge_attentions(&parts).unwrap();
            assert!(merged.out.max_abs_diff(&full.out) < 1e-6);
            for i in 0..nq {
                let lse_union = crate::numcore::log_sum_exp(
                    &parts.iter().filter(|p| !p.masked[i]).map(|p| p.lse[i]).collect::<Vec<_>>(),
                );
                assert!((merged.lse[i] - lse_union).abs() < 1e-9);
                assert!((merged.lse[i] - full.lse[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn tree_attention_agrees_with_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let tree = build_full_tree(2, 3).unwrap();
        let n = tree.len();
        let ctx = 20;
        let heads = 2;
        let q = rand_matrix(&mut rng, n, 8);
        let (ck, cv) = (rand_matrix(&mut rng, ctx, 8), rand_matrix(&mut rng, ctx, 8));
        let (tk, tv) = (rand_matrix(&mut rng, n, 8), rand_matrix(&mut rng, n, 8));
        let ctx_pos: Vec<usize> = (0..ctx).collect();
        let qpos: Vec<usize> = (0..n).map(|i| node_position(ctx + 1, tree.depth(i))).collect();
        let mask = suffix_mask(&tree).into_matrix();
        for chunk in [None, Some(8)] {
            let fast = tree_attention(
                &q,
                &qpos,
                KvSpan { k: &ck, v: &cv, positions: &ctx_pos },
                KvSpan { k: &tk, v: &tv, positions: &qpos },
                &mask,
                heads,
                chunk,
            )
            .unwrap();
            let em = explicit_tree_mask(&ctx_pos, &qpos, &qpos, &mask, chunk);
            let slow = naive_tree_attention(&q, &ck.vstack(&tk).unwrap(), &cv.vstack(&tv).unwrap(), &em, heads).unwrap();
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn empty_context_is_suffix_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let tree = build_chain(3).unwrap();
        let q = rand_matrix(&mut rng, 3, 4);
        let (tk, tv) = (rand_matrix(&mut rng, 3, 4), rand_matrix(&mut rng, 3, 4));
        let pos = vec![0, 1, 2];
        let mask = suffix_mask(&tree).into_matrix();
        let empty = Matrix::zeros(0, 4);
        let out = tree_attention(
            &q,
            &pos,
            KvSpan { k: &empty, v: &empty, positions: &[] },
            KvSpan { k: &tk, v: &tv, positions: &pos },
            &mask,
            1,
            None,
        )
        .unwrap();
        let suffix = attend(&q, &tk, &tv, &AttentionBias::TreeSuffix(mask), 0.5).unwrap();
        assert!(out.max_abs_diff(&suffix.out) < 1e-15);
    }

    #[test]
    fn truncation_examples() {
        let chain = build_chain(3).unwrap();
        assert_eq!(truncate_draft_at_boundary(&chain, 5, Some(8)).unwrap(), chain);
        assert_eq!(truncate_draft_at_boundary(&chain, 6, Some(8)).unwrap().len(), 2);
        assert_eq!(truncate_draft_at_boundary(&chain, 6, None).unwrap(), chain);
        // root at the last slot of a chunk: nothing fits
        assert!(truncate_draft_at_boundary(&chain, 8, Some(8)).is_none());
        // root at the first slot of the next chunk: everything fits again
        assert_eq!(truncate_draft_at_boundary(&chain, 9, Some(8)).unwrap(), chain);
    }

    #[test]
    fn truncated_tree_stays_inside_root_chunk() {
        let tree = build_full_tree(3, 2).unwrap();
        for committed in 1..40 {
            if let Some(t) = truncate_draft_at_boundary(&tree, committed, Some(8)) {
                let pos = rooted_positions(&t, committed);
                assert!(pos.iter().all(|p| p / 8 == pos[0] / 8));
                if pos.len() == tree.len() + 1 {
                    assert_eq!(t, tree);
                }
            }
        }
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::drafttree::suffix_mask;
    use proptest::prelude::*;

    fn tree_strategy() -> impl Strategy<Value = TreeSpec> {
        prop::collection::vec(any::<(bool, u8)>(), 1..=16).prop_map(|raw| {
            let parents: Vec<Option<usize>> = raw
                .iter()
                .enumerate()
                .map(|(i, &(root, p))| (i > 0 && !root).then(|| p as usize % i))
                .collect();
            TreeSpec::from_parents(&parents).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn split_equals_explicit_mask(tree in tree_strategy(), ctx in 0usize..40, chunk in prop::option::of(2usize..12), seed in any::<u64>()) {
            let n = tree.len();
            let dim = 8;
            let m = |salt: u64, r: usize| Matrix::from_fn(r, dim, |i, j| {
                let x = seed ^ salt.wrapping_mul(0x9e37_79b9) ^ ((i * 31 + j) as u64).wrapping_mul(0x85eb_ca6b);
                ((x >> 11) % 2000) as f64 / 1000.0 - 1.0
            });
            let (q, ck, cv, tk, tv) = (m(1, n), m(2, ctx), m(3, ctx), m(4, n), m(5, n));
            let ctx_pos: Vec<usize> = (0..ctx).collect();
            let qpos: Vec<usize> = (0..n).map(|i| node_position(ctx + 1, tree.depth(i))).collect();
            let mask = suffix_mask(&tree).into_matrix();
            let fast = tree_attention(&q, &qpos, KvSpan { k: &ck, v: &cv, positions: &ctx_pos }, KvSpan { k: &tk, v: &tv, positions: &qpos }, &mask, 2, chunk).unwrap();
            let em = explicit_tree_mask(&ctx_pos, &qpos, &qpos, &mask, chunk);
            let slow = naive_tree_attention(&q, &ck.vstack(&tk).unwrap(), &cv.vstack(&tv).unwrap(), &em, 2).unwrap();
            prop_assert!(fast.max_abs_diff(&slow) < 1e-9);
            if let Some(c) = chunk {
                let pos: Vec<usize> = ctx_pos.iter().chain(&qpos).copied().collect();
                // the explicit mask itself never crosses a chunk
                prop_assert_eq!(chunk_crossings(&em, &qpos, &pos, c), 0);
            }
        }
    }
}
