//! Tree-aware multi-round speculative sampling.

use super::TokenDist;
use crate::drafttree::{Parent, TreeSpec};
use crate::error::{Error, Result};

const SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DraftMode {
    /// Children drawn from the (sibling-residual) draft distribution.
    Stochastic,
    /// Children are the top-k draft tokens.
    #[default]
    GreedyChildren,
}

/// A drafted tree: one token per node plus the proposal it was drawn from.
#[derive(Debug, Clone)]
pub struct DraftResult {
    pub tree: TreeSpec,
    pub node_tokens: Vec<u32>,
    /// Proposal distribution for each node, already excluding earlier siblings' tokens.
    pub node_dists: Vec<TokenDist>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MssOutcome {
    /// Accepted nodes, root's child first.
    pub accepted: Vec<usize>,
    /// Bonus (or correction) token drawn after the last accepted node.
    pub next_token: u32,
    /// Uniforms consumed.
    pub used_uniforms: usize,
}

/// `q` with `used` tokens removed and renormalized. If nothing is left, falls
/// back to uniform over the unused tokens.
pub fn sibling_residual(q: &TokenDist, used: &[u32]) -> Result<TokenDist> {
    let mut w = q.probs().to_vec();
    for &t in used {
        w[t as usize] = 0.0;
    }
    if let Some(d) = TokenDist::normalized(w.clone()) {
        return Ok(d);
    }
    let w: Vec<f64> = (0..w.len())
        .map(|i| if used.contains(&(i as u32)) { 0.0 } else { 1.0 })
        .collect();
    TokenDist::normalized(w).ok_or_else(|| {
        Error::InvalidArgument(format!("{} siblings exhaust vocab {}", used.len(), q.len()))
    })
}

/// Proposes `k` children from the parent's draft distribution. Stochastic
/// mode consumes one uniform per child from `uniforms`.
pub fn propose_children(
    q: &TokenDist,
    k: usize,
    mode: DraftMode,
    uniforms: &mut impl Iterator<Item = f64>,
) -> Result<Vec<(u32, TokenDist)>> {
    let mut used = Vec::with_capacity(k);
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let qj = sibling_residual(q, &used)?;
        let t = match mode {
            DraftMode::GreedyChildren => qj.argmax(),
            DraftMode::Stochastic => {
                let u = uniforms
                    .next()
                    .ok_or_else(|| Error::InvalidArgument("draft uniforms exhausted".into()))?;
                qj.sample(u)
            }
        };
        used.push(t);
        out.push((t, qj));
    }
    Ok(out)
}

fn check_dist(d: &TokenDist) -> Result<()> {
    let sum: f64 = d.probs().iter().sum();
    if (sum - 1.0).abs() > SUM_TOL || d.probs().iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::MalformedDist { sum });
    }
    Ok(())
}

/// `normalize(max(p - q, 0))`, or `p` itself when that has no mass.
fn residual(p: &TokenDist, q: &TokenDist) -> TokenDist {
    let w = p.probs().iter().zip(q.probs()).map(|(a, b)| (a - b).max(0.0)).collect();
    TokenDist::normalized(w).unwrap_or_else(|| p.clone())
}

/// Walks the draft tree accepting or rejecting children.
///
/// `target[0]` is the target distribution after the root token and
/// `target[i + 1]` the one after node `i`. `uniforms` must hold at least
/// `tree.len() + 1` values; they are consumed in visiting order, then one for
/// the bonus token.
pub fn mss_verify(draft: &DraftResult, target: &[TokenDist], uniforms: &[f64], mode: DraftMode) -> Result<MssOutcome> {
    let tree = &draft.tree;
    let n = tree.len();
    if draft.node_tokens.len() != n || draft.node_dists.len() != n || target.len() != n + 1 {
        return Err(Error::shape(
            "mss_verify",
            format!(
                "{n} nodes, {} tokens, {} draft dists, {} target dists",
                draft.node_tokens.len(),
                draft.node_dists.len(),
                target.len()
            ),
        ));
    }
    if uniforms.len() < n + 1 {
        return Err(Error::InvalidArgument(format!("{} uniforms for {n} nodes", uniforms.len())));
    }
    target.iter().chain(&draft.node_dists).try_for_each(check_dist)?;

    let mut u = uniforms.iter().copied();
    let mut accepted = Vec::new();
    let mut cur = Parent::Root;
    let mut p = target[0].clone();
    loop {
        let mut next = None;
        for &c in tree.children(cur) {
            let t = draft.node_tokens[c];
            let q = &draft.node_dists[c];
            let (pt, qt) = (p.prob(t), q.prob(t));
            if mode == DraftMode::GreedyChildren && qt <= 0.0 {
                return Err(Error::InvalidArgument(format!("node {c} token {t} has zero draft mass")));
            }
            let ratio = if qt > 0.0 {
                pt / qt
            } else if pt > 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            if u.next().expect("length checked") < ratio.min(1.0) {
                next = Some(c);
                break;
            }
            p = residual(&p, q);
        }
        match next {
            Some(c) => {
                accepted.push(c);
                cur = Parent::Node(c);
                p = target[c + 1].clone();
            }
            None => break,
        }
    }
    let bonus_u = u.next().expect("length checked");
    Ok(MssOutcome {
        accepted,
        next_token: p.sample(bonus_u),
        used_uniforms: uniforms.len() - u.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drafttree::{build_chain, build_full_tree};
    use crate::sampling::uniform_row;

    fn d(p: &[f64]) -> TokenDist {
        TokenDist::new(p.to_vec()).unwrap()
    }

    fn chain_draft(tokens: &[u32], q: &[TokenDist]) -> DraftResult {
        DraftResult {
            tree: build_chain(tokens.len()).unwrap(),
            node_tokens: tokens.to_vec(),
            node_dists: q.to_vec(),
        }
    }

    #[test]
    fn q_equals_p_accepts_everything() {
        let p = d(&[0.2, 0.5, 0.3]);
        let dr = chain_draft(&[1, 2, 0], &[p.clone(), p.clone(), p.clone()]);
        let target = vec![p.clone(); 4];
        for s in 0..50 {
            let us = uniform_row(s, 0, 4);
            let o = mss_verify(&dr, &target, &us, DraftMode::Stochastic).unwrap();
            assert_eq!(o.accepted, vec![0, 1, 2]);
            assert_eq!(o.used_uniforms, 4);
        }
    }

    #[test]
    fn temperature_zero_argmax_path_accepted() {
        let oh = |t| TokenDist::one_hot(4, t);
        let q = d(&[0.1, 0.2, 0.3, 0.4]);
        let dr = chain_draft(&[2, 1, 3], &[q.clone(), q.clone(), q.clone()]);
        let target = vec![oh(2), oh(1), oh(3), oh(0)];
        let o = mss_verify(&dr, &target, &[0.99; 4], DraftMode::GreedyChildren).unwrap();
        assert_eq!(o.accepted, vec![0, 1, 2]);
        assert_eq!(o.next_token, 0);
        // a wrong draft token is rejected and corrected to the argmax
        let dr = chain_draft(&[2, 0, 3], &[q.clone(), q.clone(), q]);
        let o = mss_verify(&dr, &target, &[0.0; 4], DraftMode::GreedyChildren).unwrap();
        assert_eq!(o.accepted, vec![0]);
        assert_eq!(o.next_token, 1);
    }

    #[test]
    fn two_token_enumeration() {
        let p = d(&[0.5, 0.5]);
        let dr = chain_draft(&[0], &[d(&[1.0, 0.0])]);
        let target = vec![p.clone(), p];
        let grid = 10_000;
        let mut counts = [0usize; 2];
        for i in 0..grid {
            let ua = (i as f64 + 0.5) / grid as f64;
            let o = mss_verify(&dr, &target, &[ua, 0.3], DraftMode::Stochastic).unwrap();
            let first = if o.accepted.is_empty() { o.next_token } else { 0 };
            if ua < 0.5 {
                assert_eq!(o.accepted, vec![0]);
            } else {
                assert_eq!((o.accepted.len(), o.next_token), (0, 1));
            }
            counts[first as usize] += 1;
        }
        assert_eq!(counts, [grid / 2, grid / 2]);
    }

    #[test]
    fn sibling_residual_without_replacement() {
        let q = d(&[0.5, 0.3, 0.2]);
        let r = sibling_residual(&q, &[0]).unwrap();
        assert!((r.probs()[1] - 0.6).abs() < 1e-12);
        let oh = TokenDist::one_hot(3, 1);
        assert_eq!(sibling_residual(&oh, &[1]).unwrap(), d(&[0.5, 0.0, 0.5]));
        assert!(sibling_residual(&q, &[0, 1, 2]).is_err());
    }

    /// Monte Carlo check on a two-child tree: output marginal equals p.
    #[test]
    fn stochastic_two_children_lossless() {
        let p = d(&[0.1, 0.6, 0.3]);
        let q = d(&[0.5, 0.2, 0.3]);
        let tree = build_full_tree(1, 2).unwrap();
        let target = vec![p.clone(); 3];
        let trials = 200_000u64;
        let mut counts = [0u64; 3];
        for s in 0..trials {
            let du = uniform_row(s, 1, 2);
            let kids = propose_children(&q, 2, DraftMode::Stochastic, &mut du.into_iter()).unwrap();
            let dr = DraftResult {
                tree: tree.clone(),
                node_tokens: kids.iter().map(|k| k.0).collect(),
                node_dists: kids.into_iter().map(|k| k.1).collect(),
            };
            let o = mss_verify(&dr, &target, &uniform_row(s, 2, 3), DraftMode::Stochastic).unwrap();
            let first = o.accepted.first().map_or(o.next_token, |&n| dr.node_tokens[n]);
            counts[first as usize] += 1;
        }
        let emp = TokenDist::normalized(counts.iter().map(|&c| c as f64).collect()).unwrap();
        assert!(emp.tv_distance(&p) < 0.01, "{:?}", emp.probs());
    }

    #[test]
    fn malformed_target_rejected() {
        let dr = chain_draft(&[0], &[d(&[1.0, 0.0])]);
        let bad = vec![TokenDist(vec![0.7, 0.7]), d(&[1.0, 0.0])];
        assert!(matches!(
            mss_verify(&dr, &bad, &[0.5, 0.5], DraftMode::Stochastic),
            Err(Error::MalformedDist { .. })
        ));
        assert!(mss_verify(&dr, &bad[..1], &[0.5, 0.5], DraftMode::Stochastic).is_err());
    }
}
