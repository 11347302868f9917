//! Target/draft distributions, draft expansion, speculative verification,
//! deterministic uniforms and FSM-guided masking.

mod fsm;
mod mss;
mod rng;

pub use fsm::{FsmState, GuidedFsm};
pub use mss::{mss_verify, propose_children, sibling_residual, DraftMode, DraftResult, MssOutcome};
pub use rng::{rank_slice, rank_sliced_uniforms, uniform_row, DRAFT_STREAM_SALT};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{argmax, softmax_row};

const SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
    pub simulated_world_size: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            top_p: 0.9,
            seed: 0,
            simulated_world_size: 1,
        }
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be >= 0", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p {} must be in (0, 1]", self.top_p)));
        }
        if self.simulated_world_size == 0 {
            return Err(Error::Config("simulated_world_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDist(Vec<f64>);

impl TokenDist {
    /// Checks non-negativity and unit mass.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) || (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::MalformedDist { sum });
        }
        Ok(Self(probs))
    }

    /// Normalizes non-negative weights; `None` if they sum to zero.
    pub fn normalized(mut weights: Vec<f64>) -> Option<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return None;
        }
        weights.iter_mut().for_each(|w| *w /= sum);
        Some(Self(weights))
    }

    pub fn one_hot(vocab: usize, token: u32) -> Self {
        let mut p = vec![0.0; vocab];
        p[token as usize] = 1.0;
        Self(p)
    }

    pub fn uniform(vocab: usize) -> Self {
        Self(vec![1.0 / vocab as f64; vocab])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn prob(&self, token: u32) -> f64 {
        self.0[token as usize]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn support_size(&self) -> usize {
        self.0.iter().filter(|&&p| p > 0.0).count()
    }

    pub fn argmax(&self) -> u32 {
        argmax(&self.0) as u32
    }

    /// Inverse-CDF draw with `u` in `[0, 1)`.
    pub fn sample(&self, u: f64) -> u32 {
        let target = u * self.0.iter().sum::<f64>();
        let mut cum = 0.0;
        let mut last_positive = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > 0.0 {
                cum += p;
                last_positive = i;
                if cum > target {
                    return i as u32;
                }
            }
        }
        last_positive as u32
    }

    /// Total-variation distance.
    pub fn tv_distance(&self, other: &TokenDist) -> f64 {
        0.5 * self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }
}

/// Nucleus mask: keeps the smallest probability-sorted prefix with mass `>= p`.
pub fn top_p_mask(dist: &TokenDist, p: f64) -> Result<TokenDist> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!("top_p {p} must be in (0, 1]")));
    }
    if p == 1.0 {
        return Ok(dist.clone());
    }
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist.0[b].total_cmp(&dist.0[a]).then(a.cmp(&b)));
    let mut keep = vec![0.0; dist.len()];
    let mut cum = 0.0;
    for &i in &order {
        if dist.0[i] <= 0.0 {
            break;
        }
        keep[i] = dist.0[i];
        cum += dist.0[i];
        // tolerance so that e.g. 0.6 + 0.3 counts as reaching 0.9
        if cum >= p - 1e-12 {
            break;
        }
    }
    Ok(TokenDist::normalized(keep).unwrap_or_else(|| dist.clone()))
}

/// The `k` most probable tokens, lowest index first on ties.
pub fn greedy_expand(dist: &TokenDist, k: usize) -> Result<Vec<u32>> {
    if k > dist.len() {
        return Err(Error::InvalidArgument(format!("k {k} exceeds vocab {}", dist.len())));
    }
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist.0[b].total_cmp(&dist.0[a]).then(a.cmp(&b)));
    Ok(order.into_iter().take(k).map(|i| i as u32).collect())
}

/// Validation-stage distribution: temperature, optional allow-mask, then top-p.
/// At temperature 0 this is one-hot on the best allowed logit.
pub fn target_dist(logits: &[f64], cfg: &SamplerConfig, allowed: Option<&[bool]>) -> Result<TokenDist> {
    let vocab = logits.len();
    if cfg.temperature == 0.0 {
        let best = match allowed {
            None => argmax(logits),
            Some(mask) => best_allowed(logits, mask)?,
        };
        return Ok(TokenDist::one_hot(vocab, best as u32));
    }
    let mut p = vec![0.0; vocab];
    softmax_row(logits, cfg.temperature, &mut p)?;
    let dist = apply_mask(p, allowed)?;
    top_p_mask(&dist, cfg.top_p)
}

/// Drafting-stage distribution: temperature (1 when sampling is greedy),
/// optional allow-mask, no top-p.
pub fn draft_dist(logits: &[f64], cfg: &SamplerConfig, allowed: Option<&[bool]>) -> Result<TokenDist> {
    let t = if cfg.temperature > 0.0 { cfg.temperature } else { 1.0 };
    let mut p = vec![0.0; logits.len()];
    softmax_row(logits, t, &mut p)?;
    apply_mask(p, allowed)
}

fn best_allowed(logits: &[f64], mask: &[bool]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, (&l, &ok)) in logits.iter().zip(mask).enumerate() {
        if ok && best.is_none_or(|b| l > logits[b]) {
            best = Some(i);
        }
    }
    best.ok_or(Error::DeadState { state: usize::MAX })
}

fn apply_mask(mut p: Vec<f64>, allowed: Option<&[bool]>) -> Result<TokenDist> {
    if let Some(mask) = allowed {
        for (x, &ok) in p.iter_mut().zip(mask) {
            if !ok {
                *x = 0.0;
            }
        }
    }
    // an all-masked-out row is possible only when every allowed logit underflowed
    TokenDist::normalized(p).ok_or(Error::DeadState { state: usize::MAX })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(p: &[f64]) -> TokenDist {
        TokenDist::new(p.to_vec()).unwrap()
    }

    #[test]
    fn top_p_examples() {
        let x = d(&[0.6, 0.3, 0.1]);
        assert_eq!(top_p_mask(&x, 1.0).unwrap(), x);
        let m = top_p_mask(&x, 0.8).unwrap();
        assert!((m.probs()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.probs()[1] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.probs()[2], 0.0);
        let oh = TokenDist::one_hot(5, 2);
        for p in [0.01, 0.5, 0.99] {
            assert_eq!(top_p_mask(&oh, p).unwrap(), oh);
        }
        assert!(top_p_mask(&x, 0.0).is_err());
    }

    #[test]
    fn top_p_tie_prefers_lower_index() {
        let m = top_p_mask(&d(&[0.25, 0.25, 0.25, 0.25]), 0.5).unwrap();
        assert_eq!(m.probs(), &[0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn greedy_expand_examples() {
        let x = d(&[0.1, 0.5, 0.4]);
        assert_eq!(greedy_expand(&x, 1).unwrap(), vec![1]);
        assert_eq!(greedy_expand(&x, 2).unwrap(), vec![1, 2]);
        assert_eq!(greedy_expand(&TokenDist::uniform(4), 2).unwrap(), vec![0, 1]);
        assert!(greedy_expand(&x, 4).is_err());
    }

    #[test]
    fn malformed_dist_rejected() {
        assert!(matches!(TokenDist::new(vec![0.5, 0.4]), Err(Error::MalformedDist { .. })));
        assert!(TokenDist::new(vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn inverse_cdf_sampling() {
        let x = d(&[0.0, 0.25, 0.0, 0.75]);
        assert_eq!(x.sample(0.0), 1);
        assert_eq!(x.sample(0.2499), 1);
        assert_eq!(x.sample(0.25), 3);
        assert_eq!(x.sample(0.999_999_999), 3);
    }

    #[test]
    fn target_dist_greedy_respects_mask() {
        let logits = [3.0, 1.0, 2.0];
        let cfg = SamplerConfig::greedy();
        assert_eq!(target_dist(&logits, &cfg, None).unwrap().argmax(), 0);
        let t = target_dist(&logits, &cfg, Some(&[false, true, true])).unwrap();
        assert_eq!(t, TokenDist::one_hot(3, 2));
        assert!(target_dist(&logits, &cfg, Some(&[false; 3])).is_err());
        let hot = SamplerConfig { temperature: 1.0, top_p: 1.0, ..cfg };
        let t = target_dist(&logits, &hot, Some(&[false, true, true])).unwrap();
        assert_eq!(t.probs()[0], 0.0);
        assert!((t.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn arb_dist() -> impl Strategy<Value = TokenDist> {
        prop::collection::vec(0.0f64..1.0, 1..12).prop_filter_map("zero mass", TokenDist::normalized)
    }

    proptest! {
        #[test]
        fn top_p_support_shrinks_and_nests(x in arb_dist(), p in 0.01f64..=1.0) {
            let once = top_p_mask(&x, p).unwrap();
            let twice = top_p_mask(&once, p).unwrap();
            prop_assert!(once.support_size() <= x.support_size());
            for i in 0..x.len() {
                prop_assert!(twice.probs()[i] == 0.0 || once.probs()[i] > 0.0);
                prop_assert!(once.probs()[i] == 0.0 || x.probs()[i] > 0.0);
            }
            prop_assert!((once.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let full = top_p_mask(&x, 1.0).unwrap();
            prop_assert_eq!(top_p_mask(&full, 1.0).unwrap(), full);
        }

        #[test]
        fn greedy_expand_is_sorted(x in arb_dist()) {
            let k = x.len();
            let toks = greedy_expand(&x, k).unwrap();
            for w in toks.windows(2) {
                prop_assert!(x.prob(w[0]) >= x.prob(w[1]));
            }
        }
    }
}
