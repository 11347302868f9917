//! Deterministic token-level finite state machines for guided decoding.
//!
//! Text format, one directive per line (`#` starts a comment):
//!
//! ```text
//! start: 0
//! accept: 2 3
//! 0 5 1      # state token next_state
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use super::TokenDist;
use crate::error::{Error, Result};

pub type FsmState = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuidedFsm {
    n_states: usize,
    start: FsmState,
    accepting: BTreeSet<FsmState>,
    /// Per state: token -> next state.
    transitions: Vec<BTreeMap<u32, FsmState>>,
}

impl GuidedFsm {
    pub fn new(
        n_states: usize,
        start: FsmState,
        accepting: impl IntoIterator<Item = FsmState>,
        edges: impl IntoIterator<Item = (FsmState, u32, FsmState)>,
    ) -> Result<Self> {
        let mut transitions = vec![BTreeMap::new(); n_states];
        for (s, t, n) in edges {
            if s >= n_states || n >= n_states {
                return Err(Error::Config(format!("transition {s} -{t}-> {n} outside {n_states} states")));
            }
            if transitions[s].insert(t, n).is_some_and(|old| old != n) {
                return Err(Error::Config(format!("state {s} has two transitions on token {t}")));
            }
        }
        let accepting: BTreeSet<_> = accepting.into_iter().collect();
        if start >= n_states || accepting.iter().any(|&a| a >= n_states) {
            return Err(Error::Config("start/accepting state out of range".into()));
        }
        let fsm = Self {
            n_states,
            start,
            accepting,
            transitions,
        };
        fsm.check_live()?;
        Ok(fsm)
    }

    /// Every reachable state is accepting or has an outgoing transition.
    fn check_live(&self) -> Result<()> {
        let mut seen = vec![false; self.n_states];
        let mut stack = vec![self.start];
        while let Some(s) = stack.pop() {
            if std::mem::replace(&mut seen[s], true) {
                continue;
            }
            if self.transitions[s].is_empty() && !self.accepting.contains(&s) {
                return Err(Error::DeadState { state: s });
            }
            stack.extend(self.transitions[s].values().copied());
        }
        Ok(())
    }

    /// Rejects transitions on tokens the model cannot emit.
    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.transitions.iter().flat_map(|m| m.keys()).find(|&&t| t as usize >= vocab) {
            Some(t) => Err(Error::Config(format!("FSM token {t} outside vocab {vocab}"))),
            None => Ok(()),
        }
    }

    /// Machine that allows every token in a single accepting state.
    pub fn permissive(vocab: usize) -> Self {
        Self::new(1, 0, [0], (0..vocab as u32).map(|t| (0, t, 0))).expect("valid by construction")
    }

    pub fn start(&self) -> FsmState {
        self.start
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn is_accepting(&self, s: FsmState) -> bool {
        self.accepting.contains(&s)
    }

    /// Accepting state with no way forward: generation must stop.
    pub fn is_final(&self, s: FsmState) -> bool {
        self.transitions[s].is_empty()
    }

    pub fn allowed_mask(&self, s: FsmState, vocab: usize) -> Vec<bool> {
        let mut m = vec![false; vocab];
        for &t in self.transitions[s].keys() {
            if (t as usize) < vocab {
                m[t as usize] = true;
            }
        }
        m
    }

    /// Zeroes disallowed tokens and renormalizes.
    pub fn fsm_apply(&self, s: FsmState, dist: &TokenDist) -> Result<TokenDist> {
        let mask = self.allowed_mask(s, dist.len());
        let w = dist.probs().iter().zip(&mask).map(|(&p, &ok)| if ok { p } else { 0.0 }).collect();
        TokenDist::normalized(w).ok_or(Error::DeadState { state: s })
    }

    /// Next state, or `None` if `token` is not allowed in `s`.
    pub fn fsm_advance(&self, s: FsmState, token: u32) -> Option<FsmState> {
        self.transitions.get(s)?.get(&token).copied()
    }

    /// Runs `tokens` from the start state; true if every step is allowed
    /// and the final state is accepting.
    pub fn accepts(&self, tokens: &[u32]) -> bool {
        let mut s = self.start;
        for &t in tokens {
            match self.fsm_advance(s, t) {
                Some(n) => s = n,
                None => return false,
            }
        }
        self.is_accepting(s)
    }

    pub fn to_text(&self) -> String {
        let acc: Vec<String> = self.accepting.iter().map(|s| s.to_string()).collect();
        let mut out = format!("start: {}\naccept: {}\n", self.start, acc.join(" "));
        for (s, m) in self.transitions.iter().enumerate() {
            for (t, n) in m {
                out.push_str(&format!("{s} {t} {n}\n"));
            }
        }
        out
    }
}

impl FromStr for GuidedFsm {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let bad = |ln: usize, msg: &str| Error::Config(format!("FSM line {}: {msg}", ln + 1));
        let mut start = None;
        let mut accepting = Vec::new();
        let mut edges = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("start:") {
                start = Some(rest.trim().parse::<usize>().map_err(|_| bad(ln, "bad start state"))?);
            } else if let Some(rest) = line.strip_prefix("accept:") {
                for f in rest.split_whitespace() {
                    accepting.push(f.parse::<usize>().map_err(|_| bad(ln, "bad accepting state"))?);
                }
            } else {
                let f: Vec<&str> = line.split_whitespace().collect();
                if f.len() != 3 {
                    return Err(bad(ln, "expected `state token next`"));
                }
                let s = f[0].parse::<usize>().map_err(|_| bad(ln, "bad state"))?;
                let t = f[1].parse::<u32>().map_err(|_| bad(ln, "bad token"))?;
                let n = f[2].parse::<usize>().map_err(|_| bad(ln, "bad next state"))?;
                edges.push((s, t, n));
            }
        }
        let start = start.ok_or_else(|| Error::Config("FSM has no `start:` line".into()))?;
        let n_states = edges
            .iter()
            .flat_map(|&(s, _, n)| [s, n])
            .chain(accepting.iter().copied())
            .chain([start])
            .max()
            .unwrap_or(0)
            + 1;
        GuidedFsm::new(n_states, start, accepting, edges)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permissive_is_identity() {
        let fsm = GuidedFsm::permissive(4);
        let d = TokenDist::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(fsm.fsm_apply(0, &d).unwrap(), d);
    }

    #[test]
    fn single_token_gives_one_hot() {
        let fsm = GuidedFsm::new(1, 0, [0], [(0, 3, 0)]).unwrap();
        let out = fsm.fsm_apply(0, &TokenDist::uniform(5)).unwrap();
        assert_eq!(out, TokenDist::one_hot(5, 3));
    }

    #[test]
    fn a_then_b() {
        let fsm: GuidedFsm = "start: 0\naccept: 2\n0 1 1\n1 2 2 # b\n".parse().unwrap();
        let s1 = fsm.fsm_advance(0, 1).unwrap();
        let out = fsm.fsm_apply(s1, &TokenDist::uniform(4)).unwrap();
        assert_eq!(out, TokenDist::one_hot(4, 2));
        assert_eq!(fsm.fsm_advance(0, 2), None);
        assert!(fsm.accepts(&[1, 2]));
        assert!(!fsm.accepts(&[1]));
        assert!(fsm.is_final(2));
    }

    #[test]
    fn dead_states_detected() {
        // state 1 is reachable, not accepting, and has no way out
        assert!(matches!(
            GuidedFsm::new(2, 0, [0], [(0, 1, 1)]),
            Err(Error::DeadState { state: 1 })
        ));
        assert!(GuidedFsm::new(2, 0, [0], [(0, 1, 1), (0, 1, 0)]).is_err());
        let fsm = GuidedFsm::new(1, 0, [0], [(0, 1, 0)]).unwrap();
        let d = TokenDist::one_hot(3, 2);
        assert!(matches!(fsm.fsm_apply(0, &d), Err(Error::DeadState { state: 0 })));
    }

    #[test]
    fn text_roundtrip() {
        let fsm = GuidedFsm::new(3, 1, [0, 2], [(0, 4, 1), (1, 2, 2), (2, 0, 0), (1, 3, 0)]).unwrap();
        let again: GuidedFsm = fsm.to_text().parse().unwrap();
        assert_eq!(again, fsm);
        assert!("0 1\n".parse::<GuidedFsm>().is_err());
        assert!(fsm.check_vocab(4).is_err());
        fsm.check_vocab(5).unwrap();
    }
}
