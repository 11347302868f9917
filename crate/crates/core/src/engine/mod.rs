//! The decode loop: prefill, dispatch, draft, validate, sample, bookkeep.

mod config;
mod metrics;
mod reference;

pub use config::{DispatchEntry, EngineConfig};
pub use metrics::StageMetrics;
pub use reference::greedy_reference;

use std::time::Instant;

use crate::attention::{chunk_crossings, node_position, rooted_positions, truncate_draft_at_boundary};
use crate::drafttree::{rooted_mask, DispatchTable, Parent, TreeSpec};
use crate::error::{Error, Result};
use crate::kvstore::{FlatKvCache, HiddenTape, KvBackend, KvHandle, PagedKvCache, PagedKvConfig, SeqId};
use crate::model::{BaseModel, DraftModel, SuffixKv};
use crate::numcore::{BoolMatrix, Matrix};
use crate::sampling::{
    draft_dist, mss_verify, propose_children, rank_sliced_uniforms, target_dist, uniform_row, DraftMode, DraftResult,
    FsmState, GuidedFsm, SamplerConfig, TokenDist, DRAFT_STREAM_SALT,
};

/// Deliberate bookkeeping bugs for mutation testing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Leave the base cache untouched after a round (no compaction, no rewind).
    SkipRewind,
}

#[derive(Debug, Clone)]
pub struct EngineOptions {
    pub dispatch: DispatchTable,
    pub sampler: SamplerConfig,
    pub draft_mode: DraftMode,
    pub fsm: Option<GuidedFsm>,
    pub stop_tokens: Vec<u32>,
    pub max_context: usize,
    /// `false` runs plain one-token-per-call decoding.
    pub speculative: bool,
    /// Keep the logits behind every committed token (for cache comparisons).
    pub record_logits: bool,
    pub fault: Fault,
}

impl EngineOptions {
    pub fn new(dispatch: DispatchTable, sampler: SamplerConfig) -> Self {
        Self {
            dispatch,
            sampler,
            draft_mode: DraftMode::GreedyChildren,
            fsm: None,
            stop_tokens: Vec::new(),
            max_context: 4096,
            speculative: true,
            record_logits: false,
            fault: Fault::None,
        }
    }

    pub fn from_config(cfg: &EngineConfig) -> Result<Self> {
        Ok(Self {
            draft_mode: cfg.draft_mode,
            fsm: cfg.load_fsm()?,
            stop_tokens: cfg.stop_tokens.clone(),
            max_context: cfg.max_context,
            ..Self::new(cfg.dispatch_table()?, cfg.sampler)
        })
    }
}

/// Per-request decoding state.
#[derive(Debug, Clone)]
pub struct DecodeSession {
    pub prompt: Vec<u32>,
    /// Prompt followed by every committed output token.
    pub committed: Vec<u32>,
    base_seq: SeqId,
    draft_seq: SeqId,
    /// Base hidden state per cached position.
    pub tape: HiddenTape,
    pub fsm_state: Option<FsmState>,
    pub seed: u64,
    /// RNG step of the next sampling event (0 is prefill).
    pub step: u64,
    pub metrics: StageMetrics,
    pub finished: bool,
    /// Logits behind each committed output token, when recording.
    pub logit_trace: Vec<Vec<f64>>,
    prefilled: bool,
}

impl DecodeSession {
    pub fn output(&self) -> &[u32] {
        &self.committed[self.prompt.len()..]
    }

    pub fn last_hidden(&self) -> Option<&[f64]> {
        self.tape.last()
    }

    pub fn is_prefilled(&self) -> bool {
        self.prefilled
    }
}

/// Everything one round produced before bookkeeping.
struct RoundPlan {
    draft: DraftResult,
    targets: Vec<TokenDist>,
    logits: Matrix,
    hidden: Matrix,
}

pub struct Engine<'m, C: KvBackend> {
    base: &'m BaseModel,
    draft: &'m DraftModel,
    pub base_cache: C,
    pub draft_cache: C,
    pub opts: EngineOptions,
}

impl<'m> Engine<'m, PagedKvCache> {
    /// Paged caches with the same block count for base and draft.
    pub fn paged(base: &'m BaseModel, draft: &'m DraftModel, kv: PagedKvConfig, opts: EngineOptions) -> Result<Self> {
        let bc = &base.config;
        let dc = &draft.config;
        let base_cache = PagedKvCache::new(kv.clone(), bc.n_layers, bc.dim, bc.dim)?;
        let draft_cache = PagedKvCache::new(kv, dc.n_layers, dc.dim, 0)?;
        Self::new(base, draft, base_cache, draft_cache, opts)
    }
}

impl<'m> Engine<'m, FlatKvCache> {
    pub fn flat(base: &'m BaseModel, draft: &'m DraftModel, opts: EngineOptions) -> Result<Self> {
        let base_cache = FlatKvCache::new(base.config.n_layers, base.config.dim);
        let draft_cache = FlatKvCache::new(draft.config.n_layers, draft.config.dim);
        Self::new(base, draft, base_cache, draft_cache, opts)
    }
}

fn elapsed(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl<'m, C: KvBackend> Engine<'m, C> {
    pub fn new(base: &'m BaseModel, draft: &'m DraftModel, base_cache: C, draft_cache: C, opts: EngineOptions) -> Result<Self> {
        opts.sampler.validate()?;
        if !draft.is_tied_to(base) {
            return Err(Error::Config("draft model is not tied to this base model".into()));
        }
        if let Some(fsm) = &opts.fsm {
            fsm.check_vocab(base.config.vocab_size)?;
        }
        Ok(Self {
            base,
            draft,
            base_cache,
            draft_cache,
            opts,
        })
    }

    pub fn base(&self) -> &BaseModel {
        self.base
    }

    pub fn new_session(&mut self, prompt: &[u32], seed: u64) -> Result<DecodeSession> {
        if prompt.is_empty() {
            return Err(Error::InvalidArgument("prompt must be non-empty".into()));
        }
        Ok(DecodeSession {
            prompt: prompt.to_vec(),
            committed: prompt.to_vec(),
            base_seq: self.base_cache.open_seq(),
            draft_seq: self.draft_cache.open_seq(),
            tape: HiddenTape::new(self.base.config.dim),
            fsm_state: self.opts.fsm.as_ref().map(GuidedFsm::start),
            seed,
            step: 0,
            metrics: StageMetrics::default(),
            finished: false,
            logit_trace: Vec::new(),
            prefilled: false,
        })
    }

    /// Releases the session's cache blocks, keeping full blocks for reuse.
    pub fn close_session(&mut self, s: DecodeSession) -> Result<()> {
        let cached = s.committed.len() - 1;
        let toks = &s.committed[..cached];
        self.base_cache.close_seq(s.base_seq, toks, Some(&s.tape))?;
        self.draft_cache.close_seq(s.draft_seq, toks, None)
    }

    fn allowed(&self, state: Option<FsmState>) -> Option<Vec<bool>> {
        let fsm = self.opts.fsm.as_ref()?;
        let s = state?;
        // final states end generation; their rows are never sampled from
        (!fsm.is_final(s)).then(|| fsm.allowed_mask(s, self.base.config.vocab_size))
    }

    fn target(&self, logits: &[f64], state: Option<FsmState>) -> Result<TokenDist> {
        target_dist(logits, &self.opts.sampler, self.allowed(state).as_deref())
    }

    /// Commits `tokens` to the session; returns how many were kept.
    fn commit_tokens(&self, s: &mut DecodeSession, tokens: &[u32], logits: &[&[f64]], budget: usize) -> usize {
        let mut kept = 0;
        for (i, &t) in tokens.iter().enumerate() {
            if kept == budget || s.finished {
                break;
            }
            s.committed.push(t);
            if self.opts.record_logits {
                s.logit_trace.push(logits[i].to_vec());
            }
            kept += 1;
            if let (Some(fsm), Some(st)) = (&self.opts.fsm, s.fsm_state) {
                s.fsm_state = fsm.fsm_advance(st, t);
                if s.fsm_state.is_none_or(|n| fsm.is_final(n)) {
                    s.finished = true;
                }
            }
            if self.opts.stop_tokens.contains(&t) || s.committed.len() >= self.opts.max_context {
                s.finished = true;
            }
        }
        if kept == budget {
            s.finished = true;
        }
        kept
    }

    /// Prefill both models and sample the first output token.
    pub fn prefill(&mut self, s: &mut DecodeSession) -> Result<u32> {
        if s.prefilled {
            return Err(Error::InvalidArgument("session already prefilled".into()));
        }
        let t0 = Instant::now();
        let prompt = s.prompt.clone();
        let p = prompt.len();

        let bh = self.base_cache.lookup_prefix(s.base_seq, &prompt)?;
        let dh = self.draft_cache.lookup_prefix(s.draft_seq, &prompt)?;
        let mut m = bh.matched_len.min(dh.matched_len);
        if bh.hidden.is_none() {
            m = 0;
        }
        if bh.matched_len != m {
            self.base_cache.rewind(s.base_seq, m)?;
        }
        if dh.matched_len != m {
            self.draft_cache.rewind(s.draft_seq, m)?;
        }
        if let Some(h) = bh.hidden.filter(|_| m > 0) {
            s.tape.extend(&h.select_rows(&(0..m).collect::<Vec<_>>()))?;
        }

        let out = {
            let mut kv = KvHandle::new(&mut self.base_cache, s.base_seq);
            self.base.base_forward(&prompt[m..], &mut kv)?
        };
        s.metrics.base_forward_calls += 1;
        s.metrics.prefill_tokens_computed += (p - m) as u64;
        s.metrics.prefix_hit_tokens += m as u64;
        s.tape.extend(&out.hidden)?;

        let last = out.logits.row(out.logits.rows() - 1);
        let dist = self.target(last, s.fsm_state)?;
        let first = dist.sample(uniform_row(s.seed, s.step, 1)[0]);
        s.step += 1;

        // first-token fusion: position 0 sees its own hidden state
        let prev: Vec<usize> = (m..p).map(|i| i.saturating_sub(1)).collect();
        let prev_hidden = Matrix::from_fn(prev.len(), self.base.config.dim, |r, c| s.tape.row(prev[r])[c]);
        {
            let mut kv = KvHandle::new(&mut self.draft_cache, s.draft_seq);
            self.draft.draft_forward(&prompt[m..], &prev_hidden, &mut kv)?;
        }
        s.metrics.draft_forward_calls += 1;
        s.prefilled = true;
        let logits = out.logits.row(out.logits.rows() - 1).to_vec();
        self.commit_tokens(s, &[first], &[&logits], usize::MAX);
        s.metrics.prefill_ms += elapsed(t0);
        Ok(first)
    }

    /// Tree for this round after iRoPE truncation and the context limit.
    fn plan_tree(&self, s: &DecodeSession, tree: &TreeSpec) -> Option<TreeSpec> {
        let l = s.committed.len();
        let chunk = self.base.config.local_attn_chunk;
        let t = truncate_draft_at_boundary(tree, l, chunk)?;
        let limit = self.opts.max_context;
        t.retain(|i| node_position(l, t.depth(i)) < limit)
    }

    /// Alignment pass plus one draft pass per tree depth.
    pub fn draft_stage(&mut self, s: &mut DecodeSession, tree: &TreeSpec) -> Result<(DraftResult, Vec<Option<FsmState>>)> {
        let n = tree.len();
        let l = s.committed.len();
        let c = l - 1;
        let dim = self.base.config.dim;
        self.draft_cache.reserve(s.draft_seq, c + n + 1)?;
        let mut kv = KvHandle::new(&mut self.draft_cache, s.draft_seq);
        let mut suffix = SuffixKv::new(self.draft.config.n_layers, c);
        let last_hidden = s
            .tape
            .last()
            .ok_or_else(|| Error::InvalidArgument("session not prefilled".into()))?;
        let align = self.draft.forward(
            &[s.committed[c]],
            &Matrix::from_vec(1, dim, last_hidden.to_vec())?,
            &[c],
            &BoolMatrix::new(1, 1, true),
            &mut kv,
            &mut suffix,
        )?;
        s.metrics.draft_forward_calls += 1;

        let mut tokens = vec![0u32; n];
        let mut dists: Vec<Option<TokenDist>> = vec![None; n];
        let mut states: Vec<Option<FsmState>> = vec![None; n];
        let mut node_hidden = Matrix::zeros(n, dim);
        let mut du = uniform_row(s.seed ^ DRAFT_STREAM_SALT, s.step, n).into_iter();

        let fsm = self.opts.fsm.as_ref();
        let vocab = self.base.config.vocab_size;
        let allowed = |st: Option<FsmState>| -> Option<Vec<bool>> {
            let (f, st) = (fsm?, st?);
            (!f.is_final(st)).then(|| f.allowed_mask(st, vocab))
        };
        let mut expand = |parent: Parent,
                          logits: &[f64],
                          pstate: Option<FsmState>,
                          tokens: &mut [u32],
                          dists: &mut [Option<TokenDist>],
                          states: &mut [Option<FsmState>]|
         -> Result<()> {
            let kids = tree.children(parent);
            if kids.is_empty() {
                return Ok(());
            }
            let q = draft_dist(logits, &self.opts.sampler, allowed(pstate).as_deref())?;
            let proposals = propose_children(&q, kids.len(), self.opts.draft_mode, &mut du)?;
            for (&k, (t, qk)) in kids.iter().zip(proposals) {
                tokens[k] = t;
                dists[k] = Some(qk);
                states[k] = match (fsm, pstate) {
                    (Some(f), Some(ps)) => f.fsm_advance(ps, t),
                    _ => None,
                };
            }
            Ok(())
        };
        expand(Parent::Root, align.logits.row(0), s.fsm_state, &mut tokens, &mut dists, &mut states)?;

        let full_mask = rooted_mask(tree);
        let root_hidden = align.hidden.row(0).to_vec();
        for d in 1..=tree.max_depth() {
            let nodes = tree.nodes_at_depth(d);
            let (lo, hi) = (nodes[0], nodes[nodes.len() - 1] + 1);
            debug_assert_eq!(hi - lo, nodes.len(), "breadth-first order keeps depths contiguous");
            let toks: Vec<u32> = nodes.iter().map(|&i| tokens[i]).collect();
            let prev = Matrix::from_fn(nodes.len(), dim, |r, col| match tree.parent(nodes[r]) {
                Parent::Root => root_hidden[col],
                Parent::Node(p) => node_hidden.get(p, col),
            });
            let positions = vec![c + d; nodes.len()];
            let mask = BoolMatrix::from_fn(nodes.len(), hi + 1, |r, col| full_mask.get(lo + r + 1, col));
            let out = self.draft.forward(&toks, &prev, &positions, &mask, &mut kv, &mut suffix)?;
            s.metrics.draft_forward_calls += 1;
            for (r, &i) in nodes.iter().enumerate() {
                node_hidden.row_mut(i).copy_from_slice(out.hidden.row(r));
                expand(Parent::Node(i), out.logits.row(r), states[i], &mut tokens, &mut dists, &mut states)?;
            }
        }
        let node_dists = dists
            .into_iter()
            .map(|d| d.ok_or_else(|| Error::InvalidTree("node without a proposal".into())))
            .collect::<Result<Vec<_>>>()?;
        Ok((
            DraftResult {
                tree: tree.clone(),
                node_tokens: tokens,
                node_dists,
            },
            states,
        ))
    }

    /// One base pass over root plus all tree nodes.
    fn validate_stage(&mut self, s: &mut DecodeSession, draft: &DraftResult, states: &[Option<FsmState>]) -> Result<(Vec<TokenDist>, Matrix, Matrix)> {
        let tree = &draft.tree;
        let l = s.committed.len();
        let c = l - 1;
        self.base_cache.reserve(s.base_seq, c + tree.len() + 1)?;
        let mut toks = vec![s.committed[c]];
        toks.extend_from_slice(&draft.node_tokens);
        let positions = rooted_positions(tree, l);
        let mask = rooted_mask(tree);
        if let Some(chunk) = self.base.config.local_attn_chunk {
            s.metrics.chunk_crossings += chunk_crossings(&mask, &positions, &positions, chunk) as u64;
        }
        let out = {
            let mut kv = KvHandle::new(&mut self.base_cache, s.base_seq);
            let mut suffix = SuffixKv::new(self.base.config.n_layers, c);
            self.base.forward(&toks, &positions, &mask, &mut kv, &mut suffix)?
        };
        s.metrics.base_forward_calls += 1;
        let mut targets = Vec::with_capacity(tree.len() + 1);
        targets.push(self.target(out.logits.row(0), s.fsm_state)?);
        for i in 0..tree.len() {
            targets.push(self.target(out.logits.row(i + 1), states[i])?);
        }
        Ok((targets, out.logits, out.hidden))
    }

    /// Plain single-token step: one base pass on the newest token, plus a
    /// draft alignment pass when speculation is on.
    fn plain_step(&mut self, s: &mut DecodeSession, budget: usize) -> Result<usize> {
        let c = s.committed.len() - 1;
        let last = s.committed[c];
        let t = Instant::now();
        let out = {
            let mut kv = KvHandle::new(&mut self.base_cache, s.base_seq);
            self.base.base_forward(&[last], &mut kv)?
        };
        s.metrics.base_forward_calls += 1;
        s.metrics.validate_ms += elapsed(t);
        if self.opts.speculative {
            let t = Instant::now();
            let prev = Matrix::from_vec(1, self.base.config.dim, s.tape.last().expect("prefilled").to_vec())?;
            let mut kv = KvHandle::new(&mut self.draft_cache, s.draft_seq);
            self.draft.draft_forward(&[last], &prev, &mut kv)?;
            s.metrics.draft_forward_calls += 1;
            s.metrics.draft_ms += elapsed(t);
        }
        let t = Instant::now();
        s.tape.extend(&out.hidden)?;
        let dist = self.target(out.logits.row(0), s.fsm_state)?;
        let tok = dist.sample(uniform_row(s.seed, s.step, 1)[0]);
        s.metrics.sample_ms += elapsed(t);
        s.step += 1;
        let kept = self.commit_tokens(s, &[tok], &[out.logits.row(0)], budget);
        s.metrics.rounds += 1;
        s.metrics.committed_total += kept as u64;
        Ok(kept)
    }

    fn plan_round(&mut self, s: &mut DecodeSession, tree: &TreeSpec) -> Result<RoundPlan> {
        let t = Instant::now();
        let (draft, node_states) = self.draft_stage(s, tree)?;
        s.metrics.draft_ms += elapsed(t);
        let t = Instant::now();
        let (targets, logits, hidden) = self.validate_stage(s, &draft, &node_states)?;
        s.metrics.validate_ms += elapsed(t);
        Ok(RoundPlan {
            draft,
            targets,
            logits,
            hidden,
        })
    }

    fn finish_round(&mut self, s: &mut DecodeSession, plan: RoundPlan, uniforms: &[f64], budget: usize) -> Result<usize> {
        let t = Instant::now();
        let outcome = mss_verify(&plan.draft, &plan.targets, uniforms, self.opts.draft_mode)?;
        s.metrics.sample_ms += elapsed(t);
        s.step += 1;

        let t = Instant::now();
        let mut toks: Vec<u32> = outcome.accepted.iter().map(|&i| plan.draft.node_tokens[i]).collect();
        toks.push(outcome.next_token);
        let mut rows = vec![0usize];
        rows.extend(outcome.accepted.iter().map(|&i| i + 1));
        let logit_rows: Vec<&[f64]> = rows.iter().map(|&r| plan.logits.row(r)).collect();
        let kept = self.commit_tokens(s, &toks, &logit_rows, budget);

        // cached positions grow by `kept`: the root plus the first kept-1 accepted nodes
        let c = s.committed.len() - kept - 1;
        let from: Vec<usize> = outcome.accepted[..kept - 1].iter().map(|&i| c + 1 + i).collect();
        if self.opts.fault != Fault::SkipRewind {
            self.base_cache.compact_accepted(s.base_seq, &from, c + 1)?;
            self.base_cache.rewind(s.base_seq, c + kept)?;
        }
        self.draft_cache.compact_accepted(s.draft_seq, &from, c + 1)?;
        self.draft_cache.rewind(s.draft_seq, c + kept)?;
        s.tape.extend(&plan.hidden.select_rows(&rows[..kept]))?;

        s.metrics.rounds += 1;
        s.metrics.committed_total += kept as u64;
        s.metrics.accepted_total += outcome.accepted.len().min(kept - 1) as u64;
        s.metrics.bookkeep_ms += elapsed(t);
        Ok(kept)
    }

    fn check_ready(&self, s: &DecodeSession) -> Result<()> {
        if !s.prefilled {
            return Err(Error::InvalidArgument("session not prefilled".into()));
        }
        if s.finished {
            return Err(Error::InvalidArgument("session already finished".into()));
        }
        Ok(())
    }

    /// One round; commits at most `budget` tokens (always at least one).
    pub fn decode_round(&mut self, s: &mut DecodeSession, budget: usize) -> Result<usize> {
        self.check_ready(s)?;
        if budget == 0 {
            return Err(Error::InvalidArgument("round budget must be >= 1".into()));
        }
        if !self.opts.speculative {
            return self.plain_step(s, budget);
        }
        let t = Instant::now();
        let tree = self.opts.dispatch.dispatch(1).clone();
        let planned = self.plan_tree(s, &tree);
        s.metrics.dispatch_ms += elapsed(t);
        let Some(tree) = planned else {
            s.metrics.fallback_steps += 1;
            return self.plain_step(s, budget);
        };
        let plan = self.plan_round(s, &tree)?;
        let u = uniform_row(s.seed, s.step, tree.len() + 1);
        self.finish_round(s, plan, &u, budget)
    }

    /// Prefill then rounds until `max_new_tokens`, a stop token or the context limit.
    pub fn run(&mut self, s: &mut DecodeSession, max_new_tokens: usize) -> Result<Vec<u32>> {
        if max_new_tokens == 0 {
            return Ok(Vec::new());
        }
        if !s.prefilled {
            self.prefill(s)?;
        }
        while !s.finished && s.output().len() < max_new_tokens {
            let budget = max_new_tokens - s.output().len();
            self.decode_round(s, budget)?;
        }
        Ok(s.output().to_vec())
    }

    /// Lockstep decoding; the tree is dispatched on the live batch size each round.
    pub fn run_batch(&mut self, sessions: &mut [DecodeSession], max_new_tokens: usize) -> Result<StageMetrics> {
        if sessions.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if max_new_tokens > 0 {
            for s in sessions.iter_mut().filter(|s| !s.prefilled) {
                self.prefill(s)?;
            }
        }
        let world = self.opts.sampler.simulated_world_size;
        loop {
            let active: Vec<usize> = (0..sessions.len())
                .filter(|&i| !sessions[i].finished && sessions[i].output().len() < max_new_tokens)
                .collect();
            if active.is_empty() {
                break;
            }
            if !self.opts.speculative {
                for &i in &active {
                    let budget = max_new_tokens - sessions[i].output().len();
                    self.plain_step(&mut sessions[i], budget)?;
                }
                continue;
            }
            let t = Instant::now();
            let tree = self.opts.dispatch.dispatch(active.len()).clone();
            let dispatch_ms = elapsed(t) / active.len() as f64;

            let mut plans = Vec::with_capacity(active.len());
            for &i in &active {
                let s = &mut sessions[i];
                s.metrics.dispatch_ms += dispatch_ms;
                match self.plan_tree(s, &tree) {
                    Some(tr) => plans.push(Some(self.plan_round(s, &tr)?)),
                    None => plans.push(None),
                }
            }

            // one uniform matrix for the padded batch, assembled across ranks
            let width = tree.len() + 1;
            let padded = active.len().div_ceil(world) * world;
            let mut seeds: Vec<u64> = active.iter().map(|&i| sessions[i].seed).collect();
            seeds.extend((seeds.len()..padded).map(|p| u64::MAX - p as u64));
            let step = sessions[active[0]].step;
            if active.iter().any(|&i| sessions[i].step != step) {
                return Err(Error::InvalidArgument("batched sessions are out of step".into()));
            }
            let uniforms = rank_sliced_uniforms(&seeds, step, width, world)?;

            for (row, (&i, plan)) in active.iter().zip(plans).enumerate() {
                let s = &mut sessions[i];
                let budget = max_new_tokens - s.output().len();
                match plan {
                    Some(p) => {
                        let n = p.draft.tree.len();
                        self.finish_round(s, p, &uniforms.row(row)[..n + 1], budget)?;
                    }
                    None => {
                        s.metrics.fallback_steps += 1;
                        self.plain_step(s, budget)?;
                    }
                }
            }
        }
        let mut total = StageMetrics::default();
        for s in sessions.iter() {
            total.merge(&s.metrics);
        }
        Ok(total)
    }

    /// Next-token logits from the current cache state, without committing anything.
    pub fn peek_next_logits(&mut self, s: &DecodeSession) -> Result<Vec<f64>> {
        let c = s.committed.len() - 1;
        self.base_cache.reserve(s.base_seq, c + 1)?;
        let mut kv = KvHandle::new(&mut self.base_cache, s.base_seq);
        let committed = kv.committed_len()?;
        let mut suffix = SuffixKv::new(self.base.config.n_layers, c.max(committed));
        let out = self
            .base
            .forward(&[s.committed[c]], &[c], &BoolMatrix::new(1, 1, true), &mut kv, &mut suffix)?;
        kv.cache.rewind(s.base_seq, committed)?;
        Ok(out.logits.row(0).to_vec())
    }

    /// Invariants between the session and its caches.
    pub fn check_session(&self, s: &DecodeSession) -> Result<()> {
        let want = s.committed.len() - 1;
        let b = self.base_cache.committed_len(s.base_seq)?;
        let d = self.draft_cache.committed_len(s.draft_seq)?;
        if b != want || d != want || s.tape.len() != want {
            return Err(Error::InvalidArgument(format!(
                "cache lengths base {b} draft {d} tape {} for {} committed tokens",
                s.tape.len(),
                s.committed.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
