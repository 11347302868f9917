//! Correctness suites with pass/fail reporting.

use std::cell::OnceCell;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specdec::attention::{explicit_tree_mask, naive_tree_attention, node_position, tree_attention, KvSpan};
use specdec::distill::{
    corpus_loss, eval_tpc, forward_trace, loss_and_grads, markov_corpus, params_mut, train_on, DistillBatch, TrainConfig,
};
use specdec::drafttree::{build_chain, build_full_tree, suffix_mask, DispatchTable, TreeSpec};
use specdec::engine::{greedy_reference, Engine, EngineOptions, Fault, StageMetrics};
use specdec::kvstore::{FlatKvCache, KvBackend, KvHandle, PagedKvCache, PagedKvConfig};
use specdec::model::{BaseModel, DraftModel, ForwardOutput, ModelConfig};
use specdec::numcore::Matrix;
use specdec::sampling::{mss_verify, propose_children, DraftMode, DraftResult, GuidedFsm, SamplerConfig, TokenDist};

use crate::bench::{run_point, BenchGrid};
use crate::fixture::{prompts, Fixture};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Lossless,
    Mss,
    Attention,
    Cache,
    Accounting,
    Distill,
    Rng,
    Guided,
    Trend,
    Irope,
}

impl Suite {
    pub const ALL: [Suite; 10] = [
        Suite::Lossless,
        Suite::Mss,
        Suite::Attention,
        Suite::Cache,
        Suite::Accounting,
        Suite::Distill,
        Suite::Rng,
        Suite::Guided,
        Suite::Trend,
        Suite::Irope,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Lossless => "lossless",
            Suite::Mss => "mss",
            Suite::Attention => "attention",
            Suite::Cache => "cache",
            Suite::Accounting => "accounting",
            Suite::Distill => "distill",
            Suite::Rng => "rng",
            Suite::Guided => "guided",
            Suite::Trend => "trend",
            Suite::Irope => "irope",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown suite {s:?}"))
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Smaller sample sizes for a fast smoke run.
    pub quick: bool,
    pub fault: Fault,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 7,
            quick: false,
            fault: Fault::None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub suite: Suite,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {:<10} {:>7.2}s  {}", self.suite.name(), self.seconds, self.detail)
    }
}

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: specdec::Error) -> String {
    e.to_string()
}

/// Lazily built models shared across suites.
pub struct Verifier {
    pub opts: VerifyOptions,
    global: OnceCell<Fixture>,
    chunked: OnceCell<Fixture>,
}

impl Verifier {
    pub fn new(opts: VerifyOptions) -> Self {
        Self {
            opts,
            global: OnceCell::new(),
            chunked: OnceCell::new(),
        }
    }

    fn fixture(&self, chunk: Option<usize>) -> std::result::Result<&Fixture, String> {
        let cell = if chunk.is_some() { &self.chunked } else { &self.global };
        if let Some(f) = cell.get() {
            return Ok(f);
        }
        let f = Fixture::new(self.opts.seed, chunk).map_err(err)?;
        Ok(cell.get_or_init(|| f))
    }

    fn engine_opts(&self, tree: TreeSpec) -> EngineOptions {
        let mut o = EngineOptions::new(DispatchTable::single(tree), SamplerConfig::greedy());
        o.fault = self.opts.fault;
        o
    }

    pub fn run(&self, suite: Suite) -> SuiteResult {
        let t0 = Instant::now();
        let r = match suite {
            Suite::Lossless => self.lossless(None),
            Suite::Mss => self.mss(),
            Suite::Attention => self.attention(),
            Suite::Cache => self.cache(),
            Suite::Accounting => self.accounting(),
            Suite::Distill => self.distill(),
            Suite::Rng => self.rng(),
            Suite::Guided => self.guided(),
            Suite::Trend => self.trend(),
            Suite::Irope => self.lossless(Some(8)),
        };
        let (passed, detail) = match r {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        SuiteResult {
            suite,
            passed,
            detail,
            seconds: t0.elapsed().as_secs_f64(),
        }
    }

    pub fn run_all(&self, suites: &[Suite]) -> Vec<SuiteResult> {
        suites.iter().map(|&s| self.run(s)).collect()
    }

    /// Temp-0 speculative output equals plain greedy output for every draft and tree.
    fn lossless(&self, chunk: Option<usize>) -> Check {
        let fx = self.fixture(chunk)?;
        let n_prompts = if self.opts.quick { 8 } else { 64 };
        let max_new = 24;
        let ps = prompts(n_prompts, self.opts.seed, 3, 14, fx.base.config.vocab_size);
        let want = ps
            .iter()
            .map(|p| greedy_reference(&fx.base, p, max_new, None, &[]))
            .collect::<specdec::Result<Vec<_>>>()
            .map_err(err)?;
        let mut total = StageMetrics::default();
        let mut runs = 0;
        for tree in acceptance_trees() {
            for (tag, draft) in fx.drafts() {
                let mut e = Engine::paged(&fx.base, draft, PagedKvConfig::default(), self.engine_opts(tree.clone())).map_err(err)?;
                for (i, (p, w)) in ps.iter().zip(&want).enumerate() {
                    let mut s = e.new_session(p, i as u64).map_err(err)?;
                    let got = e.run(&mut s, max_new).map_err(err)?;
                    ensure(&got == w, || format!("{tag} draft, tree {tree}, prompt {i}: output differs from greedy"))?;
                    e.check_session(&s).map_err(err)?;
                    total.merge(&s.metrics);
                    e.close_session(s).map_err(err)?;
                    runs += 1;
                }
            }
        }
        match chunk {
            None => Ok(format!("{runs} runs identical to greedy, tpc {:.3}", total.tpc())),
            Some(c) => {
                ensure(total.chunk_crossings == 0, || format!("{} cross-chunk mask entries", total.chunk_crossings))?;
                ensure(total.fallback_steps > 0, || "truncation never triggered".into())?;
                Ok(format!(
                    "chunk {c}: {runs} runs identical to greedy, 0 cross-chunk mask entries, {} truncated-to-empty rounds",
                    total.fallback_steps
                ))
            }
        }
    }

    /// First emitted token of stochastic chain drafting follows the target.
    fn mss(&self) -> Check {
        let draws = if self.opts.quick { 100_000 } else { 1_000_000 };
        let vocab = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(self.opts.seed ^ 0x355);
        let mut worst = 0.0f64;
        for inst in 0..10 {
            // sparse instances zero out some tokens on one side
            let dist = |rng: &mut ChaCha8Rng, sparse: bool| {
                let w: Vec<f64> = (0..vocab)
                    .map(|_| {
                        let x: f64 = rng.gen();
                        if sparse && rng.gen_bool(0.3) {
                            0.0
                        } else {
                            x * x + 1e-3
                        }
                    })
                    .collect();
                TokenDist::normalized(w).expect("positive mass")
            };
            let p: Vec<TokenDist> = (0..4).map(|_| dist(&mut rng, inst % 3 == 1)).collect();
            let q: Vec<TokenDist> = (0..3).map(|_| dist(&mut rng, inst % 3 == 2)).collect();
            for depth in 1..=3 {
                let tree = build_chain(depth).map_err(err)?;
                let target = &p[..=depth];
                let mut counts = vec![0u64; vocab];
                let mut u = vec![0.0; depth + 1];
                for _ in 0..draws {
                    let mut tokens = Vec::with_capacity(depth);
                    let mut dists = Vec::with_capacity(depth);
                    for qd in &q[..depth] {
                        let (t, d) = propose_children(qd, 1, DraftMode::Stochastic, &mut std::iter::from_fn(|| Some(rng.gen())))
                            .map_err(err)?
                            .remove(0);
                        tokens.push(t);
                        dists.push(d);
                    }
                    u.iter_mut().for_each(|x| *x = rng.gen());
                    let draft = DraftResult {
                        tree: tree.clone(),
                        node_tokens: tokens,
                        node_dists: dists,
                    };
                    let out = mss_verify(&draft, target, &u, DraftMode::Stochastic).map_err(err)?;
                    let first = out.accepted.first().map_or(out.next_token, |&c| draft.node_tokens[c]);
                    counts[first as usize] += 1;
                }
                let tv = 0.5
                    * counts
                        .iter()
                        .zip(p[0].probs())
                        .map(|(&c, &pt)| (c as f64 / draws as f64 - pt).abs())
                        .sum::<f64>();
                ensure(tv < 0.01, || format!("instance {inst} depth {depth}: tv {tv:.4}"))?;
                worst = worst.max(tv);
            }
        }
        Ok(format!("30 cases x {draws} draws, max tv {worst:.4}"))
    }

    /// Split tree attention against a single explicit-mask pass.
    fn attention(&self) -> Check {
        let mut rng = ChaCha8Rng::seed_from_u64(self.opts.seed ^ 0xa77);
        let mut worst = 0.0f64;
        for case in 0..100 {
            let heads = [1, 2, 4][rng.gen_range(0..3)];
            let dim = heads * 2 * rng.gen_range(1..=4);
            let n = rng.gen_range(1..=16);
            let parents: Vec<Option<usize>> = (0..n)
                .map(|i| (i > 0 && rng.gen_bool(0.7)).then(|| rng.gen_range(0..i)))
                .collect();
            let tree = TreeSpec::from_parents(&parents).map_err(err)?;
            let ctx = rng.gen_range(0..=64);
            let chunk = (case % 2 == 1).then(|| rng.gen_range(2..=16));
            let m = |rng: &mut ChaCha8Rng, r: usize| Matrix::from_fn(r, dim, |_, _| rng.gen_range(-2.0..2.0));
            let (q, ck, cv, tk, tv) = (m(&mut rng, n), m(&mut rng, ctx), m(&mut rng, ctx), m(&mut rng, n), m(&mut rng, n));
            let ctx_pos: Vec<usize> = (0..ctx).collect();
            let qpos: Vec<usize> = (0..n).map(|i| node_position(ctx + 1, tree.depth(i))).collect();
            let mask = suffix_mask(&tree).into_matrix();
            let fast = tree_attention(
                &q,
                &qpos,
                KvSpan {
                    k: &ck,
                    v: &cv,
                    positions: &ctx_pos,
                },
                KvSpan {
                    k: &tk,
                    v: &tv,
                    positions: &qpos,
                },
                &mask,
                heads,
                chunk,
            )
            .map_err(err)?;
            let em = explicit_tree_mask(&ctx_pos, &qpos, &qpos, &mask, chunk);
            let slow = naive_tree_attention(
                &q,
                &ck.vstack(&tk).map_err(err)?,
                &cv.vstack(&tv).map_err(err)?,
                &em,
                heads,
            )
            .map_err(err)?;
            let d = fast.max_abs_diff(&slow);
            ensure(d < 1e-5, || format!("case {case}: max abs diff {d:e}"))?;
            worst = worst.max(d);
        }
        Ok(format!("100 cases, max abs diff {worst:.2e}"))
    }

    /// Paged+persistent vs flat logits, rewind vs re-prefill, matching store keys.
    fn cache(&self) -> Check {
        let fx = self.fixture(None)?;
        let vocab = fx.base.config.vocab_size;
        let kv = PagedKvConfig {
            block_size: 4,
            num_blocks: 48,
            persistent_blocks: 64,
        };
        let n = if self.opts.quick { 4 } else { 12 };
        // repeated prompts hit the prefix cache and, after eviction, the persistent store
        let mut ps = prompts(n, self.opts.seed ^ 0xc4, 5, 13, vocab);
        ps.extend(ps.clone());
        let mut worst_trace = 0.0f64;
        let mut worst_rewind = 0.0f64;
        let mut hits = 0;
        for tree in [build_chain(3).map_err(err)?, build_full_tree(2, 2).map_err(err)?] {
            for (tag, draft) in [("random", &fx.random), ("trained", &fx.trained)] {
                let mut o = self.engine_opts(tree.clone());
                o.record_logits = true;
                let mut paged = Engine::paged(&fx.base, draft, kv, o.clone()).map_err(err)?;
                o.fault = Fault::None;
                let mut flat = Engine::flat(&fx.base, draft, o).map_err(err)?;
                for (i, p) in ps.iter().enumerate() {
                    let mut a = paged.new_session(p, i as u64).map_err(err)?;
                    let mut b = flat.new_session(p, i as u64).map_err(err)?;
                    paged.prefill(&mut a).map_err(err)?;
                    flat.run(&mut b, 20).map_err(err)?;
                    while !a.finished && a.output().len() < 20 {
                        let budget = 20 - a.output().len();
                        paged.decode_round(&mut a, budget).map_err(err)?;
                        let got = paged.peek_next_logits(&a).map_err(err)?;
                        worst_rewind = worst_rewind.max(max_diff(&got, &fresh_logits(&fx.base, &a.committed)?));
                    }
                    for (x, y) in a.logit_trace.iter().zip(&b.logit_trace) {
                        worst_trace = worst_trace.max(max_diff(x, y));
                    }
                    ensure(a.output() == b.output(), || format!("{tag}, tree {tree}, prompt {i}: paged and flat outputs differ"))?;
                    hits += a.metrics.prefix_hit_tokens;
                    paged.close_session(a).map_err(err)?;
                    if i % 3 == 2 {
                        evict_all(&mut paged.base_cache, &mut paged.draft_cache)?;
                    }
                }
                evict_all(&mut paged.base_cache, &mut paged.draft_cache)?;
                let keys = |c: &PagedKvCache| c.store().keys().copied().collect::<Vec<_>>();
                let (kb, kd) = (keys(&paged.base_cache), keys(&paged.draft_cache));
                ensure(!kb.is_empty() && kb == kd, || {
                    format!("{tag}, tree {tree}: base store {} keys, draft store {} keys, equal {}", kb.len(), kd.len(), kb == kd)
                })?;
            }
        }
        ensure(worst_trace < 1e-6, || format!("paged vs flat logits differ by {worst_trace:e}"))?;
        ensure(worst_rewind < 1e-6, || format!("rewind vs re-prefill logits differ by {worst_rewind:e}"))?;
        ensure(hits > 0, || "no prefix hits in the scripted workload".into())?;
        Ok(format!(
            "paged vs flat {worst_trace:.1e}, rewind vs re-prefill {worst_rewind:.1e}, {hits} prefix-hit tokens, store keys equal"
        ))
    }

    /// Call counts and oracle tokens per call.
    fn accounting(&self) -> Check {
        let fx = self.fixture(None)?;
        let vocab = fx.base.config.vocab_size;
        let ps = prompts(8, self.opts.seed ^ 0xacc, 3, 10, vocab);
        for tree in acceptance_trees() {
            for (tag, draft) in fx.drafts() {
                let mut e = Engine::flat(&fx.base, draft, self.engine_opts(tree.clone())).map_err(err)?;
                for p in &ps {
                    let mut s = e.new_session(p, 0).map_err(err)?;
                    let out = e.run(&mut s, 20).map_err(err)?;
                    let m = &s.metrics;
                    ensure(m.base_forward_calls == 1 + m.rounds, || {
                        format!("{tag}/{tree}: {} base calls for {} rounds", m.base_forward_calls, m.rounds)
                    })?;
                    ensure(m.committed_total + 1 == out.len() as u64, || format!("{tag}/{tree}: committed count off"))?;
                    ensure(m.tpc() == m.committed_total as f64 / m.rounds as f64, || "tpc identity".into())?;
                    ensure(m.draft_forward_calls == 1 + m.rounds * (1 + tree.max_depth() as u64), || {
                        format!("{tag}/{tree}: {} draft calls for {} rounds", m.draft_forward_calls, m.rounds)
                    })?;
                    e.close_session(s).map_err(err)?;
                }
            }
        }
        let oracle = DraftModel::oracle(&fx.base);
        let mut tpcs = Vec::new();
        for l in [1usize, 3, 5] {
            let mut e = Engine::flat(&fx.base, &oracle, self.engine_opts(build_chain(l).map_err(err)?)).map_err(err)?;
            let mut m = StageMetrics::default();
            for p in &ps {
                let mut s = e.new_session(p, 0).map_err(err)?;
                e.run(&mut s, 1 + 6 * (l + 1)).map_err(err)?;
                m.merge(&s.metrics);
                e.close_session(s).map_err(err)?;
            }
            ensure(m.tpc() == (l + 1) as f64, || format!("oracle chain-{l}: tpc {}", m.tpc()))?;
            tpcs.push(m.tpc());
        }
        Ok(format!("base calls = 1 + rounds, oracle chain-1/3/5 tpc {tpcs:?}"))
    }

    /// Gradient check, loss reduction and trained-vs-untrained TPC.
    fn distill(&self) -> Check {
        let grad_err = gradient_check(self.opts.seed)?;
        ensure(grad_err < 1e-4, || format!("gradient rel err {grad_err:e}"))?;

        let base = BaseModel::random(ModelConfig::toy_base(), self.opts.seed).map_err(err)?;
        let untrained = DraftModel::random(&base, ModelConfig::toy_draft(&base.config), self.opts.seed + 1).map_err(err)?;
        let cfg = TrainConfig {
            seed: self.opts.seed,
            ..TrainConfig::default()
        };
        let vocab = base.config.vocab_size;
        let corpus = markov_corpus(vocab, cfg.corpus_size, cfg.seq_len, cfg.seed);
        let mut trained = untrained.clone();
        let before = corpus_loss(&base, &trained, &corpus, &cfg).map_err(err)?;
        train_on(&base, &mut trained, &corpus, &cfg, 0).map_err(err)?;
        let after = corpus_loss(&base, &trained, &corpus, &cfg).map_err(err)?;
        let ratio = after.total / before.total;
        ensure(ratio <= 0.5, || format!("loss {:.4} -> {:.4} (ratio {ratio:.3})", before.total, after.total))?;

        let held = markov_corpus(vocab, 16, 8, cfg.seed.wrapping_add(0x4e1d));
        let chain = build_chain(3).map_err(err)?;
        let t0 = eval_tpc(&base, &untrained, &held, &chain, SamplerConfig::greedy(), 32).map_err(err)?;
        let t1 = eval_tpc(&base, &trained, &held, &chain, SamplerConfig::greedy(), 32).map_err(err)?;
        ensure(t1 > t0, || format!("trained tpc {t1:.3} <= untrained {t0:.3}"))?;
        Ok(format!(
            "grad rel err {grad_err:.1e}; {} steps loss {:.3} -> {:.3} (x{ratio:.3}); held-out tpc {t0:.3} -> {t1:.3}",
            cfg.steps, before.total, after.total
        ))
    }

    /// Batch outputs identical across simulated world sizes.
    fn rng(&self) -> Check {
        let fx = self.fixture(None)?;
        let sampler = SamplerConfig {
            temperature: 0.8,
            top_p: 0.95,
            seed: self.opts.seed,
            simulated_world_size: 1,
        };
        let vocab = fx.base.config.vocab_size;
        let ps = prompts(6, self.opts.seed ^ 0x5eed, 4, 9, vocab);
        let seeds = [3u64, 3, 8, 9, 10, 11];
        let mut outs: Vec<Vec<Vec<u32>>> = Vec::new();
        for world in [1usize, 2, 4] {
            let mut o = EngineOptions::new(DispatchTable::single(build_full_tree(2, 2).map_err(err)?), sampler);
            o.sampler.simulated_world_size = world;
            o.draft_mode = DraftMode::Stochastic;
            let mut e = Engine::paged(&fx.base, &fx.trained, PagedKvConfig::default(), o).map_err(err)?;
            let mut batch = ps
                .iter()
                .zip(seeds)
                .map(|(p, s)| e.new_session(p, s))
                .collect::<specdec::Result<Vec<_>>>()
                .map_err(err)?;
            e.run_batch(&mut batch, 20).map_err(err)?;
            outs.push(batch.iter().map(|s| s.output().to_vec()).collect());
        }
        ensure(outs[0] == outs[1] && outs[0] == outs[2], || "outputs depend on world size".into())?;
        Ok(format!("6 sessions x 20 tokens at T=0.8 identical for world sizes 1, 2, 4"))
    }

    /// FSM-constrained decoding is lossless and every output is accepted.
    fn guided(&self) -> Check {
        let fx = self.fixture(None)?;
        let vocab = fx.base.config.vocab_size;
        let fsm = five_state_fsm(vocab).map_err(err)?;
        let ps = prompts(8, self.opts.seed ^ 0xf5, 3, 8, vocab);
        let mut runs = 0;
        for tree in [build_chain(3).map_err(err)?, build_full_tree(2, 2).map_err(err)?] {
            for (tag, draft) in fx.drafts() {
                let mut o = self.engine_opts(tree.clone());
                o.fsm = Some(fsm.clone());
                let mut e = Engine::paged(&fx.base, draft, PagedKvConfig::default(), o).map_err(err)?;
                for (i, p) in ps.iter().enumerate() {
                    let want = greedy_reference(&fx.base, p, 16, Some(&fsm), &[]).map_err(err)?;
                    let mut s = e.new_session(p, i as u64).map_err(err)?;
                    let got = e.run(&mut s, 16).map_err(err)?;
                    ensure(got == want, || format!("{tag}/{tree} prompt {i}: guided output differs"))?;
                    ensure(fsm.accepts(&got), || format!("{tag}/{tree} prompt {i}: output rejected by fsm"))?;
                    e.close_session(s).map_err(err)?;
                    runs += 1;
                }
            }
        }
        Ok(format!("{runs} guided runs accepted and identical to guided greedy"))
    }

    /// Bigger tree: slower rounds at large batch, no fewer tokens per call at batch 1.
    fn trend(&self) -> Check {
        let fx = self.fixture(None)?;
        let chain = build_chain(3).map_err(err)?;
        let wide = build_full_tree(3, 4).map_err(err)?;
        let batch = if self.opts.quick { 16 } else { 64 };
        let grid = BenchGrid {
            model_tag: "trained".into(),
            trees: Vec::new(),
            batches: Vec::new(),
            contexts: Vec::new(),
            max_new_tokens: 9,
            seed: self.opts.seed,
            kv: PagedKvConfig {
                block_size: 16,
                num_blocks: 64 * 8,
                persistent_blocks: 0,
            },
            options: self.engine_opts(chain.clone()),
        };
        let c = run_point(&fx.base, &fx.trained, &grid, Some(&chain), batch, 16).map_err(err)?;
        let w = run_point(&fx.base, &fx.trained, &grid, Some(&wide), batch, 16).map_err(err)?;
        let held = prompts(16, self.opts.seed ^ 0x7e, 4, 12, fx.base.config.vocab_size);
        let tc = eval_tpc(&fx.base, &fx.trained, &held, &chain, SamplerConfig::greedy(), 32).map_err(err)?;
        let tw = eval_tpc(&fx.base, &fx.trained, &held, &wide, SamplerConfig::greedy(), 32).map_err(err)?;
        let detail = format!(
            "batch {batch} round ms: {} {:.2}, {} {:.2}; batch 1 tpc: {} {tc:.3}, {} {tw:.3}",
            chain, c.round_ms, wide, w.round_ms, chain, wide
        );
        ensure(w.round_ms > c.round_ms && tw >= tc, || detail.clone())?;
        Ok(detail)
    }
}

/// Trees used by the losslessness grid.
pub fn acceptance_trees() -> Vec<TreeSpec> {
    vec![
        build_chain(1).expect("valid"),
        build_chain(3).expect("valid"),
        build_full_tree(2, 2).expect("valid"),
        // pruned 8-node tree, up to depth 4
        TreeSpec::from_parents(&[None, None, Some(0), Some(0), Some(1), Some(2), Some(2), Some(5)]).expect("valid"),
    ]
}

/// Five states; from state `s` token `t` is allowed when `(t + s) % 3 == 0`.
pub fn five_state_fsm(vocab: usize) -> specdec::Result<GuidedFsm> {
    let mut edges = Vec::new();
    for s in 0..5usize {
        for t in 0..vocab as u32 {
            if (t as usize + s) % 3 == 0 {
                edges.push((s, t, (s + t as usize) % 5));
            }
        }
    }
    GuidedFsm::new(5, 0, 0..5, edges)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn fresh_logits(base: &BaseModel, tokens: &[u32]) -> std::result::Result<Vec<f64>, String> {
    let mut c = FlatKvCache::new(base.config.n_layers, base.config.dim);
    let seq = c.open_seq();
    let o = base.base_forward(tokens, &mut KvHandle::new(&mut c, seq)).map_err(err)?;
    Ok(o.logits.row(o.logits.rows() - 1).to_vec())
}

fn evict_all(base: &mut PagedKvCache, draft: &mut PagedKvCache) -> std::result::Result<(), String> {
    for c in [base, draft] {
        let n = c.evictable();
        c.evict_lru(n).map_err(err)?;
    }
    Ok(())
}

/// Worst relative error of analytic vs central-difference gradients on a dim-8, one-layer draft.
pub fn gradient_check(seed: u64) -> std::result::Result<f64, String> {
    let cfg = ModelConfig {
        vocab_size: 16,
        dim: 8,
        n_heads: 2,
        head_dim: 4,
        n_layers: 2,
        ffn_hidden: 16,
        rope_theta: 10_000.0,
        local_attn_chunk: None,
    };
    let base = BaseModel::random(cfg, seed).map_err(err)?;
    let mut draft = DraftModel::random(&base, ModelConfig::toy_draft(&base.config), seed + 1).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c);
    for p in params_mut(&mut draft).map_err(err)? {
        p.iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
    }
    let tokens: Vec<u32> = (0..10).map(|_| rng.gen_range(0..16)).collect();
    let tcfg = TrainConfig::default();
    let batch = DistillBatch::new(&base, &tokens).map_err(err)?;
    let tied = draft.tied_read().clone();
    let (_, grads) = loss_and_grads(&draft, &tied, &batch, &tcfg).map_err(err)?;
    let loss = |d: &DraftModel| -> std::result::Result<f64, String> {
        let tr = forward_trace(d, &tied, &batch.tokens, &batch.draft_prev_hidden()).map_err(err)?;
        let out = ForwardOutput {
            hidden: tr.hidden,
            logits: tr.logits,
        };
        Ok(specdec::distill::distill_loss(&batch.base, &out, &tcfg).map_err(err)?.total)
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (k, g) in grads.0.iter().enumerate() {
        for _ in 0..10 {
            let i = rng.gen_range(0..g.len());
            let orig = params_mut(&mut draft).map_err(err)?[k][i];
            params_mut(&mut draft).map_err(err)?[k][i] = orig + h;
            let up = loss(&draft)?;
            params_mut(&mut draft).map_err(err)?[k][i] = orig - h;
            let down = loss(&draft)?;
            params_mut(&mut draft).map_err(err)?[k][i] = orig;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_roundtrip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn quick_attention_and_mss_pass() {
        let v = Verifier::new(VerifyOptions {
            quick: true,
            ..VerifyOptions::default()
        });
        for s in [Suite::Attention, Suite::Mss] {
            let r = v.run(s);
            assert!(r.passed, "{r}");
        }
    }
}
