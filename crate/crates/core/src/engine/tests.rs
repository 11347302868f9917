use super::*;
use crate::drafttree::{build_chain, build_full_tree};
use crate::model::ModelConfig;

fn models(chunk: Option<usize>) -> (BaseModel, DraftModel, DraftModel) {
    let mut cfg = ModelConfig::toy_base();
    cfg.local_attn_chunk = chunk;
    let base = BaseModel::random(cfg, 11).unwrap();
    let random = DraftModel::random(&base, ModelConfig::toy_draft(&base.config), 12).unwrap();
    let oracle = DraftModel::oracle(&base);
    (base, random, oracle)
}

fn opts(tree: TreeSpec) -> EngineOptions {
    EngineOptions::new(DispatchTable::single(tree), SamplerConfig::greedy())
}

fn prompt(seed: u64, len: usize) -> Vec<u32> {
    uniform_row(seed, 99, len).iter().map(|u| (u * 64.0) as u32).collect()
}

#[test]
fn oracle_chain3_commits_four_per_round() {
    let (base, _, oracle) = models(None);
    let mut e = Engine::flat(&base, &oracle, opts(build_chain(3).unwrap())).unwrap();
    let mut s = e.new_session(&prompt(1, 5), 0).unwrap();
    e.prefill(&mut s).unwrap();
    assert_eq!(e.decode_round(&mut s, usize::MAX).unwrap(), 4);
    e.check_session(&s).unwrap();
}

#[test]
fn run_matches_reference_and_accounting_holds() {
    let (base, random, oracle) = models(None);
    let trees = [
        build_chain(1).unwrap(),
        build_chain(3).unwrap(),
        build_full_tree(2, 2).unwrap(),
        TreeSpec::from_parents(&[None, None, Some(0), Some(0), Some(1), Some(2), Some(2), Some(5)]).unwrap(),
    ];
    for tree in &trees {
        for draft in [&random, &oracle] {
            for seed in 0..4 {
                let p = prompt(seed, 3 + seed as usize);
                let want = greedy_reference(&base, &p, 20, None, &[]).unwrap();
                let mut e = Engine::paged(&base, draft, PagedKvConfig::default(), opts(tree.clone())).unwrap();
                let mut s = e.new_session(&p, seed).unwrap();
                let got = e.run(&mut s, 20).unwrap();
                assert_eq!(got, want, "tree {tree}");
                e.check_session(&s).unwrap();
                let m = &s.metrics;
                assert_eq!(m.base_forward_calls, 1 + m.rounds);
                assert_eq!(m.committed_total + 1, got.len() as u64);
                assert_eq!(m.draft_forward_calls, 1 + m.rounds * (1 + tree.max_depth() as u64));
            }
        }
    }
}

#[test]
fn draft_stage_call_counts() {
    let (base, random, _) = models(None);
    for (tree, passes, nodes) in [(build_chain(3).unwrap(), 3, 3), (build_full_tree(2, 2).unwrap(), 2, 6)] {
        let mut e = Engine::flat(&base, &random, opts(tree.clone())).unwrap();
        let mut s = e.new_session(&prompt(3, 4), 0).unwrap();
        e.prefill(&mut s).unwrap();
        let before = s.metrics.draft_forward_calls;
        let (d, _) = e.draft_stage(&mut s, &tree).unwrap();
        assert_eq!(s.metrics.draft_forward_calls - before, 1 + passes);
        assert_eq!(d.node_tokens.len(), nodes);
    }
}

#[test]
fn oracle_draft_tokens_follow_base_greedy() {
    let (base, _, oracle) = models(None);
    let tree = build_chain(4).unwrap();
    let p = prompt(5, 6);
    let want = greedy_reference(&base, &p, 5, None, &[]).unwrap();
    let mut e = Engine::flat(&base, &oracle, opts(tree.clone())).unwrap();
    let mut s = e.new_session(&p, 0).unwrap();
    e.prefill(&mut s).unwrap();
    let (d, _) = e.draft_stage(&mut s, &tree).unwrap();
    assert_eq!(d.node_tokens, want[1..5]);
}

#[test]
fn single_token_budget_is_prefill_only() {
    let (base, random, _) = models(None);
    let mut e = Engine::flat(&base, &random, opts(build_chain(3).unwrap())).unwrap();
    let mut s = e.new_session(&[4], 0).unwrap();
    let out = e.run(&mut s, 1).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(s.metrics.rounds, 0);
    assert_eq!(s.metrics.base_forward_calls, 1);
}

#[test]
fn stop_token_truncates_commit() {
    let (base, _, oracle) = models(None);
    let p = prompt(7, 4);
    let free = greedy_reference(&base, &p, 12, None, &[]).unwrap();
    let stop = free[5];
    let want = greedy_reference(&base, &p, 12, None, &[stop]).unwrap();
    let mut o = opts(build_chain(3).unwrap());
    o.stop_tokens = vec![stop];
    let mut e = Engine::flat(&base, &oracle, o).unwrap();
    let mut s = e.new_session(&p, 0).unwrap();
    let got = e.run(&mut s, 12).unwrap();
    assert_eq!(got, want);
    assert_eq!(*got.last().unwrap(), stop);
    assert!(s.finished);
    e.check_session(&s).unwrap();
}

fn fresh_logits(base: &BaseModel, tokens: &[u32]) -> Vec<f64> {
    let mut c = FlatKvCache::new(base.config.n_layers, base.config.dim);
    let seq = c.open_seq();
    let o = base.base_forward(tokens, &mut KvHandle::new(&mut c, seq)).unwrap();
    o.logits.row(o.logits.rows() - 1).to_vec()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn rewind_matches_fresh_prefill_and_fault_is_caught() {
    let (base, random, _) = models(None);
    let p = prompt(8, 5);
    for fault in [Fault::None, Fault::SkipRewind] {
        let mut o = opts(build_full_tree(2, 2).unwrap());
        o.fault = fault;
        let mut e = Engine::paged(&base, &random, PagedKvConfig::default(), o).unwrap();
        let mut s = e.new_session(&p, 0).unwrap();
        e.prefill(&mut s).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..6 {
            e.decode_round(&mut s, usize::MAX).unwrap();
            let got = e.peek_next_logits(&s).unwrap();
            worst = worst.max(max_diff(&got, &fresh_logits(&base, &s.committed)));
        }
        match fault {
            Fault::None => assert!(worst < 1e-6, "{worst}"),
            Fault::SkipRewind => assert!(worst > 1e-3, "fault went unnoticed"),
        }
    }
}

#[test]
fn logit_trace_matches_sequential_decoding() {
    let (base, random, _) = models(None);
    let p = prompt(9, 4);
    let mut o = opts(build_chain(3).unwrap());
    o.record_logits = true;
    let mut e = Engine::flat(&base, &random, o).unwrap();
    let mut s = e.new_session(&p, 0).unwrap();
    e.run(&mut s, 10).unwrap();
    for (i, row) in s.logit_trace.iter().enumerate() {
        let ctx = &s.committed[..p.len() + i];
        assert!(max_diff(row, &fresh_logits(&base, ctx)) < 1e-6);
    }
}

#[test]
fn prefix_hit_skips_matched_prompt() {
    let (base, random, _) = models(None);
    let kv = PagedKvConfig {
        block_size: 4,
        num_blocks: 64,
        persistent_blocks: 64,
    };
    let mut e = Engine::paged(&base, &random, kv, opts(build_chain(2).unwrap())).unwrap();
    let p = prompt(10, 13);
    let mut s1 = e.new_session(&p, 0).unwrap();
    let first = e.run(&mut s1, 6).unwrap();
    e.close_session(s1).unwrap();
    let mut s2 = e.new_session(&p, 0).unwrap();
    let second = e.run(&mut s2, 6).unwrap();
    assert_eq!(first, second);
    assert_eq!(s2.metrics.prefix_hit_tokens, 12);
    assert_eq!(s2.metrics.prefill_tokens_computed, 1);
    // and after eviction to the persistent store
    e.close_session(s2).unwrap();
    let n = e.base_cache.evictable();
    e.base_cache.evict_lru(n).unwrap();
    let n = e.draft_cache.evictable();
    e.draft_cache.evict_lru(n).unwrap();
    let keys = |c: &PagedKvCache| c.store().keys().copied().collect::<Vec<_>>();
    assert_eq!(keys(&e.base_cache), keys(&e.draft_cache));
    assert!(!keys(&e.base_cache).is_empty());
    let mut s3 = e.new_session(&p, 0).unwrap();
    assert_eq!(e.run(&mut s3, 6).unwrap(), first);
    assert_eq!(s3.metrics.prefix_hit_tokens, 12);
}

#[test]
fn batch_consistency_and_world_size_invariance() {
    let (base, random, _) = models(None);
    let sampler = SamplerConfig {
        temperature: 0.8,
        top_p: 0.95,
        seed: 0,
        simulated_world_size: 1,
    };
    let tree = build_full_tree(2, 2).unwrap();
    let mut o = EngineOptions::new(DispatchTable::single(tree), sampler);
    o.draft_mode = DraftMode::Stochastic;
    let p = prompt(11, 5);

    let mut e = Engine::flat(&base, &random, o.clone()).unwrap();
    let mut alone = e.new_session(&p, 42).unwrap();
    let solo = e.run(&mut alone, 15).unwrap();

    let mut outs = Vec::new();
    for world in [1, 2, 4] {
        let mut o = o.clone();
        o.sampler.simulated_world_size = world;
        let mut e = Engine::paged(&base, &random, PagedKvConfig::default(), o).unwrap();
        let mut batch: Vec<_> = [42, 42, 7]
            .iter()
            .map(|&sd| e.new_session(&p, sd).unwrap())
            .collect();
        e.run_batch(&mut batch, 15).unwrap();
        assert_eq!(batch[0].output(), batch[1].output());
        assert_eq!(batch[0].output(), &solo[..]);
        outs.push(batch.iter().map(|s| s.output().to_vec()).collect::<Vec<_>>());
    }
    assert_eq!(outs[0], outs[1]);
    assert_eq!(outs[0], outs[2]);
}

#[test]
fn guided_decoding_is_lossless_and_accepted() {
    let (base, random, oracle) = models(None);
    let mut edges = Vec::new();
    for s in 0..5usize {
        for t in 0..64u32 {
            if (t as usize + s) % 3 == 0 {
                edges.push((s, t, (s + t as usize) % 5));
            }
        }
    }
    let fsm = GuidedFsm::new(5, 0, 0..5, edges).unwrap();
    for draft in [&random, &oracle] {
        for seed in 0..3 {
            let p = prompt(20 + seed, 4);
            let want = greedy_reference(&base, &p, 16, Some(&fsm), &[]).unwrap();
            let mut o = opts(build_full_tree(2, 2).unwrap());
            o.fsm = Some(fsm.clone());
            let mut e = Engine::flat(&base, draft, o).unwrap();
            let mut s = e.new_session(&p, seed).unwrap();
            let got = e.run(&mut s, 16).unwrap();
            assert_eq!(got, want);
            assert!(fsm.accepts(&got));
        }
    }
}

#[test]
fn local_chunks_truncate_drafts() {
    let (base, random, oracle) = models(Some(8));
    for draft in [&random, &oracle] {
        for seed in 0..3 {
            let p = prompt(30 + seed, 5 + seed as usize);
            let want = greedy_reference(&base, &p, 24, None, &[]).unwrap();
            let mut e = Engine::paged(&base, draft, PagedKvConfig::default(), opts(build_chain(3).unwrap())).unwrap();
            let mut s = e.new_session(&p, 0).unwrap();
            assert_eq!(e.run(&mut s, 24).unwrap(), want);
            assert_eq!(s.metrics.chunk_crossings, 0);
            if p.len() == 7 {
                // the first root sits at position 7, the last slot of chunk 0
                assert!(s.metrics.fallback_steps > 0);
            }
        }
    }
}

#[test]
fn adversarial_draft_rarely_accepted() {
    let mut cfg = ModelConfig::toy_base();
    cfg.vocab_size = 256;
    let base = BaseModel::random(cfg, 3).unwrap();
    let draft = DraftModel::random(&base, ModelConfig::toy_draft(&base.config), 4).unwrap();
    let mut e = Engine::flat(&base, &draft, opts(build_chain(3).unwrap())).unwrap();
    let mut total = StageMetrics::default();
    for seed in 0..4 {
        let p: Vec<u32> = uniform_row(seed, 5, 4).iter().map(|u| (u * 256.0) as u32).collect();
        let mut s = e.new_session(&p, seed).unwrap();
        e.run(&mut s, 30).unwrap();
        total.merge(&s.metrics);
    }
    assert!(total.tpc() < 1.5, "tpc {}", total.tpc());
}

#[test]
fn plain_mode_counts_one_token_per_call() {
    let (base, random, _) = models(None);
    let mut o = opts(build_chain(3).unwrap());
    o.speculative = false;
    let mut e = Engine::flat(&base, &random, o).unwrap();
    let p = prompt(12, 3);
    let mut s = e.new_session(&p, 0).unwrap();
    let got = e.run(&mut s, 9).unwrap();
    assert_eq!(got, greedy_reference(&base, &p, 9, None, &[]).unwrap());
    assert_eq!(s.metrics.tpc(), 1.0);
    assert_eq!(s.metrics.rounds, 8);
}
