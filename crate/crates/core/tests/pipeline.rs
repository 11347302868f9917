use specdec::distill::{eval_tpc, markov_corpus, train, TrainConfig};
use specdec::drafttree::{build_chain, build_full_tree, TreeSpec};
use specdec::engine::{greedy_reference, Engine, EngineConfig, EngineOptions, StageMetrics};
use specdec::kvstore::PagedKvConfig;
use specdec::model::{load_base, load_draft, quantize_ffn, save_base, save_draft, BaseModel, DraftModel, ModelConfig};
use specdec::sampling::SamplerConfig;

fn trained_pair() -> (BaseModel, DraftModel) {
    let base = BaseModel::random(ModelConfig::toy_base(), 21).unwrap();
    let mut draft = DraftModel::random(&base, ModelConfig::toy_draft(&base.config), 22).unwrap();
    let cfg = TrainConfig {
        steps: 150,
        ..TrainConfig::default()
    };
    train(&base, &mut draft, &cfg).unwrap();
    (base, draft)
}

#[test]
fn checkpointed_models_decode_like_in_memory_ones() {
    let (base, draft) = trained_pair();
    let dir = tempfile::tempdir().unwrap();
    save_base(&base, &dir.path().join("b.ckpt")).unwrap();
    save_draft(&draft, &dir.path().join("d.ckpt")).unwrap();
    let base2 = load_base(&dir.path().join("b.ckpt")).unwrap();
    let draft2 = load_draft(&dir.path().join("d.ckpt"), &base2).unwrap();
    assert!(draft2.is_tied_to(&base2));

    let text = r#"
        seed = 3
        [[dispatch]]
        max_batch = 1
        tree = "full:2,2"
        [[dispatch]]
        tree = "chain:3"
    "#;
    let cfg = EngineConfig::from_toml_str(text).unwrap();
    let opts = EngineOptions::from_config(&cfg).unwrap();
    let prompts = markov_corpus(64, 6, 7, 99);
    let mut a = Engine::paged(&base, &draft, cfg.paged_config(), opts.clone()).unwrap();
    let mut b = Engine::paged(&base2, &draft2, cfg.paged_config(), opts).unwrap();
    for (i, p) in prompts.iter().enumerate() {
        let mut s1 = a.new_session(p, i as u64).unwrap();
        let mut s2 = b.new_session(p, i as u64).unwrap();
        let o1 = a.run(&mut s1, 20).unwrap();
        assert_eq!(o1, b.run(&mut s2, 20).unwrap());
        assert_eq!(o1, greedy_reference(&base, p, 20, None, &[]).unwrap());
        assert_eq!(counters(&s1.metrics), counters(&s2.metrics));
    }
}

/// Counters only; timings differ between runs.
fn counters(m: &StageMetrics) -> [u64; 9] {
    [
        m.rounds,
        m.committed_total,
        m.accepted_total,
        m.base_forward_calls,
        m.draft_forward_calls,
        m.prefill_tokens_computed,
        m.prefix_hit_tokens,
        m.fallback_steps,
        m.chunk_crossings,
    ]
}

#[test]
fn quantized_trained_draft_stays_lossless_and_useful() {
    let (base, draft) = trained_pair();
    let held = markov_corpus(64, 8, 6, 1234);
    let chain = build_chain(3).unwrap();
    for bits in [8, 4] {
        let q = quantize_ffn(&draft, bits).unwrap();
        for tree in [chain.clone(), build_full_tree(2, 2).unwrap()] {
            let mut e = Engine::paged(
                &base,
                &q,
                PagedKvConfig::default(),
                EngineOptions::new(specdec::drafttree::DispatchTable::single(tree), SamplerConfig::greedy()),
            )
            .unwrap();
            for (i, p) in held.iter().enumerate() {
                let mut s = e.new_session(p, i as u64).unwrap();
                assert_eq!(e.run(&mut s, 16).unwrap(), greedy_reference(&base, p, 16, None, &[]).unwrap());
            }
        }
        let untrained = DraftModel::random(&base, ModelConfig::toy_draft(&base.config), 22).unwrap();
        let tq = eval_tpc(&base, &q, &held, &chain, SamplerConfig::greedy(), 24).unwrap();
        let tu = eval_tpc(&base, &untrained, &held, &chain, SamplerConfig::greedy(), 24).unwrap();
        assert!(tq >= 1.0 && tu >= 1.0);
        if bits == 8 {
            assert!(tq > tu, "8-bit trained {tq} vs untrained {tu}");
        }
    }
}

#[test]
fn dispatch_example_table() {
    let n8 = TreeSpec::from_parents(&[None, None, Some(0), Some(0), Some(1), Some(2), Some(2), Some(5)]).unwrap();
    let table = specdec::drafttree::DispatchTable::new(vec![(1, n8.clone()), (usize::MAX, build_chain(3).unwrap())]).unwrap();
    assert_eq!(table.dispatch(1), &n8);
    assert_eq!(table.dispatch(48), &build_chain(3).unwrap());
}
