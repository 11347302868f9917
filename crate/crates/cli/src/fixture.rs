//! Seeded toy models and prompts shared by `bench`, `verify` and the tests.

use specdec::distill::{train, TrainConfig};
use specdec::model::{quantize_ffn, BaseModel, DraftModel, ModelConfig};
use specdec::sampling::uniform_row;
use specdec::Result;

pub struct Fixture {
    pub base: BaseModel,
    pub random: DraftModel,
    pub trained: DraftModel,
    pub quantized: DraftModel,
}

impl Fixture {
    /// Toy base, an untrained draft, a distilled draft and its 4-bit FFN copy.
    pub fn new(seed: u64, local_attn_chunk: Option<usize>) -> Result<Self> {
        let mut cfg = ModelConfig::toy_base();
        cfg.local_attn_chunk = local_attn_chunk;
        let base = BaseModel::random(cfg, seed)?;
        let dcfg = ModelConfig::toy_draft(&base.config);
        let random = DraftModel::random(&base, dcfg, seed + 1)?;
        let mut trained = random.clone();
        train(
            &base,
            &mut trained,
            &TrainConfig {
                seed,
                ..TrainConfig::default()
            },
        )?;
        let quantized = quantize_ffn(&trained, 4)?;
        Ok(Self {
            base,
            random,
            trained,
            quantized,
        })
    }

    pub fn drafts(&self) -> [(&'static str, &DraftModel); 3] {
        [
            ("random", &self.random),
            ("trained", &self.trained),
            ("quantized", &self.quantized),
        ]
    }
}

/// Deterministic prompt of `len` tokens below `vocab`.
pub fn prompt(seed: u64, len: usize, vocab: usize) -> Vec<u32> {
    uniform_row(seed, 0x9e37, len)
        .iter()
        .map(|u| ((u * vocab as f64) as u32).min(vocab as u32 - 1))
        .collect()
}

/// `n` prompts with lengths cycling through `min_len..=max_len`.
pub fn prompts(n: usize, seed: u64, min_len: usize, max_len: usize, vocab: usize) -> Vec<Vec<u32>> {
    let span = max_len - min_len + 1;
    (0..n)
        .map(|i| prompt(seed.wrapping_mul(1000).wrapping_add(i as u64), min_len + i % span, vocab))
        .collect()
}
