//! Library side of the `specdec` command: grid benchmarks, correctness
//! suites and model loading from an engine config.

pub mod bench;
pub mod fixture;
pub mod verify;

use std::path::Path;

use specdec::engine::EngineConfig;
use specdec::model::{load_base, load_draft, quantize_ffn, BaseModel, DraftModel, ModelConfig};
use specdec::{Error, Result};

/// Base model from the config's checkpoint, or seeded random weights.
pub fn load_base_model(cfg: &EngineConfig, random_weights: bool) -> Result<BaseModel> {
    let mut base = match (&cfg.base_checkpoint, random_weights) {
        (Some(p), false) => load_base(p)?,
        (_, true) => BaseModel::random(cfg.model.clone(), cfg.seed)?,
        (None, false) => {
            return Err(Error::Config(
                "no base_checkpoint in config; pass --random-weights to use seeded random weights".into(),
            ))
        }
    };
    if cfg.local_attn_chunk.is_some() {
        base.config.local_attn_chunk = cfg.local_attn_chunk;
    }
    Ok(base)
}

/// Untrained draft for `base`; the same weights `train-draft` starts from.
pub fn initial_draft(base: &BaseModel, cfg: &EngineConfig) -> Result<DraftModel> {
    let dcfg = ModelConfig {
        n_layers: cfg.draft_layers,
        ..ModelConfig::toy_draft(&base.config)
    };
    DraftModel::random(base, dcfg, cfg.seed + 1)
}

/// Draft from `path`, the config's draft checkpoint, or a fresh random one.
pub fn load_draft_model(base: &BaseModel, cfg: &EngineConfig, path: Option<&Path>, random_weights: bool) -> Result<DraftModel> {
    let mut draft = match path.or(cfg.draft_checkpoint.as_deref()) {
        Some(p) if !random_weights || path.is_some() => load_draft(p, base)?,
        _ if random_weights => initial_draft(base, cfg)?,
        _ => {
            return Err(Error::Config(
                "no draft_checkpoint in config; pass --random-weights to use seeded random weights".into(),
            ))
        }
    };
    draft.config.local_attn_chunk = base.config.local_attn_chunk;
    if let Some(bits) = cfg.quantize_draft_bits {
        draft = quantize_ffn(&draft, bits)?;
    }
    Ok(draft)
}
