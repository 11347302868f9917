//! TOML engine configuration.
//!
//! ```toml
//! seed = 7
//! draft_mode = "greedy_children"   # or "stochastic"
//! stop_tokens = [0]
//! max_context = 512
//!
//! [model]                         # used when no checkpoints are given
//! vocab_size = 64
//! dim = 32
//! # ...
//!
//! [[dispatch]]
//! max_batch = 4
//! tree = "full:2,2"
//! [[dispatch]]
//! tree = "chain:3"                # no max_batch: catch-all
//!
//! [sampler]
//! temperature = 0.0
//! top_p = 0.9
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::drafttree::{build_chain, DispatchTable, TreeSpec};
use crate::error::{Error, Result};
use crate::kvstore::PagedKvConfig;
use crate::model::ModelConfig;
use crate::sampling::{DraftMode, GuidedFsm, SamplerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DispatchEntry {
    /// Largest batch this tree serves; omitted means unbounded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_batch: Option<usize>,
    pub tree: TreeSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub base_checkpoint: Option<PathBuf>,
    pub draft_checkpoint: Option<PathBuf>,
    /// Architecture for randomly initialized weights.
    pub model: ModelConfig,
    pub draft_layers: usize,
    pub seed: u64,
    pub dispatch: Vec<DispatchEntry>,
    pub sampler: SamplerConfig,
    pub draft_mode: DraftMode,
    pub block_size: usize,
    pub num_blocks: usize,
    pub persistent_blocks: usize,
    pub fsm_path: Option<PathBuf>,
    /// Overrides the model's local attention chunk when set.
    pub local_attn_chunk: Option<usize>,
    pub stop_tokens: Vec<u32>,
    pub max_context: usize,
    /// Weight-only FFN quantization of the draft (4 or 8 bits).
    pub quantize_draft_bits: Option<u8>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let kv = PagedKvConfig::default();
        Self {
            base_checkpoint: None,
            draft_checkpoint: None,
            model: ModelConfig::toy_base(),
            draft_layers: 1,
            seed: 0,
            dispatch: vec![DispatchEntry {
                max_batch: None,
                tree: build_chain(3).expect("valid"),
            }],
            sampler: SamplerConfig::default(),
            draft_mode: DraftMode::GreedyChildren,
            block_size: kv.block_size,
            num_blocks: kv.num_blocks,
            persistent_blocks: kv.persistent_blocks,
            fsm_path: None,
            local_attn_chunk: None,
            stop_tokens: Vec::new(),
            max_context: 4096,
            quantize_draft_bits: None,
        }
    }
}

impl EngineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.base_checkpoint, &mut cfg.draft_checkpoint, &mut cfg.fsm_path]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.model.validate()?;
        if self.dispatch.is_empty() {
            return Err(Error::Config("dispatch table is empty".into()));
        }
        if self.block_size == 0 || self.num_blocks == 0 {
            return Err(Error::Config("block_size and num_blocks must be >= 1".into()));
        }
        if self.local_attn_chunk == Some(0) {
            return Err(Error::Config("local_attn_chunk must be >= 1".into()));
        }
        if let Some(b) = self.quantize_draft_bits {
            if b != 4 && b != 8 {
                return Err(Error::Config(format!("quantize_draft_bits {b} must be 4 or 8")));
            }
        }
        self.dispatch_table().map(|_| ())
    }

    pub fn dispatch_table(&self) -> Result<DispatchTable> {
        DispatchTable::new(
            self.dispatch
                .iter()
                .map(|e| (e.max_batch.unwrap_or(usize::MAX), e.tree.clone()))
                .collect(),
        )
    }

    pub fn paged_config(&self) -> PagedKvConfig {
        PagedKvConfig {
            block_size: self.block_size,
            num_blocks: self.num_blocks,
            persistent_blocks: self.persistent_blocks,
        }
    }

    pub fn load_fsm(&self) -> Result<Option<GuidedFsm>> {
        self.fsm_path
            .as_ref()
            .map(|p| std::fs::read_to_string(p)?.parse())
            .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_and_defaults() {
        let text = r#"
            seed = 7
            draft_mode = "stochastic"
            stop_tokens = [0]
            [[dispatch]]
            max_batch = 4
            tree = "full:2,2"
            [[dispatch]]
            tree = "chain:3"
            [sampler]
            temperature = 0.5
        "#;
        let cfg = EngineConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.draft_mode, DraftMode::Stochastic);
        assert_eq!(cfg.sampler.top_p, 0.9);
        let table = cfg.dispatch_table().unwrap();
        assert_eq!(table.dispatch(1).label(), "full:2,2");
        assert_eq!(table.dispatch(64).label(), "chain:3");
        let again = EngineConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(EngineConfig::from_toml_str("bogus = 1").is_err());
        assert!(EngineConfig::from_toml_str("[sampler]\ntop_p = 0.0").is_err());
        assert!(EngineConfig::from_toml_str("dispatch = []").is_err());
        assert!(EngineConfig::from_toml_str("[[dispatch]]\ntree = \"chain:0\"").is_err());
        assert!(EngineConfig::from_toml_str("quantize_draft_bits = 3").is_err());
    }
}
