//! Toy decoder-only transformers: the base model and the draft model that
//! shares its embedding and LM head.

mod checkpoint;
mod forward;
mod quant;

pub use checkpoint::{load_base, load_draft, save_base, save_draft};
pub use forward::{ForwardOutput, SuffixKv};
pub use quant::{quantize_ffn, QuantizedLinear};

use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Matrix;

pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub n_layers: usize,
    pub ffn_hidden: usize,
    pub rope_theta: f64,
    /// Chunk length for local attention layers; `None` means global attention everywhere.
    pub local_attn_chunk: Option<usize>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_heads * self.head_dim != self.dim {
            return bad(format!(
                "dim {} != n_heads {} x head_dim {}",
                self.dim, self.n_heads, self.head_dim
            ));
        }
        if self.head_dim % 2 != 0 {
            return bad(format!("head_dim {} must be even for rotary", self.head_dim));
        }
        if self.n_layers == 0 || self.vocab_size == 0 || self.ffn_hidden == 0 {
            return bad("n_layers, vocab_size and ffn_hidden must be >= 1".into());
        }
        if self.local_attn_chunk == Some(0) {
            return bad("local_attn_chunk must be >= 1".into());
        }
        Ok(())
    }

    /// Draft config check against its base.
    pub fn validate_draft(&self, base: &ModelConfig) -> Result<()> {
        self.validate()?;
        if self.vocab_size != base.vocab_size || self.dim != base.dim {
            return Err(Error::Config(
                "draft must share vocab and width with the base model".into(),
            ));
        }
        if self.n_layers >= base.n_layers {
            return Err(Error::Config(format!(
                "draft has {} layers, base only {}",
                self.n_layers, base.n_layers
            )));
        }
        Ok(())
    }

    /// Local (chunked) attention on every layer except each fourth one.
    pub fn layer_chunk(&self, layer: usize) -> Option<usize> {
        self.local_attn_chunk.filter(|_| (layer + 1) % 4 != 0)
    }

    /// Small base model used by tests and the default CLI configuration.
    pub fn toy_base() -> Self {
        Self {
            vocab_size: 64,
            dim: 32,
            n_heads: 4,
            head_dim: 8,
            n_layers: 3,
            ffn_hidden: 64,
            rope_theta: 10_000.0,
            local_attn_chunk: None,
        }
    }

    pub fn toy_draft(base: &ModelConfig) -> Self {
        Self {
            n_layers: 1,
            ..base.clone()
        }
    }
}

/// Weight of a linear layer: plain, or weight-only quantized.
#[derive(Debug, Clone, PartialEq)]
pub enum Linear {
    Dense(Matrix),
    Quantized(QuantizedLinear),
}

impl Linear {
    /// Matrix used in the forward pass (dequantized for quantized layers).
    pub fn weight(&self) -> &Matrix {
        match self {
            Linear::Dense(m) => m,
            Linear::Quantized(q) => q.dequantized(),
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, Linear::Quantized(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f64>,
    pub w_gate: Linear,
    pub w_up: Linear,
    pub w_down: Linear,
}

/// Embedding (vocab × dim) and LM head (dim × vocab), owned jointly by the
/// base model and its draft.
#[derive(Debug, Clone, PartialEq)]
pub struct TiedWeights {
    pub embedding: Matrix,
    pub lm_head: Matrix,
}

pub type SharedTied = Arc<RwLock<TiedWeights>>;

#[derive(Debug, Clone)]
pub struct BaseModel {
    pub config: ModelConfig,
    tied: SharedTied,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DraftModel {
    pub config: ModelConfig,
    tied: SharedTied,
    /// (2·dim) × dim, applied to `concat(embedding, prev_hidden)`.
    pub fusion: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
}

/// Uniform init with unit-variance-preserving scale `gain / sqrt(fan_in)`.
fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gain: f64) -> Matrix {
    let a = gain * (3.0 / rows as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-a..a))
}

fn init_layer(rng: &mut ChaCha8Rng, cfg: &ModelConfig, gain: f64) -> LayerWeights {
    let d = cfg.dim;
    LayerWeights {
        attn_norm: vec![1.0; d],
        wq: init_matrix(rng, d, d, 1.0),
        wk: init_matrix(rng, d, d, 1.0),
        wv: init_matrix(rng, d, d, gain),
        wo: init_matrix(rng, d, d, gain),
        ffn_norm: vec![1.0; d],
        w_gate: Linear::Dense(init_matrix(rng, d, cfg.ffn_hidden, 1.0)),
        w_up: Linear::Dense(init_matrix(rng, d, cfg.ffn_hidden, gain)),
        w_down: Linear::Dense(init_matrix(rng, cfg.ffn_hidden, d, gain)),
    }
}

fn read<T>(l: &RwLock<T>) -> RwLockReadGuard<'_, T> {
    l.read().unwrap_or_else(|e| e.into_inner())
}

impl BaseModel {
    /// Seeded random weights. The LM head is scaled so greedy choices are
    /// well separated.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = Matrix::from_fn(config.vocab_size, config.dim, |_, _| rng.gen_range(-1.0..1.0));
        let lm_head = init_matrix(&mut rng, config.dim, config.vocab_size, 4.0);
        let layers = (0..config.n_layers).map(|_| init_layer(&mut rng, &config, 1.0)).collect();
        Ok(Self {
            final_norm: vec![1.0; config.dim],
            tied: Arc::new(RwLock::new(TiedWeights { embedding, lm_head })),
            config,
            layers,
        })
    }

    pub fn from_parts(config: ModelConfig, tied: TiedWeights, layers: Vec<LayerWeights>, final_norm: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if layers.len() != config.n_layers {
            return Err(Error::Config("layer count mismatch".into()));
        }
        Ok(Self {
            config,
            tied: Arc::new(RwLock::new(tied)),
            layers,
            final_norm,
        })
    }

    pub fn tied(&self) -> &SharedTied {
        &self.tied
    }

    pub fn tied_read(&self) -> RwLockReadGuard<'_, TiedWeights> {
        read(&self.tied)
    }

    /// Write access to the shared embedding/LM head; changes are seen by every draft.
    pub fn tied_write(&self) -> RwLockWriteGuard<'_, TiedWeights> {
        self.tied.write().unwrap_or_else(|e| e.into_inner())
    }
}

impl DraftModel {
    /// Random draft weights tied to `base`.
    pub fn random(base: &BaseModel, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate_draft(&base.config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d4af);
        let fusion = init_matrix(&mut rng, 2 * config.dim, config.dim, 1.0);
        let layers = (0..config.n_layers).map(|_| init_layer(&mut rng, &config, 1.0)).collect();
        Ok(Self {
            final_norm: vec![1.0; config.dim],
            tied: Arc::clone(&base.tied),
            fusion,
            layers,
            config,
        })
    }

    /// Draft that reproduces `base` exactly: fusion passes the embedding
    /// through and the layers are the base's own.
    ///
    /// The draft depth equals the base depth here, so this bypasses the
    /// `M < N` check; it exists for oracle-drafter tests.
    pub fn oracle(base: &BaseModel) -> Self {
        let d = base.config.dim;
        let mut fusion = Matrix::zeros(2 * d, d);
        for i in 0..d {
            fusion.set(i, i, 1.0);
        }
        Self {
            config: base.config.clone(),
            tied: Arc::clone(&base.tied),
            fusion,
            layers: base.layers.clone(),
            final_norm: base.final_norm.clone(),
        }
    }

    pub fn from_parts(
        base: &BaseModel,
        config: ModelConfig,
        fusion: Matrix,
        layers: Vec<LayerWeights>,
        final_norm: Vec<f64>,
    ) -> Result<Self> {
        config.validate_draft(&base.config)?;
        if fusion.rows() != 2 * config.dim || fusion.cols() != config.dim || layers.len() != config.n_layers {
            return Err(Error::Config("draft weight shapes do not match config".into()));
        }
        Ok(Self {
            config,
            tied: Arc::clone(&base.tied),
            fusion,
            layers,
            final_norm,
        })
    }

    pub fn tied(&self) -> &SharedTied {
        &self.tied
    }

    pub fn tied_read(&self) -> RwLockReadGuard<'_, TiedWeights> {
        read(&self.tied)
    }

    pub fn tied_write(&self) -> RwLockWriteGuard<'_, TiedWeights> {
        self.tied.write().unwrap_or_else(|e| e.into_inner())
    }

    /// True when this draft shares storage with `base`.
    pub fn is_tied_to(&self, base: &BaseModel) -> bool {
        Arc::ptr_eq(&self.tied, &base.tied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let base = ModelConfig::toy_base();
        base.validate().unwrap();
        let mut bad = base.clone();
        bad.head_dim = 7;
        assert!(bad.validate().is_err());
        let mut deep = ModelConfig::toy_draft(&base);
        deep.n_layers = base.n_layers;
        assert!(deep.validate_draft(&base).is_err());
        ModelConfig::toy_draft(&base).validate_draft(&base).unwrap();
    }

    #[test]
    fn tied_storage_is_shared() {
        let base = BaseModel::random(ModelConfig::toy_base(), 1).unwrap();
        let draft = DraftModel::random(&base, ModelConfig::toy_draft(&base.config), 2).unwrap();
        assert!(draft.is_tied_to(&base));
        draft.tied_write().embedding.set(3, 4, 42.0);
        assert_eq!(base.tied_read().embedding.get(3, 4), 42.0);
        base.tied_write().lm_head.set(0, 1, -7.0);
        assert_eq!(draft.tied_read().lm_head.get(0, 1), -7.0);
    }

    #[test]
    fn irope_layer_pattern() {
        let mut c = ModelConfig::toy_base();
        c.n_layers = 4;
        assert_eq!(c.layer_chunk(0), None);
        c.local_attn_chunk = Some(8);
        let pattern: Vec<_> = (0..4).map(|l| c.layer_chunk(l)).collect();
        assert_eq!(pattern, vec![Some(8), Some(8), Some(8), None]);
    }
}
