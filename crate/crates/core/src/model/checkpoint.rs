//! Binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes  "SPDCKPT\0"
//! version  u32      1
//! kind     u8       0 = base, 1 = draft
//! config   u64 vocab, dim, n_heads, head_dim, n_layers, ffn_hidden,
//!          f64 rope_theta, u64 local_attn_chunk (0 = none)
//! blobs    in declaration order, each `u64 count` then the values
//! ```
//!
//! Base blobs: embedding, lm_head, then per layer attn_norm, wq, wk, wv, wo,
//! ffn_norm, w_gate, w_up, w_down, then final_norm. Draft blobs: fusion,
//! the same per-layer list, final_norm (embedding and LM head live in the
//! base checkpoint). An FFN weight is a tag byte (0 dense, 1 quantized);
//! quantized weights carry `u8 bits, u64 rows, u64 cols`, a scales blob and
//! an i8 codes blob.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{BaseModel, DraftModel, LayerWeights, Linear, ModelConfig, QuantizedLinear, TiedWeights};
use crate::error::{Error, Result};
use crate::numcore::Matrix;

const MAGIC: &[u8; 8] = b"SPDCKPT\0";
const VERSION: u32 = 1;
const KIND_BASE: u8 = 0;
const KIND_DRAFT: u8 = 1;

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.0.write_all(&[v])?)
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn blob(&mut self, vals: &[f64]) -> Result<()> {
        self.u64(vals.len() as u64)?;
        for &v in vals {
            self.f64(v)?;
        }
        Ok(())
    }
    fn linear(&mut self, l: &Linear) -> Result<()> {
        match l {
            Linear::Dense(m) => {
                self.u8(0)?;
                self.blob(m.data())
            }
            Linear::Quantized(q) => {
                self.u8(1)?;
                self.u8(q.bits())?;
                let (r, c) = q.shape();
                self.u64(r as u64)?;
                self.u64(c as u64)?;
                self.blob(q.scales())?;
                self.u64(q.codes().len() as u64)?;
                let bytes: Vec<u8> = q.codes().iter().map(|&c| c as u8).collect();
                Ok(self.0.write_all(&bytes)?)
            }
        }
    }
    fn header(&mut self, kind: u8, c: &ModelConfig) -> Result<()> {
        self.0.write_all(MAGIC)?;
        self.u32(VERSION)?;
        self.u8(kind)?;
        for v in [c.vocab_size, c.dim, c.n_heads, c.head_dim, c.n_layers, c.ffn_hidden] {
            self.u64(v as u64)?;
        }
        self.f64(c.rope_theta)?;
        self.u64(c.local_attn_chunk.unwrap_or(0) as u64)
    }
    fn layers(&mut self, layers: &[LayerWeights]) -> Result<()> {
        for l in layers {
            self.blob(&l.attn_norm)?;
            for m in [&l.wq, &l.wk, &l.wv, &l.wo] {
                self.blob(m.data())?;
            }
            self.blob(&l.ffn_norm)?;
            self.linear(&l.w_gate)?;
            self.linear(&l.w_up)?;
            self.linear(&l.w_down)?;
        }
        Ok(())
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0
            .read_exact(&mut b)
            .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn blob(&mut self, expect: usize, what: &str) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n != expect {
            return Err(Error::Checkpoint(format!("{what}: {n} values, expected {expect}")));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Matrix> {
        Matrix::from_vec(rows, cols, self.blob(rows * cols, what)?)
    }
    fn linear(&mut self, rows: usize, cols: usize, what: &str) -> Result<Linear> {
        match self.u8()? {
            0 => Ok(Linear::Dense(self.matrix(rows, cols, what)?)),
            1 => {
                let bits = self.u8()?;
                let (r, c) = (self.u64()? as usize, self.u64()? as usize);
                if (r, c) != (rows, cols) {
                    return Err(Error::Checkpoint(format!("{what}: quantized shape {r}x{c}")));
                }
                let scales = self.blob(cols, what)?;
                let n = self.u64()? as usize;
                if n != rows * cols {
                    return Err(Error::Checkpoint(format!("{what}: {n} codes")));
                }
                let mut raw = vec![0u8; n];
                self.0
                    .read_exact(&mut raw)
                    .map_err(|e| Error::Checkpoint(format!("truncated codes: {e}")))?;
                let codes = raw.into_iter().map(|b| b as i8).collect();
                Ok(Linear::Quantized(QuantizedLinear::from_codes(bits, rows, cols, codes, scales)?))
            }
            t => Err(Error::Checkpoint(format!("{what}: unknown linear tag {t}"))),
        }
    }
    fn header(&mut self, want_kind: u8) -> Result<ModelConfig> {
        if &self.bytes::<8>()? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let v = self.u32()?;
        if v != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {v}")));
        }
        let kind = self.u8()?;
        if kind != want_kind {
            return Err(Error::Checkpoint(format!("expected kind {want_kind}, found {kind}")));
        }
        let mut f = [0usize; 6];
        for x in &mut f {
            *x = self.u64()? as usize;
        }
        let rope_theta = self.f64()?;
        let chunk = self.u64()? as usize;
        let cfg = ModelConfig {
            vocab_size: f[0],
            dim: f[1],
            n_heads: f[2],
            head_dim: f[3],
            n_layers: f[4],
            ffn_hidden: f[5],
            rope_theta,
            local_attn_chunk: (chunk > 0).then_some(chunk),
        };
        cfg.validate()?;
        Ok(cfg)
    }
    fn layers(&mut self, c: &ModelConfig) -> Result<Vec<LayerWeights>> {
        let d = c.dim;
        (0..c.n_layers)
            .map(|i| {
                let w = |name: &str| format!("layer {i} {name}");
                Ok(LayerWeights {
                    attn_norm: self.blob(d, &w("attn_norm"))?,
                    wq: self.matrix(d, d, &w("wq"))?,
                    wk: self.matrix(d, d, &w("wk"))?,
                    wv: self.matrix(d, d, &w("wv"))?,
                    wo: self.matrix(d, d, &w("wo"))?,
                    ffn_norm: self.blob(d, &w("ffn_norm"))?,
                    w_gate: self.linear(d, c.ffn_hidden, &w("w_gate"))?,
                    w_up: self.linear(d, c.ffn_hidden, &w("w_up"))?,
                    w_down: self.linear(c.ffn_hidden, d, &w("w_down"))?,
                })
            })
            .collect()
    }
    fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.0.read(&mut b)? {
            0 => Ok(()),
            _ => Err(Error::Checkpoint("trailing bytes".into())),
        }
    }
}

pub fn save_base(model: &BaseModel, path: &Path) -> Result<()> {
    let mut w = Writer(BufWriter::new(File::create(path)?));
    w.header(KIND_BASE, &model.config)?;
    {
        let tied = model.tied_read();
        w.blob(tied.embedding.data())?;
        w.blob(tied.lm_head.data())?;
    }
    w.layers(&model.layers)?;
    w.blob(&model.final_norm)?;
    w.0.flush()?;
    Ok(())
}

pub fn load_base(path: &Path) -> Result<BaseModel> {
    let mut r = Reader(BufReader::new(File::open(path)?));
    let cfg = r.header(KIND_BASE)?;
    let embedding = r.matrix(cfg.vocab_size, cfg.dim, "embedding")?;
    let lm_head = r.matrix(cfg.dim, cfg.vocab_size, "lm_head")?;
    let layers = r.layers(&cfg)?;
    let final_norm = r.blob(cfg.dim, "final_norm")?;
    r.expect_eof()?;
    BaseModel::from_parts(cfg, TiedWeights { embedding, lm_head }, layers, final_norm)
}

pub fn save_draft(model: &DraftModel, path: &Path) -> Result<()> {
    let mut w = Writer(BufWriter::new(File::create(path)?));
    w.header(KIND_DRAFT, &model.config)?;
    w.blob(model.fusion.data())?;
    w.layers(&model.layers)?;
    w.blob(&model.final_norm)?;
    w.0.flush()?;
    Ok(())
}

/// Loads a draft and ties it to `base`.
pub fn load_draft(path: &Path, base: &BaseModel) -> Result<DraftModel> {
    let mut r = Reader(BufReader::new(File::open(path)?));
    let cfg = r.header(KIND_DRAFT)?;
    let fusion = r.matrix(2 * cfg.dim, cfg.dim, "fusion")?;
    let layers = r.layers(&cfg)?;
    let final_norm = r.blob(cfg.dim, "final_norm")?;
    r.expect_eof()?;
    DraftModel::from_parts(base, cfg, fusion, layers, final_norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::quantize_ffn;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("specdec-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn base_and_quantized_draft_roundtrip() {
        let mut cfg = ModelConfig::toy_base();
        cfg.local_attn_chunk = Some(8);
        let base = BaseModel::random(cfg, 3).unwrap();
        let draft = quantize_ffn(&DraftModel::random(&base, ModelConfig::toy_draft(&base.config), 4).unwrap(), 4).unwrap();
        let (bp, dp) = (tmp("base.bin"), tmp("draft.bin"));
        save_base(&base, &bp).unwrap();
        save_draft(&draft, &dp).unwrap();
        let b2 = load_base(&bp).unwrap();
        assert_eq!(b2.config, base.config);
        assert_eq!(b2.layers, base.layers);
        assert_eq!(*b2.tied_read(), *base.tied_read());
        let d2 = load_draft(&dp, &b2).unwrap();
        assert_eq!(d2.layers, draft.layers);
        assert_eq!(d2.fusion, draft.fusion);
        assert!(d2.is_tied_to(&b2));
        // kind confusion is detected
        assert!(load_base(&dp).is_err());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let base = BaseModel::random(ModelConfig::toy_base(), 3).unwrap();
        let p = tmp("trunc.bin");
        save_base(&base, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_base(&p), Err(Error::Checkpoint(_))));
        std::fs::write(&p, b"NOTACKPT").unwrap();
        assert!(load_base(&p).is_err());
    }
}
