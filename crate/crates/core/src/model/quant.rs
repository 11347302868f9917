//! Weight-only symmetric integer quantization of the draft FFN.

use super::{DraftModel, Linear};
use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Per-output-channel symmetric quantized weight (`in × out`, one scale per column).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLinear {
    bits: u8,
    rows: usize,
    cols: usize,
    codes: Vec<i8>,
    scales: Vec<f64>,
    dequant: Matrix,
}

impl QuantizedLinear {
    pub fn quantize(w: &Matrix, bits: u8) -> Result<Self> {
        if bits != 4 && bits != 8 {
            return Err(Error::InvalidArgument(format!("{bits}-bit quantization unsupported")));
        }
        let qmax = ((1i32 << (bits - 1)) - 1) as f64;
        let (rows, cols) = (w.rows(), w.cols());
        let scales: Vec<f64> = (0..cols)
            .map(|c| (0..rows).map(|r| w.get(r, c).abs()).fold(0.0, f64::max) / qmax)
            .collect();
        let mut codes = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for (c, &s) in scales.iter().enumerate() {
                let q = if s == 0.0 { 0.0 } else { (w.get(r, c) / s).round().clamp(-qmax, qmax) };
                codes.push(q as i8);
            }
        }
        Self::from_codes(bits, rows, cols, codes, scales)
    }

    pub fn from_codes(bits: u8, rows: usize, cols: usize, codes: Vec<i8>, scales: Vec<f64>) -> Result<Self> {
        if codes.len() != rows * cols || scales.len() != cols {
            return Err(Error::shape("QuantizedLinear", "codes/scales do not match shape"));
        }
        let dequant = Matrix::from_fn(rows, cols, |r, c| codes[r * cols + c] as f64 * scales[c]);
        Ok(Self {
            bits,
            rows,
            cols,
            codes,
            scales,
            dequant,
        })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn dequantized(&self) -> &Matrix {
        &self.dequant
    }
}

fn quantize_linear(l: &Linear, bits: u8) -> Result<Linear> {
    // re-quantizing starts from the current effective weights
    Ok(Linear::Quantized(QuantizedLinear::quantize(l.weight(), bits)?))
}

/// Copy of `draft` with every FFN weight quantized to `bits`; everything else is shared or cloned as-is.
pub fn quantize_ffn(draft: &DraftModel, bits: u8) -> Result<DraftModel> {
    let mut out = draft.clone();
    for layer in &mut out.layers {
        layer.w_gate = quantize_linear(&layer.w_gate, bits)?;
        layer.w_up = quantize_linear(&layer.w_up, bits)?;
        layer.w_down = quantize_linear(&layer.w_down, bits)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BaseModel, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_roundtrip_exactly() {
        let q = QuantizedLinear::quantize(&Matrix::zeros(4, 3), 4).unwrap();
        assert!(q.codes().iter().all(|&c| c == 0));
        assert!(q.scales().iter().all(|&s| s == 0.0));
        assert_eq!(q.dequantized(), &Matrix::zeros(4, 3));
    }

    #[test]
    fn channel_max_maps_to_top_code() {
        let w = Matrix::from_rows(&[vec![0.5, -3.0], vec![-2.0, 1.0], vec![1.0, 0.25]]).unwrap();
        for bits in [4u8, 8] {
            let q = QuantizedLinear::quantize(&w, bits).unwrap();
            let top = ((1i16 << (bits - 1)) - 1) as i8;
            // column 0 max |w| is -2.0 (row 1), column 1 is -3.0 (row 0)
            assert_eq!(q.codes()[2], -top);
            assert_eq!(q.codes()[1], -top);
        }
        assert!(QuantizedLinear::quantize(&w, 3).is_err());
    }

    #[test]
    fn error_bounded_by_half_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for bits in [4u8, 8] {
            let w = Matrix::from_fn(32, 48, |_, _| rng.gen_range(-2.0..2.0));
            let q = QuantizedLinear::quantize(&w, bits).unwrap();
            for r in 0..32 {
                for c in 0..48 {
                    let err = (q.dequantized().get(r, c) - w.get(r, c)).abs();
                    assert!(err <= q.scales()[c] / 2.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn only_ffn_is_touched() {
        let base = BaseModel::random(ModelConfig::toy_base(), 1).unwrap();
        let d = DraftModel::random(&base, ModelConfig::toy_draft(&base.config), 1).unwrap();
        let q = quantize_ffn(&d, 8).unwrap();
        assert_eq!(q.fusion, d.fusion);
        for (a, b) in q.layers.iter().zip(&d.layers) {
            assert_eq!(a.wq, b.wq);
            assert_eq!(a.wo, b.wo);
            assert!(a.w_gate.is_quantized() && a.w_up.is_quantized() && a.w_down.is_quantized());
        }
        assert!(q.is_tied_to(&base));
    }
}
