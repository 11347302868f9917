//! Full-sequence draft forward that keeps activations, and its reverse pass.
//!
//! Trainable tensors, in this fixed order: fusion, then per layer attn_norm,
//! wq, wk, wv, wo, ffn_norm, w_gate, w_up, w_down, then final_norm. The tied
//! embedding and LM head are read but never differentiated.

use crate::error::{Error, Result};
use crate::model::{DraftModel, LayerWeights, Linear, TiedWeights, NORM_EPS};
use crate::numcore::{matmul, matmul_at, matmul_bt, rope_apply, rope_apply_signed, Matrix};

pub const TENSORS_PER_LAYER: usize = 9;

/// Names of the trainable tensors in gradient order.
pub fn param_names(n_layers: usize) -> Vec<String> {
    let per = ["attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down"];
    let mut out = vec!["fusion".to_string()];
    for l in 0..n_layers {
        out.extend(per.iter().map(|p| format!("layer{l}.{p}")));
    }
    out.push("final_norm".into());
    out
}

fn dense(l: &Linear) -> Result<&Matrix> {
    match l {
        Linear::Dense(m) => Ok(m),
        Linear::Quantized(_) => Err(Error::InvalidArgument("quantized weights are not trainable".into())),
    }
}

fn dense_mut(l: &mut Linear) -> Result<&mut Matrix> {
    match l {
        Linear::Dense(m) => Ok(m),
        Linear::Quantized(_) => Err(Error::InvalidArgument("quantized weights are not trainable".into())),
    }
}

/// Mutable views of every trainable tensor.
pub fn params_mut(d: &mut DraftModel) -> Result<Vec<&mut [f64]>> {
    let mut out: Vec<&mut [f64]> = vec![d.fusion.data_mut()];
    for l in &mut d.layers {
        let LayerWeights {
            attn_norm,
            wq,
            wk,
            wv,
            wo,
            ffn_norm,
            w_gate,
            w_up,
            w_down,
        } = l;
        out.push(attn_norm);
        out.push(wq.data_mut());
        out.push(wk.data_mut());
        out.push(wv.data_mut());
        out.push(wo.data_mut());
        out.push(ffn_norm);
        out.push(dense_mut(w_gate)?.data_mut());
        out.push(dense_mut(w_up)?.data_mut());
        out.push(dense_mut(w_down)?.data_mut());
    }
    out.push(&mut d.final_norm);
    Ok(out)
}

/// Gradient tensors in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn zeros_like(d: &mut DraftModel) -> Result<Self> {
        Ok(Self(params_mut(d)?.iter().map(|p| vec![0.0; p.len()]).collect()))
    }

    pub fn add_scaled(&mut self, other: &Grads, s: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }
}

struct Norm {
    out: Matrix,
    inv_rms: Vec<f64>,
}

fn rms_fwd(x: &Matrix, g: &[f64]) -> Norm {
    let d = x.cols() as f64;
    let mut out = x.clone();
    let mut inv_rms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let inv = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() / d + NORM_EPS).sqrt();
        for (v, w) in row.iter_mut().zip(g) {
            *v *= inv * w;
        }
        inv_rms.push(inv);
    }
    Norm { out, inv_rms }
}

/// Returns dx and accumulates dg.
fn rms_bwd(x: &Matrix, g: &[f64], inv_rms: &[f64], dy: &Matrix, dg: &mut [f64]) -> Matrix {
    let d = x.cols() as f64;
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let (xr, dyr, inv) = (x.row(r), dy.row(r), inv_rms[r]);
        let mut dot = 0.0;
        for j in 0..xr.len() {
            dg[j] += dyr[j] * xr[j] * inv;
            dot += g[j] * dyr[j] * xr[j];
        }
        let c = dot * inv * inv * inv / d;
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = g[j] * dyr[j] * inv - xr[j] * c;
        }
    }
    dx
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct LayerTrace {
    x: Matrix,
    n1: Norm,
    qr: Matrix,
    kr: Matrix,
    v: Matrix,
    /// Attention probabilities per head (n × n).
    probs: Vec<Matrix>,
    att: Matrix,
    x1: Matrix,
    n2: Norm,
    gate: Matrix,
    up: Matrix,
    act: Matrix,
}

pub struct DraftTrace {
    input: Matrix,
    layers: Vec<LayerTrace>,
    x_out: Matrix,
    nf: Norm,
    pub hidden: Matrix,
    pub logits: Matrix,
}

fn visible(i: usize, j: usize, chunk: Option<usize>) -> bool {
    j <= i && chunk.is_none_or(|c| i / c == j / c)
}

/// Causal draft forward over a whole sequence at positions `0..n`.
pub fn forward_trace(draft: &DraftModel, tied: &TiedWeights, tokens: &[u32], prev_hidden: &Matrix) -> Result<DraftTrace> {
    let cfg = &draft.config;
    let n = tokens.len();
    let positions: Vec<usize> = (0..n).collect();
    let idx = tokens
        .iter()
        .map(|&t| {
            ((t as usize) < cfg.vocab_size)
                .then_some(t as usize)
                .ok_or_else(|| Error::InvalidArgument(format!("token {t} outside vocab")))
        })
        .collect::<Result<Vec<_>>>()?;
    let input = tied.embedding.select_rows(&idx).hstack(prev_hidden)?;
    let mut x = matmul(&input, &draft.fusion)?;
    let (nh, hd) = (cfg.n_heads, cfg.head_dim);
    let scale = 1.0 / (hd as f64).sqrt();
    let mut layers = Vec::with_capacity(draft.layers.len());
    for (li, l) in draft.layers.iter().enumerate() {
        let chunk = cfg.layer_chunk(li);
        let n1 = rms_fwd(&x, &l.attn_norm);
        let qr = rope_apply(&matmul(&n1.out, &l.wq)?, &positions, hd, cfg.rope_theta)?;
        let kr = rope_apply(&matmul(&n1.out, &l.wk)?, &positions, hd, cfg.rope_theta)?;
        let v = matmul(&n1.out, &l.wv)?;
        let mut att = Matrix::zeros(n, cfg.dim);
        let mut probs = Vec::with_capacity(nh);
        for h in 0..nh {
            let (qh, kh, vh) = (qr.col_block(h * hd, hd), kr.col_block(h * hd, hd), v.col_block(h * hd, hd));
            let s = matmul_bt(&qh, &kh)?;
            let mut p = Matrix::zeros(n, n);
            for i in 0..n {
                let m = (0..n)
                    .filter(|&j| visible(i, j, chunk))
                    .map(|j| s.get(i, j) * scale)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in (0..n).filter(|&j| visible(i, j, chunk)) {
                    let e = (s.get(i, j) * scale - m).exp();
                    p.set(i, j, e);
                    sum += e;
                }
                p.row_mut(i).iter_mut().for_each(|e| *e /= sum);
            }
            att.set_col_block(h * hd, &matmul(&p, &vh)?);
            probs.push(p);
        }
        let mut x1 = x.clone();
        x1.add_assign(&matmul(&att, &l.wo)?)?;
        let n2 = rms_fwd(&x1, &l.ffn_norm);
        let gate = matmul(&n2.out, dense(&l.w_gate)?)?;
        let up = matmul(&n2.out, dense(&l.w_up)?)?;
        let mut act = gate.clone();
        for (a, u) in act.data_mut().iter_mut().zip(up.data()) {
            *a = *a * sigmoid(*a) * u;
        }
        let mut x2 = x1.clone();
        x2.add_assign(&matmul(&act, dense(&l.w_down)?)?)?;
        layers.push(LayerTrace {
            x,
            n1,
            qr,
            kr,
            v,
            probs,
            att,
            x1,
            n2,
            gate,
            up,
            act,
        });
        x = x2;
    }
    let nf = rms_fwd(&x, &draft.final_norm);
    let hidden = nf.out.clone();
    let logits = matmul(&hidden, &tied.lm_head)?;
    if !logits.is_finite() {
        return Err(Error::NonFinite("draft training logits"));
    }
    Ok(DraftTrace {
        input,
        layers,
        x_out: x,
        nf,
        hidden,
        logits,
    })
}

/// Reverse pass given upstream gradients for the output hidden states and logits.
pub fn backward(draft: &DraftModel, tied: &TiedWeights, tr: &DraftTrace, d_hidden: &Matrix, d_logits: &Matrix) -> Result<Grads> {
    let cfg = &draft.config;
    let n = tr.hidden.rows();
    let positions: Vec<f64> = (0..n).map(|p| -(p as f64)).collect();
    let (nh, hd) = (cfg.n_heads, cfg.head_dim);
    let scale = 1.0 / (hd as f64).sqrt();
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(2 + TENSORS_PER_LAYER * draft.layers.len());

    let mut dh = matmul_bt(d_logits, &tied.lm_head)?;
    dh.add_assign(d_hidden)?;
    let mut d_final = vec![0.0; cfg.dim];
    let mut dx = rms_bwd(&tr.x_out, &draft.final_norm, &tr.nf.inv_rms, &dh, &mut d_final);

    let mut layer_grads = Vec::with_capacity(draft.layers.len());
    for (l, t) in draft.layers.iter().zip(&tr.layers).rev() {
        // FFN: x2 = x1 + act · Wd
        let w_down = dense(&l.w_down)?;
        let d_wd = matmul_at(&t.act, &dx)?;
        let d_act = matmul_bt(&dx, w_down)?;
        let mut d_gate = Matrix::zeros(n, cfg.ffn_hidden);
        let mut d_up = Matrix::zeros(n, cfg.ffn_hidden);
        for i in 0..d_act.data().len() {
            let (g, u, da) = (t.gate.data()[i], t.up.data()[i], d_act.data()[i]);
            let s = sigmoid(g);
            d_up.data_mut()[i] = da * g * s;
            d_gate.data_mut()[i] = da * u * s * (1.0 + g * (1.0 - s));
        }
        let d_wg = matmul_at(&t.n2.out, &d_gate)?;
        let d_wu = matmul_at(&t.n2.out, &d_up)?;
        let mut db = matmul_bt(&d_gate, dense(&l.w_gate)?)?;
        db.add_assign(&matmul_bt(&d_up, dense(&l.w_up)?)?)?;
        let mut d_ffn_norm = vec![0.0; cfg.dim];
        let mut dx1 = rms_bwd(&t.x1, &l.ffn_norm, &t.n2.inv_rms, &db, &mut d_ffn_norm);
        dx1.add_assign(&dx)?;

        // attention: x1 = x + att · Wo
        let d_wo = matmul_at(&t.att, &dx1)?;
        let d_att = matmul_bt(&dx1, &l.wo)?;
        let mut dqr = Matrix::zeros(n, cfg.dim);
        let mut dkr = Matrix::zeros(n, cfg.dim);
        let mut dv = Matrix::zeros(n, cfg.dim);
        for h in 0..nh {
            let p = &t.probs[h];
            let (qh, kh, vh) = (t.qr.col_block(h * hd, hd), t.kr.col_block(h * hd, hd), t.v.col_block(h * hd, hd));
            let d_o = d_att.col_block(h * hd, hd);
            let dp = matmul_bt(&d_o, &vh)?;
            dv.set_col_block(h * hd, &matmul_at(p, &d_o)?);
            let mut ds = Matrix::zeros(n, n);
            for i in 0..n {
                let row_dot: f64 = (0..n).map(|j| dp.get(i, j) * p.get(i, j)).sum();
                for j in 0..n {
                    ds.set(i, j, p.get(i, j) * (dp.get(i, j) - row_dot) * scale);
                }
            }
            dqr.set_col_block(h * hd, &matmul(&ds, &kh)?);
            dkr.set_col_block(h * hd, &matmul_at(&ds, &qh)?);
        }
        let dq = rope_apply_signed(&dqr, &positions, hd, cfg.rope_theta)?;
        let dk = rope_apply_signed(&dkr, &positions, hd, cfg.rope_theta)?;
        let a = &t.n1.out;
        let d_wq = matmul_at(a, &dq)?;
        let d_wk = matmul_at(a, &dk)?;
        let d_wv = matmul_at(a, &dv)?;
        let mut da = matmul_bt(&dq, &l.wq)?;
        da.add_assign(&matmul_bt(&dk, &l.wk)?)?;
        da.add_assign(&matmul_bt(&dv, &l.wv)?)?;
        let mut d_attn_norm = vec![0.0; cfg.dim];
        let mut dx0 = rms_bwd(&t.x, &l.attn_norm, &t.n1.inv_rms, &da, &mut d_attn_norm);
        dx0.add_assign(&dx1)?;
        dx = dx0;

        layer_grads.push(vec![
            d_attn_norm,
            d_wq.into_vec(),
            d_wk.into_vec(),
            d_wv.into_vec(),
            d_wo.into_vec(),
            d_ffn_norm,
            d_wg.into_vec(),
            d_wu.into_vec(),
            d_wd.into_vec(),
        ]);
    }
    grads.push(matmul_at(&tr.input, &dx)?.into_vec());
    for lg in layer_grads.into_iter().rev() {
        grads.extend(lg);
    }
    grads.push(d_final);
    Ok(Grads(grads))
}
