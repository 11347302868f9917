//! Online distillation of the draft against the frozen base model.
//!
//! Sequence `t_0..t_{n-1}` is run through the base once. Draft row `i` sees
//! token `t_i` fused with base hidden `h_{i-1}` (row 0 reuses `h_0`) and is
//! trained to reproduce base hidden `h_i` and logits `l_i`. Row 0 has no
//! real predecessor, so it is context only and does not enter the loss.

mod adam;
pub mod grad;

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::drafttree::{DispatchTable, TreeSpec};
use crate::engine::{Engine, EngineOptions};
use crate::error::{Error, Result};
use crate::kvstore::{FlatKvCache, KvBackend, KvHandle};
use crate::model::{BaseModel, DraftModel, ForwardOutput, TiedWeights};
use crate::numcore::{smooth_l1, soft_cross_entropy, softmax_lse, Matrix};
use crate::sampling::SamplerConfig;

pub use adam::Adam;
pub use grad::{backward, forward_trace, param_names, params_mut, DraftTrace, Grads};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_ce: f64,
    pub lambda_l1: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub seed: u64,
    /// Sequences per step.
    pub batch_size: usize,
    pub corpus_size: usize,
    pub seq_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_ce: 0.1,
            lambda_l1: 1.0,
            learning_rate: 3e-3,
            weight_decay: 0.0,
            steps: 500,
            seed: 0,
            batch_size: 4,
            corpus_size: 64,
            seq_len: 24,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_ce >= 0.0 && self.lambda_l1 >= 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate and weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 || self.corpus_size == 0 || self.seq_len < 2 {
            return Err(Error::Config("batch_size, corpus_size >= 1 and seq_len >= 2 required".into()));
        }
        Ok(())
    }
}

/// Seeded first-order Markov source: each token has a few weighted successors.
#[derive(Debug, Clone)]
pub struct MarkovSource {
    succ: Vec<Vec<(u32, f64)>>,
}

impl MarkovSource {
    pub fn new(vocab: usize, branching: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let succ = (0..vocab)
            .map(|_| {
                let mut row: Vec<(u32, f64)> = (0..branching.max(1))
                    .map(|_| (rng.gen_range(0..vocab as u32), rng.gen_range(0.1..1.0)))
                    .collect();
                // one dominant successor
                row[0].1 += 2.0;
                row
            })
            .collect();
        Self { succ }
    }

    pub fn sample(&self, len: usize, rng: &mut impl Rng) -> Vec<u32> {
        let mut t = rng.gen_range(0..self.succ.len() as u32);
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(t);
            let row = &self.succ[t as usize];
            let total: f64 = row.iter().map(|s| s.1).sum();
            let mut u = rng.gen::<f64>() * total;
            t = row.last().expect("non-empty").0;
            for &(tok, w) in row {
                if u < w {
                    t = tok;
                    break;
                }
                u -= w;
            }
        }
        out
    }
}

pub fn markov_corpus(vocab: usize, n_seqs: usize, len: usize, seed: u64) -> Vec<Vec<u32>> {
    let src = MarkovSource::new(vocab, 3, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    (0..n_seqs).map(|_| src.sample(len, &mut rng)).collect()
}

/// One training sequence with its teacher outputs.
#[derive(Debug, Clone)]
pub struct DistillBatch {
    pub tokens: Vec<u32>,
    pub base: ForwardOutput,
}

impl DistillBatch {
    /// Runs the frozen base over `tokens`.
    pub fn new(base: &BaseModel, tokens: &[u32]) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::InvalidArgument("distillation needs at least 2 tokens".into()));
        }
        let mut cache = FlatKvCache::new(base.config.n_layers, base.config.dim);
        let seq = cache.open_seq();
        let out = base.base_forward(tokens, &mut KvHandle::new(&mut cache, seq))?;
        Ok(Self {
            tokens: tokens.to_vec(),
            base: out,
        })
    }

    /// Draft `prev_hidden`: base hidden shifted right by one.
    pub fn draft_prev_hidden(&self) -> Matrix {
        let h = &self.base.hidden;
        let idx: Vec<usize> = (0..h.rows()).map(|i| i.saturating_sub(1)).collect();
        h.select_rows(&idx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossTerms {
    pub total: f64,
    pub ce: f64,
    pub l1: f64,
}

impl LossTerms {
    fn add_scaled(&mut self, o: &LossTerms, s: f64) {
        self.total += s * o.total;
        self.ce += s * o.ce;
        self.l1 += s * o.l1;
    }
}

fn tail(m: &Matrix) -> Matrix {
    m.select_rows(&(1..m.rows()).collect::<Vec<_>>())
}

/// Weighted soft cross-entropy plus smooth-L1 over rows `1..n`.
pub fn distill_loss(base_out: &ForwardOutput, draft_out: &ForwardOutput, cfg: &TrainConfig) -> Result<LossTerms> {
    let (b, d) = (&base_out.hidden, &draft_out.hidden);
    if b.rows() != d.rows() || b.cols() != d.cols() || base_out.logits.cols() != draft_out.logits.cols() {
        return Err(Error::shape("distill_loss", "base and draft outputs are misaligned"));
    }
    if b.rows() < 2 {
        return Err(Error::shape("distill_loss", "need at least 2 rows"));
    }
    let ce = soft_cross_entropy(&tail(&base_out.logits), &tail(&draft_out.logits))?;
    let l1 = smooth_l1(&tail(d), &tail(b), 1.0)?;
    Ok(LossTerms {
        total: cfg.lambda_ce * ce + cfg.lambda_l1 * l1,
        ce,
        l1,
    })
}

/// Loss and parameter gradients for one sequence.
pub fn loss_and_grads(draft: &DraftModel, tied: &TiedWeights, batch: &DistillBatch, cfg: &TrainConfig) -> Result<(LossTerms, Grads)> {
    let tr = forward_trace(draft, tied, &batch.tokens, &batch.draft_prev_hidden())?;
    let out = ForwardOutput {
        hidden: tr.hidden.clone(),
        logits: tr.logits.clone(),
    };
    let loss = distill_loss(&batch.base, &out, cfg)?;

    let n = tr.hidden.rows();
    let m = (n - 1) as f64;
    let dim = tr.hidden.cols();
    let ps = softmax_lse(&tr.logits, 1.0)?.probs;
    let pt = softmax_lse(&batch.base.logits, 1.0)?.probs;
    let mut d_logits = Matrix::zeros(n, tr.logits.cols());
    let mut d_hidden = Matrix::zeros(n, dim);
    for r in 1..n {
        for (j, g) in d_logits.row_mut(r).iter_mut().enumerate() {
            *g = cfg.lambda_ce * (ps.get(r, j) - pt.get(r, j)) / m;
        }
        for (j, g) in d_hidden.row_mut(r).iter_mut().enumerate() {
            let diff = tr.hidden.get(r, j) - batch.base.hidden.get(r, j);
            *g = cfg.lambda_l1 * diff.clamp(-1.0, 1.0) / (m * dim as f64);
        }
    }
    let grads = backward(draft, tied, &tr, &d_hidden, &d_logits)?;
    Ok((loss, grads))
}

/// Mean loss of the current draft over `seqs` (no update).
pub fn corpus_loss(base: &BaseModel, draft: &DraftModel, seqs: &[Vec<u32>], cfg: &TrainConfig) -> Result<LossTerms> {
    let tied = draft.tied_read().clone();
    let mut acc = LossTerms::default();
    for s in seqs {
        let batch = DistillBatch::new(base, s)?;
        let tr = forward_trace(draft, &tied, &batch.tokens, &batch.draft_prev_hidden())?;
        let out = ForwardOutput {
            hidden: tr.hidden,
            logits: tr.logits,
        };
        acc.add_scaled(&distill_loss(&batch.base, &out, cfg)?, 1.0 / seqs.len() as f64);
    }
    Ok(acc)
}

/// One optimizer step on a minibatch. Teacher outputs are computed here from the live base.
pub fn train_step(
    base: &BaseModel,
    draft: &mut DraftModel,
    opt: &mut Adam,
    seqs: &[&[u32]],
    cfg: &TrainConfig,
    step: usize,
) -> Result<LossTerms> {
    if seqs.is_empty() {
        return Err(Error::InvalidArgument("empty minibatch".into()));
    }
    let tied = draft.tied_read().clone();
    let batches = seqs.iter().map(|s| DistillBatch::new(base, s)).collect::<Result<Vec<_>>>()?;
    let parts: Vec<Result<(LossTerms, Grads)>> = std::thread::scope(|sc| {
        let handles: Vec<_> = batches
            .iter()
            .map(|b| {
                let (d, t) = (&*draft, &tied);
                sc.spawn(move || loss_and_grads(d, t, b, cfg))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let w = 1.0 / seqs.len() as f64;
    let mut loss = LossTerms::default();
    let mut grads = Grads::zeros_like(draft)?;
    for p in parts {
        let (l, g) = p?;
        loss.add_scaled(&l, w);
        grads.add_scaled(&g, w);
    }
    if !loss.total.is_finite() || !grads.is_finite() {
        return Err(Error::Training {
            step,
            detail: format!("non-finite loss {} or gradient (norm {})", loss.total, grads.norm()),
        });
    }
    let mut params = params_mut(draft)?;
    opt.step(&mut params, &grads);
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: usize,
    pub total: f64,
    pub ce: f64,
    pub l1: f64,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("step,total,ce,l1\n");
    for p in curve {
        let _ = writeln!(s, "{},{:.9},{:.9},{:.9}", p.step, p.total, p.ce, p.l1);
    }
    s
}

/// Trains for `cfg.steps` steps on `corpus`, numbering steps from `first_step`.
///
/// Minibatch order depends on `cfg.seed` and `first_step`, so a resumed run
/// draws different batches than a fresh one.
pub fn train_on(
    base: &BaseModel,
    draft: &mut DraftModel,
    corpus: &[Vec<u32>],
    cfg: &TrainConfig,
    first_step: usize,
) -> Result<Vec<CurvePoint>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_0000);
    rng.set_stream(first_step as u64);
    let mut opt = Adam::new(cfg.learning_rate, cfg.weight_decay);
    let mut curve = Vec::with_capacity(cfg.steps);
    for k in 0..cfg.steps {
        let picks: Vec<&[u32]> = (0..cfg.batch_size)
            .map(|_| corpus[rng.gen_range(0..corpus.len())].as_slice())
            .collect();
        let step = first_step + k;
        let l = train_step(base, draft, &mut opt, &picks, cfg, step)?;
        curve.push(CurvePoint {
            step,
            total: l.total,
            ce: l.ce,
            l1: l.l1,
        });
    }
    Ok(curve)
}

/// Builds the Markov corpus from `cfg` and trains on it.
pub fn train(base: &BaseModel, draft: &mut DraftModel, cfg: &TrainConfig) -> Result<Vec<CurvePoint>> {
    let corpus = markov_corpus(base.config.vocab_size, cfg.corpus_size, cfg.seq_len, cfg.seed);
    train_on(base, draft, &corpus, cfg, 0)
}

/// Pooled tokens per call (committed / rounds) over `prompts`.
pub fn eval_tpc(
    base: &BaseModel,
    draft: &DraftModel,
    prompts: &[Vec<u32>],
    tree: &TreeSpec,
    sampler: SamplerConfig,
    max_new_tokens: usize,
) -> Result<f64> {
    let opts = EngineOptions::new(DispatchTable::single(tree.clone()), sampler);
    let mut engine = Engine::flat(base, draft, opts)?;
    let (mut committed, mut rounds) = (0u64, 0u64);
    for (i, p) in prompts.iter().enumerate() {
        let mut s = engine.new_session(p, sampler.seed.wrapping_add(i as u64))?;
        engine.run(&mut s, max_new_tokens)?;
        committed += s.metrics.committed_total;
        rounds += s.metrics.rounds;
        engine.close_session(s)?;
    }
    Ok(if rounds == 0 { 1.0 } else { committed as f64 / rounds as f64 })
}
