//! Tree × batch × context sweeps.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;
use specdec::drafttree::{DispatchTable, TreeSpec};
use specdec::engine::{Engine, EngineOptions, StageMetrics};
use specdec::kvstore::{KvBackend, PagedKvConfig};
use specdec::model::{BaseModel, DraftModel};
use specdec::Result;

use crate::fixture::prompts;

/// CSV columns, in order. Columns ending in `_ms` and `tokens_per_second` are wall-clock.
pub const CSV_HEADER: &str = "model_tag,tree_tag,batch_size,context_len,tpc,tokens_per_second,round_ms,\
prefill_ms,dispatch_ms,draft_ms,validate_ms,sample_ms,bookkeep_ms,rounds,committed,base_calls,draft_calls,\
prefix_hit_tokens,cache_hit_blocks,evictions";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub model_tag: String,
    /// Tree label, or `off` for plain decoding. Commas become `;` in CSV.
    pub tree_tag: String,
    pub batch_size: usize,
    pub context_len: usize,
    pub tpc: f64,
    pub tokens_per_second: f64,
    /// Mean wall time of one lockstep round over the whole batch.
    pub round_ms: f64,
    /// Prefill time per session.
    pub prefill_ms: f64,
    /// Stage times per lockstep round.
    pub dispatch_ms: f64,
    pub draft_ms: f64,
    pub validate_ms: f64,
    pub sample_ms: f64,
    pub bookkeep_ms: f64,
    pub rounds: u64,
    pub committed: u64,
    pub base_calls: u64,
    pub draft_calls: u64,
    pub prefix_hit_tokens: u64,
    pub cache_hit_blocks: u64,
    pub evictions: u64,
}

impl BenchRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.3},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{},{},{},{},{},{},{}",
            self.model_tag.replace(',', ";"),
            self.tree_tag.replace(',', ";"),
            self.batch_size,
            self.context_len,
            self.tpc,
            self.tokens_per_second,
            self.round_ms,
            self.prefill_ms,
            self.dispatch_ms,
            self.draft_ms,
            self.validate_ms,
            self.sample_ms,
            self.bookkeep_ms,
            self.rounds,
            self.committed,
            self.base_calls,
            self.draft_calls,
            self.prefix_hit_tokens,
            self.cache_hit_blocks,
            self.evictions
        )
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("rows serialize")
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<18} {:<12} {:>5} {:>5} {:>6} {:>9} {:>9} {:>8} {:>8}\n",
            "model", "tree", "batch", "ctx", "tpc", "tok/s", "round_ms", "draft", "validate"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<18} {:<12} {:>5} {:>5} {:>6.3} {:>9.1} {:>9.3} {:>8.3} {:>8.3}",
                r.model_tag, r.tree_tag, r.batch_size, r.context_len, r.tpc, r.tokens_per_second, r.round_ms, r.draft_ms, r.validate_ms
            );
        }
        s
    }
}

/// A sweep over trees, batch sizes and prompt lengths.
#[derive(Debug, Clone)]
pub struct BenchGrid {
    pub model_tag: String,
    /// `None` is the non-speculative baseline.
    pub trees: Vec<Option<TreeSpec>>,
    pub batches: Vec<usize>,
    pub contexts: Vec<usize>,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub kv: PagedKvConfig,
    /// Template for sampler, draft mode, stop tokens and context limit.
    pub options: EngineOptions,
}

impl BenchGrid {
    pub fn points(&self) -> Vec<(Option<TreeSpec>, usize, usize)> {
        let mut out = Vec::new();
        for t in &self.trees {
            for &b in &self.batches {
                for &c in &self.contexts {
                    out.push((t.clone(), b, c));
                }
            }
        }
        out
    }
}

/// Runs one grid point on a fresh paged engine.
pub fn run_point(
    base: &BaseModel,
    draft: &DraftModel,
    grid: &BenchGrid,
    tree: Option<&TreeSpec>,
    batch: usize,
    context: usize,
) -> Result<BenchRow> {
    let mut opts = grid.options.clone();
    match tree {
        Some(t) => opts.dispatch = DispatchTable::single(t.clone()),
        None => opts.speculative = false,
    }
    let mut engine = Engine::paged(base, draft, grid.kv, opts)?;
    let vocab = base.config.vocab_size;
    let mut sessions = prompts(batch, grid.seed ^ context as u64, context, context, vocab)
        .iter()
        .enumerate()
        .map(|(i, p)| engine.new_session(p, grid.seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let t0 = Instant::now();
    let total = engine.run_batch(&mut sessions, grid.max_new_tokens)?;
    let wall = t0.elapsed().as_secs_f64();
    let lockstep = sessions.iter().map(|s| s.metrics.rounds).max().unwrap_or(0).max(1) as f64;
    let stats = engine.base_cache.stats();
    let per_round = |v: f64| v / lockstep;
    let StageMetrics {
        rounds,
        committed_total,
        base_forward_calls,
        draft_forward_calls,
        prefix_hit_tokens,
        ..
    } = total;
    Ok(BenchRow {
        model_tag: grid.model_tag.clone(),
        tree_tag: tree.map_or_else(|| "off".to_string(), |t| t.label().to_string()),
        batch_size: batch,
        context_len: context,
        tpc: total.tpc(),
        tokens_per_second: (committed_total + batch as u64) as f64 / wall.max(1e-9),
        round_ms: per_round(total.decode_ms()),
        prefill_ms: total.prefill_ms / batch as f64,
        dispatch_ms: per_round(total.dispatch_ms),
        draft_ms: per_round(total.draft_ms),
        validate_ms: per_round(total.validate_ms),
        sample_ms: per_round(total.sample_ms),
        bookkeep_ms: per_round(total.bookkeep_ms),
        rounds,
        committed: committed_total,
        base_calls: base_forward_calls,
        draft_calls: draft_forward_calls,
        prefix_hit_tokens,
        cache_hit_blocks: stats.hit_blocks,
        evictions: stats.evictions,
    })
}

/// Runs every grid point with up to `workers` threads; rows come back in grid order.
pub fn run_grid(base: &BaseModel, draft: &DraftModel, grid: &BenchGrid, workers: usize) -> Result<BenchReport> {
    let points = grid.points();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<BenchRow>>>> = Mutex::new((0..points.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, points.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((tree, b, c)) = points.get(i) else { break };
                let row = run_point(base, draft, grid, tree.as_ref(), *b, *c);
                slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(row);
            });
        }
    });
    let rows = slots
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .map(|r| r.expect("every point ran"))
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchReport { rows })
}

/// Worker count from `SPECDEC_WORKERS`, else the available parallelism.
pub fn workers_from_env() -> usize {
    std::env::var("SPECDEC_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use specdec::drafttree::{build_chain, build_full_tree};
    use specdec::model::ModelConfig;
    use specdec::sampling::SamplerConfig;

    fn grid(trees: Vec<Option<TreeSpec>>) -> BenchGrid {
        BenchGrid {
            model_tag: "toy".into(),
            trees,
            batches: vec![1, 3],
            contexts: vec![4],
            max_new_tokens: 6,
            seed: 5,
            kv: PagedKvConfig::default(),
            options: EngineOptions::new(DispatchTable::single(build_chain(1).unwrap()), SamplerConfig::greedy()),
        }
    }

    fn masked(csv: &str) -> Vec<String> {
        // drop wall-clock columns
        let wall: Vec<usize> = CSV_HEADER
            .split(',')
            .enumerate()
            .filter(|(_, c)| c.ends_with("_ms") || *c == "tokens_per_second")
            .map(|(i, _)| i)
            .collect();
        csv.lines()
            .map(|l| {
                l.split(',')
                    .enumerate()
                    .filter(|(i, _)| !wall.contains(i))
                    .map(|(_, c)| c)
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect()
    }

    #[test]
    fn grid_rows_schema_and_determinism() {
        let base = BaseModel::random(ModelConfig::toy_base(), 1).unwrap();
        let draft = DraftModel::random(&base, ModelConfig::toy_draft(&base.config), 2).unwrap();
        let g = grid(vec![Some(build_chain(3).unwrap()), Some(build_full_tree(2, 2).unwrap()), None]);
        let a = run_grid(&base, &draft, &g, 2).unwrap();
        assert_eq!(a.rows.len(), 6);
        let csv = a.to_csv();
        assert_eq!(csv.lines().next(), Some(CSV_HEADER));
        for line in csv.lines().skip(1) {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells.len(), CSV_HEADER.split(',').count());
            for c in &cells[2..] {
                assert!(c.parse::<f64>().unwrap().is_finite());
            }
        }
        for r in &a.rows {
            let max_tpc = if r.tree_tag == "off" { 1.0 } else { 4.0 };
            assert!(r.tpc >= 1.0 && r.tpc <= max_tpc, "{r:?}");
        }
        assert!(a.rows.iter().filter(|r| r.tree_tag == "off").all(|r| r.tpc == 1.0));
        let b = run_grid(&base, &draft, &g, 1).unwrap();
        assert_eq!(masked(&csv), masked(&b.to_csv()));
        let json: serde_json::Value = serde_json::from_str(&a.to_json()).unwrap();
        assert_eq!(json["rows"].as_array().unwrap().len(), 6);
    }
}
