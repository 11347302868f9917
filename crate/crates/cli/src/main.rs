use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use specdec::distill::{curve_csv, eval_tpc, markov_corpus, train_on, TrainConfig};
use specdec::drafttree::TreeSpec;
use specdec::engine::{EngineConfig, EngineOptions, Fault};
use specdec::model::{save_base, save_draft};
use specdec_cli::bench::{run_grid, workers_from_env, BenchGrid};
use specdec_cli::verify::{Suite, Verifier, VerifyOptions};
use specdec_cli::{initial_draft, load_base_model, load_draft_model};

#[derive(Parser)]
#[command(name = "specdec", version, about = "Speculative decoding on toy CPU transformers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sweep trees x batch sizes x prompt lengths.
    Bench(BenchArgs),
    /// Run correctness suites.
    Verify(VerifyArgs),
    /// Distill a draft model against the base.
    TrainDraft(TrainArgs),
    /// Tokens per call of one or more drafts on held-out prompts.
    EvalTpc(EvalArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Engine config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeded random weights instead of checkpoints.
    #[arg(long)]
    random_weights: bool,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ModelArgs {
    fn engine_config(&self) -> Result<EngineConfig> {
        let mut cfg = match &self.config {
            Some(p) => EngineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => EngineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Speculative {
    On,
    Off,
    Both,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Draft checkpoint; overrides the config.
    #[arg(long)]
    draft: Option<PathBuf>,
    /// Comma-separated trees, e.g. `chain:3,full:2,2`; defaults to the config's dispatch trees.
    #[arg(long)]
    trees: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    batch: Vec<usize>,
    /// Prompt lengths.
    #[arg(long, value_delimiter = ',', default_value = "16")]
    context: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    max_new: usize,
    /// `on`: tree rows, `off`: plain decoding rows, `both`: tree rows plus the plain baseline.
    #[arg(long, value_enum, default_value_t = Speculative::Both)]
    speculative: Speculative,
    #[arg(long, default_value = "model")]
    model_tag: String,
    /// CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON output path.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    None,
    SkipRewind,
}

#[derive(Args)]
struct VerifyArgs {
    /// Suites to run (comma-separated); all when omitted.
    #[arg(long, value_delimiter = ',')]
    suite: Vec<Suite>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Smaller sample sizes.
    #[arg(long)]
    quick: bool,
    /// Inject a bookkeeping fault into the engines under test.
    #[arg(long, value_enum, default_value_t = FaultArg::None)]
    fault: FaultArg,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Training config (TOML); defaults apply when omitted.
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Draft checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Also write the base model (useful with --random-weights).
    #[arg(long)]
    base_out: Option<PathBuf>,
    /// Training curve CSV (step,total,ce,l1).
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Continue from `--out` and append to `--curve`.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Draft checkpoints to evaluate.
    #[arg(long = "draft")]
    drafts: Vec<PathBuf>,
    /// Add a row for the untrained draft.
    #[arg(long)]
    include_untrained: bool,
    #[arg(long, default_value = "chain:3")]
    tree: TreeSpec,
    #[arg(long, default_value_t = 16)]
    prompts: usize,
    #[arg(long, default_value_t = 8)]
    prompt_len: usize,
    #[arg(long, default_value_t = 32)]
    max_new: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn bench(a: BenchArgs) -> Result<()> {
    let cfg = a.model.engine_config()?;
    let base = load_base_model(&cfg, a.model.random_weights)?;
    let draft = load_draft_model(&base, &cfg, a.draft.as_deref(), a.model.random_weights)?;
    let mut trees: Vec<Option<TreeSpec>> = match &a.trees {
        Some(s) => parse_trees(s)?.into_iter().map(Some).collect(),
        None => cfg.dispatch.iter().map(|e| Some(e.tree.clone())).collect(),
    };
    match a.speculative {
        Speculative::On => {}
        Speculative::Off => trees = vec![None],
        Speculative::Both => trees.push(None),
    }
    if a.batch.is_empty() || a.batch.contains(&0) || a.context.contains(&0) {
        bail!("batch sizes and context lengths must be >= 1");
    }
    let grid = BenchGrid {
        model_tag: a.model_tag,
        trees,
        batches: a.batch,
        contexts: a.context,
        max_new_tokens: a.max_new,
        seed: cfg.seed,
        kv: cfg.paged_config(),
        options: EngineOptions::from_config(&cfg)?,
    };
    let report = run_grid(&base, &draft, &grid, workers_from_env())?;
    print!("{}", report.to_table());
    if let Some(p) = &a.out {
        write_out(p, &report.to_csv())?;
    }
    if let Some(p) = &a.json {
        write_out(p, &report.to_json())?;
    }
    Ok(())
}

/// Splits `chain:3,full:2,2` into trees; a bare number continues the previous spec.
fn parse_trees(s: &str) -> Result<Vec<TreeSpec>> {
    let mut specs: Vec<String> = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match specs.last_mut() {
            Some(last) if part.chars().all(|c| c.is_ascii_digit()) => {
                last.push(',');
                last.push_str(part);
            }
            _ => specs.push(part.to_string()),
        }
    }
    specs
        .iter()
        .map(|t| t.parse::<TreeSpec>().with_context(|| format!("bad tree {t:?}")))
        .collect()
}

fn verify(a: VerifyArgs) -> Result<bool> {
    let suites = if a.suite.is_empty() { Suite::ALL.to_vec() } else { a.suite };
    let v = Verifier::new(VerifyOptions {
        seed: a.seed,
        quick: a.quick,
        fault: match a.fault {
            FaultArg::None => Fault::None,
            FaultArg::SkipRewind => Fault::SkipRewind,
        },
    });
    let mut ok = true;
    for s in suites {
        let r = v.run(s);
        println!("{r}");
        ok &= r.passed;
    }
    Ok(ok)
}

fn train_draft(a: TrainArgs) -> Result<()> {
    let cfg = a.model.engine_config()?;
    let mut tcfg = match &a.train_config {
        Some(p) => toml::from_str::<TrainConfig>(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => TrainConfig {
            seed: cfg.seed,
            ..TrainConfig::default()
        },
    };
    if let Some(s) = a.steps {
        tcfg.steps = s;
    }
    if let Some(lr) = a.learning_rate {
        tcfg.learning_rate = lr;
    }
    tcfg.validate()?;
    let base = load_base_model(&cfg, a.model.random_weights)?;
    let mut draft = if a.resume {
        specdec::model::load_draft(&a.out, &base).with_context(|| format!("resuming from {}", a.out.display()))?
    } else {
        initial_draft(&base, &cfg)?
    };
    let mut first_step = 0;
    let mut prior = String::new();
    if let (true, Some(c)) = (a.resume, &a.curve) {
        if c.exists() {
            prior = fs::read_to_string(c)?;
            first_step = prior
                .lines()
                .skip(1)
                .filter_map(|l| l.split(',').next()?.parse::<usize>().ok())
                .max()
                .map_or(0, |s| s + 1);
        }
    }
    let corpus = markov_corpus(base.config.vocab_size, tcfg.corpus_size, tcfg.seq_len, tcfg.seed);
    let curve = train_on(&base, &mut draft, &corpus, &tcfg, first_step)?;
    save_draft(&draft, &a.out)?;
    if let Some(p) = &a.base_out {
        save_base(&base, p)?;
    }
    if let Some(p) = &a.curve {
        let fresh = curve_csv(&curve);
        let text = if prior.is_empty() {
            fresh
        } else {
            let body: String = fresh.lines().skip(1).map(|l| format!("{l}\n")).collect();
            format!("{}{body}", if prior.ends_with('\n') { prior } else { prior + "\n" })
        };
        write_out(p, &text)?;
    }
    if let (Some(f), Some(l)) = (curve.first(), curve.last()) {
        println!(
            "steps {}..={}: loss {:.4} -> {:.4} (ce {:.4}, l1 {:.4})",
            f.step, l.step, f.total, l.total, l.ce, l.l1
        );
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = a.model.engine_config()?;
    let base = load_base_model(&cfg, a.model.random_weights)?;
    let mut drafts = Vec::new();
    if a.include_untrained {
        drafts.push(("untrained".to_string(), initial_draft(&base, &cfg)?));
    }
    for p in &a.drafts {
        let tag = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
        drafts.push((tag, load_draft_model(&base, &cfg, Some(p), false)?));
    }
    if drafts.is_empty() {
        bail!("nothing to evaluate: pass --draft and/or --include-untrained");
    }
    let held = markov_corpus(base.config.vocab_size, a.prompts, a.prompt_len, cfg.seed.wrapping_add(0x4e1d));
    let mut csv = String::from("draft_tag,tree_tag,prompts,tpc\n");
    for (tag, d) in &drafts {
        let tpc = eval_tpc(&base, d, &held, &a.tree, cfg.sampler, a.max_new)?;
        println!("{tag:<16} {:<10} tpc {tpc:.4}", a.tree.label());
        csv.push_str(&format!("{tag},{},{},{tpc:.6}\n", a.tree.label(), a.prompts));
    }
    if let Some(p) = &a.out {
        write_out(p, &csv)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Bench(a) => bench(a).map(|_| true),
        Cmd::Verify(a) => verify(a),
        Cmd::TrainDraft(a) => train_draft(a).map(|_| true),
        Cmd::EvalTpc(a) => eval(a).map(|_| true),
    };
    match r {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
