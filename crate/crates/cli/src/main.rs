//! `ruel`: one binary for every pipeline stage.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use ruel_core::checkpoint;
use ruel_core::config::{ExperimentConfig, Variant};
use ruel_core::dataset::{self, Corpus, PreprocessConfig, Split};
use ruel_core::encoder::{self, EncoderParams};
use ruel_core::fusion::FusionHead;
use ruel_core::linalg;
use ruel_core::retrieval::{IndexMode, RetrievalIndex};
use ruel_core::synth::{self, SynthConfig};
use ruel_core::training::{self, Trainer};
use ruel_core::{Error, Result};

const THETA_Q: &str = "theta_q.ckpt";
const THETA_K: &str = "theta_k.ckpt";
const HEAD: &str = "head.ckpt";
const INDEX_ENCODER: &str = "index_encoder.ckpt";
const CONFIG_FILE: &str = "config.txt";

#[derive(Parser)]
#[command(name = "ruel", version, about = "Retrieval-augmented sequential recommendation")]
#[command(after_help = config_help())]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 makes every run bitwise reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Ablation variant: full | no_ra | no_mc | no_da | no_as.
    #[arg(long, global = true)]
    variant: Option<Variant>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus plus the raw logs it was derived from.
    Synth(SynthArgs),
    /// Segment and align raw logs into a corpus directory.
    Preprocess(PreprocessArgs),
    /// Contrastive pretraining (stage 1).
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed every browsing session with a key-encoder checkpoint.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        /// Key-encoder checkpoint, normally `theta_k.ckpt` from `pretrain`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mode: Option<IndexMode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the sessions retrieved for one user as TSV.
    Retrieve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Query-encoder checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query_user: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Joint training (stage 2) against a frozen index.
    Train(TrainArgs),
    /// Run one variant end to end and record its metrics.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trained checkpoint on the validation or test split.
    Evaluate(EvaluateArgs),
    /// preprocess, pretrain, index, train and evaluate in one go.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 1000)]
    items: usize,
    #[arg(long, default_value_t = 200)]
    topics: usize,
    #[arg(long, default_value_t = 2000)]
    sessions: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Browsing log: `user_id \t item_key \t unix_timestamp`.
    #[arg(long)]
    events: PathBuf,
    /// Recommendation-side interactions, same format.
    #[arg(long)]
    interactions: PathBuf,
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    gap_hours: Option<f64>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Required unless the variant disables retrieval.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Stage-1 checkpoint directory; training starts from scratch without it.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    report: PathBuf,
    /// Also write per-user ranks as TSV.
    #[arg(long)]
    ranks: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Directory holding `events.tsv`, `interactions.tsv` and `catalog.tsv`.
    /// A synthetic one is generated when omitted.
    #[arg(long)]
    raw: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 1000)]
    items: usize,
    #[arg(long, default_value_t = 200)]
    topics: usize,
    #[arg(long, default_value_t = 2000)]
    sessions: usize,
    #[arg(long)]
    out: PathBuf,
}

fn config_help() -> String {
    format!("Configuration keys (config file or --set):\n{}", ExperimentConfig::help_text())
}

impl Global {
    fn resolve(&self, base: Option<ExperimentConfig>) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, base) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(b)) => b,
            (None, None) => ExperimentConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(v) = self.variant {
            cfg.train.variant = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json values always serialize");
    text.push('\n');
    io(path, std::fs::write(path, text))
}

fn config_json(cfg: &ExperimentConfig) -> Value {
    let map: serde_json::Map<String, Value> = cfg
        .entries()
        .into_iter()
        .map(|(k, v)| (k.to_string(), Value::String(v)))
        .collect();
    Value::Object(map)
}

fn run_json(cfg: &ExperimentConfig, history: &[training::EpochRecord], extra: Value) -> Value {
    json!({
        "config": config_json(cfg),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "history": history,
        "result": extra,
    })
}

fn blank_encoder(cfg: &ExperimentConfig, vocab: usize) -> Result<EncoderParams> {
    EncoderParams::init(cfg.encoder_config(vocab), &mut ChaCha8Rng::seed_from_u64(0))
}

fn load_encoder(path: &Path, cfg: &ExperimentConfig, vocab: usize) -> Result<EncoderParams> {
    let mut p = blank_encoder(cfg, vocab)?;
    checkpoint::load_into(path, &mut p)?;
    Ok(p)
}

fn save_state(dir: &Path, t: &Trainer, index_encoder: Option<&EncoderParams>) -> Result<()> {
    io(dir, std::fs::create_dir_all(dir))?;
    checkpoint::save(&dir.join(THETA_Q), &t.state.theta_q)?;
    checkpoint::save(&dir.join(THETA_K), &t.state.theta_k)?;
    checkpoint::save(&dir.join(HEAD), &t.state.head)?;
    if let Some(e) = index_encoder {
        checkpoint::save(&dir.join(INDEX_ENCODER), e)?;
    }
    let path = dir.join(CONFIG_FILE);
    io(&path, std::fs::write(&path, t.cfg.to_text()))
}

/// Keeps the last good parameters when a stage diverges.
fn guard<T>(r: Result<T>, dir: &Path, t: &Trainer, index_encoder: Option<&EncoderParams>) -> Result<T> {
    if let Err(e @ Error::Divergence(_)) = &r {
        warn!("{e}; saving last good parameters to {}", dir.display());
        save_state(dir, t, index_encoder)?;
        write_json(&dir.join("run.json"), &run_json(&t.cfg, &t.history, json!({"diverged": e.to_string()})))?;
    }
    r
}

fn cmd_synth(cfg: &ExperimentConfig, a: &SynthArgs) -> Result<()> {
    let sc = SynthConfig {
        n_users: a.users,
        n_items: a.items,
        n_topics: a.topics,
        n_sessions: a.sessions,
        seed: cfg.seed,
        ..SynthConfig::default()
    };
    let data = synth::generate(&sc)?;
    synth::write(&a.out, &data)?;
    info!(
        "wrote {} users, {} sessions, {} items to {}",
        data.corpus.user_sequences.len(),
        data.corpus.browsing_sessions.len(),
        data.corpus.vocab_size(),
        a.out.display()
    );
    Ok(())
}

fn preprocess_files(events: &Path, interactions: &Path, catalog: &Path, pre: PreprocessConfig, out: &Path) -> Result<Corpus> {
    let catalog = dataset::read_catalog(catalog)?;
    let browsing = dataset::read_events(events)?;
    let inter = dataset::read_events(interactions)?;
    let corpus = dataset::preprocess(&browsing, &inter, &catalog, pre);
    corpus.validate(pre.min_len, pre.max_len)?;
    corpus.save(out)?;
    info!(
        "corpus: {} users, {} sessions, {} items",
        corpus.user_sequences.len(),
        corpus.browsing_sessions.len(),
        corpus.vocab_size()
    );
    Ok(corpus)
}

fn cmd_preprocess(cfg: &ExperimentConfig, a: &PreprocessArgs) -> Result<()> {
    let mut pre = cfg.data;
    if let Some(h) = a.gap_hours {
        if !(h > 0.0) {
            return Err(Error::Config("--gap-hours must be positive".into()));
        }
        pre.gap_seconds = (h * 3600.0).round() as u64;
    }
    pre.min_len = a.min_len.unwrap_or(pre.min_len);
    pre.max_len = a.max_len.unwrap_or(pre.max_len);
    preprocess_files(&a.events, &a.interactions, &a.catalog, pre, &a.out)?;
    Ok(())
}

fn pretrain(cfg: &ExperimentConfig, corpus: &Corpus, out: &Path) -> Result<()> {
    let mut t = Trainer::new(corpus, cfg)?;
    let r = t.pretrain();
    guard(r, out, &t, None)?;
    save_state(out, &t, None)?;
    write_json(&out.join("run.json"), &run_json(cfg, &t.history, Value::Null))
}

fn build_index(cfg: &ExperimentConfig, corpus: &Corpus, key_ckpt: &Path, out: &Path) -> Result<RetrievalIndex> {
    let theta_k = load_encoder(key_ckpt, cfg, corpus.vocab_size())?;
    let sessions: Vec<_> = corpus.browsing_sessions.iter().map(|s| s.truncated(cfg.data.max_len)).collect();
    let index = RetrievalIndex::build(&sessions, &theta_k, &cfg.retrieval_config())?;
    index.save(out)?;
    info!("indexed {} sessions ({} mode)", index.len(), index.mode());
    Ok(index)
}

fn cmd_retrieve(cfg: &ExperimentConfig, index: &Path, corpus: &Path, ckpt: &Path, user: &str, k: usize) -> Result<()> {
    let corpus = Corpus::load(corpus)?;
    let seq = corpus
        .user_sequences
        .get(user)
        .ok_or_else(|| Error::Input(format!("unknown user {user:?}")))?;
    let theta_q = load_encoder(ckpt, cfg, corpus.vocab_size())?;
    let index = RetrievalIndex::load(index)?;
    let h = encoder::encode(&theta_q, &seq.truncated(cfg.data.max_len))?.pooled;
    let result = index.search(&linalg::l2_normalize(&h).0, k)?;
    println!("rank\tsession_id\tscore\titems");
    for (i, hit) in result.hits.iter().enumerate() {
        let items: Vec<String> = index.session_items(hit.row).iter().map(|x| x.to_string()).collect();
        println!("{}\t{}\t{:.6}\t{}", i + 1, hit.session_id, hit.score, items.join(","));
    }
    Ok(())
}

/// Stage 2 from a stage-1 checkpoint (or from scratch).
fn train(cfg: &ExperimentConfig, corpus: &Corpus, index: Option<&Path>, pretrained: Option<&Path>, out: &Path) -> Result<Trainer> {
    let vocab = corpus.vocab_size();
    let mut t = match pretrained {
        Some(dir) => Trainer::with_params(
            corpus,
            cfg,
            load_encoder(&dir.join(THETA_Q), cfg, vocab)?,
            load_encoder(&dir.join(THETA_K), cfg, vocab)?,
            None,
        )?,
        None => Trainer::new(corpus, cfg)?,
    };
    let mut index_encoder = None;
    if t.wiring.retrieval {
        let path = index.ok_or_else(|| Error::Config(format!("variant {} needs --index", cfg.train.variant)))?;
        let idx = RetrievalIndex::load(path)?;
        if idx.dim() != cfg.encoder.dim {
            return Err(Error::Config(format!(
                "index dimension {} does not match enc.dim {}",
                idx.dim(),
                cfg.encoder.dim
            )));
        }
        let key = t.state.theta_k.clone();
        t.attach_index_with(idx, &key)?;
        index_encoder = Some(key);
    } else {
        t.state.bank.clear();
    }
    let r = t.train();
    guard(r, out, &t, index_encoder.as_ref())?;
    save_state(out, &t, index_encoder.as_ref())?;
    let best = t.state.stopping.best_epoch;
    write_json(&out.join("run.json"), &run_json(cfg, &t.history, json!({"best_epoch": best})))?;
    Ok(t)
}

fn report(cfg: &ExperimentConfig, m: &ruel_core::evaluation::RecommendationMetrics, split: Split) -> Value {
    let mut metrics = BTreeMap::new();
    metrics.insert("hr@5", m.hr_at_5);
    metrics.insert("hr@10", m.hr_at_10);
    metrics.insert("ndcg@5", m.ndcg_at_5);
    metrics.insert("ndcg@10", m.ndcg_at_10);
    let mut v = json!(metrics);
    let obj = v.as_object_mut().expect("object");
    obj.insert("n_users".into(), json!(m.n_users));
    obj.insert("config_hash".into(), json!(cfg.hash()));
    obj.insert("split".into(), json!(if split == Split::Test { "test" } else { "valid" }));
    v
}

fn cmd_evaluate(global: &Global, a: &EvaluateArgs) -> Result<Value> {
    let saved = ExperimentConfig::load(&a.ckpt.join(CONFIG_FILE))?;
    let mut cfg = saved;
    if let Some(th) = global.threads {
        cfg.threads = th;
    }
    let corpus = Corpus::load(&a.corpus)?;
    let vocab = corpus.vocab_size();
    let theta_q = load_encoder(&a.ckpt.join(THETA_Q), &cfg, vocab)?;
    let theta_k = load_encoder(&a.ckpt.join(THETA_K), &cfg, vocab)?;
    let mut head = FusionHead::init(cfg.encoder.dim, vocab, cfg.fusion.tie_item_embeddings, &mut ChaCha8Rng::seed_from_u64(0));
    checkpoint::load_into(&a.ckpt.join(HEAD), &mut head)?;
    let mut t = Trainer::with_params(&corpus, &cfg, theta_q, theta_k, Some(head))?;
    if t.wiring.retrieval {
        let path = a
            .index
            .as_ref()
            .ok_or_else(|| Error::Config(format!("variant {} needs --index", cfg.train.variant)))?;
        let key = load_encoder(&a.ckpt.join(INDEX_ENCODER), &cfg, vocab)?;
        t.attach_index_with(RetrievalIndex::load(path)?, &key)?;
    }
    let (m, ranks) = t.evaluate(a.split)?;
    if let Some(p) = &a.ranks {
        ruel_core::evaluation::dump_ranks(p, &ranks)?;
    }
    let rep = report(&cfg, &m, a.split);
    write_json(&a.report, &rep)?;
    info!("{} ndcg@10 {:.4} hr@10 {:.4} over {} users", rep["split"], m.ndcg_at_10, m.hr_at_10, m.n_users);
    Ok(rep)
}

fn cmd_pipeline(global: &Global, cfg: &ExperimentConfig, a: &PipelineArgs) -> Result<()> {
    let out = &a.out;
    io(out, std::fs::create_dir_all(out))?;
    let raw = match &a.raw {
        Some(r) => r.clone(),
        None => {
            let dir = out.join("synth");
            cmd_synth(
                cfg,
                &SynthArgs {
                    users: a.users,
                    items: a.items,
                    topics: a.topics,
                    sessions: a.sessions,
                    out: dir.clone(),
                },
            )?;
            dir.join("raw")
        }
    };
    let corpus_dir = out.join("corpus");
    let corpus = preprocess_files(
        &raw.join("events.tsv"),
        &raw.join("interactions.tsv"),
        &raw.join("catalog.tsv"),
        cfg.data,
        &corpus_dir,
    )?;
    let stage1 = out.join("pretrain");
    pretrain(cfg, &corpus, &stage1)?;
    let index_path = out.join("index.bin");
    build_index(cfg, &corpus, &stage1.join(THETA_K), &index_path)?;
    let ckpt = out.join("ckpt");
    train(cfg, &corpus, Some(&index_path), Some(&stage1), &ckpt)?;
    cmd_evaluate(
        global,
        &EvaluateArgs {
            ckpt,
            corpus: corpus_dir,
            index: Some(index_path),
            split: Split::Test,
            report: out.join("report.json"),
            ranks: None,
        },
    )?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let cfg = g.resolve(None)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(&cfg, a),
        Command::Preprocess(a) => cmd_preprocess(&cfg, a),
        Command::Pretrain { corpus, out } => pretrain(&cfg, &Corpus::load(corpus)?, out),
        Command::Index {
            corpus,
            checkpoint,
            mode,
            out,
        } => {
            let mut cfg = cfg;
            if let Some(m) = mode {
                cfg.retrieval.mode = *m;
            }
            build_index(&cfg, &Corpus::load(corpus)?, checkpoint, out).map(|_| ())
        }
        Command::Retrieve {
            index,
            corpus,
            checkpoint,
            query_user,
            k,
        } => cmd_retrieve(&cfg, index, corpus, checkpoint, query_user, *k),
        Command::Train(a) => train(&cfg, &Corpus::load(&a.corpus)?, a.index.as_deref(), a.pretrained.as_deref(), &a.out).map(|_| ()),
        Command::Ablate { corpus, out } => {
            let corpus = Corpus::load(corpus)?;
            let outcome = training::run_ablation(cfg.train.variant, &corpus, &cfg)?;
            io(out, std::fs::create_dir_all(out))?;
            let result = json!({
                "variant": outcome.variant,
                "best_epoch": outcome.best_epoch,
                "valid": outcome.valid,
                "test": outcome.test,
            });
            write_json(&out.join("run.json"), &run_json(&cfg, &outcome.history, result))?;
            println!(
                "{}\tndcg@10 {:.4}\thr@10 {:.4}",
                outcome.variant, outcome.test.ndcg_at_10, outcome.test.hr_at_10
            );
            Ok(())
        }
        Command::Evaluate(a) => cmd_evaluate(g, a).map(|_| ()),
        Command::Pipeline(a) => cmd_pipeline(g, &cfg, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
