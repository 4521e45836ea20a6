//! Flat `key = value` experiment configuration.
//!
//! Every tunable of every module lives under a dotted key. Unknown keys are
//! rejected, and the resolved configuration is serialized back out with each
//! run so results can be traced to their settings.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::augmentation::AugmentationConfig;
use crate::contrastive::ContrastiveConfig;
use crate::dataset::PreprocessConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, Reduction};
use crate::params::AdamConfig;
use crate::retrieval::RetrievalConfig;

/// Ablation variants of the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// No retrieval; the context vector is zero.
    NoRa,
    /// No memory bank and no momentum; batch negatives only.
    NoMc,
    /// No augmentation; views differ only by dropout.
    NoDa,
    /// Mean pooling instead of the attentive selector.
    NoAs,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NoRa, Variant::NoMc, Variant::NoDa, Variant::NoAs];
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_ra" => Ok(Variant::NoRa),
            "no_mc" => Ok(Variant::NoMc),
            "no_da" => Ok(Variant::NoDa),
            "no_as" => Ok(Variant::NoAs),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (full|no_ra|no_mc|no_da|no_as)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::NoRa => "no_ra",
            Variant::NoMc => "no_mc",
            Variant::NoDa => "no_da",
            Variant::NoAs => "no_as",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderHyper {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
}

impl Default for EncoderHyper {
    fn default() -> Self {
        EncoderHyper {
            dim: 128,
            layers: 2,
            heads: 2,
            ffn_mult: 1,
            dropout: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    /// Training prefixes per joint step.
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub stage1_epochs: usize,
    pub cf_reduction: Reduction,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 128,
            epochs: 500,
            patience: 20,
            stage1_epochs: 50,
            cf_reduction: Reduction::Mean,
            variant: Variant::Full,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub threads: usize,
    pub data: PreprocessConfig,
    pub encoder: EncoderHyper,
    pub aug: AugmentationConfig,
    pub cts: ContrastiveConfig,
    pub fusion: FusionConfig,
    pub retrieval: RetrievalConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            threads: 1,
            data: PreprocessConfig::default(),
            encoder: EncoderHyper::default(),
            aug: AugmentationConfig::default(),
            cts: ContrastiveConfig::default(),
            fusion: FusionConfig::default(),
            retrieval: RetrievalConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Every recognised key with a one-line description, in file order.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("seed", "seed of the single run-wide random generator"),
    ("threads", "worker threads (1 guarantees bitwise reproducibility)"),
    ("data.gap_hours", "inactivity gap that splits browsing sessions, in hours"),
    ("data.min_len", "minimum events per session and interactions per user"),
    ("data.max_len", "sequences are truncated to their most recent max_len items"),
    ("enc.dim", "hidden size d"),
    ("enc.layers", "transformer blocks"),
    ("enc.heads", "attention heads (must divide enc.dim)"),
    ("enc.ffn_mult", "feed-forward width as a multiple of enc.dim"),
    ("enc.dropout", "dropout rate during training"),
    ("aug.gamma", "mask probability per position"),
    ("aug.eta", "crop length ratio"),
    ("aug.mu", "reorder window ratio"),
    ("cts.tau", "InfoNCE temperature"),
    ("cts.bank_size", "memory bank capacity K"),
    ("cts.momentum", "key encoder momentum m"),
    ("cts.batch_size", "user sequences per contrastive step (N) and sessions enqueued per step"),
    ("fusion.k", "retrieved sessions per query"),
    ("fusion.selector", "attentive | mean"),
    ("fusion.normalize_scores", "softmax the retrieval scores before weighting contexts"),
    ("fusion.tie_item_embeddings", "score items with the encoder's input embeddings"),
    ("retrieval.mode", "exact | clustered"),
    ("retrieval.n_lists", "inverted lists for clustered mode (0 = sqrt(M))"),
    ("retrieval.n_probe", "lists scanned per clustered query"),
    ("retrieval.kmeans_iters", "Lloyd iterations when clustering the index"),
    ("train.lr", "Adam learning rate"),
    ("train.beta1", "Adam first-moment decay"),
    ("train.beta2", "Adam second-moment decay"),
    ("train.eps", "Adam epsilon"),
    ("train.batch_size", "training prefixes per joint step"),
    ("train.epochs", "maximum stage-2 epochs"),
    ("train.patience", "stage-2 epochs without validation ndcg@10 gain before stopping"),
    ("train.stage1_epochs", "contrastive pretraining epochs before the index is frozen"),
    ("train.cf_reduction", "mean | sum over the batch cross-entropy"),
    ("train.variant", "full | no_ra | no_mc | no_da | no_as"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            "data.gap_hours" => {
                let h: f64 = parse(key, v)?;
                if !(h > 0.0) {
                    return Err(Error::Config("data.gap_hours must be positive".into()));
                }
                self.data.gap_seconds = (h * 3600.0).round() as u64;
            }
            "data.min_len" => self.data.min_len = parse(key, v)?,
            "data.max_len" => self.data.max_len = parse(key, v)?,
            "enc.dim" => self.encoder.dim = parse(key, v)?,
            "enc.layers" => self.encoder.layers = parse(key, v)?,
            "enc.heads" => self.encoder.heads = parse(key, v)?,
            "enc.ffn_mult" => self.encoder.ffn_mult = parse(key, v)?,
            "enc.dropout" => self.encoder.dropout = parse(key, v)?,
            "aug.gamma" => self.aug.gamma = parse(key, v)?,
            "aug.eta" => self.aug.eta = parse(key, v)?,
            "aug.mu" => self.aug.mu = parse(key, v)?,
            "cts.tau" => self.cts.tau = parse(key, v)?,
            "cts.bank_size" => self.cts.bank_size = parse(key, v)?,
            "cts.momentum" => self.cts.momentum = parse(key, v)?,
            "cts.batch_size" => self.cts.batch_size = parse(key, v)?,
            "fusion.k" => self.fusion.k = parse(key, v)?,
            "fusion.selector" => self.fusion.selector = v.parse()?,
            "fusion.normalize_scores" => self.fusion.normalize_scores = parse_bool(key, v)?,
            "fusion.tie_item_embeddings" => self.fusion.tie_item_embeddings = parse_bool(key, v)?,
            "retrieval.mode" => self.retrieval.mode = v.parse()?,
            "retrieval.n_lists" => self.retrieval.n_lists = parse(key, v)?,
            "retrieval.n_probe" => self.retrieval.n_probe = parse(key, v)?,
            "retrieval.kmeans_iters" => self.retrieval.kmeans_iters = parse(key, v)?,
            "train.lr" => self.train.adam.lr = parse(key, v)?,
            "train.beta1" => self.train.adam.beta1 = parse(key, v)?,
            "train.beta2" => self.train.adam.beta2 = parse(key, v)?,
            "train.eps" => self.train.adam.eps = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.patience" => self.train.patience = parse(key, v)?,
            "train.stage1_epochs" => self.train.stage1_epochs = parse(key, v)?,
            "train.cf_reduction" => self.train.cf_reduction = v.parse()?,
            "train.variant" => self.train.variant = v.parse()?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Resolved `(key, value)` pairs in [`KEY_DOCS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("threads", self.threads.to_string()),
            ("data.gap_hours", (self.data.gap_seconds as f64 / 3600.0).to_string()),
            ("data.min_len", self.data.min_len.to_string()),
            ("data.max_len", self.data.max_len.to_string()),
            ("enc.dim", self.encoder.dim.to_string()),
            ("enc.layers", self.encoder.layers.to_string()),
            ("enc.heads", self.encoder.heads.to_string()),
            ("enc.ffn_mult", self.encoder.ffn_mult.to_string()),
            ("enc.dropout", self.encoder.dropout.to_string()),
            ("aug.gamma", self.aug.gamma.to_string()),
            ("aug.eta", self.aug.eta.to_string()),
            ("aug.mu", self.aug.mu.to_string()),
            ("cts.tau", self.cts.tau.to_string()),
            ("cts.bank_size", self.cts.bank_size.to_string()),
            ("cts.momentum", self.cts.momentum.to_string()),
            ("cts.batch_size", self.cts.batch_size.to_string()),
            ("fusion.k", self.fusion.k.to_string()),
            ("fusion.selector", self.fusion.selector.to_string()),
            ("fusion.normalize_scores", self.fusion.normalize_scores.to_string()),
            ("fusion.tie_item_embeddings", self.fusion.tie_item_embeddings.to_string()),
            ("retrieval.mode", self.retrieval.mode.to_string()),
            ("retrieval.n_lists", self.retrieval.n_lists.to_string()),
            ("retrieval.n_probe", self.retrieval.n_probe.to_string()),
            ("retrieval.kmeans_iters", self.retrieval.kmeans_iters.to_string()),
            ("train.lr", self.train.adam.lr.to_string()),
            ("train.beta1", self.train.adam.beta1.to_string()),
            ("train.beta2", self.train.adam.beta2.to_string()),
            ("train.eps", self.train.adam.eps.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.patience", self.train.patience.to_string()),
            ("train.stage1_epochs", self.train.stage1_epochs.to_string()),
            ("train.cf_reduction", self.train.cf_reduction.to_string()),
            ("train.variant", self.train.variant.to_string()),
        ]
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::parse_text(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Short stable digest of the resolved configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        if self.data.min_len == 0 || self.data.max_len < self.data.min_len {
            return Err(Error::Config("need 1 <= data.min_len <= data.max_len".into()));
        }
        self.encoder_config(1).validate()?;
        self.aug.validate()?;
        self.cts.validate()?;
        if self.fusion.k == 0 {
            return Err(Error::Config("fusion.k must be >= 1".into()));
        }
        if self.retrieval.n_probe == 0 {
            return Err(Error::Config("retrieval.n_probe must be >= 1".into()));
        }
        let t = &self.train;
        if t.epochs == 0 || t.patience == 0 || t.batch_size == 0 {
            return Err(Error::Config("train.epochs, train.patience and train.batch_size must be >= 1".into()));
        }
        if !(t.adam.lr >= 0.0) {
            return Err(Error::Config("train.lr must be non-negative".into()));
        }
        Ok(())
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            max_len: self.data.max_len,
            dim: self.encoder.dim,
            layers: self.encoder.layers,
            heads: self.encoder.heads,
            ffn_dim: self.encoder.dim * self.encoder.ffn_mult,
            dropout: self.encoder.dropout,
        }
    }

    pub fn retrieval_config(&self) -> RetrievalConfig {
        RetrievalConfig {
            seed: self.seed,
            ..self.retrieval
        }
    }

    /// Configuration with an ablation variant's wiring applied.
    pub fn with_variant(&self, variant: Variant) -> Self {
        let mut c = *self;
        c.train.variant = variant;
        c
    }

    pub fn help_text() -> String {
        let defaults = ExperimentConfig::default().entries();
        let width = KEY_DOCS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut s = String::new();
        for ((k, doc), (_, v)) in KEY_DOCS.iter().zip(defaults) {
            let _ = writeln!(s, "  {k:width$}  {doc} [default: {v}]");
        }
        s
    }
}
