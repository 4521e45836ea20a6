//! Two-stage training.
//!
//! Stage 1 pretrains the query encoder contrastively while the key encoder
//! follows by momentum and fills the memory bank with browsing sessions.
//! The key encoder then indexes every browsing session once. Stage 2 trains
//! the query encoder and fusion head jointly on next-item cross-entropy plus
//! the contrastive loss, retrieving from the frozen index at every step.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmentation::ViewPolicy;
use crate::config::{ExperimentConfig, Variant};
use crate::contrastive::{self, InfoNceOutput, MemoryBank};
use crate::dataset::{build_splits, Corpus, ItemId, ItemSequence, Split, SplitSpec};
use crate::encoder::{self, EncoderParams};
use crate::error::{Error, Result};
use crate::evaluation::{self, ItemScorer, RecommendationMetrics, UserRank};
use crate::fusion::{self, FusionConfig, FusionHead, ItemTable, Reduction, RetrievedSession, Selector};
use crate::linalg;
use crate::params::{Adam, Parameters};
use crate::retrieval::RetrievalIndex;

/// Examples per parallel work unit. Fixed so that gradient sums are
/// reduced in the same order regardless of thread count.
const CHUNK: usize = 8;

/// How a variant wires the model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wiring {
    pub retrieval: bool,
    pub policy: ViewPolicy,
    pub bank_size: usize,
    pub momentum: f64,
    pub selector: Selector,
}

impl Wiring {
    pub fn of(cfg: &ExperimentConfig) -> Self {
        let mut w = Wiring {
            retrieval: true,
            policy: ViewPolicy::Augment(cfg.aug),
            bank_size: cfg.cts.bank_size,
            momentum: cfg.cts.momentum,
            selector: cfg.fusion.selector,
        };
        match cfg.train.variant {
            Variant::Full => {}
            Variant::NoRa => w.retrieval = false,
            Variant::NoMc => {
                w.bank_size = 0;
                w.momentum = 0.0;
            }
            Variant::NoDa => w.policy = ViewPolicy::Identity,
            Variant::NoAs => w.selector = Selector::Mean,
        }
        w
    }
}

/// Per-position key-encoder states of every indexed session, computed once
/// when the index is attached.
#[derive(Clone, Debug)]
pub struct ContextStore {
    states: Vec<Vec<f64>>,
}

impl ContextStore {
    pub fn build(index: &RetrievalIndex, key_encoder: &EncoderParams) -> Result<Self> {
        let states = (0..index.len())
            .into_par_iter()
            .map(|row| Ok(encoder::encode_ids(key_encoder, index.session_items(row))?.per_position))
            .collect::<Result<_>>()?;
        Ok(ContextStore { states })
    }

    pub fn states(&self, row: usize) -> &[f64] {
        &self.states[row]
    }
}

/// Patience counter over a validation score that should increase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    /// 1-based; 0 before any observation.
    pub best_epoch: usize,
    pub since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            since_improvement: 0,
        }
    }

    /// Records the score of `epoch`; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, score: f64) -> (bool, bool) {
        if score > self.best {
            self.best = score;
            self.best_epoch = epoch;
            self.since_improvement = 0;
            (true, false)
        } else {
            self.since_improvement += 1;
            (false, self.since_improvement >= self.patience)
        }
    }
}

/// Scores items with the query encoder, optional retrieval and the head.
pub struct Model<'a> {
    pub theta_q: &'a EncoderParams,
    pub head: &'a FusionHead,
    pub retrieval: Option<(&'a RetrievalIndex, &'a ContextStore)>,
    pub fusion: FusionConfig,
}

impl Model<'_> {
    fn table(&self) -> ItemTable<'_> {
        item_table(self.theta_q, self.head, &self.fusion)
    }
}

impl ItemScorer for Model<'_> {
    fn score_items(&self, prefix: &[ItemId]) -> Result<Vec<f64>> {
        let max_len = self.theta_q.config.max_len;
        let prefix = &prefix[prefix.len().saturating_sub(max_len)..];
        let h = encoder::encode_ids(self.theta_q, prefix)?.pooled;
        let hits = match self.retrieval {
            Some((index, _)) => index.search(&linalg::l2_normalize(&h).0, self.fusion.k)?.hits,
            None => Vec::new(),
        };
        let retrieved: Vec<RetrievedSession<'_>> = hits
            .iter()
            .map(|hit| RetrievedSession {
                score: hit.score,
                states: self.retrieval.expect("hits imply an index").1.states(hit.row),
            })
            .collect();
        let trace = fusion::fusion_forward(&h, &retrieved, self.head, self.table(), &self.fusion);
        Ok(trace.prediction.logits)
    }
}

fn item_table<'a>(theta_q: &'a EncoderParams, head: &'a FusionHead, cfg: &FusionConfig) -> ItemTable<'a> {
    if cfg.tie_item_embeddings {
        ItemTable::of_embeddings(&theta_q.item_embeddings, theta_q.config.vocab_size)
    } else {
        ItemTable::of_head(head)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub cts_loss: f64,
    pub cf_loss: f64,
    pub valid_ndcg_at_10: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub cts: f64,
    pub cf: f64,
}

impl StepLosses {
    pub fn total(&self) -> f64 {
        self.cts + self.cf
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub theta_q: EncoderParams,
    pub theta_k: EncoderParams,
    pub head: FusionHead,
    pub bank: MemoryBank,
    pub opt_q: Adam,
    pub opt_head: Adam,
    pub stopping: EarlyStopping,
}

/// Contrastive loss and query-encoder gradients of one batch of sequences.
pub struct ContrastivePass {
    pub nce: InfoNceOutput,
    pub grads: EncoderParams,
}

/// InfoNCE over two views of each sequence against `bank`, with encoder
/// gradients. Views and dropout seeds are drawn from `rng` in order.
pub fn contrastive_pass<R: Rng + ?Sized>(
    theta_q: &EncoderParams,
    bank: &MemoryBank,
    seqs: &[&[ItemId]],
    policy: &ViewPolicy,
    tau: f64,
    rng: &mut R,
) -> Result<ContrastivePass> {
    let n = seqs.len();
    let mask_id = theta_q.config.mask_id();
    let mut views: Vec<ItemSequence> = Vec::with_capacity(2 * n);
    let mut partner = Vec::with_capacity(n);
    for s in seqs {
        let seq = ItemSequence::new(s.to_vec());
        views.push(policy.view(&seq, mask_id, rng));
        partner.push(policy.view(&seq, mask_id, rng));
    }
    views.extend(partner);
    let seeds: Vec<u64> = (0..2 * n).map(|_| rng.gen()).collect();

    let forwards = views
        .par_iter()
        .zip(&seeds)
        .map(|(v, &seed)| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            encoder::forward_train(theta_q, v.items(), Some(&mut r))
        })
        .collect::<Result<Vec<_>>>()?;
    let normalized: Vec<(Vec<f64>, f64)> = forwards.iter().map(|(e, _)| linalg::l2_normalize(&e.pooled)).collect();
    let z: Vec<&[f64]> = normalized.iter().map(|(v, _)| v.as_slice()).collect();
    let nce = contrastive::info_nce_loss(&z[..n], &z[n..], bank, tau)?;

    let partials: Vec<EncoderParams> = forwards
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut g = theta_q.zeros_like();
            for (j, (_, cache)) in chunk.iter().enumerate() {
                let i = c * CHUNK + j;
                let gz = if i < n { &nce.grad_a[i] } else { &nce.grad_b[i - n] };
                let (y, norm) = &normalized[i];
                let dh = linalg::l2_normalize_backward(y, *norm, gz);
                encoder::backward(theta_q, cache, &[], &dh, &mut g);
            }
            g
        })
        .collect();
    let mut grads = theta_q.zeros_like();
    for p in &partials {
        grads.accumulate(p);
    }
    Ok(ContrastivePass { nce, grads })
}

/// Next-item cross-entropy over a batch with retrieval and fusion.
pub struct CfPass {
    pub loss: f64,
    pub encoder_grads: EncoderParams,
    pub head_grads: FusionHead,
}

#[allow(clippy::too_many_arguments)]
pub fn cf_pass<R: Rng + ?Sized>(
    theta_q: &EncoderParams,
    head: &FusionHead,
    retrieval: Option<(&RetrievalIndex, &ContextStore)>,
    fusion_cfg: &FusionConfig,
    batch: &[(Vec<ItemId>, ItemId)],
    reduction: Reduction,
    rng: &mut R,
) -> Result<CfPass> {
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / batch.len().max(1) as f64,
    };
    let seeds: Vec<u64> = (0..batch.len()).map(|_| rng.gen()).collect();
    let table = item_table(theta_q, head, fusion_cfg);
    let d = theta_q.config.dim;

    let partials = batch
        .par_chunks(CHUNK)
        .zip(seeds.par_chunks(CHUNK))
        .map(|(chunk, seeds)| {
            let mut ge = theta_q.zeros_like();
            let mut gh = head.zeros_like();
            let mut d_table = vec![0.0; table.data.len()];
            let mut nll = 0.0;
            for ((prefix, target), &seed) in chunk.iter().zip(seeds) {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let (enc, cache) = encoder::forward_train(theta_q, prefix, Some(&mut r))?;
                let h = enc.pooled;
                let (hn, norm) = linalg::l2_normalize(&h);
                let hits = match retrieval {
                    Some((index, _)) => index.search(&hn, fusion_cfg.k)?.hits,
                    None => Vec::new(),
                };
                let retrieved: Vec<RetrievedSession<'_>> = hits
                    .iter()
                    .map(|hit| RetrievedSession {
                        score: hit.score,
                        states: retrieval.expect("hits imply an index").1.states(hit.row),
                    })
                    .collect();
                let t = *target as usize;
                let trace = fusion::fusion_forward(&h, &retrieved, head, table, fusion_cfg);
                nll -= trace.prediction.probs[t].max(1e-12).ln();
                let fg = fusion::fusion_backward(
                    &h, &retrieved, head, table, fusion_cfg, &trace, t, scale, &mut gh, &mut d_table,
                );
                let mut dh = fg.d_user;
                if let Some((index, _)) = retrieval {
                    let mut dhn = vec![0.0; d];
                    for (hit, ds) in hits.iter().zip(&fg.d_scores) {
                        linalg::axpy(*ds, index.vector(hit.row), &mut dhn);
                    }
                    linalg::add_assign(&mut dh, &linalg::l2_normalize_backward(&hn, norm, &dhn));
                }
                encoder::backward(theta_q, &cache, &[], &dh, &mut ge);
            }
            if fusion_cfg.tie_item_embeddings {
                linalg::add_assign(&mut ge.item_embeddings.data[..d_table.len()], &d_table);
            } else {
                linalg::add_assign(&mut gh.output_items.data, &d_table);
            }
            Ok((nll, ge, gh))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut loss = 0.0;
    let mut encoder_grads = theta_q.zeros_like();
    let mut head_grads = head.zeros_like();
    for (nll, ge, gh) in &partials {
        loss += nll;
        encoder_grads.accumulate(ge);
        head_grads.accumulate(gh);
    }
    Ok(CfPass {
        loss: loss * scale,
        encoder_grads,
        head_grads,
    })
}

/// Autoregressive examples: every prefix of each training sequence predicts
/// its next item. Prefixes keep their most recent `max_len` items.
pub fn prefix_examples(splits: &SplitSpec, max_len: usize) -> Vec<(Vec<ItemId>, ItemId)> {
    let mut out = Vec::new();
    for u in &splits.users {
        for i in 1..u.train.len() {
            let start = i.saturating_sub(max_len);
            out.push((u.train[start..i].to_vec(), u.train[i]));
        }
    }
    out
}

fn check_finite(what: &str, loss: f64, grads: &[(&str, Option<String>)]) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("{what}: loss is {loss}")));
    }
    for (name, bad) in grads {
        if let Some(t) = bad {
            return Err(Error::Divergence(format!("{what}: non-finite gradient in {name} tensor {t}")));
        }
    }
    Ok(())
}

/// Drives both stages over one corpus with one seeded generator.
pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub wiring: Wiring,
    pub state: TrainState,
    pub splits: SplitSpec,
    pub history: Vec<EpochRecord>,
    train_seqs: Vec<Vec<ItemId>>,
    browsing: Vec<ItemSequence>,
    browse_order: Vec<usize>,
    browse_cursor: usize,
    rng: ChaCha8Rng,
    index: Option<RetrievalIndex>,
    store: Option<ContextStore>,
    stage2_epochs: usize,
}

impl Trainer {
    /// Fresh parameters drawn from the run's seed; the key encoder starts
    /// as a copy of the query encoder.
    pub fn new(corpus: &Corpus, cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let theta_q = EncoderParams::init(cfg.encoder_config(corpus.vocab_size()), &mut rng)?;
        let theta_k = theta_q.clone();
        let head = FusionHead::init(
            cfg.encoder.dim,
            corpus.vocab_size(),
            cfg.fusion.tie_item_embeddings,
            &mut rng,
        );
        Self::assemble(corpus, cfg, theta_q, theta_k, head, rng)
    }

    /// Resumes from existing parameters.
    pub fn with_params(
        corpus: &Corpus,
        cfg: &ExperimentConfig,
        theta_q: EncoderParams,
        theta_k: EncoderParams,
        head: Option<FusionHead>,
    ) -> Result<Self> {
        cfg.validate()?;
        let expected = cfg.encoder_config(corpus.vocab_size());
        if theta_q.config != expected || theta_k.config != expected {
            return Err(Error::Config("encoder parameters do not match the configuration and corpus".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let head = match head {
            Some(h) => h,
            None => FusionHead::init(
                cfg.encoder.dim,
                corpus.vocab_size(),
                cfg.fusion.tie_item_embeddings,
                &mut rng,
            ),
        };
        Self::assemble(corpus, cfg, theta_q, theta_k, head, rng)
    }

    fn assemble(
        corpus: &Corpus,
        cfg: &ExperimentConfig,
        theta_q: EncoderParams,
        theta_k: EncoderParams,
        head: FusionHead,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        let max_len = cfg.data.max_len;
        let splits = build_splits(corpus);
        if splits.users.is_empty() {
            return Err(Error::Data("no user has enough interactions to train on".into()));
        }
        let train_seqs: Vec<Vec<ItemId>> = splits
            .users
            .iter()
            .map(|u| u.train[u.train.len().saturating_sub(max_len)..].to_vec())
            .collect();
        let browsing: Vec<ItemSequence> = corpus.browsing_sessions.iter().map(|s| s.truncated(max_len)).collect();
        let wiring = Wiring::of(cfg);
        let state = TrainState {
            bank: MemoryBank::new(wiring.bank_size, cfg.encoder.dim),
            theta_q,
            theta_k,
            head,
            opt_q: Adam::new(cfg.train.adam),
            opt_head: Adam::new(cfg.train.adam),
            stopping: EarlyStopping::new(cfg.train.patience),
        };
        Ok(Trainer {
            cfg: *cfg,
            wiring,
            state,
            splits,
            history: Vec::new(),
            train_seqs,
            browse_order: (0..browsing.len()).collect(),
            browsing,
            browse_cursor: usize::MAX,
            rng,
            index: None,
            store: None,
            stage2_epochs: 0,
        })
    }

    pub fn index(&self) -> Option<&RetrievalIndex> {
        self.index.as_ref()
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Encodes the next batch of browsing sessions with the key encoder and
    /// pushes them into the bank.
    fn enqueue_browsing(&mut self) -> Result<()> {
        if self.state.bank.capacity() == 0 || self.browsing.is_empty() {
            return Ok(());
        }
        let mut batch = Vec::with_capacity(self.cfg.cts.batch_size);
        for _ in 0..self.cfg.cts.batch_size.min(self.browsing.len()) {
            if self.browse_cursor >= self.browse_order.len() {
                self.browse_order.shuffle(&mut self.rng);
                self.browse_cursor = 0;
            }
            batch.push(self.browsing[self.browse_order[self.browse_cursor]].clone());
            self.browse_cursor += 1;
        }
        let rows: Vec<Vec<f64>> = encoder::encode_batch(&self.state.theta_k, &batch)?
            .into_iter()
            .map(|e| linalg::l2_normalize(&e.pooled).0)
            .collect();
        self.state.bank.enqueue(&rows)
    }

    /// Optimizer update that is undone if it leaves any parameter
    /// non-finite, so a diverging run keeps its last good state.
    fn apply(&mut self, what: &str, grads: &EncoderParams, head_grads: Option<&FusionHead>) -> Result<()> {
        let saved = (
            self.state.theta_q.clone(),
            self.state.opt_q.clone(),
            self.state.head.clone(),
            self.state.opt_head.clone(),
        );
        self.state.opt_q.step(&mut self.state.theta_q, grads);
        if let Some(g) = head_grads {
            self.state.opt_head.step(&mut self.state.head, g);
        }
        let bad = self
            .state
            .theta_q
            .first_non_finite()
            .or_else(|| self.state.head.first_non_finite());
        if let Some(t) = bad {
            (self.state.theta_q, self.state.opt_q, self.state.head, self.state.opt_head) = saved;
            return Err(Error::Divergence(format!("{what}: update made tensor {t} non-finite")));
        }
        Ok(())
    }

    fn after_step(&mut self) -> Result<()> {
        contrastive::momentum_update(&self.state.theta_q, &mut self.state.theta_k, self.wiring.momentum)?;
        self.enqueue_browsing()
    }

    /// One stage-1 step on the given sequences; returns the summed InfoNCE.
    pub fn stage1_step(&mut self, batch: &[&[ItemId]]) -> Result<f64> {
        let pass = contrastive_pass(
            &self.state.theta_q,
            &self.state.bank,
            batch,
            &self.wiring.policy,
            self.cfg.cts.tau,
            &mut self.rng,
        )?;
        check_finite(
            "contrastive step",
            pass.nce.loss,
            &[("encoder", pass.grads.first_non_finite())],
        )?;
        self.apply("contrastive step", &pass.grads, None)?;
        self.after_step()?;
        Ok(pass.nce.loss)
    }

    /// One pass over all training sequences; returns the mean step loss.
    pub fn stage1_epoch(&mut self) -> Result<f64> {
        let mut order: Vec<usize> = (0..self.train_seqs.len()).collect();
        order.shuffle(&mut self.rng);
        let seqs = std::mem::take(&mut self.train_seqs);
        let mut total = 0.0;
        let mut steps = 0;
        let result = (|| {
            for ids in order.chunks(self.cfg.cts.batch_size) {
                let batch: Vec<&[ItemId]> = ids.iter().map(|&i| seqs[i].as_slice()).collect();
                total += self.stage1_step(&batch)?;
                steps += 1;
            }
            Ok(())
        })();
        self.train_seqs = seqs;
        result?;
        Ok(total / steps.max(1) as f64)
    }

    /// Runs all stage-1 epochs.
    pub fn pretrain(&mut self) -> Result<()> {
        for epoch in 0..self.cfg.train.stage1_epochs {
            let loss = self.stage1_epoch()?;
            info!("stage 1 epoch {epoch}: contrastive loss {loss:.4}");
            self.history.push(EpochRecord {
                stage: 1,
                epoch,
                cts_loss: loss,
                ..EpochRecord::default()
            });
        }
        Ok(())
    }

    /// Indexes every browsing session with the current key encoder.
    pub fn build_index(&self) -> Result<RetrievalIndex> {
        RetrievalIndex::build(&self.browsing, &self.state.theta_k, &self.cfg.retrieval_config())
    }

    /// Freezes `index` for stage 2. Session states come from the current
    /// key encoder, which must be the one that built the index. The memory
    /// bank is emptied and refilled from scratch.
    pub fn attach_index(&mut self, index: RetrievalIndex) -> Result<()> {
        if index.dim() != self.cfg.encoder.dim {
            return Err(Error::Config(format!(
                "index dimension {} does not match encoder dimension {}",
                index.dim(),
                self.cfg.encoder.dim
            )));
        }
        self.attach_index_with(index, &self.state.theta_k.clone())
    }

    /// As [`Trainer::attach_index`], with an explicit index-time encoder.
    pub fn attach_index_with(&mut self, index: RetrievalIndex, key_encoder: &EncoderParams) -> Result<()> {
        self.store = Some(ContextStore::build(&index, key_encoder)?);
        self.index = Some(index);
        self.state.bank.clear();
        Ok(())
    }

    fn retrieval(&self) -> Option<(&RetrievalIndex, &ContextStore)> {
        if !self.wiring.retrieval {
            return None;
        }
        Some((self.index.as_ref()?, self.store.as_ref()?))
    }

    fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            selector: self.wiring.selector,
            ..self.cfg.fusion
        }
    }

    /// One joint step: cross-entropy over `batch` plus InfoNCE over views of
    /// the same prefixes.
    pub fn joint_step(&mut self, batch: &[(Vec<ItemId>, ItemId)]) -> Result<StepLosses> {
        if self.wiring.retrieval && self.index.is_none() {
            return Err(Error::Config("stage 2 with retrieval needs an attached index".into()));
        }
        let fusion_cfg = self.fusion_config();
        let mut rng = std::mem::replace(&mut self.rng, ChaCha8Rng::seed_from_u64(0));
        let cf = cf_pass(
            &self.state.theta_q,
            &self.state.head,
            self.retrieval(),
            &fusion_cfg,
            batch,
            self.cfg.train.cf_reduction,
            &mut rng,
        );
        let seqs: Vec<&[ItemId]> = batch.iter().map(|(p, _)| p.as_slice()).collect();
        let cts = contrastive_pass(
            &self.state.theta_q,
            &self.state.bank,
            &seqs,
            &self.wiring.policy,
            self.cfg.cts.tau,
            &mut rng,
        );
        self.rng = rng;
        let (cf, cts) = (cf?, cts?);

        let mut grads = cts.grads;
        grads.accumulate(&cf.encoder_grads);
        let losses = StepLosses {
            cts: cts.nce.loss,
            cf: cf.loss,
        };
        check_finite(
            "joint step",
            losses.total(),
            &[("encoder", grads.first_non_finite()), ("head", cf.head_grads.first_non_finite())],
        )?;
        self.apply("joint step", &grads, Some(&cf.head_grads))?;
        self.after_step()?;
        Ok(losses)
    }

    /// One pass over every training prefix; returns mean step losses.
    pub fn stage2_epoch(&mut self) -> Result<StepLosses> {
        let mut examples = prefix_examples(&self.splits, self.cfg.data.max_len);
        examples.shuffle(&mut self.rng);
        let mut sum = StepLosses::default();
        let mut steps = 0;
        for batch in examples.chunks(self.cfg.train.batch_size) {
            let l = self.joint_step(batch)?;
            sum.cts += l.cts;
            sum.cf += l.cf;
            steps += 1;
        }
        let s = steps.max(1) as f64;
        Ok(StepLosses {
            cts: sum.cts / s,
            cf: sum.cf / s,
        })
    }

    /// Stage 2 with early stopping on validation ndcg@10. The best state is
    /// restored at the end.
    pub fn train(&mut self) -> Result<()> {
        let mut best: Option<(EncoderParams, EncoderParams, FusionHead)> = None;
        for _ in 0..self.cfg.train.epochs {
            let losses = self.stage2_epoch()?;
            self.stage2_epochs += 1;
            let epoch = self.stage2_epochs;
            let (valid, _) = self.evaluate(Split::Valid)?;
            info!(
                "stage 2 epoch {epoch}: cts {:.4} cf {:.4} valid ndcg@10 {:.4}",
                losses.cts, losses.cf, valid.ndcg_at_10
            );
            self.history.push(EpochRecord {
                stage: 2,
                epoch,
                cts_loss: losses.cts,
                cf_loss: losses.cf,
                valid_ndcg_at_10: Some(valid.ndcg_at_10),
            });
            let (improved, stop) = self.state.stopping.observe(epoch, valid.ndcg_at_10);
            if improved {
                best = Some((
                    self.state.theta_q.clone(),
                    self.state.theta_k.clone(),
                    self.state.head.clone(),
                ));
            }
            if stop {
                debug!("early stop after epoch {epoch}");
                break;
            }
        }
        if let Some((q, k, h)) = best {
            self.state.theta_q = q;
            self.state.theta_k = k;
            self.state.head = h;
        }
        Ok(())
    }

    pub fn model(&self) -> Model<'_> {
        Model {
            theta_q: &self.state.theta_q,
            head: &self.state.head,
            retrieval: self.retrieval(),
            fusion: self.fusion_config(),
        }
    }

    pub fn evaluate(&self, split: Split) -> Result<(RecommendationMetrics, Vec<UserRank>)> {
        evaluation::evaluate_recommendation(&self.model(), &self.splits.examples(split))
    }
}

/// Stage 1 alone; returns `(θ_q, θ_k)`.
pub fn pretrain_stage1(corpus: &Corpus, cfg: &ExperimentConfig) -> Result<(EncoderParams, EncoderParams)> {
    let mut t = Trainer::new(corpus, cfg)?;
    t.pretrain()?;
    Ok((t.state.theta_q, t.state.theta_k))
}

/// Result of one full run of a variant.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub variant: String,
    pub best_epoch: usize,
    pub valid: RecommendationMetrics,
    pub test: RecommendationMetrics,
    pub history: Vec<EpochRecord>,
}

/// Pretrain, index, train and evaluate one variant end to end.
pub fn run_ablation(variant: Variant, corpus: &Corpus, cfg: &ExperimentConfig) -> Result<AblationOutcome> {
    let cfg = cfg.with_variant(variant);
    let mut t = Trainer::new(corpus, &cfg)?;
    t.pretrain()?;
    if t.wiring.retrieval {
        let index = t.build_index()?;
        t.attach_index(index)?;
    } else {
        t.state.bank.clear();
    }
    t.train()?;
    let (valid, _) = t.evaluate(Split::Valid)?;
    let (test, _) = t.evaluate(Split::Test)?;
    Ok(AblationOutcome {
        variant: variant.to_string(),
        best_epoch: t.state.stopping.best_epoch,
        valid,
        test,
        history: t.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_trace() {
        let mut es = EarlyStopping::new(20);
        let mut scores = vec![0.10, 0.11];
        scores.extend(std::iter::repeat(0.11).take(40));
        let mut stopped_at = None;
        for (i, s) in scores.iter().enumerate() {
            if es.observe(i + 1, *s).1 {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(22));
        assert_eq!(es.best_epoch, 2);
    }

    #[test]
    fn variants_rewire() {
        let base = ExperimentConfig::default();
        let w = Wiring::of(&base.with_variant(Variant::NoMc));
        assert_eq!((w.bank_size, w.momentum), (0, 0.0));
        assert!(!Wiring::of(&base.with_variant(Variant::NoRa)).retrieval);
        assert_eq!(Wiring::of(&base.with_variant(Variant::NoDa)).policy, ViewPolicy::Identity);
        assert_eq!(Wiring::of(&base.with_variant(Variant::NoAs)).selector, Selector::Mean);
        let full = Wiring::of(&base);
        assert!(full.retrieval);
        assert_eq!(full.selector, Selector::Attentive);
        assert_eq!(full.bank_size, base.cts.bank_size);
    }

    #[test]
    fn prefixes_unroll_training_sequence() {
        let splits = SplitSpec {
            users: vec![crate::dataset::UserSplit {
                user: "u".into(),
                train: vec![1, 2, 3, 4],
                valid_target: 5,
                test_target: 6,
            }],
        };
        let ex = prefix_examples(&splits, 2);
        assert_eq!(ex, vec![(vec![1], 2), (vec![1, 2], 3), (vec![2, 3], 4)]);
    }
}
