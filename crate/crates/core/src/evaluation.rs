//! Leave-one-out ranking metrics and the retrieval self-task.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmentation::ViewPolicy;
use crate::dataset::{ItemId, ItemSequence};
use crate::encoder::{self, EncoderParams};
use crate::error::{Error, Result};
use crate::linalg::{self, dot};

/// 1 if the target sits within the top `k`.
pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    assert!(rank >= 1, "ranks are 1-based");
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

/// Single-relevant-item NDCG: `1 / log2(rank + 1)` inside the cutoff.
pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    assert!(rank >= 1, "ranks are 1-based");
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// 1-based rank of `target` under descending scores; equal scores rank the
/// lower item id first.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    let mut rank = 1;
    for (j, &s) in scores.iter().enumerate() {
        if s > t || (s == t && j < target) {
            rank += 1;
        }
    }
    rank
}

/// Anything that can score every item given a history prefix.
pub trait ItemScorer: Sync {
    fn score_items(&self, prefix: &[ItemId]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRank {
    pub user: usize,
    pub target: ItemId,
    pub rank: usize,
}

/// Averaged recommendation metrics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecommendationMetrics {
    pub hr_at_5: f64,
    pub hr_at_10: f64,
    pub ndcg_at_5: f64,
    pub ndcg_at_10: f64,
    pub n_users: usize,
}

impl RecommendationMetrics {
    pub fn from_ranks(ranks: &[usize]) -> Self {
        let n = ranks.len();
        if n == 0 {
            return RecommendationMetrics::default();
        }
        let mean = |f: &dyn Fn(usize) -> f64| ranks.iter().map(|&r| f(r)).sum::<f64>() / n as f64;
        RecommendationMetrics {
            hr_at_5: mean(&|r| hr_at_k(r, 5)),
            hr_at_10: mean(&|r| hr_at_k(r, 10)),
            ndcg_at_5: mean(&|r| ndcg_at_k(r, 5)),
            ndcg_at_10: mean(&|r| ndcg_at_k(r, 10)),
            n_users: n,
        }
    }
}

/// Ranks each held-out target among all items.
pub fn evaluate_recommendation<S: ItemScorer>(
    scorer: &S,
    examples: &[(Vec<ItemId>, ItemId)],
) -> Result<(RecommendationMetrics, Vec<UserRank>)> {
    let ranks: Vec<UserRank> = examples
        .par_iter()
        .enumerate()
        .map(|(user, (prefix, target))| {
            let scores = scorer.score_items(prefix)?;
            if *target as usize >= scores.len() {
                return Err(Error::Input(format!("target {target} outside {} items", scores.len())));
            }
            Ok(UserRank {
                user,
                target: *target,
                rank: rank_of(&scores, *target as usize),
            })
        })
        .collect::<Result<_>>()?;
    let raw: Vec<usize> = ranks.iter().map(|r| r.rank).collect();
    Ok((RecommendationMetrics::from_ranks(&raw), ranks))
}

pub fn dump_ranks(path: &Path, ranks: &[UserRank]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    writeln!(w, "user\ttarget\trank").map_err(|e| Error::io(path, e))?;
    for r in ranks {
        writeln!(w, "{}\t{}\t{}", r.user, r.target, r.rank).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Hit ratios of the retrieval self-task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    /// `k → hr@k`.
    pub hit_ratio: BTreeMap<usize, f64>,
    pub n_queries: usize,
    pub n_distractors: usize,
}

/// For each user sequence, an augmented view is embedded with the key
/// encoder and hidden among all browsing-session embeddings; the query is
/// the original sequence under the query encoder. A hit means the view
/// ranks within the top `k`. Ties count against the view.
pub fn evaluate_retrieval<R: Rng + ?Sized>(
    theta_q: &EncoderParams,
    theta_k: &EncoderParams,
    user_sequences: &[ItemSequence],
    browsing_sessions: &[ItemSequence],
    policy: &ViewPolicy,
    k_list: &[usize],
    rng: &mut R,
) -> Result<RetrievalMetrics> {
    let max_len = theta_q.config.max_len;
    let distractors: Vec<Vec<f64>> = encoder::encode_batch(theta_k, browsing_sessions)?
        .into_iter()
        .map(|e| linalg::l2_normalize(&e.pooled).0)
        .collect();
    let mask_id = theta_q.config.mask_id();
    let views: Vec<ItemSequence> = user_sequences
        .iter()
        .map(|s| policy.view(&s.truncated(max_len), mask_id, rng))
        .collect();
    let queries: Vec<ItemSequence> = user_sequences.iter().map(|s| s.truncated(max_len)).collect();

    let ranks: Vec<usize> = queries
        .par_iter()
        .zip(views.par_iter())
        .map(|(q, v)| {
            let hq = linalg::l2_normalize(&encoder::encode(theta_q, q)?.pooled).0;
            let hv = linalg::l2_normalize(&encoder::encode(theta_k, v)?.pooled).0;
            let target = dot(&hq, &hv);
            Ok(1 + distractors.iter().filter(|d| dot(&hq, d) >= target).count())
        })
        .collect::<Result<_>>()?;

    let n = ranks.len();
    let hit_ratio = k_list
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|&&r| r <= k).count();
            (k, if n == 0 { 0.0 } else { hits as f64 / n as f64 })
        })
        .collect();
    Ok(RetrievalMetrics {
        hit_ratio,
        n_queries: n,
        n_distractors: browsing_sessions.len(),
    })
}
