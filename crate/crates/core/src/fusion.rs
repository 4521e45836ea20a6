//! Item-level attentive selection over retrieved sessions, score-weighted
//! context aggregation, and the MLP next-item predictor.
//!
//! For the user state `h` and the per-position states `h_j` of a retrieved
//! session, the selector computes scalar logits `w1·h + w2·h_j`, softmaxes
//! them over the session, and returns the weighted state `o_i`. Contexts are
//! summed with the raw retrieval scores into `o`, and the predictor scores
//! item `j` as `w_j · MLP(h ∥ o)` where the MLP is `2d → d → d` with a tanh
//! hidden layer.

use log::warn;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, dot, linear, linear_backward};
use crate::params::{Parameters, Tensor};

const MIN_PROB: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selector {
    Attentive,
    /// Plain average of the session states.
    Mean,
}

impl std::str::FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attentive" => Ok(Selector::Attentive),
            "mean" => Ok(Selector::Mean),
            other => Err(Error::Config(format!("unknown selector {other:?} (attentive|mean)"))),
        }
    }
}

impl std::fmt::Display for Selector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Selector::Attentive => "attentive",
            Selector::Mean => "mean",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            other => Err(Error::Config(format!("unknown reduction {other:?} (sum|mean)"))),
        }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    pub k: usize,
    pub selector: Selector,
    pub normalize_scores: bool,
    pub tie_item_embeddings: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            k: 10,
            selector: Selector::Attentive,
            normalize_scores: false,
            tie_item_embeddings: false,
        }
    }
}

/// Selector projections, MLP and output item table.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionHead {
    pub dim: usize,
    /// Applied to the user state.
    pub attn_user: Tensor,
    /// Applied to each retrieved item state.
    pub attn_item: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
    /// `|V| × d`, or `0 × d` when the encoder's item table is reused.
    pub output_items: Tensor,
}

impl Parameters for FusionHead {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("selector.user".into(), &self.attn_user),
            ("selector.item".into(), &self.attn_item),
            ("mlp.w1".into(), &self.mlp_w1),
            ("mlp.b1".into(), &self.mlp_b1),
            ("mlp.w2".into(), &self.mlp_w2),
            ("mlp.b2".into(), &self.mlp_b2),
            ("output_items".into(), &self.output_items),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("selector.user".into(), &mut self.attn_user),
            ("selector.item".into(), &mut self.attn_item),
            ("mlp.w1".into(), &mut self.mlp_w1),
            ("mlp.b1".into(), &mut self.mlp_b1),
            ("mlp.w2".into(), &mut self.mlp_w2),
            ("mlp.b2".into(), &mut self.mlp_b2),
            ("output_items".into(), &mut self.output_items),
        ]
    }
}

impl FusionHead {
    pub fn init<R: Rng + ?Sized>(dim: usize, vocab_size: usize, tied: bool, rng: &mut R) -> Self {
        let d = dim;
        let out_rows = if tied { 0 } else { vocab_size };
        FusionHead {
            dim,
            attn_user: Tensor::randn(&[d], 0.1, rng),
            attn_item: Tensor::randn(&[d], 0.1, rng),
            mlp_w1: Tensor::randn(&[2 * d, d], 1.0 / (2.0 * d as f64).sqrt(), rng),
            mlp_b1: Tensor::zeros(&[d]),
            mlp_w2: Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), rng),
            mlp_b2: Tensor::zeros(&[d]),
            output_items: Tensor::randn(&[out_rows, d], 1.0 / (d as f64).sqrt(), rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero();
        g
    }
}

/// Output of the selector for one retrieved session.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub weights: Vec<f64>,
    pub context: Vec<f64>,
}

/// Selector over a session's `len × d` states.
pub fn attentive_select(h_u: &[f64], states: &[f64], head: &FusionHead, selector: Selector) -> Selection {
    let d = head.dim;
    let len = states.len() / d;
    assert!(len >= 1, "retrieved session has no states");
    let weights = match selector {
        Selector::Attentive => {
            let user_term = dot(&head.attn_user.data, h_u);
            let mut logits: Vec<f64> = states
                .chunks_exact(d)
                .map(|s| user_term + dot(&head.attn_item.data, s))
                .collect();
            linalg::softmax_in_place(&mut logits);
            logits
        }
        Selector::Mean => vec![1.0 / len as f64; len],
    };
    let mut context = vec![0.0; d];
    for (a, s) in weights.iter().zip(states.chunks_exact(d)) {
        linalg::axpy(*a, s, &mut context);
    }
    Selection { weights, context }
}

/// Coefficients applied to each `o_i`: the raw scores, or their softmax.
pub fn score_weights(scores: &[f64], normalize: bool) -> Vec<f64> {
    let mut w = scores.to_vec();
    if normalize && !w.is_empty() {
        linalg::softmax_in_place(&mut w);
    }
    w
}

/// `o = Σ_i s_i · o_i`. Zero vector when nothing was retrieved.
pub fn aggregate_context(scores: &[f64], per_sequence: &[Vec<f64>], dim: usize, normalize: bool) -> Result<Vec<f64>> {
    if scores.len() != per_sequence.len() {
        return Err(Error::Input(format!(
            "{} scores for {} contexts",
            scores.len(),
            per_sequence.len()
        )));
    }
    let mut o = vec![0.0; dim];
    for (w, oi) in score_weights(scores, normalize).iter().zip(per_sequence) {
        linalg::axpy(*w, oi, &mut o);
    }
    Ok(o)
}

/// Item table the predictor scores against: `rows × d`, row-major.
#[derive(Clone, Copy, Debug)]
pub struct ItemTable<'a> {
    pub data: &'a [f64],
    pub rows: usize,
}

impl<'a> ItemTable<'a> {
    pub fn of_head(head: &'a FusionHead) -> Self {
        ItemTable {
            data: &head.output_items.data,
            rows: head.output_items.shape[0],
        }
    }

    /// First `vocab` rows of an encoder item table (skipping the mask row).
    pub fn of_embeddings(emb: &'a Tensor, vocab: usize) -> Self {
        ItemTable {
            data: &emb.data[..vocab * emb.shape[1]],
            rows: vocab,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    input: Vec<f64>,
    hidden: Vec<f64>,
    out: Vec<f64>,
}

/// `softmax_j(w_j · MLP(h_u ∥ o))` over every item in the table.
pub fn predict(h_u: &[f64], o: &[f64], head: &FusionHead, table: ItemTable<'_>) -> Prediction {
    let d = head.dim;
    let mut input = Vec::with_capacity(2 * d);
    input.extend_from_slice(h_u);
    input.extend_from_slice(o);
    let mut hidden = linear(&input, 1, 2 * d, &head.mlp_w1.data, Some(&head.mlp_b1.data), d);
    hidden.iter_mut().for_each(|v| *v = v.tanh());
    let out = linear(&hidden, 1, d, &head.mlp_w2.data, Some(&head.mlp_b2.data), d);
    let logits: Vec<f64> = table.data.chunks_exact(d).map(|w| dot(w, &out)).collect();
    let mut probs = logits.clone();
    linalg::softmax_in_place(&mut probs);
    Prediction {
        logits,
        probs,
        input,
        hidden,
        out,
    }
}

/// Cross-entropy of the target probabilities, clamped at 1e-12.
pub fn cf_loss(predictions: &[Vec<f64>], targets: &[usize], reduction: Reduction) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::Input("predictions and targets differ in length".into()));
    }
    let mut total = 0.0;
    for (p, &t) in predictions.iter().zip(targets) {
        let pt = *p
            .get(t)
            .ok_or_else(|| Error::Input(format!("target {t} outside {} items", p.len())))?;
        if pt < MIN_PROB {
            warn!("target probability {pt:e} clamped to {MIN_PROB:e}");
        }
        total -= pt.max(MIN_PROB).ln();
    }
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean if targets.is_empty() => 0.0,
        Reduction::Mean => total / targets.len() as f64,
    })
}

/// One retrieved session as seen by the head: retrieval score and the
/// session's `len × d` per-position states.
#[derive(Clone, Copy, Debug)]
pub struct RetrievedSession<'a> {
    pub score: f64,
    pub states: &'a [f64],
}

/// Everything the forward pass of one example produced.
#[derive(Clone, Debug)]
pub struct FusionTrace {
    pub selections: Vec<Selection>,
    pub weights: Vec<f64>,
    pub context: Vec<f64>,
    pub prediction: Prediction,
}

pub fn fusion_forward(
    h_u: &[f64],
    retrieved: &[RetrievedSession<'_>],
    head: &FusionHead,
    table: ItemTable<'_>,
    config: &FusionConfig,
) -> FusionTrace {
    let d = head.dim;
    let selections: Vec<Selection> = retrieved
        .iter()
        .map(|r| attentive_select(h_u, r.states, head, config.selector))
        .collect();
    let scores: Vec<f64> = retrieved.iter().map(|r| r.score).collect();
    let weights = score_weights(&scores, config.normalize_scores);
    let mut context = vec![0.0; d];
    for (w, s) in weights.iter().zip(&selections) {
        linalg::axpy(*w, &s.context, &mut context);
    }
    let prediction = predict(h_u, &context, head, table);
    FusionTrace {
        selections,
        weights,
        context,
        prediction,
    }
}

/// Gradients of one example's `scale · (−log p_target)`.
#[derive(Clone, Debug)]
pub struct FusionGrads {
    pub d_user: Vec<f64>,
    /// Gradient w.r.t. each raw retrieval score.
    pub d_scores: Vec<f64>,
}

/// Reverse pass of [`fusion_forward`] followed by cross-entropy against
/// `target`. Head gradients go into `grads`; item-table gradients into
/// `d_table` (same layout as the table).
#[allow(clippy::too_many_arguments)]
pub fn fusion_backward(
    h_u: &[f64],
    retrieved: &[RetrievedSession<'_>],
    head: &FusionHead,
    table: ItemTable<'_>,
    config: &FusionConfig,
    trace: &FusionTrace,
    target: usize,
    scale: f64,
    grads: &mut FusionHead,
    d_table: &mut [f64],
) -> FusionGrads {
    let d = head.dim;
    let pred = &trace.prediction;

    let mut dout = vec![0.0; d];
    for (j, (w, dt)) in table.data.chunks_exact(d).zip(d_table.chunks_exact_mut(d)).enumerate() {
        let g = scale * (pred.probs[j] - if j == target { 1.0 } else { 0.0 });
        if g != 0.0 {
            linalg::axpy(g, &pred.out, dt);
            linalg::axpy(g, w, &mut dout);
        }
    }
    let dhidden = linear_backward(
        &pred.hidden,
        1,
        d,
        &head.mlp_w2.data,
        d,
        &dout,
        &mut grads.mlp_w2.data,
        Some(&mut grads.mlp_b2.data),
    );
    let dpre: Vec<f64> = dhidden.iter().zip(&pred.hidden).map(|(g, h)| g * (1.0 - h * h)).collect();
    let dinput = linear_backward(
        &pred.input,
        1,
        2 * d,
        &head.mlp_w1.data,
        d,
        &dpre,
        &mut grads.mlp_w1.data,
        Some(&mut grads.mlp_b1.data),
    );
    let mut d_user = dinput[..d].to_vec();
    let dctx = &dinput[d..];

    let dweights: Vec<f64> = trace.selections.iter().map(|s| dot(dctx, &s.context)).collect();
    let d_scores = if config.normalize_scores {
        let s = dot(&trace.weights, &dweights);
        trace.weights.iter().zip(&dweights).map(|(w, g)| w * (g - s)).collect()
    } else {
        dweights
    };

    if config.selector == Selector::Attentive {
        let mut total_dlogit = 0.0;
        for ((sel, r), &w) in trace.selections.iter().zip(retrieved).zip(&trace.weights) {
            let dalpha: Vec<f64> = r.states.chunks_exact(d).map(|s| w * dot(dctx, s)).collect();
            let s = dot(&sel.weights, &dalpha);
            for ((a, ga), st) in sel.weights.iter().zip(&dalpha).zip(r.states.chunks_exact(d)) {
                let dl = a * (ga - s);
                total_dlogit += dl;
                linalg::axpy(dl, st, &mut grads.attn_item.data);
            }
        }
        linalg::axpy(total_dlogit, h_u, &mut grads.attn_user.data);
        linalg::axpy(total_dlogit, &head.attn_user.data, &mut d_user);
    }

    FusionGrads { d_user, d_scores }
}
