//! Bidirectional transformer sequence encoder with a hand-written backward
//! pass.
//!
//! Layout per block (pre-LN):
//!
//! ```text
//! x  <- x + drop(MHA(LN1(x)))
//! x  <- x + drop(W2 · gelu(W1 · LN2(x) + b1) + b2)
//! ```
//!
//! followed by a final layer norm. Attention is unmasked except for padding:
//! every valid position attends to every other valid position. The pooled
//! representation is the final hidden state of the last valid position.

use rand::Rng;
use rayon::prelude::*;

use crate::dataset::{ItemId, ItemSequence};
use crate::error::{Error, Result};
use crate::linalg::{self, dot, gelu, gelu_grad, linear, linear_backward};
use crate::params::{Parameters, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Number of real items; id `vocab_size` is the mask token.
    pub vocab_size: usize,
    pub max_len: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn mask_id(&self) -> ItemId {
        self.vocab_size as ItemId
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "enc.dim ({}) must be a positive multiple of enc.heads ({})",
                self.dim, self.heads
            )));
        }
        if self.max_len == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("max_len and ffn_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("enc.dropout {} not in [0,1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl LayerParams {
    fn init<R: Rng + ?Sized>(d: usize, f: usize, rng: &mut R) -> Self {
        let sd = 1.0 / (d as f64).sqrt();
        let sf = 1.0 / (f as f64).sqrt();
        LayerParams {
            ln1_gain: Tensor::filled(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            wq: Tensor::randn(&[d, d], sd, rng),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::randn(&[d, d], sd, rng),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::randn(&[d, d], sd, rng),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::randn(&[d, d], sd, rng),
            bo: Tensor::zeros(&[d]),
            ln2_gain: Tensor::filled(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
            w1: Tensor::randn(&[d, f], sd, rng),
            b1: Tensor::zeros(&[f]),
            w2: Tensor::randn(&[f, d], sf, rng),
            b2: Tensor::zeros(&[d]),
        }
    }

    fn named(&self) -> [(&'static str, &Tensor); 16] {
        [
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("attn.wq", &self.wq),
            ("attn.bq", &self.bq),
            ("attn.wk", &self.wk),
            ("attn.bk", &self.bk),
            ("attn.wv", &self.wv),
            ("attn.bv", &self.bv),
            ("attn.wo", &self.wo),
            ("attn.bo", &self.bo),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
            ("ffn.w1", &self.w1),
            ("ffn.b1", &self.b1),
            ("ffn.w2", &self.w2),
            ("ffn.b2", &self.b2),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 16] {
        [
            ("ln1.gain", &mut self.ln1_gain),
            ("ln1.bias", &mut self.ln1_bias),
            ("attn.wq", &mut self.wq),
            ("attn.bq", &mut self.bq),
            ("attn.wk", &mut self.wk),
            ("attn.bk", &mut self.bk),
            ("attn.wv", &mut self.wv),
            ("attn.bv", &mut self.bv),
            ("attn.wo", &mut self.wo),
            ("attn.bo", &mut self.bo),
            ("ln2.gain", &mut self.ln2_gain),
            ("ln2.bias", &mut self.ln2_bias),
            ("ffn.w1", &mut self.w1),
            ("ffn.b1", &mut self.b1),
            ("ffn.w2", &mut self.w2),
            ("ffn.b2", &mut self.b2),
        ]
    }
}

/// All learnable tensors of one encoder. The same struct doubles as the
/// gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    /// `(vocab_size + 1) × dim`; the last row embeds the mask token.
    pub item_embeddings: Tensor,
    pub position_embeddings: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
}

impl Parameters for EncoderParams {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("item_embeddings".to_string(), &self.item_embeddings),
            ("position_embeddings".to_string(), &self.position_embeddings),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.named().into_iter().map(|(n, t)| (format!("layer{i}.{n}"), t)));
        }
        out.push(("final_ln.gain".into(), &self.final_gain));
        out.push(("final_ln.bias".into(), &self.final_bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("item_embeddings".to_string(), &mut self.item_embeddings),
            ("position_embeddings".to_string(), &mut self.position_embeddings),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(l.named_mut().into_iter().map(|(n, t)| (format!("layer{i}.{n}"), t)));
        }
        out.push(("final_ln.gain".into(), &mut self.final_gain));
        out.push(("final_ln.bias".into(), &mut self.final_bias));
        out
    }
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let item_embeddings = Tensor::randn(&[config.vocab_size + 1, d], 0.5, rng);
        let position_embeddings = Tensor::randn(&[config.max_len, d], 0.1, rng);
        let layers = (0..config.layers)
            .map(|_| LayerParams::init(d, config.ffn_dim, rng))
            .collect();
        Ok(EncoderParams {
            config,
            item_embeddings,
            position_embeddings,
            layers,
            final_gain: Tensor::filled(&[d], 1.0),
            final_bias: Tensor::zeros(&[d]),
        })
    }

    /// Zero-valued tensors with the same shapes, for gradient accumulation.
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero();
        g
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.shape == tb.shape)
    }
}

/// Encoder output for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceEncoding {
    pub pooled: Vec<f64>,
    /// `len × dim`, row-major.
    pub per_position: Vec<f64>,
    pub len: usize,
    pub dim: usize,
}

impl SequenceEncoding {
    pub fn state(&self, j: usize) -> &[f64] {
        &self.per_position[j * self.dim..(j + 1) * self.dim]
    }
}

/// Pooling rule: hidden state of the last valid position.
pub fn pool(per_position: &[f64], len: usize, dim: usize) -> Vec<f64> {
    per_position[(len - 1) * dim..len * dim].to_vec()
}

#[derive(Clone, Debug)]
struct LnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &[f64], rows: usize, d: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        for c in 0..d {
            let h = (row[c] - mean) * is;
            xhat[r * d + c] = h;
            y[r * d + c] = gain[c] * h + bias[c];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    cache: &LnCache,
    rows: usize,
    d: usize,
    gain: &[f64],
    dy: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * d];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let g = &dy[r * d..(r + 1) * d];
        for c in 0..d {
            dgain[c] += g[c] * xh[c];
            dbias[c] += g[c];
            dxhat[c] = g[c] * gain[c];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dot(&dxhat, xh) / d as f64;
        let is = cache.inv_std[r];
        for c in 0..d {
            dx[r * d + c] = is * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

#[derive(Clone, Debug)]
struct LayerCache {
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Per head, `rows × valid` attention probabilities.
    probs: Vec<Vec<f64>>,
    ctx: Vec<f64>,
    drop_attn: Option<Vec<f64>>,
    ln2: LnCache,
    b: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
    drop_ffn: Option<Vec<f64>>,
}

/// Activations recorded by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    ids: Vec<ItemId>,
    drop_embed: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
    final_ln: LnCache,
}

fn dropout_mask<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect()
}

fn apply_mask(x: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        for (xi, mi) in x.iter_mut().zip(m) {
            *xi *= mi;
        }
    }
}

fn check_ids(config: &EncoderConfig, ids: &[ItemId], valid: usize) -> Result<()> {
    if valid == 0 {
        return Err(Error::Input("cannot encode an empty sequence".into()));
    }
    if valid > ids.len() || ids.len() > config.max_len {
        return Err(Error::Input(format!(
            "sequence of {} positions ({} valid) exceeds max_len {}",
            ids.len(),
            valid,
            config.max_len
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i as usize > config.vocab_size) {
        return Err(Error::Input(format!(
            "item id {bad} out of range (vocab {} + mask)",
            config.vocab_size
        )));
    }
    Ok(())
}

/// Core forward pass over `ids`, of which the first `valid` positions are
/// real and the rest padding. Padded rows are computed but never attended
/// to, and are dropped from the output.
fn forward<R: Rng + ?Sized>(
    params: &EncoderParams,
    ids: &[ItemId],
    valid: usize,
    mut rng: Option<&mut R>,
    record: bool,
) -> (SequenceEncoding, Option<ForwardCache>) {
    let cfg = &params.config;
    let (rows, d, f) = (ids.len(), cfg.dim, cfg.ffn_dim);
    let (nh, dh) = (cfg.heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let p = cfg.dropout;
    let mut mask = |n: usize| -> Option<Vec<f64>> {
        match rng.as_deref_mut() {
            Some(r) if p > 0.0 => Some(dropout_mask(n, p, r)),
            _ => None,
        }
    };

    let mut x = vec![0.0; rows * d];
    for (i, &id) in ids.iter().enumerate() {
        let row = &mut x[i * d..(i + 1) * d];
        row.copy_from_slice(params.item_embeddings.row(id as usize));
        linalg::add_assign(row, params.position_embeddings.row(i));
    }
    let drop_embed = mask(rows * d);
    apply_mask(&mut x, &drop_embed);

    let mut layer_caches = Vec::with_capacity(params.layers.len());
    for lp in &params.layers {
        let (a, ln1) = layer_norm(&x, rows, d, &lp.ln1_gain.data, &lp.ln1_bias.data);
        let q = linear(&a, rows, d, &lp.wq.data, Some(&lp.bq.data), d);
        let k = linear(&a, rows, d, &lp.wk.data, Some(&lp.bk.data), d);
        let v = linear(&a, rows, d, &lp.wv.data, Some(&lp.bv.data), d);

        let mut ctx = vec![0.0; rows * d];
        let mut probs = Vec::with_capacity(nh);
        for h in 0..nh {
            let off = h * dh;
            let mut ph = vec![0.0; rows * valid];
            for i in 0..rows {
                let qi = &q[i * d + off..i * d + off + dh];
                let pr = &mut ph[i * valid..(i + 1) * valid];
                for (j, pj) in pr.iter_mut().enumerate() {
                    *pj = dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
                }
                linalg::softmax_in_place(pr);
                let ci = &mut ctx[i * d + off..i * d + off + dh];
                for (j, &pj) in pr.iter().enumerate() {
                    linalg::axpy(pj, &v[j * d + off..j * d + off + dh], ci);
                }
            }
            probs.push(ph);
        }

        let mut attn = linear(&ctx, rows, d, &lp.wo.data, Some(&lp.bo.data), d);
        let drop_attn = mask(rows * d);
        apply_mask(&mut attn, &drop_attn);
        linalg::add_assign(&mut x, &attn);

        let (b, ln2) = layer_norm(&x, rows, d, &lp.ln2_gain.data, &lp.ln2_bias.data);
        let u = linear(&b, rows, d, &lp.w1.data, Some(&lp.b1.data), f);
        let g: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
        let mut out = linear(&g, rows, f, &lp.w2.data, Some(&lp.b2.data), d);
        let drop_ffn = mask(rows * d);
        apply_mask(&mut out, &drop_ffn);
        linalg::add_assign(&mut x, &out);

        if record {
            layer_caches.push(LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                ctx,
                drop_attn,
                ln2,
                b,
                u,
                g,
                drop_ffn,
            });
        }
    }

    let (y, final_ln) = layer_norm(&x, rows, d, &params.final_gain.data, &params.final_bias.data);
    let per_position = y[..valid * d].to_vec();
    let pooled = pool(&per_position, valid, d);
    let enc = SequenceEncoding {
        pooled,
        per_position,
        len: valid,
        dim: d,
    };
    let cache = record.then(|| ForwardCache {
        ids: ids.to_vec(),
        drop_embed,
        layers: layer_caches,
        final_ln,
    });
    (enc, cache)
}

/// Deterministic inference-mode encoding (no dropout).
pub fn encode(params: &EncoderParams, seq: &ItemSequence) -> Result<SequenceEncoding> {
    encode_ids(params, seq.items())
}

pub fn encode_ids(params: &EncoderParams, ids: &[ItemId]) -> Result<SequenceEncoding> {
    check_ids(&params.config, ids, ids.len())?;
    Ok(forward::<rand::rngs::ThreadRng>(params, ids, ids.len(), None, false).0)
}

/// Encodes `ids` where only the first `valid` positions are real. Outputs
/// equal `encode` on the unpadded prefix.
pub fn encode_padded(params: &EncoderParams, ids: &[ItemId], valid: usize) -> Result<SequenceEncoding> {
    check_ids(&params.config, ids, valid)?;
    Ok(forward::<rand::rngs::ThreadRng>(params, ids, valid, None, false).0)
}

/// Encodes each sequence independently; output order follows input order.
pub fn encode_batch(params: &EncoderParams, seqs: &[ItemSequence]) -> Result<Vec<SequenceEncoding>> {
    seqs.par_iter().map(|s| encode(params, s)).collect()
}

/// Training-mode forward pass. Dropout is applied when `rng` is given and
/// the configured rate is positive.
pub fn forward_train<R: Rng + ?Sized>(
    params: &EncoderParams,
    ids: &[ItemId],
    rng: Option<&mut R>,
) -> Result<(SequenceEncoding, ForwardCache)> {
    check_ids(&params.config, ids, ids.len())?;
    let (enc, cache) = forward(params, ids, ids.len(), rng, true);
    Ok((enc, cache.expect("recorded")))
}

/// Reverse pass. `d_per_position` is `len × dim` (or empty for none) and
/// `d_pooled` is `dim` (or empty). Gradients are added into `grads`.
pub fn backward(
    params: &EncoderParams,
    cache: &ForwardCache,
    d_per_position: &[f64],
    d_pooled: &[f64],
    grads: &mut EncoderParams,
) {
    let cfg = &params.config;
    let (rows, d, f) = (cache.ids.len(), cfg.dim, cfg.ffn_dim);
    let (nh, dh) = (cfg.heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();

    let mut dy = vec![0.0; rows * d];
    if !d_per_position.is_empty() {
        dy.copy_from_slice(d_per_position);
    }
    if !d_pooled.is_empty() {
        linalg::add_assign(&mut dy[(rows - 1) * d..rows * d], d_pooled);
    }
    let mut dx = layer_norm_backward(
        &cache.final_ln,
        rows,
        d,
        &params.final_gain.data,
        &dy,
        &mut grads.final_gain.data,
        &mut grads.final_bias.data,
    );

    for (li, (lp, lc)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        let lg = &mut grads.layers[li];

        // feed-forward residual
        let mut dout = dx.clone();
        apply_mask(&mut dout, &lc.drop_ffn);
        let dg = linear_backward(&lc.g, rows, f, &lp.w2.data, d, &dout, &mut lg.w2.data, Some(&mut lg.b2.data));
        let du: Vec<f64> = dg.iter().zip(&lc.u).map(|(g, &u)| g * gelu_grad(u)).collect();
        let db = linear_backward(&lc.b, rows, d, &lp.w1.data, f, &du, &mut lg.w1.data, Some(&mut lg.b1.data));
        let dres = layer_norm_backward(
            &lc.ln2,
            rows,
            d,
            &lp.ln2_gain.data,
            &db,
            &mut lg.ln2_gain.data,
            &mut lg.ln2_bias.data,
        );
        linalg::add_assign(&mut dx, &dres);

        // attention residual
        let mut dattn = dx.clone();
        apply_mask(&mut dattn, &lc.drop_attn);
        let dctx = linear_backward(&lc.ctx, rows, d, &lp.wo.data, d, &dattn, &mut lg.wo.data, Some(&mut lg.bo.data));
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let valid = lc.probs[0].len() / rows;
        let mut dp = vec![0.0; valid];
        for h in 0..nh {
            let off = h * dh;
            let ph = &lc.probs[h];
            for i in 0..rows {
                let dci = &dctx[i * d + off..i * d + off + dh];
                let pr = &ph[i * valid..(i + 1) * valid];
                for j in 0..valid {
                    dp[j] = dot(dci, &lc.v[j * d + off..j * d + off + dh]);
                    linalg::axpy(pr[j], dci, &mut dv[j * d + off..j * d + off + dh]);
                }
                let s = dot(pr, &dp);
                for j in 0..valid {
                    let ds = pr[j] * (dp[j] - s) * scale;
                    if ds != 0.0 {
                        linalg::axpy(ds, &lc.k[j * d + off..j * d + off + dh], &mut dq[i * d + off..i * d + off + dh]);
                        linalg::axpy(ds, &lc.q[i * d + off..i * d + off + dh], &mut dk[j * d + off..j * d + off + dh]);
                    }
                }
            }
        }
        let mut da = linear_backward(&lc.a, rows, d, &lp.wq.data, d, &dq, &mut lg.wq.data, Some(&mut lg.bq.data));
        let dak = linear_backward(&lc.a, rows, d, &lp.wk.data, d, &dk, &mut lg.wk.data, Some(&mut lg.bk.data));
        let dav = linear_backward(&lc.a, rows, d, &lp.wv.data, d, &dv, &mut lg.wv.data, Some(&mut lg.bv.data));
        linalg::add_assign(&mut da, &dak);
        linalg::add_assign(&mut da, &dav);
        let dres = layer_norm_backward(
            &lc.ln1,
            rows,
            d,
            &lp.ln1_gain.data,
            &da,
            &mut lg.ln1_gain.data,
            &mut lg.ln1_bias.data,
        );
        linalg::add_assign(&mut dx, &dres);
    }

    apply_mask(&mut dx, &cache.drop_embed);
    for (i, &id) in cache.ids.iter().enumerate() {
        let g = &dx[i * d..(i + 1) * d];
        linalg::add_assign(grads.item_embeddings.row_mut(id as usize), g);
        linalg::add_assign(grads.position_embeddings.row_mut(i), g);
    }
}
