//! Central finite-difference checks of every hand-written backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ruel_core::contrastive::{info_nce_loss, MemoryBank};
use ruel_core::encoder::{self, EncoderConfig, EncoderParams};
use ruel_core::fusion::{self, FusionConfig, FusionHead, ItemTable, Reduction, RetrievedSession, Selector};
use ruel_core::linalg::{dot, l2_normalize};
use ruel_core::params::Parameters;
use ruel_core::retrieval::{RetrievalConfig, RetrievalIndex};
use ruel_core::training::{cf_pass, ContextStore};

const H: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn cfg() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 7,
        max_len: 6,
        dim: 8,
        layers: 1,
        heads: 2,
        ffn_dim: 8,
        dropout: 0.0,
    }
}

/// Checks every entry of every tensor of `params` against `analytic`.
fn check_all<P: Parameters + Clone>(params: &P, analytic: &P, loss: impl Fn(&P) -> f64, tol: f64) -> usize {
    let mut checked = 0;
    let names: Vec<String> = params.tensors().iter().map(|(n, _)| n.clone()).collect();
    for (ti, name) in names.iter().enumerate() {
        let n = params.tensors()[ti].1.len();
        for i in 0..n {
            let mut p = params.clone();
            p.tensors_mut()[ti].1.data[i] += H;
            let up = loss(&p);
            p.tensors_mut()[ti].1.data[i] -= 2.0 * H;
            let down = loss(&p);
            let numeric = (up - down) / (2.0 * H);
            let a = analytic.tensors()[ti].1.data[i];
            assert!(
                rel_err(a, numeric) < tol,
                "{name}[{i}]: analytic {a:e} vs numeric {numeric:e}"
            );
            checked += 1;
        }
    }
    checked
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn encoder_every_tensor_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = EncoderParams::init(cfg(), &mut rng).unwrap();
    let ids = [3, 1, 7, 4, 4];
    let c_pos = weights(&mut rng, ids.len() * 8);
    let c_pool = weights(&mut rng, 8);
    let loss = |p: &EncoderParams| {
        let e = encoder::encode_ids(p, &ids).unwrap();
        dot(&c_pos, &e.per_position) + dot(&c_pool, &e.pooled)
    };
    let (_, cache) = encoder::forward_train::<ChaCha8Rng>(&params, &ids, None).unwrap();
    let mut grads = params.zeros_like();
    encoder::backward(&params, &cache, &c_pos, &c_pool, &mut grads);
    let n = check_all(&params, &grads, loss, 1e-3);
    assert_eq!(n, params.num_params());
}

#[test]
fn encoder_two_layer_pooled_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let c = EncoderConfig { layers: 2, ..cfg() };
    let params = EncoderParams::init(c, &mut rng).unwrap();
    let ids = [0, 6, 2];
    let c_pool = weights(&mut rng, 8);
    let loss = |p: &EncoderParams| dot(&c_pool, &encoder::encode_ids(p, &ids).unwrap().pooled);
    let (_, cache) = encoder::forward_train::<ChaCha8Rng>(&params, &ids, None).unwrap();
    let mut grads = params.zeros_like();
    encoder::backward(&params, &cache, &[], &c_pool, &mut grads);
    check_all(&params, &grads, loss, 1e-3);
}

#[test]
fn dropout_forward_and_backward_agree_under_fixed_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let c = EncoderConfig { dropout: 0.3, ..cfg() };
    let params = EncoderParams::init(c, &mut rng).unwrap();
    let ids = [1, 2, 3, 4];
    let c_pool = weights(&mut rng, 8);
    let loss = |p: &EncoderParams| {
        let mut r = ChaCha8Rng::seed_from_u64(99);
        dot(&c_pool, &encoder::forward_train(p, &ids, Some(&mut r)).unwrap().0.pooled)
    };
    let mut r = ChaCha8Rng::seed_from_u64(99);
    let (_, cache) = encoder::forward_train(&params, &ids, Some(&mut r)).unwrap();
    let mut grads = params.zeros_like();
    encoder::backward(&params, &cache, &[], &c_pool, &mut grads);
    check_all(&params, &grads, loss, 1e-3);
}

#[test]
fn info_nce_embedding_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let n = 3;
    let unit = |rng: &mut ChaCha8Rng| l2_normalize(&weights(rng, 4)).0;
    let a: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng)).collect();
    let b: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng)).collect();
    let mut bank = MemoryBank::new(5, 4);
    bank.enqueue(&(0..4).map(|_| unit(&mut rng)).collect::<Vec<_>>()).unwrap();
    let tau = 0.5;
    let out = info_nce_loss(&a, &b, &bank, tau).unwrap();
    for side in 0..2 {
        for i in 0..n {
            for j in 0..4 {
                let eval = |delta: f64| {
                    let (mut a2, mut b2) = (a.clone(), b.clone());
                    if side == 0 {
                        a2[i][j] += delta;
                    } else {
                        b2[i][j] += delta;
                    }
                    info_nce_loss(&a2, &b2, &bank, tau).unwrap().loss
                };
                let numeric = (eval(H) - eval(-H)) / (2.0 * H);
                let g = if side == 0 { out.grad_a[i][j] } else { out.grad_b[i][j] };
                assert!(rel_err(g, numeric) < 1e-4, "side {side} [{i}][{j}]: {g} vs {numeric}");
            }
        }
    }
}

fn fusion_case(selector: Selector, normalize: bool, tied: bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (d, v) = (4, 6);
    let head = FusionHead::init(d, v, tied, &mut rng);
    let emb: Vec<f64> = weights(&mut rng, v * d);
    let h_u = weights(&mut rng, d);
    let states: Vec<Vec<f64>> = [3, 1, 2].iter().map(|&l| weights(&mut rng, l * d)).collect();
    let scores = vec![0.7, -0.2, 0.4];
    let fc = FusionConfig {
        k: 3,
        selector,
        normalize_scores: normalize,
        tie_item_embeddings: tied,
    };
    let target = 4;

    let loss = |head: &FusionHead, emb: &[f64], h_u: &[f64], scores: &[f64]| {
        let retrieved: Vec<RetrievedSession> = states
            .iter()
            .zip(scores)
            .map(|(s, &score)| RetrievedSession { score, states: s })
            .collect();
        let table = if tied {
            ItemTable { data: emb, rows: v }
        } else {
            ItemTable::of_head(head)
        };
        let t = fusion::fusion_forward(h_u, &retrieved, head, table, &fc);
        -t.prediction.probs[target].ln()
    };

    let retrieved: Vec<RetrievedSession> = states
        .iter()
        .zip(&scores)
        .map(|(s, &score)| RetrievedSession { score, states: s })
        .collect();
    let table = if tied {
        ItemTable { data: &emb, rows: v }
    } else {
        ItemTable::of_head(&head)
    };
    let trace = fusion::fusion_forward(&h_u, &retrieved, &head, table, &fc);
    let mut g = head.zeros_like();
    let mut d_table = vec![0.0; table.data.len()];
    let fg = fusion::fusion_backward(&h_u, &retrieved, &head, table, &fc, &trace, target, 1.0, &mut g, &mut d_table);
    if !tied {
        g.output_items.data.copy_from_slice(&d_table);
    }

    check_all(&head, &g, |h| loss(h, &emb, &h_u, &scores), 1e-3);
    for i in 0..d {
        let mut up = h_u.clone();
        up[i] += H;
        let mut dn = h_u.clone();
        dn[i] -= H;
        let numeric = (loss(&head, &emb, &up, &scores) - loss(&head, &emb, &dn, &scores)) / (2.0 * H);
        assert!(rel_err(fg.d_user[i], numeric) < 1e-3, "h_u[{i}]");
    }
    for i in 0..scores.len() {
        let mut up = scores.clone();
        up[i] += H;
        let mut dn = scores.clone();
        dn[i] -= H;
        let numeric = (loss(&head, &emb, &h_u, &up) - loss(&head, &emb, &h_u, &dn)) / (2.0 * H);
        assert!(rel_err(fg.d_scores[i], numeric) < 1e-3, "score[{i}]");
    }
    if tied {
        for i in 0..emb.len() {
            let mut up = emb.clone();
            up[i] += H;
            let mut dn = emb.clone();
            dn[i] -= H;
            let numeric = (loss(&head, &up, &h_u, &scores) - loss(&head, &dn, &h_u, &scores)) / (2.0 * H);
            assert!(rel_err(d_table[i], numeric) < 1e-3, "table[{i}]");
        }
    }
}

#[test]
fn fusion_gradients_all_configurations() {
    for selector in [Selector::Attentive, Selector::Mean] {
        for normalize in [false, true] {
            for tied in [false, true] {
                fusion_case(selector, normalize, tied);
            }
        }
    }
}

/// Whole stage-2 cross-entropy path: encoder, query normalization,
/// retrieval scores, selector, MLP and item table.
#[test]
fn cf_pass_matches_finite_differences_through_retrieval() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let c = EncoderConfig {
        vocab_size: 5,
        max_len: 5,
        dim: 4,
        layers: 1,
        heads: 1,
        ffn_dim: 4,
        dropout: 0.0,
    };
    let theta_q = EncoderParams::init(c, &mut rng).unwrap();
    let theta_k = EncoderParams::init(c, &mut rng).unwrap();
    let sessions: Vec<_> = [vec![0, 1, 2], vec![3, 4], vec![2, 2, 4, 1], vec![1, 0]]
        .into_iter()
        .map(ruel_core::dataset::ItemSequence::new)
        .collect();
    let index = RetrievalIndex::build(&sessions, &theta_k, &RetrievalConfig::default()).unwrap();
    let store = ContextStore::build(&index, &theta_k).unwrap();
    let batch = vec![(vec![1, 2], 3), (vec![4, 0, 1], 2)];
    for tied in [false, true] {
        let fc = FusionConfig {
            k: 2,
            selector: Selector::Attentive,
            normalize_scores: true,
            tie_item_embeddings: tied,
        };
        let head = FusionHead::init(4, 5, tied, &mut rng);
        let run = |q: &EncoderParams, h: &FusionHead| {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            cf_pass(q, h, Some((&index, &store)), &fc, &batch, Reduction::Mean, &mut r).unwrap()
        };
        let base = run(&theta_q, &head);
        check_all(&theta_q, &base.encoder_grads, |q| run(q, &head).loss, 1e-3);
        check_all(&head, &base.head_grads, |h| run(&theta_q, h).loss, 1e-3);
    }
}
