//! Acceptance gates. Every test prints one `PASS`/`FAIL` line with the
//! measured numbers before asserting.
//!
//! Run with `cargo test -p ruel-cli --test acceptance -- --nocapture` to
//! see the report lines.

use std::collections::VecDeque;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ruel_core::augmentation::ViewPolicy;
use ruel_core::config::{ExperimentConfig, Variant};
use ruel_core::contrastive::{info_nce_loss, momentum_update, MemoryBank};
use ruel_core::dataset::ItemSequence;
use ruel_core::encoder::{self, EncoderConfig, EncoderParams};
use ruel_core::evaluation::{self, hr_at_k, ndcg_at_k, ItemScorer};
use ruel_core::fusion::{
    attentive_select, fusion_backward, fusion_forward, score_weights, FusionConfig, FusionHead, ItemTable,
    RetrievedSession, Selector,
};
use ruel_core::linalg::{dot, l2_normalize};
use ruel_core::params::Parameters;
use ruel_core::retrieval::{IndexMode, RetrievalConfig, RetrievalIndex};
use ruel_core::synth::{self, SynthConfig};
use ruel_core::training::{run_ablation, Trainer};

const H: f64 = 1e-5;

fn report(n: usize, name: &str, pass: bool, detail: &str, elapsed: Duration, budget: Duration) -> bool {
    let in_time = elapsed <= budget;
    let ok = pass && in_time;
    println!(
        "criterion {n:2} {name}: {} ({detail}; {:.1}s of {:.0}s)",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    ok
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
}

/// Worst relative error between `analytic` and central differences of
/// `loss` over every parameter entry.
fn worst_fd<P: Parameters + Clone>(params: &P, analytic: &P, loss: impl Fn(&P) -> f64) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for ti in 0..params.tensors().len() {
        for i in 0..params.tensors()[ti].1.len() {
            let mut p = params.clone();
            p.tensors_mut()[ti].1.data[i] += H;
            let up = loss(&p);
            p.tensors_mut()[ti].1.data[i] -= 2.0 * H;
            let numeric = (up - loss(&p)) / (2.0 * H);
            worst = worst.max(rel_err(analytic.tensors()[ti].1.data[i], numeric));
            n += 1;
        }
    }
    (worst, n)
}

fn param_distance(a: &EncoderParams, b: &EncoderParams) -> f64 {
    let mut s = 0.0;
    for ((_, x), (_, y)) in a.tensors().iter().zip(b.tensors()) {
        s += x.data.iter().zip(&y.data).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
    }
    s.sqrt()
}

#[test]
fn criterion_01_momentum_recursion() {
    let t0 = Instant::now();
    let cfg = EncoderConfig {
        vocab_size: 2,
        max_len: 1,
        dim: 1,
        layers: 1,
        heads: 1,
        ffn_dim: 1,
        dropout: 0.0,
    };
    let q = EncoderParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut worst: f64 = 0.0;
    for m in [0.0, 0.5, 0.999] {
        let mut k = EncoderParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let d0 = param_distance(&k, &q);
        for t in 1..=100 {
            momentum_update(&q, &mut k, m).unwrap();
            worst = worst.max((param_distance(&k, &q) - m.powi(t) * d0).abs());
        }
    }
    let ok = report(
        1,
        "momentum algebra",
        worst <= 1e-6,
        &format!("max deviation {worst:.2e}"),
        t0.elapsed(),
        Duration::from_secs(1),
    );
    assert!(ok);
}

#[test]
fn criterion_02_info_nce() {
    let t0 = Instant::now();
    let e1 = vec![1.0, 0.0];
    let empty = MemoryBank::new(4, 2);
    let zero = info_nce_loss(&[e1.clone()], &[e1.clone()], &empty, 1.0).unwrap().loss;
    let mut bank = MemoryBank::new(4, 2);
    bank.enqueue(&[vec![0.0, 1.0]]).unwrap();
    let out = info_nce_loss(&[e1.clone()], &[e1], &bank, 1.0).unwrap();
    let e = std::f64::consts::E;
    let want = -(e / (e + 1.0)).ln();
    let closed = zero.abs().max((out.per_anchor[0] - want).abs());

    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let unit = |rng: &mut ChaCha8Rng| l2_normalize(&gaussian(rng, 4)).0;
    let a: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng)).collect();
    let b: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng)).collect();
    let mut bank = MemoryBank::new(5, 4);
    bank.enqueue(&(0..4).map(|_| unit(&mut rng)).collect::<Vec<_>>()).unwrap();
    let out = info_nce_loss(&a, &b, &bank, 0.5).unwrap();
    let mut worst: f64 = 0.0;
    for side in 0..2 {
        for i in 0..3 {
            for j in 0..4 {
                let eval = |delta: f64| {
                    let (mut a2, mut b2) = (a.clone(), b.clone());
                    let v = if side == 0 { &mut a2[i] } else { &mut b2[i] };
                    v[j] += delta;
                    info_nce_loss(&a2, &b2, &bank, 0.5).unwrap().loss
                };
                let numeric = (eval(H) - eval(-H)) / (2.0 * H);
                let g = if side == 0 { out.grad_a[i][j] } else { out.grad_b[i][j] };
                worst = worst.max(rel_err(g, numeric));
            }
        }
    }
    let ok = report(
        2,
        "InfoNCE correctness",
        closed <= 1e-6 && worst <= 1e-4,
        &format!("closed-form error {closed:.2e}, gradient rel. error {worst:.2e}"),
        t0.elapsed(),
        Duration::from_secs(5),
    );
    assert!(ok);
}

#[test]
fn criterion_03_fifo_bank() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for &cap in &[1usize, 4, 8096] {
        for _ in 0..1000 {
            let mut bank = MemoryBank::new(cap, 2);
            let mut oracle = VecDeque::new();
            let mut next = 0.0;
            for _ in 0..rng.gen_range(1..6) {
                let n = rng.gen_range(0..=cap.min(64) + 3);
                let rows: Vec<Vec<f64>> = (0..n)
                    .map(|_| {
                        next += 1.0;
                        vec![1.0, next]
                    })
                    .collect();
                bank.enqueue(&rows).unwrap();
                for r in &rows {
                    oracle.push_back(r[1]);
                    if oracle.len() > cap {
                        oracle.pop_front();
                    }
                }
                let got: Vec<f64> = bank.rows_in_order().iter().map(|r| (r[1] / r[0]).round()).collect();
                if got != oracle.iter().copied().collect::<Vec<_>>() {
                    mismatches += 1;
                }
            }
        }
    }
    let ok = report(
        3,
        "FIFO bank",
        mismatches == 0,
        &format!("{mismatches} mismatching states over 3000 schedules"),
        t0.elapsed(),
        Duration::from_secs(10),
    );
    assert!(ok);
}

#[test]
fn criterion_04_encoder_gradients_and_padding() {
    let t0 = Instant::now();
    let cfg = EncoderConfig {
        vocab_size: 7,
        max_len: 6,
        dim: 8,
        layers: 1,
        heads: 2,
        ffn_dim: 8,
        dropout: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = EncoderParams::init(cfg, &mut rng).unwrap();
    let ids = [3, 1, 7, 4, 4];
    let c_pos = gaussian(&mut rng, ids.len() * 8);
    let c_pool = gaussian(&mut rng, 8);
    let loss = |p: &EncoderParams| {
        let e = encoder::encode_ids(p, &ids).unwrap();
        dot(&c_pos, &e.per_position) + dot(&c_pool, &e.pooled)
    };
    let (_, cache) = encoder::forward_train::<ChaCha8Rng>(&params, &ids, None).unwrap();
    let mut grads = params.zeros_like();
    encoder::backward(&params, &cache, &c_pos, &c_pool, &mut grads);
    let (worst, n) = worst_fd(&params, &grads, loss);

    let mut padding_breaks = 0;
    for _ in 0..200 {
        let len = rng.gen_range(1..=6);
        let seq: Vec<u32> = (0..len).map(|_| rng.gen_range(0..=7)).collect();
        let mut padded = seq.clone();
        padded.extend((len..6).map(|_| rng.gen_range(0..=7)));
        if encoder::encode_ids(&params, &seq).unwrap() != encoder::encode_padded(&params, &padded, len).unwrap() {
            padding_breaks += 1;
        }
    }
    let ok = report(
        4,
        "encoder gradients",
        worst < 1e-3 && n == params.num_params() && padding_breaks == 0,
        &format!("{n} entries, worst rel. error {worst:.2e}, {padding_breaks}/200 padding mismatches"),
        t0.elapsed(),
        Duration::from_secs(60),
    );
    assert!(ok);
}

#[test]
fn criterion_05_mips() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let build = |rows: &[Vec<f64>], mode| {
        let cfg = RetrievalConfig {
            mode,
            ..RetrievalConfig::default()
        };
        RetrievalIndex::from_vectors(64, (0..rows.len() as u64).collect(), rows, vec![Vec::new(); rows.len()], &cfg)
            .unwrap()
    };
    let mut wrong = 0;
    let (mut found, mut total) = (0, 0);
    for _ in 0..100 {
        let rows: Vec<Vec<f64>> = (0..1000).map(|_| gaussian(&mut rng, 64)).collect();
        let q = gaussian(&mut rng, 64);
        let exact = build(&rows, IndexMode::Exact);
        let mut brute: Vec<(u64, f64)> = (0..1000).map(|r| (r as u64, dot(exact.vector(r), &q))).collect();
        brute.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for k in [1, 5, 10] {
            let got: Vec<u64> = exact.search(&q, k).unwrap().hits.iter().map(|h| h.session_id).collect();
            let want: Vec<u64> = brute[..k].iter().map(|x| x.0).collect();
            wrong += usize::from(got != want);
        }
        let clustered = build(&rows, IndexMode::Clustered);
        let want: Vec<u64> = brute[..10].iter().map(|x| x.0).collect();
        found += clustered.search(&q, 10).unwrap().hits.iter().filter(|h| want.contains(&h.session_id)).count();
        total += 10;
    }
    let recall = found as f64 / total as f64;
    let ok = report(
        5,
        "MIPS exactness",
        wrong == 0 && recall >= 0.95,
        &format!("{wrong}/300 exact mismatches, clustered recall@10 {recall:.3}"),
        t0.elapsed(),
        Duration::from_secs(60),
    );
    assert!(ok);
}

#[test]
fn criterion_06_fusion() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (d, v) = (4, 6);
    let mut sum_err: f64 = 0.0;
    let probe = FusionHead::init(d, v, false, &mut rng);
    for len in 1..10 {
        let states = gaussian(&mut rng, len * d);
        let w = attentive_select(&gaussian(&mut rng, d), &states, &probe, Selector::Attentive).weights;
        sum_err = sum_err.max((w.iter().sum::<f64>() - 1.0).abs());
    }
    let s = gaussian(&mut rng, 5);
    let shifted: Vec<f64> = s.iter().map(|x| x + 42.0).collect();
    let shift_err = score_weights(&s, true)
        .iter()
        .zip(score_weights(&shifted, true))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let mut worst: f64 = 0.0;
    for selector in [Selector::Attentive, Selector::Mean] {
        for normalize in [false, true] {
            let head = FusionHead::init(d, v, false, &mut rng);
            let h_u = gaussian(&mut rng, d);
            let states: Vec<Vec<f64>> = [3, 1, 2].iter().map(|&l| gaussian(&mut rng, l * d)).collect();
            let scores = [0.7, -0.2, 0.4];
            let fc = FusionConfig {
                k: 3,
                selector,
                normalize_scores: normalize,
                tie_item_embeddings: false,
            };
            let retrieved: Vec<RetrievedSession> = states
                .iter()
                .zip(scores)
                .map(|(s, score)| RetrievedSession { score, states: s })
                .collect();
            let loss = |h: &FusionHead| {
                let t = fusion_forward(&h_u, &retrieved, h, ItemTable::of_head(h), &fc);
                -t.prediction.probs[2].ln()
            };
            let table = ItemTable::of_head(&head);
            let trace = fusion_forward(&h_u, &retrieved, &head, table, &fc);
            let mut g = head.zeros_like();
            let mut dt = vec![0.0; table.data.len()];
            fusion_backward(&h_u, &retrieved, &head, table, &fc, &trace, 2, 1.0, &mut g, &mut dt);
            g.output_items.data.copy_from_slice(&dt);
            worst = worst.max(worst_fd(&head, &g, loss).0);
        }
    }
    let ok = report(
        6,
        "fusion math",
        sum_err <= 1e-6 && shift_err <= 1e-12 && worst < 1e-3,
        &format!("weight-sum error {sum_err:.1e}, shift error {shift_err:.1e}, gradient rel. error {worst:.2e}"),
        t0.elapsed(),
        Duration::from_secs(30),
    );
    assert!(ok);
}

struct RandomScorer(usize);

impl ItemScorer for RandomScorer {
    fn score_items(&self, prefix: &[u32]) -> ruel_core::Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(prefix[0] as u64);
        Ok((0..self.0).map(|_| rng.gen()).collect())
    }
}

#[test]
fn criterion_07_metrics() {
    let t0 = Instant::now();
    let hand = (ndcg_at_k(2, 10) - 0.6309).abs() < 1e-4
        && ndcg_at_k(1, 10) == 1.0
        && ndcg_at_k(10, 10) > 0.0
        && ndcg_at_k(11, 10) == 0.0
        && hr_at_k(10, 10) == 1.0
        && hr_at_k(11, 10) == 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let examples: Vec<(Vec<u32>, u32)> = (0..1000).map(|u| (vec![u], rng.gen_range(0..100))).collect();
    let (m, _) = evaluation::evaluate_recommendation(&RandomScorer(100), &examples).unwrap();
    let ok = report(
        7,
        "metrics",
        hand && (0.07..=0.13).contains(&m.hr_at_10),
        &format!("hand values {}, random hr@10 {:.3}", if hand { "match" } else { "differ" }, m.hr_at_10),
        t0.elapsed(),
        Duration::from_secs(10),
    );
    assert!(ok);
}

#[test]
fn criterion_08_retrieval_self_task() {
    let t0 = Instant::now();
    let mut passes = 0;
    let mut details = Vec::new();
    for seed in 1..=3u64 {
        let data = synth::generate(&SynthConfig {
            n_users: 2000,
            n_sessions: 10_000,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let corpus = &data.corpus;
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        cfg.encoder.dim = 32;
        cfg.encoder.layers = 1;
        cfg.encoder.ffn_mult = 2;
        cfg.cts.bank_size = 1024;
        cfg.cts.momentum = 0.99;
        cfg.cts.batch_size = 32;
        cfg.train.stage1_epochs = 15;
        cfg.train.adam.lr = 3e-3;
        let users: Vec<ItemSequence> = corpus.user_sequences.values().cloned().collect();
        let policy = ViewPolicy::Augment(cfg.aug);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);

        let mut t = Trainer::new(corpus, &cfg).unwrap();
        t.pretrain().unwrap();
        let trained = evaluation::evaluate_retrieval(
            &t.state.theta_q,
            &t.state.theta_k,
            &users,
            &corpus.browsing_sessions,
            &policy,
            &[10],
            &mut rng,
        )
        .unwrap();

        let enc = cfg.encoder_config(corpus.vocab_size());
        let q0 = EncoderParams::init(enc, &mut ChaCha8Rng::seed_from_u64(seed + 200)).unwrap();
        let k0 = EncoderParams::init(enc, &mut ChaCha8Rng::seed_from_u64(seed + 300)).unwrap();
        let untrained =
            evaluation::evaluate_retrieval(&q0, &k0, &users, &corpus.browsing_sessions, &policy, &[10], &mut rng)
                .unwrap();
        let (a, b) = (trained.hit_ratio[&10], untrained.hit_ratio[&10]);
        if a >= 0.30 && b <= 0.01 {
            passes += 1;
        }
        details.push(format!("seed {seed}: {a:.3} vs {b:.3} ({} distractors)", trained.n_distractors));
    }
    let ok = report(
        8,
        "retrieval self-task",
        passes >= 2,
        &format!("hr@10 trained vs untrained, {}", details.join(", ")),
        t0.elapsed(),
        Duration::from_secs(600),
    );
    assert!(ok);
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn criterion_09_ablation_direction() {
    let t0 = Instant::now();
    let profile = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/ablation.conf");
    let base = ExperimentConfig::load(&profile).unwrap();
    let mut scores = [Vec::new(), Vec::new(), Vec::new()];
    for seed in 1..=3u64 {
        let data = synth::generate(&SynthConfig {
            n_users: 1000,
            n_items: 300,
            n_topics: 1000,
            n_sessions: 5000,
            session_len: (5, 7),
            linked_per_user: 4,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = ExperimentConfig { seed, ..base };
        for (slot, v) in [Variant::Full, Variant::NoRa, Variant::NoAs].into_iter().enumerate() {
            let out = run_ablation(v, &data.corpus, &cfg).unwrap();
            scores[slot].push(out.test.ndcg_at_10);
        }
    }
    let [full, no_ra, no_as] = scores.map(median);
    let ok = report(
        9,
        "ablation direction",
        full - no_ra >= 0.005 && full >= no_as,
        &format!("median test ndcg@10 full {full:.4}, no_ra {no_ra:.4}, no_as {no_as:.4}"),
        t0.elapsed(),
        Duration::from_secs(1800),
    );
    assert!(ok);
}

#[test]
fn criterion_10_determinism() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let profile = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.conf");
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_ruel"))
            .args(["pipeline", "--threads", "1", "--seed", "7", "--config"])
            .arg(&profile)
            .arg("--out")
            .arg(&out)
            .env("RUST_LOG", "warn")
            .status()
            .unwrap();
        assert!(status.success(), "pipeline exited with {status}");
        std::fs::read(out.join("report.json")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    let ok = report(
        10,
        "determinism",
        a == b,
        &format!("reports of {} and {} bytes {}", a.len(), b.len(), if a == b { "identical" } else { "differ" }),
        t0.elapsed(),
        Duration::from_secs(600),
    );
    assert!(ok);
}
