//! Latent-topic generator for user histories and browsing logs.
//!
//! Each topic owns a random ordered subset of the catalog. Users and browsing
//! sessions each draw a topic and emit items from a Markov chain that mostly
//! walks the topic's order, sometimes jumps within the topic, and
//! occasionally wanders to a random catalog item.
//!
//! Every user also leaves a few linked browsing sessions: windows at random
//! positions of the user's latent walk, which runs a few steps past the
//! recorded history. A window that overlaps the recent history usually also
//! holds the next item, so a retriever that finds it helps prediction. The
//! remaining sessions come from random topics.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{self, Catalog, Corpus, InteractionEvent, ItemId, PreprocessConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_topics: usize,
    pub n_sessions: usize,
    pub seed: u64,
    /// Items per topic (capped at `n_items`).
    pub topic_size: usize,
    pub user_len: (usize, usize),
    pub session_len: (usize, usize),
    /// Probability of stepping to the successor in the topic order.
    pub p_next: f64,
    /// Probability that a browsing step emits a uniformly random item.
    pub p_noise: f64,
    /// The same for steps of a user's recorded history.
    pub user_noise: f64,
    /// Probability of an extra browsing page that has no catalog entry.
    pub p_unlinked: f64,
    /// Browsing sessions cut from each user's walk.
    pub linked_per_user: usize,
    /// Walk steps beyond the recorded history that linked sessions may see.
    pub lookahead: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 200,
            n_items: 1000,
            n_topics: 200,
            n_sessions: 2000,
            seed: 0,
            topic_size: 24,
            user_len: (7, 14),
            session_len: (6, 14),
            p_next: 0.6,
            p_noise: 0.05,
            user_noise: 0.05,
            p_unlinked: 0.1,
            linked_per_user: 2,
            lookahead: 3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_items == 0 || self.n_topics == 0 || self.n_sessions == 0 {
            return Err(Error::Config("synth counts must all be >= 1".into()));
        }
        let (a, b) = self.user_len;
        let (c, d) = self.session_len;
        if a == 0 || a > b || c == 0 || c > d {
            return Err(Error::Config("synth length ranges must be non-empty".into()));
        }
        for p in [self.p_next, self.p_noise, self.user_noise, self.p_unlinked] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config("synth probabilities must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Raw logs plus the corpus preprocessing derives from them.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub catalog_pairs: Vec<(String, ItemId)>,
    pub browsing_events: Vec<InteractionEvent>,
    pub interactions: Vec<InteractionEvent>,
    pub user_topics: Vec<usize>,
    pub session_topics: Vec<usize>,
    /// Index of the user a session was cut from, if any.
    pub session_owner: Vec<Option<usize>>,
    pub corpus: Corpus,
}

struct Topic {
    items: Vec<ItemId>,
}

impl Topic {
    fn walk<R: Rng>(&self, len: usize, noise: f64, cfg: &SynthConfig, rng: &mut R) -> Vec<ItemId> {
        let n = self.items.len();
        let mut pos = rng.gen_range(0..n);
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            if rng.gen_bool(noise) {
                out.push(rng.gen_range(0..cfg.n_items) as ItemId);
                continue;
            }
            out.push(self.items[pos]);
            pos = if rng.gen_bool(cfg.p_next) {
                (pos + 1) % n
            } else {
                rng.gen_range(0..n)
            };
        }
        out
    }
}

fn item_key(id: usize) -> String {
    format!("item{id:05}")
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let all: Vec<ItemId> = (0..cfg.n_items as ItemId).collect();
    let size = cfg.topic_size.clamp(1, cfg.n_items);
    let topics: Vec<Topic> = (0..cfg.n_topics)
        .map(|_| Topic {
            items: all.choose_multiple(&mut rng, size).copied().collect(),
        })
        .collect();

    let mut interactions = Vec::new();
    let mut user_topics = Vec::with_capacity(cfg.n_users);
    let mut walks = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let t = u % cfg.n_topics;
        user_topics.push(t);
        let len = rng.gen_range(cfg.user_len.0..=cfg.user_len.1);
        let walk = topics[t].walk(len + cfg.lookahead, cfg.user_noise, cfg, &mut rng);
        let mut ts: u64 = 1_600_000_000 + rng.gen_range(0..86_400);
        for &item in &walk[..len] {
            interactions.push(InteractionEvent {
                user_id: format!("u{u:06}"),
                item_key: item_key(item as usize),
                timestamp: ts,
            });
            ts += rng.gen_range(60..86_400);
        }
        walks.push(walk);
    }

    let mut plan: Vec<(usize, Option<usize>)> = Vec::with_capacity(cfg.n_sessions);
    'linked: for _ in 0..cfg.linked_per_user {
        for u in 0..cfg.n_users {
            if plan.len() == cfg.n_sessions {
                break 'linked;
            }
            plan.push((user_topics[u], Some(u)));
        }
    }
    while plan.len() < cfg.n_sessions {
        plan.push((rng.gen_range(0..cfg.n_topics), None));
    }
    plan.shuffle(&mut rng);

    // A handful of sessions per anonymous browser, separated by long gaps.
    const PER_BROWSER: usize = 4;
    let mut browsing_events = Vec::new();
    let mut session_topics = Vec::with_capacity(cfg.n_sessions);
    let mut session_owner = Vec::with_capacity(cfg.n_sessions);
    let mut ts = 0u64;
    for (j, &(t, owner)) in plan.iter().enumerate() {
        if j % PER_BROWSER == 0 {
            ts = 1_600_000_000 + rng.gen_range(0..86_400);
        } else {
            ts += rng.gen_range(5 * 3600..48 * 3600);
        }
        session_topics.push(t);
        session_owner.push(owner);
        let browser = format!("b{:06}", j / PER_BROWSER);
        let len = rng.gen_range(cfg.session_len.0..=cfg.session_len.1);
        let items = match owner {
            Some(u) => {
                let walk = &walks[u];
                let len = len.min(walk.len());
                let start = rng.gen_range(0..=walk.len() - len);
                walk[start..start + len].to_vec()
            }
            None => topics[t].walk(len, cfg.p_noise, cfg, &mut rng),
        };
        for item in items {
            if rng.gen_bool(cfg.p_unlinked) {
                browsing_events.push(InteractionEvent {
                    user_id: browser.clone(),
                    item_key: format!("page{}", rng.gen_range(0..1_000_000)),
                    timestamp: ts,
                });
                ts += rng.gen_range(5..600);
            }
            browsing_events.push(InteractionEvent {
                user_id: browser.clone(),
                item_key: item_key(item as usize),
                timestamp: ts,
            });
            ts += rng.gen_range(5..600);
        }
    }

    let catalog_pairs: Vec<(String, ItemId)> = (0..cfg.n_items).map(|i| (item_key(i), i as ItemId)).collect();
    let catalog = Catalog::from_pairs(catalog_pairs.clone())?;
    let pre = PreprocessConfig {
        min_len: cfg.user_len.0.min(cfg.session_len.0).min(dataset::DEFAULT_MIN_LEN),
        max_len: cfg.user_len.1.max(cfg.session_len.1).max(dataset::DEFAULT_MAX_LEN),
        ..PreprocessConfig::default()
    };
    let corpus = dataset::preprocess(&browsing_events, &interactions, &catalog, pre);
    Ok(SynthData {
        catalog_pairs,
        browsing_events,
        interactions,
        user_topics,
        session_topics,
        session_owner,
        corpus,
    })
}

/// Writes the corpus files to `dir` and the raw logs to `dir/raw`.
pub fn write(dir: &Path, data: &SynthData) -> Result<()> {
    data.corpus.save(dir)?;
    let raw = dir.join("raw");
    std::fs::create_dir_all(&raw).map_err(|e| Error::io(&raw, e))?;
    dataset::write_events(&raw.join("events.tsv"), &data.browsing_events)?;
    dataset::write_events(&raw.join("interactions.tsv"), &data.interactions)?;
    let path = raw.join("catalog.tsv");
    let text: String = data.catalog_pairs.iter().map(|(k, id)| format!("{k}\t{id}\n")).collect();
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
