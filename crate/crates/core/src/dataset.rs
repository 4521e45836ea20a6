//! Event-log ingestion, session segmentation, item alignment and
//! leave-one-out splits.
//!
//! Two corpora feed the model: per-user interaction sequences from the
//! recommendation dataset, and anonymous browsing sessions cut out of a raw
//! event log by an inactivity gap. Both end up as [`ItemSequence`]s over the
//! same item-id space.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ItemId = u32;

/// Shortest sequence kept anywhere in the corpus.
pub const DEFAULT_MIN_LEN: usize = 5;
pub const DEFAULT_MAX_LEN: usize = 50;
pub const DEFAULT_GAP_SECONDS: u64 = 4 * 3600;

/// One implicit-feedback event from a log.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionEvent {
    pub user_id: String,
    pub item_key: String,
    pub timestamp: u64,
}

/// An ordered list of item ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemSequence(Vec<ItemId>);

impl ItemSequence {
    pub fn new(items: Vec<ItemId>) -> Self {
        ItemSequence(items)
    }

    pub fn items(&self) -> &[ItemId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<ItemId> {
        self.0
    }

    /// The most recent `max_len` items.
    pub fn truncated(&self, max_len: usize) -> ItemSequence {
        let start = self.0.len().saturating_sub(max_len);
        ItemSequence(self.0[start..].to_vec())
    }
}

impl From<Vec<ItemId>> for ItemSequence {
    fn from(v: Vec<ItemId>) -> Self {
        ItemSequence(v)
    }
}

/// A gap-segmented run of events from one user, still keyed by entity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyedSession {
    pub user_id: String,
    pub keys: Vec<String>,
    pub timestamps: Vec<u64>,
}

impl KeyedSession {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn max_gap(&self) -> u64 {
        self.timestamps
            .windows(2)
            .map(|w| w[1] - w[0])
            .max()
            .unwrap_or(0)
    }
}

/// Entity key → item id dictionary. Keys are unique by construction.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Catalog {
    by_key: HashMap<String, ItemId>,
}

impl Catalog {
    pub fn from_pairs<I, K>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, ItemId)>,
        K: Into<String>,
    {
        let mut by_key = HashMap::new();
        for (k, id) in pairs {
            let k = k.into();
            if let Some(prev) = by_key.insert(k.clone(), id) {
                return Err(Error::Data(format!(
                    "duplicate catalog key {k:?} (ids {prev} and {id})"
                )));
            }
        }
        Ok(Catalog { by_key })
    }

    pub fn get(&self, key: &str) -> Option<ItemId> {
        self.by_key.get(key).copied()
    }

    pub fn len(&self) -> usize {
        self.by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_key.is_empty()
    }

    /// One past the largest id, i.e. the vocabulary size the ids live in.
    pub fn vocab_size(&self) -> usize {
        self.by_key.values().map(|&v| v as usize + 1).max().unwrap_or(0)
    }

    /// Item keys indexed by id; ids without a key get a placeholder.
    pub fn vocab(&self) -> Vec<String> {
        let mut keys: Vec<String> = (0..self.vocab_size()).map(|i| format!("#{i}")).collect();
        for (k, &id) in &self.by_key {
            keys[id as usize] = k.clone();
        }
        keys
    }
}

/// User sequences plus browsing sessions over a shared item vocabulary.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub user_sequences: BTreeMap<String, ItemSequence>,
    pub browsing_sessions: Vec<ItemSequence>,
    /// Item key for each id; its length is the vocabulary size.
    pub vocab: Vec<String>,
}

impl Corpus {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Keeps only the most recent `max_len` items of every sequence.
    pub fn truncate(&mut self, max_len: usize) {
        for s in self.user_sequences.values_mut() {
            *s = s.truncated(max_len);
        }
        for s in &mut self.browsing_sessions {
            *s = s.truncated(max_len);
        }
    }

    /// Checks length and id-range invariants.
    pub fn validate(&self, min_len: usize, max_len: usize) -> Result<()> {
        let v = self.vocab_size();
        let check = |what: &str, s: &ItemSequence| -> Result<()> {
            if s.len() < min_len || s.len() > max_len {
                return Err(Error::Data(format!(
                    "{what} has length {} outside [{min_len}, {max_len}]",
                    s.len()
                )));
            }
            if let Some(&bad) = s.items().iter().find(|&&i| i as usize >= v) {
                return Err(Error::Data(format!("{what} holds item {bad} >= vocab size {v}")));
            }
            Ok(())
        };
        for (u, s) in &self.user_sequences {
            check(&format!("user {u}"), s)?;
        }
        for (i, s) in self.browsing_sessions.iter().enumerate() {
            check(&format!("browsing session {i}"), s)?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

        let path = dir.join("vocab.tsv");
        let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        for (id, key) in self.vocab.iter().enumerate() {
            writeln!(w, "{key}\t{id}").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("users.jsonl");
        let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        for (user, seq) in &self.user_sequences {
            let line = serde_json::to_string(&UserLine {
                user: user.clone(),
                items: seq.clone(),
            })
            .expect("serializable");
            writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("browsing.jsonl");
        let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        for (i, seq) in self.browsing_sessions.iter().enumerate() {
            let line = serde_json::to_string(&SessionLine {
                session: i as u64,
                items: seq.clone(),
            })
            .expect("serializable");
            writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("vocab.tsv");
        let mut vocab: Vec<(usize, String)> = Vec::new();
        for (lineno, line) in read_lines(&path)?.into_iter().enumerate() {
            let (key, id) = split2(&line)
                .ok_or_else(|| Error::format(&path, format!("line {}: expected key<TAB>id", lineno + 1)))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| Error::format(&path, format!("line {}: bad id {id:?}", lineno + 1)))?;
            vocab.push((id, key.to_string()));
        }
        vocab.sort_by_key(|(id, _)| *id);
        if vocab.iter().enumerate().any(|(i, (id, _))| i != *id) {
            return Err(Error::format(&path, "ids must be dense 0..n"));
        }
        let vocab = vocab.into_iter().map(|(_, k)| k).collect();

        let path = dir.join("users.jsonl");
        let mut user_sequences = BTreeMap::new();
        for (lineno, line) in read_lines(&path)?.into_iter().enumerate() {
            let u: UserLine = serde_json::from_str(&line)
                .map_err(|e| Error::format(&path, format!("line {}: {e}", lineno + 1)))?;
            user_sequences.insert(u.user, u.items);
        }

        let path = dir.join("browsing.jsonl");
        let mut browsing_sessions = Vec::new();
        for (lineno, line) in read_lines(&path)?.into_iter().enumerate() {
            let s: SessionLine = serde_json::from_str(&line)
                .map_err(|e| Error::format(&path, format!("line {}: {e}", lineno + 1)))?;
            browsing_sessions.push(s.items);
        }

        Ok(Corpus {
            user_sequences,
            browsing_sessions,
            vocab,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct UserLine {
    user: String,
    items: ItemSequence,
}

#[derive(Serialize, Deserialize)]
struct SessionLine {
    session: u64,
    items: ItemSequence,
}

/// Leave-one-out split for a single user.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSplit {
    pub user: String,
    /// Everything but the last two items. Also the validation prefix.
    pub train: Vec<ItemId>,
    pub valid_target: ItemId,
    pub test_target: ItemId,
}

impl UserSplit {
    pub fn valid_prefix(&self) -> &[ItemId] {
        &self.train
    }

    pub fn test_prefix(&self) -> Vec<ItemId> {
        let mut p = self.train.clone();
        p.push(self.valid_target);
        p
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitSpec {
    pub users: Vec<UserSplit>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (valid|test)"))),
        }
    }
}

impl SplitSpec {
    /// (prefix, target) pairs for the requested split.
    pub fn examples(&self, split: Split) -> Vec<(Vec<ItemId>, ItemId)> {
        self.users
            .iter()
            .map(|u| match split {
                Split::Valid => (u.train.clone(), u.valid_target),
                Split::Test => (u.test_prefix(), u.test_target),
            })
            .collect()
    }
}

/// Groups events by user, orders them by time (stable on ties) and starts a
/// new session whenever consecutive timestamps are more than `gap_seconds`
/// apart. Sessions shorter than `min_len` events are dropped.
///
/// Users come out in ascending id order, sessions in time order.
pub fn segment_sessions(events: &[InteractionEvent], gap_seconds: u64, min_len: usize) -> Vec<KeyedSession> {
    let mut by_user: BTreeMap<&str, Vec<&InteractionEvent>> = BTreeMap::new();
    for e in events {
        by_user.entry(&e.user_id).or_default().push(e);
    }
    let mut out = Vec::new();
    for (user, mut evs) in by_user {
        evs.sort_by_key(|e| e.timestamp);
        let mut current = KeyedSession {
            user_id: user.to_string(),
            keys: Vec::new(),
            timestamps: Vec::new(),
        };
        for e in evs {
            if let Some(&last) = current.timestamps.last() {
                if e.timestamp - last > gap_seconds {
                    let done = std::mem::replace(
                        &mut current,
                        KeyedSession {
                            user_id: user.to_string(),
                            keys: Vec::new(),
                            timestamps: Vec::new(),
                        },
                    );
                    if done.len() >= min_len {
                        out.push(done);
                    }
                }
            }
            current.keys.push(e.item_key.clone());
            current.timestamps.push(e.timestamp);
        }
        if current.len() >= min_len {
            out.push(current);
        }
    }
    out
}

/// Maps entity keys to item ids through the catalog. Unmatched keys are
/// removed, then sessions below `min_len` are dropped.
pub fn align_items(sessions: &[KeyedSession], catalog: &Catalog, min_len: usize) -> Vec<ItemSequence> {
    sessions
        .iter()
        .filter_map(|s| {
            let ids: Vec<ItemId> = s.keys.iter().filter_map(|k| catalog.get(k)).collect();
            (ids.len() >= min_len).then(|| ItemSequence::new(ids))
        })
        .collect()
}

/// Builds per-user sequences from an interaction log: time-ordered, aligned
/// to the catalog, unmatched keys removed.
pub fn user_sequences(events: &[InteractionEvent], catalog: &Catalog) -> BTreeMap<String, ItemSequence> {
    let mut by_user: BTreeMap<&str, Vec<&InteractionEvent>> = BTreeMap::new();
    for e in events {
        by_user.entry(&e.user_id).or_default().push(e);
    }
    by_user
        .into_iter()
        .map(|(u, mut evs)| {
            evs.sort_by_key(|e| e.timestamp);
            let ids = evs.iter().filter_map(|e| catalog.get(&e.item_key)).collect();
            (u.to_string(), ItemSequence::new(ids))
        })
        .collect()
}

/// Drops users with fewer than `min_interactions` items.
pub fn filter_users(mut corpus: Corpus, min_interactions: usize) -> Corpus {
    corpus.user_sequences.retain(|_, s| s.len() >= min_interactions);
    if corpus.user_sequences.is_empty() {
        warn!("no user has at least {min_interactions} interactions; corpus is empty");
    }
    corpus
}

/// Leave-one-out: last item is the test target, second-to-last the
/// validation target, the rest is training data. Users with fewer than three
/// items are skipped.
pub fn build_splits(corpus: &Corpus) -> SplitSpec {
    let mut users = Vec::with_capacity(corpus.user_sequences.len());
    for (user, seq) in &corpus.user_sequences {
        let items = seq.items();
        let l = items.len();
        if l < 3 {
            warn!("user {user} has {l} items; excluded from splits");
            continue;
        }
        users.push(UserSplit {
            user: user.clone(),
            train: items[..l - 2].to_vec(),
            valid_target: items[l - 2],
            test_target: items[l - 1],
        });
    }
    SplitSpec { users }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(line);
        }
    }
    Ok(out)
}

fn split2(line: &str) -> Option<(&str, &str)> {
    let mut it = line.split('\t');
    let a = it.next()?;
    let b = it.next()?;
    it.next().is_none().then_some((a, b))
}

/// Reads `user_id \t item_key \t unix_timestamp` lines.
pub fn read_events(path: &Path) -> Result<Vec<InteractionEvent>> {
    let mut out = Vec::new();
    for (lineno, line) in read_lines(path)?.into_iter().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::format(
                path,
                format!("line {}: expected 3 tab-separated fields, got {}", lineno + 1, fields.len()),
            ));
        }
        let timestamp: i64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: bad timestamp {:?}", lineno + 1, fields[2])))?;
        if timestamp < 0 {
            return Err(Error::format(path, format!("line {}: negative timestamp", lineno + 1)));
        }
        out.push(InteractionEvent {
            user_id: fields[0].to_string(),
            item_key: fields[1].to_string(),
            timestamp: timestamp as u64,
        });
    }
    Ok(out)
}

/// Reads `item_key \t item_id` lines; duplicate keys are rejected.
pub fn read_catalog(path: &Path) -> Result<Catalog> {
    let mut pairs = Vec::new();
    for (lineno, line) in read_lines(path)?.into_iter().enumerate() {
        let (key, id) = split2(&line)
            .ok_or_else(|| Error::format(path, format!("line {}: expected key<TAB>id", lineno + 1)))?;
        let id: ItemId = id
            .trim()
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: bad item id {id:?}", lineno + 1)))?;
        pairs.push((key.to_string(), id));
    }
    Catalog::from_pairs(pairs).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_events(path: &Path, events: &[InteractionEvent]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for e in events {
        writeln!(w, "{}\t{}\t{}", e.user_id, e.item_key, e.timestamp).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub gap_seconds: u64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            gap_seconds: DEFAULT_GAP_SECONDS,
            min_len: DEFAULT_MIN_LEN,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

/// Full preprocessing: segment the browsing log, align sessions and user
/// interactions to the catalog, filter short users and truncate.
pub fn preprocess(
    browsing_events: &[InteractionEvent],
    interactions: &[InteractionEvent],
    catalog: &Catalog,
    cfg: PreprocessConfig,
) -> Corpus {
    let sessions = segment_sessions(browsing_events, cfg.gap_seconds, cfg.min_len);
    let browsing_sessions = align_items(&sessions, catalog, cfg.min_len);
    let corpus = Corpus {
        user_sequences: user_sequences(interactions, catalog),
        browsing_sessions,
        vocab: catalog.vocab(),
    };
    let mut corpus = filter_users(corpus, cfg.min_len);
    corpus.truncate(cfg.max_len);
    corpus
}

#[cfg(test)]
mod tests {
    use super::*;

    const H: u64 = 3600;

    fn ev(user: &str, key: &str, ts: u64) -> InteractionEvent {
        InteractionEvent {
            user_id: user.into(),
            item_key: key.into(),
            timestamp: ts,
        }
    }

    #[test]
    fn gap_rule_drops_short_leading_run() {
        let ts = [0, H, 2 * H, 9 * H, 10 * H, 11 * H, 12 * H, 13 * H];
        let events: Vec<_> = ts.iter().enumerate().map(|(i, &t)| ev("u", &format!("k{i}"), t)).collect();
        let s = segment_sessions(&events, 4 * H, 5);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].keys, vec!["k3", "k4", "k5", "k6", "k7"]);
    }

    #[test]
    fn single_event_yields_nothing() {
        assert!(segment_sessions(&[ev("u", "a", 10)], 4 * H, 5).is_empty());
        assert!(segment_sessions(&[], 4 * H, 5).is_empty());
    }

    #[test]
    fn minute_spaced_events_form_one_session() {
        let events: Vec<_> = (0..6).map(|i| ev("u", &format!("k{i}"), i * 60)).collect();
        let s = segment_sessions(&events, 4 * H, 5);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].len(), 6);
    }

    #[test]
    fn unsorted_events_are_sorted_stably() {
        let events = vec![
            ev("u", "c", 120),
            ev("u", "a", 0),
            ev("u", "b1", 60),
            ev("u", "b2", 60),
            ev("u", "d", 180),
            ev("u", "e", 240),
        ];
        let s = segment_sessions(&events, 4 * H, 5);
        assert_eq!(s[0].keys, vec!["a", "b1", "b2", "c", "d", "e"]);
    }

    #[test]
    fn gap_exactly_at_threshold_does_not_split() {
        let events: Vec<_> = (0..5).map(|i| ev("u", "x", i * 4 * H)).collect();
        assert_eq!(segment_sessions(&events, 4 * H, 5).len(), 1);
    }

    fn catalog() -> Catalog {
        Catalog::from_pairs([("A", 0), ("B", 1), ("C", 2), ("D", 3), ("E", 4)]).unwrap()
    }

    fn keyed(keys: &[&str]) -> KeyedSession {
        KeyedSession {
            user_id: "u".into(),
            keys: keys.iter().map(|s| s.to_string()).collect(),
            timestamps: (0..keys.len() as u64).collect(),
        }
    }

    #[test]
    fn alignment_removes_unmatched_then_checks_length() {
        let out = align_items(&[keyed(&["A", "B", "C", "D", "E", "F"])], &catalog(), 5);
        assert_eq!(out, vec![ItemSequence::new(vec![0, 1, 2, 3, 4])]);
        let out = align_items(&[keyed(&["A", "B", "X", "Y", "Z"])], &catalog(), 5);
        assert!(out.is_empty());
        let empty = Catalog::default();
        assert!(align_items(&[keyed(&["A", "B", "C", "D", "E"])], &empty, 5).is_empty());
    }

    #[test]
    fn duplicate_catalog_key_is_rejected() {
        let err = Catalog::from_pairs([("A", 0), ("A", 1)]).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    fn corpus_with(users: &[(&str, Vec<ItemId>)]) -> Corpus {
        Corpus {
            user_sequences: users
                .iter()
                .map(|(u, s)| (u.to_string(), ItemSequence::new(s.clone())))
                .collect(),
            browsing_sessions: vec![],
            vocab: (0..10).map(|i| format!("i{i}")).collect(),
        }
    }

    #[test]
    fn filter_users_boundary() {
        let c = corpus_with(&[("four", vec![1, 2, 3, 4]), ("five", vec![1, 2, 3, 4, 5])]);
        let f = filter_users(c, 5);
        assert_eq!(f.user_sequences.keys().collect::<Vec<_>>(), vec!["five"]);
        let c = corpus_with(&[("a", vec![1])]);
        assert!(filter_users(c, 5).user_sequences.is_empty());
    }

    #[test]
    fn leave_one_out_split() {
        let c = corpus_with(&[("u", vec![1, 2, 3, 4, 5]), ("short", vec![1, 2]), ("three", vec![7, 8, 9])]);
        let s = build_splits(&c);
        assert_eq!(s.users.len(), 2);
        let three = &s.users[0];
        assert_eq!(three.train, vec![7]);
        let u = &s.users[1];
        assert_eq!(u.train, vec![1, 2, 3]);
        assert_eq!(u.valid_prefix(), &[1, 2, 3]);
        assert_eq!(u.valid_target, 4);
        assert_eq!(u.test_prefix(), vec![1, 2, 3, 4]);
        assert_eq!(u.test_target, 5);
    }

    #[test]
    fn truncation_keeps_most_recent() {
        let s = ItemSequence::new((0..10).collect());
        assert_eq!(s.truncated(3).items(), &[7, 8, 9]);
        assert_eq!(s.truncated(50).len(), 10);
    }

    #[test]
    fn corpus_roundtrip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = corpus_with(&[("u1", vec![1, 2, 3, 4, 5]), ("u2", vec![5, 4, 3, 2, 1, 0])]);
        c.browsing_sessions = vec![ItemSequence::new(vec![9, 8, 7, 6, 5])];
        c.save(dir.path()).unwrap();
        assert_eq!(Corpus::load(dir.path()).unwrap(), c);
        c.validate(5, 50).unwrap();
    }

    #[test]
    fn event_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ev.tsv");
        std::fs::write(&p, "u1\tA\t10\nu1\tB\t20\n\n").unwrap();
        let ev = read_events(&p).unwrap();
        assert_eq!(ev.len(), 2);
        std::fs::write(&p, "u1\tA\t-5\n").unwrap();
        assert!(read_events(&p).is_err());
        std::fs::write(&p, "u1\tA\n").unwrap();
        assert!(read_events(&p).is_err());
        let c = dir.path().join("cat.tsv");
        std::fs::write(&c, "A\t0\nA\t1\n").unwrap();
        assert!(read_catalog(&c).is_err());
    }
}
