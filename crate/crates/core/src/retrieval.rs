//! Maximum-inner-product search over browsing-session embeddings.
//!
//! Two modes share one data layout. `Exact` scans every row in blocks and is
//! the correctness reference. `Clustered` partitions rows with spherical
//! k-means and scans only the `n_probe` lists whose centroids score highest
//! against the query.
//!
//! Rows are unit-norm and rounded to `f32` at build time, so an index
//! written to disk and loaded back is bitwise identical to the one built in
//! memory.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{ItemId, ItemSequence};
use crate::encoder::{self, EncoderParams};
use crate::error::{Error, Result};
use crate::linalg::{self, dot};

const MAGIC: &[u8; 8] = b"RUELIDX\0";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IndexMode {
    Exact,
    Clustered,
}

impl std::str::FromStr for IndexMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(IndexMode::Exact),
            "clustered" => Ok(IndexMode::Clustered),
            other => Err(Error::Config(format!("unknown index mode {other:?} (exact|clustered)"))),
        }
    }
}

impl std::fmt::Display for IndexMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IndexMode::Exact => "exact",
            IndexMode::Clustered => "clustered",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalConfig {
    pub mode: IndexMode,
    /// Number of inverted lists; 0 picks `round(sqrt(M))`.
    pub n_lists: usize,
    pub n_probe: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            mode: IndexMode::Exact,
            n_lists: 0,
            n_probe: 28,
            kmeans_iters: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub session_id: u64,
    /// Row of the session inside the index.
    pub row: usize,
    pub score: f64,
}

/// Hits ordered by descending score, ties by ascending session id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RetrievalResult {
    pub hits: Vec<Hit>,
}

impl RetrievalResult {
    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.hits.iter().map(|h| h.score).collect()
    }
}

fn ranks_before(a: &Hit, b: &Hit) -> bool {
    match a.score.partial_cmp(&b.score) {
        Some(Ordering::Greater) => true,
        Some(Ordering::Less) => false,
        _ => a.session_id < b.session_id,
    }
}

/// Bounded best-k collector.
struct TopK {
    k: usize,
    hits: Vec<Hit>,
}

impl TopK {
    fn new(k: usize) -> Self {
        TopK {
            k,
            hits: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    fn push(&mut self, hit: Hit) {
        if self.hits.len() == self.k {
            if !ranks_before(&hit, &self.hits[self.k - 1]) {
                return;
            }
            self.hits.pop();
        }
        let pos = self.hits.partition_point(|h| ranks_before(h, &hit));
        self.hits.insert(pos, hit);
    }

    fn finish(self) -> RetrievalResult {
        RetrievalResult { hits: self.hits }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Clusters {
    centroids: Vec<f64>,
    n_lists: usize,
    n_probe: usize,
    assignment: Vec<u32>,
    lists: Vec<Vec<u32>>,
}

/// Immutable session-embedding index.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    dim: usize,
    vectors: Vec<f64>,
    session_ids: Vec<u64>,
    item_offsets: Vec<u64>,
    items: Vec<ItemId>,
    clusters: Option<Clusters>,
}

fn round_f32(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

impl RetrievalIndex {
    /// Builds an index from raw vectors; rows are normalized and rounded to
    /// single precision.
    pub fn from_vectors(
        dim: usize,
        session_ids: Vec<u64>,
        rows: &[Vec<f64>],
        session_items: Vec<Vec<ItemId>>,
        config: &RetrievalConfig,
    ) -> Result<Self> {
        if rows.len() != session_ids.len() || rows.len() != session_items.len() {
            return Err(Error::Input("rows, ids and items must align".into()));
        }
        let mut vectors = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::Input(format!("row {i} has width {} != {dim}", r.len())));
            }
            let (mut n, norm) = linalg::l2_normalize(r);
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Input(format!("row {i} cannot be normalized")));
            }
            round_f32(&mut n);
            vectors.extend(n);
        }
        let mut item_offsets = vec![0u64];
        let mut items = Vec::new();
        for s in session_items {
            items.extend(s);
            item_offsets.push(items.len() as u64);
        }
        let mut index = RetrievalIndex {
            dim,
            vectors,
            session_ids,
            item_offsets,
            items,
            clusters: None,
        };
        if config.mode == IndexMode::Clustered && !index.is_empty() {
            index.clusters = Some(index.train_clusters(config));
        }
        Ok(index)
    }

    /// Encodes every session with the key encoder and indexes the pooled
    /// vectors. Session ids are positions in `sessions`.
    pub fn build(sessions: &[ItemSequence], key_encoder: &EncoderParams, config: &RetrievalConfig) -> Result<Self> {
        let encodings = encoder::encode_batch(key_encoder, sessions)?;
        let rows: Vec<Vec<f64>> = encodings.into_iter().map(|e| e.pooled).collect();
        let ids = (0..sessions.len() as u64).collect();
        let items = sessions.iter().map(|s| s.items().to_vec()).collect();
        Self::from_vectors(key_encoder.config.dim, ids, &rows, items, config)
    }

    pub fn len(&self) -> usize {
        self.session_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.session_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> IndexMode {
        if self.clusters.is_some() {
            IndexMode::Clustered
        } else {
            IndexMode::Exact
        }
    }

    pub fn vector(&self, row: usize) -> &[f64] {
        &self.vectors[row * self.dim..(row + 1) * self.dim]
    }

    pub fn session_id(&self, row: usize) -> u64 {
        self.session_ids[row]
    }

    pub fn session_items(&self, row: usize) -> &[ItemId] {
        let (a, b) = (self.item_offsets[row] as usize, self.item_offsets[row + 1] as usize);
        &self.items[a..b]
    }

    /// Changes how many lists a clustered search probes.
    pub fn set_n_probe(&mut self, n_probe: usize) {
        if let Some(c) = &mut self.clusters {
            c.n_probe = n_probe.clamp(1, c.n_lists);
        }
    }

    fn train_clusters(&self, config: &RetrievalConfig) -> Clusters {
        let m = self.len();
        let d = self.dim;
        let n_lists = if config.n_lists == 0 {
            ((m as f64).sqrt().round() as usize).max(1)
        } else {
            config.n_lists
        }
        .min(m);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut centroids: Vec<f64> = sample(&mut rng, m, n_lists)
            .into_iter()
            .flat_map(|r| self.vector(r).to_vec())
            .collect();
        let mut assignment = vec![0u32; m];
        for _ in 0..config.kmeans_iters.max(1) {
            for (r, a) in assignment.iter_mut().enumerate() {
                *a = nearest_centroid(&centroids, n_lists, d, self.vector(r)) as u32;
            }
            let mut sums = vec![0.0; n_lists * d];
            let mut counts = vec![0usize; n_lists];
            for (r, &a) in assignment.iter().enumerate() {
                linalg::add_assign(&mut sums[a as usize * d..(a as usize + 1) * d], self.vector(r));
                counts[a as usize] += 1;
            }
            for c in 0..n_lists {
                let s = &sums[c * d..(c + 1) * d];
                // empty clusters keep their previous centroid
                if counts[c] > 0 && linalg::norm(s) > 0.0 {
                    let (n, _) = linalg::l2_normalize(s);
                    centroids[c * d..(c + 1) * d].copy_from_slice(&n);
                }
            }
        }
        round_f32(&mut centroids);
        for (r, a) in assignment.iter_mut().enumerate() {
            *a = nearest_centroid(&centroids, n_lists, d, self.vector(r)) as u32;
        }
        let lists = lists_from_assignment(&assignment, n_lists);
        Clusters {
            centroids,
            n_lists,
            n_probe: config.n_probe.clamp(1, n_lists),
            assignment,
            lists,
        }
    }

    fn check_query(&self, query: &[f64], k: usize) -> Result<()> {
        if query.len() != self.dim {
            return Err(Error::Input(format!("query width {} != index dim {}", query.len(), self.dim)));
        }
        if k == 0 {
            return Err(Error::Input("k must be at least 1".into()));
        }
        Ok(())
    }

    #[inline]
    fn hit(&self, row: usize, score: f64) -> Hit {
        Hit {
            session_id: self.session_ids[row],
            row,
            score,
        }
    }

    /// Exhaustive top-k by inner product.
    pub fn search_exact(&self, query: &[f64], k: usize) -> Result<RetrievalResult> {
        self.check_query(query, k)?;
        let mut top = TopK::new(k.min(self.len()).max(1));
        for r in 0..self.len() {
            top.push(self.hit(r, dot(query, self.vector(r))));
        }
        Ok(top.finish())
    }

    /// Top-k in the index's own mode. Returns `min(k, M)` hits.
    pub fn search(&self, query: &[f64], k: usize) -> Result<RetrievalResult> {
        match &self.clusters {
            None => self.search_exact(query, k),
            Some(c) => {
                self.check_query(query, k)?;
                let want = k.min(self.len());
                let mut order: Vec<(f64, usize)> = (0..c.n_lists)
                    .map(|l| (dot(query, &c.centroids[l * self.dim..(l + 1) * self.dim]), l))
                    .collect();
                order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
                let mut top = TopK::new(want.max(1));
                let mut seen = 0;
                for (probed, &(_, l)) in order.iter().enumerate() {
                    if probed >= c.n_probe && seen >= want {
                        break;
                    }
                    for &r in &c.lists[l] {
                        let r = r as usize;
                        top.push(self.hit(r, dot(query, self.vector(r))));
                    }
                    seen += c.lists[l].len();
                }
                Ok(top.finish())
            }
        }
    }

    /// Searches many queries at once. Exact mode scans rows in blocks shared
    /// across a block of queries; results equal per-query [`search`].
    ///
    /// [`search`]: RetrievalIndex::search
    pub fn batch_search<Q: AsRef<[f64]>>(&self, queries: &[Q], k: usize) -> Result<Vec<RetrievalResult>> {
        for q in queries {
            self.check_query(q.as_ref(), k)?;
        }
        if self.clusters.is_some() {
            return queries.iter().map(|q| self.search(q.as_ref(), k)).collect();
        }
        const QUERY_BLOCK: usize = 32;
        const ROW_BLOCK: usize = 256;
        let mut out = Vec::with_capacity(queries.len());
        for qb in queries.chunks(QUERY_BLOCK) {
            let mut tops: Vec<TopK> = qb.iter().map(|_| TopK::new(k.min(self.len()).max(1))).collect();
            let mut r0 = 0;
            while r0 < self.len() {
                let r1 = (r0 + ROW_BLOCK).min(self.len());
                for (q, top) in qb.iter().zip(tops.iter_mut()) {
                    let q = q.as_ref();
                    for r in r0..r1 {
                        top.push(self.hit(r, dot(q, self.vector(r))));
                    }
                }
                r0 = r1;
            }
            out.extend(tops.into_iter().map(TopK::finish));
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = self.len();
        let mut b = Vec::with_capacity(64 + m * (self.dim * 4 + 16) + self.items.len() * 4);
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(m as u64).to_le_bytes());
        b.extend_from_slice(&(self.dim as u32).to_le_bytes());
        b.push(match self.mode() {
            IndexMode::Exact => 0,
            IndexMode::Clustered => 1,
        });
        let (n_lists, n_probe) = self.clusters.as_ref().map_or((0, 0), |c| (c.n_lists, c.n_probe));
        b.extend_from_slice(&(n_lists as u32).to_le_bytes());
        b.extend_from_slice(&(n_probe as u32).to_le_bytes());
        b.extend_from_slice(&(self.items.len() as u64).to_le_bytes());
        for &v in &self.vectors {
            b.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &id in &self.session_ids {
            b.extend_from_slice(&id.to_le_bytes());
        }
        for &o in &self.item_offsets {
            b.extend_from_slice(&o.to_le_bytes());
        }
        for &it in &self.items {
            b.extend_from_slice(&it.to_le_bytes());
        }
        if let Some(c) = &self.clusters {
            for &v in &c.centroids {
                b.extend_from_slice(&(v as f32).to_le_bytes());
            }
            for &a in &c.assignment {
                b.extend_from_slice(&a.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(Error::format(path, "not an index file (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported index version {version}")));
        }
        let m = r.u64()? as usize;
        let dim = r.u32()? as usize;
        let mode = r.take(1)?[0];
        let n_lists = r.u32()? as usize;
        let n_probe = r.u32()? as usize;
        let n_items = r.u64()? as usize;
        let vectors = r.f32s(m * dim)?;
        let session_ids = (0..m).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let item_offsets = (0..=m).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        if item_offsets.last().copied() != Some(n_items as u64) || item_offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::format(path, "inconsistent item offsets"));
        }
        let items = (0..n_items).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let clusters = match mode {
            0 => None,
            1 => {
                let centroids = r.f32s(n_lists * dim)?;
                let assignment = (0..m).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                if assignment.iter().any(|&a| a as usize >= n_lists) {
                    return Err(Error::format(path, "list assignment out of range"));
                }
                let lists = lists_from_assignment(&assignment, n_lists);
                Some(Clusters {
                    centroids,
                    n_lists,
                    n_probe,
                    assignment,
                    lists,
                })
            }
            other => return Err(Error::format(path, format!("unknown mode byte {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after index"));
        }
        Ok(RetrievalIndex {
            dim,
            vectors,
            session_ids,
            item_offsets,
            items,
            clusters,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn nearest_centroid(centroids: &[f64], n: usize, d: usize, v: &[f64]) -> usize {
    let mut best = 0;
    let mut best_s = f64::NEG_INFINITY;
    for c in 0..n {
        let s = dot(&centroids[c * d..(c + 1) * d], v);
        if s > best_s {
            best_s = s;
            best = c;
        }
    }
    best
}

fn lists_from_assignment(assignment: &[u32], n_lists: usize) -> Vec<Vec<u32>> {
    let mut lists = vec![Vec::new(); n_lists];
    for (r, &a) in assignment.iter().enumerate() {
        lists[a as usize].push(r as u32);
    }
    lists
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis_index() -> RetrievalIndex {
        let rows = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        RetrievalIndex::from_vectors(3, vec![1, 2, 3], &rows, vec![vec![0]; 3], &RetrievalConfig::default()).unwrap()
    }

    #[test]
    fn orthonormal_lookup() {
        let idx = basis_index();
        let r = idx.search(&[0.0, 1.0, 0.0], 1).unwrap();
        assert_eq!(r.hits.len(), 1);
        assert_eq!(r.hits[0].session_id, 2);
        assert_eq!(r.hits[0].score, 1.0);
    }

    #[test]
    fn k_beyond_size_returns_everything_sorted() {
        let idx = basis_index();
        let r = idx.search(&[0.2, 0.9, 0.5], 10).unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(r.hits.iter().map(|h| h.session_id).collect::<Vec<_>>(), vec![2, 3, 1]);
    }

    #[test]
    fn ties_prefer_lower_session_id() {
        let rows = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let idx = RetrievalIndex::from_vectors(2, vec![9, 4, 1], &rows, vec![vec![]; 3], &RetrievalConfig::default()).unwrap();
        let r = idx.search(&[1.0, 0.0], 2).unwrap();
        assert_eq!(r.hits[0].session_id, 4);
        assert_eq!(r.hits[1].session_id, 9);
    }

    #[test]
    fn empty_index_returns_nothing() {
        let idx = RetrievalIndex::from_vectors(2, vec![], &[], vec![], &RetrievalConfig::default()).unwrap();
        assert!(idx.search(&[1.0, 0.0], 3).unwrap().is_empty());
        assert!(idx.search(&[1.0], 3).is_err());
        assert!(idx.search(&[1.0, 0.0], 0).is_err());
    }

    #[test]
    fn file_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![(i as f64).sin(), (i as f64 * 0.3).cos(), 0.1]).collect();
        let items: Vec<Vec<ItemId>> = (0..50).map(|i| vec![i, i + 1]).collect();
        for mode in [IndexMode::Exact, IndexMode::Clustered] {
            let cfg = RetrievalConfig {
                mode,
                ..Default::default()
            };
            let idx = RetrievalIndex::from_vectors(3, (0..50).collect(), &rows, items.clone(), &cfg).unwrap();
            let p = dir.path().join(format!("{mode}.idx"));
            idx.save(&p).unwrap();
            let back = RetrievalIndex::load(&p).unwrap();
            assert_eq!(back, idx);
            assert_eq!(back.session_items(7), &[7, 8]);
        }
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let idx = basis_index();
        let bytes = idx.to_bytes();
        let p = Path::new("mem");
        assert!(RetrievalIndex::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(RetrievalIndex::from_bytes(&bad, p).is_err());
    }
}
