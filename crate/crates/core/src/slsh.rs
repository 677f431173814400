//! Two-layer (stratified) LSH index over one dataset slice.
//!
//! The outer layer is `L_out` l1 bit-sampling tables. Any outer bucket
//! holding more than `alpha * n_local` points is re-indexed by an inner layer
//! of `L_in` cosine tables over that bucket's population. A query collects
//! the union of colliding points (descending into the inner layer where one
//! exists) and ranks them with a counted linear scan.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::{cosine_distance, l1_distance, LabeledPoint, PointId, PointStore};
use crate::error::{Error, Result};
use crate::lsh::{derive_seed, BucketKey, ComposedHash, HashFamily, HashSpec};

const OUTER_STREAM: u64 = 0x6f75_7465_72; // "outer"
const INNER_STREAM: u64 = 0x696e_6e65_72; // "inner"

/// Metric used to rank candidates in the final linear scan.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMetric {
    #[default]
    L1,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlshConfig {
    pub m_out: usize,
    #[serde(rename = "L_out")]
    pub l_out: usize,
    pub m_in: usize,
    #[serde(rename = "L_in")]
    pub l_in: usize,
    pub alpha: f64,
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub inner_enabled: bool,
    pub master_seed: u64,
    #[serde(default)]
    pub rank_metric: RankMetric,
}

impl SlshConfig {
    /// Outer-only configuration with the given shape.
    pub fn outer_only(m_out: usize, l_out: usize, d: usize, k: usize, master_seed: u64) -> Self {
        Self {
            m_out,
            l_out,
            m_in: 0,
            l_in: 0,
            alpha: 0.005,
            d,
            k,
            inner_enabled: false,
            master_seed,
            rank_metric: RankMetric::L1,
        }
    }

    pub fn with_inner(mut self, m_in: usize, l_in: usize, alpha: f64) -> Self {
        self.m_in = m_in;
        self.l_in = l_in;
        self.alpha = alpha;
        self.inner_enabled = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_out == 0 || self.m_out == 0 {
            return Err(Error::invalid("L_out and m_out must be >= 1"));
        }
        if self.inner_enabled && (self.m_in == 0 || self.l_in == 0) {
            return Err(Error::invalid("inner layer enabled but m_in or L_in is 0"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        if self.d == 0 || self.k == 0 {
            return Err(Error::invalid("d and K must be >= 1"));
        }
        Ok(())
    }

    /// The `L_out` outer hash specs derived from `master_seed`.
    ///
    /// Table `t` always gets the same seed, so configurations differing only
    /// in `L_out` share their leading tables.
    pub fn outer_hash_specs(&self) -> Vec<HashSpec> {
        (0..self.l_out as u64)
            .map(|t| HashSpec::new(HashFamily::L1BitSample, derive_seed(self.master_seed, OUTER_STREAM, t), self.m_out, self.d))
            .collect()
    }

    fn inner_seed(&self, table: usize, j: usize) -> u64 {
        derive_seed(self.master_seed ^ derive_seed(table as u64, INNER_STREAM, 0), INNER_STREAM, j as u64)
    }
}

/// One neighbor: global point id, distance to the query, label.
///
/// Serialized as `[id, distance, label]` with the label as 0/1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(PointId, f64, u8)", into = "(PointId, f64, u8)")]
pub struct KnnEntry {
    pub point_id: PointId,
    pub distance: f64,
    pub label: bool,
}

impl From<(PointId, f64, u8)> for KnnEntry {
    fn from((point_id, distance, label): (PointId, f64, u8)) -> Self {
        Self { point_id, distance, label: label != 0 }
    }
}

impl From<KnnEntry> for (PointId, f64, u8) {
    fn from(e: KnnEntry) -> Self {
        (e.point_id, e.distance, e.label as u8)
    }
}

impl KnnEntry {
    /// Total ranking order: distance, then point id.
    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        self.distance.total_cmp(&other.distance).then(self.point_id.cmp(&other.point_id))
    }
}

struct Ranked(KnnEntry);

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Ranked {}
impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.rank_cmp(&other.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryStats {
    /// Distance computations per processor, one entry per worker used.
    pub comparisons_per_processor: Vec<u64>,
    pub candidates_unique: u64,
    pub inner_layer_hits: u64,
}

impl QueryStats {
    pub fn max_comparisons(&self) -> u64 {
        self.comparisons_per_processor.iter().copied().max().unwrap_or(0)
    }

    pub fn total_comparisons(&self) -> u64 {
        self.comparisons_per_processor.iter().sum()
    }

    /// Concatenates the per-processor counts of disjoint slices.
    pub fn absorb(&mut self, other: &QueryStats) {
        self.comparisons_per_processor.extend_from_slice(&other.comparisons_per_processor);
        self.candidates_unique += other.candidates_unique;
        self.inner_layer_hits += other.inner_layer_hits;
    }
}

pub type Buckets = HashMap<BucketKey, Vec<u32>>;

#[derive(Debug, Clone)]
pub struct InnerTable {
    pub hash: ComposedHash,
    pub buckets: Buckets,
}

#[derive(Debug, Clone)]
pub struct InnerLayer {
    pub tables: Vec<InnerTable>,
    pub population: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct OuterTable {
    /// Position among the `L_out` tables; seeds the inner layers.
    pub index: usize,
    pub hash: ComposedHash,
    pub buckets: Buckets,
    pub inner: HashMap<BucketKey, InnerLayer>,
}

impl OuterTable {
    pub fn bucket_count(&self) -> usize {
        self.buckets.len()
    }
}

fn bucketize(store: &PointStore, hash: &ComposedHash, ids: impl Iterator<Item = u32>) -> Buckets {
    let mut buckets: Buckets = HashMap::new();
    for local in ids {
        buckets.entry(hash.key(store.point(local))).or_default().push(local);
    }
    buckets
}

fn check_hash(hash: &ComposedHash, family: HashFamily, d: usize) -> Result<()> {
    if hash.family() != family {
        return Err(Error::invalid(format!("expected a {family} hash, got {}", hash.family())));
    }
    if hash.d() != d {
        return Err(Error::invalid(format!("hash dimension {} does not match point dimension {d}", hash.d())));
    }
    Ok(())
}

/// Partitions every point of `store` into buckets of `hash`.
pub fn build_outer_table(store: &PointStore, hash: ComposedHash, index: usize) -> Result<OuterTable> {
    check_hash(&hash, HashFamily::L1BitSample, store.d())?;
    let buckets = bucketize(store, &hash, 0..store.len() as u32);
    Ok(OuterTable { index, hash, buckets, inner: HashMap::new() })
}

/// One outer table per hash, built concurrently. Table `i` gets index `i`.
pub fn build_outer_tables(store: &PointStore, hashes: &[ComposedHash]) -> Result<Vec<OuterTable>> {
    use rayon::prelude::*;
    hashes.par_iter().enumerate().map(|(i, h)| build_outer_table(store, h.clone(), i)).collect()
}

/// Buckets strictly larger than this get an inner layer.
pub fn inner_threshold(alpha: f64, n_local: usize) -> f64 {
    alpha * n_local as f64
}

/// Attaches an inner cosine layer to every bucket of `table` whose
/// population exceeds `alpha * n_local`. Returns the number of layers built.
///
/// Inner hash seeds depend on `(master_seed, table.index, j)` only, so the
/// result does not depend on which worker builds the table.
pub fn build_inner_layers(table: &mut OuterTable, cfg: &SlshConfig, n_local: usize, store: &PointStore) -> Result<usize> {
    table.inner.clear();
    if !cfg.inner_enabled {
        return Ok(0);
    }
    let threshold = inner_threshold(cfg.alpha, n_local);
    let hashes = (0..cfg.l_in)
        .map(|j| ComposedHash::derive(HashFamily::CosineProjection, cfg.inner_seed(table.index, j), cfg.m_in, store.d()))
        .collect::<Result<Vec<_>>>()?;

    let mut keys: Vec<&BucketKey> = table.buckets.iter().filter(|(_, ids)| ids.len() as f64 > threshold).map(|(k, _)| k).collect();
    keys.sort();
    let mut layers = HashMap::with_capacity(keys.len());
    for key in keys {
        let population = table.buckets[key].clone();
        let tables = hashes
            .iter()
            .map(|h| InnerTable { hash: h.clone(), buckets: bucketize(store, h, population.iter().copied()) })
            .collect();
        layers.insert(key.clone(), InnerLayer { tables, population });
    }
    let built = layers.len();
    table.inner = layers;
    Ok(built)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Candidates {
    /// Sorted, deduplicated local indices.
    pub ids: Vec<u32>,
    /// Tables whose matching outer bucket carried an inner layer.
    pub inner_layer_hits: u64,
}

/// Union of the points colliding with `query` in `tables`.
///
/// Where the matched outer bucket has an inner layer, only the members of
/// the query's inner buckets are contributed.
pub fn candidates_for(query: &[f64], tables: &[OuterTable]) -> Candidates {
    let mut ids = Vec::new();
    let mut inner_layer_hits = 0;
    for table in tables {
        let key = table.hash.key(query);
        if let Some(layer) = table.inner.get(&key) {
            inner_layer_hits += 1;
            for inner in &layer.tables {
                if let Some(bucket) = inner.buckets.get(&inner.hash.key(query)) {
                    ids.extend_from_slice(bucket);
                }
            }
        } else if let Some(bucket) = table.buckets.get(&key) {
            ids.extend_from_slice(bucket);
        }
    }
    ids.sort_unstable();
    ids.dedup();
    Candidates { ids, inner_layer_hits }
}

/// Linear scan: the `k` nearest of `ids` by (distance, point id) and the
/// number of distance computations performed.
pub fn scan_candidates(query: &[f64], ids: &[u32], store: &PointStore, k: usize, metric: RankMetric) -> (Vec<KnnEntry>, u64) {
    if k == 0 {
        return (Vec::new(), 0);
    }
    let mut heap: BinaryHeap<Ranked> = BinaryHeap::with_capacity(k + 1);
    for &local in ids {
        let point = store.point(local);
        let distance = match metric {
            RankMetric::L1 => l1_distance(query, point),
            RankMetric::Cosine => cosine_distance(query, point),
        };
        let entry = KnnEntry { point_id: store.id(local), distance, label: store.label(local) };
        if heap.len() < k {
            heap.push(Ranked(entry));
        } else if heap.peek().is_some_and(|top| entry.rank_cmp(&top.0) == Ordering::Less) {
            heap.pop();
            heap.push(Ranked(entry));
        }
    }
    let out = heap.into_sorted_vec().into_iter().map(|r| r.0).collect();
    (out, ids.len() as u64)
}

/// Global top-`k` over sorted partial lists.
///
/// A point id appearing in several partials is kept once, at its smallest
/// distance. The result is independent of the order and grouping of the
/// partials.
pub fn merge_topk<P: AsRef<[KnnEntry]>>(partials: &[P], k: usize) -> Vec<KnnEntry> {
    let mut all: Vec<KnnEntry> = partials.iter().flat_map(|p| p.as_ref().iter().copied()).collect();
    all.sort_by(KnnEntry::rank_cmp);
    let mut seen = HashSet::with_capacity(k);
    let mut out = Vec::with_capacity(k.min(all.len()));
    for e in all {
        if out.len() == k {
            break;
        }
        if seen.insert(e.point_id) {
            out.push(e);
        }
    }
    out
}

/// A single-process SLSH index over one slice.
#[derive(Debug, Clone)]
pub struct SlshIndex {
    cfg: SlshConfig,
    store: Arc<PointStore>,
    tables: Vec<OuterTable>,
    inner_layers: usize,
}

impl SlshIndex {
    /// Builds with the outer hashes derived from `cfg.master_seed`.
    pub fn build(cfg: SlshConfig, points: &[LabeledPoint]) -> Result<Self> {
        let hashes = cfg.outer_hash_specs().iter().map(HashSpec::regenerate).collect::<Result<Vec<_>>>()?;
        Self::build_with_hashes(cfg, points, hashes)
    }

    pub fn build_with_hashes(cfg: SlshConfig, points: &[LabeledPoint], hashes: Vec<ComposedHash>) -> Result<Self> {
        let store = Arc::new(PointStore::new(cfg.d, points)?);
        Self::build_on_store(cfg, store, hashes)
    }

    pub fn build_on_store(cfg: SlshConfig, store: Arc<PointStore>, hashes: Vec<ComposedHash>) -> Result<Self> {
        use rayon::prelude::*;
        cfg.validate()?;
        if store.d() != cfg.d {
            return Err(Error::invalid(format!("store dimension {} != configured d {}", store.d(), cfg.d)));
        }
        let mut tables = build_outer_tables(&store, &hashes)?;
        let n_local = store.len();
        let inner_layers = tables
            .par_iter_mut()
            .map(|t| build_inner_layers(t, &cfg, n_local, &store))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum();
        Ok(Self { cfg, store, tables, inner_layers })
    }

    pub(crate) fn from_parts(cfg: SlshConfig, store: Arc<PointStore>, tables: Vec<OuterTable>) -> Self {
        let inner_layers = tables.iter().map(|t| t.inner.len()).sum();
        Self { cfg, store, tables, inner_layers }
    }

    pub fn config(&self) -> &SlshConfig {
        &self.cfg
    }

    pub fn store(&self) -> &Arc<PointStore> {
        &self.store
    }

    pub fn tables(&self) -> &[OuterTable] {
        &self.tables
    }

    pub fn inner_layer_count(&self) -> usize {
        self.inner_layers
    }

    pub fn candidates(&self, query: &[f64], tables: Range<usize>) -> Result<Candidates> {
        self.check_query(query)?;
        Ok(candidates_for(query, &self.tables[tables]))
    }

    /// Approximate K-NN with all tables on one processor.
    pub fn query(&self, query: &[f64], k: usize) -> Result<(Vec<KnnEntry>, QueryStats)> {
        self.check_query(query)?;
        let cands = candidates_for(query, &self.tables);
        let (entries, comparisons) = scan_candidates(query, &cands.ids, &self.store, k, self.cfg.rank_metric);
        let stats = QueryStats {
            comparisons_per_processor: vec![comparisons],
            candidates_unique: cands.ids.len() as u64,
            inner_layer_hits: cands.inner_layer_hits,
        };
        Ok((entries, stats))
    }

    fn check_query(&self, query: &[f64]) -> Result<()> {
        if query.len() != self.cfg.d {
            return Err(Error::invalid(format!("query has dimension {}, index expects {}", query.len(), self.cfg.d)));
        }
        Ok(())
    }
}
