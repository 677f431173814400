//! Exhaustive baseline, prediction and retrieval metrics, and the benchmark
//! harness.
//!
//! Speed is measured as the maximum number of distance computations over
//! all processors for a query. The baseline is a data-parallel exhaustive
//! l1 scan (PKNN) where each of the `p * ν` processors scans an equal share,
//! so its cost per processor is `ceil(n / (p ν))`.

use std::collections::HashSet;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, PointStore};
use crate::error::{Error, Result};
use crate::node::DatasetRegistry;
use crate::orchestrator::{partition_dataset, weighted_vote, ClusterConfig, Orchestrator, VotingConfig};
use crate::slsh::{merge_topk, scan_candidates, KnnEntry, RankMetric, SlshConfig};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Matthews correlation coefficient; 0 when any marginal is empty.
pub fn mcc(cm: &ConfusionMatrix) -> f64 {
    let (tp, fp, fn_, tn) = (cm.tp as f64, cm.fp as f64, cm.fn_ as f64, cm.tn as f64);
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    if factors.contains(&0.0) {
        return 0.0;
    }
    let denom = factors.iter().map(|f| f.sqrt()).product::<f64>();
    ((tp * tn - fp * fn_) / denom).clamp(-1.0, 1.0)
}

/// `|approx ∩ exact| / k`, by point id.
pub fn recall_at_k(approx: &[KnnEntry], exact: &[KnnEntry], k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let exact_ids: HashSet<u64> = exact.iter().take(k).map(|e| e.point_id).collect();
    let hit = approx.iter().take(k).filter(|e| exact_ids.contains(&e.point_id)).count();
    hit as f64 / k as f64
}

/// Share sizes of the exhaustive baseline over `processors` processors.
pub fn pknn_share_sizes(n: usize, processors: usize) -> Vec<usize> {
    partition_dataset(n, processors).iter().map(|r| r.len()).collect()
}

/// Largest per-processor cost of the exhaustive baseline: `ceil(n / processors)`.
pub fn pknn_per_processor(n: usize, processors: usize) -> u64 {
    n.div_ceil(processors.max(1)) as u64
}

/// Exact l1 top-`k` over `store`, computed as `p * nodes` data-parallel
/// shares reduced with the same merge as the index.
pub fn pknn_query(query: &[f64], store: &PointStore, k: usize, p: usize, nodes: usize) -> Result<(Vec<KnnEntry>, Vec<u64>)> {
    let processors = p * nodes;
    if processors == 0 {
        return Err(Error::invalid("p * nodes must be >= 1"));
    }
    if query.len() != store.d() {
        return Err(Error::invalid(format!("query has dimension {}, dataset has {}", query.len(), store.d())));
    }
    let shares = partition_dataset(store.len(), processors);
    let partials: Vec<(Vec<KnnEntry>, u64)> = shares
        .par_iter()
        .map(|r| {
            let ids: Vec<u32> = (r.start as u32..r.end as u32).collect();
            scan_candidates(query, &ids, store, k, RankMetric::L1)
        })
        .collect();
    let counts = partials.iter().map(|(_, c)| *c).collect();
    let lists: Vec<&[KnnEntry]> = partials.iter().map(|(e, _)| e.as_slice()).collect();
    Ok((merge_topk(&lists, k), counts))
}

/// Baseline cost over the index's median cost.
pub fn speedup(pknn_per_processor: u64, median_comparisons: f64) -> f64 {
    pknn_per_processor as f64 / median_comparisons
}

/// Median of an already sorted slice (mean of the middle pair when even).
pub fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MedianCi {
    pub median: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Percentile bootstrap interval for the median.
///
/// The interval is widened to contain the sample median when the bootstrap
/// percentiles fall on one side of it.
pub fn bootstrap_median_ci(samples: &[f64], resamples: usize, level: f64, seed: u64) -> Result<MedianCi> {
    if samples.is_empty() {
        return Err(Error::invalid("bootstrap needs at least one sample"));
    }
    if resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid("bootstrap needs resamples >= 1 and level in (0, 1)"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = median_sorted(&sorted);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = samples.len();
    let mut buf = vec![0.0; n];
    let mut medians: Vec<f64> = (0..resamples)
        .map(|_| {
            for slot in buf.iter_mut() {
                *slot = samples[rng.random_range(0..n)];
            }
            buf.sort_by(f64::total_cmp);
            median_sorted(&buf)
        })
        .collect();
    medians.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let lo = quantile_sorted(&medians, tail).min(median);
    let hi = quantile_sorted(&medians, 1.0 - tail).max(median);
    Ok(MedianCi { median, lo, hi })
}

/// Parameter grid: every `(m_out, L_out)` pair outer-only, plus every
/// `(m_in, L_in)` inner configuration either at the onset pair or, when no
/// onset is given, at every outer pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamGrid {
    pub m_out: Vec<usize>,
    #[serde(rename = "L_out")]
    pub l_out: Vec<usize>,
    #[serde(default)]
    pub m_in: Vec<usize>,
    #[serde(default, rename = "L_in")]
    pub l_in: Vec<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub onset: Option<(usize, usize)>,
}

fn default_alpha() -> f64 {
    0.005
}

impl ParamGrid {
    /// The sweep used for the full-size AHE experiments.
    pub fn reference() -> Self {
        Self {
            m_out: vec![100, 125, 150, 175, 200],
            l_out: vec![72, 96, 120],
            m_in: vec![40, 65, 90, 115],
            l_in: vec![20, 60],
            alpha: 0.005,
            onset: Some((125, 120)),
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn expand(&self, base: &SlshConfig) -> Vec<SlshConfig> {
        let outer = |m_out, l_out| SlshConfig { m_out, l_out, inner_enabled: false, m_in: 0, l_in: 0, ..base.clone() };
        let mut out = Vec::new();
        for &m in &self.m_out {
            for &l in &self.l_out {
                out.push(outer(m, l));
            }
        }
        let onsets: Vec<(usize, usize)> = match self.onset {
            Some(o) => vec![o],
            None => out.iter().map(|c| (c.m_out, c.l_out)).collect(),
        };
        for (m_out, l_out) in onsets {
            for &m_in in &self.m_in {
                for &l_in in &self.l_in {
                    out.push(outer(m_out, l_out).with_inner(m_in, l_in, self.alpha));
                }
            }
        }
        out
    }
}

/// How benchmark clusters are formed.
#[derive(Debug, Clone)]
pub enum ClusterMode {
    /// `nodes` in-process nodes of `workers` workers each.
    InProcess { nodes: usize, workers: usize },
    /// Remote nodes from a cluster config; they must be able to read the
    /// dataset under the name passed to the benchmark.
    Remote(ClusterConfig),
}

#[derive(Debug, Clone)]
pub struct BenchSettings {
    pub voting: VotingConfig,
    pub bootstrap_resamples: usize,
    pub bootstrap_level: f64,
    pub bootstrap_seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self { voting: VotingConfig::default(), bootstrap_resamples: 1000, bootstrap_level: 0.95, bootstrap_seed: 2019 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub config: SlshConfig,
    pub nodes: usize,
    pub processors: usize,
    /// Maximum per-processor comparisons, one entry per query.
    pub max_comparisons: Vec<u64>,
    pub candidates: Vec<u64>,
    pub median: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub median_candidates: f64,
    pub mcc: f64,
    pub recall_at_k: f64,
    pub pknn_per_processor: u64,
    pub speedup: f64,
    pub confusion: ConfusionMatrix,
    /// Set when the grid point could not be built or queried.
    pub error: Option<String>,
}

impl BenchResult {
    fn failed(config: SlshConfig, nodes: usize, error: String) -> Self {
        Self {
            config,
            nodes,
            processors: 0,
            max_comparisons: Vec::new(),
            candidates: Vec::new(),
            median: f64::NAN,
            ci_low: f64::NAN,
            ci_high: f64::NAN,
            median_candidates: f64::NAN,
            mcc: f64::NAN,
            recall_at_k: f64::NAN,
            pknn_per_processor: 0,
            speedup: f64::NAN,
            confusion: ConfusionMatrix::default(),
            error: Some(error),
        }
    }
}

/// Exact neighbors of every query, computed once and shared by all grid
/// points.
pub struct GroundTruth {
    pub neighbors: Vec<Vec<KnnEntry>>,
}

impl GroundTruth {
    pub fn compute(store: &PointStore, queries: &Dataset, k: usize) -> Result<Self> {
        let neighbors = queries
            .points
            .iter()
            .map(|q| pknn_query(&q.features, store, k, 1, 1).map(|(e, _)| e))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { neighbors })
    }
}

/// Holds the dataset and the cluster used by a benchmark run.
pub struct Bench {
    dataset: Arc<Dataset>,
    name: String,
    registry: Arc<DatasetRegistry>,
    mode: ClusterMode,
    settings: BenchSettings,
    remote: Option<Orchestrator>,
}

impl Bench {
    /// `name` is how nodes locate the dataset; in-process nodes get it
    /// registered in memory.
    pub fn new(dataset: Arc<Dataset>, name: impl Into<String>, mode: ClusterMode, settings: BenchSettings) -> Self {
        let name = name.into();
        let registry = Arc::new(DatasetRegistry::new());
        registry.register(name.clone(), Arc::clone(&dataset));
        Self { dataset, name, registry, mode, settings, remote: None }
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    fn cluster(&mut self, cfg: &SlshConfig, nodes_override: Option<usize>) -> Result<Orchestrator> {
        match &self.mode {
            ClusterMode::InProcess { nodes, workers } => Orchestrator::in_process(
                nodes_override.unwrap_or(*nodes),
                *workers,
                Arc::clone(&self.registry),
                cfg.clone(),
                self.settings.voting,
            ),
            ClusterMode::Remote(cc) => {
                if nodes_override.is_some_and(|n| n != cc.nodes.len()) {
                    return Err(Error::invalid("remote clusters have a fixed node count"));
                }
                let mut o = match self.remote.take() {
                    Some(o) => o,
                    None => Orchestrator::connect(cc)?,
                };
                o.set_slsh_config(cfg.clone())?;
                Ok(o)
            }
        }
    }

    fn release(&mut self, o: Orchestrator) {
        if matches!(self.mode, ClusterMode::Remote(_)) {
            self.remote = Some(o);
        }
    }

    /// Builds `cfg`, runs every query, and scores the result.
    pub fn run_point(&mut self, cfg: &SlshConfig, queries: &Dataset, truth: &GroundTruth, nodes: Option<usize>) -> BenchResult {
        let node_count = nodes.unwrap_or(match &self.mode {
            ClusterMode::InProcess { nodes, .. } => *nodes,
            ClusterMode::Remote(c) => c.nodes.len(),
        });
        let mut o = match self.cluster(cfg, nodes) {
            Ok(o) => o,
            Err(e) => return BenchResult::failed(cfg.clone(), node_count, e.to_string()),
        };
        let result = self.run_on(&mut o, cfg, queries, truth);
        self.release(o);
        match result {
            Ok(r) => r,
            Err(e) => {
                warn!("grid point m_out={} L_out={} failed: {e}", cfg.m_out, cfg.l_out);
                BenchResult::failed(cfg.clone(), node_count, e.to_string())
            }
        }
    }

    fn run_on(&self, o: &mut Orchestrator, cfg: &SlshConfig, queries: &Dataset, truth: &GroundTruth) -> Result<BenchResult> {
        let ack = o.build_dataset(&self.name, &self.dataset)?;
        let processors: usize = ack.nodes.iter().map(|n| n.workers_active as usize).sum::<usize>().max(1);
        let k = self.settings.voting.k;
        let mut max_comparisons = Vec::with_capacity(queries.len());
        let mut candidates = Vec::with_capacity(queries.len());
        let mut confusion = ConfusionMatrix::default();
        let mut recall_sum = 0.0;
        for (q, exact) in queries.points.iter().zip(&truth.neighbors) {
            let ans = o.query(&q.features, k)?;
            max_comparisons.push(ans.stats.max_comparisons());
            candidates.push(ans.stats.candidates_unique);
            confusion.record(weighted_vote(&ans.neighbors, &self.settings.voting), q.label);
            recall_sum += recall_at_k(&ans.neighbors, exact, k);
        }
        let samples: Vec<f64> = max_comparisons.iter().map(|&c| c as f64).collect();
        let ci = bootstrap_median_ci(&samples, self.settings.bootstrap_resamples, self.settings.bootstrap_level, self.settings.bootstrap_seed)?;
        let mut cand_sorted: Vec<f64> = candidates.iter().map(|&c| c as f64).collect();
        cand_sorted.sort_by(f64::total_cmp);
        let pknn = pknn_per_processor(self.dataset.len(), processors);
        let result = BenchResult {
            config: cfg.clone(),
            nodes: o.nodes(),
            processors,
            median: ci.median,
            ci_low: ci.lo,
            ci_high: ci.hi,
            median_candidates: median_sorted(&cand_sorted),
            mcc: mcc(&confusion),
            recall_at_k: recall_sum / queries.len() as f64,
            pknn_per_processor: pknn,
            speedup: speedup(pknn, ci.median),
            confusion,
            max_comparisons,
            candidates,
            error: None,
        };
        info!(
            "m_out={} L_out={} inner={} m_in={} L_in={}: median cmp {:.1} [{:.1}, {:.1}], speedup {:.2}, mcc {:.3}, recall {:.3}",
            cfg.m_out, cfg.l_out, cfg.inner_enabled, cfg.m_in, cfg.l_in, result.median, result.ci_low, result.ci_high,
            result.speedup, result.mcc, result.recall_at_k
        );
        Ok(result)
    }

    /// Runs every configuration of `grid` in order. Failed points are
    /// recorded and the run continues.
    pub fn run_grid(&mut self, configs: &[SlshConfig], queries: &Dataset) -> Result<Vec<BenchResult>> {
        let k = self.settings.voting.k;
        let store = PointStore::new(self.dataset.d, &self.dataset.points)?;
        let truth = GroundTruth::compute(&store, queries, k)?;
        Ok(configs.iter().map(|cfg| self.run_point(cfg, queries, &truth, None)).collect())
    }

    /// Strong scaling: the same configuration on each node count.
    pub fn run_scaling(&mut self, cfg: &SlshConfig, queries: &Dataset, node_counts: &[usize]) -> Result<Vec<ScalingRow>> {
        let store = PointStore::new(self.dataset.d, &self.dataset.points)?;
        let truth = GroundTruth::compute(&store, queries, self.settings.voting.k)?;
        let mut rows: Vec<ScalingRow> = Vec::new();
        for &nodes in node_counts {
            let r = self.run_point(cfg, queries, &truth, Some(nodes));
            if let Some(e) = r.error {
                return Err(Error::invalid(format!("scaling run with {nodes} node(s) failed: {e}")));
            }
            let reference = rows.first().map_or(r.median, |f| f.median);
            rows.push(ScalingRow {
                nodes,
                processors: r.processors,
                median: r.median,
                speedup_vs_first: reference / r.median,
                ci_low: r.ci_low,
                ci_high: r.ci_high,
                pknn_per_processor: r.pknn_per_processor,
                pknn_over_median: r.speedup,
            });
        }
        Ok(rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub nodes: usize,
    pub processors: usize,
    pub median: f64,
    pub speedup_vs_first: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub pknn_per_processor: u64,
    pub pknn_over_median: f64,
}

fn fmt_metric(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

pub const RESULTS_HEADER: [&str; 12] =
    ["m_out", "L_out", "m_in", "L_in", "alpha", "median_cmp", "ci_lo", "ci_hi", "pknn_cmp", "speedup", "mcc", "recall"];

/// Results CSV; failed grid points keep their configuration columns and
/// leave the metric columns empty.
pub fn write_results_csv(results: &[BenchResult], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULTS_HEADER)?;
    for r in results {
        let c = &r.config;
        let (m_in, l_in) = if c.inner_enabled { (c.m_in, c.l_in) } else { (0, 0) };
        let ok = r.error.is_none();
        w.write_record([
            c.m_out.to_string(),
            c.l_out.to_string(),
            m_in.to_string(),
            l_in.to_string(),
            format!("{}", c.alpha),
            fmt_metric(r.median),
            fmt_metric(r.ci_low),
            fmt_metric(r.ci_high),
            if ok { r.pknn_per_processor.to_string() } else { String::new() },
            fmt_metric(r.speedup),
            fmt_metric(r.mcc),
            fmt_metric(r.recall_at_k),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_scaling_csv(rows: &[ScalingRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["nodes", "processors", "median_cmp", "speedup_vs_first", "ci_lo", "ci_hi", "pknn_cmp", "pknn_over_median"])?;
    for r in rows {
        w.write_record([
            r.nodes.to_string(),
            r.processors.to_string(),
            format!("{}", r.median),
            format!("{}", r.speedup_vs_first),
            format!("{}", r.ci_low),
            format!("{}", r.ci_high),
            r.pknn_per_processor.to_string(),
            format!("{}", r.pknn_over_median),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_results_file(results: &[BenchResult], path: impl AsRef<Path>) -> Result<()> {
    write_results_csv(results, File::create(path)?)
}

/// Rounds `v` to `digits` significant figures.
pub fn round_sig(v: f64, digits: u32) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    let magnitude = v.abs().log10().floor() as i32;
    let factor = 10f64.powi(digits as i32 - 1 - magnitude);
    (v * factor).round() / factor
}

/// Uniform points in `[0, ceiling)^d`, labels drawn with `positive_rate`.
pub fn uniform_dataset(n: usize, d: usize, ceiling: f64, positive_rate: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|i| crate::dataset::LabeledPoint {
            id: i as u64,
            features: (0..d).map(|_| rng.random_range(0.0..ceiling)).collect(),
            label: rng.random::<f64>() < positive_rate,
        })
        .collect();
    Dataset::new(d, points)
}

/// Points scattered around `clusters` random centers; each cluster has one
/// label, positive with probability `positive_rate`. Returns the dataset and
/// `queries` held-out points drawn the same way.
pub fn clustered_dataset(
    n: usize,
    queries: usize,
    d: usize,
    clusters: usize,
    spread: f64,
    positive_rate: f64,
    seed: u64,
) -> (Dataset, Dataset) {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<(Vec<f64>, bool)> = (0..clusters.max(1))
        .map(|_| ((0..d).map(|_| rng.random_range(50.0..200.0)).collect(), rng.random::<f64>() < positive_rate))
        .collect();
    let noise = Normal::new(0.0, spread).expect("valid spread");
    let draw = |count: usize, rng: &mut ChaCha8Rng| {
        let points = (0..count)
            .map(|i| {
                let (c, label) = &centers[rng.random_range(0..centers.len())];
                crate::dataset::LabeledPoint {
                    id: i as u64,
                    features: c.iter().map(|v| v + noise.sample(rng)).collect(),
                    label: *label,
                }
            })
            .collect();
        Dataset::new(d, points)
    };
    let data = draw(n, &mut rng);
    let held_out = draw(queries, &mut rng);
    (data, held_out)
}
