//! One SLSH node: a dataset slice shared read-only by `p` workers, each
//! owning a contiguous group of the outer tables.
//!
//! A query is broadcast to every active worker, each worker computes its
//! candidate union and scan over its own tables, and the calling thread
//! (the node master) reduces the partial top-K lists.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::ops::Range;
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Instant;

use log::{debug, info, warn};

use crate::dataset::{Dataset, LabeledPoint, PointStore};
use crate::error::{Error, Result};
use crate::lsh::{spec_digest, HashFamily, HashSpec};
use crate::protocol::{
    self, BuildAck, BuildRequest, Envelope, ErrorCode, Message, NodeBuildAck, NodeBuildRequest, QueryRequest,
    QueryResponse,
};
use crate::slsh::{build_inner_layers, build_outer_table, candidates_for, merge_topk, scan_candidates, KnnEntry, OuterTable, QueryStats, SlshConfig};

/// Contiguous table ranges per worker; sizes differ by at most one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableAssignment {
    ranges: Vec<Range<usize>>,
}

impl TableAssignment {
    pub fn balanced(l_out: usize, workers: usize) -> Self {
        let workers = workers.max(1);
        let base = l_out / workers;
        let extra = l_out % workers;
        let mut start = 0;
        let ranges = (0..workers)
            .map(|w| {
                let len = base + usize::from(w < extra);
                let r = start..start + len;
                start += len;
                r
            })
            .collect();
        Self { ranges }
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.len()).collect()
    }

    /// Workers with at least one table.
    pub fn active(&self) -> usize {
        self.ranges.iter().filter(|r| !r.is_empty()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeConfig {
    pub node_id: String,
    pub workers: usize,
}

/// Datasets a node can index, by name.
///
/// Registered in-memory datasets take precedence; any other name is read
/// as a dataset CSV path.
#[derive(Debug, Default)]
pub struct DatasetRegistry {
    entries: Mutex<HashMap<String, Arc<Dataset>>>,
}

impl DatasetRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, name: impl Into<String>, dataset: Arc<Dataset>) {
        self.entries.lock().expect("registry poisoned").insert(name.into(), dataset);
    }

    pub fn resolve(&self, name: &str) -> Result<Arc<Dataset>> {
        if let Some(ds) = self.entries.lock().expect("registry poisoned").get(name) {
            return Ok(Arc::clone(ds));
        }
        Ok(Arc::new(Dataset::read_csv(name)?))
    }
}

struct QueryJob {
    vector: Vec<f64>,
    k: usize,
}

struct WorkerOutput {
    worker: usize,
    entries: Vec<KnnEntry>,
    comparisons: u64,
    candidates: Vec<u32>,
    inner_layer_hits: u64,
}

struct WorkerBuilt {
    buckets: u64,
    inner_layers: u64,
}

struct WorkerPool {
    jobs: Vec<Sender<Arc<QueryJob>>>,
    results: Receiver<WorkerOutput>,
    handles: Vec<JoinHandle<()>>,
}

impl WorkerPool {
    /// Spawns one thread per non-empty table range. Each thread builds its
    /// outer tables, then its inner layers, reports, and serves queries.
    fn start(
        store: Arc<PointStore>,
        cfg: &SlshConfig,
        specs: &[HashSpec],
        assignment: &TableAssignment,
    ) -> Result<(Self, Vec<WorkerBuilt>)> {
        let (result_tx, results) = mpsc::channel();
        let mut jobs = Vec::new();
        let mut handles = Vec::new();
        let mut built_rx = Vec::new();

        for (worker, range) in assignment.ranges().iter().filter(|r| !r.is_empty()).enumerate() {
            let (job_tx, job_rx) = mpsc::channel::<Arc<QueryJob>>();
            let (btx, brx) = mpsc::channel::<Result<WorkerBuilt>>();
            let store = Arc::clone(&store);
            let cfg = cfg.clone();
            let my_specs: Vec<(usize, HashSpec)> = range.clone().map(|t| (t, specs[t])).collect();
            let result_tx = result_tx.clone();
            let handle = thread::Builder::new()
                .name(format!("slsh-worker-{worker}"))
                .spawn(move || {
                    let tables = match build_worker_tables(&store, &cfg, &my_specs) {
                        Ok((tables, built)) => {
                            let _ = btx.send(Ok(built));
                            tables
                        }
                        Err(e) => {
                            let _ = btx.send(Err(e));
                            return;
                        }
                    };
                    for job in job_rx {
                        let cands = candidates_for(&job.vector, &tables);
                        let (entries, comparisons) = scan_candidates(&job.vector, &cands.ids, &store, job.k, cfg.rank_metric);
                        let out = WorkerOutput {
                            worker,
                            entries,
                            comparisons,
                            candidates: cands.ids,
                            inner_layer_hits: cands.inner_layer_hits,
                        };
                        if result_tx.send(out).is_err() {
                            break;
                        }
                    }
                })?;
            jobs.push(job_tx);
            handles.push(handle);
            built_rx.push(brx);
        }

        let pool = Self { jobs, results, handles };
        let mut built = Vec::with_capacity(built_rx.len());
        for rx in built_rx {
            match rx.recv() {
                Ok(Ok(b)) => built.push(b),
                Ok(Err(e)) => return Err(e),
                Err(_) => return Err(Error::invalid("worker exited during build")),
            }
        }
        Ok((pool, built))
    }

    fn run(&self, job: QueryJob) -> Result<Vec<WorkerOutput>> {
        let job = Arc::new(job);
        for tx in &self.jobs {
            tx.send(Arc::clone(&job)).map_err(|_| Error::invalid("worker thread is gone"))?;
        }
        let mut outputs: Vec<WorkerOutput> = Vec::with_capacity(self.jobs.len());
        for _ in 0..self.jobs.len() {
            outputs.push(self.results.recv().map_err(|_| Error::invalid("worker thread is gone"))?);
        }
        outputs.sort_by_key(|o| o.worker);
        Ok(outputs)
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        self.jobs.clear();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

fn build_worker_tables(store: &PointStore, cfg: &SlshConfig, specs: &[(usize, HashSpec)]) -> Result<(Vec<OuterTable>, WorkerBuilt)> {
    let mut tables = specs
        .iter()
        .map(|(index, spec)| build_outer_table(store, spec.regenerate()?, *index))
        .collect::<Result<Vec<_>>>()?;
    let mut inner_layers = 0;
    for t in &mut tables {
        inner_layers += build_inner_layers(t, cfg, store.len(), store)? as u64;
    }
    let buckets = tables.iter().map(|t| t.buckets.len() as u64).sum();
    Ok((tables, WorkerBuilt { buckets, inner_layers }))
}

struct Built {
    cfg: SlshConfig,
    pool: WorkerPool,
    active: usize,
}

/// A node with a fixed worker count. Build and query calls are serialized
/// by `&mut self`.
pub struct Node {
    config: NodeConfig,
    registry: Arc<DatasetRegistry>,
    built: Option<Built>,
}

impl Node {
    pub fn new(config: NodeConfig, registry: Arc<DatasetRegistry>) -> Self {
        Self { config, registry, built: None }
    }

    pub fn with_workers(node_id: impl Into<String>, workers: usize) -> Self {
        Self::new(NodeConfig { node_id: node_id.into(), workers }, Arc::new(DatasetRegistry::new()))
    }

    pub fn id(&self) -> &str {
        &self.config.node_id
    }

    pub fn workers(&self) -> usize {
        self.config.workers
    }

    pub fn is_built(&self) -> bool {
        self.built.is_some()
    }

    /// Indexes `slice` with the broadcast outer hash specs.
    pub fn build(&mut self, slice: &[LabeledPoint], specs: &[HashSpec], cfg: SlshConfig) -> Result<NodeBuildAck> {
        let started = Instant::now();
        self.built = None;
        cfg.validate()?;
        if self.config.workers == 0 {
            return Err(Error::invalid("node needs at least one worker"));
        }
        if specs.len() != cfg.l_out {
            return Err(Error::invalid(format!("expected {} hash specs, got {}", cfg.l_out, specs.len())));
        }
        for s in specs {
            if s.family != HashFamily::L1BitSample || s.d != cfg.d || s.m != cfg.m_out {
                return Err(Error::invalid(format!(
                    "outer hash spec {s:?} does not match config (l1_bit_sample, m={}, d={})",
                    cfg.m_out, cfg.d
                )));
            }
        }
        let digest = spec_digest(specs)?;
        let store = Arc::new(PointStore::new(cfg.d, slice)?);

        if self.config.workers >= cfg.l_out {
            warn!(
                "node {}: {} workers for {} outer tables; {} worker(s) idle",
                self.config.node_id,
                self.config.workers,
                cfg.l_out,
                self.config.workers.saturating_sub(cfg.l_out)
            );
        }
        let assignment = TableAssignment::balanced(cfg.l_out, self.config.workers);
        let (pool, built) = WorkerPool::start(Arc::clone(&store), &cfg, specs, &assignment)?;
        let active = assignment.active();
        let ack = NodeBuildAck {
            n_local: store.len() as u64,
            tables_built: cfg.l_out as u64,
            buckets_total: built.iter().map(|b| b.buckets).sum(),
            inner_layers: built.iter().map(|b| b.inner_layers).sum(),
            workers_active: active as u64,
            elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
            spec_digest: digest,
        };
        info!(
            "node {}: built {} tables over {} points ({} inner layers) in {:.1} ms",
            self.config.node_id, ack.tables_built, ack.n_local, ack.inner_layers, ack.elapsed_ms
        );
        self.built = Some(Built { cfg, pool, active });
        Ok(ack)
    }

    /// Local approximate K-NN and per-worker comparison counts.
    pub fn query(&mut self, query: &[f64], k: usize) -> Result<(Vec<KnnEntry>, QueryStats)> {
        let built = self.built.as_ref().ok_or_else(|| Error::protocol("query before build"))?;
        if query.len() != built.cfg.d {
            return Err(Error::invalid(format!("query has dimension {}, node was built with d={}", query.len(), built.cfg.d)));
        }
        if k == 0 {
            return Err(Error::invalid("k must be >= 1"));
        }
        let outputs = built.pool.run(QueryJob { vector: query.to_vec(), k })?;
        debug_assert_eq!(outputs.len(), built.active);

        let mut union: Vec<u32> = outputs.iter().flat_map(|o| o.candidates.iter().copied()).collect();
        union.sort_unstable();
        union.dedup();
        let stats = QueryStats {
            comparisons_per_processor: outputs.iter().map(|o| o.comparisons).collect(),
            candidates_unique: union.len() as u64,
            inner_layer_hits: outputs.iter().map(|o| o.inner_layer_hits).sum(),
        };
        let partials: Vec<&[KnnEntry]> = outputs.iter().map(|o| o.entries.as_slice()).collect();
        Ok((merge_topk(&partials, k), stats))
    }

    fn build_from_request(&mut self, req: &NodeBuildRequest) -> Result<NodeBuildAck> {
        let dataset = self.registry.resolve(&req.dataset)?;
        let slice = dataset.slice(req.row_start as usize, req.row_count as usize)?;
        self.build(slice, &req.hash_specs, req.config.clone())
    }

    /// Answers one envelope. The flag is true when the node should stop.
    pub fn handle(&mut self, env: Envelope) -> (Envelope, bool) {
        let id = env.request_id;
        let reply = match env.message {
            Message::BuildRequest(BuildRequest::Node(req)) => match self.build_from_request(&req) {
                Ok(ack) => Message::BuildAck(BuildAck::Node(ack)),
                Err(e) => return (Envelope::error(id, ErrorCode::BuildFailed, e.to_string()), false),
            },
            Message::QueryRequest(QueryRequest { vector, k }) => match self.query(&vector, k) {
                Ok((neighbors, stats)) => Message::QueryResponse(QueryResponse {
                    neighbors,
                    comparisons: stats.comparisons_per_processor,
                    candidates_unique: stats.candidates_unique,
                    inner_layer_hits: stats.inner_layer_hits,
                    prediction: None,
                    latency_us: None,
                }),
                Err(e) => return (Envelope::error(id, error_code(&e), e.to_string()), false),
            },
            Message::Shutdown => return (Envelope::new(id, Message::Shutdown), true),
            other => {
                return (
                    Envelope::error(id, ErrorCode::Protocol, format!("node does not accept {}", other.type_name())),
                    false,
                )
            }
        };
        (Envelope::new(id, reply), false)
    }

    /// Decodes, handles and encodes one frame. Returns the reply frame, the
    /// stop flag, and whether the frame itself was invalid.
    pub fn handle_frame(&mut self, frame: &[u8]) -> (Vec<u8>, bool, bool) {
        match protocol::decode(frame) {
            Ok(env) => {
                let (reply, stop) = self.handle(env);
                let bytes = protocol::encode(&reply).unwrap_or_else(|e| {
                    protocol::encode(&Envelope::error(reply.request_id, ErrorCode::Internal, e.to_string()))
                        .expect("error envelope encodes")
                });
                (bytes, stop, false)
            }
            Err(e) => {
                let id = protocol::peek_request_id(frame).unwrap_or(0);
                let bytes = protocol::encode(&Envelope::error(id, ErrorCode::Protocol, e.to_string()))
                    .expect("error envelope encodes");
                (bytes, false, true)
            }
        }
    }
}

pub(crate) fn error_code(e: &Error) -> ErrorCode {
    match e {
        Error::InvalidParameter(_) => ErrorCode::InvalidParameter,
        Error::Protocol(m) if m.contains("before build") => ErrorCode::NotBuilt,
        Error::Protocol(_) => ErrorCode::Protocol,
        Error::Timeout { .. } => ErrorCode::Timeout,
        Error::BuildFailed { .. } => ErrorCode::BuildFailed,
        _ => ErrorCode::Internal,
    }
}

/// Serves `node` on `listener` until a shutdown message arrives.
///
/// One connection is handled at a time and frames are answered in order.
/// A malformed frame is answered with an error envelope and the connection
/// is closed.
pub fn serve(listener: TcpListener, mut node: Node) -> Result<()> {
    info!("node {} listening on {}", node.id(), listener.local_addr()?);
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!("accept failed: {e}");
                continue;
            }
        };
        match serve_connection(&mut node, stream) {
            Ok(true) => return Ok(()),
            Ok(false) => {}
            Err(e) => warn!("node {}: connection ended: {e}", node.id()),
        }
    }
    Ok(())
}

fn serve_connection(node: &mut Node, stream: TcpStream) -> Result<bool> {
    stream.set_nodelay(true)?;
    let peer = stream.peer_addr().ok();
    debug!("node {}: connection from {peer:?}", node.id());
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    loop {
        let frame = match protocol::read_frame(&mut reader) {
            Ok(Some(f)) => f,
            Ok(None) => return Ok(false),
            Err(e) => {
                let reply = protocol::encode(&Envelope::error(0, ErrorCode::Protocol, e.to_string()))?;
                let _ = protocol::write_frame(&mut writer, &reply);
                return Err(e);
            }
        };
        let (reply, stop, invalid) = node.handle_frame(&frame);
        protocol::write_frame(&mut writer, &reply)?;
        if stop {
            return Ok(true);
        }
        if invalid {
            return Ok(false);
        }
    }
}

/// Binds `addr` and serves a fresh node on a background thread.
pub fn spawn(addr: impl ToSocketAddrs, node: Node) -> Result<(SocketAddr, JoinHandle<Result<()>>)> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let handle = thread::Builder::new().name(format!("node-{}", node.id())).spawn(move || serve(listener, node))?;
    Ok((local, handle))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_assignment() {
        assert_eq!(TableAssignment::balanced(120, 8).sizes(), vec![15; 8]);
        assert_eq!(TableAssignment::balanced(10, 4).sizes(), vec![3, 3, 2, 2]);
        let a = TableAssignment::balanced(10, 4);
        assert_eq!(a.ranges(), &[0..3, 3..6, 6..8, 8..10]);
        let idle = TableAssignment::balanced(3, 5);
        assert_eq!(idle.sizes(), vec![1, 1, 1, 0, 0]);
        assert_eq!(idle.active(), 3);
    }

    fn points(n: usize, d: usize) -> Vec<LabeledPoint> {
        let mut rng = crate::lsh::SplitMix64::new(5);
        (0..n)
            .map(|i| LabeledPoint { id: i as u64, features: (0..d).map(|_| rng.next_f64() * 250.0).collect(), label: i % 9 == 0 })
            .collect()
    }

    #[test]
    fn query_before_build_is_error() {
        let mut node = Node::with_workers("n0", 2);
        let (reply, stop) = node.handle(Envelope::new(5, Message::QueryRequest(QueryRequest { vector: vec![1.0], k: 1 })));
        assert!(!stop);
        assert_eq!(reply.request_id, 5);
        match reply.message {
            Message::Error(e) => assert_eq!(e.code, ErrorCode::NotBuilt),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_slice_answers_empty() {
        let cfg = SlshConfig::outer_only(6, 8, 4, 5, 1);
        let mut node = Node::with_workers("n0", 3);
        let ack = node.build(&[], &cfg.outer_hash_specs(), cfg).unwrap();
        assert_eq!(ack.n_local, 0);
        let (top, stats) = node.query(&[1.0, 2.0, 3.0, 4.0], 5).unwrap();
        assert!(top.is_empty());
        assert_eq!(stats.comparisons_per_processor, vec![0, 0, 0]);
    }

    #[test]
    fn worker_count_invariance() {
        let pts = points(2000, 6);
        let cfg = SlshConfig::outer_only(5, 10, 6, 10, 77).with_inner(4, 3, 0.01);
        let specs = cfg.outer_hash_specs();
        let mut one = Node::with_workers("a", 1);
        let mut many = Node::with_workers("b", 8);
        let ack1 = one.build(&pts, &specs, cfg.clone()).unwrap();
        let ack8 = many.build(&pts, &specs, cfg.clone()).unwrap();
        assert_eq!(ack1.spec_digest, ack8.spec_digest);
        assert_eq!(ack1.inner_layers, ack8.inner_layers);
        assert_eq!(ack8.workers_active, 8);
        let mut rng = crate::lsh::SplitMix64::new(99);
        for _ in 0..50 {
            let q: Vec<f64> = (0..6).map(|_| rng.next_f64() * 250.0).collect();
            let (a, sa) = one.query(&q, 10).unwrap();
            let (b, sb) = many.query(&q, 10).unwrap();
            assert_eq!(a, b);
            assert_eq!(sa.candidates_unique, sb.candidates_unique);
            assert_eq!(sb.comparisons_per_processor.len(), 8);
            assert!(sb.total_comparisons() >= sb.candidates_unique);
            assert_eq!(sa.comparisons_per_processor, vec![sa.candidates_unique]);
        }
    }

    #[test]
    fn spec_mismatch_is_build_failure() {
        let cfg = SlshConfig::outer_only(6, 4, 4, 5, 1);
        let mut specs = cfg.outer_hash_specs();
        specs[2].d = 5;
        let mut node = Node::with_workers("n", 2);
        assert!(node.build(&points(10, 4), &specs, cfg.clone()).is_err());
        assert!(node.build(&points(10, 3), &cfg.outer_hash_specs(), cfg).is_err());
        assert!(!node.is_built());
    }
}
