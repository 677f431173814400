//! Root / Forwarder / Reducer coordination over `ν` nodes.
//!
//! The three roles are concurrent stages inside one process:
//!
//! * the **root** (the caller of [`Orchestrator::query`] / [`Orchestrator::build`])
//!   manages builds, submits queries and turns the global K-NN set into a
//!   prediction;
//! * the **forwarder** thread broadcasts each query frame to every node link;
//! * the **reducer** thread gathers the `ν` local K-NN lists and keeps the K
//!   closest.
//!
//! Each node link runs on its own thread, so the sends of one query fan out
//! concurrently. Only one query is in flight at a time.

use std::io::{BufReader, BufWriter};
use std::net::{TcpStream, ToSocketAddrs};
use std::ops::Range;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::lsh::spec_digest;
use crate::node::{DatasetRegistry, Node, NodeConfig};
use crate::protocol::{
    self, BuildAck, BuildRequest, ClusterBuildAck, Envelope, Message, NodeBuildAck, NodeBuildRequest, QueryRequest,
    QueryResponse,
};
use crate::slsh::{merge_topk, KnnEntry, QueryStats, RankMetric, SlshConfig};

pub const DEFAULT_EPSILON: f64 = 1e-9;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_BUILD_TIMEOUT: Duration = Duration::from_secs(600);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieRule {
    /// The majority class.
    #[default]
    Negative,
    Positive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VotingConfig {
    pub k: usize,
    pub epsilon: f64,
    pub tie_rule: TieRule,
}

impl Default for VotingConfig {
    fn default() -> Self {
        Self { k: 10, epsilon: DEFAULT_EPSILON, tie_rule: TieRule::Negative }
    }
}

/// Distance-weighted vote: each neighbor adds `1 / (distance + epsilon)` to
/// its class. Equal scores (including no neighbors) fall to the tie rule.
pub fn weighted_vote(neighbors: &[KnnEntry], cfg: &VotingConfig) -> bool {
    let (mut pos, mut neg) = (0.0, 0.0);
    for e in neighbors {
        let w = 1.0 / (e.distance + cfg.epsilon);
        if e.label {
            pos += w;
        } else {
            neg += w;
        }
    }
    if pos > neg {
        true
    } else if neg > pos {
        false
    } else {
        cfg.tie_rule == TieRule::Positive
    }
}

/// Contiguous row ranges for `nodes` slices; sizes differ by at most one,
/// larger slices first.
pub fn partition_dataset(n: usize, nodes: usize) -> Vec<Range<usize>> {
    let nodes = nodes.max(1);
    if nodes > n {
        warn!("{nodes} nodes for {n} points: some slices are empty");
    }
    let base = n / nodes;
    let extra = n % nodes;
    let mut start = 0;
    (0..nodes)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// What the reducer does when a node misses the query deadline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeoutPolicy {
    #[default]
    FailQuery,
    /// Reduce whatever arrived and report the missing nodes.
    PartialResults,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    pub nodes: Vec<String>,
    pub slsh: SlshConfig,
    pub voting: VotingConfig,
    pub timeout: Duration,
    pub build_timeout: Duration,
    pub timeout_policy: TimeoutPolicy,
    /// Dataset CSV path the nodes read their slices from.
    pub dataset: Option<String>,
    /// Client endpoint of a long-running orchestrator.
    pub listen: Option<String>,
}

/// On-disk form of [`ClusterConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfigFile {
    pub nodes: Vec<String>,
    pub m_out: usize,
    #[serde(rename = "L_out")]
    pub l_out: usize,
    pub m_in: usize,
    #[serde(rename = "L_in")]
    pub l_in: usize,
    pub alpha: f64,
    pub inner_enabled: bool,
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub epsilon: f64,
    pub master_seed: u64,
    pub timeout_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub build_timeout_s: Option<f64>,
    #[serde(default)]
    pub timeout_policy: TimeoutPolicy,
    #[serde(default)]
    pub tie_rule: TieRule,
    #[serde(default)]
    pub rank_metric: RankMetric,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub listen: Option<String>,
}

impl ClusterConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ClusterConfigFile = serde_json::from_str(text)?;
        f.try_into()
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("cluster needs at least one node"));
        }
        self.slsh.validate()?;
        if self.voting.k == 0 || !(self.voting.epsilon > 0.0) {
            return Err(Error::invalid("voting needs K >= 1 and epsilon > 0"));
        }
        Ok(())
    }
}

impl TryFrom<ClusterConfigFile> for ClusterConfig {
    type Error = Error;

    fn try_from(f: ClusterConfigFile) -> Result<Self> {
        let secs = |s: f64, what: &str| {
            Duration::try_from_secs_f64(s).ok().filter(|d| !d.is_zero()).ok_or_else(|| Error::invalid(format!("{what} must be positive")))
        };
        let cfg = ClusterConfig {
            nodes: f.nodes,
            slsh: SlshConfig {
                m_out: f.m_out,
                l_out: f.l_out,
                m_in: f.m_in,
                l_in: f.l_in,
                alpha: f.alpha,
                d: f.d,
                k: f.k,
                inner_enabled: f.inner_enabled,
                master_seed: f.master_seed,
                rank_metric: f.rank_metric,
            },
            voting: VotingConfig { k: f.k, epsilon: f.epsilon, tie_rule: f.tie_rule },
            timeout: secs(f.timeout_s, "timeout_s")?,
            build_timeout: match f.build_timeout_s {
                Some(s) => secs(s, "build_timeout_s")?,
                None => DEFAULT_BUILD_TIMEOUT,
            },
            timeout_policy: f.timeout_policy,
            dataset: f.dataset,
            listen: f.listen,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A request/response channel to one node.
pub trait NodeLink: Send {
    fn endpoint(&self) -> &str;

    /// Sends one frame and returns the reply frame.
    fn exchange(&mut self, frame: &[u8], timeout: Duration) -> Result<Vec<u8>>;
}

/// Node reached over TCP. Reconnects lazily after any failure.
pub struct TcpLink {
    endpoint: String,
    conn: Option<(BufReader<TcpStream>, BufWriter<TcpStream>)>,
}

impl TcpLink {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self { endpoint: endpoint.into(), conn: None }
    }

    fn node_err(&self, e: impl std::fmt::Display) -> Error {
        Error::Node { endpoint: self.endpoint.clone(), message: e.to_string() }
    }

    fn connect(&self, timeout: Duration) -> Result<(BufReader<TcpStream>, BufWriter<TcpStream>)> {
        let addrs: Vec<_> = self.endpoint.to_socket_addrs().map_err(|e| self.node_err(e))?.collect();
        let mut last = None;
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, timeout) {
                Ok(s) => {
                    s.set_nodelay(true).map_err(|e| self.node_err(e))?;
                    let r = s.try_clone().map_err(|e| self.node_err(e))?;
                    return Ok((BufReader::new(r), BufWriter::new(s)));
                }
                Err(e) => last = Some(e),
            }
        }
        Err(self.node_err(last.map_or_else(|| "no address".to_string(), |e| format!("connect failed: {e}"))))
    }
}

impl NodeLink for TcpLink {
    fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn exchange(&mut self, frame: &[u8], timeout: Duration) -> Result<Vec<u8>> {
        if self.conn.is_none() {
            self.conn = Some(self.connect(timeout)?);
        }
        let result = {
            let (reader, writer) = self.conn.as_mut().expect("connected");
            reader.get_ref().set_read_timeout(Some(timeout)).and_then(|_| writer.get_ref().set_write_timeout(Some(timeout)))
                .map_err(Error::from)
                .and_then(|_| protocol::write_frame(writer, frame))
                .and_then(|_| protocol::read_frame(reader))
        };
        match result {
            Ok(Some(reply)) => Ok(reply),
            Ok(None) => {
                self.conn = None;
                Err(self.node_err("connection closed"))
            }
            Err(e) => {
                self.conn = None;
                Err(self.node_err(e))
            }
        }
    }
}

/// A node living in this process, still spoken to through encoded frames.
pub struct LocalLink {
    endpoint: String,
    node: Node,
}

impl LocalLink {
    pub fn new(node: Node) -> Self {
        Self { endpoint: format!("inproc://{}", node.id()), node }
    }
}

impl NodeLink for LocalLink {
    fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn exchange(&mut self, frame: &[u8], _timeout: Duration) -> Result<Vec<u8>> {
        Ok(self.node.handle_frame(frame).0)
    }
}

struct LinkJob {
    request_id: u64,
    frame: Arc<Vec<u8>>,
    timeout: Duration,
    reply: Sender<LinkReply>,
}

struct LinkReply {
    node: usize,
    request_id: u64,
    result: Result<Envelope>,
}

struct ForwardJob {
    request_id: u64,
    frame: Arc<Vec<u8>>,
    k: usize,
    deadline: Instant,
    reply: Sender<Result<Reduced>>,
}

struct Expect {
    request_id: u64,
    k: usize,
    deadline: Instant,
    reply: Sender<Result<Reduced>>,
}

struct Reduced {
    neighbors: Vec<KnnEntry>,
    stats: QueryStats,
    missing: Vec<String>,
}

/// Result of one cluster query.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAnswer {
    pub neighbors: Vec<KnnEntry>,
    pub prediction: bool,
    /// Per-processor counts of all nodes, in node order.
    pub stats: QueryStats,
    pub latency: Duration,
    /// Endpoints that missed the deadline under [`TimeoutPolicy::PartialResults`].
    pub missing: Vec<String>,
}

pub struct Orchestrator {
    endpoints: Vec<String>,
    slsh: SlshConfig,
    voting: VotingConfig,
    timeout: Duration,
    build_timeout: Duration,
    link_tx: Vec<Sender<LinkJob>>,
    forward_tx: Option<Sender<ForwardJob>>,
    threads: Vec<JoinHandle<()>>,
    next_id: AtomicU64,
    built: Option<ClusterBuildAck>,
}

impl Orchestrator {
    pub fn new(
        links: Vec<Box<dyn NodeLink>>,
        slsh: SlshConfig,
        voting: VotingConfig,
        timeout: Duration,
        policy: TimeoutPolicy,
    ) -> Result<Self> {
        if links.is_empty() {
            return Err(Error::invalid("cluster needs at least one node"));
        }
        slsh.validate()?;
        let endpoints: Vec<String> = links.iter().map(|l| l.endpoint().to_string()).collect();
        let mut threads = Vec::new();
        let mut link_tx = Vec::new();
        for (i, mut link) in links.into_iter().enumerate() {
            let (tx, rx) = mpsc::channel::<LinkJob>();
            threads.push(thread::Builder::new().name(format!("link-{i}")).spawn(move || {
                for job in rx {
                    let result = link.exchange(&job.frame, job.timeout).and_then(|bytes| {
                        let env = protocol::decode(&bytes).map_err(|e| Error::Node {
                            endpoint: link.endpoint().to_string(),
                            message: e.to_string(),
                        })?;
                        if env.request_id != job.request_id {
                            return Err(Error::Node {
                                endpoint: link.endpoint().to_string(),
                                message: format!("reply for request {} while waiting for {}", env.request_id, job.request_id),
                            });
                        }
                        Ok(env)
                    });
                    let _ = job.reply.send(LinkReply { node: i, request_id: job.request_id, result });
                }
            })?);
            link_tx.push(tx);
        }

        let (forward_tx, forward_rx) = mpsc::channel::<ForwardJob>();
        let (expect_tx, expect_rx) = mpsc::channel::<Expect>();
        let (reply_tx, reply_rx) = mpsc::channel::<LinkReply>();

        let fwd_links = link_tx.clone();
        threads.push(thread::Builder::new().name("forwarder".into()).spawn(move || {
            forwarder(forward_rx, expect_tx, reply_tx, fwd_links)
        })?);
        let red_endpoints = endpoints.clone();
        threads.push(thread::Builder::new().name("reducer".into()).spawn(move || {
            reducer(expect_rx, reply_rx, red_endpoints, policy)
        })?);

        Ok(Self {
            endpoints,
            slsh,
            voting,
            timeout,
            build_timeout: DEFAULT_BUILD_TIMEOUT,
            link_tx,
            forward_tx: Some(forward_tx),
            threads,
            next_id: AtomicU64::new(1),
            built: None,
        })
    }

    /// Links to the TCP nodes listed in `cfg`.
    pub fn connect(cfg: &ClusterConfig) -> Result<Self> {
        cfg.validate()?;
        let links = cfg.nodes.iter().map(|n| Box::new(TcpLink::new(n.clone())) as Box<dyn NodeLink>).collect();
        let mut o = Self::new(links, cfg.slsh.clone(), cfg.voting, cfg.timeout, cfg.timeout_policy)?;
        o.build_timeout = cfg.build_timeout;
        Ok(o)
    }

    /// `nodes` in-process nodes with `workers` workers each, resolving
    /// datasets through `registry`.
    pub fn in_process(
        nodes: usize,
        workers: usize,
        registry: Arc<DatasetRegistry>,
        slsh: SlshConfig,
        voting: VotingConfig,
    ) -> Result<Self> {
        let links = (0..nodes)
            .map(|i| {
                let node = Node::new(NodeConfig { node_id: format!("node{i}"), workers }, Arc::clone(&registry));
                Box::new(LocalLink::new(node)) as Box<dyn NodeLink>
            })
            .collect();
        Self::new(links, slsh, voting, DEFAULT_TIMEOUT, TimeoutPolicy::FailQuery)
    }

    pub fn nodes(&self) -> usize {
        self.endpoints.len()
    }

    pub fn endpoints(&self) -> &[String] {
        &self.endpoints
    }

    pub fn slsh_config(&self) -> &SlshConfig {
        &self.slsh
    }

    pub fn set_slsh_config(&mut self, slsh: SlshConfig) -> Result<()> {
        slsh.validate()?;
        self.slsh = slsh;
        self.built = None;
        Ok(())
    }

    pub fn voting(&self) -> &VotingConfig {
        &self.voting
    }

    pub fn set_build_timeout(&mut self, timeout: Duration) {
        self.build_timeout = timeout;
    }

    pub fn last_build(&self) -> Option<&ClusterBuildAck> {
        self.built.as_ref()
    }

    fn next_request_id(&self) -> u64 {
        self.next_id.fetch_add(1, Ordering::Relaxed)
    }

    /// Assigns each node its slice of the `n` rows of `dataset` and
    /// broadcasts the same outer hash specs to all of them.
    pub fn build(&mut self, dataset: &str, n: usize) -> Result<ClusterBuildAck> {
        self.built = None;
        let specs = self.slsh.outer_hash_specs();
        let digest = spec_digest(&specs)?;
        let (tx, rx) = mpsc::channel();
        let ranges = partition_dataset(n, self.nodes());
        for (i, range) in ranges.iter().enumerate() {
            let req = NodeBuildRequest {
                dataset: dataset.to_string(),
                row_start: range.start as u64,
                row_count: range.len() as u64,
                hash_specs: specs.clone(),
                config: self.slsh.clone(),
            };
            let request_id = self.next_request_id();
            let frame = protocol::encode(&Envelope::new(request_id, Message::BuildRequest(BuildRequest::Node(req))))?;
            self.link_tx[i]
                .send(LinkJob { request_id, frame: Arc::new(frame), timeout: self.build_timeout, reply: tx.clone() })
                .map_err(|_| Error::invalid("link thread is gone"))?;
        }
        drop(tx);

        let mut acks: Vec<Option<NodeBuildAck>> = vec![None; self.nodes()];
        let mut failures = Vec::new();
        let deadline = Instant::now() + self.build_timeout + Duration::from_secs(1);
        for _ in 0..self.nodes() {
            let reply = match rx.recv_timeout(deadline.saturating_duration_since(Instant::now())) {
                Ok(r) => r,
                Err(_) => break,
            };
            let endpoint = &self.endpoints[reply.node];
            match reply.result {
                Ok(Envelope { message: Message::BuildAck(BuildAck::Node(ack)), .. }) => {
                    if ack.spec_digest != digest {
                        failures.push(format!("{endpoint}: hash spec digest mismatch ({} != {digest})", ack.spec_digest));
                    } else if ack.n_local != ranges[reply.node].len() as u64 {
                        failures.push(format!("{endpoint}: indexed {} points, expected {}", ack.n_local, ranges[reply.node].len()));
                    } else {
                        acks[reply.node] = Some(ack);
                    }
                }
                Ok(Envelope { message: Message::Error(e), .. }) => failures.push(format!("{endpoint}: {}", e.message)),
                Ok(other) => failures.push(format!("{endpoint}: unexpected {} reply", other.message.type_name())),
                Err(e) => failures.push(e.to_string()),
            }
        }
        for (i, ack) in acks.iter().enumerate() {
            if ack.is_none() && !failures.iter().any(|f| f.contains(&self.endpoints[i])) {
                failures.push(format!("{}: no build acknowledgement", self.endpoints[i]));
            }
        }
        if !failures.is_empty() {
            return Err(Error::BuildFailed { failures });
        }
        let ack = ClusterBuildAck { spec_digest: digest, nodes: acks.into_iter().map(Option::unwrap).collect() };
        info!("cluster built on {} node(s), {} points, digest {}", self.nodes(), n, &ack.spec_digest[..16]);
        self.built = Some(ack.clone());
        Ok(ack)
    }

    /// Builds from a dataset the nodes resolve by `name`, after checking its
    /// dimension against the configuration.
    pub fn build_dataset(&mut self, name: &str, dataset: &Dataset) -> Result<ClusterBuildAck> {
        if dataset.d != self.slsh.d {
            return Err(Error::invalid(format!("dataset has d={}, config has d={}", dataset.d, self.slsh.d)));
        }
        self.build(name, dataset.len())
    }

    /// Broadcasts `vector`, reduces the local lists to the global top-`k`
    /// and votes.
    pub fn query(&self, vector: &[f64], k: usize) -> Result<ClusterAnswer> {
        let started = Instant::now();
        if self.built.is_none() {
            return Err(Error::protocol("query before build"));
        }
        if vector.len() != self.slsh.d {
            return Err(Error::invalid(format!("query has dimension {}, cluster uses d={}", vector.len(), self.slsh.d)));
        }
        if k == 0 {
            return Err(Error::invalid("k must be >= 1"));
        }
        let request_id = self.next_request_id();
        let frame = protocol::encode(&Envelope::new(request_id, Message::QueryRequest(QueryRequest { vector: vector.to_vec(), k })))?;
        let deadline = started + self.timeout;
        let (tx, rx) = mpsc::channel();
        self.forward_tx
            .as_ref()
            .expect("forwarder running")
            .send(ForwardJob { request_id, frame: Arc::new(frame), k, deadline, reply: tx })
            .map_err(|_| Error::invalid("forwarder is gone"))?;
        let reduced = rx.recv().map_err(|_| Error::invalid("reducer is gone"))??;
        let prediction = weighted_vote(&reduced.neighbors, &self.voting);
        Ok(ClusterAnswer {
            neighbors: reduced.neighbors,
            prediction,
            stats: reduced.stats,
            latency: started.elapsed(),
            missing: reduced.missing,
        })
    }

    /// Asks every node to stop. Errors are logged, not returned.
    pub fn shutdown_nodes(&self) {
        let (tx, rx) = mpsc::channel();
        for link in &self.link_tx {
            let request_id = self.next_request_id();
            let frame = protocol::encode(&Envelope::new(request_id, Message::Shutdown)).expect("shutdown encodes");
            let _ = link.send(LinkJob { request_id, frame: Arc::new(frame), timeout: self.timeout, reply: tx.clone() });
        }
        drop(tx);
        for reply in rx {
            if let Err(e) = reply.result {
                warn!("shutdown: {e}");
            }
        }
    }
}

impl Drop for Orchestrator {
    fn drop(&mut self) {
        self.forward_tx = None;
        self.link_tx.clear();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

fn forwarder(jobs: Receiver<ForwardJob>, expect: Sender<Expect>, replies: Sender<LinkReply>, links: Vec<Sender<LinkJob>>) {
    for job in jobs {
        let timeout = job.deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(1));
        if expect.send(Expect { request_id: job.request_id, k: job.k, deadline: job.deadline, reply: job.reply }).is_err() {
            return;
        }
        for link in &links {
            let _ = link.send(LinkJob { request_id: job.request_id, frame: Arc::clone(&job.frame), timeout, reply: replies.clone() });
        }
    }
}

fn reducer(expects: Receiver<Expect>, replies: Receiver<LinkReply>, endpoints: Vec<String>, policy: TimeoutPolicy) {
    let nodes = endpoints.len();
    for exp in expects {
        let mut got: Vec<Option<QueryResponse>> = vec![None; nodes];
        let mut failure: Option<Error> = None;
        let mut received = 0;
        while received < nodes {
            let wait = exp.deadline.saturating_duration_since(Instant::now());
            let reply = match replies.recv_timeout(wait) {
                Ok(r) => r,
                Err(RecvTimeoutError::Timeout) => break,
                Err(RecvTimeoutError::Disconnected) => return,
            };
            if reply.request_id != exp.request_id {
                // late answer to an earlier, already failed query
                continue;
            }
            received += 1;
            match reply.result {
                Ok(Envelope { message: Message::QueryResponse(r), .. }) => got[reply.node] = Some(r),
                Ok(Envelope { message: Message::Error(e), .. }) => {
                    failure.get_or_insert(Error::Node { endpoint: endpoints[reply.node].clone(), message: e.message });
                }
                Ok(other) => {
                    failure.get_or_insert(Error::Node {
                        endpoint: endpoints[reply.node].clone(),
                        message: format!("unexpected {} reply", other.message.type_name()),
                    });
                }
                Err(e) => {
                    failure.get_or_insert(e);
                }
            }
        }
        let missing: Vec<String> = got.iter().zip(&endpoints).filter(|(g, _)| g.is_none()).map(|(_, e)| e.clone()).collect();
        let outcome = if let Some(e) = failure {
            Err(e)
        } else if !missing.is_empty() && policy == TimeoutPolicy::FailQuery {
            Err(Error::Timeout { endpoints: missing })
        } else {
            let mut stats = QueryStats::default();
            let mut partials = Vec::with_capacity(nodes);
            for r in got.into_iter().flatten() {
                stats.absorb(&QueryStats {
                    comparisons_per_processor: r.comparisons,
                    candidates_unique: r.candidates_unique,
                    inner_layer_hits: r.inner_layer_hits,
                });
                partials.push(r.neighbors);
            }
            Ok(Reduced { neighbors: merge_topk(&partials, exp.k), stats, missing })
        };
        let _ = exp.reply.send(outcome);
    }
}

/// Serves client frames on `listener` with an already built orchestrator.
///
/// `query_request` is answered with a `query_response` carrying the
/// prediction and latency; a cluster `build_request` rebuilds from
/// `dataset` (optionally with a new master seed); `shutdown` stops the
/// nodes and returns.
pub fn serve_clients(listener: std::net::TcpListener, orchestrator: &mut Orchestrator, dataset: &str) -> Result<()> {
    info!("orchestrator listening on {}", listener.local_addr()?);
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!("accept failed: {e}");
                continue;
            }
        };
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut writer = BufWriter::new(stream);
        loop {
            let frame = match protocol::read_frame(&mut reader) {
                Ok(Some(f)) => f,
                Ok(None) => break,
                Err(e) => {
                    warn!("client: {e}");
                    break;
                }
            };
            let env = match protocol::decode(&frame) {
                Ok(env) => env,
                Err(e) => {
                    let id = protocol::peek_request_id(&frame).unwrap_or(0);
                    let reply = protocol::encode(&Envelope::error(id, protocol::ErrorCode::Protocol, e.to_string()))?;
                    protocol::write_frame(&mut writer, &reply)?;
                    break;
                }
            };
            let id = env.request_id;
            let (reply, stop) = handle_client(orchestrator, dataset, env);
            let bytes = protocol::encode(&reply)
                .or_else(|e| protocol::encode(&Envelope::error(id, protocol::ErrorCode::Internal, e.to_string())))?;
            protocol::write_frame(&mut writer, &bytes)?;
            if stop {
                orchestrator.shutdown_nodes();
                return Ok(());
            }
        }
    }
    Ok(())
}

fn handle_client(o: &mut Orchestrator, dataset: &str, env: Envelope) -> (Envelope, bool) {
    use protocol::ErrorCode;
    let id = env.request_id;
    let err = |e: Error| Envelope::error(id, crate::node::error_code(&e), e.to_string());
    match env.message {
        Message::QueryRequest(q) => match o.query(&q.vector, q.k) {
            Ok(ans) => (
                Envelope::new(
                    id,
                    Message::QueryResponse(QueryResponse {
                        neighbors: ans.neighbors,
                        comparisons: ans.stats.comparisons_per_processor,
                        candidates_unique: ans.stats.candidates_unique,
                        inner_layer_hits: ans.stats.inner_layer_hits,
                        prediction: Some(ans.prediction),
                        latency_us: Some(ans.latency.as_micros() as u64),
                    }),
                ),
                false,
            ),
            Err(e) => (err(e), false),
        },
        Message::BuildRequest(BuildRequest::Cluster(req)) => {
            if let Some(seed) = req.master_seed {
                let cfg = SlshConfig { master_seed: seed, ..o.slsh_config().clone() };
                if let Err(e) = o.set_slsh_config(cfg) {
                    return (err(e), false);
                }
            }
            let n = match Dataset::read_csv(dataset) {
                Ok(ds) => ds.len(),
                Err(e) => return (err(e), false),
            };
            match o.build(dataset, n) {
                Ok(ack) => (Envelope::new(id, Message::BuildAck(BuildAck::Cluster(ack))), false),
                Err(e) => (err(e), false),
            }
        }
        Message::Shutdown => (Envelope::new(id, Message::Shutdown), true),
        other => (Envelope::error(id, ErrorCode::Protocol, format!("orchestrator does not accept {} from clients", other.type_name())), false),
    }
}

/// One request/response round trip to an orchestrator or node endpoint.
pub fn client_request(endpoint: &str, env: &Envelope, timeout: Duration) -> Result<Envelope> {
    let mut link = TcpLink::new(endpoint);
    let reply = link.exchange(&protocol::encode(env)?, timeout)?;
    protocol::decode(&reply)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(id: u64, d: f64, label: bool) -> KnnEntry {
        KnnEntry { point_id: id, distance: d, label }
    }

    #[test]
    fn vote_hand_evaluated() {
        let cfg = VotingConfig::default();
        // pos: 1/1 + 1/0.1 = 11, neg: 1
        assert!(weighted_vote(&[e(1, 1.0, true), e(2, 1.0, false), e(3, 0.1, true)], &cfg));
        assert!(!weighted_vote(&[e(1, 0.1, false), e(2, 3.0, false)], &cfg));
        assert!(weighted_vote(&[e(1, 1e6, true)], &cfg));
        assert!(!weighted_vote(&[], &cfg));
        assert!(weighted_vote(&[], &VotingConfig { tie_rule: TieRule::Positive, ..cfg }));
        // exact match does not divide by zero
        assert!(weighted_vote(&[e(1, 0.0, true), e(2, 0.0, false), e(3, 0.0, true)], &cfg));
        // symmetric tie
        assert!(!weighted_vote(&[e(1, 2.0, true), e(2, 2.0, false)], &cfg));
    }

    #[test]
    fn partition_sizes() {
        let sizes = |n, v| partition_dataset(n, v).iter().map(|r| r.len()).collect::<Vec<_>>();
        assert_eq!(sizes(10, 3), vec![4, 3, 3]);
        assert_eq!(partition_dataset(10, 1), vec![0..10]);
        assert_eq!(sizes(801_725, 2), vec![400_863, 400_862]);
        assert_eq!(sizes(2, 4), vec![1, 1, 0, 0]);
        let parts = partition_dataset(1001, 7);
        assert_eq!(parts.first().unwrap().start, 0);
        assert_eq!(parts.last().unwrap().end, 1001);
        assert!(parts.windows(2).all(|w| w[0].end == w[1].start));
    }

    #[test]
    fn config_file_parses() {
        let json = r#"{"nodes":["127.0.0.1:7001","127.0.0.1:7002"],"m_out":125,"L_out":120,"m_in":40,"L_in":20,
            "alpha":0.005,"inner_enabled":true,"d":30,"K":10,"epsilon":1e-9,"master_seed":42,"timeout_s":30}"#;
        let cfg = ClusterConfig::from_json(json).unwrap();
        assert_eq!(cfg.nodes.len(), 2);
        assert_eq!(cfg.slsh.l_out, 120);
        assert_eq!(cfg.voting.k, 10);
        assert_eq!(cfg.timeout, Duration::from_secs(30));
        assert_eq!(cfg.timeout_policy, TimeoutPolicy::FailQuery);

        let bad = json.replace("\"timeout_s\":30", "\"timeout_s\":30,\"bogus\":1");
        assert!(ClusterConfig::from_json(&bad).is_err());
        let bad = json.replace("\"alpha\":0.005", "\"alpha\":1.5");
        assert!(ClusterConfig::from_json(&bad).is_err());
    }

    #[test]
    fn unreachable_node_named_in_error() {
        // Port 9 on localhost is almost never open; bind-and-drop to be sure.
        let addr = {
            let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap().to_string()
        };
        let slsh = SlshConfig::outer_only(4, 2, 2, 3, 1);
        let links: Vec<Box<dyn NodeLink>> = vec![Box::new(TcpLink::new(addr.clone()))];
        let mut o = Orchestrator::new(links, slsh, VotingConfig::default(), Duration::from_secs(2), TimeoutPolicy::FailQuery).unwrap();
        o.set_build_timeout(Duration::from_secs(2));
        let err = o.build("whatever.csv", 10).unwrap_err();
        assert!(matches!(err, Error::BuildFailed { .. }));
        assert!(err.to_string().contains(&addr), "{err}");
    }
}
