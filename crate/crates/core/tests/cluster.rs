use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use dslsh_core::eval::clustered_dataset;
use dslsh_core::node::{self, DatasetRegistry, Node, NodeConfig};
use dslsh_core::orchestrator::{
    self, client_request, partition_dataset, weighted_vote, ClusterConfig, LocalLink, NodeLink, Orchestrator, TcpLink, TimeoutPolicy, VotingConfig,
};
use dslsh_core::protocol::{BuildAck, BuildRequest, ClusterBuildRequest, Envelope, ErrorCode, Message, QueryRequest};
use dslsh_core::{Error, SlshConfig, SlshIndex};

fn tcp_links(endpoints: &[String]) -> Vec<Box<dyn NodeLink>> {
    endpoints.iter().map(|e| Box::new(TcpLink::new(e.clone())) as Box<dyn NodeLink>).collect()
}

#[test]
fn tcp_cluster_matches_monolithic_index() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    let (data, queries) = clustered_dataset(2000, 50, 10, 8, 5.0, 0.4, 17);
    data.write_csv(&path).unwrap();
    let path = path.to_string_lossy().into_owned();

    let mut endpoints = Vec::new();
    let mut handles = Vec::new();
    for i in 0..3 {
        let (addr, h) = node::spawn("127.0.0.1:0", Node::with_workers(format!("n{i}"), 2)).unwrap();
        endpoints.push(addr.to_string());
        handles.push(h);
    }
    let cfg = SlshConfig::outer_only(12, 6, 10, 10, 3);
    let mut o = Orchestrator::new(tcp_links(&endpoints), cfg.clone(), VotingConfig::default(), Duration::from_secs(10), TimeoutPolicy::FailQuery)
        .unwrap();
    let ack = o.build(&path, data.len()).unwrap();
    let ranges = partition_dataset(data.len(), 3);
    for (a, r) in ack.nodes.iter().zip(&ranges) {
        assert_eq!(a.n_local as usize, r.len());
        assert_eq!(a.spec_digest, ack.spec_digest);
    }
    let mono = SlshIndex::build(cfg, &data.points).unwrap();
    for q in &queries.points {
        let ans = o.query(&q.features, 10).unwrap();
        let (want, stats) = mono.query(&q.features, 10).unwrap();
        assert_eq!(ans.neighbors, want);
        assert_eq!(ans.stats.candidates_unique, stats.candidates_unique);
        assert_eq!(ans.stats.comparisons_per_processor.len(), 6);
        assert_eq!(ans.prediction, weighted_vote(&want, &VotingConfig::default()));
    }
    o.shutdown_nodes();
    for h in handles {
        h.join().unwrap().unwrap();
    }
}

#[test]
fn orchestrator_serves_clients() {
    let (data, queries) = clustered_dataset(800, 5, 6, 4, 5.0, 0.5, 5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    data.write_csv(&path).unwrap();
    let path = path.to_string_lossy().into_owned();
    let (a, ha) = node::spawn("127.0.0.1:0", Node::with_workers("a", 1)).unwrap();
    let (b, hb) = node::spawn("127.0.0.1:0", Node::with_workers("b", 3)).unwrap();

    let cfg_json = format!(
        r#"{{"nodes":["{a}","{b}"],"m_out":8,"L_out":4,"m_in":4,"L_in":2,"alpha":0.01,"inner_enabled":true,
            "d":6,"K":5,"epsilon":1e-9,"master_seed":1,"timeout_s":10,"dataset":"{path}"}}"#
    );
    let cfg = ClusterConfig::from_json(&cfg_json).unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let client_addr = listener.local_addr().unwrap().to_string();
    let server = thread::spawn(move || {
        let mut o = Orchestrator::connect(&cfg).unwrap();
        o.build(&path, 800).unwrap();
        orchestrator::serve_clients(listener, &mut o, &path)
    });

    let timeout = Duration::from_secs(20);
    let ask = |env: Envelope| loop {
        match client_request(&client_addr, &env, timeout) {
            Ok(r) => break r,
            Err(_) => thread::sleep(Duration::from_millis(50)),
        }
    };
    let reply = ask(Envelope::new(1, Message::QueryRequest(QueryRequest { vector: queries.points[0].features.clone(), k: 5 })));
    assert_eq!(reply.request_id, 1);
    let Message::QueryResponse(r) = reply.message else { panic!("expected a query response") };
    assert!(r.neighbors.len() <= 5);
    assert!(r.prediction.is_some() && r.latency_us.is_some());
    assert_eq!(r.comparisons.len(), 4);

    let reply = ask(Envelope::new(2, Message::BuildRequest(BuildRequest::Cluster(ClusterBuildRequest { master_seed: Some(99) }))));
    let Message::BuildAck(BuildAck::Cluster(ack)) = reply.message else { panic!("expected a cluster build ack") };
    assert_eq!(ack.nodes.iter().map(|n| n.n_local).sum::<u64>(), 800);

    let reply = ask(Envelope::new(3, Message::QueryRequest(QueryRequest { vector: vec![1.0], k: 5 })));
    let Message::Error(e) = reply.message else { panic!("expected an error") };
    assert_eq!(e.code, ErrorCode::InvalidParameter);

    let reply = ask(Envelope::new(4, Message::Shutdown));
    assert!(matches!(reply.message, Message::Shutdown));
    server.join().unwrap().unwrap();
    ha.join().unwrap().unwrap();
    hb.join().unwrap().unwrap();
}

#[test]
fn node_answers_malformed_frames_with_an_error() {
    let (addr, handle) = node::spawn("127.0.0.1:0", Node::with_workers("m", 1)).unwrap();
    let mut stream = std::net::TcpStream::connect(addr).unwrap();
    use std::io::Write;
    stream.write_all(b"{\"v\":1,\"type\":\"query_request\",\"request_id\":5,\"payload\":{}}\n").unwrap();
    let mut line = String::new();
    BufReader::new(stream.try_clone().unwrap()).read_line(&mut line).unwrap();
    let env = dslsh_core::protocol::decode(line.as_bytes()).unwrap();
    assert_eq!(env.request_id, 5);
    assert!(matches!(env.message, Message::Error(ref e) if e.code == ErrorCode::Protocol));

    let reply = client_request(&addr.to_string(), &Envelope::new(6, Message::QueryRequest(QueryRequest { vector: vec![1.0], k: 1 })), Duration::from_secs(5))
        .unwrap();
    assert!(matches!(reply.message, Message::Error(ref e) if e.code == ErrorCode::NotBuilt));
    client_request(&addr.to_string(), &Envelope::new(7, Message::Shutdown), Duration::from_secs(5)).unwrap();
    handle.join().unwrap().unwrap();
}

/// Accepts connections and reads requests but never answers.
fn silent_endpoint() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            thread::spawn(move || {
                let mut reader = BufReader::new(stream);
                let mut line = String::new();
                while reader.read_line(&mut line).map(|n| n > 0).unwrap_or(false) {
                    line.clear();
                }
            });
        }
    });
    addr
}

#[test]
fn silent_node_fails_the_build_and_names_itself() {
    let (data, _) = clustered_dataset(400, 0, 4, 3, 5.0, 0.5, 8);
    let registry = Arc::new(DatasetRegistry::new());
    registry.register("mem", Arc::new(data));
    let (live, handle) = node::spawn("127.0.0.1:0", Node::new(NodeConfig { node_id: "live".into(), workers: 1 }, registry)).unwrap();
    let silent = silent_endpoint();
    let cfg = SlshConfig::outer_only(6, 3, 4, 5, 1);
    let links = tcp_links(&[live.to_string(), silent.clone()]);
    let mut o = Orchestrator::new(links, cfg, VotingConfig::default(), Duration::from_millis(300), TimeoutPolicy::FailQuery).unwrap();
    o.set_build_timeout(Duration::from_millis(500));
    match o.build("mem", 400).unwrap_err() {
        Error::BuildFailed { failures } => {
            assert_eq!(failures.len(), 1, "{failures:?}");
            assert!(failures[0].contains(&silent), "{failures:?}");
        }
        other => panic!("unexpected {other}"),
    }
    assert!(o.query(&[1.0, 2.0, 3.0, 4.0], 3).is_err());
    o.shutdown_nodes();
    handle.join().unwrap().unwrap();
}

/// An in-process node whose query replies arrive after `delay`.
struct SlowLink {
    inner: LocalLink,
    delay: Duration,
}

impl NodeLink for SlowLink {
    fn endpoint(&self) -> &str {
        self.inner.endpoint()
    }

    fn exchange(&mut self, frame: &[u8], timeout: Duration) -> dslsh_core::Result<Vec<u8>> {
        let reply = self.inner.exchange(frame, timeout)?;
        if frame.windows(13).any(|w| w == b"query_request") {
            thread::sleep(self.delay);
        }
        Ok(reply)
    }
}

fn cluster_with_slow_node(policy: TimeoutPolicy) -> (Orchestrator, Vec<f64>) {
    let (data, queries) = clustered_dataset(600, 1, 4, 3, 5.0, 0.5, 8);
    let registry = Arc::new(DatasetRegistry::new());
    registry.register("mem", Arc::new(data));
    let node = |id: &str| Node::new(NodeConfig { node_id: id.into(), workers: 1 }, Arc::clone(&registry));
    let links: Vec<Box<dyn NodeLink>> = vec![
        Box::new(LocalLink::new(node("fast"))),
        Box::new(SlowLink { inner: LocalLink::new(node("slow")), delay: Duration::from_millis(600) }),
    ];
    let cfg = SlshConfig::outer_only(6, 3, 4, 5, 1);
    let mut o = Orchestrator::new(links, cfg, VotingConfig::default(), Duration::from_millis(200), policy).unwrap();
    o.build("mem", 600).unwrap();
    (o, queries.points[0].features.clone())
}

#[test]
fn late_node_fails_the_query_by_default() {
    let (o, q) = cluster_with_slow_node(TimeoutPolicy::FailQuery);
    match o.query(&q, 5).unwrap_err() {
        Error::Timeout { endpoints } => assert_eq!(endpoints, vec!["inproc://slow".to_string()]),
        other => panic!("unexpected {other}"),
    }
    // The late reply of the first query must not be taken for the second.
    thread::sleep(Duration::from_millis(700));
    assert!(matches!(o.query(&q, 5), Err(Error::Timeout { .. })));
}

#[test]
fn late_node_is_reported_under_partial_results() {
    let (o, q) = cluster_with_slow_node(TimeoutPolicy::PartialResults);
    let ans = o.query(&q, 5).unwrap();
    assert_eq!(ans.missing, vec!["inproc://slow".to_string()]);
    assert_eq!(ans.stats.comparisons_per_processor.len(), 1);
    assert!(ans.neighbors.iter().all(|e| e.point_id < 300));
}

#[test]
fn unreachable_endpoint_is_named() {
    let dead = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().to_string()
    };
    let mut o = Orchestrator::new(tcp_links(&[dead.clone()]), SlshConfig::outer_only(4, 2, 3, 3, 0), VotingConfig::default(), Duration::from_secs(2), TimeoutPolicy::FailQuery)
        .unwrap();
    let err = o.build("whatever.csv", 10).unwrap_err().to_string();
    assert!(err.contains(&dead), "{err}");
}
