use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::thread;
use std::time::Duration;

fn dslsh(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_dslsh")).args(args).env("RUST_LOG", "warn").output().unwrap();
    assert!(out.status.success(), "dslsh {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn free_port() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap().to_string()
}

fn spawn(args: &[&str]) -> Child {
    Command::new(env!("CARGO_BIN_EXE_dslsh")).args(args).env("RUST_LOG", "warn").stdout(Stdio::null()).spawn().unwrap()
}

fn make_dataset(dir: &Path) -> (String, String) {
    let waves = dir.join("waves");
    let ds = dir.join("ds.csv");
    let q = dir.join("q.csv");
    dslsh(&["gen-data", "--seed", "4", "--waveforms", "6", "--hours", "3", "--ahe-rate", "0.2", "--out", waves.to_str().unwrap()]);
    dslsh(&["extract", "--lag", "300", "--cond", "300", "--in", waves.to_str().unwrap(), "--out", ds.to_str().unwrap()]);
    let text = std::fs::read_to_string(&ds).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    let rows: Vec<&str> = lines.collect();
    assert!(rows.len() > 100);
    let queries: Vec<&str> = rows.iter().step_by(rows.len() / 20).copied().collect();
    std::fs::write(&q, format!("{header}\n{}\n", queries.join("\n"))).unwrap();
    (ds.to_string_lossy().into_owned(), q.to_string_lossy().into_owned())
}

#[test]
fn extract_and_bench_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, q) = make_dataset(dir.path());
    let grid = dir.path().join("grid.json");
    std::fs::write(&grid, r#"{"m_out":[20,40],"L_out":[4],"m_in":[8],"L_in":[2],"alpha":0.005,"onset":[20,4]}"#).unwrap();
    let out = dir.path().join("results.csv");
    dslsh(&[
        "bench", "--dataset", &ds, "--queries", &q, "--grid", grid.to_str().unwrap(), "--out", out.to_str().unwrap(), "--in-process", "2", "2",
        "--resamples", "50", "--scaling", "1,2",
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "m_out,L_out,m_in,L_in,alpha,median_cmp,ci_lo,ci_hi,pknn_cmp,speedup,mcc,recall");
    assert_eq!(lines.len(), 4);
    let scaling = std::fs::read_to_string(out.with_extension("scaling.csv")).unwrap();
    assert_eq!(scaling.lines().count(), 3);
}

#[test]
fn node_orchestrator_and_client() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, q) = make_dataset(dir.path());
    let (a, b, front) = (free_port(), free_port(), free_port());
    let mut nodes = vec![spawn(&["node", "--listen", &a, "--workers", "2"]), spawn(&["node", "--listen", &b, "--workers", "1"])];
    let cfg = dir.path().join("cluster.json");
    std::fs::write(
        &cfg,
        format!(
            r#"{{"nodes":["{a}","{b}"],"m_out":30,"L_out":6,"m_in":8,"L_in":2,"alpha":0.005,"inner_enabled":true,"d":30,"K":10,
               "epsilon":1e-9,"master_seed":3,"timeout_s":20,"dataset":"{ds}","listen":"{front}"}}"#
        ),
    )
    .unwrap();
    thread::sleep(Duration::from_millis(300));
    let mut orch = spawn(&["orchestrate", "--cluster", cfg.to_str().unwrap()]);

    let mut out = None;
    for _ in 0..100 {
        let o = Command::new(env!("CARGO_BIN_EXE_dslsh")).args(["query", "--endpoint", &front, "--file", &q, "--k", "5"]).output().unwrap();
        if o.status.success() {
            out = Some(o);
            break;
        }
        thread::sleep(Duration::from_millis(100));
    }
    let out = out.expect("orchestrator never answered");
    let replies: Vec<serde_json::Value> =
        String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(replies.len() >= 20);
    for r in &replies {
        assert!(r["neighbors"].as_array().unwrap().len() <= 5);
        assert_eq!(r["comparisons"].as_array().unwrap().len(), 3);
        assert!(r["prediction"].is_boolean());
    }

    let vector = vec!["80"; 30].join(",");
    dslsh(&["query", "--endpoint", &front, "--vector", &vector, "--k", "3"]);
    let built = dslsh(&["build", "--endpoint", &front, "--master-seed", "11"]);
    let ack: serde_json::Value = serde_json::from_slice(&built.stdout).unwrap();
    assert_eq!(ack["nodes"].as_array().unwrap().len(), 2);

    let mut stream = std::net::TcpStream::connect(&front).unwrap();
    use std::io::{BufRead, BufReader, Write};
    stream.write_all(b"{\"v\":1,\"type\":\"shutdown\",\"request_id\":1,\"payload\":{}}\n").unwrap();
    let mut line = String::new();
    BufReader::new(stream).read_line(&mut line).unwrap();
    assert_eq!(line, "{\"v\":1,\"type\":\"shutdown\",\"request_id\":1,\"payload\":{}}\n");
    assert!(orch.wait().unwrap().success());
    for n in &mut nodes {
        assert!(n.wait().unwrap().success());
    }
}
