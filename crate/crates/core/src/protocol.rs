//! Orchestrator/node wire format.
//!
//! Every frame is a single UTF-8 JSON object followed by `'\n'`:
//!
//! ```text
//! {"v":1,"type":"query_request","request_id":7,"payload":{"vector":[80.5,...],"k":10}}
//! ```
//!
//! Decoding is strict: unknown envelope or payload fields, unknown message
//! types, a protocol version other than [`PROTOCOL_VERSION`], and frames
//! larger than [`MAX_FRAME_BYTES`] are all rejected. See `docs/protocol.md`.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsh::HashSpec;
use crate::slsh::{KnnEntry, SlshConfig};

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_FRAME_BYTES: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub request_id: u64,
    pub message: Message,
}

impl Envelope {
    pub fn new(request_id: u64, message: Message) -> Self {
        Self { request_id, message }
    }

    pub fn error(request_id: u64, code: ErrorCode, message: impl Into<String>) -> Self {
        Self { request_id, message: Message::Error(ErrorPayload { code, message: message.into() }) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    BuildRequest(BuildRequest),
    BuildAck(BuildAck),
    QueryRequest(QueryRequest),
    QueryResponse(QueryResponse),
    Shutdown,
    Error(ErrorPayload),
}

impl Message {
    pub fn type_name(&self) -> &'static str {
        match self {
            Message::BuildRequest(_) => "build_request",
            Message::BuildAck(_) => "build_ack",
            Message::QueryRequest(_) => "query_request",
            Message::QueryResponse(_) => "query_response",
            Message::Shutdown => "shutdown",
            Message::Error(_) => "error",
        }
    }
}

/// Node build: rows `[row_start, row_start + row_count)` of the dataset CSV
/// at `dataset`, indexed with the broadcast `hash_specs`.
///
/// A cluster build (client to orchestrator) carries at most a replacement
/// master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BuildRequest {
    Node(NodeBuildRequest),
    Cluster(ClusterBuildRequest),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeBuildRequest {
    pub dataset: String,
    pub row_start: u64,
    pub row_count: u64,
    pub hash_specs: Vec<HashSpec>,
    pub config: SlshConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterBuildRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub master_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BuildAck {
    Node(NodeBuildAck),
    Cluster(ClusterBuildAck),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeBuildAck {
    pub n_local: u64,
    pub tables_built: u64,
    pub buckets_total: u64,
    pub inner_layers: u64,
    pub workers_active: u64,
    pub elapsed_ms: f64,
    /// Digest of the regenerated hash components, see [`crate::lsh::spec_digest`].
    pub spec_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterBuildAck {
    pub spec_digest: String,
    pub nodes: Vec<NodeBuildAck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    pub vector: Vec<f64>,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryResponse {
    pub neighbors: Vec<KnnEntry>,
    pub comparisons: Vec<u64>,
    pub candidates_unique: u64,
    pub inner_layer_hits: u64,
    /// Set only by the orchestrator when answering a client.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_us: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Protocol,
    InvalidParameter,
    NotBuilt,
    BuildFailed,
    Timeout,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorPayload {
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Empty {}

#[derive(Serialize)]
struct OutFrame<'a, P: Serialize> {
    v: u32,
    #[serde(rename = "type")]
    kind: &'a str,
    request_id: u64,
    payload: &'a P,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InFrame {
    v: u32,
    #[serde(rename = "type")]
    kind: String,
    request_id: u64,
    payload: serde_json::Value,
}

fn finite(values: impl IntoIterator<Item = f64>, what: &str) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::protocol(format!("non-finite float in {what}")))
    }
}

fn check_finite(msg: &Message) -> Result<()> {
    match msg {
        Message::BuildRequest(BuildRequest::Node(b)) => {
            finite([b.config.alpha], "config.alpha")?;
            finite(b.hash_specs.iter().map(|s| s.ceiling), "hash_specs.ceiling")
        }
        Message::BuildAck(BuildAck::Node(a)) => finite([a.elapsed_ms], "elapsed_ms"),
        Message::BuildAck(BuildAck::Cluster(a)) => finite(a.nodes.iter().map(|n| n.elapsed_ms), "elapsed_ms"),
        Message::QueryRequest(q) => finite(q.vector.iter().copied(), "vector"),
        Message::QueryResponse(r) => finite(r.neighbors.iter().map(|e| e.distance), "neighbors"),
        Message::BuildRequest(BuildRequest::Cluster(_)) | Message::Shutdown | Message::Error(_) => Ok(()),
    }
}

/// Serializes `env` as one newline-terminated JSON frame.
pub fn encode(env: &Envelope) -> Result<Vec<u8>> {
    check_finite(&env.message)?;
    fn frame<P: Serialize>(kind: &str, request_id: u64, payload: &P) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&OutFrame { v: PROTOCOL_VERSION, kind, request_id, payload })?;
        out.push(b'\n');
        Ok(out)
    }
    let kind = env.message.type_name();
    let id = env.request_id;
    let out = match &env.message {
        Message::BuildRequest(p) => frame(kind, id, p)?,
        Message::BuildAck(p) => frame(kind, id, p)?,
        Message::QueryRequest(p) => frame(kind, id, p)?,
        Message::QueryResponse(p) => frame(kind, id, p)?,
        Message::Shutdown => frame(kind, id, &Empty {})?,
        Message::Error(p) => frame(kind, id, p)?,
    };
    if out.len() > MAX_FRAME_BYTES {
        return Err(Error::protocol(format!("frame of {} bytes exceeds {MAX_FRAME_BYTES}", out.len())));
    }
    Ok(out)
}

fn payload<T: for<'de> Deserialize<'de>>(kind: &str, value: serde_json::Value) -> Result<T> {
    serde_json::from_value(value).map_err(|e| Error::protocol(format!("invalid {kind} payload: {e}")))
}

/// Parses and validates one newline-terminated frame.
pub fn decode(frame: &[u8]) -> Result<Envelope> {
    if frame.len() > MAX_FRAME_BYTES {
        return Err(Error::protocol(format!("frame of {} bytes exceeds {MAX_FRAME_BYTES}", frame.len())));
    }
    let Some((&b'\n', body)) = frame.split_last() else {
        return Err(Error::protocol("frame is not newline-terminated"));
    };
    if body.contains(&b'\n') {
        return Err(Error::protocol("frame contains more than one line"));
    }
    let raw: InFrame = serde_json::from_slice(body).map_err(|e| Error::protocol(format!("malformed frame: {e}")))?;
    if raw.v != PROTOCOL_VERSION {
        return Err(Error::protocol(format!("unsupported protocol version {} (expected {PROTOCOL_VERSION})", raw.v)));
    }
    let kind = raw.kind.as_str();
    let message = match kind {
        "build_request" => Message::BuildRequest(payload(kind, raw.payload)?),
        "build_ack" => Message::BuildAck(payload(kind, raw.payload)?),
        "query_request" => Message::QueryRequest(payload(kind, raw.payload)?),
        "query_response" => Message::QueryResponse(payload(kind, raw.payload)?),
        "shutdown" => {
            payload::<Empty>(kind, raw.payload)?;
            Message::Shutdown
        }
        "error" => Message::Error(payload(kind, raw.payload)?),
        other => return Err(Error::protocol(format!("unknown message type {other:?}"))),
    };
    Ok(Envelope { request_id: raw.request_id, message })
}

/// Best-effort request id of a frame that failed to decode, so the error
/// response can still echo it.
pub fn peek_request_id(frame: &[u8]) -> Option<u64> {
    let value: serde_json::Value = serde_json::from_slice(frame.strip_suffix(b"\n").unwrap_or(frame)).ok()?;
    value.get("request_id")?.as_u64()
}

/// Reads one frame including its trailing newline. `Ok(None)` on a clean
/// end of stream.
pub fn read_frame<R: BufRead>(reader: &mut R) -> Result<Option<Vec<u8>>> {
    let mut buf = Vec::new();
    let n = reader.take(MAX_FRAME_BYTES as u64 + 1).read_until(b'\n', &mut buf)?;
    if n == 0 {
        return Ok(None);
    }
    if buf.last() != Some(&b'\n') {
        if buf.len() > MAX_FRAME_BYTES {
            return Err(Error::protocol(format!("frame exceeds {MAX_FRAME_BYTES} bytes")));
        }
        return Err(Error::protocol("truncated frame (missing newline)"));
    }
    Ok(Some(buf))
}

pub fn write_frame<W: Write>(writer: &mut W, frame: &[u8]) -> Result<()> {
    writer.write_all(frame)?;
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lsh::HashFamily;

    #[test]
    fn shutdown_bytes() {
        let frame = encode(&Envelope::new(1, Message::Shutdown)).unwrap();
        assert_eq!(frame, b"{\"v\":1,\"type\":\"shutdown\",\"request_id\":1,\"payload\":{}}\n");
        assert_eq!(decode(&frame).unwrap(), Envelope::new(1, Message::Shutdown));
    }

    #[test]
    fn query_request_schema() {
        let env = Envelope::new(9, Message::QueryRequest(QueryRequest { vector: vec![80.5, 0.1], k: 10 }));
        let frame = encode(&env).unwrap();
        assert_eq!(
            std::str::from_utf8(&frame).unwrap(),
            "{\"v\":1,\"type\":\"query_request\",\"request_id\":9,\"payload\":{\"vector\":[80.5,0.1],\"k\":10}}\n"
        );
    }

    #[test]
    fn non_finite_rejected_on_encode() {
        let env = Envelope::new(2, Message::QueryRequest(QueryRequest { vector: vec![f64::NAN], k: 1 }));
        assert!(matches!(encode(&env), Err(Error::Protocol(_))));
        let env = Envelope::new(
            2,
            Message::QueryResponse(QueryResponse {
                neighbors: vec![KnnEntry { point_id: 1, distance: f64::INFINITY, label: false }],
                comparisons: vec![],
                candidates_unique: 0,
                inner_layer_hits: 0,
                prediction: None,
                latency_us: None,
            }),
        );
        assert!(encode(&env).is_err());
    }

    #[test]
    fn rejects_bad_frames() {
        let cases: &[&[u8]] = &[
            b"{\"v\":1,\"type\":\"shutdown\",\"request_id\":1,\"payload\":{}}", // no newline
            b"{\"v\":1,\"type\":\"shutdown\",\"request_id\":1,\"payl\n",
            b"{\"v\":2,\"type\":\"shutdown\",\"request_id\":1,\"payload\":{}}\n",
            b"{\"v\":1,\"type\":\"reboot\",\"request_id\":1,\"payload\":{}}\n",
            b"{\"v\":1,\"type\":\"shutdown\",\"request_id\":1,\"payload\":{\"now\":true}}\n",
            b"{\"v\":1,\"type\":\"shutdown\",\"request_id\":1,\"payload\":{},\"extra\":0}\n",
            b"{\"v\":1,\"type\":\"query_request\",\"request_id\":1,\"payload\":{\"vector\":[1.0]}}\n",
            b"{\"v\":1,\"type\":\"query_request\",\"request_id\":1,\"payload\":{\"vector\":[1.0],\"k\":1,\"x\":2}}\n",
            b"{\"v\":1,\"type\":\"shutdown\",\"request_id\":-1,\"payload\":{}}\n",
            b"not json\n",
            b"\n",
        ];
        for frame in cases {
            assert!(matches!(decode(frame), Err(Error::Protocol(_))), "{:?}", String::from_utf8_lossy(frame));
        }
    }

    #[test]
    fn truncated_stream_frame() {
        let mut r = &b"{\"v\":1,\"type\":\"shut"[..];
        assert!(read_frame(&mut r).is_err());
        let mut empty = &b""[..];
        assert!(read_frame(&mut empty).unwrap().is_none());
        let mut two = &b"a\nb\n"[..];
        assert_eq!(read_frame(&mut two).unwrap().unwrap(), b"a\n");
        assert_eq!(read_frame(&mut two).unwrap().unwrap(), b"b\n");
    }

    #[test]
    fn build_request_variants() {
        let node = NodeBuildRequest {
            dataset: "data.csv".into(),
            row_start: 0,
            row_count: 5,
            hash_specs: vec![HashSpec::new(HashFamily::L1BitSample, u64::MAX, 4, 30)],
            config: SlshConfig::outer_only(4, 1, 30, 10, 7),
        };
        let env = Envelope::new(3, Message::BuildRequest(BuildRequest::Node(node)));
        assert_eq!(decode(&encode(&env).unwrap()).unwrap(), env);

        let cluster = Envelope::new(4, Message::BuildRequest(BuildRequest::Cluster(ClusterBuildRequest::default())));
        let frame = encode(&cluster).unwrap();
        assert!(std::str::from_utf8(&frame).unwrap().contains("\"payload\":{}"));
        assert_eq!(decode(&frame).unwrap(), cluster);
    }

    #[test]
    fn peeks_request_id() {
        assert_eq!(peek_request_id(b"{\"request_id\":42,\"type\":\"x\"}\n"), Some(42));
        assert_eq!(peek_request_id(b"garbage\n"), None);
    }
}
