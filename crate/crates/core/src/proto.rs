//! Wire protocol, transports and the aggregator and client round loops.
//!
//! A frame is `[u32 BE frame length][u32 BE header length][JSON header][tensor block]`.
//! The header always carries `kind`, `round` and `sender_id`; ROUND_START and
//! UPDATE frames also carry a `tensor_manifest` describing the tensor block,
//! which holds every factor as little-endian f32 in manifest order.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{ErrorKind, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::path::Path;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::aggregation::{aggregate_with, renormalize_weights, ClientUpdate, GlobalAdapterState};
use crate::config::FedConfig;
use crate::data::ClientShard;
use crate::error::{FedError, Result};
use crate::identity::{canonical_bytes, sign_update, ClientIdentity, KeyRegistry, Ledger, LedgerEntry, Verdict};
use crate::linalg::Matrix;
use crate::lora::{train_local, AdapterPair, AdapterSet, BaseModel, InjectionTarget, OptimizerState, ScalingMode};

/// `sender_id` used by the aggregator.
pub const AGGREGATOR_ID: u32 = u32::MAX;

/// Upper bound on a single frame, length prefix excluded.
pub const MAX_FRAME_LEN: usize = 256 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    Register,
    RegisterAck,
    RoundStart,
    Update,
    UpdateAck,
    RoundComplete,
    Shutdown,
    Error,
}

impl MessageKind {
    pub const ALL: [MessageKind; 8] = [
        MessageKind::Register,
        MessageKind::RegisterAck,
        MessageKind::RoundStart,
        MessageKind::Update,
        MessageKind::UpdateAck,
        MessageKind::RoundComplete,
        MessageKind::Shutdown,
        MessageKind::Error,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::Register => "REGISTER",
            MessageKind::RegisterAck => "REGISTER_ACK",
            MessageKind::RoundStart => "ROUND_START",
            MessageKind::Update => "UPDATE",
            MessageKind::UpdateAck => "UPDATE_ACK",
            MessageKind::RoundComplete => "ROUND_COMPLETE",
            MessageKind::Shutdown => "SHUTDOWN",
            MessageKind::Error => "ERROR",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| FedError::Protocol(format!("unknown message kind {s:?}")))
    }

    pub fn carries_tensors(self) -> bool {
        matches!(self, MessageKind::RoundStart | MessageKind::Update)
    }

    fn required_keys(self) -> &'static [&'static str] {
        match self {
            MessageKind::RoundStart => &["tensor_manifest", "rank", "alpha", "scaling_mode"],
            MessageKind::Update => &["tensor_manifest", "rank", "alpha", "scaling_mode", "n_k", "signature"],
            MessageKind::Error => &["reason"],
            _ => &[],
        }
    }
}

impl std::fmt::Display for MessageKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Factor {
    A,
    B,
}

/// One entry of a tensor manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorDesc {
    pub target: InjectionTarget,
    pub which: Factor,
    pub rows: u32,
    pub cols: u32,
}

impl TensorDesc {
    pub fn byte_len(&self) -> usize {
        self.rows as usize * self.cols as usize * 4
    }
}

const RESERVED_KEYS: [&str; 3] = ["kind", "round", "sender_id"];

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub round: u32,
    pub sender_id: u32,
    /// Header fields other than `kind`, `round` and `sender_id`.
    pub header: Map<String, Value>,
    pub tensor_payload: Option<Vec<u8>>,
}

impl Message {
    /// A message without tensors and with an empty header.
    pub fn new(kind: MessageKind, round: u32, sender_id: u32) -> Self {
        Self {
            kind,
            round,
            sender_id,
            header: Map::new(),
            tensor_payload: None,
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.header.insert(key.to_string(), value.into());
        self
    }

    pub fn error(round: u32, sender_id: u32, reason: impl Into<String>) -> Self {
        Self::new(MessageKind::Error, round, sender_id).with("reason", reason.into())
    }

    fn with_adapters(kind: MessageKind, round: u32, sender_id: u32, adapters: &AdapterSet) -> Result<Self> {
        let (rank, alpha, scaling) = adapters
            .hyper()
            .ok_or_else(|| FedError::Input("cannot send an empty adapter set".into()))?;
        let (manifest, block) = tensor_block(adapters);
        let mut msg = Self::new(kind, round, sender_id)
            .with("tensor_manifest", serde_json::to_value(manifest)?)
            .with("rank", rank as u64)
            .with("alpha", alpha)
            .with("scaling_mode", scaling.name());
        msg.tensor_payload = Some(block);
        Ok(msg)
    }

    pub fn round_start(round: u32, adapters: &AdapterSet) -> Result<Self> {
        Self::with_adapters(MessageKind::RoundStart, round, AGGREGATOR_ID, adapters)
    }

    /// A signed UPDATE. The signature covers the tensor block this message carries.
    pub fn signed_update(round: u32, identity: &ClientIdentity, n_k: u64, adapters: &AdapterSet) -> Result<Self> {
        Self::update_signed_by(round, identity.client_id, n_k, adapters, identity)
    }

    /// An UPDATE claiming to come from `client_id` but signed by `signer`.
    pub fn update_signed_by(
        round: u32,
        client_id: u32,
        n_k: u64,
        adapters: &AdapterSet,
        signer: &ClientIdentity,
    ) -> Result<Self> {
        let msg = Self::with_adapters(MessageKind::Update, round, client_id, adapters)?;
        let block = msg.tensor_payload.as_deref().unwrap_or_default();
        let signature = sign_update(signer, &canonical_bytes(round, client_id, n_k, block))?;
        Ok(msg.with("n_k", n_k).with("signature", B64.encode(signature)))
    }

    pub fn header_u64(&self, key: &str) -> Result<u64> {
        self.header
            .get(key)
            .and_then(Value::as_u64)
            .ok_or_else(|| FedError::Protocol(format!("{} header field {key:?} missing or not an integer", self.kind)))
    }

    pub fn header_f64(&self, key: &str) -> Result<f64> {
        self.header
            .get(key)
            .and_then(Value::as_f64)
            .ok_or_else(|| FedError::Protocol(format!("{} header field {key:?} missing or not a number", self.kind)))
    }

    pub fn header_str(&self, key: &str) -> Result<&str> {
        self.header
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| FedError::Protocol(format!("{} header field {key:?} missing or not a string", self.kind)))
    }

    pub fn tensor_manifest(&self) -> Result<Vec<TensorDesc>> {
        let raw = self
            .header
            .get("tensor_manifest")
            .ok_or_else(|| FedError::Protocol(format!("{} without tensor_manifest", self.kind)))?;
        serde_json::from_value(raw.clone())
            .map_err(|e| FedError::Protocol(format!("malformed tensor_manifest: {e}")))
    }

    /// Rebuilds the adapter set carried by a ROUND_START or UPDATE.
    pub fn adapters(&self) -> Result<AdapterSet> {
        let block = self
            .tensor_payload
            .as_deref()
            .ok_or_else(|| FedError::Protocol(format!("{} carries no tensors", self.kind)))?;
        let rank = self.header_u64("rank")? as usize;
        let alpha = self.header_f64("alpha")?;
        let scaling = ScalingMode::parse(self.header_str("scaling_mode")?)
            .map_err(|e| FedError::Protocol(e.to_string()))?;
        let set = adapters_from_block(&self.tensor_manifest()?, block, alpha, scaling)?;
        if set.hyper().map(|h| h.0) != Some(rank) {
            return Err(FedError::Protocol(format!("header rank {rank} disagrees with the tensors")));
        }
        Ok(set)
    }

    pub fn signature(&self) -> Result<Vec<u8>> {
        B64.decode(self.header_str("signature")?)
            .map_err(|e| FedError::Protocol(format!("signature is not base64: {e}")))
    }

    /// Interprets an UPDATE as a client update.
    pub fn to_client_update(&self) -> Result<ClientUpdate> {
        if self.kind != MessageKind::Update {
            return Err(FedError::Protocol(format!("expected UPDATE, got {}", self.kind)));
        }
        Ok(ClientUpdate {
            client_id: self.sender_id,
            round: self.round,
            n_k: self.header_u64("n_k")?,
            adapters: self.adapters()?,
            signature: self.signature()?,
        })
    }

    /// Canonical bytes the UPDATE signature must cover.
    pub fn canonical_bytes(&self) -> Result<Vec<u8>> {
        let block = self.tensor_payload.as_deref().unwrap_or_default();
        Ok(canonical_bytes(self.round, self.sender_id, self.header_u64("n_k")?, block))
    }

    fn check(&self) -> Result<Vec<TensorDesc>> {
        if let Some(k) = RESERVED_KEYS.iter().find(|k| self.header.contains_key(**k)) {
            return Err(FedError::Protocol(format!("header field {k:?} is reserved")));
        }
        for key in self.kind.required_keys() {
            if !self.header.contains_key(*key) {
                return Err(FedError::Protocol(format!("{} requires header field {key:?}", self.kind)));
            }
        }
        match (&self.tensor_payload, self.kind.carries_tensors()) {
            (Some(block), true) => {
                let manifest = self.tensor_manifest()?;
                let expected: usize = manifest.iter().map(TensorDesc::byte_len).sum();
                if expected != block.len() {
                    return Err(FedError::Framing(format!(
                        "tensor block is {} bytes but the manifest describes {expected}",
                        block.len()
                    )));
                }
                Ok(manifest)
            }
            (None, false) => Ok(Vec::new()),
            (None, true) => Err(FedError::Protocol(format!("{} requires a tensor payload", self.kind))),
            (Some(_), false) => Err(FedError::Protocol(format!("{} must not carry tensors", self.kind))),
        }
    }
}

/// Serializes a message into a length-prefixed frame.
pub fn encode(msg: &Message) -> Result<Vec<u8>> {
    msg.check()?;
    let mut header = msg.header.clone();
    header.insert("kind".into(), msg.kind.name().into());
    header.insert("round".into(), msg.round.into());
    header.insert("sender_id".into(), msg.sender_id.into());
    let header = serde_json::to_vec(&Value::Object(header))?;
    let payload = msg.tensor_payload.as_deref().unwrap_or_default();
    let frame_len = 4 + header.len() + payload.len();
    if frame_len > MAX_FRAME_LEN {
        return Err(FedError::Framing(format!("frame of {frame_len} bytes exceeds the limit")));
    }
    let mut out = Vec::with_capacity(4 + frame_len);
    out.extend_from_slice(&(frame_len as u32).to_be_bytes());
    out.extend_from_slice(&(header.len() as u32).to_be_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(payload);
    Ok(out)
}

fn take_u32(header: &mut Map<String, Value>, key: &str) -> Result<u32> {
    header
        .remove(key)
        .and_then(|v| v.as_u64())
        .and_then(|v| u32::try_from(v).ok())
        .ok_or_else(|| FedError::Protocol(format!("header field {key:?} missing or not a u32")))
}

/// Parses one complete frame, length prefix included.
pub fn decode(bytes: &[u8]) -> Result<Message> {
    let prefix: [u8; 4] = bytes
        .get(..4)
        .and_then(|p| p.try_into().ok())
        .ok_or_else(|| FedError::Framing("truncated length prefix".into()))?;
    let frame_len = u32::from_be_bytes(prefix) as usize;
    let frame = &bytes[4..];
    if frame.len() < frame_len {
        return Err(FedError::Framing(format!("truncated frame: {} of {frame_len} bytes", frame.len())));
    }
    if frame.len() > frame_len {
        return Err(FedError::Framing(format!("{} trailing bytes after frame", frame.len() - frame_len)));
    }
    if frame.len() < 4 {
        return Err(FedError::Framing("truncated header length".into()));
    }
    let header_len = u32::from_be_bytes(frame[..4].try_into().expect("4 bytes")) as usize;
    let rest = &frame[4..];
    if header_len > rest.len() {
        return Err(FedError::Framing(format!(
            "header length {header_len} exceeds the {} bytes left in the frame",
            rest.len()
        )));
    }
    let mut header = match serde_json::from_slice::<Value>(&rest[..header_len]) {
        Ok(Value::Object(map)) => map,
        Ok(_) => return Err(FedError::Framing("header is not a JSON object".into())),
        Err(e) => return Err(FedError::Framing(format!("malformed header: {e}"))),
    };
    let kind = match header.remove("kind") {
        Some(Value::String(s)) => MessageKind::parse(&s)?,
        _ => return Err(FedError::Protocol("header field \"kind\" missing or not a string".into())),
    };
    let round = take_u32(&mut header, "round")?;
    let sender_id = take_u32(&mut header, "sender_id")?;
    let block = &rest[header_len..];
    let msg = Message {
        kind,
        round,
        sender_id,
        header,
        tensor_payload: if kind.carries_tensors() {
            Some(block.to_vec())
        } else if block.is_empty() {
            None
        } else {
            return Err(FedError::Framing(format!("{kind} frame has {} stray payload bytes", block.len())));
        },
    };
    msg.check()?;
    Ok(msg)
}

/// Manifest and little-endian f32 tensor block, targets in canonical order, A before B.
pub fn tensor_block(adapters: &AdapterSet) -> (Vec<TensorDesc>, Vec<u8>) {
    let mut manifest = Vec::new();
    let mut block = Vec::new();
    for pair in adapters.pairs.values() {
        for (factor, m) in [(Factor::A, &pair.a), (Factor::B, &pair.b)] {
            manifest.push(TensorDesc {
                target: pair.target,
                which: factor,
                rows: m.rows() as u32,
                cols: m.cols() as u32,
            });
            for &x in m.data() {
                block.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    (manifest, block)
}

pub fn adapters_from_block(
    manifest: &[TensorDesc],
    block: &[u8],
    alpha: f64,
    scaling: ScalingMode,
) -> Result<AdapterSet> {
    let mut factors: BTreeMap<(InjectionTarget, Factor), Matrix> = BTreeMap::new();
    let mut offset = 0;
    for desc in manifest {
        let end = offset + desc.byte_len();
        let bytes = block
            .get(offset..end)
            .ok_or_else(|| FedError::Framing("tensor block shorter than its manifest".into()))?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let m = Matrix::new(desc.rows as usize, desc.cols as usize, values)
            .map_err(|e| FedError::Protocol(format!("tensor {:?}/{:?}: {e}", desc.target, desc.which)))?;
        if factors.insert((desc.target, desc.which), m).is_some() {
            return Err(FedError::Protocol(format!("duplicate tensor {:?}/{:?}", desc.target, desc.which)));
        }
        offset = end;
    }
    if offset != block.len() {
        return Err(FedError::Framing("tensor block longer than its manifest".into()));
    }
    let targets: BTreeSet<InjectionTarget> = factors.keys().map(|k| k.0).collect();
    let mut pairs = Vec::new();
    for target in targets {
        let a = factors.remove(&(target, Factor::A));
        let b = factors.remove(&(target, Factor::B));
        let (Some(a), Some(b)) = (a, b) else {
            return Err(FedError::Protocol(format!("target {target} lacks one of its factors")));
        };
        pairs.push(AdapterPair::new(target, a, b, alpha, scaling).map_err(|e| FedError::Protocol(e.to_string()))?);
    }
    AdapterSet::from_pairs(pairs).map_err(|e| FedError::Protocol(e.to_string()))
}

/// Rounds every factor to f32, as a trip over the wire does.
pub fn quantize(adapters: &AdapterSet) -> Result<AdapterSet> {
    let Some((_, alpha, scaling)) = adapters.hyper() else {
        return Ok(adapters.clone());
    };
    let (manifest, block) = tensor_block(adapters);
    adapters_from_block(&manifest, &block, alpha, scaling)
}

pub trait FrameSink: Send {
    fn send_frame(&mut self, frame: &[u8]) -> Result<()>;

    /// Releases the peer; further receives on its side report a closed connection.
    fn close(&mut self) {}
}

pub trait FrameSource: Send {
    /// Next frame including its length prefix, or `None` once the peer has closed.
    fn recv_frame(&mut self) -> Result<Option<Vec<u8>>>;
}

pub struct Endpoint {
    pub sink: Box<dyn FrameSink>,
    pub source: Box<dyn FrameSource>,
}

impl Endpoint {
    pub fn send(&mut self, msg: &Message) -> Result<()> {
        self.sink.send_frame(&encode(msg)?)
    }

    pub fn recv(&mut self) -> Result<Option<Message>> {
        self.source.recv_frame()?.map(|f| decode(&f)).transpose()
    }

    pub fn tcp(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        Ok(Self {
            sink: Box::new(TcpSink(stream)),
            source: Box::new(TcpSource(reader)),
        })
    }
}

struct ChannelSink(Option<Sender<Vec<u8>>>);

impl FrameSink for ChannelSink {
    fn send_frame(&mut self, frame: &[u8]) -> Result<()> {
        let closed = || FedError::Connection {
            client_id: None,
            reason: "peer hung up".into(),
        };
        self.0.as_ref().ok_or_else(closed)?.send(frame.to_vec()).map_err(|_| closed())
    }

    fn close(&mut self) {
        self.0 = None;
    }
}

struct ChannelSource(Receiver<Vec<u8>>);

impl FrameSource for ChannelSource {
    fn recv_frame(&mut self) -> Result<Option<Vec<u8>>> {
        Ok(self.0.recv().ok())
    }
}

/// Two connected in-process endpoints.
pub fn in_process_pair() -> (Endpoint, Endpoint) {
    let (tx_ab, rx_ab) = mpsc::channel();
    let (tx_ba, rx_ba) = mpsc::channel();
    (
        Endpoint {
            sink: Box::new(ChannelSink(Some(tx_ab))),
            source: Box::new(ChannelSource(rx_ba)),
        },
        Endpoint {
            sink: Box::new(ChannelSink(Some(tx_ba))),
            source: Box::new(ChannelSource(rx_ab)),
        },
    )
}

struct TcpSink(TcpStream);

impl FrameSink for TcpSink {
    fn send_frame(&mut self, frame: &[u8]) -> Result<()> {
        self.0.write_all(frame).map_err(|e| FedError::Connection {
            client_id: None,
            reason: e.to_string(),
        })
    }

    fn close(&mut self) {
        let _ = self.0.shutdown(Shutdown::Both);
    }
}

struct TcpSource(TcpStream);

impl FrameSource for TcpSource {
    fn recv_frame(&mut self) -> Result<Option<Vec<u8>>> {
        read_frame(&mut self.0)
    }
}

/// Reads one length-prefixed frame. A clean end of stream before the prefix yields `None`.
pub fn read_frame<R: Read>(reader: &mut R) -> Result<Option<Vec<u8>>> {
    let mut prefix = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match reader.read(&mut prefix[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(FedError::Framing("stream ended inside a length prefix".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) if matches!(e.kind(), ErrorKind::ConnectionReset | ErrorKind::ConnectionAborted) => {
                return Ok(None)
            }
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(prefix) as usize;
    if len > MAX_FRAME_LEN {
        return Err(FedError::Framing(format!("announced frame of {len} bytes exceeds the limit")));
    }
    let mut frame = prefix.to_vec();
    frame.resize(4 + len, 0);
    reader.read_exact(&mut frame[4..]).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => FedError::Framing(format!("stream ended inside a {len}-byte frame")),
        _ => e.into(),
    })?;
    Ok(Some(frame))
}

/// Accepts `count` TCP connections or as many as arrive before `timeout`.
pub fn accept_clients(listener: &TcpListener, count: usize, timeout: Duration) -> Result<Vec<Endpoint>> {
    listener.set_nonblocking(true)?;
    let deadline = Instant::now() + timeout;
    let mut out = Vec::new();
    while out.len() < count && Instant::now() < deadline {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::debug!("accepted connection from {peer}");
                stream.set_nonblocking(false)?;
                out.push(Endpoint::tcp(stream)?);
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(2)),
            Err(e) => return Err(e.into()),
        }
    }
    listener.set_nonblocking(false)?;
    Ok(out)
}

/// Connects to an aggregator, retrying until `timeout`.
pub fn connect(address: &str, timeout: Duration) -> Result<Endpoint> {
    let deadline = Instant::now() + timeout;
    loop {
        match TcpStream::connect(address) {
            Ok(stream) => return Endpoint::tcp(stream),
            Err(e) if Instant::now() >= deadline => {
                return Err(FedError::Connection {
                    client_id: None,
                    reason: format!("cannot reach {address}: {e}"),
                })
            }
            Err(_) => thread::sleep(Duration::from_millis(20)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundPhase {
    Broadcasting,
    Collecting,
    Aggregating,
    Done,
}

/// Aggregator-side bookkeeping for one round. Phases only move forward.
#[derive(Debug)]
pub struct RoundState {
    pub round: u32,
    pub expected_clients: BTreeSet<u32>,
    pub received: BTreeMap<u32, ClientUpdate>,
    pub deadline: Instant,
    phase: RoundPhase,
    history: Vec<RoundPhase>,
}

impl RoundState {
    pub fn new(round: u32, deadline: Instant) -> Self {
        Self {
            round,
            expected_clients: BTreeSet::new(),
            received: BTreeMap::new(),
            deadline,
            phase: RoundPhase::Broadcasting,
            history: vec![RoundPhase::Broadcasting],
        }
    }

    pub fn phase(&self) -> RoundPhase {
        self.phase
    }

    pub fn history(&self) -> &[RoundPhase] {
        &self.history
    }

    pub fn advance(&mut self, next: RoundPhase) -> Result<()> {
        if next <= self.phase {
            return Err(FedError::Protocol(format!(
                "round {} cannot move from {:?} back to {next:?}",
                self.round, self.phase
            )));
        }
        self.phase = next;
        self.history.push(next);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub client_id: u32,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: u32,
    pub phases: Vec<RoundPhase>,
    /// Clients whose verified update entered the aggregate, ascending.
    pub accepted: Vec<u32>,
    /// Expected clients that delivered nothing usable in time.
    pub stragglers: Vec<u32>,
    pub rejected: Vec<Rejection>,
    pub weights: BTreeMap<u32, f64>,
    /// Accepted updates as received.
    pub updates: Vec<ClientUpdate>,
    /// Aggregate as broadcast to clients; `None` when the round failed.
    pub global: Option<GlobalAdapterState>,
    pub events: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageStats {
    pub sent: BTreeMap<String, u64>,
    pub received: BTreeMap<String, u64>,
    pub updates_accepted: u64,
    pub aggregations: u64,
}

impl MessageStats {
    fn sent(&mut self, kind: MessageKind) {
        *self.sent.entry(kind.name().into()).or_insert(0) += 1;
    }

    fn received(&mut self, kind: MessageKind) {
        *self.received.entry(kind.name().into()).or_insert(0) += 1;
    }

    pub fn sent_count(&self, kind: MessageKind) -> u64 {
        self.sent.get(kind.name()).copied().unwrap_or(0)
    }

    pub fn received_count(&self, kind: MessageKind) -> u64 {
        self.received.get(kind.name()).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    /// Adapters broadcast in round 1.
    pub initial: AdapterSet,
    pub rounds: Vec<RoundRecord>,
    pub stats: MessageStats,
    pub ledger: Vec<LedgerEntry>,
}

impl ExperimentResult {
    pub fn final_global(&self) -> Option<&GlobalAdapterState> {
        self.rounds.iter().rev().find_map(|r| r.global.as_ref())
    }
}

enum Event {
    Frame(usize, Vec<u8>),
    Closed(usize, Option<FedError>),
}

struct Conn {
    sink: Box<dyn FrameSink>,
    client: Option<u32>,
    alive: bool,
}

struct Conns(Vec<Conn>);

impl Conns {
    fn send(&mut self, idx: usize, msg: &Message, stats: &mut MessageStats) -> Result<()> {
        let conn = &mut self.0[idx];
        if !conn.alive {
            return Err(FedError::Connection {
                client_id: conn.client,
                reason: "connection already closed".into(),
            });
        }
        let frame = encode(msg)?;
        match conn.sink.send_frame(&frame) {
            Ok(()) => {
                stats.sent(msg.kind);
                Ok(())
            }
            Err(e) => {
                conn.alive = false;
                Err(FedError::Connection {
                    client_id: conn.client,
                    reason: e.to_string(),
                })
            }
        }
    }
}

impl Drop for Conns {
    fn drop(&mut self) {
        for c in &mut self.0 {
            c.sink.close();
        }
    }
}

fn next_event(rx: &Receiver<Event>, deadline: Instant) -> Option<Event> {
    let remaining = deadline.saturating_duration_since(Instant::now());
    match rx.recv_timeout(remaining) {
        Ok(ev) => Some(ev),
        Err(RecvTimeoutError::Timeout | RecvTimeoutError::Disconnected) => None,
    }
}

fn spawn_readers(endpoints: Vec<Endpoint>) -> (Conns, Receiver<Event>) {
    let (tx, rx) = mpsc::channel();
    let mut conns = Vec::new();
    for (idx, Endpoint { sink, mut source }) in endpoints.into_iter().enumerate() {
        conns.push(Conn {
            sink,
            client: None,
            alive: true,
        });
        let tx = tx.clone();
        thread::spawn(move || loop {
            match source.recv_frame() {
                Ok(Some(frame)) => {
                    if tx.send(Event::Frame(idx, frame)).is_err() {
                        break;
                    }
                }
                Ok(None) => {
                    let _ = tx.send(Event::Closed(idx, None));
                    break;
                }
                Err(e) => {
                    let _ = tx.send(Event::Closed(idx, Some(e)));
                    break;
                }
            }
        });
    }
    (Conns(conns), rx)
}

/// Runs the aggregator over already-established connections.
///
/// Clients register, then each round the aggregator broadcasts the global
/// adapters, collects signed updates until every live client has answered or
/// the timeout passes, aggregates the verified ones in ascending client order
/// and credits the ledger once per aggregated update.
pub fn run_aggregator(
    config: &FedConfig,
    registry: &KeyRegistry,
    ledger: &mut Ledger,
    endpoints: Vec<Endpoint>,
    initial: &AdapterSet,
) -> Result<ExperimentResult> {
    config.validate()?;
    initial.check_dims(&config.model)?;
    let expected: BTreeSet<u32> = config.client_ids().into_iter().collect();
    let (mut conns, rx) = spawn_readers(endpoints);
    let mut stats = MessageStats::default();
    let mut registered: BTreeMap<u32, usize> = BTreeMap::new();

    let deadline = Instant::now() + config.timeout();
    while registered.len() < expected.len() {
        let Some(ev) = next_event(&rx, deadline) else { break };
        match ev {
            Event::Frame(idx, bytes) => {
                let msg = match decode(&bytes) {
                    Ok(m) => m,
                    Err(e) => {
                        log::warn!("connection {idx}: undecodable frame during registration: {e}");
                        continue;
                    }
                };
                stats.received(msg.kind);
                if msg.kind != MessageKind::Register {
                    log::warn!("connection {idx}: {} before registration", msg.kind);
                    continue;
                }
                let id = msg.sender_id;
                let refusal = if !expected.contains(&id) {
                    Some(format!("client id {id} is not part of this federation"))
                } else if !registry.contains(id) {
                    Some(format!("client {id} has no registered public key"))
                } else if registered.contains_key(&id) || conns.0[idx].client.is_some() {
                    Some(format!("client {id} registered twice"))
                } else {
                    None
                };
                let reply = match &refusal {
                    Some(reason) => {
                        log::warn!("refusing registration: {reason}");
                        Message::error(0, AGGREGATOR_ID, reason.clone())
                    }
                    None => {
                        conns.0[idx].client = Some(id);
                        registered.insert(id, idx);
                        Message::new(MessageKind::RegisterAck, 0, AGGREGATOR_ID)
                    }
                };
                if let Err(e) = conns.send(idx, &reply, &mut stats) {
                    log::warn!("{e}");
                }
            }
            Event::Closed(idx, err) => {
                conns.0[idx].alive = false;
                log::warn!("connection {idx} closed during registration: {err:?}");
            }
        }
    }
    if registered.is_empty() {
        return Err(FedError::Connection {
            client_id: None,
            reason: "no client registered before the deadline".into(),
        });
    }
    log::info!("registered clients {:?}", registered.keys().collect::<Vec<_>>());

    let initial = quantize(initial)?;
    let mut global = initial.clone();
    let mut result = ExperimentResult {
        initial,
        rounds: Vec::new(),
        stats: MessageStats::default(),
        ledger: Vec::new(),
    };

    for t in 1..=config.rounds {
        let mut state = RoundState::new(t, Instant::now() + config.timeout());
        let mut events = Vec::new();
        let start = Message::round_start(t, &global)?;
        for (&id, &idx) in &registered {
            match conns.send(idx, &start, &mut stats) {
                Ok(()) => {
                    state.expected_clients.insert(id);
                }
                Err(e) => events.push(e.to_string()),
            }
        }
        state.deadline = Instant::now() + config.timeout();
        state.advance(RoundPhase::Collecting)?;

        let mut rejected: Vec<Rejection> = Vec::new();
        let mut answered: BTreeSet<u32> = BTreeSet::new();
        while !state.expected_clients.is_subset(&answered) {
            let Some(ev) = next_event(&rx, state.deadline) else { break };
            let (idx, bytes) = match ev {
                Event::Frame(idx, bytes) => (idx, bytes),
                Event::Closed(idx, err) => {
                    conns.0[idx].alive = false;
                    if let Some(id) = conns.0[idx].client {
                        state.expected_clients.remove(&id);
                        let reason = err.map_or("peer closed the connection".to_string(), |e| e.to_string());
                        events.push(
                            FedError::Connection {
                                client_id: Some(id),
                                reason,
                            }
                            .to_string(),
                        );
                    }
                    continue;
                }
            };
            let msg = match decode(&bytes) {
                Ok(m) => m,
                Err(e) => {
                    events.push(format!("connection {idx}: {e}"));
                    continue;
                }
            };
            stats.received(msg.kind);
            let Some(id) = conns.0[idx].client else {
                events.push(format!("connection {idx}: {} from an unregistered peer", msg.kind));
                continue;
            };
            if msg.kind != MessageKind::Update {
                events.push(format!("client {id}: unexpected {}", msg.kind));
                continue;
            }
            let verdict = if msg.round != t {
                Err(format!("stale update for round {} discarded", msg.round))
            } else if answered.contains(&id) {
                Err("duplicate update".to_string())
            } else {
                check_update(config, registry, &global, id, &msg)
            };
            let ack = Message::new(MessageKind::UpdateAck, msg.round, AGGREGATOR_ID);
            let ack = match verdict {
                Ok(update) => {
                    answered.insert(id);
                    state.received.insert(id, update);
                    ack.with("accepted", true)
                }
                Err(reason) => {
                    log::warn!("round {t}: rejected update from client {id}: {reason}");
                    events.push(format!("client {id}: {reason}"));
                    if msg.round == t && !answered.contains(&id) {
                        answered.insert(id);
                        rejected.push(Rejection { client_id: id, reason: reason.clone() });
                    }
                    ack.with("accepted", false).with("reason", reason)
                }
            };
            if let Err(e) = conns.send(idx, &ack, &mut stats) {
                events.push(e.to_string());
            }
        }

        state.advance(RoundPhase::Aggregating)?;
        let updates: Vec<ClientUpdate> = std::mem::take(&mut state.received).into_values().collect();
        let accepted: Vec<u32> = updates.iter().map(|u| u.client_id).collect();
        let stragglers: Vec<u32> = expected
            .iter()
            .copied()
            .filter(|id| !accepted.contains(id) && !rejected.iter().any(|r| r.client_id == *id))
            .collect();
        for id in &stragglers {
            log::warn!("round {t}: client {id} excluded as a straggler");
        }
        let mut record = RoundRecord {
            round: t,
            phases: Vec::new(),
            accepted: accepted.clone(),
            stragglers,
            rejected,
            weights: BTreeMap::new(),
            updates,
            global: None,
            events,
        };
        if record.updates.is_empty() {
            record.phases = state.history().to_vec();
            result.rounds.push(record);
            result.stats = stats;
            result.ledger = ledger.entries().to_vec();
            return Err(FedError::RoundFailed {
                round: t,
                partial: Box::new(result),
            });
        }
        let sizes: Vec<(u32, u64)> = record.updates.iter().map(|u| (u.client_id, u.n_k)).collect();
        record.weights = renormalize_weights(&sizes, config.weighting)?;
        let merged = aggregate_with(&record.updates, config.weighting, config.rank, config.merge)
            .map_err(|e| e.context(format!("aggregating round {t}")))?;
        global = quantize(&merged.adapters)?;
        record.global = Some(GlobalAdapterState {
            adapters: global.clone(),
            ..merged
        });
        for &id in &accepted {
            ledger.credit(t, id, config.reward_per_update)?;
        }
        stats.updates_accepted += accepted.len() as u64;
        stats.aggregations += 1;

        state.advance(RoundPhase::Done)?;
        record.phases = state.history().to_vec();
        let complete = Message::new(MessageKind::RoundComplete, t, AGGREGATOR_ID)
            .with("accepted", record.accepted.clone())
            .with("stragglers", record.stragglers.clone());
        for &idx in registered.values() {
            if conns.0[idx].alive {
                if let Err(e) = conns.send(idx, &complete, &mut stats) {
                    record.events.push(e.to_string());
                }
            }
        }
        log::info!(
            "round {t}: aggregated {:?}, stragglers {:?}, rejected {:?}",
            record.accepted,
            record.stragglers,
            record.rejected.iter().map(|r| r.client_id).collect::<Vec<_>>()
        );
        result.rounds.push(record);
    }

    let shutdown = Message::new(MessageKind::Shutdown, config.rounds, AGGREGATOR_ID);
    for &idx in registered.values() {
        if conns.0[idx].alive {
            let _ = conns.send(idx, &shutdown, &mut stats);
        }
    }
    result.stats = stats;
    result.ledger = ledger.entries().to_vec();
    Ok(result)
}

fn check_update(
    config: &FedConfig,
    registry: &KeyRegistry,
    global: &AdapterSet,
    id: u32,
    msg: &Message,
) -> std::result::Result<ClientUpdate, String> {
    if msg.sender_id != id {
        return Err(format!("sender_id {} does not match the registered connection", msg.sender_id));
    }
    let update = msg.to_client_update().map_err(|e| format!("malformed update: {e}"))?;
    if update.adapters.targets() != global.targets() || update.adapters.hyper() != global.hyper() {
        return Err("adapter layout differs from the broadcast adapters".into());
    }
    update.adapters.check_dims(&config.model).map_err(|e| e.to_string())?;
    let canonical = msg.canonical_bytes().map_err(|e| e.to_string())?;
    match registry.verify(id, &canonical, &update.signature) {
        Verdict::Accept => Ok(update),
        Verdict::Reject(reason) => Err(format!("signature rejected: {reason}")),
    }
}

/// Scripted faults for a simulated client.
#[derive(Debug, Clone, Default)]
pub struct ClientBehavior {
    /// Rounds in which the client trains but never uploads.
    pub silent_rounds: BTreeSet<u32>,
    /// Rounds in which the update is signed with a key other than the registered one.
    pub forge_rounds: BTreeSet<u32>,
    /// Extra wait before uploading, per round.
    pub upload_delay: BTreeMap<u32, Duration>,
}

pub struct ClientContext<'a> {
    pub config: &'a FedConfig,
    pub model: &'a BaseModel,
    pub shard: &'a ClientShard,
    pub identity: &'a ClientIdentity,
    pub behavior: ClientBehavior,
}

/// Runs one client until SHUTDOWN and returns its last local adapters.
pub fn run_client(ctx: &ClientContext<'_>, mut endpoint: Endpoint) -> Result<AdapterSet> {
    let id = ctx.identity.client_id;
    if !ctx.identity.has_private_key() {
        return Err(FedError::Identity(format!("client {id}: signing key missing")));
    }
    if ctx.shard.client_id != id {
        return Err(FedError::Input(format!("shard of client {} given to client {id}", ctx.shard.client_id)));
    }
    let cfg = ctx.config;
    let n_k = ctx.shard.n_k as u64;
    let mut opt = OptimizerState::new(
        cfg.lr,
        cfg.beta1,
        cfg.beta2,
        cfg.adam_eps,
        cfg.weight_decay,
        cfg.total_steps(ctx.shard.train.len()),
    );
    endpoint.send(&Message::new(MessageKind::Register, 0, id))?;
    let mut registered = false;
    let mut last_round = 0u32;
    let mut local = AdapterSet::empty();
    loop {
        let msg = endpoint.recv()?.ok_or_else(|| FedError::Connection {
            client_id: Some(id),
            reason: "aggregator closed the connection".into(),
        })?;
        match msg.kind {
            MessageKind::RegisterAck => registered = true,
            MessageKind::RoundStart => {
                if !registered {
                    return Err(FedError::Protocol(format!("client {id}: ROUND_START before REGISTER_ACK")));
                }
                let t = msg.round;
                if t != last_round + 1 {
                    return Err(FedError::Protocol(format!(
                        "client {id}: expected round {}, got ROUND_START for round {t}",
                        last_round + 1
                    )));
                }
                last_round = t;
                local = msg.adapters()?;
                local.check_dims(&ctx.model.dims)?;
                opt.reset_moments();
                let loss = train_local(
                    ctx.model,
                    &mut local,
                    &ctx.shard.train,
                    cfg.local_training(),
                    &mut opt,
                    cfg.client_seed(id, t),
                )?;
                log::debug!("client {id} round {t}: mean training loss {loss:.4}");
                if ctx.behavior.silent_rounds.contains(&t) {
                    continue;
                }
                if let Some(delay) = ctx.behavior.upload_delay.get(&t) {
                    thread::sleep(*delay);
                }
                let update = if ctx.behavior.forge_rounds.contains(&t) {
                    Message::update_signed_by(t, id, n_k, &local, &ClientIdentity::generate(id))?
                } else {
                    Message::signed_update(t, ctx.identity, n_k, &local)?
                };
                endpoint.send(&update)?;
            }
            MessageKind::UpdateAck | MessageKind::RoundComplete => {
                log::debug!("client {id}: {} for round {}", msg.kind, msg.round);
            }
            MessageKind::Shutdown => return Ok(local),
            MessageKind::Error => {
                return Err(FedError::Protocol(format!(
                    "client {id}: aggregator reported: {}",
                    msg.header_str("reason").unwrap_or("unspecified")
                )))
            }
            other => return Err(FedError::Protocol(format!("client {id}: unexpected {other}"))),
        }
    }
}

/// Deterministic key pairs for every client of `config`.
pub fn simulation_identities(config: &FedConfig) -> Vec<ClientIdentity> {
    config
        .client_ids()
        .into_iter()
        .map(|id| ClientIdentity::from_seed(id, config.identity_seed()))
        .collect()
}

pub fn registry_for(identities: &[ClientIdentity]) -> Result<KeyRegistry> {
    let mut registry = KeyRegistry::new();
    for identity in identities {
        registry.register(identity.client_id, identity.public_key())?;
    }
    Ok(registry)
}

pub struct Simulation {
    pub result: Result<ExperimentResult>,
    /// Each client's final local adapters, or why it stopped.
    pub clients: BTreeMap<u32, Result<AdapterSet>>,
}

/// Runs the aggregator and one thread per client over the configured transport.
pub fn simulate(
    config: &FedConfig,
    model: &BaseModel,
    shards: &[ClientShard],
    identities: &[ClientIdentity],
    registry: &KeyRegistry,
    ledger: &mut Ledger,
    behaviors: &BTreeMap<u32, ClientBehavior>,
    initial: &AdapterSet,
) -> Result<Simulation> {
    if shards.len() != identities.len() {
        return Err(FedError::Input("one identity per shard is required".into()));
    }
    let listener = match config.transport {
        crate::config::TransportKind::Socket => Some(TcpListener::bind(&config.listen_address)?),
        crate::config::TransportKind::InProcess => None,
    };
    let address = match &listener {
        Some(l) => l.local_addr()?.to_string(),
        None => String::new(),
    };
    let mut server_side = Vec::new();
    let mut client_side = Vec::new();
    if listener.is_none() {
        for _ in shards {
            let (a, c) = in_process_pair();
            server_side.push(a);
            client_side.push(Some(c));
        }
    } else {
        client_side = shards.iter().map(|_| None).collect();
    }

    thread::scope(|scope| {
        let handles: Vec<_> = shards
            .iter()
            .zip(identities)
            .zip(client_side)
            .map(|((shard, identity), endpoint)| {
                let ctx = ClientContext {
                    config,
                    model,
                    shard,
                    identity,
                    behavior: behaviors.get(&identity.client_id).cloned().unwrap_or_default(),
                };
                let address = address.clone();
                let timeout = config.timeout();
                let id = identity.client_id;
                let handle = scope.spawn(move || {
                    let endpoint = match endpoint {
                        Some(e) => e,
                        None => connect(&address, timeout)?,
                    };
                    run_client(&ctx, endpoint)
                });
                (id, handle)
            })
            .collect();
        let endpoints = match &listener {
            Some(l) => accept_clients(l, shards.len(), config.timeout())?,
            None => server_side,
        };
        let result = run_aggregator(config, registry, ledger, endpoints, initial);
        let clients = handles
            .into_iter()
            .map(|(id, h)| {
                let r = h.join().unwrap_or_else(|_| {
                    Err(FedError::Connection {
                        client_id: Some(id),
                        reason: "client thread panicked".into(),
                    })
                });
                (id, r)
            })
            .collect();
        Ok(Simulation { result, clients })
    })
}

/// Writes every accepted UPDATE frame and each round's global ROUND_START frame under `dir`.
pub fn write_round_artifacts(result: &ExperimentResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("global_round_0.frame"), encode(&Message::round_start(1, &result.initial)?)?)?;
    for record in &result.rounds {
        let round_dir = dir.join(format!("round_{}", record.round));
        std::fs::create_dir_all(&round_dir)?;
        for u in &record.updates {
            let (rank, alpha, scaling) = u.adapters.hyper().expect("accepted updates are non-empty");
            let (manifest, block) = tensor_block(&u.adapters);
            let mut msg = Message::new(MessageKind::Update, u.round, u.client_id)
                .with("tensor_manifest", serde_json::to_value(manifest)?)
                .with("rank", rank as u64)
                .with("alpha", alpha)
                .with("scaling_mode", scaling.name())
                .with("n_k", u.n_k)
                .with("signature", B64.encode(&u.signature));
            msg.tensor_payload = Some(block);
            std::fs::write(round_dir.join(format!("client_{}.frame", u.client_id)), encode(&msg)?)?;
        }
        if let Some(g) = &record.global {
            let msg = Message::round_start(record.round + 1, &g.adapters)?;
            std::fs::write(dir.join(format!("global_round_{}.frame", record.round)), encode(&msg)?)?;
        }
    }
    Ok(())
}

/// Reads a frame file written by [`write_round_artifacts`].
pub fn read_frame_file(path: &Path) -> Result<Message> {
    let bytes = std::fs::read(path).map_err(|e| FedError::Io(e).context(format!("reading {}", path.display())))?;
    decode(&bytes).map_err(|e| e.context(format!("decoding {}", path.display())))
}
