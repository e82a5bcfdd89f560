//! Length-prefixed wire protocol and the tier servers speaking it.
//!
//! A frame is a u32 little-endian byte length followed by one request or
//! response object in the same field-named line format as the event log.
//! Tensor payloads travel as base-16 encoded little-endian f64s so values
//! survive the wire bit-exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use crate::encoder::{EncoderConfig, ItemFeatures};
use crate::error::{Error, Result};
use crate::params::{ParamBlock, ParamSet};
use crate::serving::{
    f64s_to_hex, hex_to_f64s, serve_fm, DeltaBlock, ExpertCandidateInput, ExpertPredictRequest,
    ExpertServer, FmEmbedRequest, VersionRegistry, WeightDelta,
};
use crate::tensor::Tensor;

/// Upper bound on a single frame; anything larger is a protocol error.
pub const MAX_FRAME_BYTES: u32 = 256 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WireBlock {
    pub name: String,
    pub counter: u64,
    pub rows: u32,
    pub cols: u32,
    pub values_hex: String,
}

impl WireBlock {
    pub fn from_delta(b: &DeltaBlock) -> Self {
        Self {
            name: b.name.clone(),
            counter: b.counter,
            rows: b.tensor.rows() as u32,
            cols: b.tensor.cols() as u32,
            values_hex: f64s_to_hex(b.tensor.data()),
        }
    }

    pub fn to_delta(&self) -> Result<DeltaBlock> {
        let values = hex_to_f64s(&self.values_hex)?;
        Ok(DeltaBlock {
            name: self.name.clone(),
            counter: self.counter,
            tensor: Tensor::new(self.rows as usize, self.cols as usize, values)
                .map_err(|e| Error::Wire(format!("block {}: {e}", self.name)))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WireExpertCandidate {
    pub item: ItemFeatures,
    pub embedding_version: Option<String>,
    pub embedding_hex: Option<String>,
    pub surface_features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "type")]
pub enum WireRequest {
    #[serde(rename = "FM_EMBED")]
    FmEmbed {
        version: Option<String>,
        history: Vec<ItemFeatures>,
        targets: Vec<ItemFeatures>,
    },
    #[serde(rename = "EXPERT_PREDICT")]
    ExpertPredict {
        short_history: Vec<ItemFeatures>,
        fm_history: Vec<ItemFeatures>,
        candidates: Vec<WireExpertCandidate>,
        user_embedding_hex: Option<String>,
        precomputed: bool,
    },
    #[serde(rename = "ADMIN_APPLY_DELTA")]
    AdminApplyDelta {
        version: String,
        seq: u64,
        now: u64,
        blocks: Vec<WireBlock>,
    },
    #[serde(rename = "ADMIN_REGISTER_VERSION")]
    AdminRegisterVersion {
        version: String,
        now: u64,
        primary: bool,
        blocks: Vec<WireBlock>,
    },
    #[serde(rename = "HEALTH")]
    Health,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "type")]
pub enum WireResponse {
    #[serde(rename = "EMBEDDINGS")]
    Embeddings {
        version: String,
        checksum: u64,
        vectors_hex: Vec<String>,
    },
    #[serde(rename = "PREDICTION")]
    Prediction { probs: BTreeMap<String, Vec<f64>> },
    #[serde(rename = "ACK")]
    Ack { seq: u64, checksum: u64 },
    #[serde(rename = "HEALTH")]
    Health { status: String },
    #[serde(rename = "ERROR")]
    Error { code: String, message: String },
}

impl WireResponse {
    pub fn from_error(e: &Error) -> Self {
        WireResponse::Error {
            code: e.wire_code().to_string(),
            message: e.to_string(),
        }
    }
}

// ---------------------------------------------------------------------------
// Frame codec
// ---------------------------------------------------------------------------

pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> Result<()> {
    if payload.len() as u64 > MAX_FRAME_BYTES as u64 {
        return Err(Error::Wire(format!("frame of {} bytes too large", payload.len())));
    }
    w.write_all(&(payload.len() as u32).to_le_bytes())?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

/// Read one frame; None on clean EOF at a frame boundary.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Vec<u8>>> {
    let mut len_bytes = [0u8; 4];
    match r.read_exact(&mut len_bytes) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len_bytes);
    if len > MAX_FRAME_BYTES {
        return Err(Error::Wire(format!("frame length {len} exceeds limit")));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)
        .map_err(|e| Error::Wire(format!("truncated frame: {e}")))?;
    Ok(Some(payload))
}

pub fn encode_request(req: &WireRequest) -> Result<Vec<u8>> {
    serde_json::to_vec(req).map_err(|e| Error::Wire(format!("encode request: {e}")))
}

pub fn decode_request(bytes: &[u8]) -> Result<WireRequest> {
    serde_json::from_slice(bytes).map_err(|e| Error::Wire(format!("decode request: {e}")))
}

pub fn encode_response(resp: &WireResponse) -> Result<Vec<u8>> {
    serde_json::to_vec(resp).map_err(|e| Error::Wire(format!("encode response: {e}")))
}

pub fn decode_response(bytes: &[u8]) -> Result<WireResponse> {
    serde_json::from_slice(bytes).map_err(|e| Error::Wire(format!("decode response: {e}")))
}

// ---------------------------------------------------------------------------
// Generic tier server
// ---------------------------------------------------------------------------

pub type Handler = Arc<dyn Fn(WireRequest) -> WireResponse + Send + Sync>;

pub struct RunningServer {
    pub local_addr: std::net::SocketAddr,
    stop: Arc<AtomicBool>,
    accept_handle: Option<std::thread::JoinHandle<()>>,
}

impl RunningServer {
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept_handle.take() {
            h.join().ok();
        }
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept_handle.take() {
            h.join().ok();
        }
    }
}

/// Serve frames on a listener; one thread per connection.
pub fn serve(addr: impl ToSocketAddrs, handler: Handler) -> Result<RunningServer> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local_addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop_accept = Arc::clone(&stop);
    let accept_handle = std::thread::spawn(move || {
        let mut workers = Vec::new();
        loop {
            if stop_accept.load(Ordering::SeqCst) {
                break;
            }
            match listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false).ok();
                    // Periodic read timeouts let workers notice shutdown
                    // even while a client holds the connection open.
                    stream
                        .set_read_timeout(Some(std::time::Duration::from_millis(100)))
                        .ok();
                    let handler = Arc::clone(&handler);
                    let stop = Arc::clone(&stop_accept);
                    workers.push(std::thread::spawn(move || {
                        handle_connection(stream, handler, stop)
                    }));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(std::time::Duration::from_millis(2));
                }
                Err(_) => break,
            }
        }
        for w in workers {
            w.join().ok();
        }
    });
    Ok(RunningServer {
        local_addr,
        stop,
        accept_handle: Some(accept_handle),
    })
}

/// Fill `buf`, preserving progress across read timeouts so framing never
/// desynchronizes. Returns false on EOF, shutdown, or a hard error.
fn read_full_interruptible(stream: &mut TcpStream, buf: &mut [u8], stop: &AtomicBool) -> bool {
    let mut at = 0;
    while at < buf.len() {
        if stop.load(Ordering::SeqCst) {
            return false;
        }
        match stream.read(&mut buf[at..]) {
            Ok(0) => return false,
            Ok(n) => at += n,
            Err(e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut =>
            {
                continue;
            }
            Err(_) => return false,
        }
    }
    true
}

fn handle_connection(mut stream: TcpStream, handler: Handler, stop: Arc<AtomicBool>) {
    loop {
        let mut len_bytes = [0u8; 4];
        if !read_full_interruptible(&mut stream, &mut len_bytes, &stop) {
            break;
        }
        let len = u32::from_le_bytes(len_bytes);
        if len > MAX_FRAME_BYTES {
            let resp = WireResponse::from_error(&Error::Wire(format!(
                "frame length {len} exceeds limit"
            )));
            if let Ok(bytes) = encode_response(&resp) {
                write_frame(&mut stream, &bytes).ok();
            }
            break;
        }
        let mut frame = vec![0u8; len as usize];
        if !read_full_interruptible(&mut stream, &mut frame, &stop) {
            break;
        }
        let resp = match decode_request(&frame) {
            Ok(req) => handler(req),
            Err(e) => WireResponse::from_error(&e),
        };
        match encode_response(&resp).and_then(|bytes| write_frame(&mut stream, &bytes)) {
            Ok(()) => {}
            Err(_) => break,
        }
    }
}

/// Blocking request/response client over one connection.
pub struct WireClient {
    stream: TcpStream,
}

impl WireClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        Ok(Self {
            stream: TcpStream::connect(addr)?,
        })
    }

    pub fn request(&mut self, req: &WireRequest) -> Result<WireResponse> {
        let bytes = encode_request(req)?;
        write_frame(&mut self.stream, &bytes)?;
        match read_frame(&mut self.stream)? {
            Some(frame) => decode_response(&frame),
            None => Err(Error::Wire("connection closed mid-request".into())),
        }
    }
}

fn wire_blocks_to_paramset(blocks: &[WireBlock]) -> Result<ParamSet> {
    let mut params = ParamSet::new();
    for wb in blocks {
        let d = wb.to_delta()?;
        params.insert_block(
            d.name,
            ParamBlock {
                tensor: d.tensor,
                counter: d.counter,
            },
        );
    }
    Ok(params)
}

pub fn paramset_to_wire_blocks(params: &ParamSet) -> Vec<WireBlock> {
    params
        .iter()
        .map(|(name, block)| WireBlock {
            name: name.to_string(),
            counter: block.counter,
            rows: block.tensor.rows() as u32,
            cols: block.tensor.cols() as u32,
            values_hex: f64s_to_hex(block.tensor.data()),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// FM tier: embeddings plus version administration
// ---------------------------------------------------------------------------

pub struct FmTier {
    pub registry: Arc<RwLock<VersionRegistry>>,
    /// Encoder architecture per version tag (embedding requests need the
    /// matching layer/width settings).
    pub encoders: RwLock<BTreeMap<String, EncoderConfig>>,
    pub default_encoder: EncoderConfig,
    pub requests_served: AtomicU64,
}

impl FmTier {
    pub fn new(registry: Arc<RwLock<VersionRegistry>>, default_encoder: EncoderConfig) -> Self {
        Self {
            registry,
            encoders: RwLock::new(BTreeMap::new()),
            default_encoder,
            requests_served: AtomicU64::new(0),
        }
    }

    pub fn set_encoder(&self, version: &str, encoder: EncoderConfig) {
        self.encoders
            .write()
            .unwrap()
            .insert(version.to_string(), encoder);
    }

    fn encoder_for(&self, version: Option<&str>) -> EncoderConfig {
        version
            .and_then(|v| self.encoders.read().unwrap().get(v).cloned())
            .unwrap_or_else(|| self.default_encoder.clone())
    }

    pub fn handle(&self, req: WireRequest) -> WireResponse {
        match self.try_handle(req) {
            Ok(resp) => resp,
            Err(e) => WireResponse::from_error(&e),
        }
    }

    fn try_handle(&self, req: WireRequest) -> Result<WireResponse> {
        match req {
            WireRequest::FmEmbed {
                version,
                history,
                targets,
            } => {
                self.requests_served.fetch_add(1, Ordering::SeqCst);
                let encoder = self.encoder_for(version.as_deref());
                let registry = self.registry.read().unwrap();
                let resp = serve_fm(
                    &registry,
                    &encoder,
                    &FmEmbedRequest {
                        version,
                        history,
                        targets,
                    },
                )?;
                Ok(WireResponse::Embeddings {
                    version: resp.version,
                    checksum: resp.checksum,
                    vectors_hex: resp.embeddings.iter().map(|v| f64s_to_hex(v)).collect(),
                })
            }
            WireRequest::AdminApplyDelta {
                version,
                seq,
                now,
                blocks,
            } => {
                let delta = WeightDelta {
                    version,
                    seq,
                    blocks: blocks.iter().map(WireBlock::to_delta).collect::<Result<_>>()?,
                };
                let registry = self.registry.read().unwrap();
                let checksum = registry.apply_delta(&delta, now)?;
                Ok(WireResponse::Ack { seq, checksum })
            }
            WireRequest::AdminRegisterVersion {
                version,
                now,
                primary,
                blocks,
            } => {
                let params = wire_blocks_to_paramset(&blocks)?;
                let mut registry = self.registry.write().unwrap();
                registry.register(version.clone(), params, now);
                if primary {
                    registry.set_primary(&version)?;
                }
                Ok(WireResponse::Ack { seq: 0, checksum: 0 })
            }
            WireRequest::Health => Ok(WireResponse::Health {
                status: "ok".into(),
            }),
            WireRequest::ExpertPredict { .. } => Err(Error::BadRequest(
                "EXPERT_PREDICT not served by the FM tier".into(),
            )),
        }
    }
}

/// Fetch embeddings from an FM tier over the wire.
pub fn fetch_fm_over_wire(addr: &str, req: &FmEmbedRequest) -> Result<crate::serving::FmEmbedResponse> {
    let mut client = WireClient::connect(addr)?;
    let resp = client.request(&WireRequest::FmEmbed {
        version: req.version.clone(),
        history: req.history.clone(),
        targets: req.targets.clone(),
    })?;
    match resp {
        WireResponse::Embeddings {
            version,
            checksum,
            vectors_hex,
        } => Ok(crate::serving::FmEmbedResponse {
            version,
            checksum,
            embeddings: vectors_hex
                .iter()
                .map(|h| hex_to_f64s(h))
                .collect::<Result<_>>()?,
        }),
        WireResponse::Error { code, message } => {
            Err(wire_error_to_native(&code, &message))
        }
        other => Err(Error::Wire(format!("unexpected response {other:?}"))),
    }
}

fn wire_error_to_native(code: &str, message: &str) -> Error {
    match code {
        "VERSION_INACTIVE" => Error::VersionInactive(message.to_string()),
        "VERSION_MISMATCH" => Error::VersionMismatch {
            expected: String::new(),
            got: message.to_string(),
        },
        "STALE_DELTA" => Error::Wire(format!("stale delta: {message}")),
        _ => Error::Wire(format!("{code}: {message}")),
    }
}

// ---------------------------------------------------------------------------
// Expert tier
// ---------------------------------------------------------------------------

/// How the expert tier reaches the FM tier on fetch-directive requests.
pub enum FmEndpoint {
    /// In-process registry (harness mode).
    Local(Arc<RwLock<VersionRegistry>>),
    /// Remote FM tier address.
    Remote(String),
}

pub struct ExpertTier {
    pub server: ExpertServer,
    pub fm: FmEndpoint,
}

impl ExpertTier {
    pub fn handle(&self, req: WireRequest) -> WireResponse {
        match self.try_handle(req) {
            Ok(resp) => resp,
            Err(e) => WireResponse::from_error(&e),
        }
    }

    fn try_handle(&self, req: WireRequest) -> Result<WireResponse> {
        match req {
            WireRequest::ExpertPredict {
                short_history,
                fm_history,
                candidates,
                user_embedding_hex,
                precomputed,
            } => {
                let user_embedding = match user_embedding_hex {
                    Some(h) => Some(hex_to_f64s(&h)?),
                    None => None,
                };
                let candidates: Vec<ExpertCandidateInput> = candidates
                    .into_iter()
                    .map(|c| {
                        let fm_embedding = match (c.embedding_version, c.embedding_hex) {
                            (Some(v), Some(h)) => Some((v, hex_to_f64s(&h)?)),
                            (None, None) => None,
                            _ => {
                                return Err(Error::BadRequest(
                                    "embedding version and payload must come together".into(),
                                ))
                            }
                        };
                        Ok(ExpertCandidateInput {
                            item: c.item,
                            fm_embedding,
                            surface_features: c.surface_features,
                        })
                    })
                    .collect::<Result<_>>()?;
                let predict_req = ExpertPredictRequest {
                    short_history,
                    candidates,
                    user_embedding,
                    precomputed,
                    fm_history,
                };
                let probs = match &self.fm {
                    FmEndpoint::Local(registry) => {
                        let guard = registry.read().unwrap();
                        self.server.serve(&guard, &predict_req)?
                    }
                    FmEndpoint::Remote(addr) => self
                        .server
                        .serve_via(|r| fetch_fm_over_wire(addr, r), &predict_req)?,
                };
                Ok(WireResponse::Prediction { probs })
            }
            WireRequest::Health => Ok(WireResponse::Health {
                status: "ok".into(),
            }),
            _ => Err(Error::BadRequest(
                "request type not served by the expert tier".into(),
            )),
        }
    }
}
