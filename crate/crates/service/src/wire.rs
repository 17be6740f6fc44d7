//! Length-prefixed JSON over TCP.
//!
//! Every message is a frame: a 4-byte big-endian body length followed by a
//! UTF-8 JSON body of at most [`MAX_FRAME`] bytes. Requests are
//! `{"id": any, "method": str, "params": any}` and each gets exactly one
//! response `{"id": <echoed>, "result": ...}` or
//! `{"id": <echoed>, "error": {"kind": str, "message": str}}`. Unknown fields
//! are ignored. A frame that is too large or does not hold a request gets an
//! error response, after which the server closes the connection.
//!
//! Methods: `ping`, `info`, `query` (params: a query request) and
//! `shard.coarse` (params: a shard query; result `{"hits": [...]}`).

use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use vsearch::cluster::{ShardBackend, ShardQuery};
use vsearch::index::{CoarseHit, IndexSnapshot};

use crate::deploy::{Deployment, QueryRequest};
use crate::error::{ServiceError, ServiceResult};

pub const MAX_FRAME: usize = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame of {0} bytes exceeds the {MAX_FRAME}-byte limit")]
    TooLarge(usize),
    #[error("connection closed inside a frame")]
    Truncated,
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<FrameError> for ServiceError {
    fn from(e: FrameError) -> Self {
        ServiceError::Frame(e.to_string())
    }
}

/// Reads one frame body. `Ok(None)` is a clean end of stream between frames.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>, FrameError> {
    let mut header = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(FrameError::Truncated),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME {
        return Err(FrameError::TooLarge(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FrameError::Truncated,
        _ => FrameError::Io(e),
    })?;
    Ok(Some(body))
}

pub fn write_frame<W: Write>(w: &mut W, body: &[u8]) -> Result<(), FrameError> {
    if body.len() > MAX_FRAME {
        return Err(FrameError::TooLarge(body.len()));
    }
    let mut buf = Vec::with_capacity(4 + body.len());
    buf.extend_from_slice(&(body.len() as u32).to_be_bytes());
    buf.extend_from_slice(body);
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    #[serde(default)]
    pub id: Value,
    pub method: String,
    #[serde(default)]
    pub params: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    pub kind: String,
    pub message: String,
}

impl WireError {
    pub fn new(kind: &str, message: impl ToString) -> Self {
        Self { kind: kind.to_string(), message: message.to_string() }
    }
}

impl From<ServiceError> for WireError {
    fn from(e: ServiceError) -> Self {
        let kind = match &e {
            ServiceError::Core(vsearch::Error::Unavailable(_)) => "unavailable",
            ServiceError::Core(vsearch::Error::Dimension { .. }) => "dimension",
            ServiceError::Core(vsearch::Error::InvalidParam(_) | vsearch::Error::InvalidValue(_)) => "invalid_params",
            _ => "internal",
        };
        WireError::new(kind, e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseReply {
    pub hits: Vec<CoarseHit>,
}

/// Answers decoded requests. Implementations must not mutate shared state.
pub trait Handler: Send + Sync {
    fn handle(&self, method: &str, params: Value) -> Result<Value, WireError>;
}

fn params<T: DeserializeOwned>(v: Value) -> Result<T, WireError> {
    serde_json::from_value(v).map_err(|e| WireError::new("invalid_params", e))
}

fn to_value<T: Serialize>(v: &T) -> Result<Value, WireError> {
    serde_json::to_value(v).map_err(|e| WireError::new("internal", e))
}

/// A query front end, a shard server, or both.
#[derive(Default)]
pub struct ServiceHandler {
    pub deployment: Option<Deployment>,
    pub shard: Option<IndexSnapshot>,
}

impl Handler for ServiceHandler {
    fn handle(&self, method: &str, p: Value) -> Result<Value, WireError> {
        let missing = |what: &str| WireError::new("unknown_method", format!("this server has no {what}"));
        match method {
            "ping" => Ok(json!({ "pong": true })),
            "info" => {
                let d = self.deployment.as_ref().ok_or_else(|| missing("deployment"))?;
                to_value(d.manifest())
            }
            "query" => {
                let d = self.deployment.as_ref().ok_or_else(|| missing("deployment"))?;
                let req: QueryRequest = params(p)?;
                to_value(&d.query(&req).map_err(WireError::from)?)
            }
            "shard.coarse" => {
                let s = self.shard.as_ref().ok_or_else(|| missing("shard"))?;
                let q: ShardQuery = params(p)?;
                let hits = s.coarse(&q).map_err(|e| WireError::from(ServiceError::from(e)))?;
                to_value(&CoarseReply { hits })
            }
            other => Err(WireError::new("unknown_method", format!("unknown method '{other}'"))),
        }
    }
}

fn send(stream: &mut TcpStream, response: &Response) -> Result<(), FrameError> {
    let body = serde_json::to_vec(response).map_err(io::Error::from)?;
    write_frame(stream, &body)
}

fn error_response(id: Value, e: WireError) -> Response {
    Response { id, result: None, error: Some(e) }
}

/// Half-closes after a fatal error and drains what the peer is still
/// sending, so the error frame is not lost to a connection reset.
fn close_after_error(stream: &mut TcpStream) {
    let _ = stream.shutdown(Shutdown::Write);
    let _ = stream.set_read_timeout(Some(Duration::from_millis(200)));
    let mut sink = [0u8; 64 * 1024];
    let mut drained = 0usize;
    while drained <= 2 * MAX_FRAME {
        match stream.read(&mut sink) {
            Ok(0) | Err(_) => break,
            Ok(n) => drained += n,
        }
    }
}

fn serve_connection(mut stream: TcpStream, handler: &dyn Handler) {
    loop {
        let body = match read_frame(&mut stream) {
            Ok(Some(b)) => b,
            Ok(None) => return,
            Err(FrameError::TooLarge(n)) => {
                let e = WireError::new("frame_too_large", FrameError::TooLarge(n));
                let _ = send(&mut stream, &error_response(Value::Null, e));
                close_after_error(&mut stream);
                return;
            }
            Err(e) => {
                log::debug!("dropping connection: {e}");
                return;
            }
        };
        let request: Request = match serde_json::from_slice(&body) {
            Ok(r) => r,
            Err(err) => {
                // echo the id if the body is at least a JSON object carrying one
                let id = serde_json::from_slice::<Value>(&body)
                    .ok()
                    .and_then(|v| v.get("id").cloned())
                    .unwrap_or(Value::Null);
                let _ = send(&mut stream, &error_response(id, WireError::new("malformed_frame", err)));
                close_after_error(&mut stream);
                return;
            }
        };
        let response = match handler.handle(&request.method, request.params) {
            Ok(result) => Response { id: request.id, result: Some(result), error: None },
            Err(e) => error_response(request.id, e),
        };
        if send(&mut stream, &response).is_err() {
            return;
        }
    }
}

/// A running server; dropping the handle leaves it running.
pub struct ServerHandle {
    addr: std::net::SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> std::net::SocketAddr {
        self.addr
    }

    /// Stops accepting connections and waits for the accept loop to exit.
    /// Open connections finish their current request and then close when
    /// their client disconnects.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    /// Blocks until the accept loop exits.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Accepts connections on `listener`, one thread per connection.
pub fn spawn(listener: TcpListener, handler: Arc<dyn Handler>) -> io::Result<ServerHandle> {
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    let thread = std::thread::Builder::new().name("vsearch-accept".into()).spawn(move || {
        for conn in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            match conn {
                Ok(stream) => {
                    let _ = stream.set_nodelay(true);
                    let h = Arc::clone(&handler);
                    let spawned = std::thread::Builder::new()
                        .name("vsearch-conn".into())
                        .spawn(move || serve_connection(stream, h.as_ref()));
                    if let Err(e) = spawned {
                        log::warn!("cannot spawn connection thread: {e}");
                    }
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
    })?;
    Ok(ServerHandle { addr, stop, thread: Some(thread) })
}

/// Blocking client over one connection.
pub struct Client {
    stream: TcpStream,
    next_id: u64,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs, timeout: Option<Duration>) -> ServiceResult<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(timeout)?;
        stream.set_write_timeout(timeout)?;
        Ok(Self { stream, next_id: 1 })
    }

    /// Sends one request and returns the raw response.
    pub fn exchange(&mut self, request: &Request) -> ServiceResult<Response> {
        write_frame(&mut self.stream, &serde_json::to_vec(request)?)?;
        let body = read_frame(&mut self.stream)?
            .ok_or_else(|| ServiceError::Frame("connection closed before the response".into()))?;
        let response: Response = serde_json::from_slice(&body)?;
        if response.id != request.id {
            return Err(ServiceError::Protocol(format!("response id {} does not echo {}", response.id, request.id)));
        }
        Ok(response)
    }

    pub fn call<P: Serialize, R: DeserializeOwned>(&mut self, method: &str, params: &P) -> ServiceResult<R> {
        let id = self.next_id;
        self.next_id += 1;
        let request = Request {
            id: json!(id),
            method: method.to_string(),
            params: serde_json::to_value(params)?,
        };
        let response = self.exchange(&request)?;
        match (response.result, response.error) {
            (_, Some(e)) => Err(ServiceError::Remote { kind: e.kind, message: e.message }),
            (Some(r), None) => Ok(serde_json::from_value(r)?),
            (None, None) => Err(ServiceError::Protocol("response has neither result nor error".into())),
        }
    }
}

/// A shard served by another process, reached over one pooled connection.
pub struct RemoteShard {
    addr: String,
    timeout: Duration,
    conn: Mutex<Option<Client>>,
}

impl RemoteShard {
    pub fn new(addr: String, timeout: Duration) -> Self {
        Self { addr, timeout, conn: Mutex::new(None) }
    }

    fn call(&self, query: &ShardQuery) -> ServiceResult<Vec<CoarseHit>> {
        let mut guard = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        if guard.is_none() {
            *guard = Some(Client::connect(self.addr.as_str(), Some(self.timeout))?);
        }
        let client = guard.as_mut().expect("connected above");
        match client.call::<_, CoarseReply>("shard.coarse", query) {
            Ok(reply) => Ok(reply.hits),
            Err(e) => {
                // the stream may be mid-frame; reconnect next time
                *guard = None;
                Err(e)
            }
        }
    }
}

impl ShardBackend for RemoteShard {
    fn coarse(&self, query: &ShardQuery) -> vsearch::Result<Vec<CoarseHit>> {
        self.call(query)
            .map_err(|e| vsearch::Error::Unavailable(format!("shard at {}: {e}", self.addr)))
    }
}
