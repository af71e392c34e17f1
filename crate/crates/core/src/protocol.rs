//! Client ↔ server wire protocol.
//!
//! Frame layout (all integers big-endian):
//!
//! ```text
//! u32  length of everything after this field
//! u8   protocol version (0x01)
//! u8   message type
//! u64  sequence number
//! ...  payload
//! ```
//!
//! Payload fields use `u32`-length-prefixed byte strings (UTF-8 for text),
//! fixed-width big-endian integers, `f64` as its IEEE-754 bit pattern in a
//! `u64`, `u32` element counts for lists and a `u8` tag for options and
//! variants. Field order per message type:
//!
//! | type | code | payload |
//! |------|------|---------|
//! | RegisterApp | 1 | app: str, manifest: list of (id: str, version: u32) |
//! | NeedTask | 2 | unknown: list of (id: str, version: u32) |
//! | TaskBundleTransfer | 3 | id: str, version: u32, fingerprint: bytes |
//! | Ping | 4 | (empty) |
//! | Pong | 5 | (empty) |
//! | Execute | 6 | id: str, version: u32, input_bucket: u32, state: bytes, args: bytes, power: opt(config: str, n_vms: u32) |
//! | Result | 7 | tag u8; 0 = Ok(result: bytes, state_delta: bytes, profile), 1 = RemoteException(kind: str, message: str) |
//! | Error | 8 | code: u16, message: str |
//!
//! `profile` is: wall_time_ms f64, thread_cpu_time_ms f64, work_units u64,
//! alloc_bytes u64, gc_or_reclaim_count u64, server_time_ms f64,
//! overhead_ms f64, vm_config str, n_vms u32, escalations u32,
//! per_vm_overhead_ms list of f64.
//!
//! Every client request gets exactly one reply carrying the request's seq.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profiling::ProgramProfile;
use crate::task::TaskKey;

pub const PROTOCOL_VERSION: u8 = 0x01;
pub const DEFAULT_MAX_FRAME: usize = 64 * 1024 * 1024;
/// Length prefix + version + type + seq.
pub const HEADER_LEN: usize = 4 + 1 + 1 + 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("unsupported protocol version {0:#04x}")]
    UnsupportedVersion(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    RegisterApp = 1,
    NeedTask = 2,
    TaskBundleTransfer = 3,
    Ping = 4,
    Pong = 5,
    Execute = 6,
    Result = 7,
    Error = 8,
}

impl MessageType {
    fn from_byte(b: u8) -> Option<Self> {
        use MessageType::*;
        Some(match b {
            1 => RegisterApp,
            2 => NeedTask,
            3 => TaskBundleTransfer,
            4 => Ping,
            5 => Pong,
            6 => Execute,
            7 => Result,
            8 => Error,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PowerRequest {
    pub config: String,
    pub n_vms: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutePayload {
    pub task: TaskKey,
    pub input_bucket: u32,
    pub state: Vec<u8>,
    pub args: Vec<u8>,
    pub power_request: Option<PowerRequest>,
}

/// Server-side profile piggybacked on a successful result.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RemoteProfile {
    pub program: ProgramProfile,
    /// Everything the server spent on the request: resumes plus compute.
    pub server_time_ms: f64,
    /// Clone resume/start latency included in `server_time_ms`.
    pub overhead_ms: f64,
    pub vm_config: String,
    pub n_vms: u32,
    pub escalations: u32,
    pub per_vm_overhead_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResultPayload {
    Ok {
        result: Vec<u8>,
        state_delta: Vec<u8>,
        profile: RemoteProfile,
    },
    RemoteException {
        kind: String,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorCode {
    TaskUnknown,
    BundleRejected,
    PoolExhausted,
    BadRequest,
    Internal,
    Other(u16),
}

impl ErrorCode {
    fn to_u16(self) -> u16 {
        match self {
            ErrorCode::TaskUnknown => 1,
            ErrorCode::BundleRejected => 2,
            ErrorCode::PoolExhausted => 3,
            ErrorCode::BadRequest => 4,
            ErrorCode::Internal => 5,
            ErrorCode::Other(c) => c,
        }
    }

    fn from_u16(c: u16) -> Self {
        match c {
            1 => ErrorCode::TaskUnknown,
            2 => ErrorCode::BundleRejected,
            3 => ErrorCode::PoolExhausted,
            4 => ErrorCode::BadRequest,
            5 => ErrorCode::Internal,
            other => ErrorCode::Other(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    RegisterApp { app: String, manifest: Vec<TaskKey> },
    NeedTask { unknown: Vec<TaskKey> },
    TaskBundleTransfer { task: TaskKey, fingerprint: Vec<u8> },
    Ping,
    Pong,
    Execute(ExecutePayload),
    Result(ResultPayload),
    Error { code: ErrorCode, message: String },
}

impl Body {
    pub fn message_type(&self) -> MessageType {
        match self {
            Body::RegisterApp { .. } => MessageType::RegisterApp,
            Body::NeedTask { .. } => MessageType::NeedTask,
            Body::TaskBundleTransfer { .. } => MessageType::TaskBundleTransfer,
            Body::Ping => MessageType::Ping,
            Body::Pong => MessageType::Pong,
            Body::Execute(_) => MessageType::Execute,
            Body::Result(_) => MessageType::Result,
            Body::Error { .. } => MessageType::Error,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub seq: u64,
    pub body: Body,
}

impl Message {
    pub fn new(seq: u64, body: Body) -> Self {
        Self { seq, body }
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(u32::try_from(b.len()).expect("field longer than u32::MAX"));
        self.buf.extend_from_slice(b);
    }
    fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }
    fn keys(&mut self, keys: &[TaskKey]) {
        self.u32(keys.len() as u32);
        for k in keys {
            self.str(&k.id);
            self.u32(k.version);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn malformed(msg: impl Into<String>) -> CodecError {
    CodecError::Malformed(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.buf.len() - self.pos < n {
            return Err(malformed(format!(
                "truncated: need {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn bytes(&mut self) -> Result<Vec<u8>, CodecError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }
    fn str(&mut self) -> Result<String, CodecError> {
        String::from_utf8(self.bytes()?).map_err(|_| malformed("string is not UTF-8"))
    }
    /// Element count, bounded by the bytes left so garbage cannot force a
    /// huge allocation.
    fn count(&mut self, min_elem: usize) -> Result<usize, CodecError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_elem) > self.buf.len() - self.pos {
            return Err(malformed(format!("list count {n} exceeds frame")));
        }
        Ok(n)
    }
    fn keys(&mut self) -> Result<Vec<TaskKey>, CodecError> {
        let n = self.count(8)?;
        (0..n)
            .map(|_| {
                let id = self.str()?;
                Ok(TaskKey::new(id, self.u32()?))
            })
            .collect()
    }
}

/// Frame codec with a configurable size limit.
#[derive(Debug, Clone, Copy)]
pub struct Codec {
    pub max_frame: usize,
}

impl Default for Codec {
    fn default() -> Self {
        Self {
            max_frame: DEFAULT_MAX_FRAME,
        }
    }
}

impl Codec {
    pub fn new(max_frame: usize) -> Self {
        Self { max_frame }
    }

    /// Validates a 4-byte length prefix read off a stream and returns the
    /// number of bytes that follow it.
    pub fn body_len(&self, prefix: [u8; 4]) -> Result<usize, CodecError> {
        let len = u32::from_be_bytes(prefix) as usize;
        if len + 4 > self.max_frame {
            return Err(malformed(format!(
                "frame length {} exceeds limit {}",
                len + 4,
                self.max_frame
            )));
        }
        if len < HEADER_LEN - 4 {
            return Err(malformed(format!("frame length {len} below header size")));
        }
        Ok(len)
    }

    pub fn decode(&self, frame: &[u8]) -> Result<Message, CodecError> {
        if frame.len() < 4 {
            return Err(malformed(format!("{} bytes is shorter than a length prefix", frame.len())));
        }
        let len = self.body_len(frame[..4].try_into().unwrap())?;
        if frame.len() != len + 4 {
            return Err(malformed(format!(
                "length prefix says {} bytes, frame has {}",
                len,
                frame.len() - 4
            )));
        }
        let mut r = Reader { buf: frame, pos: 4 };
        let version = r.u8()?;
        if version != PROTOCOL_VERSION {
            return Err(CodecError::UnsupportedVersion(version));
        }
        let ty = r.u8()?;
        let ty = MessageType::from_byte(ty).ok_or_else(|| malformed(format!("unknown message type {ty}")))?;
        let seq = r.u64()?;
        let body = decode_body(ty, &mut r)?;
        if r.pos != frame.len() {
            return Err(malformed(format!("{} trailing bytes", frame.len() - r.pos)));
        }
        Ok(Message { seq, body })
    }
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let mut w = Writer {
        buf: Vec::with_capacity(64),
    };
    w.u32(0);
    w.u8(PROTOCOL_VERSION);
    w.u8(msg.body.message_type() as u8);
    w.u64(msg.seq);
    encode_body(&msg.body, &mut w);
    let len = u32::try_from(w.buf.len() - 4).expect("frame longer than u32::MAX");
    w.buf[..4].copy_from_slice(&len.to_be_bytes());
    w.buf
}

pub fn decode(frame: &[u8]) -> Result<Message, CodecError> {
    Codec::default().decode(frame)
}

fn encode_body(body: &Body, w: &mut Writer) {
    match body {
        Body::RegisterApp { app, manifest } => {
            w.str(app);
            w.keys(manifest);
        }
        Body::NeedTask { unknown } => w.keys(unknown),
        Body::TaskBundleTransfer { task, fingerprint } => {
            w.str(&task.id);
            w.u32(task.version);
            w.bytes(fingerprint);
        }
        Body::Ping | Body::Pong => {}
        Body::Execute(p) => {
            w.str(&p.task.id);
            w.u32(p.task.version);
            w.u32(p.input_bucket);
            w.bytes(&p.state);
            w.bytes(&p.args);
            match &p.power_request {
                None => w.u8(0),
                Some(req) => {
                    w.u8(1);
                    w.str(&req.config);
                    w.u32(req.n_vms);
                }
            }
        }
        Body::Result(ResultPayload::Ok {
            result,
            state_delta,
            profile,
        }) => {
            w.u8(0);
            w.bytes(result);
            w.bytes(state_delta);
            let p = &profile.program;
            w.f64(p.wall_time_ms);
            w.f64(p.thread_cpu_time_ms);
            w.u64(p.work_units);
            w.u64(p.alloc_bytes);
            w.u64(p.gc_or_reclaim_count);
            w.f64(profile.server_time_ms);
            w.f64(profile.overhead_ms);
            w.str(&profile.vm_config);
            w.u32(profile.n_vms);
            w.u32(profile.escalations);
            w.u32(profile.per_vm_overhead_ms.len() as u32);
            for o in &profile.per_vm_overhead_ms {
                w.f64(*o);
            }
        }
        Body::Result(ResultPayload::RemoteException { kind, message }) => {
            w.u8(1);
            w.str(kind);
            w.str(message);
        }
        Body::Error { code, message } => {
            w.u16(code.to_u16());
            w.str(message);
        }
    }
}

fn decode_body(ty: MessageType, r: &mut Reader<'_>) -> Result<Body, CodecError> {
    Ok(match ty {
        MessageType::RegisterApp => {
            let app = r.str()?;
            Body::RegisterApp {
                app,
                manifest: r.keys()?,
            }
        }
        MessageType::NeedTask => Body::NeedTask { unknown: r.keys()? },
        MessageType::TaskBundleTransfer => {
            let id = r.str()?;
            let version = r.u32()?;
            Body::TaskBundleTransfer {
                task: TaskKey::new(id, version),
                fingerprint: r.bytes()?,
            }
        }
        MessageType::Ping => Body::Ping,
        MessageType::Pong => Body::Pong,
        MessageType::Execute => {
            let id = r.str()?;
            let version = r.u32()?;
            let input_bucket = r.u32()?;
            let state = r.bytes()?;
            let args = r.bytes()?;
            let power_request = match r.u8()? {
                0 => None,
                1 => {
                    let config = r.str()?;
                    let n_vms = r.u32()?;
                    if n_vms == 0 {
                        return Err(malformed("power request with zero clones"));
                    }
                    Some(PowerRequest { config, n_vms })
                }
                t => return Err(malformed(format!("bad power-request tag {t}"))),
            };
            Body::Execute(ExecutePayload {
                task: TaskKey::new(id, version),
                input_bucket,
                state,
                args,
                power_request,
            })
        }
        MessageType::Result => match r.u8()? {
            0 => {
                let result = r.bytes()?;
                let state_delta = r.bytes()?;
                let program = ProgramProfile {
                    wall_time_ms: r.f64()?,
                    thread_cpu_time_ms: r.f64()?,
                    work_units: r.u64()?,
                    alloc_bytes: r.u64()?,
                    gc_or_reclaim_count: r.u64()?,
                };
                let server_time_ms = r.f64()?;
                let overhead_ms = r.f64()?;
                let vm_config = r.str()?;
                let n_vms = r.u32()?;
                let escalations = r.u32()?;
                let n = r.count(8)?;
                let per_vm_overhead_ms = (0..n).map(|_| r.f64()).collect::<Result<_, _>>()?;
                Body::Result(ResultPayload::Ok {
                    result,
                    state_delta,
                    profile: RemoteProfile {
                        program,
                        server_time_ms,
                        overhead_ms,
                        vm_config,
                        n_vms,
                        escalations,
                        per_vm_overhead_ms,
                    },
                })
            }
            1 => {
                let kind = r.str()?;
                Body::Result(ResultPayload::RemoteException {
                    kind,
                    message: r.str()?,
                })
            }
            t => return Err(malformed(format!("bad result tag {t}"))),
        },
        MessageType::Error => {
            let code = ErrorCode::from_u16(r.u16()?);
            Body::Error {
                code,
                message: r.str()?,
            }
        }
    })
}
