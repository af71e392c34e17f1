//! Client end of a connection, multiplexed by sequence number.
//!
//! Any number of threads may issue requests concurrently. Sends are
//! serialized under one lock, which also allocates the sequence number, so
//! sequence numbers go out strictly increasing. A reader thread routes each
//! reply to the waiting request by its sequence number.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{channel, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Instant;

use crate::clock::ClockMode;
use crate::profiling::RttProbe;
use crate::protocol::{encode, Body, Codec, ErrorCode, ExecutePayload, Message};
use crate::task::{ErasedTask, TaskKey};
use crate::transport::{Closer, Connection, FrameSink, LinkInfo, Transit, TransportError};

/// A reply and what it cost to get it.
#[derive(Debug, Clone)]
pub struct Reply {
    pub body: Body,
    pub seq: u64,
    pub up: Transit,
    pub down: Transit,
    /// Measured round trip on the wall clock.
    pub elapsed_ms: f64,
}

impl Reply {
    pub fn network_ms(&self) -> f64 {
        self.up.delay_ms + self.down.delay_ms
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Registration {
    pub installed: Vec<TaskKey>,
    pub rejected: Vec<(TaskKey, String)>,
}

type Waiter = Sender<Result<(Message, Transit), TransportError>>;

#[derive(Default)]
struct Pending {
    waiters: HashMap<u64, Waiter>,
    dead: Option<TransportError>,
}

struct Writer {
    sink: Box<dyn FrameSink>,
    next_seq: u64,
}

pub struct RemoteClient {
    writer: Mutex<Writer>,
    pending: Arc<Mutex<Pending>>,
    closer: Arc<dyn Closer>,
    info: LinkInfo,
    mode: ClockMode,
    reader: Mutex<Option<JoinHandle<()>>>,
    tx_bytes: AtomicU64,
    rx_bytes: Arc<AtomicU64>,
}

impl RemoteClient {
    pub fn new(conn: Connection, codec: Codec, mode: ClockMode) -> Self {
        let Connection {
            sink,
            mut source,
            closer,
            info,
        } = conn;
        let pending = Arc::new(Mutex::new(Pending::default()));
        let rx_bytes = Arc::new(AtomicU64::new(0));
        let reader = {
            let pending = pending.clone();
            let rx_bytes = rx_bytes.clone();
            let closer = closer.clone();
            std::thread::Builder::new()
                .name("offload-reader".into())
                .spawn(move || {
                    let err = loop {
                        let (frame, transit) = match source.recv_frame() {
                            Ok(x) => x,
                            Err(e) => break e,
                        };
                        rx_bytes.fetch_add(transit.bytes as u64, Ordering::SeqCst);
                        let msg = match codec.decode(&frame) {
                            Ok(m) => m,
                            Err(e) => break TransportError::Codec(e),
                        };
                        let waiter = pending.lock().unwrap().waiters.remove(&msg.seq);
                        match waiter {
                            Some(w) => {
                                let _ = w.send(Ok((msg, transit)));
                            }
                            None => tracing::warn!(seq = msg.seq, "reply for no outstanding request"),
                        }
                    };
                    closer.close();
                    let mut p = pending.lock().unwrap();
                    let lost = match err {
                        TransportError::ConnectionLost(m) => TransportError::ConnectionLost(m),
                        other => TransportError::ConnectionLost(other.to_string()),
                    };
                    for (_, w) in p.waiters.drain() {
                        let _ = w.send(Err(lost.clone()));
                    }
                    p.dead = Some(lost);
                })
                .expect("spawn reader thread")
        };
        Self {
            writer: Mutex::new(Writer { sink, next_seq: 1 }),
            pending,
            closer,
            info,
            mode,
            reader: Mutex::new(Some(reader)),
            tx_bytes: AtomicU64::new(0),
            rx_bytes,
        }
    }

    pub fn info(&self) -> LinkInfo {
        self.info
    }

    pub fn is_alive(&self) -> bool {
        self.pending.lock().unwrap().dead.is_none()
    }

    /// Bytes of every frame sent and received on this connection.
    pub fn bytes(&self) -> (u64, u64) {
        (
            self.tx_bytes.load(Ordering::SeqCst),
            self.rx_bytes.load(Ordering::SeqCst),
        )
    }

    /// Sends one request and blocks for its reply.
    pub fn request(&self, body: Body) -> Result<Reply, TransportError> {
        let (tx, rx) = channel();
        let t0 = Instant::now();
        let (seq, up) = {
            let mut w = self.writer.lock().unwrap();
            let seq = w.next_seq;
            {
                let mut p = self.pending.lock().unwrap();
                if let Some(e) = &p.dead {
                    return Err(e.clone());
                }
                p.waiters.insert(seq, tx);
            }
            w.next_seq += 1;
            let frame = encode(&Message::new(seq, body));
            match w.sink.send_frame(&frame) {
                Ok(t) => {
                    self.tx_bytes.fetch_add(t.bytes as u64, Ordering::SeqCst);
                    (seq, t)
                }
                Err(e) => {
                    self.pending.lock().unwrap().waiters.remove(&seq);
                    drop(w);
                    self.closer.close();
                    return Err(match e {
                        TransportError::Codec(c) => TransportError::ConnectionLost(c.to_string()),
                        lost => lost,
                    });
                }
            }
        };
        let (msg, down) = rx
            .recv()
            .map_err(|_| TransportError::ConnectionLost("reader stopped".into()))??;
        debug_assert_eq!(msg.seq, seq);
        Ok(Reply {
            body: msg.body,
            seq: msg.seq,
            up,
            down,
            elapsed_ms: t0.elapsed().as_secs_f64() * 1000.0,
        })
    }

    pub fn ping(&self) -> Result<f64, TransportError> {
        let reply = self.request(Body::Ping)?;
        match reply.body {
            Body::Pong => Ok(match self.mode {
                ClockMode::Deterministic => reply.network_ms(),
                ClockMode::Wall => reply.elapsed_ms,
            }),
            other => Err(TransportError::ConnectionLost(format!(
                "expected Pong, got {:?}",
                other.message_type()
            ))),
        }
    }

    /// Announces the app's tasks and ships every bundle the server lacks.
    pub fn register(
        &self,
        app: &str,
        tasks: &[Arc<dyn ErasedTask>],
    ) -> Result<Registration, TransportError> {
        let manifest: Vec<TaskKey> = tasks.iter().map(|t| t.key()).collect();
        let reply = self.request(Body::RegisterApp {
            app: app.to_string(),
            manifest,
        })?;
        let unknown = match reply.body {
            Body::NeedTask { unknown } => unknown,
            other => {
                return Err(TransportError::ConnectionLost(format!(
                    "expected NeedTask, got {:?}",
                    other.message_type()
                )))
            }
        };
        let mut out = Registration::default();
        for key in unknown {
            let Some(task) = tasks.iter().find(|t| t.key() == key) else {
                out.rejected.push((key, "not offered by this client".into()));
                continue;
            };
            let reply = self.request(Body::TaskBundleTransfer {
                task: key.clone(),
                fingerprint: task.fingerprint().to_vec(),
            })?;
            match reply.body {
                Body::NeedTask { .. } => out.installed.push(key),
                Body::Error { message, .. } => out.rejected.push((key, message)),
                other => out
                    .rejected
                    .push((key, format!("unexpected {:?}", other.message_type()))),
            }
        }
        Ok(out)
    }

    pub fn execute(&self, payload: ExecutePayload) -> Result<Reply, TransportError> {
        self.request(Body::Execute(payload))
    }

    pub fn close(&self) {
        self.closer.close();
        if let Some(h) = self.reader.lock().unwrap().take() {
            let _ = h.join();
        }
    }
}

impl RttProbe for RemoteClient {
    fn ping_ms(&self) -> Result<f64, TransportError> {
        self.ping()
    }
}

impl Drop for RemoteClient {
    fn drop(&mut self) {
        self.close();
    }
}

/// Whether an error reply means the task can never run remotely here.
pub fn is_permanent(code: ErrorCode) -> bool {
    matches!(code, ErrorCode::TaskUnknown | ErrorCode::BundleRejected)
}
