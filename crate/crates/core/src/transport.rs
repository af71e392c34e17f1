//! Frame transports: an in-memory pipe and TCP.
//!
//! A transport moves whole encoded frames. Each send and receive reports the
//! bytes moved and the transit delay attributed to that frame, which is zero
//! for unshaped transports and set by the network emulator otherwise.

use std::collections::VecDeque;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Condvar, Mutex};

use thiserror::Error;

use crate::profiling::LinkType;
use crate::protocol::{Codec, CodecError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransportError {
    #[error("connection lost: {0}")]
    ConnectionLost(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

impl From<std::io::Error> for TransportError {
    fn from(e: std::io::Error) -> Self {
        TransportError::ConnectionLost(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Transit {
    pub bytes: usize,
    pub delay_ms: f64,
}

pub trait FrameSink: Send {
    fn send_frame(&mut self, frame: &[u8]) -> Result<Transit, TransportError>;
}

pub trait FrameSource: Send {
    fn recv_frame(&mut self) -> Result<(Vec<u8>, Transit), TransportError>;
}

/// Tears a connection down from any thread; blocked readers wake with
/// [`TransportError::ConnectionLost`].
pub trait Closer: Send + Sync {
    fn close(&self);
}

/// Nominal link characteristics, as configured rather than measured.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkInfo {
    pub link_type: LinkType,
    pub rtt_ms: f64,
    pub bw_up: f64,
    pub bw_down: f64,
}

impl LinkInfo {
    /// An unshaped link such as loopback.
    pub fn unshaped(link_type: LinkType) -> Self {
        Self {
            link_type,
            rtt_ms: 0.0,
            bw_up: f64::INFINITY,
            bw_down: f64::INFINITY,
        }
    }
}

pub struct Connection {
    pub sink: Box<dyn FrameSink>,
    pub source: Box<dyn FrameSource>,
    pub closer: Arc<dyn Closer>,
    pub info: LinkInfo,
}

pub trait Connector: Send + Sync {
    fn connect(&self) -> Result<Connection, TransportError>;
}

#[derive(Default)]
struct PipeState {
    queue: VecDeque<Vec<u8>>,
    closed: bool,
}

#[derive(Default)]
struct Pipe {
    state: Mutex<PipeState>,
    cv: Condvar,
}

impl Pipe {
    fn close(&self) {
        let mut st = self.state.lock().unwrap();
        st.closed = true;
        st.queue.clear();
        self.cv.notify_all();
    }
}

struct PipeSink(Arc<Pipe>);
struct PipeSource(Arc<Pipe>);

impl FrameSink for PipeSink {
    fn send_frame(&mut self, frame: &[u8]) -> Result<Transit, TransportError> {
        let mut st = self.0.state.lock().unwrap();
        if st.closed {
            return Err(TransportError::ConnectionLost("pipe closed".into()));
        }
        st.queue.push_back(frame.to_vec());
        self.0.cv.notify_one();
        Ok(Transit {
            bytes: frame.len(),
            delay_ms: 0.0,
        })
    }
}

impl FrameSource for PipeSource {
    fn recv_frame(&mut self) -> Result<(Vec<u8>, Transit), TransportError> {
        let mut st = self.0.state.lock().unwrap();
        loop {
            if st.closed {
                return Err(TransportError::ConnectionLost("pipe closed".into()));
            }
            if let Some(frame) = st.queue.pop_front() {
                let bytes = frame.len();
                return Ok((
                    frame,
                    Transit {
                        bytes,
                        delay_ms: 0.0,
                    },
                ));
            }
            st = self.0.cv.wait(st).unwrap();
        }
    }
}

struct PipeCloser(Arc<Pipe>, Arc<Pipe>);

impl Closer for PipeCloser {
    fn close(&self) {
        self.0.close();
        self.1.close();
    }
}

/// Two connected in-memory endpoints. Closing either closes both.
pub fn mem_pair(info: LinkInfo) -> (Connection, Connection) {
    let ab = Arc::new(Pipe::default());
    let ba = Arc::new(Pipe::default());
    let closer: Arc<dyn Closer> = Arc::new(PipeCloser(ab.clone(), ba.clone()));
    let a = Connection {
        sink: Box::new(PipeSink(ab.clone())),
        source: Box::new(PipeSource(ba.clone())),
        closer: closer.clone(),
        info,
    };
    let b = Connection {
        sink: Box::new(PipeSink(ba)),
        source: Box::new(PipeSource(ab)),
        closer,
        info,
    };
    (a, b)
}

struct TcpSink(BufWriter<TcpStream>);

struct TcpSource {
    reader: BufReader<TcpStream>,
    codec: Codec,
}

struct TcpCloser(TcpStream);

impl FrameSink for TcpSink {
    fn send_frame(&mut self, frame: &[u8]) -> Result<Transit, TransportError> {
        self.0.write_all(frame)?;
        self.0.flush()?;
        Ok(Transit {
            bytes: frame.len(),
            delay_ms: 0.0,
        })
    }
}

impl FrameSource for TcpSource {
    fn recv_frame(&mut self) -> Result<(Vec<u8>, Transit), TransportError> {
        let mut prefix = [0u8; 4];
        self.reader.read_exact(&mut prefix)?;
        let len = self.codec.body_len(prefix)?;
        let mut frame = vec![0u8; 4 + len];
        frame[..4].copy_from_slice(&prefix);
        self.reader.read_exact(&mut frame[4..])?;
        let bytes = frame.len();
        Ok((
            frame,
            Transit {
                bytes,
                delay_ms: 0.0,
            },
        ))
    }
}

impl Closer for TcpCloser {
    fn close(&self) {
        let _ = self.0.shutdown(Shutdown::Both);
    }
}

pub fn tcp_connection(
    stream: TcpStream,
    codec: Codec,
    info: LinkInfo,
) -> std::io::Result<Connection> {
    stream.set_nodelay(true)?;
    let reader = BufReader::new(stream.try_clone()?);
    let closer = TcpCloser(stream.try_clone()?);
    Ok(Connection {
        sink: Box::new(TcpSink(BufWriter::new(stream))),
        source: Box::new(TcpSource { reader, codec }),
        closer: Arc::new(closer),
        info,
    })
}

pub struct TcpConnector {
    pub addr: String,
    pub codec: Codec,
    pub info: LinkInfo,
}

impl TcpConnector {
    pub fn new(addr: impl Into<String>, info: LinkInfo) -> Self {
        Self {
            addr: addr.into(),
            codec: Codec::default(),
            info,
        }
    }
}

impl Connector for TcpConnector {
    fn connect(&self) -> Result<Connection, TransportError> {
        let addr = self
            .addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| TransportError::ConnectionLost(format!("cannot resolve {}", self.addr)))?;
        let stream = TcpStream::connect(addr)?;
        Ok(tcp_connection(stream, self.codec, self.info)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{decode, encode, Body, Message};
    use std::net::TcpListener;

    #[test]
    fn pipe_delivers_in_order_and_closes() {
        let (mut a, mut b) = mem_pair(LinkInfo::unshaped(LinkType::WifiLocal));
        for i in 0..5u8 {
            a.sink.send_frame(&[i]).unwrap();
        }
        for i in 0..5u8 {
            assert_eq!(b.source.recv_frame().unwrap().0, vec![i]);
        }
        let h = std::thread::spawn(move || b.source.recv_frame());
        std::thread::sleep(std::time::Duration::from_millis(20));
        a.closer.close();
        assert!(matches!(h.join().unwrap(), Err(TransportError::ConnectionLost(_))));
        assert!(a.sink.send_frame(&[0]).is_err());
    }

    #[test]
    fn tcp_frames_round_trip() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let server = std::thread::spawn(move || {
            let (s, _) = listener.accept().unwrap();
            let mut conn =
                tcp_connection(s, Codec::default(), LinkInfo::unshaped(LinkType::WifiLocal)).unwrap();
            let (frame, t) = conn.source.recv_frame().unwrap();
            assert_eq!(t.bytes, 14);
            let msg = decode(&frame).unwrap();
            conn.sink.send_frame(&encode(&Message::new(msg.seq, Body::Pong))).unwrap();
        });
        let mut c = TcpConnector::new(addr, LinkInfo::unshaped(LinkType::WifiLocal))
            .connect()
            .unwrap();
        c.sink.send_frame(&encode(&Message::new(5, Body::Ping))).unwrap();
        let (frame, _) = c.source.recv_frame().unwrap();
        assert_eq!(decode(&frame).unwrap(), Message::new(5, Body::Pong));
        server.join().unwrap();
    }

    #[test]
    fn tcp_rejects_oversize_prefix() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let h = std::thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            s.write_all(&u32::MAX.to_be_bytes()).unwrap();
        });
        let mut c = tcp_connection(
            TcpStream::connect(addr).unwrap(),
            Codec::new(1024),
            LinkInfo::unshaped(LinkType::WifiLocal),
        )
        .unwrap();
        assert!(matches!(
            c.source.recv_frame(),
            Err(TransportError::Codec(CodecError::Malformed(_)))
        ));
        h.join().unwrap();
    }
}
