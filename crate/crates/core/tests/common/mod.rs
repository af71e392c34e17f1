#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use offload_core::appserver::{AppServer, InProcConnector, ServerConfig};
use offload_core::clock::{Clock, VirtualClock};
use offload_core::controller::{Backoff, Policy, Runtime, RuntimeConfig};
use offload_core::task::{erase, ErasedTask, TaskBundle, TaskError};
use offload_core::transport::{Closer, Connection, Connector, FrameSink, Transit, TransportError};
use offload_core::vmpool::VmPool;

/// Sums a vector; splits into contiguous chunks.
pub struct Sum;

impl TaskBundle for Sum {
    type State = ();
    type Input = Vec<u64>;
    type Output = u64;

    fn id(&self) -> &str {
        "sum"
    }

    fn run(&self, _: &mut (), input: &Vec<u64>) -> Result<u64, TaskError> {
        Ok(input.iter().sum())
    }

    fn work_units(&self, input: &Vec<u64>) -> u64 {
        input.len() as u64 * 1000
    }

    fn unit_cost_ms(&self) -> f64 {
        1e-3
    }

    fn input_size_proxy(&self, input: &Vec<u64>) -> f64 {
        input.len() as f64
    }

    fn splittable(&self) -> bool {
        true
    }

    fn split(&self, input: &Vec<u64>, parts: usize) -> Vec<Vec<u64>> {
        let size = input.len().div_ceil(parts.max(1)).max(1);
        input.chunks(size).map(<[u64]>::to_vec).collect()
    }

    fn merge(&self, partials: Vec<u64>) -> Result<u64, TaskError> {
        Ok(partials.into_iter().sum())
    }
}

/// Adds its input to a counter held in the object state.
pub struct Counter;

impl TaskBundle for Counter {
    type State = u64;
    type Input = u64;
    type Output = u64;

    fn id(&self) -> &str {
        "counter"
    }

    fn run(&self, state: &mut u64, input: &u64) -> Result<u64, TaskError> {
        *state += input;
        Ok(*state)
    }

    fn work_units(&self, _: &u64) -> u64 {
        1
    }

    fn unit_cost_ms(&self) -> f64 {
        1.0
    }

    fn input_size_proxy(&self, _: &u64) -> f64 {
        1.0
    }
}

/// Needs as many megabytes as its input says.
pub struct Hog;

impl TaskBundle for Hog {
    type State = ();
    type Input = f64;
    type Output = u32;

    fn id(&self) -> &str {
        "hog"
    }

    fn run(&self, _: &mut (), _: &f64) -> Result<u32, TaskError> {
        Ok(7)
    }

    fn work_units(&self, _: &f64) -> u64 {
        1000
    }

    fn unit_cost_ms(&self) -> f64 {
        1.0
    }

    fn input_size_proxy(&self, mb: &f64) -> f64 {
        *mb
    }

    fn peak_memory_mb(&self, mb: &f64) -> f64 {
        *mb
    }
}

/// Always raises.
pub struct Boom;

impl TaskBundle for Boom {
    type State = ();
    type Input = u32;
    type Output = u32;

    fn id(&self) -> &str {
        "boom"
    }

    fn run(&self, _: &mut (), x: &u32) -> Result<u32, TaskError> {
        Err(TaskError::InvalidInput(format!("refusing {x}")))
    }

    fn work_units(&self, _: &u32) -> u64 {
        1
    }

    fn unit_cost_ms(&self) -> f64 {
        1.0
    }

    fn input_size_proxy(&self, _: &u32) -> f64 {
        1.0
    }
}

pub fn catalog() -> Vec<Arc<dyn ErasedTask>> {
    vec![erase(Sum), erase(Counter), erase(Hog), erase(Boom)]
}

pub fn server_with(config: ServerConfig) -> Arc<AppServer> {
    let clock: Arc<dyn Clock> = Arc::new(VirtualClock::new());
    let pool = Arc::new(VmPool::with_defaults(clock.clone()));
    AppServer::new(catalog(), pool, clock, config).unwrap()
}

pub fn server() -> Arc<AppServer> {
    server_with(ServerConfig::default())
}

pub fn config(policy: Policy) -> RuntimeConfig {
    RuntimeConfig {
        policy,
        reconnect: Backoff {
            initial_ms: 10.0,
            factor: 2.0,
            cap_ms: 100.0,
        },
        ..RuntimeConfig::default()
    }
}

pub fn runtime(connector: Arc<dyn Connector>, policy: Policy) -> Arc<Runtime> {
    let rt = Runtime::new(config(policy), Some(connector)).unwrap();
    register_all(&rt);
    rt
}

pub fn register_all(rt: &Runtime) {
    rt.register(Sum);
    rt.register(Counter);
    rt.register(Hog);
    rt.register(Boom);
}

pub fn inproc(server: &Arc<AppServer>) -> Arc<dyn Connector> {
    Arc::new(InProcConnector::new(server.clone()))
}

/// Counts frames sent by message type.
pub struct Spy {
    inner: Arc<dyn Connector>,
    pub sent: Arc<Mutex<Vec<u8>>>,
}

impl Spy {
    pub fn new(inner: Arc<dyn Connector>) -> Self {
        Self {
            inner,
            sent: Arc::default(),
        }
    }

    pub fn count(&self, type_code: u8) -> usize {
        self.sent.lock().unwrap().iter().filter(|&&t| t == type_code).count()
    }
}

struct SpySink {
    inner: Box<dyn FrameSink>,
    sent: Arc<Mutex<Vec<u8>>>,
}

impl FrameSink for SpySink {
    fn send_frame(&mut self, frame: &[u8]) -> Result<Transit, TransportError> {
        self.sent.lock().unwrap().push(frame[5]);
        self.inner.send_frame(frame)
    }
}

impl Connector for Spy {
    fn connect(&self) -> Result<Connection, TransportError> {
        let mut conn = self.inner.connect()?;
        conn.sink = Box::new(SpySink {
            inner: conn.sink,
            sent: self.sent.clone(),
        });
        Ok(conn)
    }
}

/// Refuses a set number of connection attempts and can kill the live one.
pub struct Gate {
    inner: Arc<dyn Connector>,
    pub refuse: AtomicUsize,
    pub attempts: AtomicUsize,
    live: Mutex<Option<Arc<dyn Closer>>>,
}

impl Gate {
    pub fn new(inner: Arc<dyn Connector>) -> Self {
        Self {
            inner,
            refuse: AtomicUsize::new(0),
            attempts: AtomicUsize::new(0),
            live: Mutex::new(None),
        }
    }

    pub fn kill(&self) {
        if let Some(c) = self.live.lock().unwrap().take() {
            c.close();
        }
    }
}

impl Connector for Gate {
    fn connect(&self) -> Result<Connection, TransportError> {
        self.attempts.fetch_add(1, Ordering::SeqCst);
        let refused = self
            .refuse
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        if refused {
            return Err(TransportError::ConnectionLost("refused".into()));
        }
        let conn = self.inner.connect()?;
        *self.live.lock().unwrap() = Some(conn.closer.clone());
        Ok(conn)
    }
}

pub fn wait_until(mut cond: impl FnMut() -> bool, timeout_ms: u64) -> bool {
    let t0 = std::time::Instant::now();
    while t0.elapsed().as_millis() < timeout_ms as u128 {
        if cond() {
            return true;
        }
        std::thread::sleep(std::time::Duration::from_millis(2));
    }
    cond()
}
