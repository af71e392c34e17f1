//! Cloud-side client handler.
//!
//! Each connection gets its own session thread that answers requests in
//! arrival order. Sessions share the plugin catalog, the installed-bundle
//! registry and the clone pool.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::net::{TcpListener, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use crate::clock::{Clock, ClockMode};
use crate::profiling::{LinkType, ProgramProfile};
use crate::protocol::{
    encode, Body, Codec, ErrorCode, ExecutePayload, Message, RemoteProfile, ResultPayload,
};
use crate::task::{ErasedTask, TaskError, TaskKey};
use crate::transport::{
    mem_pair, tcp_connection, Connection, Connector, LinkInfo, TransportError,
};
use crate::vmpool::{
    compute_ms, escalate, simulate_memory_guard, split_and_distribute, Lease, MemoryLimit,
    MemoryVerdict, PoolError, VmConfig, VmConfigName, VmPool,
};

#[derive(Debug, Clone, Default)]
pub struct ServerConfig {
    /// Refuse every bundle transfer.
    pub restricted: bool,
    /// Installed bundles persist here as `<id>@<version>.bundle` files.
    pub registry_dir: Option<PathBuf>,
    pub codec: Codec,
}


pub struct AppServer {
    catalog: HashMap<TaskKey, Arc<dyn ErasedTask>>,
    installed: RwLock<HashSet<TaskKey>>,
    pool: Arc<VmPool>,
    clock: Arc<dyn Clock>,
    config: ServerConfig,
}

/// Where a request runs before any escalation.
struct Plan {
    config: VmConfigName,
    /// Clones to acquire from the pool; zero runs in the primary context.
    acquire: usize,
    with_primary: bool,
}

struct Run {
    result: Vec<u8>,
    state: Vec<u8>,
    compute_ms: f64,
    measured_ms: f64,
    thread_cpu_ms: f64,
    work_units: u64,
    peak_mb: f64,
    overhead_ms: f64,
    per_vm_overhead_ms: Vec<f64>,
    vm_config: VmConfigName,
    n_vms: u32,
    escalations: u32,
}

impl AppServer {
    /// `catalog` holds every task this server can run once installed.
    pub fn new(
        catalog: Vec<Arc<dyn ErasedTask>>,
        pool: Arc<VmPool>,
        clock: Arc<dyn Clock>,
        config: ServerConfig,
    ) -> std::io::Result<Arc<Self>> {
        let catalog: HashMap<_, _> = catalog.into_iter().map(|t| (t.key(), t)).collect();
        let mut installed = HashSet::new();
        if let Some(dir) = &config.registry_dir {
            std::fs::create_dir_all(dir)?;
            for entry in std::fs::read_dir(dir)? {
                let path = entry?.path();
                if path.extension().and_then(|e| e.to_str()) != Some("bundle") {
                    continue;
                }
                let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                    continue;
                };
                let Some((id, version)) = stem.rsplit_once('@') else {
                    continue;
                };
                let Ok(version) = version.parse() else {
                    continue;
                };
                let key = TaskKey::new(id, version);
                let stored = std::fs::read_to_string(&path)?;
                match catalog.get(&key) {
                    Some(t) if stored.trim() == hex::encode(t.fingerprint()) => {
                        installed.insert(key);
                    }
                    _ => tracing::warn!(path = %path.display(), "ignoring stale bundle"),
                }
            }
        }
        Ok(Arc::new(Self {
            catalog,
            installed: RwLock::new(installed),
            pool,
            clock,
            config,
        }))
    }

    pub fn pool(&self) -> &Arc<VmPool> {
        &self.pool
    }

    pub fn installed(&self) -> BTreeSet<TaskKey> {
        self.installed.read().unwrap().iter().cloned().collect()
    }

    fn is_installed(&self, key: &TaskKey) -> bool {
        self.installed.read().unwrap().contains(key)
    }

    fn install(&self, key: &TaskKey, fingerprint: &[u8]) -> Result<(), String> {
        if self.config.restricted {
            return Err("server is in restricted mode".into());
        }
        let task = self
            .catalog
            .get(key)
            .ok_or_else(|| format!("no plugin for {key}"))?;
        if fingerprint != task.fingerprint() {
            return Err(format!("integrity check failed for {key}"));
        }
        if let Some(dir) = &self.config.registry_dir {
            let path = dir.join(format!("{}@{}.bundle", key.id, key.version));
            std::fs::write(&path, hex::encode(fingerprint)).map_err(|e| e.to_string())?;
        }
        self.installed.write().unwrap().insert(key.clone());
        Ok(())
    }

    /// Runs one session to completion. Returns when the peer disconnects.
    pub fn serve(&self, mut conn: Connection) {
        let mut session = Session {
            app: None,
            pending: BTreeSet::new(),
        };
        loop {
            let frame = match conn.source.recv_frame() {
                Ok((frame, _)) => frame,
                Err(TransportError::ConnectionLost(_)) => break,
                Err(e) => {
                    tracing::warn!(error = %e, "unreadable frame, closing session");
                    break;
                }
            };
            let reply = match self.config.codec.decode(&frame) {
                Ok(msg) => {
                    let body = self.handle(&mut session, msg.body);
                    Message::new(msg.seq, body)
                }
                Err(e) => Message::new(
                    0,
                    Body::Error {
                        code: ErrorCode::BadRequest,
                        message: e.to_string(),
                    },
                ),
            };
            if conn.sink.send_frame(&encode(&reply)).is_err() {
                break;
            }
        }
        conn.closer.close();
        tracing::debug!(app = ?session.app, "session closed");
    }

    fn handle(&self, session: &mut Session, body: Body) -> Body {
        match body {
            Body::Ping => Body::Pong,
            Body::RegisterApp { app, manifest } => {
                session.app = Some(app);
                session.pending = manifest
                    .into_iter()
                    .filter(|k| !self.is_installed(k))
                    .collect();
                Body::NeedTask {
                    unknown: session.pending.iter().cloned().collect(),
                }
            }
            Body::TaskBundleTransfer { task, fingerprint } => {
                match self.install(&task, &fingerprint) {
                    Ok(()) => {
                        session.pending.remove(&task);
                        tracing::info!(task = %task, "installed bundle");
                        Body::NeedTask {
                            unknown: session.pending.iter().cloned().collect(),
                        }
                    }
                    Err(message) => {
                        session.pending.remove(&task);
                        tracing::info!(task = %task, %message, "rejected bundle");
                        Body::Error {
                            code: ErrorCode::BundleRejected,
                            message,
                        }
                    }
                }
            }
            Body::Execute(p) => self.handle_execute(&p),
            other => Body::Error {
                code: ErrorCode::BadRequest,
                message: format!("unexpected {:?} from client", other.message_type()),
            },
        }
    }

    pub fn handle_execute(&self, p: &ExecutePayload) -> Body {
        let task = match self.catalog.get(&p.task) {
            Some(t) if self.is_installed(&p.task) => t.clone(),
            _ => {
                return Body::Error {
                    code: ErrorCode::TaskUnknown,
                    message: format!("task {} is not installed", p.task),
                }
            }
        };
        let plan = match self.plan(task.as_ref(), p) {
            Ok(plan) => plan,
            Err(e) => {
                return Body::Error {
                    code: ErrorCode::BadRequest,
                    message: e.to_string(),
                }
            }
        };
        let t0 = Instant::now();
        match self.run_with_escalation(task.as_ref(), p, plan) {
            Ok(run) => {
                let server_time_ms = match self.clock.mode() {
                    ClockMode::Deterministic => run.overhead_ms + run.compute_ms,
                    ClockMode::Wall => t0.elapsed().as_secs_f64() * 1000.0,
                };
                let wall_time_ms = match self.clock.mode() {
                    ClockMode::Deterministic => run.compute_ms,
                    ClockMode::Wall => run.measured_ms,
                };
                tracing::info!(
                    task = %p.task,
                    bucket = p.input_bucket,
                    vm = %run.vm_config,
                    n_vms = run.n_vms,
                    escalations = run.escalations,
                    overhead_ms = run.overhead_ms,
                    server_time_ms,
                    "executed"
                );
                Body::Result(ResultPayload::Ok {
                    result: run.result,
                    state_delta: run.state,
                    profile: RemoteProfile {
                        program: ProgramProfile {
                            wall_time_ms,
                            thread_cpu_time_ms: run.thread_cpu_ms.min(wall_time_ms * f64::from(run.n_vms)),
                            work_units: run.work_units,
                            alloc_bytes: (run.peak_mb * 1024.0 * 1024.0) as u64,
                            gc_or_reclaim_count: 0,
                        },
                        server_time_ms,
                        overhead_ms: run.overhead_ms,
                        vm_config: run.vm_config.to_string(),
                        n_vms: run.n_vms,
                        escalations: run.escalations,
                        per_vm_overhead_ms: run.per_vm_overhead_ms,
                    },
                })
            }
            Err(Failure::Task(e)) => {
                let (kind, message) = e.to_wire();
                tracing::info!(task = %p.task, %kind, "task raised");
                Body::Result(ResultPayload::RemoteException { kind, message })
            }
            Err(Failure::Pool(e)) => Body::Error {
                code: ErrorCode::PoolExhausted,
                message: e.to_string(),
            },
        }
    }

    fn plan(&self, task: &dyn ErasedTask, p: &ExecutePayload) -> Result<Plan, PoolError> {
        let Some(req) = &p.power_request else {
            return Ok(Plan {
                config: VmConfigName::Main,
                acquire: 0,
                with_primary: true,
            });
        };
        let config: VmConfigName = req.config.parse()?;
        let n = req.n_vms.max(1) as usize;
        Ok(if n > 1 && task.splittable() {
            // Primary plus n - 1 secondaries.
            Plan {
                config,
                acquire: n - 1,
                with_primary: true,
            }
        } else if config == VmConfigName::Main {
            Plan {
                config,
                acquire: 0,
                with_primary: true,
            }
        } else {
            Plan {
                config,
                acquire: 1,
                with_primary: false,
            }
        })
    }

    fn run_with_escalation(
        &self,
        task: &dyn ErasedTask,
        p: &ExecutePayload,
        mut plan: Plan,
    ) -> Result<Run, Failure> {
        let demand = task.demand(&p.args).map_err(Failure::Task)?;
        let mut escalations = 0;
        let mut overhead_ms = 0.0;
        let mut per_vm_overhead_ms = Vec::new();
        loop {
            let lease = if plan.acquire > 0 {
                let lease = self.pool.acquire(plan.config, plan.acquire).map_err(Failure::Pool)?;
                overhead_ms += lease.overhead_ms;
                per_vm_overhead_ms.extend_from_slice(&lease.per_vm_overhead_ms);
                if self.clock.mode() == ClockMode::Wall {
                    self.clock.sleep_ms(lease.overhead_ms);
                }
                Some(lease)
            } else {
                None
            };
            let workers = self.workers(&plan, lease.as_ref());
            let outcome = self.attempt(
                task,
                p,
                &workers,
                lease.as_ref(),
                plan.with_primary,
                demand.peak_memory_mb,
            );
            if let Some(lease) = &lease {
                self.pool.release(&lease.ids).map_err(Failure::Pool)?;
            }
            match outcome {
                Err(e) if e.is_out_of_memory() => {
                    let from = workers.last().map(|w| w.name).unwrap_or(plan.config);
                    let Ok(next) = escalate(from) else {
                        return Err(Failure::Task(e));
                    };
                    tracing::info!(task = %p.task, %from, %next, "memory exhausted, escalating");
                    escalations += 1;
                    let n = workers.len().max(1);
                    plan = if n > 1 {
                        Plan {
                            config: next,
                            acquire: n,
                            with_primary: false,
                        }
                    } else {
                        Plan {
                            config: next,
                            acquire: 1,
                            with_primary: false,
                        }
                    };
                }
                Err(e) => return Err(Failure::Task(e)),
                Ok(mut run) => {
                    run.overhead_ms = overhead_ms;
                    run.per_vm_overhead_ms = per_vm_overhead_ms;
                    run.escalations = escalations;
                    run.peak_mb = demand.peak_memory_mb;
                    return Ok(run);
                }
            }
        }
    }

    fn workers(&self, plan: &Plan, lease: Option<&Lease>) -> Vec<VmConfig> {
        let mut workers = Vec::new();
        if plan.with_primary {
            workers.push(self.pool.primary_config());
        }
        if let Some(lease) = lease {
            workers.extend(std::iter::repeat_n(lease.config, lease.ids.len()));
        }
        workers
    }

    fn attempt(
        &self,
        task: &dyn ErasedTask,
        p: &ExecutePayload,
        workers: &[VmConfig],
        lease: Option<&Lease>,
        with_primary: bool,
        peak_mb: f64,
    ) -> Result<Run, TaskError> {
        for (i, vm) in workers.iter().enumerate() {
            // The primary context is bounded by its heap; a dedicated clone
            // gives the task the whole machine.
            let limit = if i == 0 && with_primary {
                MemoryLimit::Heap
            } else {
                MemoryLimit::Clone
            };
            if simulate_memory_guard(peak_mb, vm, limit) == MemoryVerdict::Exhausted {
                return Err(TaskError::OutOfMemory(format!(
                    "{} needs {peak_mb:.1} MB, {} allows {} MB",
                    task.key(),
                    vm.name,
                    match limit {
                        MemoryLimit::Heap => vm.heap_mb,
                        MemoryLimit::Clone => vm.memory_mb,
                    }
                )));
            }
        }
        if let Some(lease) = lease {
            self.pool.set_busy(&lease.ids, true).ok();
        }
        let t0 = Instant::now();
        let out = if workers.len() > 1 {
            split_and_distribute(task, &p.state, &p.args, workers).map(|d| {
                let measured = t0.elapsed().as_secs_f64() * 1000.0;
                Run {
                    result: d.result,
                    state: d.state,
                    compute_ms: d.makespan_ms,
                    measured_ms: measured,
                    thread_cpu_ms: match self.clock.mode() {
                        ClockMode::Deterministic => d.part_ms.iter().sum(),
                        ClockMode::Wall => d.part_wall_ms.iter().sum(),
                    },
                    work_units: d.demand.iter().map(|x| x.work_units).sum(),
                    peak_mb: 0.0,
                    overhead_ms: 0.0,
                    per_vm_overhead_ms: vec![],
                    vm_config: workers.last().unwrap().name,
                    n_vms: workers.len() as u32,
                    escalations: 0,
                }
            })
        } else {
            let vm = workers[0];
            task.demand(&p.args).and_then(|d| {
                task.run(&p.state, &p.args).map(|out| {
                    let measured = t0.elapsed().as_secs_f64() * 1000.0;
                    let simulated = compute_ms(task, d.work_units, &vm);
                    Run {
                        result: out.result,
                        state: out.state,
                        compute_ms: simulated,
                        measured_ms: measured,
                        thread_cpu_ms: match self.clock.mode() {
                            ClockMode::Deterministic => simulated,
                            ClockMode::Wall => measured,
                        },
                        work_units: d.work_units,
                        peak_mb: 0.0,
                        overhead_ms: 0.0,
                        per_vm_overhead_ms: vec![],
                        vm_config: vm.name,
                        n_vms: 1,
                        escalations: 0,
                    }
                })
            })
        };
        if let Some(lease) = lease {
            self.pool.set_busy(&lease.ids, false).ok();
        }
        out
    }

    /// Accepts TCP clients until the listener fails, one thread per session.
    pub fn listen(self: &Arc<Self>, addr: impl ToSocketAddrs) -> std::io::Result<()> {
        let listener = TcpListener::bind(addr)?;
        self.accept_loop(listener)
    }

    pub fn accept_loop(self: &Arc<Self>, listener: TcpListener) -> std::io::Result<()> {
        tracing::info!(addr = %listener.local_addr()?, "listening");
        for stream in listener.incoming() {
            let stream = stream?;
            let peer = stream.peer_addr().ok();
            let conn = tcp_connection(
                stream,
                self.config.codec,
                LinkInfo::unshaped(LinkType::None),
            )?;
            let server = self.clone();
            std::thread::spawn(move || {
                tracing::debug!(?peer, "session opened");
                server.serve(conn);
            });
        }
        Ok(())
    }
}

enum Failure {
    Task(TaskError),
    Pool(PoolError),
}

struct Session {
    app: Option<String>,
    pending: BTreeSet<TaskKey>,
}

/// Connects to an in-process server over an in-memory pipe.
pub struct InProcConnector {
    server: Arc<AppServer>,
    info: LinkInfo,
}

impl InProcConnector {
    pub fn new(server: Arc<AppServer>) -> Self {
        Self {
            server,
            info: LinkInfo::unshaped(LinkType::WifiLocal),
        }
    }
}

impl Connector for InProcConnector {
    fn connect(&self) -> Result<Connection, TransportError> {
        let (client, server_end) = mem_pair(self.info);
        let server = self.server.clone();
        std::thread::Builder::new()
            .name("offload-session".into())
            .spawn(move || server.serve(server_end))
            .map_err(TransportError::from)?;
        Ok(client)
    }
}
