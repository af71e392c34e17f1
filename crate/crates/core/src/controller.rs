//! Client-side execution controller.
//!
//! For every call: profile, decide where to run, run there, fall back to
//! local execution if the link fails, rethrow remote exceptions and record
//! the run in the shared history.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::client::{is_permanent, RemoteClient};
use crate::clock::{clock_for, Clock, ClockMode, ShutdownSignal, WallClock};
use crate::energy::{
    integrate_energy, CellFsm, DeviceProfile, EnergyBreakdown, PowerCoefficients, Radio,
    TransitPhase, WifiFsm,
};
use crate::profiling::{
    input_bucket, load_history, measure_rtt, ExecutionRecord, HistoryLog, HistoryStore, LinkType,
    Location, NetworkProfile, DEFAULT_ALPHA,
};
use crate::protocol::{Body, Codec, ExecutePayload, PowerRequest, ResultPayload};
use crate::task::{decode_value, encode_value, ErasedTask, RunOutput, TaskBundle, TaskError, TaskKey};
use crate::transport::{Connector, TransportError};
use crate::vmpool::VmConfigName;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    None,
    #[default]
    ExecutionTime,
    Energy,
    ExecutionTimeAndEnergy,
}

impl Policy {
    pub const ALL: [Policy; 4] = [
        Policy::None,
        Policy::ExecutionTime,
        Policy::Energy,
        Policy::ExecutionTimeAndEnergy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::None => "none",
            Policy::ExecutionTime => "execution-time",
            Policy::Energy => "energy",
            Policy::ExecutionTimeAndEnergy => "execution-time-and-energy",
        }
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s.to_ascii_lowercase().replace('_', "-"))
            .ok_or_else(|| format!("unknown policy '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvContext {
    /// `None` while disconnected.
    pub link_type: LinkType,
    pub rtt_ms: f64,
    /// Bytes per second.
    pub bw_up: f64,
    pub bw_down: f64,
    /// Tracked but not used by any policy.
    pub battery_percent: f64,
    pub good_rtt_threshold_ms: f64,
}

impl EnvContext {
    pub fn disconnected(good_rtt_threshold_ms: f64) -> Self {
        Self {
            link_type: LinkType::None,
            rtt_ms: 0.0,
            bw_up: 0.0,
            bw_down: 0.0,
            battery_percent: 100.0,
            good_rtt_threshold_ms,
        }
    }
}

/// Compute power requested with a remote run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteTarget {
    pub config: Option<VmConfigName>,
    pub n_vms: u32,
}

impl Default for RemoteTarget {
    fn default() -> Self {
        Self {
            config: None,
            n_vms: 1,
        }
    }
}

impl RemoteTarget {
    /// History class of runs made with this request.
    pub fn location(&self) -> Location {
        Location::Remote {
            vm_config: self.config.unwrap_or(VmConfigName::Main).to_string(),
            n_vms: self.n_vms,
        }
    }

    fn power_request(&self) -> Option<PowerRequest> {
        if self.config.is_none() && self.n_vms <= 1 {
            return None;
        }
        Some(PowerRequest {
            config: self.config.unwrap_or(VmConfigName::Main).to_string(),
            n_vms: self.n_vms.max(1),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OffloadDecision {
    Local,
    Remote {
        requested_config: Option<VmConfigName>,
        requested_vms: u32,
    },
}

impl OffloadDecision {
    pub fn is_remote(&self) -> bool {
        matches!(self, OffloadDecision::Remote { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimates {
    pub local_time_ms: f64,
    pub local_energy_mj: f64,
    pub remote_time_ms: f64,
    pub remote_energy_mj: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub decision: OffloadDecision,
    pub estimates: Option<Estimates>,
    pub reason: &'static str,
}

/// Everything besides history and environment that shapes a decision.
#[derive(Debug, Clone, Copy)]
pub struct DecisionModel<'a> {
    pub coeffs: &'a PowerCoefficients,
    pub device: &'a DeviceProfile,
    /// Radio state the projected trace starts from.
    pub radio: Radio,
    /// Serialized request size, measured before sending.
    pub request_bytes: u64,
    /// Response size relative to the request when no response was seen yet.
    pub response_factor: f64,
    pub target: RemoteTarget,
}

pub fn decide(
    task_id: &str,
    bucket: u32,
    policy: Policy,
    env: &EnvContext,
    history: &HistoryStore,
    model: &DecisionModel<'_>,
) -> Decision {
    let local = |reason| Decision {
        decision: OffloadDecision::Local,
        estimates: None,
        reason,
    };
    let remote = OffloadDecision::Remote {
        requested_config: model.target.config,
        requested_vms: model.target.n_vms,
    };
    if policy == Policy::None {
        return local("policy none");
    }
    if env.link_type == LinkType::None {
        return local("disconnected");
    }
    let local_sum = history.get(task_id, bucket, &Location::Local);
    let remote_sum = history.get(task_id, bucket, &model.target.location());
    let (Some(ls), Some(rs)) = (local_sum, remote_sum) else {
        let good = env.link_type.is_wifi() && env.rtt_ms <= env.good_rtt_threshold_ms;
        return Decision {
            decision: if good { remote } else { OffloadDecision::Local },
            estimates: None,
            reason: if good { "first run, good wifi" } else { "first run, poor link" },
        };
    };

    let tx = model.request_bytes as f64;
    let rx = if rs.ewma_rx_bytes > 0.0 {
        rs.ewma_rx_bytes
    } else {
        tx * model.response_factor
    };
    let up_ms = tx / env.bw_up * 1000.0;
    let down_ms = rx / env.bw_down * 1000.0;
    let remote_time_ms = rs.ewma_time_ms + up_ms + down_ms + 2.0 * env.rtt_ms;
    let mut radio = model.radio;
    let trace = model.device.remote_trace(
        &mut radio,
        &[
            TransitPhase {
                tx_bytes: model.request_bytes,
                rx_bytes: 0,
                duration_ms: env.rtt_ms + up_ms,
            },
            TransitPhase::wait(rs.ewma_time_ms),
            TransitPhase {
                tx_bytes: 0,
                rx_bytes: rx.round() as u64,
                duration_ms: env.rtt_ms + down_ms,
            },
        ],
    );
    let remote_energy_mj = integrate_energy(&trace, model.coeffs)
        .map(|e| e.total)
        .unwrap_or(f64::INFINITY);
    let est = Estimates {
        local_time_ms: ls.ewma_time_ms,
        local_energy_mj: ls.ewma_energy_mj,
        remote_time_ms,
        remote_energy_mj,
    };
    let faster = est.remote_time_ms < est.local_time_ms;
    let cheaper = est.remote_energy_mj < est.local_energy_mj;
    let go = match policy {
        Policy::None => false,
        Policy::ExecutionTime => faster,
        Policy::Energy => cheaper,
        Policy::ExecutionTimeAndEnergy => faster && cheaper,
    };
    Decision {
        decision: if go { remote } else { OffloadDecision::Local },
        estimates: Some(est),
        reason: "history",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Backoff {
    pub initial_ms: f64,
    pub factor: f64,
    pub cap_ms: f64,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            initial_ms: 500.0,
            factor: 2.0,
            cap_ms: 30_000.0,
        }
    }
}

impl Backoff {
    /// Wait before the `attempt`-th retry, counting from zero.
    pub fn delay_ms(&self, attempt: u32) -> f64 {
        (self.initial_ms * self.factor.powi(attempt.min(64) as i32)).min(self.cap_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    pub app: String,
    pub policy: Policy,
    pub alpha: f64,
    pub good_rtt_threshold_ms: f64,
    pub response_factor: f64,
    /// Phone compute time relative to a reference clone, deterministic mode.
    pub local_slowdown: f64,
    pub clock: ClockMode,
    pub rtt_pings: usize,
    pub battery_percent: f64,
    pub target: RemoteTarget,
    pub reconnect: Backoff,
    pub history_path: Option<PathBuf>,
    pub device: DeviceProfile,
    pub coeffs: PowerCoefficients,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            app: "offload-app".into(),
            policy: Policy::ExecutionTime,
            alpha: DEFAULT_ALPHA,
            good_rtt_threshold_ms: 100.0,
            response_factor: 1.0,
            local_slowdown: 10.0,
            clock: ClockMode::Deterministic,
            rtt_pings: 3,
            battery_percent: 100.0,
            target: RemoteTarget::default(),
            reconnect: Backoff::default(),
            history_path: None,
            device: DeviceProfile::default(),
            coeffs: PowerCoefficients::default(),
        }
    }
}

impl RuntimeConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.coeffs.validate().map_err(|e| e.to_string())?;
        if !(0.0..=1.0).contains(&cfg.alpha) {
            return Err("alpha must be within [0, 1]".into());
        }
        if !(cfg.local_slowdown > 0.0) || cfg.rtt_pings == 0 {
            return Err("local_slowdown must be positive and rtt_pings at least 1".into());
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, String> {
        Self::from_toml_str(&std::fs::read_to_string(path).map_err(|e| e.to_string())?)
    }
}

/// Where to run, overriding the policy when not `Auto`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    Auto,
    Local,
    Remote(RemoteTarget),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecReport {
    pub task_id: String,
    pub input_bucket: u32,
    pub location: Location,
    /// The remote attempt failed and the call ran locally instead.
    pub fell_back: bool,
    pub reason: String,
    pub wall_time_ms: f64,
    pub energy: EnergyBreakdown,
    pub tx_bytes: u64,
    pub rx_bytes: u64,
    pub overhead_ms: f64,
    pub network_ms: f64,
    pub server_time_ms: f64,
    pub resume_ms: f64,
    pub escalations: u32,
    /// Clone configuration that produced the result.
    pub vm_config: Option<String>,
    pub n_vms: u32,
    pub estimates: Option<Estimates>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkStatus {
    Connected,
    Disconnected,
    Reconnecting,
}

struct Link {
    client: Option<Arc<RemoteClient>>,
    net: NetworkProfile,
    reconnecting: bool,
}

/// State shared by all controllers of one client.
pub struct Runtime {
    config: RuntimeConfig,
    clock: Arc<dyn Clock>,
    connector: Option<Arc<dyn Connector>>,
    codec: Codec,
    tasks: RwLock<BTreeMap<String, Arc<dyn ErasedTask>>>,
    local_only: RwLock<HashSet<TaskKey>>,
    history: RwLock<HistoryStore>,
    history_log: Mutex<Option<HistoryLog>>,
    link: Mutex<Link>,
    radio: Mutex<Radio>,
    shutdown: ShutdownSignal,
    reconnector: Mutex<Option<JoinHandle<()>>>,
    reconnect_attempts: AtomicU64,
}

impl Runtime {
    /// `connector` is `None` for a phone with no network.
    pub fn new(
        config: RuntimeConfig,
        connector: Option<Arc<dyn Connector>>,
    ) -> std::io::Result<Arc<Self>> {
        let clock = clock_for(config.clock);
        Self::with_clock(config, connector, clock)
    }

    pub fn with_clock(
        config: RuntimeConfig,
        connector: Option<Arc<dyn Connector>>,
        clock: Arc<dyn Clock>,
    ) -> std::io::Result<Arc<Self>> {
        let (history, log) = match &config.history_path {
            Some(path) => {
                let store = if path.exists() {
                    load_history(path, config.alpha)?
                } else {
                    HistoryStore::new(config.alpha)
                };
                (store, Some(HistoryLog::open(path)?))
            }
            None => (HistoryStore::new(config.alpha), None),
        };
        Ok(Arc::new(Self {
            clock,
            connector,
            codec: Codec::default(),
            tasks: RwLock::new(BTreeMap::new()),
            local_only: RwLock::new(HashSet::new()),
            history: RwLock::new(history),
            history_log: Mutex::new(log),
            link: Mutex::new(Link {
                client: None,
                net: NetworkProfile::default(),
                reconnecting: false,
            }),
            radio: Mutex::new(Radio::None),
            shutdown: ShutdownSignal::new(),
            reconnector: Mutex::new(None),
            reconnect_attempts: AtomicU64::new(0),
            config,
        }))
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn register<T: TaskBundle>(&self, task: T) {
        self.register_erased(crate::task::erase(task));
    }

    pub fn register_erased(&self, task: Arc<dyn ErasedTask>) {
        self.tasks.write().unwrap().insert(task.key().id, task);
    }

    pub fn task(&self, id: &str) -> Option<Arc<dyn ErasedTask>> {
        self.tasks.read().unwrap().get(id).cloned()
    }

    pub fn is_local_only(&self, key: &TaskKey) -> bool {
        self.local_only.read().unwrap().contains(key)
    }

    /// Consistent copy of the history.
    pub fn history(&self) -> HistoryStore {
        self.history.read().unwrap().clone()
    }

    pub fn history_snapshot(&self) -> Vec<u8> {
        self.history.read().unwrap().snapshot()
    }

    pub fn network(&self) -> NetworkProfile {
        self.link.lock().unwrap().net
    }

    pub fn radio(&self) -> Radio {
        *self.radio.lock().unwrap()
    }

    pub fn status(&self) -> LinkStatus {
        let link = self.link.lock().unwrap();
        match (&link.client, link.reconnecting) {
            (Some(c), _) if c.is_alive() => LinkStatus::Connected,
            (_, true) => LinkStatus::Reconnecting,
            _ => LinkStatus::Disconnected,
        }
    }

    pub fn reconnect_attempts(&self) -> u64 {
        self.reconnect_attempts.load(Ordering::SeqCst)
    }

    pub fn client(&self) -> Option<Arc<RemoteClient>> {
        let link = self.link.lock().unwrap();
        link.client.clone().filter(|c| c.is_alive())
    }

    pub fn controller(self: &Arc<Self>) -> ExecutionController {
        ExecutionController { rt: self.clone() }
    }

    /// Connects, registers every task and measures the round trip.
    pub fn connect(&self) -> Result<(), TransportError> {
        let connector = self
            .connector
            .as_ref()
            .ok_or_else(|| TransportError::ConnectionLost("no transport configured".into()))?;
        let conn = connector.connect()?;
        let info = conn.info;
        let client = Arc::new(RemoteClient::new(conn, self.codec, self.config.clock));
        let tasks: Vec<_> = self.tasks.read().unwrap().values().cloned().collect();
        let reg = client.register(&self.config.app, &tasks)?;
        for (key, why) in &reg.rejected {
            tracing::info!(task = %key, reason = %why, "task marked local-only");
            self.local_only.write().unwrap().insert(key.clone());
        }
        let mut net = self.link.lock().unwrap().net;
        net.link_type = info.link_type;
        net.bw_up = info.bw_up;
        net.bw_down = info.bw_down;
        measure_rtt(client.as_ref(), self.config.rtt_pings, &mut net, self.config.alpha)?;
        {
            let mut radio = self.radio.lock().unwrap();
            if matches!(*radio, Radio::None) {
                *radio = match info.link_type {
                    LinkType::WifiLocal | LinkType::WifiInternet => Radio::Wifi(WifiFsm::default()),
                    LinkType::Cellular3G => Radio::Cell(CellFsm::default()),
                    LinkType::None => Radio::None,
                };
            }
        }
        let mut link = self.link.lock().unwrap();
        link.net = net;
        if let Some(old) = link.client.replace(client) {
            old.close();
        }
        tracing::info!(rtt_ms = net.rtt_ms, link = ?net.link_type, "connected");
        Ok(())
    }

    /// Notices a connection that died between calls and starts reconnecting.
    fn check_link(self: &Arc<Self>) {
        let dead = {
            let link = self.link.lock().unwrap();
            link.client.as_ref().is_some_and(|c| !c.is_alive())
        };
        if dead {
            self.mark_lost();
            self.reconnect_async();
        }
    }

    fn mark_lost(&self) {
        let old = self.link.lock().unwrap().client.take();
        if let Some(c) = old {
            c.close();
        }
    }

    /// Retries the connection in the background with exponential backoff
    /// until it succeeds or the runtime shuts down.
    pub fn reconnect_async(self: &Arc<Self>) {
        {
            let mut link = self.link.lock().unwrap();
            if link.reconnecting || self.connector.is_none() || self.shutdown.is_triggered() {
                return;
            }
            link.reconnecting = true;
        }
        let rt = self.clone();
        let handle = std::thread::Builder::new()
            .name("offload-reconnect".into())
            .spawn(move || {
                // Backoff runs on real time whatever the runtime's clock.
                let wall = WallClock::new();
                let mut attempt = 0;
                loop {
                    if rt.shutdown.wait_ms(&wall, rt.config.reconnect.delay_ms(attempt)) {
                        break;
                    }
                    rt.reconnect_attempts.fetch_add(1, Ordering::SeqCst);
                    match rt.connect() {
                        Ok(()) => break,
                        Err(e) => tracing::debug!(attempt, error = %e, "reconnect failed"),
                    }
                    attempt += 1;
                }
                rt.link.lock().unwrap().reconnecting = false;
            })
            .expect("spawn reconnect thread");
        let mut slot = self.reconnector.lock().unwrap();
        if let Some(old) = slot.replace(handle) {
            if old.is_finished() {
                let _ = old.join();
            }
        }
    }

    /// Blocks until a background reconnection, if any, has finished.
    pub fn join_reconnect(&self) {
        let handle = self.reconnector.lock().unwrap().take();
        if let Some(h) = handle {
            let _ = h.join();
        }
    }

    pub fn shutdown(&self) {
        self.shutdown.trigger();
        self.join_reconnect();
        self.mark_lost();
    }

    /// Lets time pass between calls; radio timers keep running.
    pub fn idle(&self, ms: f64) {
        self.config.device.idle(&mut self.radio.lock().unwrap(), ms);
        if self.clock.mode() == ClockMode::Deterministic {
            self.clock.sleep_ms(ms);
        }
    }

    fn env(&self) -> EnvContext {
        let link = self.link.lock().unwrap();
        let connected = link.client.as_ref().is_some_and(|c| c.is_alive());
        if !connected {
            return EnvContext::disconnected(self.config.good_rtt_threshold_ms);
        }
        EnvContext {
            link_type: link.net.link_type,
            rtt_ms: link.net.rtt_ms,
            bw_up: link.net.bw_up,
            bw_down: link.net.bw_down,
            battery_percent: self.config.battery_percent,
            good_rtt_threshold_ms: self.config.good_rtt_threshold_ms,
        }
    }

    fn record(&self, rec: &ExecutionRecord) {
        debug_assert!(rec.validate().is_ok(), "{:?}", rec.validate());
        self.history.write().unwrap().record(rec);
        if let Some(log) = self.history_log.lock().unwrap().as_mut() {
            if let Err(e) = log.append(rec) {
                tracing::warn!(error = %e, "history append failed");
            }
        }
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        self.shutdown.trigger();
    }
}

/// Per-thread handle that runs calls through the decision flow.
pub struct ExecutionController {
    rt: Arc<Runtime>,
}

impl ExecutionController {
    pub fn runtime(&self) -> &Arc<Runtime> {
        &self.rt
    }

    pub fn execute<T: TaskBundle>(
        &self,
        task: &T,
        state: &mut T::State,
        input: &T::Input,
    ) -> Result<T::Output, TaskError> {
        self.execute_with(task, state, input, Placement::Auto).map(|(out, _)| out)
    }

    /// Typed call with an explicit placement and the run's report.
    pub fn execute_with<T: TaskBundle>(
        &self,
        task: &T,
        state: &mut T::State,
        input: &T::Input,
        placement: Placement,
    ) -> Result<(T::Output, ExecReport), TaskError> {
        let (out, report) =
            self.execute_bytes(task.id(), &encode_value(state), &encode_value(input), placement)?;
        *state = decode_value(&out.state)?;
        Ok((decode_value(&out.result)?, report))
    }

    pub fn execute_bytes(
        &self,
        task_id: &str,
        state: &[u8],
        args: &[u8],
        placement: Placement,
    ) -> Result<(RunOutput, ExecReport), TaskError> {
        let rt = &self.rt;
        rt.check_link();
        let task = rt
            .task(task_id)
            .ok_or_else(|| TaskError::failed("NotRegistered", format!("task {task_id} is not registered")))?;
        let demand = task.demand(args)?;
        let bucket = input_bucket(demand.size_proxy);
        let key = task.key();
        let target = match placement {
            Placement::Remote(t) => t,
            _ => rt.config.target,
        };
        let payload = ExecutePayload {
            task: key.clone(),
            input_bucket: bucket,
            state: state.to_vec(),
            args: args.to_vec(),
            power_request: target.power_request(),
        };

        let decision = match placement {
            Placement::Local => Decision {
                decision: OffloadDecision::Local,
                estimates: None,
                reason: "forced local",
            },
            _ if rt.is_local_only(&key) => Decision {
                decision: OffloadDecision::Local,
                estimates: None,
                reason: "local-only task",
            },
            Placement::Remote(_) if rt.client().is_some() => Decision {
                decision: OffloadDecision::Remote {
                    requested_config: target.config,
                    requested_vms: target.n_vms,
                },
                estimates: None,
                reason: "forced remote",
            },
            Placement::Remote(_) => Decision {
                decision: OffloadDecision::Local,
                estimates: None,
                reason: "disconnected",
            },
            Placement::Auto => {
                let env = rt.env();
                let request_bytes = crate::protocol::encode(&crate::protocol::Message::new(
                    0,
                    Body::Execute(payload.clone()),
                ))
                .len() as u64;
                let history = rt.history.read().unwrap();
                decide(
                    &key.id,
                    bucket,
                    rt.config.policy,
                    &env,
                    &history,
                    &DecisionModel {
                        coeffs: &rt.config.coeffs,
                        device: &rt.config.device,
                        radio: rt.radio(),
                        request_bytes,
                        response_factor: rt.config.response_factor,
                        target,
                    },
                )
            }
        };
        tracing::info!(
            target: "offload::decision",
            task = %key,
            bucket,
            remote = decision.decision.is_remote(),
            reason = decision.reason,
            estimates = ?decision.estimates,
            "decided"
        );

        if decision.decision.is_remote() {
            match self.run_remote(task.as_ref(), payload, bucket, target, &decision) {
                Remote::Done(out, report) => return Ok((out, report)),
                Remote::Raised(e) => return Err(e),
                Remote::Fallback(why) => {
                    tracing::warn!(task = %key, reason = %why, "remote attempt failed, running locally");
                    let (out, mut report) = self.run_local(task.as_ref(), state, args, bucket, &decision, false)?;
                    report.fell_back = true;
                    report.reason = why;
                    return Ok((out, report));
                }
            }
        }
        self.run_local(task.as_ref(), state, args, bucket, &decision, true)
    }

    fn run_local(
        &self,
        task: &dyn ErasedTask,
        state: &[u8],
        args: &[u8],
        bucket: u32,
        decision: &Decision,
        record: bool,
    ) -> Result<(RunOutput, ExecReport), TaskError> {
        let rt = &self.rt;
        let demand = task.demand(args)?;
        let t0 = Instant::now();
        let out = task.run(state, args)?;
        let time_ms = match rt.clock.mode() {
            ClockMode::Deterministic => {
                let t = demand.work_units as f64 * task.unit_cost_ms() * rt.config.local_slowdown;
                rt.clock.sleep_ms(t);
                t
            }
            ClockMode::Wall => t0.elapsed().as_secs_f64() * 1000.0,
        };
        let trace = rt.config.device.local_trace(&mut rt.radio.lock().unwrap(), time_ms);
        let energy = integrate_energy(&trace, &rt.config.coeffs).unwrap_or_default();
        let rec = ExecutionRecord {
            task_id: task.key().id,
            input_bucket: bucket,
            location: Location::Local,
            wall_time_ms: time_ms,
            energy,
            tx_bytes: 0,
            rx_bytes: 0,
            overhead_ms: 0.0,
            network_ms: 0.0,
            timestamp_ms: rt.clock.now_ms(),
        };
        if record {
            rt.record(&rec);
        }
        Ok((
            out,
            ExecReport {
                task_id: rec.task_id,
                input_bucket: bucket,
                location: Location::Local,
                fell_back: false,
                reason: decision.reason.to_string(),
                wall_time_ms: time_ms,
                energy,
                tx_bytes: 0,
                rx_bytes: 0,
                overhead_ms: 0.0,
                network_ms: 0.0,
                server_time_ms: 0.0,
                resume_ms: 0.0,
                escalations: 0,
                vm_config: None,
                n_vms: 0,
                estimates: decision.estimates,
            },
        ))
    }

    fn run_remote(
        &self,
        task: &dyn ErasedTask,
        payload: ExecutePayload,
        bucket: u32,
        target: RemoteTarget,
        decision: &Decision,
    ) -> Remote {
        let rt = &self.rt;
        let Some(client) = rt.client() else {
            return Remote::Fallback("disconnected".into());
        };
        let input_state = payload.state.clone();
        let reply = match client.execute(payload) {
            Ok(r) => r,
            Err(e) => {
                rt.mark_lost();
                rt.reconnect_async();
                return Remote::Fallback(e.to_string());
            }
        };
        let network_ms = reply.network_ms();
        match reply.body {
            Body::Result(ResultPayload::Ok {
                result,
                state_delta,
                profile,
            }) => {
                let time_ms = match rt.clock.mode() {
                    ClockMode::Deterministic => {
                        let t = network_ms + profile.server_time_ms;
                        rt.clock.sleep_ms(t);
                        t
                    }
                    ClockMode::Wall => reply.elapsed_ms,
                };
                let trace = rt.config.device.remote_trace(
                    &mut rt.radio.lock().unwrap(),
                    &[
                        TransitPhase {
                            tx_bytes: reply.up.bytes as u64,
                            rx_bytes: 0,
                            duration_ms: reply.up.delay_ms,
                        },
                        TransitPhase::wait((time_ms - network_ms).max(0.0)),
                        TransitPhase {
                            tx_bytes: 0,
                            rx_bytes: reply.down.bytes as u64,
                            duration_ms: reply.down.delay_ms,
                        },
                    ],
                );
                let energy = integrate_energy(&trace, &rt.config.coeffs).unwrap_or_default();
                let overhead_ms = (network_ms + profile.overhead_ms).min(time_ms);
                let rec = ExecutionRecord {
                    task_id: task.key().id,
                    input_bucket: bucket,
                    location: target.location(),
                    wall_time_ms: time_ms,
                    energy,
                    tx_bytes: reply.up.bytes as u64,
                    rx_bytes: reply.down.bytes as u64,
                    overhead_ms,
                    network_ms: network_ms.min(time_ms),
                    timestamp_ms: rt.clock.now_ms(),
                };
                rt.record(&rec);
                let state = if state_delta.is_empty() {
                    input_state
                } else {
                    state_delta
                };
                Remote::Done(
                    RunOutput { result, state },
                    ExecReport {
                        task_id: rec.task_id,
                        input_bucket: bucket,
                        location: rec.location,
                        fell_back: false,
                        reason: decision.reason.to_string(),
                        wall_time_ms: time_ms,
                        energy,
                        tx_bytes: rec.tx_bytes,
                        rx_bytes: rec.rx_bytes,
                        overhead_ms,
                        network_ms,
                        server_time_ms: profile.server_time_ms,
                        resume_ms: profile.overhead_ms,
                        escalations: profile.escalations,
                        vm_config: Some(profile.vm_config),
                        n_vms: profile.n_vms,
                        estimates: decision.estimates,
                    },
                )
            }
            Body::Result(ResultPayload::RemoteException { kind, message }) => {
                Remote::Raised(TaskError::from_wire(&kind, &message))
            }
            Body::Error { code, message } => {
                if is_permanent(code) {
                    rt.local_only.write().unwrap().insert(task.key());
                }
                Remote::Fallback(format!("server error {code:?}: {message}"))
            }
            other => Remote::Fallback(format!("unexpected reply {:?}", other.message_type())),
        }
    }
}

enum Remote {
    Done(RunOutput, ExecReport),
    Raised(TaskError),
    Fallback(String),
}
