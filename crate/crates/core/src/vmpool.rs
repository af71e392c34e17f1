//! Simulated elastic clone pool.
//!
//! Clones move between PoweredOff, Paused and Running. Resuming and cold
//! starting cost the latencies measured on real hypervisors; the pool reports
//! those as overhead instead of sleeping, except in wall-clock mode where the
//! caller sleeps them.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, ClockMode};
use crate::task::{ErasedTask, TaskDemand, TaskError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VmConfigName {
    Basic,
    Main,
    Large,
    X2Large,
    X4Large,
    X8Large,
}

impl VmConfigName {
    pub const ALL: [VmConfigName; 6] = [
        VmConfigName::Basic,
        VmConfigName::Main,
        VmConfigName::Large,
        VmConfigName::X2Large,
        VmConfigName::X4Large,
        VmConfigName::X8Large,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VmConfigName::Basic => "basic",
            VmConfigName::Main => "main",
            VmConfigName::Large => "large",
            VmConfigName::X2Large => "x2large",
            VmConfigName::X4Large => "x4large",
            VmConfigName::X8Large => "x8large",
        }
    }

    fn index(self) -> usize {
        Self::ALL.iter().position(|c| *c == self).unwrap()
    }
}

impl fmt::Display for VmConfigName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VmConfigName {
    type Err = PoolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| PoolError::UnknownConfig(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VmConfig {
    pub name: VmConfigName,
    pub cpus: u32,
    pub memory_mb: u32,
    pub heap_mb: u32,
    /// Per-CPU throughput relative to a reference clone.
    pub speed_factor: f64,
}

impl VmConfig {
    /// Work units per unit time relative to one reference CPU.
    pub fn throughput(&self) -> f64 {
        self.speed_factor * f64::from(self.cpus)
    }
}

/// The six clone configurations, smallest first.
pub fn config_table() -> [VmConfig; 6] {
    let row = |name, cpus, memory_mb, heap_mb| VmConfig {
        name,
        cpus,
        memory_mb,
        heap_mb,
        speed_factor: 1.0,
    };
    [
        row(VmConfigName::Basic, 1, 200, 32),
        row(VmConfigName::Main, 1, 512, 100),
        row(VmConfigName::Large, 1, 1024, 100),
        row(VmConfigName::X2Large, 2, 1024, 100),
        row(VmConfigName::X4Large, 4, 1024, 100),
        row(VmConfigName::X8Large, 8, 1024, 100),
    ]
}

pub fn escalate(config: VmConfigName) -> Result<VmConfigName, PoolError> {
    VmConfigName::ALL
        .get(config.index() + 1)
        .copied()
        .ok_or(PoolError::NoLargerConfig(config))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryVerdict {
    Proceed,
    Exhausted,
}

/// Which ceiling the guard enforces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryLimit {
    /// The per-process heap, for runs in the primary server context.
    Heap,
    /// Whole clone memory, for runs delegated to a dedicated clone.
    Clone,
}

/// Strict exceed: a peak equal to the limit proceeds.
pub fn simulate_memory_guard(peak_mb: f64, vm: &VmConfig, limit: MemoryLimit) -> MemoryVerdict {
    let cap = match limit {
        MemoryLimit::Heap => vm.heap_mb,
        MemoryLimit::Clone => vm.memory_mb,
    };
    if peak_mb > f64::from(cap) {
        MemoryVerdict::Exhausted
    } else {
        MemoryVerdict::Proceed
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PoolError {
    #[error("pool exhausted: {requested} more running clones would exceed the limit of {max_running}")]
    Exhausted { requested: usize, max_running: usize },
    #[error("no configuration larger than {0}")]
    NoLargerConfig(VmConfigName),
    #[error("unknown clone configuration '{0}'")]
    UnknownConfig(String),
    #[error("clone {0} does not exist")]
    UnknownInstance(u64),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("pool config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VmState {
    PoweredOff,
    Paused,
    Running,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmInstance {
    pub id: u64,
    pub config: VmConfigName,
    pub state: VmState,
    pub busy: bool,
    pub idle_since_ms: f64,
    pub primary: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolPolicy {
    pub resume_ms_base: f64,
    /// Linear slowdown per additional simultaneous resume.
    pub resume_contention_coeff: f64,
    pub coldstart_ms: f64,
    /// Paused clones idle longer than this are powered off on the next tick.
    pub pause_after_idle_s: f64,
    pub max_running: usize,
}

impl Default for PoolPolicy {
    fn default() -> Self {
        Self {
            resume_ms_base: 300.0,
            resume_contention_coeff: 3.44,
            coldstart_ms: 32_000.0,
            pause_after_idle_s: 600.0,
            max_running: 16,
        }
    }
}

impl PoolPolicy {
    /// Per-clone resume latency when `k` clones resume together.
    pub fn resume_ms(&self, k: usize) -> f64 {
        if k == 0 {
            return 0.0;
        }
        self.resume_ms_base * (1.0 + self.resume_contention_coeff * (k as f64 - 1.0))
    }

    pub fn validate(&self) -> Result<(), PoolError> {
        if !(self.resume_ms_base > 0.0 && self.coldstart_ms > 0.0 && self.pause_after_idle_s > 0.0) {
            return Err(PoolError::Config("latencies must be positive".into()));
        }
        if !(self.resume_contention_coeff >= 0.0) {
            return Err(PoolError::Config("contention coefficient must be nonnegative".into()));
        }
        if self.max_running == 0 {
            return Err(PoolError::Config("max_running must be at least 1".into()));
        }
        Ok(())
    }
}

/// Pool config file.
///
/// ```toml
/// clock = "deterministic"
/// [policy]
/// resume_ms_base = 300
/// [paused]
/// main = 7
/// [speed_factor]
/// x8large = 1.0
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub clock: ClockMode,
    pub policy: PoolPolicy,
    /// Clones created in the Paused state at startup.
    pub paused: BTreeMap<VmConfigName, usize>,
    pub powered_off: BTreeMap<VmConfigName, usize>,
    pub speed_factor: BTreeMap<VmConfigName, f64>,
}

impl Default for PoolConfig {
    fn default() -> Self {
        let mut paused = BTreeMap::new();
        paused.insert(VmConfigName::Main, 7);
        for c in [
            VmConfigName::Basic,
            VmConfigName::Large,
            VmConfigName::X2Large,
            VmConfigName::X4Large,
            VmConfigName::X8Large,
        ] {
            paused.insert(c, 1);
        }
        Self {
            clock: ClockMode::Deterministic,
            policy: PoolPolicy::default(),
            paused,
            powered_off: BTreeMap::new(),
            speed_factor: BTreeMap::new(),
        }
    }
}

impl PoolConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, PoolError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PoolError::Config(e.to_string()))?;
        cfg.policy.validate()?;
        cfg.table()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PoolError> {
        let text = std::fs::read_to_string(path).map_err(|e| PoolError::Config(e.to_string()))?;
        Self::from_toml_str(&text)
    }

    /// The configuration table with speed-factor overrides applied.
    pub fn table(&self) -> Result<[VmConfig; 6], PoolError> {
        let mut table = config_table();
        for row in table.iter_mut() {
            if let Some(f) = self.speed_factor.get(&row.name) {
                row.speed_factor = *f;
            }
        }
        if table.iter().any(|r| !(r.speed_factor > 0.0)) {
            return Err(PoolError::Config("speed factors must be positive".into()));
        }
        if table.windows(2).any(|w| w[1].speed_factor < w[0].speed_factor) {
            return Err(PoolError::Config(
                "speed factors must be non-decreasing from basic to x8large".into(),
            ));
        }
        Ok(table)
    }
}

/// Clones handed out by [`VmPool::acquire`].
#[derive(Debug, Clone, PartialEq)]
pub struct Lease {
    pub ids: Vec<u64>,
    pub config: VmConfig,
    /// Resume/start latency seen by the request: the slowest clone.
    pub overhead_ms: f64,
    pub per_vm_overhead_ms: Vec<f64>,
    pub resumed: usize,
    pub cold_started: usize,
}

struct PoolInner {
    instances: Vec<VmInstance>,
    next_id: u64,
}

pub struct VmPool {
    inner: Mutex<PoolInner>,
    policy: PoolPolicy,
    table: [VmConfig; 6],
    clock: Arc<dyn Clock>,
}

impl VmPool {
    pub fn new(config: &PoolConfig, clock: Arc<dyn Clock>) -> Result<Self, PoolError> {
        config.policy.validate()?;
        let table = config.table()?;
        let mut inner = PoolInner {
            instances: Vec::new(),
            next_id: 0,
        };
        let now = clock.now_ms();
        let add = |inner: &mut PoolInner, name, state, primary| {
            inner.instances.push(VmInstance {
                id: inner.next_id,
                config: name,
                state,
                busy: false,
                idle_since_ms: now,
                primary,
            });
            inner.next_id += 1;
        };
        add(&mut inner, VmConfigName::Main, VmState::Running, true);
        for (name, n) in &config.paused {
            for _ in 0..*n {
                add(&mut inner, *name, VmState::Paused, false);
            }
        }
        for (name, n) in &config.powered_off {
            for _ in 0..*n {
                add(&mut inner, *name, VmState::PoweredOff, false);
            }
        }
        Ok(Self {
            inner: Mutex::new(inner),
            policy: config.policy,
            table,
            clock,
        })
    }

    pub fn with_defaults(clock: Arc<dyn Clock>) -> Self {
        Self::new(&PoolConfig::default(), clock).expect("default pool config is valid")
    }

    pub fn policy(&self) -> &PoolPolicy {
        &self.policy
    }

    pub fn config(&self, name: VmConfigName) -> VmConfig {
        self.table[name.index()]
    }

    pub fn primary_config(&self) -> VmConfig {
        self.config(VmConfigName::Main)
    }

    /// Brings `count` clones of `config` to Running. Paused clones are
    /// preferred, then powered-off ones; new clones are created powered off
    /// and cold started.
    pub fn acquire(&self, config: VmConfigName, count: usize) -> Result<Lease, PoolError> {
        if count == 0 {
            return Err(PoolError::Contract("acquire needs at least one clone".into()));
        }
        let mut inner = self.inner.lock().unwrap();
        let running = inner
            .instances
            .iter()
            .filter(|v| v.state == VmState::Running && !v.primary)
            .count();
        if running + count > self.policy.max_running {
            return Err(PoolError::Exhausted {
                requested: count,
                max_running: self.policy.max_running,
            });
        }

        let mut picked: Vec<usize> = Vec::with_capacity(count);
        for wanted in [VmState::Paused, VmState::PoweredOff] {
            for (i, v) in inner.instances.iter().enumerate() {
                if picked.len() == count {
                    break;
                }
                if v.config == config && v.state == wanted && !v.primary {
                    picked.push(i);
                }
            }
        }
        while picked.len() < count {
            let id = inner.next_id;
            inner.next_id += 1;
            inner.instances.push(VmInstance {
                id,
                config,
                state: VmState::PoweredOff,
                busy: false,
                idle_since_ms: self.clock.now_ms(),
                primary: false,
            });
            picked.push(inner.instances.len() - 1);
        }

        let resumed = picked
            .iter()
            .filter(|&&i| inner.instances[i].state == VmState::Paused)
            .count();
        let resume_ms = self.policy.resume_ms(resumed);
        let mut per_vm = Vec::with_capacity(count);
        let mut ids = Vec::with_capacity(count);
        for &i in &picked {
            let v = &mut inner.instances[i];
            per_vm.push(match v.state {
                VmState::Paused => resume_ms,
                _ => self.policy.coldstart_ms,
            });
            v.state = VmState::Running;
            v.busy = false;
            ids.push(v.id);
        }
        let overhead_ms = per_vm.iter().copied().fold(0.0, f64::max);
        tracing::debug!(%config, count, resumed, overhead_ms, "acquired clones");
        Ok(Lease {
            ids,
            config: self.config(config),
            overhead_ms,
            per_vm_overhead_ms: per_vm,
            resumed,
            cold_started: count - resumed,
        })
    }

    fn with_instance<R>(
        inner: &mut PoolInner,
        id: u64,
        f: impl FnOnce(&mut VmInstance) -> Result<R, PoolError>,
    ) -> Result<R, PoolError> {
        let v = inner
            .instances
            .iter_mut()
            .find(|v| v.id == id)
            .ok_or(PoolError::UnknownInstance(id))?;
        f(v)
    }

    pub fn set_busy(&self, ids: &[u64], busy: bool) -> Result<(), PoolError> {
        let mut inner = self.inner.lock().unwrap();
        for &id in ids {
            Self::with_instance(&mut inner, id, |v| {
                if v.state != VmState::Running {
                    return Err(PoolError::Contract(format!("clone {id} is not running")));
                }
                v.busy = busy;
                Ok(())
            })?;
        }
        Ok(())
    }

    /// Pauses running, idle clones. All ids are checked before any changes.
    pub fn release(&self, ids: &[u64]) -> Result<(), PoolError> {
        let mut inner = self.inner.lock().unwrap();
        for &id in ids {
            Self::with_instance(&mut inner, id, |v| match (v.state, v.busy, v.primary) {
                (_, _, true) => Err(PoolError::Contract(format!("clone {id} is the primary"))),
                (VmState::Running, true, _) => {
                    Err(PoolError::Contract(format!("clone {id} is busy")))
                }
                (VmState::Running, false, _) => Ok(()),
                (s, _, _) => Err(PoolError::Contract(format!("clone {id} is {s:?}, not running"))),
            })?;
        }
        let now = self.clock.now_ms();
        for &id in ids {
            Self::with_instance(&mut inner, id, |v| {
                v.state = VmState::Paused;
                v.idle_since_ms = now;
                Ok(())
            })?;
        }
        Ok(())
    }

    /// Powers off clones paused for longer than the idle threshold.
    pub fn tick(&self) -> usize {
        let now = self.clock.now_ms();
        let limit_ms = self.policy.pause_after_idle_s * 1000.0;
        let mut inner = self.inner.lock().unwrap();
        let mut n = 0;
        for v in inner.instances.iter_mut() {
            if v.state == VmState::Paused && now - v.idle_since_ms > limit_ms {
                v.state = VmState::PoweredOff;
                n += 1;
            }
        }
        n
    }

    pub fn instances(&self) -> Vec<VmInstance> {
        self.inner.lock().unwrap().instances.clone()
    }

    pub fn count(&self, config: VmConfigName, state: VmState) -> usize {
        self.inner
            .lock()
            .unwrap()
            .instances
            .iter()
            .filter(|v| v.config == config && v.state == state)
            .count()
    }

    /// One JSON object per clone.
    pub fn dump_jsonl(&self) -> String {
        let mut out = String::new();
        for v in self.instances() {
            out.push_str(&serde_json::to_string(&v).expect("instance serializes"));
            out.push('\n');
        }
        out
    }
}

/// Outcome of a fanned-out run.
#[derive(Debug, Clone, PartialEq)]
pub struct Distributed {
    pub result: Vec<u8>,
    /// Final state of the first part; secondaries are stateless workers.
    pub state: Vec<u8>,
    /// Simulated compute time per part, ms.
    pub part_ms: Vec<f64>,
    /// Measured wall time per part, ms.
    pub part_wall_ms: Vec<f64>,
    pub makespan_ms: f64,
    pub demand: Vec<TaskDemand>,
}

/// Simulated compute time of `work` units on `vm`.
pub fn compute_ms(task: &dyn ErasedTask, work_units: u64, vm: &VmConfig) -> f64 {
    work_units as f64 * task.unit_cost_ms() / vm.throughput()
}

/// Splits `args` across `workers`, runs the parts concurrently and merges.
///
/// Fails with the first failing part's error, in part order.
pub fn split_and_distribute(
    task: &dyn ErasedTask,
    state: &[u8],
    args: &[u8],
    workers: &[VmConfig],
) -> Result<Distributed, TaskError> {
    assert!(!workers.is_empty(), "need at least one worker");
    let parts = task.split(args, workers.len())?;
    let demand = parts
        .iter()
        .map(|p| task.demand(p))
        .collect::<Result<Vec<_>, _>>()?;
    let outcomes: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = parts
            .iter()
            .enumerate()
            .map(|(i, part)| {
                let st: &[u8] = if i == 0 { state } else { &[] };
                s.spawn(move || {
                    let t0 = Instant::now();
                    let out = task.run(st, part);
                    (out, t0.elapsed().as_secs_f64() * 1000.0)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("task part panicked"))
            .collect()
    });
    let mut results = Vec::with_capacity(parts.len());
    let mut part_wall_ms = Vec::with_capacity(parts.len());
    let mut first_state = None;
    for (out, wall) in outcomes {
        let out = out?;
        if first_state.is_none() {
            first_state = Some(out.state);
        }
        results.push(out.result);
        part_wall_ms.push(wall);
    }
    let part_ms: Vec<f64> = demand
        .iter()
        .zip(workers)
        .map(|(d, vm)| compute_ms(task, d.work_units, vm))
        .collect();
    let makespan_ms = part_ms.iter().copied().fold(0.0, f64::max);
    let result = if results.len() == 1 {
        results.pop().unwrap()
    } else {
        task.merge(results)?
    };
    Ok(Distributed {
        result,
        state: first_state.unwrap_or_default(),
        part_ms,
        part_wall_ms,
        makespan_ms,
        demand,
    })
}
