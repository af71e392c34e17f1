//! Scenario environments, the boundary-input search and the matrix runner.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context};
use offload_core::appserver::{AppServer, InProcConnector, ServerConfig};
use offload_core::clock::{Clock, ClockMode, VirtualClock, WallClock};
use offload_core::controller::{
    ExecReport, ExecutionController, Placement, Policy, RemoteTarget, Runtime, RuntimeConfig,
};
use offload_core::energy::{DeviceProfile, PowerCoefficients};
use offload_core::profiling::LinkType;
use offload_core::netem::{resolve_scenario, LinkScenario, NetemConnector};
use offload_core::task::{erase, ErasedTask, TaskBundle, TaskError};
use offload_core::transport::{Connector, TcpConnector};
use offload_core::vmpool::{PoolConfig, VmConfigName, VmPool};
use serde::{Deserialize, Serialize};

use crate::fixtures::Fixtures;
use crate::workloads::{catalog, Workload};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchOptions {
    pub clock: ClockMode,
    /// Phone compute time relative to a reference clone.
    pub local_slowdown: f64,
    /// Calls per matrix cell.
    pub runs: usize,
    /// Idle time between calls, simulated in deterministic mode.
    pub gap_ms: f64,
    pub alpha: f64,
    pub good_rtt_threshold_ms: f64,
    pub pool: PoolConfig,
    pub device: DeviceProfile,
    pub coeffs: PowerCoefficients,
    /// Use a running server at this address instead of an in-process one.
    pub connect: Option<String>,
    /// Scenarios beyond the presets.
    pub custom_scenarios: Vec<LinkScenario>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            clock: ClockMode::Deterministic,
            local_slowdown: 10.0,
            runs: 20,
            gap_ms: 30_000.0,
            alpha: offload_core::profiling::DEFAULT_ALPHA,
            good_rtt_threshold_ms: 100.0,
            pool: PoolConfig::default(),
            device: DeviceProfile::default(),
            coeffs: PowerCoefficients::default(),
            connect: None,
            custom_scenarios: Vec::new(),
        }
    }
}

impl BenchOptions {
    pub fn scenario(&self, name: &str) -> anyhow::Result<LinkScenario> {
        resolve_scenario(name, &self.custom_scenarios).map_err(anyhow::Error::msg)
    }
}

/// One client runtime wired to a server through an emulated link.
pub struct BenchEnv {
    pub scenario: LinkScenario,
    pub clock: Arc<dyn Clock>,
    pub server: Option<Arc<AppServer>>,
    pub netem: Option<Arc<NetemConnector>>,
    pub runtime: Arc<Runtime>,
}

impl BenchEnv {
    pub fn new(
        scenario: &LinkScenario,
        policy: Policy,
        servers: u32,
        opts: &BenchOptions,
    ) -> anyhow::Result<Self> {
        Self::with_tasks(scenario, policy, servers, opts, Vec::new())
    }

    /// Like [`BenchEnv::new`] with `extra` tasks on both ends.
    pub fn with_tasks(
        scenario: &LinkScenario,
        policy: Policy,
        servers: u32,
        opts: &BenchOptions,
        extra: Vec<Arc<dyn ErasedTask>>,
    ) -> anyhow::Result<Self> {
        let mut tasks = catalog();
        tasks.extend(extra);
        scenario.validate().map_err(anyhow::Error::msg)?;
        if servers == 0 {
            bail!("server count must be at least 1");
        }
        let clock: Arc<dyn Clock> = match opts.clock {
            ClockMode::Deterministic => Arc::new(VirtualClock::new()),
            ClockMode::Wall => Arc::new(WallClock::new()),
        };
        let mut server = None;
        let mut netem = None;
        let connector: Option<Arc<dyn Connector>> = if scenario.has_transport() {
            let inner: Arc<dyn Connector> = match &opts.connect {
                Some(addr) => Arc::new(TcpConnector::new(addr.clone(), scenario.info())),
                None => {
                    let pool = VmPool::new(&opts.pool, clock.clone())?;
                    let s = AppServer::new(tasks.clone(), Arc::new(pool), clock.clone(), ServerConfig::default())?;
                    server = Some(s.clone());
                    Arc::new(InProcConnector::new(s))
                }
            };
            let n = Arc::new(NetemConnector::new(inner, scenario.clone(), clock.clone()));
            netem = Some(n.clone());
            Some(n)
        } else {
            None
        };
        let config = RuntimeConfig {
            app: "bench".into(),
            policy,
            alpha: opts.alpha,
            good_rtt_threshold_ms: opts.good_rtt_threshold_ms,
            local_slowdown: opts.local_slowdown,
            clock: opts.clock,
            target: RemoteTarget {
                config: (servers > 1).then_some(VmConfigName::Main),
                n_vms: servers,
            },
            device: opts.device,
            coeffs: opts.coeffs,
            ..RuntimeConfig::default()
        };
        let runtime = Runtime::with_clock(config, connector, clock.clone())?;
        for task in tasks {
            runtime.register_erased(task);
        }
        if scenario.has_transport() {
            runtime
                .connect()
                .with_context(|| format!("connecting over {}", scenario.name))?;
        }
        Ok(Self {
            scenario: scenario.clone(),
            clock,
            server,
            netem,
            runtime,
        })
    }

    pub fn controller(&self) -> ExecutionController {
        self.runtime.controller()
    }

    /// Lets `ms` pass between calls on both sides.
    pub fn pause(&self, ms: f64) {
        self.runtime.idle(ms);
        if let Some(s) = &self.server {
            s.pool().tick();
        }
    }
}

impl Drop for BenchEnv {
    fn drop(&mut self) {
        self.runtime.shutdown();
    }
}

/// Averages over the runs of one matrix cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub workload: String,
    pub input: u64,
    pub scenario: String,
    pub policy: String,
    pub servers: u32,
    pub runs: usize,
    pub wall_time_ms: f64,
    pub energy_mj: f64,
    pub energy_cpu_mj: f64,
    pub energy_screen_mj: f64,
    pub energy_wifi_mj: f64,
    pub energy_cellular_mj: f64,
    pub tx_bytes: f64,
    pub rx_bytes: f64,
    pub overhead_ms: f64,
    pub remote_runs: usize,
    pub fallbacks: usize,
    /// Where each run went: L local, R remote, F fell back.
    pub decisions: String,
    pub result: String,
    pub oracle_ok: bool,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub workload: Workload,
    pub input: u64,
    pub policy: Policy,
    pub servers: u32,
}

/// Runs `opts.runs` calls of one cell in a fresh environment. Failures are
/// recorded in the report rather than returned.
pub fn run_cell(
    cell: Cell,
    scenario: &LinkScenario,
    opts: &BenchOptions,
    fixtures: Option<&Fixtures>,
) -> BenchReport {
    let mut report = BenchReport {
        workload: cell.workload.name().into(),
        input: cell.input,
        scenario: scenario.name.clone(),
        policy: cell.policy.as_str().into(),
        servers: cell.servers,
        runs: 0,
        wall_time_ms: 0.0,
        energy_mj: 0.0,
        energy_cpu_mj: 0.0,
        energy_screen_mj: 0.0,
        energy_wifi_mj: 0.0,
        energy_cellular_mj: 0.0,
        tx_bytes: 0.0,
        rx_bytes: 0.0,
        overhead_ms: 0.0,
        remote_runs: 0,
        fallbacks: 0,
        decisions: String::new(),
        result: String::new(),
        oracle_ok: false,
        error: String::new(),
    };
    let oracle = match cell.workload.oracle(cell.input, fixtures) {
        Ok(o) => o,
        Err(e) => {
            report.error = format!("oracle: {e}");
            return report;
        }
    };
    let env = match BenchEnv::new(scenario, cell.policy, cell.servers, opts) {
        Ok(env) => env,
        Err(e) => {
            report.error = format!("{e:#}");
            return report;
        }
    };
    let ctl = env.controller();
    let mut all_ok = true;
    let mut reports: Vec<ExecReport> = Vec::with_capacity(opts.runs);
    for i in 0..opts.runs {
        if i > 0 {
            env.pause(opts.gap_ms);
        }
        match cell.workload.execute(&ctl, cell.input, fixtures, Placement::Auto) {
            Ok((digest, r)) => {
                all_ok &= cell.workload.agrees(&digest, &oracle);
                report.result = digest;
                report.decisions.push(match (r.fell_back, r.location.is_remote()) {
                    (true, _) => 'F',
                    (false, true) => 'R',
                    (false, false) => 'L',
                });
                reports.push(r);
            }
            Err(e) => {
                report.error = e.to_string();
                all_ok = false;
                break;
            }
        }
    }
    let n = reports.len().max(1) as f64;
    let mean = |f: fn(&ExecReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    report.runs = reports.len();
    report.wall_time_ms = mean(|r| r.wall_time_ms);
    report.energy_mj = mean(|r| r.energy.total);
    report.energy_cpu_mj = mean(|r| r.energy.cpu);
    report.energy_screen_mj = mean(|r| r.energy.screen);
    report.energy_wifi_mj = mean(|r| r.energy.wifi);
    report.energy_cellular_mj = mean(|r| r.energy.cellular);
    report.tx_bytes = mean(|r| r.tx_bytes as f64);
    report.rx_bytes = mean(|r| r.rx_bytes as f64);
    report.overhead_ms = mean(|r| r.overhead_ms);
    report.remote_runs = reports.iter().filter(|r| r.location.is_remote()).count();
    report.fallbacks = reports.iter().filter(|r| r.fell_back).count();
    report.oracle_ok = all_ok && !reports.is_empty();
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixSpec {
    /// Workloads with their inputs.
    pub workloads: Vec<(Workload, u64)>,
    pub scenarios: Vec<String>,
    pub policies: Vec<Policy>,
    /// Applied to splittable workloads; the rest run with one server.
    /// Cells that can never leave the phone (no link, or policy `none`)
    /// only run with one server.
    pub servers: Vec<u32>,
}

impl Default for MatrixSpec {
    fn default() -> Self {
        Self {
            workloads: Workload::ALL.iter().map(|w| (*w, w.default_input())).collect(),
            scenarios: offload_core::netem::PRESETS.iter().map(|s| s.to_string()).collect(),
            policies: Policy::ALL.to_vec(),
            servers: vec![1, 2, 4, 8],
        }
    }
}

impl MatrixSpec {
    pub fn load(path: impl AsRef<Path>) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(toml::from_str(&text)?)
    }
}

/// Every cell of the matrix, in a fixed order, one after another.
pub fn run_matrix(
    spec: &MatrixSpec,
    opts: &BenchOptions,
    fixtures: Option<&Fixtures>,
) -> anyhow::Result<Vec<BenchReport>> {
    let mut out = Vec::new();
    for &(workload, input) in &spec.workloads {
        for name in &spec.scenarios {
            let scenario = opts.scenario(name)?;
            for &policy in &spec.policies {
                let local_only =
                    scenario.link_type == LinkType::None || policy == Policy::None;
                let servers: &[u32] = if workload.splittable() && !local_only {
                    &spec.servers
                } else {
                    &[1]
                };
                for &n in servers {
                    let cell = Cell {
                        workload,
                        input,
                        policy,
                        servers: n,
                    };
                    let report = run_cell(cell, &scenario, opts, fixtures);
                    tracing::info!(
                        workload = %workload,
                        scenario = %scenario.name,
                        policy = policy.as_str(),
                        servers = n,
                        wall_ms = report.wall_time_ms,
                        ok = report.oracle_ok,
                        "cell done"
                    );
                    out.push(report);
                }
            }
        }
    }
    Ok(out)
}

pub fn write_csv(reports: &[BenchReport], out: impl Write) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl(reports: &[BenchReport], mut out: impl Write) -> anyhow::Result<()> {
    for r in reports {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Whitespace-separated columns for gnuplot bar charts.
pub fn write_plot_data(reports: &[BenchReport], mut out: impl Write) -> anyhow::Result<()> {
    writeln!(
        out,
        "# index workload scenario policy servers wall_time_ms energy_mj cpu_mj screen_mj wifi_mj cellular_mj"
    )?;
    for (i, r) in reports.iter().enumerate() {
        writeln!(
            out,
            "{i} {} {} {} {} {} {} {} {} {} {}",
            r.workload,
            r.scenario,
            r.policy,
            r.servers,
            r.wall_time_ms,
            r.energy_mj,
            r.energy_cpu_mj,
            r.energy_screen_mj,
            r.energy_wifi_mj,
            r.energy_cellular_mj
        )?;
    }
    Ok(())
}

/// Local and remote measurements at one input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BivPoint {
    pub input: u64,
    pub local_ms: f64,
    pub remote_ms: f64,
    pub local_mj: f64,
    pub remote_mj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BivResult {
    pub scenario: String,
    pub biv: Option<u64>,
    pub points: Vec<BivPoint>,
}

/// Smallest input in `range` for which an offloaded run beats a local one
/// under `policy`. Both runs are forced; their results must agree.
pub fn find_biv<T: TaskBundle + Clone>(
    task: &T,
    make_input: impl Fn(u64) -> T::Input,
    scenario: &LinkScenario,
    policy: Policy,
    range: std::ops::RangeInclusive<u64>,
    opts: &BenchOptions,
) -> anyhow::Result<BivResult> {
    if range.is_empty() {
        bail!("empty input range");
    }
    if policy == Policy::None {
        bail!("policy none never offloads");
    }
    if !scenario.has_transport() {
        return Ok(BivResult {
            scenario: scenario.name.clone(),
            biv: None,
            points: Vec::new(),
        });
    }
    let known = catalog().iter().any(|t| t.key().id == task.id());
    let extra = if known { Vec::new() } else { vec![erase(task.clone())] };
    let env = BenchEnv::with_tasks(scenario, policy, 1, opts, extra)?;
    let ctl = env.controller();
    let mut points = Vec::new();
    for n in range {
        let input = make_input(n);
        let run = |placement| -> Result<(T::Output, ExecReport), TaskError> {
            ctl.execute_with(task, &mut T::State::default(), &input, placement)
        };
        let (local_out, local) = run(Placement::Local)?;
        let (remote_out, remote) = run(Placement::Remote(RemoteTarget::default()))?;
        if remote.fell_back || !remote.location.is_remote() {
            bail!("remote run at input {n} did not reach the server: {}", remote.reason);
        }
        if local_out != remote_out {
            bail!("local and remote results differ at input {n}");
        }
        let p = BivPoint {
            input: n,
            local_ms: local.wall_time_ms,
            remote_ms: remote.wall_time_ms,
            local_mj: local.energy.total,
            remote_mj: remote.energy.total,
        };
        points.push(p);
        let faster = p.remote_ms < p.local_ms;
        let cheaper = p.remote_mj < p.local_mj;
        let wins = match policy {
            Policy::ExecutionTime => faster,
            Policy::Energy => cheaper,
            Policy::ExecutionTimeAndEnergy => faster && cheaper,
            Policy::None => false,
        };
        if wins {
            return Ok(BivResult {
                scenario: scenario.name.clone(),
                biv: Some(n),
                points,
            });
        }
    }
    Ok(BivResult {
        scenario: scenario.name.clone(),
        biv: None,
        points,
    })
}
