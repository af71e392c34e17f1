//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use offload_bench::harness::{find_biv, BenchEnv, BenchOptions};
use offload_bench::oracles;
use offload_bench::workloads::{catalog, Fibonacci, ImageCombine, ImagePair, Workload, IMAGE_WIDTH};
use offload_core::appserver::{AppServer, InProcConnector, ServerConfig};
use offload_core::clock::{Clock, ClockMode, VirtualClock};
use offload_core::controller::{LinkStatus, Placement, Policy, RemoteTarget, Runtime, RuntimeConfig};
use offload_core::energy::{
    cell_occupancy, instantaneous_power, integrate_energy, CellFsm, CellFsmConfig, CellState, CpuFreq,
    DeviceState, EnergyBreakdown, PowerCoefficients, RrcState, WifiState,
};
use offload_core::netem::{FailTrigger, LinkScenario, NetemConnector};
use offload_core::profiling::{input_bucket, ExecutionRecord, HistoryLog, Location, ProgramProfile};
use offload_core::protocol::{
    decode, encode, Body, ErrorCode, ExecutePayload, Message, MessageType, PowerRequest, RemoteProfile,
    ResultPayload,
};
use offload_core::task::{TaskBundle, TaskKey};
use offload_core::transport::{Connection, Connector, FrameSink, Transit, TransportError};
use offload_core::vmpool::{config_table, simulate_memory_guard, MemoryLimit, MemoryVerdict, VmConfigName, VmPool};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Sent = Arc<Mutex<Vec<u8>>>;

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if !($cond) {
            return Err(format!($($fmt)+));
        }
    };
}

fn rel_eq(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs())
}

fn opts() -> BenchOptions {
    BenchOptions::default()
}

fn energy_point_values() -> Outcome {
    let c = PowerCoefficients::default();
    let only = |wifi, cell| DeviceState {
        wifi,
        cell,
        ..DeviceState::default()
    };
    let cases = [
        ("3g idle", only(WifiState::Off, CellState::Idle), 10.0),
        ("3g fach", only(WifiState::Off, CellState::Fach), 401.0),
        ("3g dch", only(WifiState::Off, CellState::Dch), 570.0),
        ("wifi low", only(WifiState::LowPower, CellState::Off), 20.0),
        ("wifi high", only(WifiState::HighPower, CellState::Off), 710.0),
        ("transmit from low", only(WifiState::TransmitFromLow, CellState::Off), 1000.0),
        ("transmit from high", only(WifiState::TransmitFromHigh, CellState::Off), 1000.0),
    ];
    for (name, state, want) in cases {
        let got = instantaneous_power(&state, &c).total;
        check!(got == want, "{name}: {got} mW, want {want}");
    }
    let composite = DeviceState {
        cpu_util: 100.0,
        cpu_freq: CpuFreq::High385MHz,
        cpu_on: true,
        brightness: 255,
        wifi: WifiState::LowPower,
        cell: CellState::Off,
    };
    let p = instantaneous_power(&composite, &c).total;
    let hand = 4.32 * 100.0 + 121.46 + 2.40 * 255.0 + 20.0;
    check!(rel_eq(p, 1185.46, 1e-9) && rel_eq(p, hand, 1e-9), "composite {p} mW");
    let e = integrate_energy(&[(composite, 2.0)], &c).map_err(|e| e.to_string())?.total;
    check!(rel_eq(e, 2370.92, 1e-9), "2 s composite {e} mJ");
    Ok(format!("composite {p} mW, 2 s = {e} mJ"))
}

fn rrc_transitions() -> Outcome {
    let cfg = CellFsmConfig::default();
    let mut cases = 0;
    for state in [RrcState::Idle, RrcState::Fach, RrcState::Dch] {
        for (up_q, down_q) in [(0, 0), (100, 0), (0, 100), (151, 119)] {
            for tx in [0, 1, 50, 51, 52, 150, 151, 152] {
                for rx in [0, 1, 18, 19, 20, 118, 119, 120] {
                    let fsm = CellFsm {
                        uplink_queue: up_q,
                        downlink_queue: down_q,
                        ..CellFsm::in_state(state, cfg)
                    };
                    let (next, _) = cell_occupancy(&fsm, tx, rx, 0.1);
                    let want = if tx + rx == 0 {
                        state
                    } else if up_q + tx > 151 || down_q + rx > 119 {
                        RrcState::Dch
                    } else if state == RrcState::Idle {
                        RrcState::Fach
                    } else {
                        state
                    };
                    check!(
                        next.state == want,
                        "{state:?} queued ({up_q},{down_q}) +({tx},{rx}) -> {:?}, want {want:?}",
                        next.state
                    );
                    check!((next.uplink_queue, next.downlink_queue) == (0, 0), "queues not drained");
                    cases += 1;
                }
            }
        }
    }
    let timeouts = [
        (RrcState::Dch, 4.999, RrcState::Dch),
        (RrcState::Dch, 5.0, RrcState::Fach),
        (RrcState::Dch, 16.999, RrcState::Fach),
        (RrcState::Dch, 17.0, RrcState::Idle),
        (RrcState::Fach, 11.999, RrcState::Fach),
        (RrcState::Fach, 12.0, RrcState::Idle),
        (RrcState::Idle, 60.0, RrcState::Idle),
    ];
    for (from, dt, want) in timeouts {
        let (next, _) = cell_occupancy(&CellFsm::in_state(from, cfg), 0, 0, dt);
        check!(next.state == want, "{from:?} silent {dt} s -> {:?}, want {want:?}", next.state);
        cases += 1;
    }
    // Timers accumulate across steps.
    let mut fsm = CellFsm::in_state(RrcState::Dch, cfg);
    for _ in 0..49 {
        fsm = cell_occupancy(&fsm, 0, 0, 0.1).0;
    }
    check!(fsm.state == RrcState::Dch, "Dch left after 4.9 s of silence");
    fsm = cell_occupancy(&fsm, 0, 0, 0.1 + 1e-9).0;
    check!(fsm.state == RrcState::Fach, "Dch held past 5 s of silence");
    Ok(format!("{cases} cases"))
}

fn correctness_oracle() -> Outcome {
    let cases = [
        (Workload::NQueens, 8, oracles::nqueens(8).to_string()),
        (Workload::NQueens, 6, oracles::nqueens(6).to_string()),
        (Workload::Fibonacci, 10, oracles::fibonacci(10).to_string()),
    ];
    check!(cases[0].2 == "92" && cases[1].2 == "4" && cases[2].2 == "55", "oracles disagree with known values");
    let opts = opts();
    let mut runs = 0;
    let local_env = BenchEnv::new(&LinkScenario::phone_only(), Policy::ExecutionTime, 1, &opts).map_err(|e| e.to_string())?;
    for (w, n, want) in &cases {
        let (got, _) = w.execute(&local_env.controller(), *n, None, Placement::Local).map_err(|e| e.to_string())?;
        check!(&got == want, "{w}({n}) local = {got}");
        runs += 1;
    }
    let scenarios = [
        LinkScenario::wifi_local(),
        LinkScenario::wifi_internet_good(),
        LinkScenario::wifi_internet_hotspot(),
        LinkScenario::three_g(),
    ];
    for scenario in &scenarios {
        for servers in [1, 2, 4, 8] {
            let env = BenchEnv::new(scenario, Policy::ExecutionTime, servers, &opts).map_err(|e| e.to_string())?;
            let target = RemoteTarget {
                config: (servers > 1).then_some(VmConfigName::Main),
                n_vms: servers,
            };
            for (w, n, want) in &cases {
                let (got, r) = w
                    .execute(&env.controller(), *n, None, Placement::Remote(target))
                    .map_err(|e| e.to_string())?;
                check!(
                    r.location.is_remote() && !r.fell_back,
                    "{w}({n}) on {} x{servers} did not run remotely",
                    scenario.name
                );
                check!(&got == want, "{w}({n}) on {} x{servers} = {got}", scenario.name);
                runs += 1;
            }
        }
    }
    Ok(format!("{runs} runs agree"))
}

fn biv_ordering() -> Outcome {
    let opts = opts();
    let mut bivs = Vec::new();
    for s in [
        LinkScenario::wifi_local(),
        LinkScenario::wifi_internet_good(),
        LinkScenario::wifi_internet_hotspot(),
        LinkScenario::three_g(),
    ] {
        let r = find_biv(&Fibonacci, |n| n as u32, &s, Policy::ExecutionTime, 1..=32, &opts).map_err(|e| e.to_string())?;
        bivs.push((s.name, r.biv));
    }
    let text = bivs
        .iter()
        .map(|(s, b)| format!("{s}={}", b.map_or("none".into(), |b| b.to_string())))
        .collect::<Vec<_>>()
        .join(" ");
    let get = |name: &str| bivs.iter().find(|(s, _)| s == name).and_then(|(_, b)| *b);
    let (Some(local), Some(good), Some(cell)) = (get("wifi-local"), get("wifi-internet-good"), get("3g")) else {
        return Err(format!("missing BIV: {text}"));
    };
    check!(local <= good && good <= cell, "ordering violated: {text}");
    Ok(text)
}

fn oom_escalation() -> Outcome {
    let main = config_table()[1];
    check!(main.name == VmConfigName::Main && main.heap_mb == 100, "unexpected main config {main:?}");
    let pair = ImagePair::square(IMAGE_WIDTH, 6144);
    let peak = ImageCombine.peak_memory_mb(&pair);
    check!(peak == 120.0, "peak {peak} MB");
    check!(
        simulate_memory_guard(peak, &main, MemoryLimit::Heap) == MemoryVerdict::Exhausted,
        "guard lets {peak} MB through on main"
    );
    let env = BenchEnv::new(&LinkScenario::wifi_local(), Policy::ExecutionTime, 1, &opts()).map_err(|e| e.to_string())?;
    let (digest, r) = Workload::ImageCombine
        .execute(&env.controller(), 6144, None, Placement::Remote(RemoteTarget::default()))
        .map_err(|e| e.to_string())?;
    check!(r.location.is_remote() && !r.fell_back, "did not complete remotely: {}", r.reason);
    check!(r.escalations == 1, "{} escalations", r.escalations);
    check!(r.vm_config.as_deref() == Some("large"), "ran on {:?}", r.vm_config);
    check!(r.resume_ms == 300.0, "resume {} ms", r.resume_ms);
    check!(r.overhead_ms >= 300.0, "overhead {} ms", r.overhead_ms);
    check!(digest == oracles::image_checksum(&pair), "checksum mismatch");
    Ok(format!("1 escalation to large, resume {} ms, overhead {:.1} ms", r.resume_ms, r.overhead_ms))
}

fn wait_until(mut cond: impl FnMut() -> bool, timeout: Duration) -> bool {
    let t0 = Instant::now();
    while t0.elapsed() < timeout {
        if cond() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    cond()
}

fn fallback_semantics() -> Outcome {
    let env = BenchEnv::new(&LinkScenario::wifi_local(), Policy::ExecutionTime, 1, &opts()).map_err(|e| e.to_string())?;
    let ctl = env.controller();
    let control = env.netem.as_ref().ok_or("no emulated link")?.control();
    let want = oracles::fibonacci(22);
    let (_, warm) = ctl.execute_with(&Fibonacci, &mut (), &22, Placement::Auto).map_err(|e| e.to_string())?;
    check!(warm.location.is_remote(), "warm-up call ran locally");
    let before = env.runtime.history_snapshot();
    // The request leaves, then the link dies before the reply.
    control.arm(FailTrigger::AfterFrames(1));
    let (got, r) = ctl
        .execute_with(&Fibonacci, &mut (), &22, Placement::Remote(RemoteTarget::default()))
        .map_err(|e| e.to_string())?;
    check!(got == want, "fallback returned {got}, want {want}");
    check!(r.fell_back && !r.location.is_remote(), "call did not fall back");
    check!(env.runtime.history_snapshot() == before, "history changed by a failed call");
    check!(!control.is_up(), "link still up after injected failure");
    control.set_link_up(true);
    check!(
        wait_until(|| env.runtime.status() == LinkStatus::Connected, Duration::from_secs(8)),
        "no reconnect after the link came back ({:?})",
        env.runtime.status()
    );
    let (got, r) = ctl.execute_with(&Fibonacci, &mut (), &22, Placement::Auto).map_err(|e| e.to_string())?;
    check!(got == want && r.location.is_remote(), "call after reconnect did not offload");
    Ok(format!("reconnected after {} attempt(s)", env.runtime.reconnect_attempts()))
}

fn parallel_scaling() -> Outcome {
    let opts = opts();
    let mut times = Vec::new();
    let mut seven_way = 0.0;
    for n in [1, 2, 4, 8] {
        let env = BenchEnv::new(&LinkScenario::wifi_local(), Policy::ExecutionTime, n, &opts).map_err(|e| e.to_string())?;
        let target = RemoteTarget {
            config: Some(VmConfigName::Main),
            n_vms: n,
        };
        let (digest, r) = Workload::NQueens
            .execute(&env.controller(), 8, None, Placement::Remote(target))
            .map_err(|e| e.to_string())?;
        check!(digest == "92", "nqueens(8) x{n} = {digest}");
        check!(r.n_vms == n, "ran on {} servers, asked for {n}", r.n_vms);
        times.push(r.server_time_ms);
        if n == 8 {
            seven_way = r.resume_ms;
        }
    }
    let [t1, t2, t4, t8] = times[..] else { unreachable!() };
    check!(t1 > t2 && t2 > t4, "not strictly decreasing: {times:?}");
    check!(t4 - t8 < t1 - t2, "4->8 gain {} not below 1->2 gain {}", t4 - t8, t1 - t2);
    check!((6000.0..=7000.0).contains(&seven_way), "7-way resume {seven_way} ms");
    Ok(format!(
        "makespans {:.0}/{:.0}/{:.0}/{:.0} ms, 7-way resume {:.0} ms",
        t1, t2, t4, t8, seven_way
    ))
}

/// Records the type byte of every frame sent.
struct Spy {
    inner: Arc<dyn Connector>,
    sent: Sent,
}

struct SpySink {
    inner: Box<dyn FrameSink>,
    sent: Sent,
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

fn spied_runtime(config: RuntimeConfig) -> Result<(Arc<Runtime>, Sent), String> {
    let clock = Arc::new(VirtualClock::new());
    let dyn_clock: Arc<dyn Clock> = clock.clone();
    let pool = Arc::new(VmPool::with_defaults(dyn_clock.clone()));
    let server = AppServer::new(catalog(), pool, dyn_clock.clone(), ServerConfig::default()).map_err(|e| e.to_string())?;
    let sent = Arc::new(Mutex::new(Vec::new()));
    let spy = Arc::new(Spy {
        inner: Arc::new(InProcConnector::new(server)),
        sent: sent.clone(),
    });
    let net = Arc::new(NetemConnector::new(spy, LinkScenario::wifi_local(), dyn_clock.clone()));
    let rt = Runtime::with_clock(config, Some(net), dyn_clock).map_err(|e| e.to_string())?;
    for t in catalog() {
        rt.register_erased(t);
    }
    rt.connect().map_err(|e| e.to_string())?;
    Ok((rt, sent))
}

fn policy_semantics(dir: &Path) -> Outcome {
    let base = RuntimeConfig {
        clock: ClockMode::Deterministic,
        ..RuntimeConfig::default()
    };
    let (rt, sent) = spied_runtime(RuntimeConfig {
        policy: Policy::None,
        ..base.clone()
    })?;
    let ctl = rt.controller();
    for n in [5u32, 20, 25, 30] {
        let (_, r) = ctl.execute_with(&Fibonacci, &mut (), &n, Placement::Auto).map_err(|e| e.to_string())?;
        check!(!r.location.is_remote(), "policy none offloaded fib({n})");
    }
    let count = |t: MessageType| sent.lock().unwrap().iter().filter(|&&b| b == t as u8).count();
    check!(count(MessageType::Ping) > 0, "spy saw no traffic at all");
    check!(count(MessageType::Execute) == 0, "{} Execute frames under policy none", count(MessageType::Execute));
    rt.shutdown();

    // Remote is three times faster but costs more energy than the local run.
    let n = 26u32;
    let bucket = input_bucket(Fibonacci.input_size_proxy(&n));
    let record = |location, wall_time_ms, energy_mj| ExecutionRecord {
        task_id: "fibonacci".into(),
        input_bucket: bucket,
        location,
        wall_time_ms,
        energy: EnergyBreakdown::new(energy_mj, 0.0, 0.0, 0.0),
        tx_bytes: 0,
        rx_bytes: 0,
        overhead_ms: 0.0,
        network_ms: 0.0,
        timestamp_ms: 0.0,
    };
    let local = record(Location::Local, 1000.0, 1.0);
    let remote = record(RemoteTarget::default().location(), 300.0, 1.0);
    let mut verdicts = Vec::new();
    for policy in [Policy::ExecutionTimeAndEnergy, Policy::ExecutionTime] {
        let path = dir.join(format!("history-{}.jsonl", policy.as_str()));
        let mut log = HistoryLog::open(&path).map_err(|e| e.to_string())?;
        log.append(&local).map_err(|e| e.to_string())?;
        log.append(&remote).map_err(|e| e.to_string())?;
        drop(log);
        let (rt, _) = spied_runtime(RuntimeConfig {
            policy,
            history_path: Some(path),
            ..base.clone()
        })?;
        let (got, r) = rt
            .controller()
            .execute_with(&Fibonacci, &mut (), &n, Placement::Auto)
            .map_err(|e| e.to_string())?;
        check!(got == oracles::fibonacci(n), "fib({n}) = {got}");
        let est = r.estimates.ok_or("no estimates for a history-driven decision")?;
        verdicts.push((policy, r.location.is_remote(), est));
        rt.shutdown();
    }
    let (_, both_remote, est) = verdicts[0];
    check!(
        !both_remote,
        "time-and-energy offloaded though only time improves ({:.0} < {:.0} ms, {:.1} vs {:.1} mJ)",
        est.remote_time_ms,
        est.local_time_ms,
        est.remote_energy_mj,
        est.local_energy_mj
    );
    check!(est.remote_time_ms < est.local_time_ms, "constructed history does not improve time");
    check!(est.remote_energy_mj >= est.local_energy_mj, "constructed history improves energy too");
    check!(verdicts[1].1, "execution-time stayed local on the same history");
    Ok(format!(
        "0 Execute frames; time {:.0}->{:.0} ms, energy {:.1}->{:.1} mJ: time-and-energy Local, time Remote",
        est.local_time_ms, est.remote_time_ms, est.local_energy_mj, est.remote_energy_mj
    ))
}

fn matrix_determinism(dir: &Path) -> Outcome {
    let fixtures = dir.join("fixtures");
    let run = |out: &str| -> Result<Vec<u8>, String> {
        let status = Command::new(env!("CARGO_BIN_EXE_bench"))
            .arg("--fixtures")
            .arg(&fixtures)
            .args(["matrix", "--out"])
            .arg(dir.join(out))
            .status()
            .map_err(|e| e.to_string())?;
        check!(status.success(), "bench matrix exited with {status}");
        std::fs::read(dir.join(out).join("report.csv")).map_err(|e| e.to_string())
    };
    let a = run("matrix-a")?;
    let b = run("matrix-b")?;
    let rows = a.iter().filter(|&&c| c == b'\n').count().saturating_sub(1);
    check!(rows > 0, "empty report");
    check!(a == b, "reports differ");
    Ok(format!("{rows} cells, {} bytes, identical", a.len()))
}

fn random_string(rng: &mut ChaCha8Rng, max: usize) -> String {
    let len = rng.gen_range(0..=max);
    (0..len)
        .map(|_| match rng.gen_range(0..4) {
            0 => rng.gen_range('\u{80}'..='\u{10ffff}'),
            _ => rng.gen_range(' '..='~'),
        })
        .collect()
}

fn random_bytes(rng: &mut ChaCha8Rng, max: usize) -> Vec<u8> {
    let len = rng.gen_range(0..=max);
    (0..len).map(|_| rng.gen()).collect()
}

fn random_key(rng: &mut ChaCha8Rng) -> TaskKey {
    let id: String = (0..rng.gen_range(1..12)).map(|_| rng.gen_range('a'..='z')).collect();
    TaskKey::new(id, rng.gen_range(0..5))
}

fn random_body(rng: &mut ChaCha8Rng) -> Body {
    match rng.gen_range(0..9) {
        0 => Body::RegisterApp {
            app: random_string(rng, 20),
            manifest: (0..rng.gen_range(0..5)).map(|_| random_key(rng)).collect(),
        },
        1 => Body::NeedTask {
            unknown: (0..rng.gen_range(0..5)).map(|_| random_key(rng)).collect(),
        },
        2 => Body::TaskBundleTransfer {
            task: random_key(rng),
            fingerprint: random_bytes(rng, 32),
        },
        3 => Body::Ping,
        4 => Body::Pong,
        5 => Body::Execute(ExecutePayload {
            task: random_key(rng),
            input_bucket: rng.gen(),
            state: random_bytes(rng, 64),
            args: random_bytes(rng, 64),
            power_request: rng.gen_bool(0.5).then(|| PowerRequest {
                config: random_string(rng, 8),
                n_vms: rng.gen_range(1..17),
            }),
        }),
        6 => Body::Result(ResultPayload::Ok {
            result: random_bytes(rng, 64),
            state_delta: random_bytes(rng, 32),
            profile: RemoteProfile {
                program: ProgramProfile {
                    wall_time_ms: rng.gen_range(0.0..1e7),
                    thread_cpu_time_ms: rng.gen_range(0.0..1e7),
                    work_units: rng.gen(),
                    alloc_bytes: rng.gen(),
                    gc_or_reclaim_count: rng.gen(),
                },
                server_time_ms: rng.gen_range(0.0..1e7),
                overhead_ms: rng.gen_range(0.0..1e7),
                vm_config: random_string(rng, 8),
                n_vms: rng.gen_range(1..9),
                escalations: rng.gen_range(0..4),
                per_vm_overhead_ms: (0..rng.gen_range(0..8)).map(|_| rng.gen_range(0.0..1e4)).collect(),
            },
        }),
        7 => Body::Result(ResultPayload::RemoteException {
            kind: random_string(rng, 12),
            message: random_string(rng, 40),
        }),
        _ => Body::Error {
            code: match rng.gen_range(0..6) {
                0 => ErrorCode::TaskUnknown,
                1 => ErrorCode::BundleRejected,
                2 => ErrorCode::PoolExhausted,
                3 => ErrorCode::BadRequest,
                4 => ErrorCode::Internal,
                _ => ErrorCode::Other(rng.gen_range(6..u16::MAX)),
            },
            message: random_string(rng, 40),
        },
    }
}

fn mutate(rng: &mut ChaCha8Rng, mut frame: Vec<u8>) -> Vec<u8> {
    match rng.gen_range(0..6) {
        0 => {
            for _ in 0..rng.gen_range(1..=4) {
                let i = rng.gen_range(0..frame.len());
                frame[i] = rng.gen();
            }
        }
        1 => frame.truncate(rng.gen_range(0..frame.len())),
        2 => frame.extend((0..rng.gen_range(1..16)).map(|_| rng.gen::<u8>())),
        3 => {
            let len: u32 = rng.gen();
            frame[..4].copy_from_slice(&len.to_be_bytes());
        }
        4 => {
            // Plausible header, random body.
            let body = random_bytes(rng, 128);
            frame.truncate(14.min(frame.len()));
            frame.extend(body);
            let len = (frame.len() - 4) as u32;
            frame[..4].copy_from_slice(&len.to_be_bytes());
        }
        _ => frame = random_bytes(rng, 256),
    }
    frame
}

fn protocol_robustness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for i in 0..100_000u64 {
        let msg = Message::new(rng.gen(), random_body(&mut rng));
        let frame = encode(&msg);
        match decode(&frame) {
            Ok(back) if back == msg => {}
            Ok(back) => return Err(format!("message {i} changed: {msg:?} -> {back:?}")),
            Err(e) => return Err(format!("message {i} rejected: {e}")),
        }
    }
    let mut accepted = 0;
    let mut rejected = 0;
    let mut panics = 0;
    for _ in 0..100_000 {
        let frame = encode(&Message::new(rng.gen(), random_body(&mut rng)));
        let fuzzed = mutate(&mut rng, frame);
        match catch_unwind(|| decode(&fuzzed)) {
            Ok(Ok(_)) => accepted += 1,
            Ok(Err(_)) => rejected += 1,
            Err(_) => panics += 1,
        }
    }
    check!(panics == 0, "{panics} fuzzed frames panicked the decoder");
    Ok(format!("1e5 round trips; fuzz: {rejected} rejected, {accepted} decoded, 0 panics"))
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<(&str, Duration, Box<dyn Fn() -> Outcome>)> = vec![
        ("energy model point values", Duration::from_secs(1), Box::new(energy_point_values)),
        ("RRC state machine", Duration::from_secs(1), Box::new(rrc_transitions)),
        ("correctness oracles", Duration::from_secs(120), Box::new(correctness_oracle)),
        ("BIV ordering", Duration::from_secs(60), Box::new(biv_ordering)),
        ("OOM escalation", Duration::from_secs(10), Box::new(oom_escalation)),
        ("fallback semantics", Duration::from_secs(10), Box::new(fallback_semantics)),
        ("parallel scaling", Duration::from_secs(60), Box::new(parallel_scaling)),
        ("policy semantics", Duration::from_secs(10), Box::new(|| policy_semantics(dir.path()))),
        ("matrix determinism", Duration::from_secs(300), Box::new(|| matrix_determinism(dir.path()))),
        ("protocol robustness", Duration::from_secs(60), Box::new(protocol_robustness)),
    ];
    // Panics inside a criterion become failures; keep their messages short.
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, limit, run)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = t0.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > *limit => Err(format!("over time limit; {detail}")),
            other => other,
        };
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "{tag} [{:>2}] {name} ({:.2} s / {} s): {detail}",
            i + 1,
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
