use offload_bench::harness::*;
use offload_bench::workloads::{call_count, Fibonacci, Workload};
use offload_core::controller::{Placement, Policy, RemoteTarget};
use offload_core::netem::LinkScenario;
use offload_core::profiling::LinkType;
use offload_core::task::{TaskBundle, TaskError};
use offload_core::vmpool::VmConfigName;

fn quick_opts() -> BenchOptions {
    BenchOptions {
        runs: 3,
        gap_ms: 1_000.0,
        ..BenchOptions::default()
    }
}

/// A fast link whose only cost is a 2 ms round trip.
fn near_free_link() -> LinkScenario {
    LinkScenario {
        name: "near-free".into(),
        link_type: LinkType::WifiLocal,
        rtt_ms: 2.0,
        bw_up: 1e12,
        bw_down: 1e12,
        jitter_ms: 0.0,
        fail_at: None,
    }
}

#[derive(Debug, Clone, Copy)]
struct Free;

impl TaskBundle for Free {
    type State = ();
    type Input = u64;
    type Output = u64;

    fn id(&self) -> &str {
        "free"
    }

    fn run(&self, _: &mut (), x: &u64) -> Result<u64, TaskError> {
        Ok(*x)
    }

    fn work_units(&self, x: &u64) -> u64 {
        *x
    }

    fn unit_cost_ms(&self) -> f64 {
        0.0
    }

    fn input_size_proxy(&self, x: &u64) -> f64 {
        *x as f64
    }
}

#[test]
fn biv_matches_closed_form() {
    // With slowdown 2 the offload saves calls·1e-4 ms and costs the 2 ms
    // round trip, so it first wins once the call count passes 20000.
    let opts = BenchOptions {
        local_slowdown: 2.0,
        ..quick_opts()
    };
    let want = (1..=30).find(|&n| call_count(n) > 20_000).unwrap() as u64;
    assert_eq!(want, 20);
    let r = find_biv(&Fibonacci, |n| n as u32, &near_free_link(), Policy::ExecutionTime, 1..=30, &opts).unwrap();
    assert_eq!(r.biv, Some(want));
    let last = r.points.last().unwrap();
    assert!(last.remote_ms < last.local_ms);
    let before = &r.points[r.points.len() - 2];
    assert!(before.remote_ms >= before.local_ms);
}

#[test]
fn biv_is_none_when_nothing_is_saved() {
    let r = find_biv(&Free, |n| n, &LinkScenario::wifi_local(), Policy::ExecutionTime, 1..=5, &quick_opts()).unwrap();
    assert_eq!(r.biv, None);
    assert_eq!(r.points.len(), 5);
}

#[test]
fn biv_rejects_bad_requests() {
    let opts = quick_opts();
    let wifi = LinkScenario::wifi_local();
    assert!(find_biv(&Fibonacci, |n| n as u32, &wifi, Policy::None, 1..=3, &opts).is_err());
    #[allow(clippy::reversed_empty_ranges)]
    let empty = 3..=1;
    assert!(find_biv(&Fibonacci, |n| n as u32, &wifi, Policy::Energy, empty, &opts).is_err());
    let r = find_biv(&Fibonacci, |n| n as u32, &LinkScenario::phone_only(), Policy::Energy, 1..=3, &opts).unwrap();
    assert_eq!(r.biv, None);
    assert!(r.points.is_empty());
}

#[test]
fn fib_biv_grows_with_latency() {
    let opts = quick_opts();
    let biv = |s: LinkScenario| {
        find_biv(&Fibonacci, |n| n as u32, &s, Policy::ExecutionTime, 1..=30, &opts)
            .unwrap()
            .biv
            .unwrap()
    };
    let local = biv(LinkScenario::wifi_local());
    let good = biv(LinkScenario::wifi_internet_good());
    let cell = biv(LinkScenario::three_g());
    assert!(local <= good && good <= cell, "{local} {good} {cell}");
}

#[test]
fn parallel_nqueens_server_times() {
    let opts = quick_opts();
    let mut times = Vec::new();
    for n in [1, 2, 4, 8] {
        let env = BenchEnv::new(&LinkScenario::wifi_local(), Policy::ExecutionTime, n, &opts).unwrap();
        let target = RemoteTarget {
            config: Some(VmConfigName::Main),
            n_vms: n,
        };
        let (digest, r) = Workload::NQueens
            .execute(&env.controller(), 8, None, Placement::Remote(target))
            .unwrap();
        assert_eq!(digest, "92");
        assert!(r.location.is_remote());
        times.push(r.server_time_ms);
    }
    // 8^8 boards at 2e-3 ms, split evenly; extra clones resume together.
    let compute = 8f64.powi(8) * 2e-3;
    let want = [
        compute,
        compute / 2.0 + 300.0,
        compute / 4.0 + 300.0 * (1.0 + 3.44 * 2.0),
        compute / 8.0 + 300.0 * (1.0 + 3.44 * 6.0),
    ];
    for (got, want) in times.iter().zip(want) {
        assert!((got - want).abs() < 1e-6, "{times:?}");
    }
}

#[test]
fn small_matrix() {
    let spec = MatrixSpec {
        workloads: vec![(Workload::Fibonacci, 10), (Workload::NQueens, 5)],
        scenarios: vec!["phone-only".into(), "wifi-local".into()],
        policies: vec![Policy::None, Policy::ExecutionTime],
        servers: vec![1, 2],
    };
    let opts = quick_opts();
    let reports = run_matrix(&spec, &opts, None).unwrap();
    // Only the offloading nqueens cell is repeated per server count.
    assert_eq!(reports.len(), 4 + 5);
    for r in &reports {
        assert!(r.oracle_ok, "{r:?}");
        assert_eq!(r.runs, 3);
        if r.scenario == "phone-only" || r.policy == "none" {
            assert_eq!(r.decisions, "LLL");
            assert_eq!((r.tx_bytes, r.rx_bytes), (0.0, 0.0));
        }
        if r.scenario == "phone-only" {
            assert_eq!(r.energy_wifi_mj + r.energy_cellular_mj, 0.0);
        }
    }
    let remote = reports
        .iter()
        .find(|r| r.workload == "nqueens" && r.scenario == "wifi-local" && r.servers == 2)
        .unwrap();
    assert_eq!(remote.decisions, "RRR");
    assert!(remote.tx_bytes > 0.0 && remote.rx_bytes > 0.0);

    let csv = |reports: &[BenchReport]| {
        let mut buf = Vec::new();
        write_csv(reports, &mut buf).unwrap();
        buf
    };
    let again = run_matrix(&spec, &opts, None).unwrap();
    assert_eq!(csv(&reports), csv(&again));

    let mut jsonl = Vec::new();
    write_jsonl(&reports, &mut jsonl).unwrap();
    assert_eq!(jsonl.iter().filter(|&&b| b == b'\n').count(), reports.len());
    let mut plot = Vec::new();
    write_plot_data(&reports, &mut plot).unwrap();
    assert_eq!(String::from_utf8(plot).unwrap().lines().count(), reports.len() + 1);
}

#[test]
fn failed_cell_is_recorded() {
    let cell = Cell {
        workload: Workload::VirusScan,
        input: 0,
        policy: Policy::ExecutionTime,
        servers: 1,
    };
    let r = run_cell(cell, &LinkScenario::wifi_local(), &quick_opts(), None);
    assert!(!r.oracle_ok);
    assert!(!r.error.is_empty());
}

#[test]
fn matrix_spec_from_toml() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.toml");
    std::fs::write(
        &path,
        "workloads = [[\"fibonacci\", 12]]\nscenarios = [\"3g\"]\npolicies = [\"energy\"]\n",
    )
    .unwrap();
    let spec = MatrixSpec::load(&path).unwrap();
    assert_eq!(spec.workloads, [(Workload::Fibonacci, 12)]);
    assert_eq!(spec.policies, [Policy::Energy]);
    assert_eq!(spec.servers, [1, 2, 4, 8]);
    std::fs::write(&path, "bogus = 1\n").unwrap();
    assert!(MatrixSpec::load(&path).is_err());
}
