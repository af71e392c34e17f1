//! Device, program and network profiles and the per-task execution history.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::energy::EnergyBreakdown;
use crate::transport::TransportError;

pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ProgramProfile {
    pub wall_time_ms: f64,
    pub thread_cpu_time_ms: f64,
    /// Task-reported progress counter, standing in for an instruction count.
    pub work_units: u64,
    pub alloc_bytes: u64,
    pub gc_or_reclaim_count: u64,
}

impl ProgramProfile {
    pub fn is_consistent(&self, cores: u32) -> bool {
        self.wall_time_ms >= 0.0
            && self.thread_cpu_time_ms >= 0.0
            && self.thread_cpu_time_ms <= self.wall_time_ms * f64::from(cores.max(1)) * (1.0 + 1e-9)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LinkType {
    #[default]
    None,
    WifiLocal,
    WifiInternet,
    #[serde(rename = "cellular_3g")]
    Cellular3G,
}

impl LinkType {
    pub fn is_wifi(self) -> bool {
        matches!(self, LinkType::WifiLocal | LinkType::WifiInternet)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NetworkProfile {
    /// EWMA of measured round trips.
    pub rtt_ms: f64,
    pub bw_up: f64,
    pub bw_down: f64,
    pub pkts_tx_per_s: f64,
    pub pkts_rx_per_s: f64,
    pub link_type: LinkType,
}

/// Something that can time one application-level ping.
pub trait RttProbe {
    fn ping_ms(&self) -> Result<f64, TransportError>;
}

/// Median of `k` pings; folds it into `profile.rtt_ms`.
pub fn measure_rtt(
    probe: &dyn RttProbe,
    k: usize,
    profile: &mut NetworkProfile,
    alpha: f64,
) -> Result<f64, TransportError> {
    assert!(k >= 1, "need at least one ping");
    let mut samples = (0..k).map(|_| probe.ping_ms()).collect::<Result<Vec<_>, _>>()?;
    let m = median(&mut samples);
    let prior = (profile.rtt_ms > 0.0).then_some(profile.rtt_ms);
    profile.rtt_ms = update_ewma(prior, m, alpha);
    Ok(m)
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        (samples[n / 2 - 1] + samples[n / 2]) / 2.0
    }
}

pub fn update_ewma(old: Option<f64>, sample: f64, alpha: f64) -> f64 {
    assert!((0.0..=1.0).contains(&alpha), "alpha must be within [0, 1]");
    match old {
        None => sample,
        Some(old) => alpha * sample + (1.0 - alpha) * old,
    }
}

/// `floor(log2(size_proxy + 1))`.
pub fn input_bucket(size_proxy: f64) -> u32 {
    assert!(size_proxy >= 0.0, "size proxy must be nonnegative");
    // Exact for integral proxies, where float log2 can land just below an
    // integer.
    if size_proxy < 1.8e19 && size_proxy.fract() == 0.0 {
        let v = size_proxy as u64 + 1;
        return 63 - v.leading_zeros();
    }
    (size_proxy + 1.0).log2().floor() as u32
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    Local,
    Remote { vm_config: String, n_vms: u32 },
}

impl Location {
    pub fn is_remote(&self) -> bool {
        matches!(self, Location::Remote { .. })
    }
}

/// One profiled run; the unit of decision history and of the history file.
///
/// Field order on disk: task_id, input_bucket, location, wall_time_ms,
/// energy, tx_bytes, rx_bytes, overhead_ms, network_ms, timestamp_ms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub task_id: String,
    pub input_bucket: u32,
    pub location: Location,
    pub wall_time_ms: f64,
    pub energy: EnergyBreakdown,
    pub tx_bytes: u64,
    pub rx_bytes: u64,
    /// Serialization, network transit and clone resume.
    pub overhead_ms: f64,
    /// Transit share of `overhead_ms`; zero for local runs.
    pub network_ms: f64,
    pub timestamp_ms: f64,
}

impl ExecutionRecord {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.wall_time_ms >= 0.0) {
            return Err(format!("negative wall time {}", self.wall_time_ms));
        }
        match self.location {
            Location::Local if self.tx_bytes != 0 || self.rx_bytes != 0 => {
                Err("local record with network bytes".into())
            }
            Location::Remote { .. } if self.overhead_ms > self.wall_time_ms + 1e-9 => Err(format!(
                "overhead {} exceeds wall time {}",
                self.overhead_ms, self.wall_time_ms
            )),
            _ => Ok(()),
        }
    }

    /// Time the summary absorbs: remote records drop their transit share so
    /// estimates can add the current link's cost back in.
    fn compute_time_ms(&self) -> f64 {
        match self.location {
            Location::Local => self.wall_time_ms,
            Location::Remote { .. } => (self.wall_time_ms - self.network_ms).max(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HistoryKey {
    pub task_id: String,
    pub input_bucket: u32,
    pub location: Location,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub ewma_time_ms: f64,
    pub ewma_energy_mj: f64,
    pub ewma_tx_bytes: f64,
    pub ewma_rx_bytes: f64,
    pub sample_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryStore {
    alpha: f64,
    entries: BTreeMap<HistoryKey, Summary>,
}

impl Default for HistoryStore {
    fn default() -> Self {
        Self::new(DEFAULT_ALPHA)
    }
}

impl HistoryStore {
    pub fn new(alpha: f64) -> Self {
        assert!((0.0..=1.0).contains(&alpha), "alpha must be within [0, 1]");
        Self {
            alpha,
            entries: BTreeMap::new(),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn record(&mut self, rec: &ExecutionRecord) {
        let key = HistoryKey {
            task_id: rec.task_id.clone(),
            input_bucket: rec.input_bucket,
            location: rec.location.clone(),
        };
        let a = self.alpha;
        let time = rec.compute_time_ms();
        let (tx, rx) = (rec.tx_bytes as f64, rec.rx_bytes as f64);
        self.entries
            .entry(key)
            .and_modify(|s| {
                s.ewma_time_ms = update_ewma(Some(s.ewma_time_ms), time, a);
                s.ewma_energy_mj = update_ewma(Some(s.ewma_energy_mj), rec.energy.total, a);
                s.ewma_tx_bytes = update_ewma(Some(s.ewma_tx_bytes), tx, a);
                s.ewma_rx_bytes = update_ewma(Some(s.ewma_rx_bytes), rx, a);
                s.sample_count += 1;
            })
            .or_insert(Summary {
                ewma_time_ms: time,
                ewma_energy_mj: rec.energy.total,
                ewma_tx_bytes: tx,
                ewma_rx_bytes: rx,
                sample_count: 1,
            });
    }

    pub fn get(&self, task_id: &str, input_bucket: u32, location: &Location) -> Option<&Summary> {
        self.entries.get(&HistoryKey {
            task_id: task_id.to_string(),
            input_bucket,
            location: location.clone(),
        })
    }

    pub fn entries(&self) -> impl Iterator<Item = (&HistoryKey, &Summary)> {
        self.entries.iter()
    }

    /// Canonical serialized form, stable across runs.
    pub fn snapshot(&self) -> Vec<u8> {
        let rows: Vec<_> = self.entries.iter().collect();
        serde_json::to_vec(&(self.alpha, rows)).expect("history serializes")
    }
}

/// Append-only history file, one JSON [`ExecutionRecord`] per line.
#[derive(Debug)]
pub struct HistoryLog {
    path: PathBuf,
    file: File,
}

impl HistoryLog {
    pub fn open(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self { path, file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, rec: &ExecutionRecord) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(rec).map_err(std::io::Error::other)?;
        line.push(b'\n');
        self.file.write_all(&line)
    }
}

pub fn read_history(path: impl AsRef<Path>) -> std::io::Result<Vec<ExecutionRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Rebuilds a store by replaying a history file.
pub fn load_history(path: impl AsRef<Path>, alpha: f64) -> std::io::Result<HistoryStore> {
    let mut store = HistoryStore::new(alpha);
    for rec in read_history(path)? {
        store.record(&rec);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;

    fn local(task: &str, bucket: u32, ms: f64) -> ExecutionRecord {
        ExecutionRecord {
            task_id: task.into(),
            input_bucket: bucket,
            location: Location::Local,
            wall_time_ms: ms,
            energy: EnergyBreakdown::new(ms, 1.0, 0.0, 0.0),
            tx_bytes: 0,
            rx_bytes: 0,
            overhead_ms: 0.0,
            network_ms: 0.0,
            timestamp_ms: 0.0,
        }
    }

    #[test]
    fn ewma_cases() {
        assert_eq!(update_ewma(Some(100.0), 200.0, 0.5), 150.0);
        assert_eq!(update_ewma(Some(100.0), 200.0, 1.0), 200.0);
        assert_eq!(update_ewma(Some(100.0), 200.0, 0.0), 100.0);
        assert_eq!(update_ewma(None, 42.0, 0.3), 42.0);
    }

    #[test]
    fn bucket_cases() {
        assert_eq!(input_bucket(0.0), 0);
        assert_eq!(input_bucket(7.0), 3);
        assert_eq!(input_bucket(1024.0), 10);
        assert_eq!(input_bucket(1023.0), 10);
        assert_eq!(input_bucket(1022.0), 9);
        assert_eq!(input_bucket(2.5), 1);
    }

    #[test]
    fn store_absorbs_records() {
        let mut s = HistoryStore::new(0.5);
        s.record(&local("fib", 3, 100.0));
        let first = *s.get("fib", 3, &Location::Local).unwrap();
        assert_eq!(first.ewma_time_ms, 100.0);
        assert_eq!(first.sample_count, 1);
        s.record(&local("fib", 3, 200.0));
        let second = s.get("fib", 3, &Location::Local).unwrap();
        assert_eq!(second.ewma_time_ms, 150.0);
        assert_eq!(second.sample_count, 2);
        s.record(&local("fib", 4, 1.0));
        assert_eq!(s.len(), 2);
        assert_eq!(s.get("fib", 3, &Location::Local).unwrap().sample_count, 2);
    }

    #[test]
    fn converges_after_identical_samples() {
        let mut s = HistoryStore::new(0.5);
        s.record(&local("t", 0, 1000.0));
        // 990 * 0.5^14 < 0.1
        for _ in 0..14 {
            s.record(&local("t", 0, 10.0));
        }
        let t = s.get("t", 0, &Location::Local).unwrap().ewma_time_ms;
        assert!((t - 10.0).abs() / 10.0 < 0.01, "{t}");
    }

    #[test]
    fn remote_summary_excludes_transit() {
        let mut s = HistoryStore::default();
        let loc = Location::Remote {
            vm_config: "main".into(),
            n_vms: 1,
        };
        s.record(&ExecutionRecord {
            location: loc.clone(),
            wall_time_ms: 80.0,
            network_ms: 30.0,
            overhead_ms: 30.0,
            tx_bytes: 100,
            rx_bytes: 50,
            ..local("t", 0, 0.0)
        });
        let sum = s.get("t", 0, &loc).unwrap();
        assert_eq!(sum.ewma_time_ms, 50.0);
        assert_eq!((sum.ewma_tx_bytes, sum.ewma_rx_bytes), (100.0, 50.0));
    }

    #[test]
    fn record_invariants() {
        let mut r = local("t", 0, 5.0);
        assert!(r.validate().is_ok());
        r.tx_bytes = 1;
        assert!(r.validate().is_err());
        let remote = ExecutionRecord {
            location: Location::Remote {
                vm_config: "main".into(),
                n_vms: 1,
            },
            overhead_ms: 6.0,
            ..local("t", 0, 5.0)
        };
        assert!(remote.validate().is_err());
    }

    #[test]
    fn history_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.jsonl");
        let recs = vec![
            local("fib", 3, 1.25),
            ExecutionRecord {
                location: Location::Remote {
                    vm_config: "x4large".into(),
                    n_vms: 4,
                },
                wall_time_ms: 0.1 + 0.2,
                network_ms: 1e-300,
                overhead_ms: 0.25,
                tx_bytes: u64::MAX,
                rx_bytes: 7,
                timestamp_ms: 123456.789,
                ..local("nqueens", 24, 0.0)
            },
        ];
        let mut log = HistoryLog::open(&path).unwrap();
        for r in &recs {
            log.append(r).unwrap();
        }
        drop(log);
        assert_eq!(read_history(&path).unwrap(), recs);
        let store = load_history(&path, 0.5).unwrap();
        assert_eq!(store.len(), 2);
    }

    struct Scripted(RefCell<Vec<f64>>);

    impl RttProbe for Scripted {
        fn ping_ms(&self) -> Result<f64, TransportError> {
            Ok(self.0.borrow_mut().remove(0))
        }
    }

    #[test]
    fn median_rejects_outlier() {
        let probe = Scripted(RefCell::new(vec![40.0, 900.0, 50.0]));
        let mut net = NetworkProfile::default();
        assert_eq!(measure_rtt(&probe, 3, &mut net, 0.5).unwrap(), 50.0);
        assert_eq!(net.rtt_ms, 50.0);
    }

    #[test]
    fn probe_failure_propagates() {
        struct Dead;
        impl RttProbe for Dead {
            fn ping_ms(&self) -> Result<f64, TransportError> {
                Err(TransportError::ConnectionLost("closed".into()))
            }
        }
        let mut net = NetworkProfile::default();
        assert!(measure_rtt(&Dead, 1, &mut net, 0.5).is_err());
    }
}
