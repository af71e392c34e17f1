//! Network emulation interposed on a transport.
//!
//! Each frame is charged `rtt/2 + size/bandwidth` of one-way latency. In
//! deterministic mode that delay is only reported; in wall mode it is slept,
//! optionally with uniform jitter. Failure triggers sever the link mid-stream
//! to exercise fallback paths.

use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clock::{Clock, ClockMode};
use crate::profiling::LinkType;
use crate::transport::{
    Closer, Connection, Connector, FrameSink, FrameSource, LinkInfo, Transit, TransportError,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailTrigger {
    /// The frame that would take the sent-byte total past `n` fails; a frame
    /// that lands exactly on `n` goes through and the link dies behind it.
    BytesSent(u64),
    /// The link dies right after the `n`-th frame is sent.
    AfterFrames(u64),
    /// Any send or receive at or after this clock time fails.
    AtTimeMs(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkScenario {
    pub name: String,
    pub link_type: LinkType,
    pub rtt_ms: f64,
    /// Bytes per second.
    pub bw_up: f64,
    pub bw_down: f64,
    #[serde(default)]
    pub jitter_ms: f64,
    #[serde(default)]
    pub fail_at: Option<FailTrigger>,
}

pub const PRESETS: [&str; 5] = [
    "phone-only",
    "wifi-local",
    "wifi-internet-good",
    "wifi-internet-hotspot",
    "3g",
];

impl LinkScenario {
    pub fn phone_only() -> Self {
        Self {
            name: "phone-only".into(),
            link_type: LinkType::None,
            rtt_ms: 0.0,
            bw_up: 0.0,
            bw_down: 0.0,
            jitter_ms: 0.0,
            fail_at: None,
        }
    }

    fn shaped(name: &str, link_type: LinkType, rtt_ms: f64, bw: f64) -> Self {
        Self {
            name: name.into(),
            link_type,
            rtt_ms,
            bw_up: bw,
            bw_down: bw,
            jitter_ms: 0.0,
            fail_at: None,
        }
    }

    pub fn wifi_local() -> Self {
        Self::shaped("wifi-local", LinkType::WifiLocal, 5.0, 2_500_000.0)
    }

    pub fn wifi_internet_good() -> Self {
        Self::shaped("wifi-internet-good", LinkType::WifiInternet, 50.0, 1_000_000.0)
    }

    pub fn wifi_internet_hotspot() -> Self {
        Self::shaped("wifi-internet-hotspot", LinkType::WifiInternet, 200.0, 1_000_000.0)
    }

    pub fn three_g() -> Self {
        Self::shaped("3g", LinkType::Cellular3G, 100.0, 250_000.0)
    }

    pub fn all_presets() -> Vec<Self> {
        PRESETS.iter().map(|n| n.parse().unwrap()).collect()
    }

    pub fn has_transport(&self) -> bool {
        self.link_type != LinkType::None
    }

    pub fn validate(&self) -> Result<(), String> {
        if !self.has_transport() {
            return Ok(());
        }
        if !(self.rtt_ms > 0.0) {
            return Err(format!("{}: rtt_ms must be positive", self.name));
        }
        if !(self.bw_up > 0.0 && self.bw_down > 0.0) {
            return Err(format!("{}: bandwidths must be positive", self.name));
        }
        if !(self.jitter_ms >= 0.0) {
            return Err(format!("{}: jitter_ms must be nonnegative", self.name));
        }
        Ok(())
    }

    pub fn info(&self) -> LinkInfo {
        LinkInfo {
            link_type: self.link_type,
            rtt_ms: self.rtt_ms,
            bw_up: self.bw_up,
            bw_down: self.bw_down,
        }
    }

    /// Deterministic one-way latency for a frame of `bytes`.
    pub fn one_way_delay_ms(&self, bytes: usize, upstream: bool) -> f64 {
        let bw = if upstream { self.bw_up } else { self.bw_down };
        self.rtt_ms / 2.0 + bytes as f64 / bw * 1000.0
    }
}

impl FromStr for LinkScenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "phone-only" | "phoneonly" | "none" => Self::phone_only(),
            "wifi-local" | "wifilocal" => Self::wifi_local(),
            "wifi-internet-good" | "wifiinternetgood" | "wifi-internet" => Self::wifi_internet_good(),
            "wifi-internet-hotspot" | "wifiinternethotspot" | "hotspot" => Self::wifi_internet_hotspot(),
            "3g" | "threeg" | "three-g" => Self::three_g(),
            other => return Err(format!("unknown scenario '{other}'")),
        })
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    #[serde(default)]
    scenario: Vec<LinkScenario>,
}

/// Loads `[[scenario]]` tables from a TOML file.
pub fn load_scenarios(path: impl AsRef<Path>) -> Result<Vec<LinkScenario>, String> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| e.to_string())?;
    parse_scenarios(&text)
}

pub fn parse_scenarios(text: &str) -> Result<Vec<LinkScenario>, String> {
    let file: ScenarioFile = toml::from_str(text).map_err(|e| e.to_string())?;
    for s in &file.scenario {
        s.validate()?;
    }
    Ok(file.scenario)
}

/// Resolves a preset name, falling back to custom scenarios.
pub fn resolve_scenario(name: &str, custom: &[LinkScenario]) -> Result<LinkScenario, String> {
    if let Some(s) = custom.iter().find(|s| s.name == name) {
        return Ok(s.clone());
    }
    name.parse()
}

#[derive(Debug, Default)]
pub struct NetemStats {
    pub bytes_up: AtomicU64,
    pub bytes_down: AtomicU64,
    pub frames_up: AtomicU64,
    pub frames_down: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StatsSnapshot {
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub frames_up: u64,
    pub frames_down: u64,
}

impl NetemStats {
    pub fn snapshot(&self) -> StatsSnapshot {
        StatsSnapshot {
            bytes_up: self.bytes_up.load(Ordering::SeqCst),
            bytes_down: self.bytes_down.load(Ordering::SeqCst),
            frames_up: self.frames_up.load(Ordering::SeqCst),
            frames_down: self.frames_down.load(Ordering::SeqCst),
        }
    }
}

struct Armed {
    trigger: FailTrigger,
    bytes: u64,
    frames: u64,
}

/// Shared link switch, failure injection and byte counters.
pub struct NetemControl {
    link_up: AtomicBool,
    armed: Mutex<Option<Armed>>,
    pub stats: NetemStats,
}

impl Default for NetemControl {
    fn default() -> Self {
        Self {
            link_up: AtomicBool::new(true),
            armed: Mutex::new(None),
            stats: NetemStats::default(),
        }
    }
}

impl NetemControl {
    pub fn is_up(&self) -> bool {
        self.link_up.load(Ordering::SeqCst)
    }

    pub fn set_link_up(&self, up: bool) {
        self.link_up.store(up, Ordering::SeqCst);
    }

    /// Arms a one-shot failure counted from now.
    pub fn arm(&self, trigger: FailTrigger) {
        *self.armed.lock().unwrap() = Some(Armed {
            trigger,
            bytes: 0,
            frames: 0,
        });
    }

    pub fn disarm(&self) {
        *self.armed.lock().unwrap() = None;
    }

    pub fn is_armed(&self) -> bool {
        self.armed.lock().unwrap().is_some()
    }
}

pub struct NetemConnector {
    inner: Arc<dyn Connector>,
    scenario: LinkScenario,
    control: Arc<NetemControl>,
    clock: Arc<dyn Clock>,
}

impl NetemConnector {
    pub fn new(inner: Arc<dyn Connector>, scenario: LinkScenario, clock: Arc<dyn Clock>) -> Self {
        let control = Arc::new(NetemControl::default());
        if let Some(t) = scenario.fail_at {
            control.arm(t);
        }
        Self {
            inner,
            scenario,
            control,
            clock,
        }
    }

    pub fn control(&self) -> Arc<NetemControl> {
        self.control.clone()
    }

    pub fn scenario(&self) -> &LinkScenario {
        &self.scenario
    }
}

impl Connector for NetemConnector {
    fn connect(&self) -> Result<Connection, TransportError> {
        if !self.scenario.has_transport() {
            return Err(TransportError::ConnectionLost("phone-only scenario has no link".into()));
        }
        if !self.control.is_up() {
            return Err(TransportError::ConnectionLost("link down".into()));
        }
        let conn = self.inner.connect()?;
        let shared = Arc::new(Shared {
            scenario: self.scenario.clone(),
            control: self.control.clone(),
            clock: self.clock.clone(),
            closer: conn.closer.clone(),
        });
        Ok(Connection {
            sink: Box::new(ShapedSink {
                inner: conn.sink,
                shared: shared.clone(),
            }),
            source: Box::new(ShapedSource {
                inner: conn.source,
                shared,
            }),
            closer: conn.closer,
            info: self.scenario.info(),
        })
    }
}

struct Shared {
    scenario: LinkScenario,
    control: Arc<NetemControl>,
    clock: Arc<dyn Clock>,
    closer: Arc<dyn Closer>,
}

impl Shared {
    fn sever(&self, why: &str) -> TransportError {
        tracing::debug!(scenario = %self.scenario.name, why, "link severed");
        self.control.set_link_up(false);
        self.control.disarm();
        self.closer.close();
        TransportError::ConnectionLost(why.into())
    }

    fn check_live(&self) -> Result<(), TransportError> {
        if !self.control.is_up() {
            self.closer.close();
            return Err(TransportError::ConnectionLost("link down".into()));
        }
        let due = matches!(
            self.control.armed.lock().unwrap().as_ref().map(|a| a.trigger),
            Some(FailTrigger::AtTimeMs(t)) if self.clock.now_ms() >= t
        );
        if due {
            return Err(self.sever("time trigger"));
        }
        Ok(())
    }

    fn delay(&self, bytes: usize, upstream: bool) -> f64 {
        let base = self.scenario.one_way_delay_ms(bytes, upstream);
        match self.clock.mode() {
            ClockMode::Deterministic => base,
            ClockMode::Wall => {
                let jitter = if self.scenario.jitter_ms > 0.0 {
                    rand::thread_rng().gen_range(0.0..=self.scenario.jitter_ms)
                } else {
                    0.0
                };
                let d = base + jitter;
                self.clock.sleep_ms(d);
                d
            }
        }
    }
}

struct ShapedSink {
    inner: Box<dyn FrameSink>,
    shared: Arc<Shared>,
}

impl FrameSink for ShapedSink {
    fn send_frame(&mut self, frame: &[u8]) -> Result<Transit, TransportError> {
        self.shared.check_live()?;
        let len = frame.len() as u64;
        let mut die_after = false;
        {
            let mut armed = self.shared.control.armed.lock().unwrap();
            if let Some(a) = armed.as_mut() {
                match a.trigger {
                    FailTrigger::BytesSent(n) if a.bytes + len > n => {
                        drop(armed);
                        return Err(self.shared.sever("byte trigger"));
                    }
                    FailTrigger::BytesSent(n) => die_after = a.bytes + len == n,
                    FailTrigger::AfterFrames(n) => die_after = a.frames + 1 >= n,
                    FailTrigger::AtTimeMs(_) => {}
                }
                a.bytes += len;
                a.frames += 1;
            }
        }
        let delay_ms = self.shared.delay(frame.len(), true);
        let t = self.inner.send_frame(frame)?;
        let stats = &self.shared.control.stats;
        stats.bytes_up.fetch_add(t.bytes as u64, Ordering::SeqCst);
        stats.frames_up.fetch_add(1, Ordering::SeqCst);
        if die_after {
            self.shared.sever("trigger after send");
        }
        Ok(Transit {
            bytes: t.bytes,
            delay_ms,
        })
    }
}

struct ShapedSource {
    inner: Box<dyn FrameSource>,
    shared: Arc<Shared>,
}

impl FrameSource for ShapedSource {
    fn recv_frame(&mut self) -> Result<(Vec<u8>, Transit), TransportError> {
        let (frame, t) = self.inner.recv_frame()?;
        self.shared.check_live()?;
        let delay_ms = self.shared.delay(frame.len(), false);
        let stats = &self.shared.control.stats;
        stats.bytes_down.fetch_add(t.bytes as u64, Ordering::SeqCst);
        stats.frames_down.fetch_add(1, Ordering::SeqCst);
        Ok((
            frame,
            Transit {
                bytes: t.bytes,
                delay_ms,
            },
        ))
    }
}
