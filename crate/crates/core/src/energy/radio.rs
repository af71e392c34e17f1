//! Radio power-state machines.

use serde::{Deserialize, Serialize};

use super::WifiState;

/// Time spent in a transmit state per second of active transmission.
pub const WIFI_TRANSMIT_MS_PER_S: f64 = 15.0;

/// Cellular RRC states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RrcState {
    Idle,
    Fach,
    Dch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CellFsmConfig {
    pub uplink_threshold: u64,
    pub downlink_threshold: u64,
    pub dch_timeout_s: f64,
    pub fach_timeout_s: f64,
}

impl Default for CellFsmConfig {
    fn default() -> Self {
        Self {
            uplink_threshold: 151,
            downlink_threshold: 119,
            dch_timeout_s: 5.0,
            fach_timeout_s: 12.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellFsm {
    pub state: RrcState,
    pub uplink_queue: u64,
    pub downlink_queue: u64,
    pub dch_inactivity_s: f64,
    pub fach_inactivity_s: f64,
    pub config: CellFsmConfig,
}

impl CellFsm {
    pub fn new(config: CellFsmConfig) -> Self {
        assert!(
            config.uplink_threshold > 0 && config.downlink_threshold > 0,
            "queue thresholds must be positive"
        );
        Self {
            state: RrcState::Idle,
            uplink_queue: 0,
            downlink_queue: 0,
            dch_inactivity_s: 0.0,
            fach_inactivity_s: 0.0,
            config,
        }
    }

    pub fn in_state(state: RrcState, config: CellFsmConfig) -> Self {
        Self {
            state,
            ..Self::new(config)
        }
    }
}

impl Default for CellFsm {
    fn default() -> Self {
        Self::new(CellFsmConfig::default())
    }
}

/// Advances the RRC machine by `dt` seconds during which `tx_bytes` and
/// `rx_bytes` were queued. Returns the new machine and the time spent in
/// each state, in order.
///
/// Promotion is checked against the queue sizes before they drain; a queue
/// must strictly exceed its threshold. Without traffic, inactivity timers run
/// and demote Dch to Fach and Fach to Idle, cascading within one step when
/// `dt` is long enough.
pub fn cell_occupancy(
    fsm: &CellFsm,
    tx_bytes: u64,
    rx_bytes: u64,
    dt: f64,
) -> (CellFsm, Vec<(RrcState, f64)>) {
    assert!(dt > 0.0, "step duration must be positive");
    let mut next = *fsm;
    let mut occupancy = Vec::with_capacity(3);
    next.uplink_queue = fsm.uplink_queue.saturating_add(tx_bytes);
    next.downlink_queue = fsm.downlink_queue.saturating_add(rx_bytes);

    if tx_bytes > 0 || rx_bytes > 0 {
        let promote = next.uplink_queue > next.config.uplink_threshold
            || next.downlink_queue > next.config.downlink_threshold;
        next.state = match (next.state, promote) {
            (_, true) => RrcState::Dch,
            (RrcState::Idle, false) => RrcState::Fach,
            (s, false) => s,
        };
        next.dch_inactivity_s = 0.0;
        next.fach_inactivity_s = 0.0;
        occupancy.push((next.state, dt));
    } else {
        let mut remaining = dt;
        while remaining > 0.0 {
            match next.state {
                RrcState::Dch => {
                    let left = next.config.dch_timeout_s - next.dch_inactivity_s;
                    if remaining < left {
                        next.dch_inactivity_s += remaining;
                        occupancy.push((RrcState::Dch, remaining));
                        remaining = 0.0;
                    } else {
                        if left > 0.0 {
                            occupancy.push((RrcState::Dch, left));
                        }
                        remaining -= left.max(0.0);
                        next.state = RrcState::Fach;
                        next.dch_inactivity_s = 0.0;
                        next.fach_inactivity_s = 0.0;
                    }
                }
                RrcState::Fach => {
                    let left = next.config.fach_timeout_s - next.fach_inactivity_s;
                    if remaining < left {
                        next.fach_inactivity_s += remaining;
                        occupancy.push((RrcState::Fach, remaining));
                        remaining = 0.0;
                    } else {
                        if left > 0.0 {
                            occupancy.push((RrcState::Fach, left));
                        }
                        remaining -= left.max(0.0);
                        next.state = RrcState::Idle;
                        next.fach_inactivity_s = 0.0;
                    }
                }
                RrcState::Idle => {
                    occupancy.push((RrcState::Idle, remaining));
                    remaining = 0.0;
                }
            }
        }
    }

    // Queues drain once the resulting state has been decided.
    next.uplink_queue = 0;
    next.downlink_queue = 0;
    (next, occupancy)
}

pub fn step_cell_fsm(fsm: &CellFsm, tx_bytes: u64, rx_bytes: u64, dt: f64) -> CellFsm {
    cell_occupancy(fsm, tx_bytes, rx_bytes, dt).0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WifiPowerState {
    LowPower,
    HighPower,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WifiFsm {
    pub state: WifiPowerState,
    pub packets_per_second: f64,
    /// Uplink channel rate, Mbps (1–54).
    pub channel_rate_mbps: f64,
    /// Uplink data rate, bytes/s.
    pub data_rate: f64,
    /// Packet rate at or above which the interface is in the high-power state.
    pub high_threshold: f64,
}

impl WifiFsm {
    pub fn new(high_threshold: f64, channel_rate_mbps: f64) -> Self {
        assert!(
            (1.0..=54.0).contains(&channel_rate_mbps),
            "channel rate must be within 1..=54 Mbps"
        );
        Self {
            state: WifiPowerState::LowPower,
            packets_per_second: 0.0,
            channel_rate_mbps,
            data_rate: 0.0,
            high_threshold,
        }
    }
}

impl Default for WifiFsm {
    fn default() -> Self {
        Self::new(15.0, 54.0)
    }
}

/// Advances the WiFi machine by `dt` seconds at the given packet rate.
///
/// Returns the new machine plus the effective power states over the interval.
/// While transmitting, the interface spends [`WIFI_TRANSMIT_MS_PER_S`] of
/// every second in the transmit state that corresponds to its base state.
pub fn step_wifi_fsm(
    fsm: &WifiFsm,
    packets_per_second: f64,
    transmitting: bool,
    dt: f64,
) -> (WifiFsm, Vec<(WifiState, f64)>) {
    assert!(dt > 0.0, "step duration must be positive");
    let mut next = *fsm;
    next.packets_per_second = packets_per_second;
    next.state = if packets_per_second >= fsm.high_threshold {
        WifiPowerState::HighPower
    } else {
        WifiPowerState::LowPower
    };
    let (base, transmit) = match next.state {
        WifiPowerState::LowPower => (WifiState::LowPower, WifiState::TransmitFromLow),
        WifiPowerState::HighPower => (WifiState::HighPower, WifiState::TransmitFromHigh),
    };
    let mut intervals = Vec::with_capacity(2);
    if transmitting {
        let tx_time = dt * WIFI_TRANSMIT_MS_PER_S / 1000.0;
        intervals.push((transmit, tx_time));
        intervals.push((base, dt - tx_time));
    } else {
        intervals.push((base, dt));
    }
    (next, intervals)
}
