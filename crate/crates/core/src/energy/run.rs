//! Device-state traces for a single method run, local or offloaded.

use serde::{Deserialize, Serialize};

use super::radio::{cell_occupancy, step_wifi_fsm, CellFsm, WifiFsm};
use super::{CellState, CpuFreq, DeviceState, WifiState};

/// Handset behaviour assumed while a method runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviceProfile {
    /// The screen stays on during execution.
    pub brightness: u8,
    pub local_cpu_util: f64,
    pub local_cpu_freq: CpuFreq,
    /// CPU while waiting on a remote result.
    pub wait_cpu_util: f64,
    pub wait_cpu_freq: CpuFreq,
    pub mtu_bytes: u64,
}

impl Default for DeviceProfile {
    fn default() -> Self {
        Self {
            brightness: 128,
            local_cpu_util: 100.0,
            local_cpu_freq: CpuFreq::High385MHz,
            wait_cpu_util: 5.0,
            wait_cpu_freq: CpuFreq::Low246MHz,
            mtu_bytes: 1500,
        }
    }
}

/// The radio carrying offload traffic, with its power-state machine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Radio {
    None,
    Wifi(WifiFsm),
    Cell(CellFsm),
}

/// One stretch of a remote run: bytes queued and how long it lasted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitPhase {
    pub tx_bytes: u64,
    pub rx_bytes: u64,
    pub duration_ms: f64,
}

impl TransitPhase {
    pub fn wait(duration_ms: f64) -> Self {
        Self {
            tx_bytes: 0,
            rx_bytes: 0,
            duration_ms,
        }
    }
}

impl Radio {
    fn advance(
        &mut self,
        tx_bytes: u64,
        rx_bytes: u64,
        dt_s: f64,
        mtu: u64,
        base: DeviceState,
        out: &mut Vec<(DeviceState, f64)>,
    ) {
        match self {
            Radio::None => out.push((
                DeviceState {
                    wifi: WifiState::Off,
                    cell: CellState::Off,
                    ..base
                },
                dt_s,
            )),
            Radio::Wifi(fsm) => {
                let bytes = tx_bytes + rx_bytes;
                let packets = bytes.div_ceil(mtu.max(1));
                let pps = packets as f64 / dt_s;
                let (next, intervals) = step_wifi_fsm(fsm, pps, tx_bytes > 0, dt_s);
                *fsm = next;
                fsm.data_rate = tx_bytes as f64 / dt_s;
                for (wifi, d) in intervals {
                    if d > 0.0 {
                        out.push((
                            DeviceState {
                                wifi,
                                cell: CellState::Off,
                                ..base
                            },
                            d,
                        ));
                    }
                }
            }
            Radio::Cell(fsm) => {
                let (next, occupancy) = cell_occupancy(fsm, tx_bytes, rx_bytes, dt_s);
                *fsm = next;
                for (rrc, d) in occupancy {
                    out.push((
                        DeviceState {
                            wifi: WifiState::Off,
                            cell: rrc.into(),
                            ..base
                        },
                        d,
                    ));
                }
            }
        }
    }
}

impl DeviceProfile {
    fn cpu_state(&self, util: f64, freq: CpuFreq) -> DeviceState {
        DeviceState {
            cpu_util: util,
            cpu_freq: freq,
            cpu_on: true,
            brightness: self.brightness,
            wifi: WifiState::Off,
            cell: CellState::Off,
        }
    }

    /// Trace of an in-process run of `duration_ms`; the radio only idles.
    pub fn local_trace(&self, radio: &mut Radio, duration_ms: f64) -> Vec<(DeviceState, f64)> {
        let mut out = Vec::new();
        if duration_ms > 0.0 {
            let base = self.cpu_state(self.local_cpu_util, self.local_cpu_freq);
            radio.advance(0, 0, duration_ms / 1000.0, self.mtu_bytes, base, &mut out);
        }
        out
    }

    /// Trace of an offloaded run; the CPU idles while the radio carries the
    /// request and response.
    pub fn remote_trace(
        &self,
        radio: &mut Radio,
        phases: &[TransitPhase],
    ) -> Vec<(DeviceState, f64)> {
        let base = self.cpu_state(self.wait_cpu_util, self.wait_cpu_freq);
        let mut out = Vec::new();
        for p in phases.iter().filter(|p| p.duration_ms > 0.0) {
            radio.advance(
                p.tx_bytes,
                p.rx_bytes,
                p.duration_ms / 1000.0,
                self.mtu_bytes,
                base,
                &mut out,
            );
        }
        out
    }

    /// Lets radio timers run between runs without accounting energy.
    pub fn idle(&self, radio: &mut Radio, duration_ms: f64) {
        if duration_ms > 0.0 {
            let mut sink = Vec::new();
            radio.advance(
                0,
                0,
                duration_ms / 1000.0,
                self.mtu_bytes,
                self.cpu_state(0.0, CpuFreq::Low246MHz),
                &mut sink,
            );
        }
    }
}
