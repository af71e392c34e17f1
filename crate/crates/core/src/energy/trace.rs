//! Device-state trace CSV import/export.
//!
//! Columns: `t_start_s,duration_s,cpu_util,cpu_freq,cpu_on,brightness,wifi_state,cell_state`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{CellState, CpuFreq, DeviceState, EnergyError, WifiState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t_start_s: f64,
    pub duration_s: f64,
    pub cpu_util: f64,
    pub cpu_freq: CpuFreq,
    pub cpu_on: bool,
    pub brightness: u8,
    pub wifi_state: WifiState,
    pub cell_state: CellState,
}

impl TraceRow {
    pub fn state(&self) -> DeviceState {
        DeviceState {
            cpu_util: self.cpu_util,
            cpu_freq: self.cpu_freq,
            cpu_on: self.cpu_on,
            brightness: self.brightness,
            wifi: self.wifi_state,
            cell: self.cell_state,
        }
    }
}

pub fn write_trace_csv<W: Write>(
    out: W,
    trace: &[(DeviceState, f64)],
) -> Result<(), EnergyError> {
    let mut w = csv::Writer::from_writer(out);
    let mut t = 0.0;
    for (s, d) in trace {
        w.serialize(TraceRow {
            t_start_s: t,
            duration_s: *d,
            cpu_util: s.cpu_util,
            cpu_freq: s.cpu_freq,
            cpu_on: s.cpu_on,
            brightness: s.brightness,
            wifi_state: s.wifi,
            cell_state: s.cell,
        })?;
        t += d;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv<R: Read>(input: R) -> Result<Vec<(DeviceState, f64)>, EnergyError> {
    let mut r = csv::Reader::from_reader(input);
    let mut trace = Vec::new();
    for row in r.deserialize::<TraceRow>() {
        let row = row?;
        let state = row.state();
        state.validate()?;
        trace.push((state, row.duration_s));
    }
    Ok(trace)
}
