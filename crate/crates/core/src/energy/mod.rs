//! Component power model for a handset.
//!
//! Power is the sum of independent per-component estimates (CPU, LCD, WiFi,
//! cellular). Energy over a run is obtained by integrating a piecewise
//! constant trace of [`DeviceState`]s.

mod radio;
mod run;
mod trace;

pub use radio::{
    cell_occupancy, step_cell_fsm, step_wifi_fsm, CellFsm, CellFsmConfig, RrcState, WifiFsm,
    WifiPowerState, WIFI_TRANSMIT_MS_PER_S,
};
pub use run::{DeviceProfile, Radio, TransitPhase};
pub use trace::{read_trace_csv, write_trace_csv, TraceRow};

use std::ops::{Add, AddAssign};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnergyError {
    #[error("invalid device state: {0}")]
    InvalidState(String),
    #[error("trace segment {index} has non-positive duration {duration}")]
    InvalidDuration { index: usize, duration: f64 },
    #[error("coefficient {name} must be a finite non-negative number, got {value}")]
    InvalidCoefficient { name: &'static str, value: f64 },
    #[error("reading coefficients: {0}")]
    Config(String),
    #[error("trace csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Power coefficients in mW (per util-% for the CPU terms, per brightness
/// level for the LCD term).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerCoefficients {
    pub beta_uh: f64,
    pub beta_ul: f64,
    pub beta_cpu_on: f64,
    pub beta_wifi_low: f64,
    pub beta_wifi_high: f64,
    pub wifi_transmit: f64,
    pub beta_3g_idle: f64,
    pub beta_3g_fach: f64,
    pub beta_3g_dch: f64,
    pub beta_brightness: f64,
    /// Channel-rate coefficient. Parsed when present, not part of the sum.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_channel_rate: Option<f64>,
}

impl Default for PowerCoefficients {
    fn default() -> Self {
        Self {
            beta_uh: 4.32,
            beta_ul: 3.42,
            beta_cpu_on: 121.46,
            beta_wifi_low: 20.0,
            beta_wifi_high: 710.0,
            wifi_transmit: 1000.0,
            beta_3g_idle: 10.0,
            beta_3g_fach: 401.0,
            beta_3g_dch: 570.0,
            beta_brightness: 2.40,
            beta_channel_rate: None,
        }
    }
}

impl PowerCoefficients {
    pub fn validate(&self) -> Result<(), EnergyError> {
        let named = [
            ("beta_uh", self.beta_uh),
            ("beta_ul", self.beta_ul),
            ("beta_cpu_on", self.beta_cpu_on),
            ("beta_wifi_low", self.beta_wifi_low),
            ("beta_wifi_high", self.beta_wifi_high),
            ("wifi_transmit", self.wifi_transmit),
            ("beta_3g_idle", self.beta_3g_idle),
            ("beta_3g_fach", self.beta_3g_fach),
            ("beta_3g_dch", self.beta_3g_dch),
            ("beta_brightness", self.beta_brightness),
            (
                "beta_channel_rate",
                self.beta_channel_rate.unwrap_or_default(),
            ),
        ];
        for (name, value) in named {
            if !value.is_finite() || value < 0.0 {
                return Err(EnergyError::InvalidCoefficient { name, value });
            }
        }
        Ok(())
    }

    /// Parses a `key = value` file. Missing keys keep their defaults.
    pub fn from_config_str(text: &str) -> Result<Self, EnergyError> {
        let coeffs: Self = toml::from_str(text).map_err(|e| EnergyError::Config(e.to_string()))?;
        coeffs.validate()?;
        Ok(coeffs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EnergyError> {
        Self::from_config_str(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CpuFreq {
    /// 246 MHz
    #[serde(rename = "low")]
    Low246MHz,
    /// 385 MHz
    #[default]
    #[serde(rename = "high")]
    High385MHz,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WifiState {
    #[default]
    Off,
    #[serde(rename = "low")]
    LowPower,
    #[serde(rename = "high")]
    HighPower,
    #[serde(rename = "transmit_low")]
    TransmitFromLow,
    #[serde(rename = "transmit_high")]
    TransmitFromHigh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CellState {
    #[default]
    Off,
    Idle,
    Fach,
    Dch,
}

impl From<RrcState> for CellState {
    fn from(s: RrcState) -> Self {
        match s {
            RrcState::Idle => CellState::Idle,
            RrcState::Fach => CellState::Fach,
            RrcState::Dch => CellState::Dch,
        }
    }
}

/// Instantaneous hardware state.
///
/// Both radios may be powered at once; only one of them carries offload
/// traffic at a time, which is enforced by [`Radio`] rather than here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct DeviceState {
    /// 0–100 %.
    pub cpu_util: f64,
    pub cpu_freq: CpuFreq,
    pub cpu_on: bool,
    /// 0–255.
    pub brightness: u8,
    pub wifi: WifiState,
    pub cell: CellState,
}

impl DeviceState {
    pub fn validate(&self) -> Result<(), EnergyError> {
        if !(0.0..=100.0).contains(&self.cpu_util) {
            return Err(EnergyError::InvalidState(format!(
                "cpu_util {} outside 0..=100",
                self.cpu_util
            )));
        }
        if self.cpu_util > 0.0 && !self.cpu_on {
            return Err(EnergyError::InvalidState(
                "cpu_util > 0 requires cpu_on".into(),
            ));
        }
        Ok(())
    }
}

/// Per-component power in mW.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PowerBreakdown {
    pub cpu: f64,
    pub screen: f64,
    pub wifi: f64,
    pub cellular: f64,
    pub total: f64,
}

/// Per-component energy in mJ. `total` is always the component sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub cpu: f64,
    pub screen: f64,
    pub wifi: f64,
    pub cellular: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    pub fn new(cpu: f64, screen: f64, wifi: f64, cellular: f64) -> Self {
        Self {
            cpu,
            screen,
            wifi,
            cellular,
            total: cpu + screen + wifi + cellular,
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(
            self.cpu * factor,
            self.screen * factor,
            self.wifi * factor,
            self.cellular * factor,
        )
    }
}

impl Add for EnergyBreakdown {
    type Output = EnergyBreakdown;

    fn add(self, rhs: Self) -> Self {
        Self::new(
            self.cpu + rhs.cpu,
            self.screen + rhs.screen,
            self.wifi + rhs.wifi,
            self.cellular + rhs.cellular,
        )
    }
}

impl AddAssign for EnergyBreakdown {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

pub fn instantaneous_power(state: &DeviceState, coeffs: &PowerCoefficients) -> PowerBreakdown {
    let freq_coeff = match state.cpu_freq {
        CpuFreq::High385MHz => coeffs.beta_uh,
        CpuFreq::Low246MHz => coeffs.beta_ul,
    };
    let cpu = freq_coeff * state.cpu_util + if state.cpu_on { coeffs.beta_cpu_on } else { 0.0 };
    let screen = coeffs.beta_brightness * f64::from(state.brightness);
    let wifi = match state.wifi {
        WifiState::Off => 0.0,
        WifiState::LowPower => coeffs.beta_wifi_low,
        WifiState::HighPower => coeffs.beta_wifi_high,
        WifiState::TransmitFromLow | WifiState::TransmitFromHigh => coeffs.wifi_transmit,
    };
    let cellular = match state.cell {
        CellState::Off => 0.0,
        CellState::Idle => coeffs.beta_3g_idle,
        CellState::Fach => coeffs.beta_3g_fach,
        CellState::Dch => coeffs.beta_3g_dch,
    };
    PowerBreakdown {
        cpu,
        screen,
        wifi,
        cellular,
        total: cpu + screen + wifi + cellular,
    }
}

/// Rectangular integration of a piecewise-constant trace; durations in seconds.
pub fn integrate_energy(
    trace: &[(DeviceState, f64)],
    coeffs: &PowerCoefficients,
) -> Result<EnergyBreakdown, EnergyError> {
    let mut acc = EnergyBreakdown::zero();
    for (index, (state, duration)) in trace.iter().enumerate() {
        if !(duration.is_finite() && *duration > 0.0) {
            return Err(EnergyError::InvalidDuration {
                index,
                duration: *duration,
            });
        }
        state.validate()?;
        let p = instantaneous_power(state, coeffs);
        acc.cpu += p.cpu * duration;
        acc.screen += p.screen * duration;
        acc.wifi += p.wifi * duration;
        acc.cellular += p.cellular * duration;
    }
    Ok(EnergyBreakdown::new(acc.cpu, acc.screen, acc.wifi, acc.cellular))
}
