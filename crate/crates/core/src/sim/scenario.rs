//! Declarative fleet scenario (JSON).

use chrono::{DateTime, Duration, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use super::{stream_rng, SimError};
use crate::registry::StudyDraft;
use crate::sensor::SensorKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interval {
    pub from: DateTime<Utc>,
    pub to: DateTime<Utc>,
}

impl Interval {
    /// Half-open membership.
    pub fn contains(&self, t: DateTime<Utc>) -> bool {
        self.from <= t && t < self.to
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorGap {
    pub sensor: SensorKind,
    pub from: DateTime<Utc>,
    pub to: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrashMode {
    /// The app dies at the instant.
    Immediate,
    /// The app dies during its next upload, after the server has the batch
    /// but before the receipt arrives.
    MidUpload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrashSpec {
    pub at: DateTime<Utc>,
    pub mode: CrashMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub name: String,
    /// `[latitude, longitude]`; derived from the seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub home: Option<[f64; 2]>,
    /// Defaults to the scenario start.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enroll_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leave_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub wifi_off: Vec<Interval>,
    #[serde(default)]
    pub battery_low: Vec<Interval>,
    #[serde(default)]
    pub sensor_gaps: Vec<SensorGap>,
    #[serde(default)]
    pub crashes: Vec<CrashSpec>,
    /// Extra crashes at seeded random instants, half of them mid-upload.
    #[serde(default)]
    pub random_crashes: u32,
    #[serde(default)]
    pub manual_syncs: Vec<DateTime<Utc>>,
}

impl DeviceSpec {
    pub fn named(name: &str) -> Self {
        DeviceSpec {
            name: name.to_owned(),
            home: None,
            enroll_at: None,
            leave_at: None,
            wifi_off: Vec::new(),
            battery_low: Vec::new(),
            sensor_gaps: Vec::new(),
            crashes: Vec::new(),
            random_crashes: 0,
            manual_syncs: Vec::new(),
        }
    }
}

/// Generates `count` plain devices named `{prefix}{i:02}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetSpec {
    pub count: u32,
    #[serde(default = "default_prefix")]
    pub name_prefix: String,
    #[serde(default)]
    pub random_crashes: u32,
}

fn default_prefix() -> String {
    "device".into()
}

fn default_sync_interval() -> u32 {
    900
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    pub start: DateTime<Utc>,
    pub duration_days: f64,
    pub study: StudyDraft,
    #[serde(default = "default_sync_interval")]
    pub sync_interval_s: u32,
    /// Delay before the auto-restart after a crash.
    #[serde(default)]
    pub restart_delay_s: u32,
    /// Instants at which the QC table is captured.
    #[serde(default)]
    pub qc_probes: Vec<DateTime<Utc>>,
    #[serde(default)]
    pub devices: Vec<DeviceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fleet: Option<FleetSpec>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        serde_json::from_str(text).map_err(|e| SimError::ScenarioInvalid(e.to_string()))
    }

    pub fn end(&self) -> DateTime<Utc> {
        self.start + Duration::milliseconds((self.duration_days * 86_400_000.0).round() as i64)
    }

    /// Explicit devices followed by generated ones, with random crashes
    /// expanded into concrete instants.
    pub fn resolved_devices(&self) -> Result<Vec<DeviceSpec>, SimError> {
        let invalid = |m: String| Err(SimError::ScenarioInvalid(m));
        if !(self.duration_days.is_finite() && self.duration_days > 0.0) {
            return invalid("duration_days must be positive".into());
        }
        if self.sync_interval_s == 0 {
            return invalid("sync_interval_s must be positive".into());
        }
        let mut devices = self.devices.clone();
        if let Some(f) = &self.fleet {
            for i in 1..=f.count {
                let mut d = DeviceSpec::named(&format!("{}{i:02}", f.name_prefix));
                d.random_crashes = f.random_crashes;
                devices.push(d);
            }
        }
        if devices.is_empty() {
            return invalid("scenario has no devices".into());
        }
        let end = self.end();
        let mut names = BTreeSet::new();
        for d in &mut devices {
            if !names.insert(d.name.clone()) {
                return invalid(format!("device name {} repeats", d.name));
            }
            let enroll = d.enroll_at.unwrap_or(self.start);
            if enroll < self.start || enroll >= end {
                return invalid(format!("{}: enroll_at outside the scenario", d.name));
            }
            if d.leave_at.is_some_and(|l| l < enroll) {
                return invalid(format!("{}: leave_at before enroll_at", d.name));
            }
            let bad_interval = d
                .wifi_off
                .iter()
                .chain(&d.battery_low)
                .any(|i| i.to < i.from)
                || d.sensor_gaps.iter().any(|g| g.to < g.from);
            if bad_interval {
                return invalid(format!("{}: interval ends before it starts", d.name));
            }
            if let Some([lat, lon]) = d.home {
                if !(-90.0..=90.0).contains(&lat) || !lon.is_finite() {
                    return invalid(format!("{}: home outside the globe", d.name));
                }
            }
            if d.random_crashes > 0 {
                let mut rng = stream_rng(&super::device_seed(self.seed, &d.name), "crashes", 0);
                let span = (end - enroll).num_milliseconds();
                for i in 0..d.random_crashes {
                    let at = enroll + Duration::milliseconds(rng.random_range(0..span));
                    let mode = if i % 2 == 0 { CrashMode::MidUpload } else { CrashMode::Immediate };
                    d.crashes.push(CrashSpec { at, mode });
                }
                d.random_crashes = 0;
            }
            d.crashes.sort_by_key(|c| c.at);
        }
        Ok(devices)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "seed": 1,
        "start": "2020-08-01T06:00:00Z",
        "duration_days": 1,
        "study": {"study_id": "S", "name": "Sim", "duration_days": 84, "n_subjects": 2,
                  "sensors": [{"name": "location"}]},
        "fleet": {"count": 2, "random_crashes": 3}
    }"#;

    #[test]
    fn parses_and_expands() {
        let s = Scenario::from_json(MINIMAL).unwrap();
        let devices = s.resolved_devices().unwrap();
        assert_eq!(devices.len(), 2);
        assert_eq!(devices[0].name, "device01");
        assert_eq!(devices[0].crashes.len(), 3);
        assert!(devices[0].crashes.iter().any(|c| c.mode == CrashMode::MidUpload));
        assert_eq!(s.resolved_devices().unwrap(), devices, "expansion is deterministic");
    }

    #[test]
    fn rejects_bad_scenarios() {
        assert!(Scenario::from_json(r#"{"bogus": 1}"#).is_err());
        let mut s = Scenario::from_json(MINIMAL).unwrap();
        s.fleet = None;
        assert!(matches!(s.resolved_devices(), Err(SimError::ScenarioInvalid(_))));
        let mut s = Scenario::from_json(MINIMAL).unwrap();
        s.duration_days = 0.0;
        assert!(s.resolved_devices().is_err());
    }
}
