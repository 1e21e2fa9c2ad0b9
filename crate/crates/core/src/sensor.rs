//! Sensor catalog shared by studies, ingestion and devices.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorKind {
    Accelerometer,
    Gyroscope,
    GravitySensor,
    LinearAcceleration,
    Location,
    Activity,
    ApplicationUsage,
}

impl SensorKind {
    pub const ALL: [SensorKind; 7] = [
        SensorKind::Accelerometer,
        SensorKind::Gyroscope,
        SensorKind::GravitySensor,
        SensorKind::LinearAcceleration,
        SensorKind::Location,
        SensorKind::Activity,
        SensorKind::ApplicationUsage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SensorKind::Accelerometer => "accelerometer",
            SensorKind::Gyroscope => "gyroscope",
            SensorKind::GravitySensor => "gravity_sensor",
            SensorKind::LinearAcceleration => "linear_acceleration",
            SensorKind::Location => "location",
            SensorKind::Activity => "activity",
            SensorKind::ApplicationUsage => "application_usage",
        }
    }

    /// IMU-class sensors are configured in Hz; everything else by cadence.
    pub fn is_imu(self) -> bool {
        matches!(
            self,
            SensorKind::Accelerometer
                | SensorKind::Gyroscope
                | SensorKind::GravitySensor
                | SensorKind::LinearAcceleration
        )
    }

    /// Hz for IMU sensors, seconds between samples otherwise.
    pub fn default_frequency(self) -> f64 {
        match self {
            SensorKind::Accelerometer
            | SensorKind::Gyroscope
            | SensorKind::GravitySensor
            | SensorKind::LinearAcceleration => 50.0,
            SensorKind::Location => 600.0,
            SensorKind::Activity => 300.0,
            SensorKind::ApplicationUsage => 86_400.0,
        }
    }

    /// Accepted inclusive range for the configured frequency.
    pub fn frequency_bounds(self) -> (f64, f64) {
        if self.is_imu() {
            (1.0, 200.0)
        } else {
            (60.0, 86_400.0)
        }
    }
}

impl fmt::Display for SensorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownSensor(pub String);

impl fmt::Display for UnknownSensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown sensor {:?}", self.0)
    }
}

impl std::error::Error for UnknownSensor {}

impl FromStr for SensorKind {
    type Err = UnknownSensor;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SensorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| UnknownSensor(s.to_owned()))
    }
}

/// A chosen sensor and its recording rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub name: SensorKind,
    /// Hz for IMU-class sensors, cadence in seconds for the others.
    pub frequency: f64,
}

impl SensorSpec {
    pub fn with_default(name: SensorKind) -> Self {
        Self {
            name,
            frequency: name.default_frequency(),
        }
    }

    /// Cadence in whole seconds for non-IMU sensors.
    pub fn cadence_s(&self) -> i64 {
        self.frequency.round() as i64
    }
}
