//! Browser bindings: trace anonymization, IMU synthesis with the still gate,
//! and the time-in-study counter. Every export returns a JSON string.

use chrono::{DateTime, TimeZone, Utc};
use serde::Serialize;
use wasm_bindgen::prelude::*;

use telemon_core::geo::{derive_key, haversine_m, travelled_distance, wgs84_to_ecef, Wgs84Point};
use telemon_core::qc::{legend, status_code_legend, time_in_study};
use telemon_core::sensor::{SensorKind, SensorSpec};
use telemon_core::sim::generators::{generate_imu, generate_location, still_gate, Activity, STILL_WINDOW_S};
use telemon_core::sim::stream_rng;

#[derive(Serialize)]
struct TracePoint {
    lat: f64,
    lon: f64,
}

impl From<&Wgs84Point> for TracePoint {
    fn from(p: &Wgs84Point) -> Self {
        TracePoint {
            lat: p.latitude_deg,
            lon: p.longitude_deg,
        }
    }
}

#[derive(Serialize)]
struct AnonymizedTrace {
    measured: Vec<TracePoint>,
    anonymized: Vec<TracePoint>,
    measured_length_m: f64,
    anonymized_length_m: f64,
    /// Largest change in any 3-D chord between consecutive fixes.
    max_chord_change_m: f64,
    displacement_km: f64,
}

fn seed32(seed: u32) -> [u8; 32] {
    let mut s = [0u8; 32];
    s[..4].copy_from_slice(&seed.to_be_bytes());
    s
}

fn demo_start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2020, 8, 1, 8, 0, 0).unwrap()
}

/// One day of 5-minute fixes around `home`, anonymized with a key minted
/// from `key_seed`.
pub fn anonymize_trace_json(lat: f64, lon: f64, fixes: u32, key_seed: u32, walk_seed: u32) -> Result<String, String> {
    let home = Wgs84Point::surface(lat, lon).map_err(|e| e.to_string())?;
    let mut seed = [0u8; 16];
    seed[..4].copy_from_slice(&key_seed.to_be_bytes());
    let key = derive_key(seed);
    let mut rng = stream_rng(&seed32(walk_seed), "demo.walk", 0);
    let fixes = generate_location(&home, &key, demo_start(), i64::from(fixes.clamp(2, 2000)) * 300, 300, &mut rng)
        .map_err(|e| e.to_string())?;
    let measured: Vec<Wgs84Point> = fixes.iter().map(|f| f.measured).collect();
    let anonymized: Vec<Wgs84Point> = fixes
        .iter()
        .map(|f| Wgs84Point {
            latitude_deg: f.sample.latitude_deg,
            longitude_deg: f.sample.longitude_deg,
            altitude_m: f.sample.altitude_m,
        })
        .collect();
    let chord = |a: &Wgs84Point, b: &Wgs84Point| wgs84_to_ecef(a).distance(&wgs84_to_ecef(b));
    let max_chord_change_m = measured
        .windows(2)
        .zip(anonymized.windows(2))
        .map(|(m, a)| (chord(&m[0], &m[1]) - chord(&a[0], &a[1])).abs())
        .fold(0.0, f64::max);
    let out = AnonymizedTrace {
        measured_length_m: travelled_distance(&measured),
        anonymized_length_m: travelled_distance(&anonymized),
        max_chord_change_m,
        displacement_km: haversine_m(&measured[0], &anonymized[0]) / 1000.0,
        measured: measured.iter().map(TracePoint::from).collect(),
        anonymized: anonymized.iter().map(TracePoint::from).collect(),
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct ImuWindow {
    frequency_hz: f64,
    samples: usize,
    /// Magnitude per sample, decimated to at most 600 points for plotting.
    magnitude: Vec<f64>,
    trailing_sd: f64,
    gate: telemon_core::sim::generators::Gate,
}

/// Accelerometer samples for `motion` and the still-detection decision.
pub fn imu_window_json(motion: &str, frequency_hz: f64, seconds: f64, seed: u32) -> Result<String, String> {
    let motion: Activity =
        serde_json::from_value(serde_json::Value::String(motion.to_owned())).map_err(|_| format!("unknown motion {motion:?}"))?;
    if !(seconds > 0.0 && seconds <= 600.0) {
        return Err("seconds must be in (0, 600]".into());
    }
    let spec = SensorSpec {
        name: SensorKind::Accelerometer,
        frequency: frequency_hz,
    };
    let mut rng = stream_rng(&seed32(seed), "demo.imu", 0);
    let samples = generate_imu(&spec, demo_start(), seconds, motion, &mut rng).map_err(|e| e.to_string())?;
    let last = samples.last().map_or(0, |s| s.t_ms);
    let tail: Vec<f64> = samples
        .iter()
        .filter(|s| s.t_ms > last - (STILL_WINDOW_S * 1000.0) as i64)
        .map(|s| s.magnitude())
        .collect();
    let mean = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    let var = tail.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / tail.len().max(1) as f64;
    let step = samples.len().div_ceil(600).max(1);
    let out = ImuWindow {
        frequency_hz,
        samples: samples.len(),
        magnitude: samples.iter().step_by(step).map(|s| s.magnitude()).collect(),
        trailing_sd: var.sqrt(),
        gate: still_gate(&samples, STILL_WINDOW_S),
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct StudyClock {
    time_in_study_days: i64,
    legend: Vec<telemon_core::qc::LegendEntry>,
    status_codes: Vec<telemon_core::qc::StatusCodeEntry>,
}

/// Whole days between two RFC 3339 instants, with the dashboard palette.
pub fn time_in_study_json(registered: &str, now: &str) -> Result<String, String> {
    let parse = |s: &str| {
        DateTime::parse_from_rfc3339(s.trim())
            .map(|t| t.with_timezone(&Utc))
            .map_err(|e| format!("{s:?}: {e}"))
    };
    let days = time_in_study(parse(registered)?, parse(now)?).map_err(|e| e.to_string())?;
    serde_json::to_string(&StudyClock {
        time_in_study_days: days,
        legend: legend(),
        status_codes: status_code_legend(),
    })
    .map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = anonymizeTrace)]
pub fn anonymize_trace(lat: f64, lon: f64, fixes: u32, key_seed: u32, walk_seed: u32) -> Result<String, JsError> {
    anonymize_trace_json(lat, lon, fixes, key_seed, walk_seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = imuWindow)]
pub fn imu_window(motion: &str, frequency_hz: f64, seconds: f64, seed: u32) -> Result<String, JsError> {
    imu_window_json(motion, frequency_hz, seconds, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = timeInStudy)]
pub fn time_in_study_days(registered: &str, now: &str) -> Result<String, JsError> {
    time_in_study_json(registered, now).map_err(|e| JsError::new(&e))
}
