//! One simulated phone.
//!
//! State is split the way a real app's is: the local buffer, generator
//! cursors and enrollment live in durable storage and survive a crash;
//! pending manual-sync requests and anything in flight do not.

use chrono::{DateTime, Duration, Timelike, Utc};
use rand::{Rng, RngCore};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;
use uuid::Uuid;

use super::generators::{
    day_sessions, generate_imu, har_step, location_tick, sync_decision, usage_snapshot, Activity, Gate,
    HarPayload, ImuPayload, LocationPayload, SyncDecision, WalkState, APP_CATALOG, IMU_BATCH_MAX_S,
    IMU_BATCH_MAX_SAMPLES, STILL_WINDOW_S,
};
use super::scenario::DeviceSpec;
use super::{stream_rng, SimError};
use crate::api::{ApiClient, ClientError, EnrollRequest, Transport};
use crate::datastore::ObjectId;
use crate::enrollment::{parse_qr_payload, TokenSecret};
use crate::geo::{derive_key, AnonymizationKey, Wgs84Point};
use crate::ingestion::{BatchReceipt, ReceiptOutcome, SensorBatch};
use crate::registry::StudyConfig;
use crate::sensor::{SensorKind, SensorSpec};

/// Persisted queue of batches awaiting a receipt.
#[derive(Debug, Default, Clone)]
pub struct LocalBuffer {
    pending: VecDeque<SensorBatch>,
    acked: BTreeSet<Uuid>,
}

impl LocalBuffer {
    pub fn push(&mut self, batch: SensorBatch) {
        self.pending.push_back(batch);
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn front(&self) -> Option<&SensorBatch> {
        self.pending.front()
    }

    /// Deletes the front batch once the server has acknowledged it.
    pub fn ack_front(&mut self) -> Option<SensorBatch> {
        let b = self.pending.pop_front()?;
        self.acked.insert(b.header.batch_id);
        Some(b)
    }

    /// Drops the front batch without an acknowledgement.
    pub fn discard_front(&mut self) -> Option<SensorBatch> {
        self.pending.pop_front()
    }

    pub fn acked(&self) -> &BTreeSet<Uuid> {
        &self.acked
    }
}

struct DeviceEnrollment {
    study_id: String,
    token_id: String,
    secret: TokenSecret,
    config: StudyConfig,
    /// Dropped when the participant leaves.
    anon_key: Option<AnonymizationKey>,
}

#[derive(Default)]
struct Durable {
    enrollment: Option<DeviceEnrollment>,
    buffer: LocalBuffer,
    /// Next tick index per sensor.
    cursors: BTreeMap<SensorKind, i64>,
    walk: WalkState,
    har: Option<Activity>,
    left: bool,
}

#[derive(Default)]
struct Volatile {
    manual_pending: bool,
}

/// Something the fleet log records.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum DeviceEvent {
    Enrolled { token_id: String },
    EnrollFailed { error_code: String },
    Buffered { sensor: SensorKind, batch_id: Uuid },
    SyncStarted { buffered: usize, manual: bool },
    Uploaded { batch_id: Uuid, outcome: ReceiptOutcome },
    Rejected { batch_id: Uuid, error_code: String },
    TransportError { detail: String },
    Notifications { count: usize },
    Crashed { mode: super::scenario::CrashMode },
    Restarted { caught_up: usize },
    Left,
    LeaveFailed { error_code: String },
}

/// Batch the device handed to its buffer, for end-state oracles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedBatch {
    pub batch_id: Uuid,
    pub sensor: SensorKind,
    pub object: ObjectId,
}

pub enum SyncOutcome {
    Done,
    /// The device died mid-upload.
    Crashed,
}

pub struct Device {
    pub spec: DeviceSpec,
    pub device_id: Uuid,
    seed: [u8; 32],
    home: Wgs84Point,
    durable: Durable,
    volatile: Option<Volatile>,
    client: ApiClient<Arc<dyn Transport>>,
    events: Vec<(DateTime<Utc>, DeviceEvent)>,
    /// Fault injection: die during the next upload.
    pub crash_armed: bool,

    // Oracle ledgers kept by the harness, never sent anywhere.
    pub generated: Vec<GeneratedBatch>,
    pub true_points: Vec<Wgs84Point>,
    pub measured_points: Vec<Wgs84Point>,
    pub anon_key_seed: Option<[u8; 16]>,
    pub imu_windows_paused: u64,
    pub crashes: u32,
}

fn tick_schedule(spec: &SensorSpec) -> (i64, i64) {
    if spec.name.is_imu() {
        (imu_window_ms(spec.frequency), 0)
    } else if spec.name == SensorKind::ApplicationUsage {
        // Snapshots just before each cadence boundary: 23:59:59 for daily.
        (spec.cadence_s() * 1000, -1000)
    } else {
        (spec.cadence_s() * 1000, 0)
    }
}

/// IMU batches close after 60 s or 5000 samples.
pub fn imu_window_ms(frequency_hz: f64) -> i64 {
    let by_count = (IMU_BATCH_MAX_SAMPLES as f64 / frequency_hz * 1000.0).floor();
    by_count.min(IMU_BATCH_MAX_S * 1000.0) as i64
}

fn tick_time(spec: &SensorSpec, k: i64) -> DateTime<Utc> {
    let (period, offset) = tick_schedule(spec);
    DateTime::from_timestamp_millis(k * period + offset).expect("tick in range")
}

/// First tick strictly after `t`.
fn first_tick_after(spec: &SensorSpec, t: DateTime<Utc>) -> i64 {
    let (period, offset) = tick_schedule(spec);
    (t.timestamp_millis() - offset).div_euclid(period) + 1
}

impl Device {
    pub fn new(spec: DeviceSpec, scenario_seed: u64, transport: Arc<dyn Transport>) -> Self {
        let seed = super::device_seed(scenario_seed, &spec.name);
        let mut rng = stream_rng(&seed, "identity", 0);
        let device_id = uuid::Builder::from_random_bytes(rng.random()).into_uuid();
        let [lat, lon] = spec.home.unwrap_or_else(|| {
            [
                50.93 + rng.random_range(-0.2..0.2),
                6.95 + rng.random_range(-0.3..0.3),
            ]
        });
        let home = Wgs84Point::new(lat, lon, rng.random_range(40.0..120.0)).expect("home validated");
        Device {
            spec,
            device_id,
            seed,
            home,
            durable: Durable::default(),
            volatile: Some(Volatile::default()),
            client: ApiClient::new(transport),
            events: Vec::new(),
            crash_armed: false,
            generated: Vec::new(),
            true_points: Vec::new(),
            measured_points: Vec::new(),
            anon_key_seed: None,
            imu_windows_paused: 0,
            crashes: 0,
        }
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn is_up(&self) -> bool {
        self.volatile.is_some()
    }

    pub fn is_enrolled(&self) -> bool {
        self.durable.enrollment.is_some()
    }

    pub fn has_left(&self) -> bool {
        self.durable.left
    }

    pub fn token_id(&self) -> Option<&str> {
        self.durable.enrollment.as_ref().map(|e| e.token_id.as_str())
    }

    pub fn buffer(&self) -> &LocalBuffer {
        &self.durable.buffer
    }

    pub fn sensors(&self) -> Vec<SensorSpec> {
        self.durable
            .enrollment
            .as_ref()
            .map(|e| e.config.sensors.clone())
            .unwrap_or_default()
    }

    /// Events since the last call.
    pub fn take_events(&mut self) -> Vec<(DateTime<Utc>, DeviceEvent)> {
        std::mem::take(&mut self.events)
    }

    fn log(&mut self, t: DateTime<Utc>, e: DeviceEvent) {
        self.events.push((t, e));
    }

    pub fn wifi_connected(&self, t: DateTime<Utc>) -> bool {
        let h = t.hour();
        !(8..18).contains(&h) && !self.spec.wifi_off.iter().any(|i| i.contains(t))
    }

    /// Charged overnight, draining 4 % per hour from 07:00.
    pub fn battery_pct(&self, t: DateTime<Utc>) -> f64 {
        if self.spec.battery_low.iter().any(|i| i.contains(t)) {
            return 10.0;
        }
        let hours = t.num_seconds_from_midnight() as f64 / 3600.0;
        if hours < 7.0 {
            100.0
        } else {
            100.0 - (hours - 7.0) * 4.0
        }
    }

    /// Scans the QR payload, registers, pulls the study configuration and
    /// mints the location key.
    pub fn enroll(&mut self, qr_payload: &str, now: DateTime<Utc>) -> Result<(), SimError> {
        self.client.set_now(now);
        let req = EnrollRequest {
            qr_payload: qr_payload.to_owned(),
            device_id: self.device_id,
            previous_token_id: None,
        };
        let enrolled = match self.client.enroll(&req) {
            Ok(e) => e,
            Err(e) => {
                self.log(now, DeviceEvent::EnrollFailed { error_code: e.code().unwrap_or("Transport").into() });
                return Err(e.into());
            }
        };
        let token = parse_qr_payload(qr_payload).map_err(|e| SimError::ScenarioInvalid(e.to_string()))?;
        let key_seed: [u8; 16] = stream_rng(&self.seed, "anon-key", 0).random();
        self.anon_key_seed = Some(key_seed);
        let config = enrolled.config;
        for spec in &config.sensors {
            self.durable.cursors.insert(spec.name, first_tick_after(spec, now));
        }
        self.durable.enrollment = Some(DeviceEnrollment {
            study_id: config.study_id.clone(),
            token_id: token.token_id.clone(),
            secret: token.secret,
            config,
            anon_key: Some(derive_key(key_seed)),
        });
        self.log(now, DeviceEvent::Enrolled { token_id: token.token_id });
        Ok(())
    }

    /// Next tick instant of a sensor, if it still records.
    pub fn next_tick(&self, sensor: SensorKind) -> Option<DateTime<Utc>> {
        if self.durable.left {
            return None;
        }
        let spec = self.durable.enrollment.as_ref()?.config.sensor(sensor)?;
        Some(tick_time(spec, *self.durable.cursors.get(&sensor)?))
    }

    /// Generates every tick of every sensor up to `now`. Returns the number
    /// of batches buffered.
    pub fn catch_up(&mut self, now: DateTime<Utc>) -> Result<usize, SimError> {
        let mut n = 0;
        for spec in self.sensors() {
            n += self.catch_up_sensor(spec.name, now)?;
        }
        Ok(n)
    }

    pub fn catch_up_sensor(&mut self, sensor: SensorKind, now: DateTime<Utc>) -> Result<usize, SimError> {
        let mut n = 0;
        while let Some(t) = self.next_tick(sensor) {
            if t > now {
                break;
            }
            let k = self.durable.cursors[&sensor];
            let batch = self.generate_tick(sensor, k, t)?;
            *self.durable.cursors.get_mut(&sensor).expect("cursor exists") += 1;
            if let Some(b) = batch {
                self.generated.push(GeneratedBatch {
                    batch_id: b.header.batch_id,
                    sensor,
                    object: ObjectId::of(&b.payload),
                });
                self.log(t, DeviceEvent::Buffered { sensor, batch_id: b.header.batch_id });
                self.durable.buffer.push(b);
                n += 1;
            }
        }
        Ok(n)
    }

    fn in_gap(&self, sensor: SensorKind, t: DateTime<Utc>) -> bool {
        self.spec
            .sensor_gaps
            .iter()
            .any(|g| g.sensor == sensor && g.from <= t && t < g.to)
    }

    /// Motion state of the 5-minute slot containing `t`. Nights are still.
    fn motion_at(&self, t: DateTime<Utc>) -> Activity {
        if t.hour() < 7 {
            return Activity::Still;
        }
        let slot = t.timestamp().div_euclid(300) as u64;
        let u: f64 = stream_rng(&self.seed, "motion", slot).random();
        match u {
            u if u < 0.6 => Activity::Still,
            u if u < 0.85 => Activity::Walking,
            u if u < 0.9 => Activity::Running,
            u if u < 0.95 => Activity::InVehicle,
            _ => Activity::Tilting,
        }
    }

    fn generate_tick(&mut self, sensor: SensorKind, k: i64, t: DateTime<Utc>) -> Result<Option<SensorBatch>, SimError> {
        let enr = self.durable.enrollment.as_ref().expect("ticks only run when enrolled");
        let spec = *enr.config.sensor(sensor).expect("sensor in config");
        let mut rng = stream_rng(&self.seed, sensor.name(), k as u64);
        let batch_id = uuid::Builder::from_random_bytes(rng.random()).into_uuid();
        let gap = self.in_gap(sensor, t);

        let payload = match sensor {
            SensorKind::Location => {
                let key = enr.anon_key.clone().expect("key present while recording");
                let fix = location_tick(&mut self.durable.walk, &self.home, &key, t, &mut rng)?;
                if gap {
                    return Ok(None);
                }
                self.true_points.push(fix.truth);
                self.measured_points.push(fix.measured);
                serde_json::to_vec(&LocationPayload { samples: vec![fix.sample] })
            }
            SensorKind::Activity => {
                let ev = har_step(self.durable.har, t, &mut rng);
                self.durable.har = Some(ev.activity);
                if gap {
                    return Ok(None);
                }
                serde_json::to_vec(&HarPayload { events: vec![ev] })
            }
            SensorKind::ApplicationUsage => {
                if gap {
                    return Ok(None);
                }
                let day = t.date_naive();
                let day_no = day.signed_duration_since(chrono::NaiveDate::default()).num_days() as u64;
                let sessions = day_sessions(APP_CATALOG.len(), &mut stream_rng(&self.seed, "app-usage-day", day_no));
                serde_json::to_vec(&usage_snapshot(&APP_CATALOG, &sessions, t))
            }
            imu => {
                let window = Duration::milliseconds(imu_window_ms(spec.frequency));
                let start = t - window;
                let motion = self.motion_at(start);
                let gate_spec = SensorSpec {
                    name: SensorKind::Accelerometer,
                    frequency: spec.frequency,
                };
                let secs = window.num_milliseconds() as f64 / 1000.0;
                let accel = generate_imu(&gate_spec, start, secs, motion, &mut rng)?;
                if super::generators::still_gate(&accel, STILL_WINDOW_S) == Gate::Pause {
                    self.imu_windows_paused += 1;
                    return Ok(None);
                }
                if gap {
                    return Ok(None);
                }
                let samples = if imu == SensorKind::Accelerometer {
                    accel
                } else {
                    generate_imu(&spec, start, secs, motion, &mut rng)?
                };
                serde_json::to_vec(&ImuPayload::new(spec.frequency, &samples))
            }
        }
        .expect("payload serializes");

        Ok(Some(SensorBatch::new(
            &enr.study_id,
            &enr.token_id,
            self.device_id,
            sensor,
            batch_id,
            t,
            payload,
        )))
    }

    pub fn request_manual_sync(&mut self) {
        if let Some(v) = &mut self.volatile {
            v.manual_pending = true;
        }
    }

    /// Runs the sync predicate and, if it says so, polls notifications and
    /// uploads the buffer front to back. `force` models the final manual
    /// sync at the end of a run.
    pub fn sync(&mut self, now: DateTime<Utc>, force: bool) -> SyncOutcome {
        let Some(vol) = &mut self.volatile else {
            return SyncOutcome::Done;
        };
        let manual = std::mem::take(&mut vol.manual_pending) || force;
        let buffered = self.durable.buffer.len();
        let decision = sync_decision(buffered, self.wifi_connected(now), self.battery_pct(now), manual);
        if decision == SyncDecision::Hold {
            return SyncOutcome::Done;
        }
        let Some(enr) = &self.durable.enrollment else {
            return SyncOutcome::Done;
        };
        let (study, token, secret) = (enr.study_id.clone(), enr.token_id.clone(), enr.secret);
        self.client.set_now(now);
        self.log(now, DeviceEvent::SyncStarted { buffered, manual });

        if !self.durable.left {
            match self.client.poll_notifications(&study, &token, &secret) {
                Ok(msgs) if !msgs.is_empty() => self.log(now, DeviceEvent::Notifications { count: msgs.len() }),
                Ok(_) => {}
                Err(ClientError::Transport(detail)) => {
                    self.log(now, DeviceEvent::TransportError { detail });
                    return SyncOutcome::Done;
                }
                Err(_) => {}
            }
        }

        while let Some(batch) = self.durable.buffer.front() {
            let batch_id = batch.header.batch_id;
            let req = self.client.batch_request(batch, &secret);
            if self.crash_armed {
                // The server processes the upload; the receipt is lost with
                // the process.
                let _ = self.client.transport().call(req);
                self.crash_armed = false;
                return SyncOutcome::Crashed;
            }
            match self.client.send::<BatchReceipt>(req) {
                Ok(receipt) => {
                    self.durable.buffer.ack_front();
                    self.log(now, DeviceEvent::Uploaded { batch_id, outcome: receipt.outcome });
                }
                Err(ClientError::Api { doc, .. }) if doc.error_code == "ChecksumMismatch" => {
                    // Corrupted on the way; keep it for the next sync.
                    self.log(now, DeviceEvent::Rejected { batch_id, error_code: doc.error_code });
                    break;
                }
                Err(ClientError::Api { doc, .. }) => {
                    self.durable.buffer.discard_front();
                    self.log(now, DeviceEvent::Rejected { batch_id, error_code: doc.error_code });
                }
                Err(ClientError::Transport(detail)) => {
                    self.log(now, DeviceEvent::TransportError { detail });
                    break;
                }
            }
        }
        SyncOutcome::Done
    }

    /// Loses everything volatile. Durable storage is untouched.
    pub fn crash(&mut self, now: DateTime<Utc>, mode: super::scenario::CrashMode) {
        if self.volatile.take().is_some() {
            self.crashes += 1;
            self.log(now, DeviceEvent::Crashed { mode });
        }
    }

    /// Auto-restart: back up, then backfill ticks missed while down.
    pub fn restart(&mut self, now: DateTime<Utc>) -> Result<usize, SimError> {
        if self.volatile.is_some() {
            return Ok(0);
        }
        self.volatile = Some(Volatile::default());
        let n = self.catch_up(now)?;
        self.log(now, DeviceEvent::Restarted { caught_up: n });
        Ok(n)
    }

    /// Leaves the study from the app. The location key is deleted; the
    /// buffer keeps draining within the server's grace window.
    pub fn leave(&mut self, now: DateTime<Utc>) -> Result<(), SimError> {
        self.catch_up(now)?;
        let Some(enr) = &mut self.durable.enrollment else {
            return Ok(());
        };
        let (study, token, secret) = (enr.study_id.clone(), enr.token_id.clone(), enr.secret);
        self.client.set_now(now);
        match self.client.leave(&study, &token, &secret) {
            Ok(_) => {
                if let Some(enr) = &mut self.durable.enrollment {
                    enr.anon_key = None;
                }
                self.durable.left = true;
                self.log(now, DeviceEvent::Left);
                Ok(())
            }
            Err(e) => {
                self.log(now, DeviceEvent::LeaveFailed { error_code: e.code().unwrap_or("Transport").into() });
                Err(e.into())
            }
        }
    }

    /// Stable per-device offset for staggering sync checks.
    pub fn sync_offset_ms(&self, interval_ms: i64) -> i64 {
        let mut rng = stream_rng(&self.seed, "sync-offset", 0);
        (rng.next_u64() % interval_ms as u64) as i64
    }
}
