//! Deterministic discrete-event fleet runner.
//!
//! Devices are sequential actors sharing nothing but the API. Events are
//! ordered by (simulated instant, insertion sequence), so a scenario and
//! seed fix the interleaving and the event log byte for byte.

use chrono::{DateTime, Duration, Utc};
use parking_lot::Mutex;
use serde::Serialize;
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;
use std::time::Instant;
use uuid::Uuid;

use super::device::{Device, DeviceEvent, GeneratedBatch, SyncOutcome};
use super::scenario::{CrashMode, Scenario};
use super::SimError;
use crate::api::{ApiClient, ClientError, Request, Response, Transport};
use crate::geo::Wgs84Point;
use crate::platform::TokenRequest;
use crate::qc::{Flag, QcTable};
use crate::sensor::SensorKind;

#[derive(Debug, Clone)]
pub struct FleetOptions {
    pub admin_credential: String,
    /// Simulated seconds per wall-clock second; `None` runs unpaced.
    pub speedup: Option<f64>,
    /// Replaces the scenario's seed.
    pub seed: Option<u64>,
}

impl FleetOptions {
    pub fn unpaced(admin_credential: &str) -> Self {
        FleetOptions {
            admin_credential: admin_credential.to_owned(),
            speedup: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct QcRowSummary {
    pub token_id: String,
    pub flags: Vec<Flag>,
    pub status_code: Option<u8>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum RunEvent {
    StudyCreated { study_id: String },
    TokensIssued { count: usize },
    QcProbe { rows: Vec<QcRowSummary> },
    Drained { remaining: usize },
    #[serde(untagged)]
    Device(DeviceEvent),
}

#[derive(Serialize)]
struct LogLine<'a> {
    t: DateTime<Utc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    device: Option<&'a str>,
    #[serde(flatten)]
    event: &'a RunEvent,
}

#[derive(Debug, Clone)]
pub struct DeviceReport {
    pub name: String,
    pub device_id: Uuid,
    pub token_id: Option<String>,
    pub generated: Vec<GeneratedBatch>,
    pub crashes: u32,
    pub imu_windows_paused: u64,
    pub remaining_buffered: usize,
    /// Pre-anonymization positions, for privacy oracles only.
    pub true_points: Vec<Wgs84Point>,
    pub measured_points: Vec<Wgs84Point>,
    pub anon_key_seed: Option<[u8; 16]>,
}

#[derive(Debug, Clone)]
pub struct FleetReport {
    pub study_id: String,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    /// Newline-delimited JSON records, one per line, without secrets.
    pub event_log: Vec<String>,
    pub qc_probes: Vec<QcTable>,
    /// QC at the end of the simulated period, before the final drain.
    pub final_qc: QcTable,
    pub devices: Vec<DeviceReport>,
    pub wall_time: std::time::Duration,
}

impl FleetReport {
    pub fn event_log_text(&self) -> String {
        let mut s = self.event_log.join("\n");
        s.push('\n');
        s
    }

    /// Simulated time per wall-clock time.
    pub fn effective_speedup(&self) -> f64 {
        (self.end - self.start).num_milliseconds() as f64 / 1000.0 / self.wall_time.as_secs_f64().max(1e-9)
    }
}

#[derive(Debug, Clone, Copy)]
enum Ev {
    Enroll(usize),
    Tick(usize, SensorKind, u64),
    SyncCheck(usize),
    Crash(usize, CrashMode),
    Restart(usize),
    ManualSync(usize),
    Leave(usize),
    Probe(usize),
}

struct Scheduled {
    t_ms: i64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, o: &Self) -> bool {
        (self.t_ms, self.seq) == (o.t_ms, o.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Scheduled {
    /// Reversed so the max-heap pops the earliest event.
    fn cmp(&self, o: &Self) -> Ordering {
        (o.t_ms, o.seq).cmp(&(self.t_ms, self.seq))
    }
}

struct Runner {
    heap: BinaryHeap<Scheduled>,
    seq: u64,
    end: DateTime<Utc>,
    log: Vec<String>,
    /// Bumped on each crash so ticks scheduled before it are ignored.
    epochs: Vec<u64>,
    leave_pending: Vec<bool>,
}

impl Runner {
    fn push(&mut self, t: DateTime<Utc>, ev: Ev) {
        if t <= self.end {
            self.seq += 1;
            self.heap.push(Scheduled {
                t_ms: t.timestamp_millis(),
                seq: self.seq,
                ev,
            });
        }
    }

    fn record(&mut self, t: DateTime<Utc>, device: Option<&str>, event: RunEvent) {
        let line = LogLine { t, device, event: &event };
        self.log.push(serde_json::to_string(&line).expect("log line serializes"));
    }

    fn flush(&mut self, d: &mut Device) {
        for (t, e) in d.take_events() {
            self.record(t, Some(d.name()), RunEvent::Device(e));
        }
    }

    fn schedule_ticks(&mut self, i: usize, d: &Device) {
        for spec in d.sensors() {
            if let Some(t) = d.next_tick(spec.name) {
                self.push(t, Ev::Tick(i, spec.name, self.epochs[i]));
            }
        }
    }
}

fn probe_summary(table: &QcTable) -> Vec<QcRowSummary> {
    table
        .rows
        .iter()
        .map(|r| QcRowSummary {
            token_id: r.token_id.clone(),
            flags: r.flags.iter().copied().collect(),
            status_code: r.status_code,
        })
        .collect()
}

/// Runs a scenario against whatever serves the API behind `transport`. The
/// service must run on the simulated clock.
pub fn run_fleet(scenario: &Scenario, transport: Arc<dyn Transport>, opts: &FleetOptions) -> Result<FleetReport, SimError> {
    let wall_start = Instant::now();
    let mut scenario = scenario.clone();
    if let Some(seed) = opts.seed {
        scenario.seed = seed;
    }
    let specs = scenario.resolved_devices()?;
    let (start, end) = (scenario.start, scenario.end());

    let mut admin = ApiClient::new(transport.clone()).with_admin(opts.admin_credential.clone());
    let mut run = Runner {
        heap: BinaryHeap::new(),
        seq: 0,
        end,
        log: Vec::new(),
        epochs: vec![0; specs.len()],
        leave_pending: vec![false; specs.len()],
    };

    admin.set_now(start);
    let cfg = admin.create_study(&scenario.study)?;
    run.record(start, None, RunEvent::StudyCreated { study_id: cfg.study_id.clone() });
    let sheet = admin.generate_tokens(
        &cfg.study_id,
        &TokenRequest {
            count: Some(specs.len() as u32),
            ..TokenRequest::default()
        },
    )?;
    run.record(start, None, RunEvent::TokensIssued { count: sheet.tokens.len() });
    // Each device scans its subject's primary code.
    let mut primary = sheet.tokens.iter().filter(|t| t.token_id.ends_with("_1"));

    let mut devices: Vec<Device> = Vec::with_capacity(specs.len());
    let mut payloads = Vec::with_capacity(specs.len());
    for (i, spec) in specs.into_iter().enumerate() {
        let token = primary
            .next()
            .ok_or_else(|| SimError::ScenarioInvalid("fewer subjects than devices".into()))?;
        payloads.push(token.qr_payload.clone());
        let d = Device::new(spec, scenario.seed, transport.clone());
        run.push(d.spec.enroll_at.unwrap_or(start), Ev::Enroll(i));
        for c in d.spec.crashes.clone() {
            run.push(c.at, Ev::Crash(i, c.mode));
        }
        for t in d.spec.manual_syncs.clone() {
            run.push(t, Ev::ManualSync(i));
        }
        if let Some(t) = d.spec.leave_at {
            run.push(t, Ev::Leave(i));
        }
        let interval_ms = i64::from(scenario.sync_interval_s) * 1000;
        let offset = d.sync_offset_ms(interval_ms);
        let first = (start.timestamp_millis() - offset).div_euclid(interval_ms) * interval_ms + offset + interval_ms;
        run.push(DateTime::from_timestamp_millis(first).expect("in range"), Ev::SyncCheck(i));
        devices.push(d);
    }
    for (i, t) in scenario.qc_probes.iter().enumerate() {
        run.push(*t, Ev::Probe(i));
    }

    let sync_interval = Duration::seconds(i64::from(scenario.sync_interval_s));
    let restart_delay = Duration::seconds(i64::from(scenario.restart_delay_s));
    let mut qc_probes = Vec::new();

    while let Some(Scheduled { t_ms, ev, .. }) = run.heap.pop() {
        let now = DateTime::from_timestamp_millis(t_ms).expect("in range");
        if let Some(x) = opts.speedup {
            let target = (now - start).num_milliseconds() as f64 / 1000.0 / x;
            let elapsed = wall_start.elapsed().as_secs_f64();
            if target > elapsed {
                std::thread::sleep(std::time::Duration::from_secs_f64(target - elapsed));
            }
        }
        match ev {
            Ev::Enroll(i) => {
                let d = &mut devices[i];
                if d.enroll(&payloads[i], now).is_ok() {
                    run.schedule_ticks(i, d);
                }
                run.flush(d);
            }
            Ev::Tick(i, sensor, epoch) => {
                let d = &mut devices[i];
                if epoch == run.epochs[i] && d.is_up() {
                    d.catch_up_sensor(sensor, now)?;
                    if let Some(t) = d.next_tick(sensor) {
                        run.push(t, Ev::Tick(i, sensor, epoch));
                    }
                    run.flush(d);
                }
            }
            Ev::SyncCheck(i) => {
                let d = &mut devices[i];
                if let SyncOutcome::Crashed = d.sync(now, false) {
                    d.crash(now, CrashMode::MidUpload);
                    run.epochs[i] += 1;
                    run.push(now + restart_delay, Ev::Restart(i));
                }
                run.flush(d);
                run.push(now + sync_interval, Ev::SyncCheck(i));
            }
            Ev::ManualSync(i) => {
                let d = &mut devices[i];
                d.request_manual_sync();
                if let SyncOutcome::Crashed = d.sync(now, false) {
                    d.crash(now, CrashMode::MidUpload);
                    run.epochs[i] += 1;
                    run.push(now + restart_delay, Ev::Restart(i));
                }
                run.flush(d);
            }
            Ev::Crash(i, mode) => {
                let d = &mut devices[i];
                match mode {
                    CrashMode::MidUpload => d.crash_armed = true,
                    CrashMode::Immediate if d.is_up() => {
                        d.crash(now, mode);
                        run.epochs[i] += 1;
                        run.push(now + restart_delay, Ev::Restart(i));
                        run.flush(d);
                    }
                    CrashMode::Immediate => {}
                }
            }
            Ev::Restart(i) => {
                let d = &mut devices[i];
                let limit = match d.spec.leave_at {
                    Some(l) if run.leave_pending[i] => now.min(l),
                    _ => now,
                };
                d.restart(limit)?;
                if std::mem::take(&mut run.leave_pending[i]) {
                    let _ = d.leave(limit);
                }
                run.schedule_ticks(i, d);
                run.flush(d);
            }
            Ev::Leave(i) => {
                let d = &mut devices[i];
                if !d.is_up() {
                    run.leave_pending[i] = true;
                } else if d.is_enrolled() && !d.has_left() {
                    let _ = d.leave(now);
                    run.flush(d);
                }
            }
            Ev::Probe(i) => {
                let at = scenario.qc_probes[i];
                admin.set_now(now);
                let table = admin.qc(&cfg.study_id, Some(at))?;
                run.record(now, None, RunEvent::QcProbe { rows: probe_summary(&table) });
                qc_probes.push(table);
            }
        }
    }

    admin.set_now(end);
    let final_qc = admin.qc(&cfg.study_id, Some(end))?;

    // Final drain: every device comes back up and force-syncs until its
    // buffer is empty or a pass makes no progress.
    for (i, d) in devices.iter_mut().enumerate() {
        if !d.is_up() {
            let limit = match d.spec.leave_at {
                Some(l) if run.leave_pending[i] => end.min(l),
                _ => end,
            };
            d.restart(limit)?;
            if std::mem::take(&mut run.leave_pending[i]) {
                let _ = d.leave(limit);
            }
        }
        d.crash_armed = false;
        loop {
            let before = d.buffer().len();
            if before == 0 {
                break;
            }
            d.sync(end, true);
            if d.buffer().len() >= before {
                break;
            }
        }
        run.flush(d);
    }
    let remaining = devices.iter().map(|d| d.buffer().len()).sum();
    run.record(end, None, RunEvent::Drained { remaining });

    Ok(FleetReport {
        study_id: cfg.study_id,
        start,
        end,
        event_log: run.log,
        qc_probes,
        final_qc,
        devices: devices
            .into_iter()
            .map(|d| DeviceReport {
                name: d.spec.name.clone(),
                device_id: d.device_id,
                token_id: d.token_id().map(str::to_owned),
                remaining_buffered: d.buffer().len(),
                generated: d.generated,
                crashes: d.crashes,
                imu_windows_paused: d.imu_windows_paused,
                true_points: d.true_points,
                measured_points: d.measured_points,
                anon_key_seed: d.anon_key_seed,
            })
            .collect(),
        wall_time: wall_start.elapsed(),
    })
}

/// Request and response as they crossed the wire.
#[derive(Debug, Clone)]
pub struct WireRecord {
    pub request: Request,
    pub response: Option<Response>,
}

/// Transport wrapper that keeps a copy of all traffic.
pub struct Recorder<T> {
    inner: T,
    records: Mutex<Vec<WireRecord>>,
}

impl<T> Recorder<T> {
    pub fn new(inner: T) -> Self {
        Recorder {
            inner,
            records: Mutex::new(Vec::new()),
        }
    }

    pub fn take(&self) -> Vec<WireRecord> {
        std::mem::take(&mut self.records.lock())
    }
}

impl<T: Transport> Transport for Recorder<T> {
    fn call(&self, req: Request) -> Result<Response, ClientError> {
        let result = self.inner.call(req.clone());
        self.records.lock().push(WireRecord {
            request: req,
            response: result.as_ref().ok().cloned(),
        });
        result
    }
}
