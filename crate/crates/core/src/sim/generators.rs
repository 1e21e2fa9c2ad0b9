//! Synthetic sensor data and the on-device scheduling predicates.

use chrono::{DateTime, Duration, NaiveDate, Timelike, Utc};
use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, Weibull};
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::geo::{anonymize_point, offset_point, AnonymizationKey, Wgs84Point};
use crate::sensor::{SensorKind, SensorSpec};

pub const GRAVITY: f64 = 9.81;
pub const REST_NOISE_SD: f64 = 0.02;
/// Accelerometer-magnitude standard deviation below which the phone counts
/// as lying still.
pub const STILL_THRESHOLD: f64 = 0.05;
pub const STILL_WINDOW_S: f64 = 30.0;
/// "Enough battery charge" for a scheduled sync.
pub const BATTERY_THRESHOLD_PCT: f64 = 20.0;
/// Median horizontal error of a fused location fix.
pub const FUSED_MEDIAN_ACCURACY_M: f64 = 14.0;
pub const IMU_BATCH_MAX_S: f64 = 60.0;
pub const IMU_BATCH_MAX_SAMPLES: usize = 5000;

/// Rayleigh scale whose median is [`FUSED_MEDIAN_ACCURACY_M`].
pub fn rayleigh_sigma() -> f64 {
    FUSED_MEDIAN_ACCURACY_M / 4f64.ln().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activity {
    Still,
    Walking,
    Running,
    OnBicycle,
    InVehicle,
    Tilting,
}

impl Activity {
    pub const ALL: [Activity; 6] = [
        Activity::Still,
        Activity::Walking,
        Activity::Running,
        Activity::OnBicycle,
        Activity::InVehicle,
        Activity::Tilting,
    ];

    fn weight(self) -> f64 {
        match self {
            Activity::Still => 0.5,
            Activity::Walking => 0.2,
            Activity::InVehicle | Activity::Tilting => 0.1,
            Activity::OnBicycle | Activity::Running => 0.05,
        }
    }

    fn index(self) -> usize {
        Activity::ALL.iter().position(|a| *a == self).expect("listed")
    }
}

pub const HAR_SELF_TRANSITION: f64 = 0.8;

/// Row-stochastic transition matrix of the activity chain, rows and columns
/// in [`Activity::ALL`] order.
pub fn har_transition_matrix() -> [[f64; 6]; 6] {
    let mut m = [[0.0; 6]; 6];
    for (i, from) in Activity::ALL.iter().enumerate() {
        let others: f64 = Activity::ALL.iter().filter(|a| *a != from).map(|a| a.weight()).sum();
        for (j, to) in Activity::ALL.iter().enumerate() {
            m[i][j] = if i == j {
                HAR_SELF_TRANSITION
            } else {
                (1.0 - HAR_SELF_TRANSITION) * to.weight() / others
            };
        }
    }
    m
}

fn pick<T: Copy>(items: &[(T, f64)], rng: &mut impl Rng) -> T {
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    let mut u = rng.random::<f64>() * total;
    for (item, w) in items {
        if u < *w {
            return *item;
        }
        u -= w;
    }
    items.last().expect("non-empty").0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarEvent {
    pub t: DateTime<Utc>,
    pub activity: Activity,
    pub confidence: u8,
}

/// One step of the activity chain. With no previous state the label is
/// drawn from the class weights.
pub fn har_step(prev: Option<Activity>, t: DateTime<Utc>, rng: &mut impl Rng) -> HarEvent {
    let activity = match prev {
        None => pick(&Activity::ALL.map(|a| (a, a.weight())), rng),
        Some(p) => {
            let row = har_transition_matrix()[p.index()];
            pick(&std::array::from_fn::<_, 6, _>(|j| (Activity::ALL[j], row[j])), rng)
        }
    };
    let conf: f64 = Normal::new(85.0, 5.0).expect("valid").sample(rng);
    HarEvent {
        t,
        activity,
        confidence: conf.round().clamp(0.0, 100.0) as u8,
    }
}

/// Events at every cadence tick of `[start, start + window_s)`.
pub fn generate_har(
    start: DateTime<Utc>,
    window_s: i64,
    cadence_s: i64,
    rng: &mut impl Rng,
) -> Result<Vec<HarEvent>, SimError> {
    if cadence_s < 60 {
        return Err(SimError::InvalidSpec(format!("activity cadence {cadence_s} s below 60 s")));
    }
    let mut prev = None;
    Ok((0..window_s / cadence_s)
        .map(|k| {
            let ev = har_step(prev, start + Duration::seconds(k * cadence_s), rng);
            prev = Some(ev.activity);
            ev
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    /// Milliseconds since the Unix epoch.
    pub t_ms: i64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl ImuSample {
    pub fn magnitude(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

/// (step frequency Hz, vertical amplitude m/s², broadband noise sd)
fn motion_params(motion: Activity) -> (f64, f64, f64) {
    match motion {
        Activity::Still => (0.0, 0.0, REST_NOISE_SD),
        Activity::Tilting => (0.0, 0.0, REST_NOISE_SD),
        Activity::Walking => (2.0, 2.0, 0.1),
        Activity::Running => (2.8, 4.0, 0.2),
        Activity::OnBicycle => (1.5, 1.0, 0.15),
        Activity::InVehicle => (0.0, 0.0, 0.3),
    }
}

/// Triaxial samples at the configured frequency over `[start, start + duration_s)`.
pub fn generate_imu(
    spec: &SensorSpec,
    start: DateTime<Utc>,
    duration_s: f64,
    motion: Activity,
    rng: &mut impl Rng,
) -> Result<Vec<ImuSample>, SimError> {
    let (lo, hi) = SensorKind::Accelerometer.frequency_bounds();
    if !spec.name.is_imu() {
        return Err(SimError::InvalidSpec(format!("{} is not an IMU sensor", spec.name)));
    }
    if !(lo..=hi).contains(&spec.frequency) {
        return Err(SimError::InvalidSpec(format!(
            "{} frequency {} Hz outside [{lo}, {hi}]",
            spec.name, spec.frequency
        )));
    }
    let n = (duration_s * spec.frequency).round().max(0.0) as usize;
    let (step_hz, amp, noise_sd) = motion_params(motion);
    let noise = Normal::new(0.0, noise_sd).expect("valid sd");
    let gyro_noise = Normal::new(0.0, 0.005).expect("valid sd");
    let t0_ms = start.timestamp_millis();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let offset_s = k as f64 / spec.frequency;
        let t_ms = t0_ms + (offset_s * 1000.0).round() as i64;
        let ts = t_ms as f64 / 1000.0;
        let phase = 2.0 * std::f64::consts::PI * step_hz * ts;
        // Gravity direction sways slowly while the phone is being tilted.
        let tilt = if motion == Activity::Tilting {
            0.3 * (2.0 * std::f64::consts::PI * 0.1 * ts).sin()
        } else {
            0.0
        };
        let (gx, gz) = (GRAVITY * tilt.sin(), GRAVITY * tilt.cos());
        let (lx, ly, lz) = (0.25 * amp * (phase / 2.0).sin(), 0.0, amp * phase.sin());
        let (x, y, z) = match spec.name {
            SensorKind::Accelerometer => (
                gx + lx + noise.sample(rng),
                ly + noise.sample(rng),
                gz + lz + noise.sample(rng),
            ),
            SensorKind::LinearAcceleration => (
                lx + noise.sample(rng),
                ly + noise.sample(rng),
                lz + noise.sample(rng),
            ),
            SensorKind::GravitySensor => (
                gx + gyro_noise.sample(rng),
                gyro_noise.sample(rng),
                gz + gyro_noise.sample(rng),
            ),
            _ => (
                0.1 * amp * phase.cos() + gyro_noise.sample(rng),
                0.25 * amp * (phase / 2.0).cos() + gyro_noise.sample(rng),
                gyro_noise.sample(rng),
            ),
        };
        out.push(ImuSample { t_ms, x, y, z });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Gate {
    Record,
    Pause,
}

/// Strict threshold on the magnitude standard deviation.
pub fn gate_from_sd(sd: f64) -> Gate {
    if sd < STILL_THRESHOLD {
        Gate::Pause
    } else {
        Gate::Record
    }
}

/// Still detection over the trailing `window_s` of accelerometer samples.
/// Less than one second of data never pauses.
pub fn still_gate(samples: &[ImuSample], window_s: f64) -> Gate {
    let (Some(first), Some(last)) = (samples.first(), samples.last()) else {
        return Gate::Record;
    };
    // Covered time includes the last sample's own period.
    let n = samples.len() as i64;
    let span = last.t_ms - first.t_ms;
    if n < 2 || span + span / (n - 1) < 1000 {
        return Gate::Record;
    }
    let cutoff = last.t_ms - (window_s * 1000.0) as i64;
    let mags: Vec<f64> = samples
        .iter()
        .filter(|s| s.t_ms > cutoff)
        .map(ImuSample::magnitude)
        .collect();
    let n = mags.len() as f64;
    let mean = mags.iter().sum::<f64>() / n;
    let var = mags.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n;
    gate_from_sd(var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocationSample {
    pub t: DateTime<Utc>,
    pub latitude_deg: f64,
    pub longitude_deg: f64,
    pub altitude_m: f64,
    pub accuracy_m: f64,
}

/// Mean-reverting random walk around home, in metres.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WalkState {
    pub north_m: f64,
    pub east_m: f64,
}

pub fn draw_accuracy(rng: &mut impl Rng) -> f64 {
    Weibull::new(rayleigh_sigma() * std::f64::consts::SQRT_2, 2.0)
        .expect("valid Rayleigh")
        .sample(rng)
}

/// One location fix: the true position, the noisy fix, and the anonymized
/// sample that is the only thing ever buffered.
pub struct LocationFix {
    pub truth: Wgs84Point,
    pub measured: Wgs84Point,
    pub sample: LocationSample,
}

pub fn location_tick(
    walk: &mut WalkState,
    home: &Wgs84Point,
    key: &AnonymizationKey,
    t: DateTime<Utc>,
    rng: &mut impl Rng,
) -> Result<LocationFix, SimError> {
    let step = Normal::new(0.0, 100.0).expect("valid sd");
    walk.north_m = 0.9 * walk.north_m + step.sample(rng);
    walk.east_m = 0.9 * walk.east_m + step.sample(rng);
    let truth = offset_point(home, walk.north_m, walk.east_m);
    let r = draw_accuracy(rng);
    let theta = rng.random::<f64>() * std::f64::consts::TAU;
    let measured = offset_point(&truth, r * theta.cos(), r * theta.sin());
    let anon = anonymize_point(&measured, key)?;
    Ok(LocationFix {
        truth,
        measured,
        sample: LocationSample {
            t,
            latitude_deg: anon.latitude_deg,
            longitude_deg: anon.longitude_deg,
            altitude_m: anon.altitude_m,
            accuracy_m: r,
        },
    })
}

/// Fixes at every cadence tick of `[start, start + window_s)`.
pub fn generate_location(
    home: &Wgs84Point,
    key: &AnonymizationKey,
    start: DateTime<Utc>,
    window_s: i64,
    cadence_s: i64,
    rng: &mut impl Rng,
) -> Result<Vec<LocationFix>, SimError> {
    if cadence_s < 60 {
        return Err(SimError::InvalidSpec(format!("location cadence {cadence_s} s below 60 s")));
    }
    let mut walk = WalkState::default();
    (0..window_s / cadence_s)
        .map(|k| location_tick(&mut walk, home, key, start + Duration::seconds(k * cadence_s), rng))
        .collect()
}

/// Installed apps. Calls and SMS are tracked as apps like any other.
pub const APP_CATALOG: [&str; 10] = [
    "phone_calls",
    "sms",
    "messenger",
    "browser",
    "email",
    "maps",
    "music",
    "camera",
    "social",
    "news",
];

const APP_WEIGHTS: [f64; 10] = [0.08, 0.07, 0.25, 0.15, 0.08, 0.05, 0.07, 0.05, 0.15, 0.05];

/// One foreground session in seconds since midnight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UsageSession {
    pub app: usize,
    pub start_s: u32,
    pub end_s: u32,
}

/// A day of non-overlapping foreground sessions between 07:00 and midnight.
pub fn day_sessions(n_apps: usize, rng: &mut impl Rng) -> Vec<UsageSession> {
    let gap = Exp::new(1.0 / 1200.0).expect("valid rate");
    let dur = Exp::new(1.0 / 240.0).expect("valid rate");
    let weights: Vec<(usize, f64)> = (0..n_apps)
        .map(|i| (i, APP_WEIGHTS.get(i).copied().unwrap_or(0.05)))
        .collect();
    let mut out = Vec::new();
    let mut t: f64 = 7.0 * 3600.0;
    loop {
        t += gap.sample(rng);
        if t >= 86_399.0 {
            break;
        }
        let d: f64 = dur.sample(rng);
        let end = (t + d.max(5.0)).min(86_399.0);
        out.push(UsageSession {
            app: pick(&weights, rng),
            start_s: t as u32,
            end_s: end as u32,
        });
        t = end;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppUsageRecord {
    pub app: String,
    pub foreground_s: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppUsageSnapshot {
    pub t: DateTime<Utc>,
    pub day: NaiveDate,
    pub apps: Vec<AppUsageRecord>,
}

/// Foreground seconds per app from the day's midnight up to `t`.
pub fn usage_snapshot(catalog: &[&str], sessions: &[UsageSession], t: DateTime<Utc>) -> AppUsageSnapshot {
    let since_midnight = t.num_seconds_from_midnight();
    let mut totals = vec![0u32; catalog.len()];
    for s in sessions {
        if s.start_s < since_midnight {
            totals[s.app] += s.end_s.min(since_midnight) - s.start_s;
        }
    }
    AppUsageSnapshot {
        t,
        day: t.date_naive(),
        apps: catalog
            .iter()
            .zip(totals)
            .map(|(app, foreground_s)| AppUsageRecord {
                app: (*app).to_owned(),
                foreground_s,
            })
            .collect(),
    }
}

/// Snapshots of one day at the given seconds since midnight.
pub fn generate_app_usage(
    day: NaiveDate,
    catalog: &[&str],
    snapshot_s: &[u32],
    rng: &mut impl Rng,
) -> Result<Vec<AppUsageSnapshot>, SimError> {
    for required in ["phone_calls", "sms"] {
        if !catalog.contains(&required) {
            return Err(SimError::InvalidSpec(format!("app catalog lacks {required}")));
        }
    }
    let sessions = day_sessions(catalog.len(), rng);
    let midnight = day.and_hms_opt(0, 0, 0).expect("midnight").and_utc();
    Ok(snapshot_s
        .iter()
        .map(|s| usage_snapshot(catalog, &sessions, midnight + Duration::seconds(i64::from(*s))))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SyncDecision {
    Sync,
    Hold,
}

pub fn sync_decision(buffered: usize, wifi_connected: bool, battery_pct: f64, manual_pending: bool) -> SyncDecision {
    if manual_pending || (buffered > 0 && wifi_connected && battery_pct >= BATTERY_THRESHOLD_PCT) {
        SyncDecision::Sync
    } else {
        SyncDecision::Hold
    }
}

/// Batch payload documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImuPayload {
    pub frequency_hz: f64,
    /// `[t_ms, x, y, z]` rows.
    pub samples: Vec<[f64; 4]>,
}

impl ImuPayload {
    pub fn new(frequency_hz: f64, samples: &[ImuSample]) -> Self {
        ImuPayload {
            frequency_hz,
            samples: samples.iter().map(|s| [s.t_ms as f64, s.x, s.y, s.z]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationPayload {
    pub samples: Vec<LocationSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarPayload {
    pub events: Vec<HarEvent>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::derive_key;
    use chrono::TimeZone;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2020, 8, 1, 10, 0, 0).unwrap()
    }

    fn accel(hz: f64) -> SensorSpec {
        SensorSpec {
            name: SensorKind::Accelerometer,
            frequency: hz,
        }
    }

    #[test]
    fn resting_accelerometer() {
        let s = generate_imu(&accel(50.0), t0(), 10.0, Activity::Still, &mut rng()).unwrap();
        assert_eq!(s.len(), 500);
        let mean = s.iter().map(ImuSample::magnitude).sum::<f64>() / s.len() as f64;
        assert!((mean - 9.81).abs() < 0.05, "{mean}");
        assert_eq!(still_gate(&s, STILL_WINDOW_S), Gate::Pause);
        assert_eq!(s[1].t_ms - s[0].t_ms, 20);
    }

    #[test]
    fn invalid_imu_specs() {
        assert!(matches!(
            generate_imu(&accel(0.0), t0(), 1.0, Activity::Still, &mut rng()),
            Err(SimError::InvalidSpec(_))
        ));
        let loc = SensorSpec::with_default(SensorKind::Location);
        assert!(generate_imu(&loc, t0(), 1.0, Activity::Still, &mut rng()).is_err());
    }

    #[test]
    fn walking_has_two_hertz_peak() {
        let s = generate_imu(&accel(50.0), t0(), 20.0, Activity::Walking, &mut rng()).unwrap();
        assert_eq!(still_gate(&s, STILL_WINDOW_S), Gate::Record);
        let z: Vec<f64> = s.iter().map(|v| v.z).collect();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        // Plain DFT periodogram over 0.1 Hz bins up to 10 Hz.
        let n = z.len() as f64;
        let (mut best_f, mut best_p) = (0.0, 0.0);
        for bin in 1..=100 {
            let f = bin as f64 * 0.1;
            let (mut re, mut im) = (0.0, 0.0);
            for (k, v) in z.iter().enumerate() {
                let w = 2.0 * std::f64::consts::PI * f * k as f64 / 50.0;
                re += (v - mean) * w.cos();
                im -= (v - mean) * w.sin();
            }
            let p = (re * re + im * im) / n;
            if p > best_p {
                (best_f, best_p) = (f, p);
            }
        }
        assert!((best_f - 2.0f64).abs() <= 0.3, "peak at {best_f} Hz");
    }

    #[test]
    fn gate_boundary_is_strict() {
        assert_eq!(gate_from_sd(0.05), Gate::Record);
        assert_eq!(gate_from_sd(0.049_999), Gate::Pause);
    }

    #[test]
    fn location_counts_and_accuracy_median() {
        let home = Wgs84Point::new(50.93, 6.95, 60.0).unwrap();
        let key = derive_key([3; 16]);
        let fixes = generate_location(&home, &key, t0(), 6 * 3600, 600, &mut rng()).unwrap();
        assert_eq!(fixes.len(), 36);
        assert!(generate_location(&home, &key, t0(), 3600, 59, &mut rng()).is_err());

        let mut r = rng();
        let mut draws: Vec<f64> = (0..10_000).map(|_| draw_accuracy(&mut r)).collect();
        draws.sort_by(f64::total_cmp);
        let median = (draws[4999] + draws[5000]) / 2.0;
        assert!((median - 14.0).abs() <= 0.5, "{median}");
    }

    #[test]
    fn har_counts_labels_and_stationary_distribution() {
        let ev = generate_har(t0(), 3600, 300, &mut rng()).unwrap();
        assert_eq!(ev.len(), 12);
        assert!(ev.iter().all(|e| e.confidence <= 100));

        // Stationary vector by power iteration on the transition matrix.
        let m = har_transition_matrix();
        let mut pi = [1.0 / 6.0; 6];
        for _ in 0..1000 {
            pi = std::array::from_fn(|j| (0..6).map(|i| pi[i] * m[i][j]).sum());
        }
        let n = 200_000;
        let mut counts = [0usize; 6];
        let mut r = rng();
        let mut prev = None;
        for _ in 0..n {
            let e = har_step(prev, t0(), &mut r);
            counts[e.activity.index()] += 1;
            prev = Some(e.activity);
        }
        // Serial correlation inflates the variance by (1 + λ) / (1 - λ) for
        // the chain's slowest mode; λ is bounded by the self-transition.
        let inflation = (1.0 + HAR_SELF_TRANSITION) / (1.0 - HAR_SELF_TRANSITION);
        for j in 0..6 {
            let p = counts[j] as f64 / n as f64;
            let sd = (pi[j] * (1.0 - pi[j]) / n as f64 * inflation).sqrt();
            assert!((p - pi[j]).abs() <= 3.0 * sd, "{:?}: {p} vs {}", Activity::ALL[j], pi[j]);
        }
    }

    #[test]
    fn app_usage_is_monotone_bounded_and_resets() {
        let day = NaiveDate::from_ymd_opt(2020, 8, 1).unwrap();
        let snaps = generate_app_usage(day, &APP_CATALOG, &[60, 10 * 3600, 14 * 3600, 86_399], &mut rng()).unwrap();
        for w in snaps.windows(2) {
            for (a, b) in w[0].apps.iter().zip(&w[1].apps) {
                assert!(b.foreground_s >= a.foreground_s);
            }
        }
        for s in &snaps {
            let total: u32 = s.apps.iter().map(|a| a.foreground_s).sum();
            assert!(total <= s.t.num_seconds_from_midnight());
        }
        assert!(snaps[0].apps.iter().all(|a| a.foreground_s < 60));
        assert!(generate_app_usage(day, &["browser"], &[10], &mut rng()).is_err());
    }

    #[test]
    fn sync_predicates() {
        assert_eq!(sync_decision(3, true, 80.0, false), SyncDecision::Sync);
        assert_eq!(sync_decision(3, true, 10.0, false), SyncDecision::Hold);
        assert_eq!(sync_decision(3, false, 80.0, true), SyncDecision::Sync);
        assert_eq!(sync_decision(0, true, 80.0, false), SyncDecision::Hold);
        assert_eq!(sync_decision(1, true, 20.0, false), SyncDecision::Sync);
    }
}
