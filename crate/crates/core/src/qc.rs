//! Participant quality control: the per-registration status table with
//! colour-labelled flags and numeric status codes.
//!
//! Status codes: `1` user left with this code, `2` study duration reached
//! and left automatically, `3` missing data, empty when everything is fine.

use chrono::{DateTime, Duration, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;
use uuid::Uuid;

use crate::enrollment::{split_token_id, LeaveReason, Registration};
use crate::ingestion::SensorActivity;
use crate::registry::StudyConfig;
use crate::sensor::SensorKind;

pub const NO_DATA_THRESHOLD: Duration = Duration::hours(48);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QcError {
    #[error("interval ends before it starts")]
    NegativeInterval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Flag {
    #[serde(rename = "NO_DATA_48H")]
    NoData48h,
    SensorNotChosen,
    LeftTooEarly,
    DurationReachedNotLeft,
    DurationReachedLeft,
    MultipleActive,
}

impl Flag {
    pub const ALL: [Flag; 6] = [
        Flag::NoData48h,
        Flag::SensorNotChosen,
        Flag::LeftTooEarly,
        Flag::DurationReachedNotLeft,
        Flag::DurationReachedLeft,
        Flag::MultipleActive,
    ];

    pub fn description(self) -> &'static str {
        match self {
            Flag::NoData48h => "No data sent for 2 days",
            Flag::SensorNotChosen => "Sensor was not chosen",
            Flag::LeftTooEarly => "Left study too early",
            Flag::DurationReachedNotLeft => "Study duration reached, not left",
            Flag::DurationReachedLeft => "Study duration reached, left",
            Flag::MultipleActive => "Multiple QR Codes of one user active",
        }
    }

    /// Dashboard palette. Rows carrying several flags use the first one in
    /// [`Flag::ALL`] order.
    pub fn color(self) -> &'static str {
        match self {
            Flag::NoData48h => "red",
            Flag::SensorNotChosen => "grey",
            Flag::LeftTooEarly => "orange",
            Flag::DurationReachedNotLeft => "yellow",
            Flag::DurationReachedLeft => "green",
            Flag::MultipleActive => "purple",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LegendEntry {
    pub flag: Flag,
    pub description: String,
    pub color: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCodeEntry {
    pub code: u8,
    pub description: String,
}

/// The flag palette in precedence order, as served to the dashboard.
pub fn legend() -> Vec<LegendEntry> {
    Flag::ALL
        .into_iter()
        .map(|f| LegendEntry {
            flag: f,
            description: f.description().to_owned(),
            color: f.color().to_owned(),
        })
        .collect()
}

pub fn status_code_legend() -> Vec<StatusCodeEntry> {
    [
        (1, "User left study with this QR Code"),
        (2, "User reached study duration and left automatically"),
        (3, "Missing data"),
    ]
    .into_iter()
    .map(|(code, d)| StatusCodeEntry {
        code,
        description: d.to_owned(),
    })
    .collect()
}

/// QC document served per study.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QcTable {
    pub study_id: String,
    pub now: DateTime<Utc>,
    pub rows: Vec<ParticipantStatus>,
    pub legend: Vec<LegendEntry>,
    pub status_codes: Vec<StatusCodeEntry>,
}

impl QcTable {
    pub fn new(study_id: &str, now: DateTime<Utc>, rows: Vec<ParticipantStatus>) -> Self {
        QcTable {
            study_id: study_id.to_owned(),
            now,
            rows,
            legend: legend(),
            status_codes: status_code_legend(),
        }
    }
}

/// Whole elapsed 24-hour periods between registration and `end`.
pub fn time_in_study(start: DateTime<Utc>, end: DateTime<Utc>) -> Result<i64, QcError> {
    if end < start {
        return Err(QcError::NegativeInterval);
    }
    Ok((end - start).num_seconds().div_euclid(86_400))
}

/// UTC days lying completely inside `[start, end]`.
fn full_days(start: DateTime<Utc>, end: DateTime<Utc>) -> impl Iterator<Item = NaiveDate> {
    let first = {
        let d = start.date_naive();
        if start == d.and_hms_opt(0, 0, 0).unwrap().and_utc() {
            d
        } else {
            d.succ_opt().unwrap()
        }
    };
    let end_date = end.date_naive();
    let last_exclusive = end_date;
    first
        .iter_days()
        .take_while(move |d| *d < last_exclusive)
}

/// Chosen sensors and the full active days on which they stored nothing.
pub fn missing_days(
    reg: &Registration,
    cfg: &StudyConfig,
    activity: &BTreeMap<SensorKind, SensorActivity>,
    now: DateTime<Utc>,
) -> Vec<(SensorKind, NaiveDate)> {
    let end = reg.date_left.unwrap_or(now);
    if end < reg.date_registered {
        return Vec::new();
    }
    let empty = SensorActivity::default();
    let mut out = Vec::new();
    for spec in &cfg.sensors {
        let act = activity.get(&spec.name).unwrap_or(&empty);
        for day in full_days(reg.date_registered, end) {
            if !act.days_with_data.contains(&day) {
                out.push((spec.name, day));
            }
        }
    }
    out
}

/// Flags and status code for one registration.
///
/// `subject_active` is the number of currently active registrations of the
/// same subject, this one included.
pub fn compute_flags(
    reg: &Registration,
    cfg: &StudyConfig,
    activity: &BTreeMap<SensorKind, SensorActivity>,
    subject_active: usize,
    now: DateTime<Utc>,
) -> (BTreeSet<Flag>, Option<u8>) {
    let mut flags = BTreeSet::new();
    let end = reg.date_left.unwrap_or(now);
    let days = time_in_study(reg.date_registered, end).unwrap_or(0);
    let duration = i64::from(cfg.duration_days);

    if reg.is_active() {
        let last = cfg
            .sensors
            .iter()
            .filter_map(|s| activity.get(&s.name).and_then(|a| a.last_received))
            .max()
            .unwrap_or(reg.date_registered);
        if now - last > NO_DATA_THRESHOLD {
            flags.insert(Flag::NoData48h);
        }
        if days >= duration {
            flags.insert(Flag::DurationReachedNotLeft);
        }
        if subject_active >= 2 {
            flags.insert(Flag::MultipleActive);
        }
    } else {
        if reg.left_reason == Some(LeaveReason::UserLeft) && days < duration {
            flags.insert(Flag::LeftTooEarly);
        }
        if days >= duration {
            flags.insert(Flag::DurationReachedLeft);
        }
    }

    let code = reg.leave_status_code().or_else(|| {
        (!missing_days(reg, cfg, activity, now).is_empty()).then_some(3)
    });
    (flags, code)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorCell {
    pub sensor: SensorKind,
    pub chosen: bool,
    pub n_batches: u64,
    pub last_received: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<Flag>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticipantStatus {
    pub subject_label: String,
    pub token_id: String,
    pub device_id: Uuid,
    pub date_registered: DateTime<Utc>,
    pub date_left: Option<DateTime<Utc>>,
    pub left_reason: Option<LeaveReason>,
    pub time_in_study_days: i64,
    pub status_code: Option<u8>,
    pub flags: BTreeSet<Flag>,
    /// Dashboard row tint derived from the flags.
    pub color: Option<String>,
    pub sensors: Vec<SensorCell>,
}

/// One row per registration ordered by subject label, then code suffix.
/// Every catalog sensor gets a cell; cells of sensors the study did not
/// choose carry `SENSOR_NOT_CHOSEN`.
pub fn build_table(
    cfg: &StudyConfig,
    registrations: &[Registration],
    activity: &BTreeMap<(String, SensorKind), SensorActivity>,
    now: DateTime<Utc>,
) -> Vec<ParticipantStatus> {
    let mut active_per_subject: BTreeMap<&str, usize> = BTreeMap::new();
    for r in registrations.iter().filter(|r| r.is_active()) {
        *active_per_subject.entry(r.subject_label.as_str()).or_default() += 1;
    }

    let mut rows: Vec<ParticipantStatus> = registrations
        .iter()
        .map(|reg| {
            let per_sensor: BTreeMap<SensorKind, SensorActivity> = SensorKind::ALL
                .into_iter()
                .filter_map(|k| activity.get(&(reg.token_id.clone(), k)).map(|a| (k, a.clone())))
                .collect();
            let subject_active = active_per_subject.get(reg.subject_label.as_str()).copied().unwrap_or(0);
            let (flags, status_code) = compute_flags(reg, cfg, &per_sensor, subject_active, now);
            let end = reg.date_left.unwrap_or(now);
            let sensors = SensorKind::ALL
                .into_iter()
                .map(|k| {
                    let chosen = cfg.has_sensor(k);
                    let act = per_sensor.get(&k);
                    SensorCell {
                        sensor: k,
                        chosen,
                        n_batches: act.map_or(0, |a| a.n_batches),
                        last_received: act.and_then(|a| a.last_received),
                        flag: (!chosen).then_some(Flag::SensorNotChosen),
                    }
                })
                .collect();
            let color = Flag::ALL
                .into_iter()
                .find(|f| flags.contains(f))
                .map(|f| f.color().to_owned());
            ParticipantStatus {
                subject_label: reg.subject_label.clone(),
                token_id: reg.token_id.clone(),
                device_id: reg.device_id,
                date_registered: reg.date_registered,
                date_left: reg.date_left,
                left_reason: reg.left_reason,
                time_in_study_days: time_in_study(reg.date_registered, end).unwrap_or(0),
                status_code,
                flags,
                color,
                sensors,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        let key = |r: &ParticipantStatus| {
            (
                r.subject_label.clone(),
                split_token_id(&r.token_id).map_or(0, |(_, n)| n),
                r.token_id.clone(),
            )
        };
        key(a).cmp(&key(b))
    });
    rows
}
