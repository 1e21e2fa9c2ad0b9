//! Study registry: the remote-configuration source of truth.

use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::sensor::{SensorKind, SensorSpec};

pub const DEFAULT_CODES_PER_SUBJECT: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StudyState {
    Open,
    Closed,
}

/// Requested sensor as submitted by the study owner. A missing frequency
/// falls back to the sensor's default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorRequest {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency: Option<f64>,
}

impl SensorRequest {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.to_owned(),
            frequency: None,
        }
    }
}

/// Study creation form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyDraft {
    pub study_id: String,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub duration_days: u32,
    pub n_subjects: u32,
    pub sensors: Vec<SensorRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codes_per_subject: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub study_id: String,
    pub name: String,
    pub description: String,
    pub duration_days: u32,
    pub n_subjects: u32,
    pub sensors: Vec<SensorSpec>,
    pub codes_per_subject: u32,
    pub created_at: DateTime<Utc>,
    pub state: StudyState,
}

impl StudyConfig {
    pub fn sensor(&self, kind: SensorKind) -> Option<&SensorSpec> {
        self.sensors.iter().find(|s| s.name == kind)
    }

    pub fn has_sensor(&self, kind: SensorKind) -> bool {
        self.sensor(kind).is_some()
    }

    pub fn is_open(&self) -> bool {
        self.state == StudyState::Open
    }
}

/// Study ids become directory names in the datastore.
fn valid_study_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Validates a draft and fills in defaults.
pub fn validate_draft(draft: &StudyDraft, now: DateTime<Utc>) -> Result<StudyConfig> {
    let invalid = |msg: String| Err(Error::InvalidConfig(msg));
    if !valid_study_id(&draft.study_id) {
        return invalid(format!(
            "study_id {:?} must be 1-64 characters of [A-Za-z0-9_-]",
            draft.study_id
        ));
    }
    if draft.name.trim().is_empty() {
        return invalid("name must not be empty".into());
    }
    if draft.duration_days < 1 {
        return invalid("duration_days must be at least 1".into());
    }
    if draft.n_subjects < 1 {
        return invalid("n_subjects must be at least 1".into());
    }
    let codes = draft.codes_per_subject.unwrap_or(DEFAULT_CODES_PER_SUBJECT);
    if codes < 1 {
        return invalid("codes_per_subject must be at least 1".into());
    }
    if draft.sensors.is_empty() {
        return invalid("sensors must not be empty".into());
    }

    let mut seen = BTreeSet::new();
    let mut sensors = Vec::with_capacity(draft.sensors.len());
    for req in &draft.sensors {
        let kind: SensorKind = req
            .name
            .parse()
            .map_err(|e: crate::sensor::UnknownSensor| Error::InvalidConfig(e.to_string()))?;
        if !seen.insert(kind) {
            return invalid(format!("sensor {kind} listed twice"));
        }
        let frequency = req.frequency.unwrap_or_else(|| kind.default_frequency());
        let (lo, hi) = kind.frequency_bounds();
        if !frequency.is_finite() || frequency < lo || frequency > hi {
            let unit = if kind.is_imu() { "Hz" } else { "s" };
            return invalid(format!(
                "{kind} frequency {frequency} outside [{lo}, {hi}] {unit}"
            ));
        }
        sensors.push(SensorSpec {
            name: kind,
            frequency,
        });
    }
    sensors.sort_by_key(|s| s.name);

    Ok(StudyConfig {
        study_id: draft.study_id.clone(),
        name: draft.name.clone(),
        description: draft.description.clone(),
        duration_days: draft.duration_days,
        n_subjects: draft.n_subjects,
        sensors,
        codes_per_subject: codes,
        created_at: now,
        state: StudyState::Open,
    })
}

/// Default subject label, e.g. `Test_080720_00020` for the 20th subject of
/// study "Test" created on 8 July 2020.
pub fn subject_label(study_name: &str, created_at: DateTime<Utc>, index: u32) -> String {
    format!("{}_{}_{:05}", study_name, created_at.format("%d%m%y"), index)
}

#[derive(Default)]
pub struct Registry {
    studies: RwLock<BTreeMap<String, StudyConfig>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create_study(&self, draft: &StudyDraft, now: DateTime<Utc>) -> Result<StudyConfig> {
        let cfg = validate_draft(draft, now)?;
        let mut studies = self.studies.write();
        if studies.contains_key(&cfg.study_id) {
            return Err(Error::DuplicateStudyId(cfg.study_id));
        }
        studies.insert(cfg.study_id.clone(), cfg.clone());
        Ok(cfg)
    }

    /// Removes a study again; used to roll back a creation whose datastore
    /// initialization failed.
    pub(crate) fn forget(&self, study_id: &str) {
        self.studies.write().remove(study_id);
    }

    pub fn get_config(&self, study_id: &str) -> Result<StudyConfig> {
        self.studies
            .read()
            .get(study_id)
            .cloned()
            .ok_or_else(|| Error::UnknownStudy(study_id.to_owned()))
    }

    pub fn list(&self) -> Vec<StudyConfig> {
        self.studies.read().values().cloned().collect()
    }

    /// Compare-and-set OPEN -> CLOSED.
    pub fn close(&self, study_id: &str) -> Result<StudyConfig> {
        let mut studies = self.studies.write();
        let cfg = studies
            .get_mut(study_id)
            .ok_or_else(|| Error::UnknownStudy(study_id.to_owned()))?;
        if cfg.state == StudyState::Closed {
            return Err(Error::AlreadyClosed(study_id.to_owned()));
        }
        cfg.state = StudyState::Closed;
        Ok(cfg.clone())
    }
}
