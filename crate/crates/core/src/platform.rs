//! The server side as one facade: registry, enrollment, ingestion, QC and
//! notifications over a shared datastore. All business rules live here or
//! below; the API layer only translates documents.

use chrono::{DateTime, Duration, Utc};
use parking_lot::Mutex;
use rand::rngs::StdRng;
use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use uuid::Uuid;

use crate::datastore::Datastore;
use crate::enrollment::{encode_qr_payload, Enrollment, LeaveReason, Registration, TokenSecret, TokenSummary};
use crate::error::{Error, Result};
use crate::ingestion::{BatchCount, BatchReceipt, Ingestion, SensorBatch};
use crate::notify::{DeviceMessage, Notifier, PushMessage, Receiver};
use crate::qc::{build_table, ParticipantStatus};
use crate::registry::{subject_label, Registry, StudyConfig, StudyDraft, StudyState};
use crate::sensor::SensorKind;

/// Batches created before leaving are still accepted this long afterwards.
pub const POST_LEAVE_GRACE: Duration = Duration::hours(24);
/// "Number of new subjects" counts first enrollments within this window.
pub const NEW_SUBJECT_WINDOW: Duration = Duration::days(7);

#[derive(Debug, Clone)]
pub struct PlatformConfig {
    /// Embedded in every QR payload.
    pub server_address: String,
    pub auth_hint: Option<String>,
    /// Fixes token secrets and message ids; OS entropy when absent.
    pub rng_seed: Option<u64>,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        PlatformConfig {
            server_address: "http://127.0.0.1:8080".into(),
            auth_hint: None,
            rng_seed: None,
        }
    }
}

/// Token generation request. With no explicit labels, `count` subjects
/// (default: the remainder of `n_subjects`) get dashboard-style labels.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenRequest {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub subject_labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_codes: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssuedToken {
    pub subject_label: String,
    pub token_id: String,
    /// QR code content for the printable sheet.
    pub qr_payload: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Enrolled {
    pub registration: Registration,
    pub config: StudyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloseSummary {
    pub study: StudyConfig,
    pub auto_left: Vec<Registration>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOverview {
    pub study_id: String,
    pub name: String,
    pub state: StudyState,
    pub duration_days: u32,
    pub sensors: Vec<SensorKind>,
    pub total_subjects: usize,
    pub enrolled_subjects: usize,
    pub new_subjects: usize,
    pub active_registrations: usize,
}

pub struct Platform {
    config: PlatformConfig,
    registry: Registry,
    enrollment: Enrollment,
    ingestion: Ingestion,
    notifier: Notifier,
    store: Datastore,
    rng: Mutex<StdRng>,
}

impl Platform {
    pub fn new(store: Datastore, config: PlatformConfig) -> Self {
        let rng = match config.rng_seed {
            Some(seed) => StdRng::seed_from_u64(seed),
            None => StdRng::from_os_rng(),
        };
        Platform {
            config,
            registry: Registry::new(),
            enrollment: Enrollment::new(),
            ingestion: Ingestion::new(),
            notifier: Notifier::new(),
            store,
            rng: Mutex::new(rng),
        }
    }

    pub fn config(&self) -> &PlatformConfig {
        &self.config
    }

    pub fn datastore(&self) -> &Datastore {
        &self.store
    }

    pub fn create_study(&self, draft: &StudyDraft, now: DateTime<Utc>) -> Result<StudyConfig> {
        let cfg = self.registry.create_study(draft, now)?;
        if let Err(e) = self.store.init_dataset(&cfg.study_id, now) {
            self.registry.forget(&cfg.study_id);
            return Err(e.into());
        }
        Ok(cfg)
    }

    pub fn list_studies(&self) -> Vec<StudyConfig> {
        self.registry.list()
    }

    pub fn get_config(&self, study_id: &str) -> Result<StudyConfig> {
        self.registry.get_config(study_id)
    }

    pub fn close_study(&self, study_id: &str, now: DateTime<Utc>) -> Result<CloseSummary> {
        let study = self.registry.close(study_id)?;
        let auto_left = self.enrollment.close_study(study_id, now);
        Ok(CloseSummary { study, auto_left })
    }

    pub fn generate_tokens(&self, study_id: &str, req: &TokenRequest) -> Result<Vec<IssuedToken>> {
        let cfg = self.registry.get_config(study_id)?;
        let n_codes = req.n_codes.unwrap_or(cfg.codes_per_subject);
        let existing = self.enrollment.subject_labels(study_id);
        let labels: Vec<String> = if req.subject_labels.is_empty() {
            let remaining = (cfg.n_subjects as usize).saturating_sub(existing.len()) as u32;
            let count = req.count.unwrap_or(remaining);
            (1u32..)
                .map(|i| subject_label(&cfg.name, cfg.created_at, i))
                .filter(|l| !existing.contains(l))
                .take(count as usize)
                .collect()
        } else {
            req.subject_labels.clone()
        };

        let mut rng = self.rng.lock();
        let mut issued = Vec::new();
        for label in labels {
            let tokens = self.enrollment.generate_tokens(
                &cfg,
                &label,
                n_codes,
                &self.config.server_address,
                self.config.auth_hint.as_deref(),
                &mut *rng,
            )?;
            issued.extend(tokens.iter().map(|t| IssuedToken {
                subject_label: t.subject_label.clone(),
                token_id: t.token_id.clone(),
                qr_payload: encode_qr_payload(t),
            }));
        }
        Ok(issued)
    }

    /// QR contents for one subject, primary code first.
    pub fn qr_payloads(&self, study_id: &str, subject: &str) -> Result<Vec<String>> {
        self.registry.get_config(study_id)?;
        let tokens = self.enrollment.tokens_for_subject(study_id, subject);
        if tokens.is_empty() {
            return Err(Error::UnknownSubject(subject.to_owned()));
        }
        Ok(tokens.iter().map(encode_qr_payload).collect())
    }

    pub fn tokens(&self, study_id: &str) -> Result<Vec<TokenSummary>> {
        self.registry.get_config(study_id)?;
        Ok(self.enrollment.tokens(study_id))
    }

    /// Consumes a token and hands the device its remote configuration.
    pub fn activate(&self, payload: &str, device_id: Uuid, now: DateTime<Utc>) -> Result<Enrolled> {
        let presented = crate::enrollment::parse_qr_payload(payload)?;
        let config = self.registry.get_config(&presented.study_id)?;
        if !config.is_open() {
            return Err(Error::StudyClosed(config.study_id));
        }
        let registration = self.enrollment.activate(payload, device_id, now)?;
        Ok(Enrolled { registration, config })
    }

    /// Activates a backup code on a new device and closes the old
    /// registration as left by the user.
    pub fn switch_device(
        &self,
        old_token_id: &str,
        payload: &str,
        new_device_id: Uuid,
        now: DateTime<Utc>,
    ) -> Result<Enrolled> {
        let presented = crate::enrollment::parse_qr_payload(payload)?;
        let config = self.registry.get_config(&presented.study_id)?;
        if !config.is_open() {
            return Err(Error::StudyClosed(config.study_id));
        }
        let registration = self.enrollment.switch_device(old_token_id, payload, new_device_id, now)?;
        Ok(Enrolled { registration, config })
    }

    pub fn leave(
        &self,
        study_id: &str,
        token_id: &str,
        secret: &TokenSecret,
        now: DateTime<Utc>,
    ) -> Result<Registration> {
        self.registry.get_config(study_id)?;
        self.enrollment.authenticate(study_id, token_id, secret)?;
        self.enrollment.leave_study(study_id, token_id, now, LeaveReason::UserLeft)
    }

    pub fn submit_batch(&self, batch: &SensorBatch, secret: &TokenSecret, now: DateTime<Utc>) -> Result<BatchReceipt> {
        let h = &batch.header;
        let cfg = self.registry.get_config(&h.study_id)?;
        self.enrollment.authenticate(&h.study_id, &h.token_id, secret)?;
        let reg = self
            .enrollment
            .registration(&h.study_id, &h.token_id)
            .ok_or_else(|| Error::UnknownRegistration(h.token_id.clone()))?;
        if reg.device_id != h.device_id {
            return Err(Error::AuthFailure);
        }
        if !cfg.is_open() {
            return Err(Error::StudyClosed(cfg.study_id));
        }
        if !cfg.has_sensor(h.sensor) {
            return Err(Error::SensorNotInStudy(h.sensor.to_string()));
        }
        if let Some(left) = reg.date_left {
            if h.created_at > left || now > left + POST_LEAVE_GRACE {
                return Err(Error::UnknownRegistration(h.token_id.clone()));
            }
        }
        self.ingestion.store(batch, &self.store, now)
    }

    /// One entry per registration and chosen sensor, zero when nothing
    /// arrived.
    pub fn batch_counts(&self, study_id: &str) -> Result<Vec<BatchCount>> {
        let cfg = self.registry.get_config(study_id)?;
        let activity = self.ingestion.activity(study_id);
        let mut out = Vec::new();
        for reg in self.enrollment.registrations(study_id) {
            for spec in &cfg.sensors {
                let act = activity.get(&(reg.token_id.clone(), spec.name));
                out.push(BatchCount {
                    token_id: reg.token_id.clone(),
                    sensor: spec.name,
                    n_batches: act.map_or(0, |a| a.n_batches),
                    last_received: act.and_then(|a| a.last_received),
                });
            }
        }
        Ok(out)
    }

    pub fn study_table(&self, study_id: &str, now: DateTime<Utc>) -> Result<Vec<ParticipantStatus>> {
        let cfg = self.registry.get_config(study_id)?;
        let regs = self.enrollment.registrations(study_id);
        let activity = self.ingestion.activity(study_id);
        Ok(build_table(&cfg, &regs, &activity, now))
    }

    pub fn study_overview(&self, study_id: &str, now: DateTime<Utc>) -> Result<StudyOverview> {
        let cfg = self.registry.get_config(study_id)?;
        let regs = self.enrollment.registrations(study_id);
        let mut first_enrolled: BTreeMap<&str, DateTime<Utc>> = BTreeMap::new();
        for r in &regs {
            let e = first_enrolled.entry(r.subject_label.as_str()).or_insert(r.date_registered);
            *e = (*e).min(r.date_registered);
        }
        let new_subjects = first_enrolled
            .values()
            .filter(|t| **t <= now && now - **t < NEW_SUBJECT_WINDOW)
            .count();
        Ok(StudyOverview {
            study_id: cfg.study_id.clone(),
            name: cfg.name.clone(),
            state: cfg.state,
            duration_days: cfg.duration_days,
            sensors: cfg.sensors.iter().map(|s| s.name).collect(),
            total_subjects: self.enrollment.subject_labels(study_id).len(),
            enrolled_subjects: first_enrolled.len(),
            new_subjects,
            active_registrations: regs.iter().filter(|r| r.is_active()).count(),
        })
    }

    pub fn send_notification(
        &self,
        study_id: &str,
        title: &str,
        body: &str,
        receiver: Receiver,
        now: DateTime<Utc>,
    ) -> Result<PushMessage> {
        let cfg = self.registry.get_config(study_id)?;
        if !cfg.is_open() {
            return Err(Error::StudyClosed(cfg.study_id));
        }
        let mut id = [0u8; 16];
        self.rng.lock().fill_bytes(&mut id);
        let message_id = uuid::Builder::from_random_bytes(id).into_uuid();
        let subjects: BTreeSet<String> = self.enrollment.subject_labels(study_id);
        let regs = self.enrollment.registrations(study_id);
        self.notifier
            .send(study_id, message_id, title, body, receiver, &subjects, &regs, now)
    }

    pub fn poll_notifications(&self, study_id: &str, token_id: &str, secret: &TokenSecret) -> Result<Vec<DeviceMessage>> {
        self.enrollment.authenticate(study_id, token_id, secret)?;
        match self.enrollment.registration(study_id, token_id) {
            Some(r) if r.is_active() => Ok(self.notifier.poll(study_id, token_id)),
            _ => Err(Error::UnknownRegistration(token_id.to_owned())),
        }
    }

    pub fn messages(&self, study_id: &str) -> Result<Vec<PushMessage>> {
        self.registry.get_config(study_id)?;
        Ok(self.notifier.messages(study_id))
    }

    pub fn registrations(&self, study_id: &str) -> Result<Vec<Registration>> {
        self.registry.get_config(study_id)?;
        Ok(self.enrollment.registrations(study_id))
    }

    pub fn stored_batches(&self) -> usize {
        self.ingestion.stored_count()
    }
}
