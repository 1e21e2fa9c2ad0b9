//! One-time enrollment tokens, their QR payload, and registrations.
//!
//! Every subject gets a primary token plus backup codes (`_1`.. `_n`). A
//! token is consumed exactly once by activation; backups cover re-joining
//! and switching devices.

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use uuid::Uuid;

use crate::error::{Error, Result};
use crate::registry::StudyConfig;

pub const QR_PAYLOAD_VERSION: u32 = 1;

/// 128-bit shared secret embedded in a token's QR code. It authenticates
/// all later uploads from the device holding the code.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct TokenSecret([u8; 16]);

impl TokenSecret {
    pub fn generate(rng: &mut impl RngCore) -> Self {
        let mut b = [0u8; 16];
        rng.fill_bytes(&mut b);
        TokenSecret(b)
    }

    pub fn from_bytes(b: [u8; 16]) -> Self {
        TokenSecret(b)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(TokenSecret(bytes.try_into().ok()?))
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    /// Comparison whose timing does not depend on where the inputs differ.
    pub fn matches(&self, other: &TokenSecret) -> bool {
        self.0.iter().zip(other.0.iter()).fold(0u8, |acc, (a, b)| acc | (a ^ b)) == 0
    }
}

impl fmt::Debug for TokenSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("TokenSecret(..)")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnrollmentToken {
    pub subject_label: String,
    pub token_id: String,
    pub study_id: String,
    pub server_address: String,
    pub auth_hint: Option<String>,
    pub secret: TokenSecret,
}

/// Wire form of the QR code content. Fields are declared in sorted order so
/// that compact serialization is canonical.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QrPayload {
    auth: Option<String>,
    secret: String,
    server: String,
    study_id: String,
    token_id: String,
    v: u32,
}

/// Canonical QR text: a compact JSON object with sorted keys.
pub fn encode_qr_payload(token: &EnrollmentToken) -> String {
    let payload = QrPayload {
        auth: token.auth_hint.clone(),
        secret: token.secret.to_hex(),
        server: token.server_address.clone(),
        study_id: token.study_id.clone(),
        token_id: token.token_id.clone(),
        v: QR_PAYLOAD_VERSION,
    };
    serde_json::to_string(&payload).expect("payload serializes")
}

/// Splits `Test_080720_00020_2` into (`Test_080720_00020`, 2).
pub fn split_token_id(token_id: &str) -> Option<(&str, u32)> {
    let (label, suffix) = token_id.rsplit_once('_')?;
    let ordinal: u32 = suffix.parse().ok()?;
    (!label.is_empty() && ordinal >= 1 && suffix == ordinal.to_string()).then_some((label, ordinal))
}

pub fn parse_qr_payload(text: &str) -> Result<EnrollmentToken> {
    let malformed = |m: String| Error::MalformedPayload(m);
    let p: QrPayload = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    if p.v != QR_PAYLOAD_VERSION {
        return Err(malformed(format!("unsupported payload version {}", p.v)));
    }
    let secret = TokenSecret::from_hex(&p.secret)
        .ok_or_else(|| malformed("secret must be 32 hex characters".into()))?;
    let (label, _) = split_token_id(&p.token_id)
        .ok_or_else(|| malformed(format!("token id {:?} lacks an ordinal suffix", p.token_id)))?;
    Ok(EnrollmentToken {
        subject_label: label.to_owned(),
        token_id: p.token_id.clone(),
        study_id: p.study_id,
        server_address: p.server,
        auth_hint: p.auth,
        secret,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LeaveReason {
    UserLeft,
    AutoDuration,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registration {
    pub study_id: String,
    pub subject_label: String,
    pub token_id: String,
    pub device_id: Uuid,
    pub date_registered: DateTime<Utc>,
    pub date_left: Option<DateTime<Utc>>,
    pub left_reason: Option<LeaveReason>,
}

impl Registration {
    pub fn is_active(&self) -> bool {
        self.date_left.is_none()
    }

    /// 1 when the user left, 2 when the study duration ended it.
    pub fn leave_status_code(&self) -> Option<u8> {
        match self.left_reason? {
            LeaveReason::UserLeft => Some(1),
            LeaveReason::AutoDuration => Some(2),
        }
    }
}

/// Token listing entry. Deliberately carries no secret.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSummary {
    pub subject_label: String,
    pub token_id: String,
    pub consumed: bool,
}

struct TokenRecord {
    token: EnrollmentToken,
    consumed: bool,
}

type Key = (String, String);

#[derive(Default)]
struct State {
    tokens: BTreeMap<Key, TokenRecord>,
    subjects: BTreeMap<String, BTreeSet<String>>,
    registrations: BTreeMap<Key, Registration>,
    closed_studies: BTreeSet<String>,
}

#[derive(Default)]
pub struct Enrollment {
    state: Mutex<State>,
}

fn key(study_id: &str, token_id: &str) -> Key {
    (study_id.to_owned(), token_id.to_owned())
}

impl Enrollment {
    pub fn new() -> Self {
        Self::default()
    }

    /// Mints `n_codes` tokens `{subject_label}_1 ..= _n` for a new subject.
    pub fn generate_tokens(
        &self,
        cfg: &StudyConfig,
        subject_label: &str,
        n_codes: u32,
        server_address: &str,
        auth_hint: Option<&str>,
        rng: &mut impl RngCore,
    ) -> Result<Vec<EnrollmentToken>> {
        if n_codes < 1 {
            return Err(Error::InvalidConfig("n_codes must be at least 1".into()));
        }
        if subject_label.is_empty()
            || !subject_label
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(Error::InvalidConfig(format!(
                "subject label {subject_label:?} must be [A-Za-z0-9_-]+"
            )));
        }
        let mut st = self.state.lock();
        if !cfg.is_open() || st.closed_studies.contains(&cfg.study_id) {
            return Err(Error::StudyClosed(cfg.study_id.clone()));
        }
        let labels = st.subjects.entry(cfg.study_id.clone()).or_default();
        if labels.contains(subject_label) {
            return Err(Error::DuplicateSubjectLabel(subject_label.to_owned()));
        }
        labels.insert(subject_label.to_owned());
        let tokens: Vec<_> = (1..=n_codes)
            .map(|i| EnrollmentToken {
                subject_label: subject_label.to_owned(),
                token_id: format!("{subject_label}_{i}"),
                study_id: cfg.study_id.clone(),
                server_address: server_address.to_owned(),
                auth_hint: auth_hint.map(str::to_owned),
                secret: TokenSecret::generate(rng),
            })
            .collect();
        for t in &tokens {
            st.tokens.insert(
                key(&t.study_id, &t.token_id),
                TokenRecord {
                    token: t.clone(),
                    consumed: false,
                },
            );
        }
        Ok(tokens)
    }

    /// Consumes a token and registers the device. Atomic: of several
    /// concurrent activations of one token exactly one succeeds.
    pub fn activate(&self, payload: &str, device_id: Uuid, now: DateTime<Utc>) -> Result<Registration> {
        let presented = parse_qr_payload(payload)?;
        let mut st = self.state.lock();
        let k = key(&presented.study_id, &presented.token_id);
        let record = st
            .tokens
            .get(&k)
            .ok_or_else(|| Error::UnknownToken(presented.token_id.clone()))?;
        if !record.token.secret.matches(&presented.secret) {
            return Err(Error::AuthFailure);
        }
        if st.closed_studies.contains(&presented.study_id) {
            return Err(Error::StudyClosed(presented.study_id.clone()));
        }
        if record.consumed {
            return Err(Error::TokenAlreadyUsed(presented.token_id.clone()));
        }
        let reg = Registration {
            study_id: presented.study_id.clone(),
            subject_label: record.token.subject_label.clone(),
            token_id: presented.token_id.clone(),
            device_id,
            date_registered: now,
            date_left: None,
            left_reason: None,
        };
        st.tokens.get_mut(&k).expect("checked above").consumed = true;
        st.registrations.insert(k, reg.clone());
        Ok(reg)
    }

    pub fn leave_study(
        &self,
        study_id: &str,
        token_id: &str,
        now: DateTime<Utc>,
        reason: LeaveReason,
    ) -> Result<Registration> {
        let mut st = self.state.lock();
        let reg = st
            .registrations
            .get_mut(&key(study_id, token_id))
            .ok_or_else(|| Error::NotRegistered(token_id.to_owned()))?;
        if reg.date_left.is_some() {
            return Err(Error::AlreadyLeft(token_id.to_owned()));
        }
        reg.date_left = Some(now.max(reg.date_registered));
        reg.left_reason = Some(reason);
        Ok(reg.clone())
    }

    /// Moves a subject to a new device: the old registration leaves with
    /// USER_LEFT and the presented backup code is activated.
    pub fn switch_device(
        &self,
        old_token_id: &str,
        payload: &str,
        new_device_id: Uuid,
        now: DateTime<Utc>,
    ) -> Result<Registration> {
        let presented = parse_qr_payload(payload)?;
        {
            let st = self.state.lock();
            let old = st
                .registrations
                .get(&key(&presented.study_id, old_token_id))
                .ok_or_else(|| Error::NotRegistered(old_token_id.to_owned()))?;
            if old.subject_label != presented.subject_label {
                return Err(Error::MalformedPayload(
                    "backup code belongs to a different subject".into(),
                ));
            }
        }
        let reg = self.activate(payload, new_device_id, now)?;
        match self.leave_study(&presented.study_id, old_token_id, now, LeaveReason::UserLeft) {
            Ok(_) | Err(Error::AlreadyLeft(_)) => Ok(reg),
            Err(e) => Err(e),
        }
    }

    /// Marks the study closed and ends every active registration with
    /// AUTO_DURATION semantics.
    pub fn close_study(&self, study_id: &str, now: DateTime<Utc>) -> Vec<Registration> {
        let mut st = self.state.lock();
        st.closed_studies.insert(study_id.to_owned());
        st.registrations
            .iter_mut()
            .filter(|((s, _), r)| s == study_id && r.is_active())
            .map(|(_, r)| {
                r.date_left = Some(now.max(r.date_registered));
                r.left_reason = Some(LeaveReason::AutoDuration);
                r.clone()
            })
            .collect()
    }

    /// Verifies a device's shared secret for a token.
    pub fn authenticate(&self, study_id: &str, token_id: &str, secret: &TokenSecret) -> Result<()> {
        let st = self.state.lock();
        let record = st.tokens.get(&key(study_id, token_id)).ok_or(Error::AuthFailure)?;
        if record.token.secret.matches(secret) {
            Ok(())
        } else {
            Err(Error::AuthFailure)
        }
    }

    pub fn registration(&self, study_id: &str, token_id: &str) -> Option<Registration> {
        self.state.lock().registrations.get(&key(study_id, token_id)).cloned()
    }

    pub fn registrations(&self, study_id: &str) -> Vec<Registration> {
        let st = self.state.lock();
        st.registrations
            .iter()
            .filter(|((s, _), _)| s == study_id)
            .map(|(_, r)| r.clone())
            .collect()
    }

    pub fn tokens(&self, study_id: &str) -> Vec<TokenSummary> {
        let st = self.state.lock();
        st.tokens
            .iter()
            .filter(|((s, _), _)| s == study_id)
            .map(|(_, r)| TokenSummary {
                subject_label: r.token.subject_label.clone(),
                token_id: r.token.token_id.clone(),
                consumed: r.consumed,
            })
            .collect()
    }

    /// Full tokens including secrets, for rendering QR sheets.
    pub fn tokens_for_subject(&self, study_id: &str, subject_label: &str) -> Vec<EnrollmentToken> {
        let st = self.state.lock();
        st.tokens
            .iter()
            .filter(|((s, _), r)| s == study_id && r.token.subject_label == subject_label)
            .map(|(_, r)| r.token.clone())
            .collect()
    }

    pub fn subject_labels(&self, study_id: &str) -> BTreeSet<String> {
        self.state.lock().subjects.get(study_id).cloned().unwrap_or_default()
    }
}
