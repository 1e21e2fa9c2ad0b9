//! Push notifications, delivered by device polling.

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use uuid::Uuid;

use crate::enrollment::Registration;
use crate::error::{Error, Result};

/// `"ALL"` or `{"SUBJECTS": [labels]}` on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Receiver {
    All,
    Subjects(BTreeSet<String>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PushMessage {
    pub message_id: Uuid,
    pub study_id: String,
    pub title: String,
    pub body: String,
    pub receiver: Receiver,
    pub created_at: DateTime<Utc>,
    /// Active registrations targeted at send time.
    pub queued_for: BTreeSet<String>,
    /// Registrations that have polled the message.
    pub delivered_to: BTreeSet<String>,
}

/// What a device sees when polling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceMessage {
    pub message_id: Uuid,
    pub title: String,
    pub body: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Default)]
struct State {
    messages: Vec<PushMessage>,
    /// (study, token) -> indices into `messages` not yet polled.
    pending: BTreeMap<(String, String), Vec<usize>>,
}

#[derive(Default)]
pub struct Notifier {
    state: Mutex<State>,
}

impl Notifier {
    pub fn new() -> Self {
        Self::default()
    }

    /// Queues a message for every active registration of the targeted
    /// subjects. `known_subjects` are the labels tokens were issued for.
    #[allow(clippy::too_many_arguments)]
    pub fn send(
        &self,
        study_id: &str,
        message_id: Uuid,
        title: &str,
        body: &str,
        receiver: Receiver,
        known_subjects: &BTreeSet<String>,
        registrations: &[Registration],
        now: DateTime<Utc>,
    ) -> Result<PushMessage> {
        if let Receiver::Subjects(labels) = &receiver {
            if let Some(unknown) = labels.iter().find(|l| !known_subjects.contains(*l)) {
                return Err(Error::UnknownSubject(unknown.clone()));
            }
        }
        let targeted = |label: &str| match &receiver {
            Receiver::All => true,
            Receiver::Subjects(labels) => labels.contains(label),
        };
        let queued_for: BTreeSet<String> = registrations
            .iter()
            .filter(|r| r.is_active() && targeted(&r.subject_label))
            .map(|r| r.token_id.clone())
            .collect();
        let msg = PushMessage {
            message_id,
            study_id: study_id.to_owned(),
            title: title.to_owned(),
            body: body.to_owned(),
            receiver,
            created_at: now,
            queued_for: queued_for.clone(),
            delivered_to: BTreeSet::new(),
        };
        let mut st = self.state.lock();
        let idx = st.messages.len();
        st.messages.push(msg.clone());
        for token in queued_for {
            st.pending.entry((study_id.to_owned(), token)).or_default().push(idx);
        }
        Ok(msg)
    }

    /// Returns and marks delivered every pending message for the token.
    pub fn poll(&self, study_id: &str, token_id: &str) -> Vec<DeviceMessage> {
        let mut st = self.state.lock();
        let indices = st
            .pending
            .remove(&(study_id.to_owned(), token_id.to_owned()))
            .unwrap_or_default();
        indices
            .into_iter()
            .map(|i| {
                let m = &mut st.messages[i];
                m.delivered_to.insert(token_id.to_owned());
                DeviceMessage {
                    message_id: m.message_id,
                    title: m.title.clone(),
                    body: m.body.clone(),
                    created_at: m.created_at,
                }
            })
            .collect()
    }

    pub fn messages(&self, study_id: &str) -> Vec<PushMessage> {
        let st = self.state.lock();
        st.messages.iter().filter(|m| m.study_id == study_id).cloned().collect()
    }
}
