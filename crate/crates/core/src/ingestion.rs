//! Batch ingestion: checksum gate, idempotency and per-sensor accounting.
//!
//! Upload frame (`application/x-telemon-batch`):
//!
//! ```text
//! {header JSON document, compact, no newline}\n{raw payload bytes}
//! ```
//!
//! The header carries `study_id`, `token_id`, `device_id`, `sensor`,
//! `batch_id`, `created_at` and `md5_hex`. The checksum covers the raw
//! payload bytes exactly as transmitted; the server never re-serializes
//! before hashing.

use chrono::{DateTime, NaiveDate, Utc};
use md5::{Digest, Md5};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use uuid::Uuid;

use crate::datastore::{Datastore, ObjectId};
use crate::error::{Error, Result};
use crate::sensor::SensorKind;

pub const BATCH_CONTENT_TYPE: &str = "application/x-telemon-batch";

pub fn md5_hex(bytes: &[u8]) -> String {
    hex::encode(Md5::digest(bytes))
}

/// True iff `md5_hex` is the MD5 of `payload`, compared case-insensitively.
pub fn verify_checksum(payload: &[u8], md5_hex: &str) -> bool {
    md5_hex.len() == 32 && self::md5_hex(payload).eq_ignore_ascii_case(md5_hex)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchHeader {
    pub study_id: String,
    pub token_id: String,
    pub device_id: Uuid,
    pub sensor: SensorKind,
    pub batch_id: Uuid,
    pub created_at: DateTime<Utc>,
    pub md5_hex: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SensorBatch {
    pub header: BatchHeader,
    pub payload: Vec<u8>,
}

impl SensorBatch {
    /// Builds a batch and stamps the payload checksum.
    pub fn new(
        study_id: &str,
        token_id: &str,
        device_id: Uuid,
        sensor: SensorKind,
        batch_id: Uuid,
        created_at: DateTime<Utc>,
        payload: Vec<u8>,
    ) -> Self {
        SensorBatch {
            header: BatchHeader {
                study_id: study_id.to_owned(),
                token_id: token_id.to_owned(),
                device_id,
                sensor,
                batch_id,
                created_at,
                md5_hex: md5_hex(&payload),
            },
            payload,
        }
    }

    pub fn encode_frame(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.header).expect("header serializes");
        out.push(b'\n');
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode_frame(frame: &[u8]) -> Result<Self> {
        let nl = frame
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::MalformedRequest("batch frame lacks a header line".into()))?;
        let header: BatchHeader = serde_json::from_slice(&frame[..nl])
            .map_err(|e| Error::MalformedRequest(format!("batch header: {e}")))?;
        Ok(SensorBatch {
            header,
            payload: frame[nl + 1..].to_vec(),
        })
    }

    /// `{token_id}/{sensor}/{date}/{batch_id}`
    pub fn logical_path(&self) -> String {
        format!(
            "{}/{}/{}/{}",
            self.header.token_id,
            self.header.sensor,
            self.header.created_at.format("%Y-%m-%d"),
            self.header.batch_id
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReceiptOutcome {
    Stored,
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchReceipt {
    pub batch_id: Uuid,
    pub received_at: DateTime<Utc>,
    pub outcome: ReceiptOutcome,
    pub object_ref: ObjectId,
}

/// What arrived for one (token, sensor).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorActivity {
    pub n_batches: u64,
    pub last_received: Option<DateTime<Utc>>,
    /// UTC dates (by batch creation time) with at least one stored batch.
    pub days_with_data: BTreeSet<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchCount {
    pub token_id: String,
    pub sensor: SensorKind,
    pub n_batches: u64,
    pub last_received: Option<DateTime<Utc>>,
}

type StatsKey = (String, String, SensorKind);

#[derive(Default)]
struct State {
    seen: HashMap<(Uuid, Uuid), BatchReceipt>,
    stats: BTreeMap<StatsKey, SensorActivity>,
}

/// Idempotent batch store. Check-and-store is atomic per
/// (device_id, batch_id); concurrent duplicates yield exactly one STORED.
#[derive(Default)]
pub struct Ingestion {
    state: Mutex<State>,
}

impl Ingestion {
    pub fn new() -> Self {
        Self::default()
    }

    /// Verifies and stores a batch. Callers have already authenticated the
    /// device and checked its registration.
    pub fn store(&self, batch: &SensorBatch, store: &Datastore, now: DateTime<Utc>) -> Result<BatchReceipt> {
        if batch.payload.is_empty() {
            return Err(Error::EmptyPayload);
        }
        if !verify_checksum(&batch.payload, &batch.header.md5_hex) {
            return Err(Error::ChecksumMismatch);
        }
        let h = &batch.header;
        let mut st = self.state.lock();
        if let Some(original) = st.seen.get(&(h.device_id, h.batch_id)) {
            return Ok(BatchReceipt {
                batch_id: h.batch_id,
                received_at: now,
                outcome: ReceiptOutcome::Duplicate,
                object_ref: original.object_ref.clone(),
            });
        }
        let oid = store.put_object(&h.study_id, &batch.payload)?;
        let message = format!("{} {} {}", h.device_id, h.sensor, h.batch_id);
        store.commit_batch(&h.study_id, &batch.logical_path(), &oid, &message, now)?;
        let receipt = BatchReceipt {
            batch_id: h.batch_id,
            received_at: now,
            outcome: ReceiptOutcome::Stored,
            object_ref: oid,
        };
        st.seen.insert((h.device_id, h.batch_id), receipt.clone());
        let stats = st
            .stats
            .entry((h.study_id.clone(), h.token_id.clone(), h.sensor))
            .or_default();
        stats.n_batches += 1;
        stats.last_received = Some(stats.last_received.map_or(now, |t| t.max(now)));
        stats.days_with_data.insert(h.created_at.date_naive());
        Ok(receipt)
    }

    /// Per (token, sensor) activity for one study, STORED batches only.
    pub fn activity(&self, study_id: &str) -> BTreeMap<(String, SensorKind), SensorActivity> {
        let st = self.state.lock();
        st.stats
            .iter()
            .filter(|((s, _, _), _)| s == study_id)
            .map(|((_, t, k), v)| ((t.clone(), *k), v.clone()))
            .collect()
    }

    pub fn stored_count(&self) -> usize {
        self.state.lock().seen.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    #[test]
    fn rfc1321_vectors() {
        assert_eq!(md5_hex(b""), "d41d8cd98f00b204e9800998ecf8427e");
        assert_eq!(md5_hex(b"a"), "0cc175b9c0f1b6a831c399e269772661");
        assert_eq!(md5_hex(b"abc"), "900150983cd24fb0d6963f7d28e17f72");
        assert_eq!(md5_hex(b"message digest"), "f96b697d7cb7938d525a2f31aaf161d0");
        assert_eq!(md5_hex(b"abcdefghijklmnopqrstuvwxyz"), "c3fcd3d76192e4007dfb496cca67e13b");
        assert_eq!(
            md5_hex(b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789"),
            "d174ab98d277d9f5a5611c2c9f419d9f"
        );
        assert_eq!(
            md5_hex(b"12345678901234567890123456789012345678901234567890123456789012345678901234567890"),
            "57edf4a22be3c955ac49da2e2107b67a"
        );
    }

    #[test]
    fn checksum_verification() {
        assert!(verify_checksum(b"abc", "900150983cd24fb0d6963f7d28e17f72"));
        assert!(verify_checksum(b"abc", "900150983CD24FB0D6963F7D28E17F72"));
        assert!(!verify_checksum(b"abc", "4911e516e5aa21d327512e0c8b197616"));
        assert!(!verify_checksum(b"abc", "900150983cd24fb0"));
    }

    #[test]
    fn frame_round_trip() {
        let batch = SensorBatch::new(
            "S",
            "A_1",
            Uuid::from_u128(7),
            SensorKind::Location,
            Uuid::from_u128(9),
            Utc.with_ymd_and_hms(2020, 8, 10, 23, 6, 25).unwrap(),
            b"{\"samples\":[]}\n\x00binary".to_vec(),
        );
        let back = SensorBatch::decode_frame(&batch.encode_frame()).unwrap();
        assert_eq!(back, batch);
        assert_eq!(
            batch.logical_path(),
            "A_1/location/2020-08-10/00000000-0000-0000-0000-000000000009"
        );
        assert!(SensorBatch::decode_frame(b"no newline").is_err());
        assert!(SensorBatch::decode_frame(b"{\"bogus\":1}\nabc").is_err());
    }
}
