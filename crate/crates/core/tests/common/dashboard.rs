//! The six-registration participant table shown on the study dashboard,
//! replayed through the platform in chronological order.

use chrono::{DateTime, Duration, NaiveDateTime, Utc};
use std::collections::BTreeMap;
use uuid::Uuid;

use telemon_core::enrollment::{parse_qr_payload, TokenSecret};
use telemon_core::ingestion::SensorBatch;
use telemon_core::platform::{Platform, TokenRequest};
use telemon_core::registry::{SensorRequest, StudyDraft};
use telemon_core::sensor::SensorKind;

pub const STUDY: &str = "Test";

pub fn ts(s: &str) -> DateTime<Utc> {
    NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S").unwrap().and_utc()
}

pub fn now() -> DateTime<Utc> {
    ts("2020-08-11 13:00:00")
}

/// One table row.
pub struct Row {
    pub token_id: &'static str,
    pub device_id: &'static str,
    pub registered: &'static str,
    pub left: Option<&'static str>,
    /// (sensor, n_batches, last received)
    pub batches: &'static [(SensorKind, u64, &'static str)],
    pub time_in_study: i64,
    pub status_code: Option<u8>,
}

pub const ROWS: [Row; 6] = [
    Row {
        token_id: "Test_080720_00016_4",
        device_id: "05e74f59-6e99-4ed9-8705-2134a13a6a63",
        registered: "2020-07-15 12:56:44",
        left: None,
        batches: &[],
        time_in_study: 27,
        status_code: Some(3),
    },
    Row {
        token_id: "Test_080720_00020_1",
        device_id: "c08ae95d-2abe-4c58-a13d-15c3772990ff",
        registered: "2020-08-05 12:06:12",
        left: Some("2020-08-10 23:06:19"),
        batches: &[
            (SensorKind::Activity, 29, "2020-08-10 23:06:25"),
            (SensorKind::ApplicationUsage, 43, "2020-08-10 23:06:25"),
            (SensorKind::Location, 22, "2020-08-10 23:06:25"),
        ],
        time_in_study: 5,
        status_code: Some(1),
    },
    Row {
        token_id: "Test_080720_00020_2",
        device_id: "a7bcac28-7d8f-44b3-b06f-313250719ca2",
        registered: "2020-08-10 12:58:09",
        left: None,
        batches: &[
            (SensorKind::Activity, 2, "2020-08-11 12:44:16"),
            (SensorKind::ApplicationUsage, 2, "2020-08-11 12:44:16"),
            (SensorKind::Location, 2, "2020-08-11 12:44:16"),
        ],
        time_in_study: 1,
        status_code: None,
    },
    Row {
        token_id: "Test_080720_00021_1",
        device_id: "a7affcb7-c4d9-4375-8a34-b2cb4924efc4",
        registered: "2020-07-30 16:17:06",
        left: None,
        // The table shows 16:15:14, two minutes before registration; a
        // server cannot receive for a registration that does not exist yet.
        batches: &[(SensorKind::Location, 1, "2020-07-30 16:17:14")],
        time_in_study: 11,
        status_code: Some(3),
    },
    Row {
        token_id: "Test_080720_00021_2",
        // The published id has 11 digits in its last group.
        device_id: "d9a5321d-04d7-4588-84a1-2752bbb2aef0",
        registered: "2020-08-10 11:43:06",
        left: None,
        batches: &[],
        time_in_study: 1,
        status_code: None,
    },
    Row {
        token_id: "Test_080720_00022_1",
        device_id: "a5fa288b-a507-4663-8488-c0ba5d709128",
        registered: "2020-08-10 11:44:13",
        left: Some("2020-08-10 11:52:04"),
        batches: &[
            (SensorKind::Activity, 1, "2020-08-10 11:52:03"),
            (SensorKind::ApplicationUsage, 1, "2020-08-10 11:52:03"),
            (SensorKind::Location, 1, "2020-08-10 11:52:03"),
        ],
        time_in_study: 0,
        status_code: Some(1),
    },
];

enum Step {
    Activate(usize),
    Leave(usize),
    Batch { row: usize, sensor: SensorKind, seq: u64, received: DateTime<Utc> },
}

pub fn draft() -> StudyDraft {
    StudyDraft {
        study_id: STUDY.into(),
        name: "Test".into(),
        description: "Dashboard fixture".into(),
        duration_days: 84,
        n_subjects: 22,
        sensors: ["activity", "application_usage", "location"]
            .iter()
            .map(|s| SensorRequest::named(s))
            .collect(),
        codes_per_subject: None,
    }
}

/// Builds the fixture study on `platform`. Batches of one (row, sensor) are
/// spread evenly between one minute after registration and the row's
/// last-received instant; creation stamps trail receipt by six seconds.
pub fn load(platform: &Platform) {
    platform.create_study(&draft(), ts("2020-07-08 08:00:00")).unwrap();
    let issued = platform.generate_tokens(STUDY, &TokenRequest::default()).unwrap();
    let payloads: BTreeMap<_, _> = issued.iter().map(|t| (t.token_id.clone(), t.qr_payload.clone())).collect();

    let mut steps: Vec<(DateTime<Utc>, Step)> = Vec::new();
    for (i, row) in ROWS.iter().enumerate() {
        let reg = ts(row.registered);
        steps.push((reg, Step::Activate(i)));
        if let Some(l) = row.left {
            steps.push((ts(l), Step::Leave(i)));
        }
        for &(sensor, n, last) in row.batches {
            let last = ts(last);
            let first = (reg + Duration::minutes(1)).min(last);
            let span = (last - first).num_seconds();
            for k in 0..n {
                let offset = if n == 1 { span } else { span * k as i64 / (n as i64 - 1) };
                let received = first + Duration::seconds(offset);
                steps.push((received, Step::Batch { row: i, sensor, seq: k, received }));
            }
        }
    }
    steps.sort_by_key(|(t, s)| (*t, matches!(s, Step::Batch { .. })));

    let secret = |i: usize| -> TokenSecret { parse_qr_payload(&payloads[ROWS[i].token_id]).unwrap().secret };
    for (at, step) in steps {
        match step {
            Step::Activate(i) => {
                let device = Uuid::parse_str(ROWS[i].device_id).unwrap();
                platform.activate(&payloads[ROWS[i].token_id], device, at).unwrap();
            }
            Step::Leave(i) => {
                platform.leave(STUDY, ROWS[i].token_id, &secret(i), at).unwrap();
            }
            Step::Batch { row, sensor, seq, received } => {
                let r = &ROWS[row];
                let created = received - Duration::seconds(6);
                let batch_id = Uuid::from_u128(((row as u128) << 64) | ((sensor as u128) << 32) | seq as u128);
                let payload = format!("{{\"row\":{row},\"sensor\":\"{sensor}\",\"seq\":{seq}}}").into_bytes();
                let batch = SensorBatch::new(
                    STUDY,
                    r.token_id,
                    Uuid::parse_str(r.device_id).unwrap(),
                    sensor,
                    batch_id,
                    created,
                    payload,
                );
                platform.submit_batch(&batch, &secret(row), received).unwrap();
            }
        }
    }
}
