#![allow(dead_code)]

pub mod dashboard;

use chrono::{DateTime, TimeZone, Utc};
use std::sync::Arc;
use tempfile::TempDir;

use telemon_core::api::{ClockMode, Service};
use telemon_core::datastore::Datastore;
use telemon_core::platform::{Platform, PlatformConfig};
use telemon_core::registry::{SensorRequest, StudyDraft};

pub const ADMIN: &str = "test-admin-credential";

pub struct Harness {
    pub dir: TempDir,
    pub service: Arc<Service>,
}

impl Harness {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let store = Datastore::open(dir.path()).unwrap();
        let platform = Platform::new(
            store,
            PlatformConfig {
                server_address: "https://telemon.example.org".into(),
                auth_hint: None,
                rng_seed: Some(11),
            },
        );
        let service = Arc::new(Service::new(Arc::new(platform), ADMIN, ClockMode::Simulated));
        Harness { dir, service }
    }

    pub fn platform(&self) -> &Platform {
        self.service.platform()
    }
}

pub fn utc(y: i32, mo: u32, d: u32, h: u32, mi: u32, s: u32) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(y, mo, d, h, mi, s).unwrap()
}

pub fn draft(study_id: &str, sensors: &[&str]) -> StudyDraft {
    StudyDraft {
        study_id: study_id.into(),
        name: "Test".into(),
        description: String::new(),
        duration_days: 84,
        n_subjects: 60,
        sensors: sensors.iter().map(|s| SensorRequest::named(s)).collect(),
        codes_per_subject: None,
    }
}
