//! Remote-monitoring telemetry platform: study management, enrollment,
//! batch ingestion into a content-addressed store, participant quality
//! control, on-device location anonymization and a simulated device fleet.

pub mod api;
pub mod datastore;
pub mod enrollment;
pub mod error;
pub mod geo;
pub mod ingestion;
pub mod notify;
pub mod platform;
pub mod qc;
pub mod registry;
pub mod sensor;
pub mod sim;

pub use error::{Error, Result};
