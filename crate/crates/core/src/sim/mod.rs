//! Simulated smartphone fleet driving the platform through its API.

pub mod device;
pub mod fleet;
pub mod generators;
pub mod scenario;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::api::ClientError;

pub use device::{Device, LocalBuffer};
pub use fleet::{run_fleet, FleetOptions, FleetReport, Recorder, WireRecord};
pub use scenario::Scenario;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid sensor spec: {0}")]
    InvalidSpec(String),
    #[error("invalid scenario: {0}")]
    ScenarioInvalid(String),
    #[error(transparent)]
    Api(#[from] ClientError),
    #[error(transparent)]
    Geo(#[from] crate::geo::GeoError),
}

/// Per-device root seed.
pub fn device_seed(scenario_seed: u64, name: &str) -> [u8; 32] {
    Sha256::new()
        .chain_update(b"telemon.sim.device")
        .chain_update(scenario_seed.to_be_bytes())
        .chain_update(name.as_bytes())
        .finalize()
        .into()
}

/// Independent random stream for one (label, index) of a device. Every
/// generator tick draws from its own stream so replays after a crash
/// reproduce the same bytes.
pub fn stream_rng(seed: &[u8; 32], label: &str, index: u64) -> ChaCha8Rng {
    let digest: [u8; 32] = Sha256::new()
        .chain_update(seed)
        .chain_update(label.as_bytes())
        .chain_update([0u8])
        .chain_update(index.to_be_bytes())
        .finalize()
        .into();
    ChaCha8Rng::from_seed(digest)
}
