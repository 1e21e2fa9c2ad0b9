//! WGS-84 geodesy and the on-device location anonymization transform.
//!
//! A location is anonymized by converting it to earth-centered Cartesian
//! coordinates, applying a per-device secret rotation, and converting back.
//! Rotations are isometries of the ECEF chord metric, so relative geometry
//! (distances within a trace) survives while absolute position does not.
//!
//! The ellipsoid is only symmetric about the polar axis, so a rotated point
//! generally lands off the ellipsoid surface. The resulting altitude change
//! is bounded by `a - b` (about 21.4 km) and is accepted: downstream
//! features use horizontal geometry only.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::PI;
use thiserror::Error;

/// WGS-84 semi-major axis in meters.
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS-84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
/// First eccentricity squared, `f (2 - f)`.
pub const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);
/// Semi-minor axis `a sqrt(1 - e^2)`.
pub const WGS84_B: f64 = 6_356_752.314_245_179;
/// Mean earth radius used for haversine distances.
pub const MEAN_EARTH_RADIUS_M: f64 = 6_371_000.0;

const MAX_ITERATIONS: usize = 100;
const LATITUDE_TOLERANCE_RAD: f64 = 1e-12;
const MIN_ECEF_NORM_M: f64 = 1e5;
const KEY_DOMAIN: &[u8] = b"telemon.anon-key.v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    LatitudeOutOfRange(f64),
    #[error("coordinate is not finite")]
    NotFinite,
    #[error("point is {0} m from the earth center; too close for conversion")]
    NearEarthCenter(f64),
    #[error("latitude iteration did not converge within {MAX_ITERATIONS} steps")]
    NonConvergence,
}

/// Geodetic position on the WGS-84 ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wgs84Point {
    pub latitude_deg: f64,
    pub longitude_deg: f64,
    /// Height above the ellipsoid.
    pub altitude_m: f64,
}

impl Wgs84Point {
    /// Validates the point, normalizing longitude into (-180, 180].
    pub fn new(latitude_deg: f64, longitude_deg: f64, altitude_m: f64) -> Result<Self, GeoError> {
        if !(latitude_deg.is_finite() && longitude_deg.is_finite() && altitude_m.is_finite()) {
            return Err(GeoError::NotFinite);
        }
        if !(-90.0..=90.0).contains(&latitude_deg) {
            return Err(GeoError::LatitudeOutOfRange(latitude_deg));
        }
        Ok(Self {
            latitude_deg,
            longitude_deg: normalize_longitude(longitude_deg),
            altitude_m,
        })
    }

    pub fn surface(latitude_deg: f64, longitude_deg: f64) -> Result<Self, GeoError> {
        Self::new(latitude_deg, longitude_deg, 0.0)
    }
}

/// Maps any finite longitude into the half-open interval (-180, 180].
pub fn normalize_longitude(lon: f64) -> f64 {
    let mut l = lon % 360.0;
    if l <= -180.0 {
        l += 360.0;
    } else if l > 180.0 {
        l -= 360.0;
    }
    l
}

/// Earth-centered, earth-fixed Cartesian position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcefPoint {
    pub x_m: f64,
    pub y_m: f64,
    pub z_m: f64,
}

impl EcefPoint {
    pub fn norm(&self) -> f64 {
        (self.x_m * self.x_m + self.y_m * self.y_m + self.z_m * self.z_m).sqrt()
    }

    pub fn distance(&self, other: &EcefPoint) -> f64 {
        let dx = self.x_m - other.x_m;
        let dy = self.y_m - other.y_m;
        let dz = self.z_m - other.z_m;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    fn as_array(&self) -> [f64; 3] {
        [self.x_m, self.y_m, self.z_m]
    }
}

fn prime_vertical_radius(sin_lat: f64) -> f64 {
    WGS84_A / (1.0 - WGS84_E2 * sin_lat * sin_lat).sqrt()
}

pub fn wgs84_to_ecef(p: &Wgs84Point) -> EcefPoint {
    let (sin_lat, cos_lat) = p.latitude_deg.to_radians().sin_cos();
    let (sin_lon, cos_lon) = p.longitude_deg.to_radians().sin_cos();
    let n = prime_vertical_radius(sin_lat);
    EcefPoint {
        x_m: (n + p.altitude_m) * cos_lat * cos_lon,
        y_m: (n + p.altitude_m) * cos_lat * sin_lon,
        z_m: (n * (1.0 - WGS84_E2) + p.altitude_m) * sin_lat,
    }
}

/// Inverse of [`wgs84_to_ecef`] by fixed-point iteration on latitude.
///
/// On the polar axis longitude is undefined and fixed to 0.
pub fn ecef_to_wgs84(c: &EcefPoint) -> Result<Wgs84Point, GeoError> {
    if !(c.x_m.is_finite() && c.y_m.is_finite() && c.z_m.is_finite()) {
        return Err(GeoError::NotFinite);
    }
    let norm = c.norm();
    if norm <= MIN_ECEF_NORM_M {
        return Err(GeoError::NearEarthCenter(norm));
    }
    let p = c.x_m.hypot(c.y_m);
    if p == 0.0 {
        let latitude_deg = if c.z_m > 0.0 { 90.0 } else { -90.0 };
        return Ok(Wgs84Point {
            latitude_deg,
            longitude_deg: 0.0,
            altitude_m: c.z_m.abs() - WGS84_B,
        });
    }
    let longitude_deg = normalize_longitude(c.y_m.atan2(c.x_m).to_degrees());

    let mut lat = c.z_m.atan2(p * (1.0 - WGS84_E2));
    for _ in 0..MAX_ITERATIONS {
        let (sin_lat, cos_lat) = lat.sin_cos();
        let n = prime_vertical_radius(sin_lat);
        // Height via the numerically stable projection onto the normal.
        let h = p * cos_lat + c.z_m * sin_lat - WGS84_A * WGS84_A / n;
        let next = c.z_m.atan2(p * (1.0 - WGS84_E2 * n / (n + h)));
        if (next - lat).abs() < LATITUDE_TOLERANCE_RAD {
            let (sin_lat, cos_lat) = next.sin_cos();
            let n = prime_vertical_radius(sin_lat);
            let altitude_m = p * cos_lat + c.z_m * sin_lat - WGS84_A * WGS84_A / n;
            return Ok(Wgs84Point {
                latitude_deg: next.to_degrees().clamp(-90.0, 90.0),
                longitude_deg,
                altitude_m,
            });
        }
        lat = next;
    }
    Err(GeoError::NonConvergence)
}

/// 3x3 rotation matrix in row-major order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation(pub [[f64; 3]; 3]);

impl Rotation {
    pub const IDENTITY: Rotation = Rotation([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn about_z(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Rotation([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn about_y(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Rotation([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    }

    pub fn compose(&self, rhs: &Rotation) -> Rotation {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.0[i][k] * rhs.0[k][j]).sum();
            }
        }
        Rotation(out)
    }

    pub fn transpose(&self) -> Rotation {
        let m = &self.0;
        Rotation([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn apply(&self, c: &EcefPoint) -> EcefPoint {
        let v = c.as_array();
        let r = |i: usize| self.0[i][0] * v[0] + self.0[i][1] * v[1] + self.0[i][2] * v[2];
        EcefPoint {
            x_m: r(0),
            y_m: r(1),
            z_m: r(2),
        }
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Rotation angle in radians, recovered from the trace.
    pub fn angle(&self) -> f64 {
        let trace = self.0[0][0] + self.0[1][1] + self.0[2][2];
        ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

/// Per-device secret. Minted on the device at activation; never transmitted.
#[derive(Clone, PartialEq)]
pub struct AnonymizationKey {
    seed: [u8; 16],
    rotation: Rotation,
}

impl std::fmt::Debug for AnonymizationKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AnonymizationKey").finish_non_exhaustive()
    }
}

impl AnonymizationKey {
    pub fn seed(&self) -> &[u8; 16] {
        &self.seed
    }

    pub fn rotation(&self) -> &Rotation {
        &self.rotation
    }

    /// A key that leaves every point in place. Test and demo use only.
    pub fn identity() -> Self {
        Self {
            seed: [0; 16],
            rotation: Rotation::IDENTITY,
        }
    }
}

/// Deterministic uniform in [0, 1) from the key stream.
fn key_uniform(seed: &[u8; 16], index: u64) -> f64 {
    let digest = Sha256::new()
        .chain_update(KEY_DOMAIN)
        .chain_update(seed)
        .chain_update(index.to_be_bytes())
        .finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    (u64::from_be_bytes(word) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Derives a uniformly distributed rotation `Rz(alpha) Ry(beta) Rz(gamma)`
/// from the seed, with alpha and gamma uniform on [0, 2pi) and cos(beta)
/// uniform on [-1, 1].
pub fn derive_key(seed: [u8; 16]) -> AnonymizationKey {
    let alpha = 2.0 * PI * key_uniform(&seed, 0);
    let beta = (2.0 * key_uniform(&seed, 1) - 1.0).acos();
    let gamma = 2.0 * PI * key_uniform(&seed, 2);
    let rotation = Rotation::about_z(alpha)
        .compose(&Rotation::about_y(beta))
        .compose(&Rotation::about_z(gamma));
    AnonymizationKey { seed, rotation }
}

pub fn anonymize_point(p: &Wgs84Point, key: &AnonymizationKey) -> Result<Wgs84Point, GeoError> {
    ecef_to_wgs84(&key.rotation.apply(&wgs84_to_ecef(p)))
}

/// Great-circle distance on the mean-radius sphere.
pub fn haversine_m(a: &Wgs84Point, b: &Wgs84Point) -> f64 {
    let phi1 = a.latitude_deg.to_radians();
    let phi2 = b.latitude_deg.to_radians();
    let dphi = phi2 - phi1;
    let dlambda = (b.longitude_deg - a.longitude_deg).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * MEAN_EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Sum of consecutive haversine distances; 0 for fewer than two points.
pub fn travelled_distance(trace: &[Wgs84Point]) -> f64 {
    trace.windows(2).map(|w| haversine_m(&w[0], &w[1])).sum()
}

/// Moves `origin` by `north_m` / `east_m` on the mean-radius sphere.
pub fn offset_point(origin: &Wgs84Point, north_m: f64, east_m: f64) -> Wgs84Point {
    let lat = origin.latitude_deg + (north_m / MEAN_EARTH_RADIUS_M).to_degrees();
    let cos_lat = origin.latitude_deg.to_radians().cos().max(1e-6);
    let lon = origin.longitude_deg + (east_m / (MEAN_EARTH_RADIUS_M * cos_lat)).to_degrees();
    let lat = lat.clamp(-90.0, 90.0);
    Wgs84Point {
        latitude_deg: lat,
        longitude_deg: normalize_longitude(lon),
        altitude_m: origin.altitude_m,
    }
}
