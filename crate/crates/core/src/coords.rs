//! WGS-84 coordinate conversions and local-tangent-plane geometry.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

pub const WGS84_A: f64 = 6_378_137.0;
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
pub const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);

/// Geodetic latitude/longitude in radians, ellipsoidal height in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geodetic {
    pub lat: f64,
    pub lon: f64,
    pub height: f64,
}

impl Geodetic {
    pub fn new(lat: f64, lon: f64, height: f64) -> Self {
        Self { lat, lon, height }
    }

    pub fn from_degrees(lat_deg: f64, lon_deg: f64, height: f64) -> Self {
        Self::new(lat_deg.to_radians(), lon_deg.to_radians(), height)
    }

    pub fn to_ecef(&self) -> Vector3<f64> {
        let (sl, cl) = self.lat.sin_cos();
        let (so, co) = self.lon.sin_cos();
        let n = WGS84_A / (1.0 - WGS84_E2 * sl * sl).sqrt();
        Vector3::new(
            (n + self.height) * cl * co,
            (n + self.height) * cl * so,
            (n * (1.0 - WGS84_E2) + self.height) * sl,
        )
    }
}

/// ECEF to geodetic by fixed-point iteration on latitude.
pub fn ecef_to_geodetic(r: &Vector3<f64>) -> Geodetic {
    let p2 = r.x * r.x + r.y * r.y;
    let mut z = r.z;
    let mut v = WGS84_A;
    let mut zk = 0.0;
    for _ in 0..20 {
        if (z - zk).abs() < 1e-6 {
            break;
        }
        zk = z;
        let sinp = z / (p2 + z * z).sqrt();
        v = WGS84_A / (1.0 - WGS84_E2 * sinp * sinp).sqrt();
        z = r.z + v * WGS84_E2 * sinp;
    }
    let lat = if p2 > 1e-12 {
        (z / p2.sqrt()).atan()
    } else if r.z > 0.0 {
        std::f64::consts::FRAC_PI_2
    } else {
        -std::f64::consts::FRAC_PI_2
    };
    let lon = if p2 > 1e-12 { r.y.atan2(r.x) } else { 0.0 };
    Geodetic {
        lat,
        lon,
        height: (p2 + z * z).sqrt() - v,
    }
}

/// Rotation taking ECEF vectors to local east/north/up at `origin`.
pub fn ecef_to_enu_matrix(origin: &Geodetic) -> Matrix3<f64> {
    let (sl, cl) = origin.lat.sin_cos();
    let (so, co) = origin.lon.sin_cos();
    Matrix3::new(
        -so,
        co,
        0.0, //
        -sl * co,
        -sl * so,
        cl, //
        cl * co,
        cl * so,
        sl,
    )
}

/// ENU components of `delta` (an ECEF difference vector) at `origin`.
pub fn enu(origin: &Geodetic, delta: &Vector3<f64>) -> Vector3<f64> {
    ecef_to_enu_matrix(origin) * delta
}

/// Azimuth (clockwise from north) and elevation of `target` as seen from
/// `observer`, both ECEF. Returns radians; azimuth in `[0, 2π)`.
pub fn az_el(observer: &Vector3<f64>, target: &Vector3<f64>) -> (f64, f64) {
    let geo = ecef_to_geodetic(observer);
    let los = target - observer;
    let norm = los.norm();
    if norm == 0.0 {
        return (0.0, std::f64::consts::FRAC_PI_2);
    }
    let e = enu(&geo, &(los / norm));
    let mut az = e.x.atan2(e.y);
    if az < 0.0 {
        az += std::f64::consts::TAU;
    }
    let el = e.z.clamp(-1.0, 1.0).asin();
    (az, el)
}
