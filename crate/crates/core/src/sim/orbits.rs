use nalgebra::Vector3;

use crate::coords::{ecef_to_enu_matrix, ecef_to_geodetic};
use crate::ephemeris::{KeplerElements, EARTH_ROTATION_RATE};
use crate::time::GnssTime;

/// Nominal GPS semi-major-axis root (√m).
pub const GPS_SQRT_A: f64 = 5153.7;
pub const DEFAULT_INCLINATION: f64 = 55.0 * std::f64::consts::PI / 180.0;

/// Circular orbit elements that put a satellite at azimuth `az` and elevation
/// `el` (rad) as seen from `rx` at `toe`. `rising` picks the orbit branch
/// along which the satellite's elevation increases at that instant.
///
/// The inclination is raised above the default when the sub-satellite
/// latitude requires it.
pub fn circular_orbit_through(rx: &Vector3<f64>, az: f64, el: f64, toe: GnssTime, rising: bool) -> KeplerElements {
    let a = GPS_SQRT_A * GPS_SQRT_A;
    let geo = ecef_to_geodetic(rx);
    let enu_to_ecef = ecef_to_enu_matrix(&geo).transpose();
    let los = enu_to_ecef * Vector3::new(el.cos() * az.sin(), el.cos() * az.cos(), el.sin());
    let b = rx.dot(&los);
    let rho = -b + (b * b - rx.norm_squared() + a * a).sqrt();
    let p = (rx + los * rho) / a;

    let lat_sub = p.z.clamp(-1.0, 1.0).asin();
    let incl = DEFAULT_INCLINATION.max(lat_sub.abs() + 0.02);

    let pick = |ascending: bool| {
        let s = (p.z / incl.sin()).clamp(-1.0, 1.0);
        let u = if ascending {
            s.asin()
        } else {
            std::f64::consts::PI - s.asin()
        };
        let node = p.y.atan2(p.x) - (u.sin() * incl.cos()).atan2(u.cos());
        (u, node)
    };
    // Choose the branch whose elevation trend matches `rising`.
    let elevation_after = |u: f64, node: f64, dt: f64| {
        let n = (3.986_005e14 / (a * a * a)).sqrt();
        let uu = u + n * dt;
        let nn = node - EARTH_ROTATION_RATE * dt;
        let (su, cu) = uu.sin_cos();
        let (so, co) = nn.sin_cos();
        let ci = incl.cos();
        let q = Vector3::new(cu * co - su * ci * so, cu * so + su * ci * co, su * incl.sin()) * a;
        let d = (q - rx).normalize();
        (ecef_to_enu_matrix(&geo) * d).z.asin()
    };
    let mut chosen = pick(true);
    for asc in [true, false] {
        let (u, node) = pick(asc);
        if (elevation_after(u, node, 30.0) > el) == rising {
            chosen = (u, node);
            break;
        }
    }
    let (u, node) = chosen;
    KeplerElements {
        sqrt_a: GPS_SQRT_A,
        e: 0.0,
        i0: incl,
        omega0: node + EARTH_ROTATION_RATE * toe.tow(),
        omega: 0.0,
        m0: u,
        delta_n: 0.0,
        idot: 0.0,
        omega_dot: 0.0,
        cuc: 0.0,
        cus: 0.0,
        crc: 0.0,
        crs: 0.0,
        cic: 0.0,
        cis: 0.0,
    }
}
