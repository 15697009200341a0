//! Broadcast ionosphere (Klobuchar) and standard-atmosphere troposphere
//! (Saastamoinen) delay models.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::coords::Geodetic;
use crate::gnss::{FREQ_GPS_L1, SPEED_OF_LIGHT};
use crate::rinex::IonoCoefficients;
use crate::time::GnssTime;

/// Lowest elevation the troposphere model is evaluated at (rad).
pub const MIN_TROPO_ELEVATION: f64 = 0.05;

pub const DEFAULT_HUMIDITY: f64 = 0.7;

/// Klobuchar L1 group delay in meters.
///
/// `az` and `el` in radians; the model works internally in semicircles.
pub fn klobuchar_delay(t: GnssTime, user: &Geodetic, az: f64, el: f64, coef: &IonoCoefficients) -> f64 {
    let phi_u = user.lat / PI;
    let lam_u = user.lon / PI;
    let e = el / PI;

    let psi = 0.0137 / (e + 0.11) - 0.022;
    let phi_i = (phi_u + psi * az.cos()).clamp(-0.416, 0.416);
    let lam_i = lam_u + psi * az.sin() / (phi_i * PI).cos();
    let phi_m = phi_i + 0.064 * ((lam_i - 1.617) * PI).cos();

    let local = (43_200.0 * lam_i + t.tow()).rem_euclid(86_400.0);
    let f = 1.0 + 16.0 * (0.53 - e).powi(3);

    let poly = |c: &[f64; 4]| c[0] + phi_m * (c[1] + phi_m * (c[2] + phi_m * c[3]));
    let amp = poly(&coef.alpha).max(0.0);
    let per = poly(&coef.beta).max(72_000.0);

    let x = 2.0 * PI * (local - 50_400.0) / per;
    let delay_s = if x.abs() < 1.57 {
        let x2 = x * x;
        f * (5e-9 + amp * (1.0 - x2 / 2.0 + x2 * x2 / 24.0))
    } else {
        f * 5e-9
    };
    SPEED_OF_LIGHT * delay_s
}

/// Ratio converting an L1 ionospheric delay to carrier frequency `freq`.
pub fn iono_frequency_scale(freq: f64) -> f64 {
    (FREQ_GPS_L1 / freq).powi(2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TroposphereDelay {
    pub meters: f64,
    /// Elevation was below `MIN_TROPO_ELEVATION` and was raised to it.
    pub clamped: bool,
}

/// Saastamoinen total slant delay with a standard atmosphere.
pub fn saastamoinen_delay(user: &Geodetic, el: f64, humidity: f64) -> TroposphereDelay {
    let clamped = el < MIN_TROPO_ELEVATION;
    let el = el.clamp(MIN_TROPO_ELEVATION, FRAC_PI_2);
    let h = user.height;

    let pressure = 1013.25 * (1.0 - 2.2557e-5 * h).powf(5.2568);
    let temp = 15.0 - 6.5e-3 * h + 273.16;
    let e = 6.108 * humidity * ((17.15 * temp - 4684.0) / (temp - 38.45)).exp();

    let sin_el = el.sin();
    let dry = 0.002_276_8 * pressure / (1.0 - 0.002_66 * (2.0 * user.lat).cos() - 0.000_28 * h / 1e3) / sin_el;
    let wet = 0.002_277 * (1255.0 / temp + 0.05) * e / sin_el;
    TroposphereDelay {
        meters: dry + wet,
        clamped,
    }
}
