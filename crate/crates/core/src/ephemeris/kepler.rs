use nalgebra::Vector3;

use super::{EphemerisError, EphemerisRecord, KeplerElements, SatelliteState};
use crate::gnss::{Constellation, SPEED_OF_LIGHT};
use crate::time::{GnssTime, BDT_TO_GPST_SECONDS};

const MU_GPS: f64 = 3.986_005e14;
const MU_GAL: f64 = 3.986_004_418e14;
const MU_BDS: f64 = 3.986_004_418e14;
const OMEGA_E_GPS: f64 = 7.292_115_146_7e-5;
const OMEGA_E_BDS: f64 = 7.292_115e-5;

/// -2·sqrt(μ)/c² for GPS (s/√m).
pub const RELATIVISTIC_F_GPS: f64 = -4.442_807_633e-10;

const KEPLER_TOL: f64 = 1e-12;
const KEPLER_MAX_ITER: usize = 30;

fn constants(c: Constellation) -> (f64, f64) {
    match c {
        Constellation::Galileo => (MU_GAL, OMEGA_E_GPS),
        Constellation::BeiDou => (MU_BDS, OMEGA_E_BDS),
        _ => (MU_GPS, OMEGA_E_GPS),
    }
}

/// toe as seconds of week in the constellation's own time scale; the node
/// longitude is referenced to that scale's week start.
fn toe_sow(rec: &EphemerisRecord) -> f64 {
    match rec.sat.constellation {
        Constellation::BeiDou => (rec.toe - BDT_TO_GPST_SECONDS).tow(),
        _ => rec.toe.tow(),
    }
}

pub(super) fn evaluate(
    rec: &EphemerisRecord,
    k: &KeplerElements,
    t: GnssTime,
) -> Result<SatelliteState, EphemerisError> {
    let (mu, omega_e) = constants(rec.sat.constellation);
    let a = k.semi_major_axis();
    let tk = t - rec.toe;
    let n = (mu / (a * a * a)).sqrt() + k.delta_n;
    let m = k.m0 + n * tk;

    let mut ecc = m;
    let mut converged = false;
    for _ in 0..KEPLER_MAX_ITER {
        let step = (ecc - k.e * ecc.sin() - m) / (1.0 - k.e * ecc.cos());
        ecc -= step;
        if step.abs() < KEPLER_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(EphemerisError::KeplerNotConverged(rec.sat));
    }

    let (sin_e, cos_e) = ecc.sin_cos();
    let one_minus = 1.0 - k.e * cos_e;
    let sq = (1.0 - k.e * k.e).sqrt();
    let nu = (sq * sin_e).atan2(cos_e - k.e);
    let phi = nu + k.omega;
    let (s2, c2) = (2.0 * phi).sin_cos();

    let u = phi + k.cus * s2 + k.cuc * c2;
    let r = a * one_minus + k.crs * s2 + k.crc * c2;
    let i = k.i0 + k.idot * tk + k.cis * s2 + k.cic * c2;

    let e_dot = n / one_minus;
    let phi_dot = sq * e_dot / one_minus;
    let u_dot = phi_dot * (1.0 + 2.0 * (k.cus * c2 - k.cuc * s2));
    let r_dot = a * k.e * sin_e * e_dot + 2.0 * phi_dot * (k.crs * c2 - k.crc * s2);
    let i_dot = k.idot + 2.0 * phi_dot * (k.cis * c2 - k.cic * s2);

    let (su, cu) = u.sin_cos();
    let xp = r * cu;
    let yp = r * su;
    let xp_dot = r_dot * cu - r * u_dot * su;
    let yp_dot = r_dot * su + r * u_dot * cu;
    let (si, ci) = i.sin_cos();

    let (pos, vel) = if rec.sat.is_beidou_geo() {
        beidou_geo(k, rec, tk, omega_e, xp, yp, xp_dot, yp_dot, si, ci, i_dot)
    } else {
        let big_omega_dot = k.omega_dot - omega_e;
        let big_omega = k.omega0 + big_omega_dot * tk - omega_e * toe_sow(rec);
        let (so, co) = big_omega.sin_cos();
        let x = xp * co - yp * ci * so;
        let y = xp * so + yp * ci * co;
        let z = yp * si;
        let vx = xp_dot * co - yp_dot * ci * so + yp * si * so * i_dot - y * big_omega_dot;
        let vy = xp_dot * so + yp_dot * ci * co - yp * si * co * i_dot + x * big_omega_dot;
        let vz = yp_dot * si + yp * ci * i_dot;
        (Vector3::new(x, y, z), Vector3::new(vx, vy, vz))
    };

    let dt = t - rec.toc;
    let c = &rec.clock;
    let f = -2.0 * mu.sqrt() / (SPEED_OF_LIGHT * SPEED_OF_LIGHT);
    let rel = f * k.e * k.sqrt_a * sin_e;
    let rel_dot = f * k.e * k.sqrt_a * cos_e * e_dot;
    Ok(SatelliteState {
        pos,
        vel,
        clock_bias: c.af0 + c.af1 * dt + c.af2 * dt * dt + rel,
        clock_drift: c.af1 + 2.0 * c.af2 * dt + rel_dot,
    })
}

/// BeiDou GEO orbits are broadcast in an inertial-like frame tilted by -5°.
#[allow(clippy::too_many_arguments)]
fn beidou_geo(
    k: &KeplerElements,
    rec: &EphemerisRecord,
    tk: f64,
    omega_e: f64,
    xp: f64,
    yp: f64,
    xp_dot: f64,
    yp_dot: f64,
    si: f64,
    ci: f64,
    i_dot: f64,
) -> (Vector3<f64>, Vector3<f64>) {
    let big_omega = k.omega0 + k.omega_dot * tk - omega_e * toe_sow(rec);
    let (so, co) = big_omega.sin_cos();
    let g = Vector3::new(xp * co - yp * ci * so, xp * so + yp * ci * co, yp * si);
    let g_dot = Vector3::new(
        xp_dot * co - yp_dot * ci * so + yp * si * so * i_dot - g.y * k.omega_dot,
        xp_dot * so + yp_dot * ci * co - yp * si * co * i_dot + g.x * k.omega_dot,
        yp_dot * si + yp * ci * i_dot,
    );
    let (s5, c5) = (-5.0f64).to_radians().sin_cos();
    let rot = |v: &Vector3<f64>| Vector3::new(v.x, c5 * v.y + s5 * v.z, -s5 * v.y + c5 * v.z);
    let tilted = rot(&g);
    let tilted_dot = rot(&g_dot);
    let (sz, cz) = (omega_e * tk).sin_cos();
    let pos = Vector3::new(cz * tilted.x + sz * tilted.y, -sz * tilted.x + cz * tilted.y, tilted.z);
    let vel = Vector3::new(
        cz * tilted_dot.x + sz * tilted_dot.y + omega_e * pos.y,
        -sz * tilted_dot.x + cz * tilted_dot.y - omega_e * pos.x,
        tilted_dot.z,
    );
    (pos, vel)
}

#[cfg(test)]
mod tests {
    use super::super::tests::circular_gps_record;
    use super::super::*;
    use crate::gnss::SatId;
    use proptest::prelude::*;

    /// Record from the RINEX format description's GPS navigation example
    /// (G06, toe 409904 s of week 1025).
    pub(crate) fn example_gps_record() -> EphemerisRecord {
        let toe = GnssTime::new(1025, 409_904.0);
        EphemerisRecord {
            sat: SatId::gps(6),
            toc: GnssTime::new(1025, 4.0 * 86400.0 + 17.0 * 3600.0 + 51.0 * 60.0 + 44.0),
            toe,
            orbit: Orbit::Kepler(KeplerElements {
                crs: 93.40625,
                delta_n: 0.116040547840e-08,
                m0: 0.162092304801,
                cuc: 0.484101474285e-05,
                e: 0.626740418375e-02,
                cus: 0.652112066746e-05,
                sqrt_a: 0.515365489006e+04,
                cic: 0.242143869400e-07,
                omega0: 0.329237003460,
                cis: -0.596046447754e-07,
                i0: 0.111541663136e+01,
                crc: 326.59375,
                omega: 0.206958726335e+01,
                omega_dot: -0.638312302555e-08,
                idot: 0.307155651409e-09,
            }),
            clock: ClockPolynomial {
                af0: -0.839701388031e-03,
                af1: -0.165982783074e-10,
                af2: 0.0,
            },
            tgd: 0.0,
            tgd_l2: 0.0,
            health: 0,
            iod: 91.0,
        }
    }

    #[test]
    fn circular_orbit_radius() {
        let rec = circular_gps_record(SatId::gps(1), GnssTime::new(2000, 0.0));
        for dt in [0.0, 100.0, 3600.0, -5000.0] {
            let s = sat_state(&rec, GnssTime::new(2000, 0.0) + dt).unwrap();
            assert!((s.pos.norm() - 5153.7f64.powi(2)).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_clock() {
        let mut rec = circular_gps_record(SatId::gps(1), GnssTime::new(2000, 0.0));
        rec.clock.af0 = 1e-4;
        // e = 0 makes the relativistic term vanish.
        let s = sat_state(&rec, GnssTime::new(2000, 1234.0)).unwrap();
        assert!((s.clock_bias - 1e-4).abs() < 1e-18);
        let mut rec = example_gps_record();
        rec.clock = ClockPolynomial {
            af0: 1e-4,
            ..Default::default()
        };
        let t = rec.toe + 10.0;
        let s = sat_state(&rec, t).unwrap();
        let rel = s.clock_bias - 1e-4;
        // relativistic term is bounded by |F|·e·sqrt(A)
        assert!(rel.abs() <= 4.442_807_633e-10 * 0.626740418375e-02 * 5153.65489006 + 1e-15);
    }

    // Frozen values from an independently written Python evaluation of the
    // standard broadcast orbit algorithm on the same record.
    #[test]
    fn matches_independent_evaluator() {
        let rec = example_gps_record();
        let cases = [
            (409_904.0, [-4_237_540.747_158, -18_156_232.376_899, 18_685_002.187_653]),
            (411_704.0, [-3_664_749.048_946, -21_958_970.726_843, 14_205_300.645_319]),
            (406_304.0, [-8_041_596.661_689, -8_934_690.684_726, 23_509_422.754_690]),
        ];
        for (tow, expected) in cases {
            let s = sat_state(&rec, GnssTime::new(1025, tow)).unwrap();
            let e = Vector3::from(expected);
            assert!((s.pos - e).norm() < 1e-3, "tow {tow}: {} vs {}", s.pos, e);
        }
    }

    #[test]
    fn pure_function() {
        let rec = example_gps_record();
        let t = GnssTime::new(1025, 410_000.123);
        let a = sat_state(&rec, t).unwrap();
        let b = sat_state(&rec, t).unwrap();
        assert_eq!(a.pos.as_slice(), b.pos.as_slice());
        assert_eq!(a.clock_bias.to_bits(), b.clock_bias.to_bits());
    }

    #[test]
    fn corrupt_record_does_not_converge() {
        let mut rec = example_gps_record();
        if let Orbit::Kepler(k) = &mut rec.orbit {
            k.e = f64::NAN;
        }
        assert!(matches!(
            sat_state(&rec, rec.toe),
            Err(EphemerisError::KeplerNotConverged(_))
        ));
    }

    #[test]
    fn beidou_geo_is_geostationary() {
        let toe = GnssTime::from_bdt(644, 0.0);
        let mut rec = circular_gps_record("C03".parse().unwrap(), toe);
        if let Orbit::Kepler(k) = &mut rec.orbit {
            k.sqrt_a = 6493.4;
            k.i0 = 5f64.to_radians();
            k.omega0 = std::f64::consts::PI;
            k.omega_dot = 0.0;
        }
        let a = sat_state(&rec, toe).unwrap();
        let b = sat_state(&rec, toe + 600.0).unwrap();
        assert!((a.pos.norm() - 6493.4f64.powi(2)).abs() < 1.0);
        // nearly fixed over the Earth: a few km of drift at most in 10 min
        assert!((a.pos - b.pos).norm() < 10_000.0);
        assert!(b.vel.norm() < 50.0);
    }

    proptest! {
        #[test]
        fn velocity_matches_finite_difference(dt in -7000.0f64..7000.0) {
            let rec = example_gps_record();
            let t = rec.toe + dt;
            let s = sat_state(&rec, t).unwrap();
            let p = sat_state(&rec, t + 0.5).unwrap().pos;
            let m = sat_state(&rec, t - 0.5).unwrap().pos;
            let fd = (p - m) / 1.0;
            prop_assert!((fd - s.vel).norm() < 1e-3);
            let cp = sat_state(&rec, t + 0.5).unwrap().clock_bias;
            let cm = sat_state(&rec, t - 0.5).unwrap().clock_bias;
            prop_assert!(((cp - cm) - s.clock_drift).abs() < 1e-15);
            prop_assert!(s.pos.norm() > 1.8e7 && s.pos.norm() < 4.5e7);
        }

        #[test]
        fn beidou_geo_velocity(dt in -3000.0f64..3000.0) {
            let mut rec = example_gps_record();
            rec.sat = "C02".parse().unwrap();
            if let Orbit::Kepler(k) = &mut rec.orbit {
                k.sqrt_a = 6493.4;
                k.i0 = 0.08;
            }
            let t = rec.toe + dt;
            let s = sat_state(&rec, t).unwrap();
            let p = sat_state(&rec, t + 0.5).unwrap().pos;
            let m = sat_state(&rec, t - 0.5).unwrap().pos;
            prop_assert!(((p - m) - s.vel).norm() < 1e-3);
        }
    }
}
