//! Single-point positioning from pseudoranges.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atmosphere::{iono_frequency_scale, klobuchar_delay, saastamoinen_delay, DEFAULT_HUMIDITY};
use crate::coords::{ecef_to_geodetic, WGS84_A};
use crate::ephemeris::{geometric_range, sat_state, signal_transmit_time_delayed, EphemerisStore};
use crate::gnss::{carrier_frequency, Band, ClockLayout, SatId, SPEED_OF_LIGHT};
use crate::rinex::{IonoCoefficients, ObservationEpoch};
use crate::time::GnssTime;

pub use crate::coords::az_el;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SppConfig {
    /// Elevation mask (rad); satellites strictly below are excluded.
    pub mask_el: f64,
    /// Pseudorange sigma scale `a` in σ(el) = a·(1 + 1/sin el) (m).
    pub sigma_a: f64,
    pub max_iterations: usize,
    /// Convergence threshold on the position update norm (m).
    pub tolerance: f64,
    pub humidity: f64,
    pub ionosphere: bool,
    pub troposphere: bool,
}

impl Default for SppConfig {
    fn default() -> Self {
        Self {
            mask_el: 5f64.to_radians(),
            sigma_a: 0.3,
            max_iterations: 10,
            tolerance: 1e-4,
            humidity: DEFAULT_HUMIDITY,
            ionosphere: true,
            troposphere: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SppSolution {
    pub time: GnssTime,
    pub pos: Vector3<f64>,
    /// Receiver clock terms in meters, ordered as `layout`: base clock then
    /// inter-system biases.
    pub clock: Vec<f64>,
    pub layout: ClockLayout,
    pub used_sats: Vec<SatId>,
    /// sqrt(trace) of the position covariance (m).
    pub sigma: f64,
    pub pos_covariance: Matrix3<f64>,
    pub residual_rms: f64,
    pub iterations: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SppError {
    #[error("{have} usable satellites, {need} required")]
    TooFewSatellites { have: usize, need: usize },
    #[error("no convergence after {0} iterations")]
    NotConverged(usize),
    #[error("singular geometry")]
    Singular,
}

/// Per-satellite quantities independent of the receiver position.
struct Prepared {
    sat: SatId,
    pseudorange: f64,
    sat_pos: Vector3<f64>,
    /// Satellite clock for this signal (s), group delay removed.
    sat_clock: f64,
    freq: f64,
}

fn prepare(epoch: &ObservationEpoch, store: &EphemerisStore) -> Vec<Prepared> {
    let mut out = Vec::new();
    for sat in epoch.satellites() {
        let pick = [Band::L1, Band::L2]
            .into_iter()
            .find_map(|b| epoch.get(sat, b).and_then(|o| o.pseudorange.map(|p| (b, p, o))));
        let Some((band, pr, _obs)) = pick else { continue };
        if !(1.0e7..6.0e7).contains(&pr) {
            continue;
        }
        let Ok(rec) = store.select(sat, epoch.time) else {
            continue;
        };
        let Ok(t_tx) = signal_transmit_time_delayed(pr, epoch.time, rec, rec.group_delay(band)) else {
            continue;
        };
        let Ok(state) = sat_state(rec, t_tx) else {
            continue;
        };
        let Some(freq) = carrier_frequency(sat.constellation, band, rec.glonass_channel()) else {
            continue;
        };
        out.push(Prepared {
            sat,
            pseudorange: pr,
            sat_pos: state.pos,
            sat_clock: state.clock_bias - rec.group_delay(band),
            freq,
        });
    }
    out
}

struct Linearized {
    sats: Vec<SatId>,
    h: DMatrix<f64>,
    v: DVector<f64>,
    w: DVector<f64>,
    layout: ClockLayout,
}

fn linearize(
    prep: &[Prepared],
    x: &DVector<f64>,
    layout_in: Option<&ClockLayout>,
    time: GnssTime,
    iono: &IonoCoefficients,
    cfg: &SppConfig,
    screened: bool,
) -> Linearized {
    let pos = Vector3::new(x[0], x[1], x[2]);
    let geo = ecef_to_geodetic(&pos);
    let mut rows = Vec::new();
    for p in prep {
        let (range, u) = geometric_range(&p.sat_pos, &pos);
        let (az, el) = az_el(&pos, &(pos + u * range));
        if screened && el < cfg.mask_el {
            continue;
        }
        let mut model = range - SPEED_OF_LIGHT * p.sat_clock;
        let el_w = if screened { el } else { std::f64::consts::FRAC_PI_2 };
        if screened {
            if cfg.ionosphere && iono.present {
                model += klobuchar_delay(time, &geo, az, el, iono) * iono_frequency_scale(p.freq);
            }
            if cfg.troposphere {
                model += saastamoinen_delay(&geo, el, cfg.humidity).meters;
            }
        }
        let sigma = cfg.sigma_a * (1.0 + 1.0 / el_w.sin());
        rows.push((p.sat, u, p.pseudorange - model, 1.0 / (sigma * sigma)));
    }
    let layout = layout_in
        .cloned()
        .unwrap_or_else(|| ClockLayout::from_sats(rows.iter().map(|r| &r.0)));
    let n = 3 + layout.len();
    let m = rows.len();
    let mut h = DMatrix::zeros(m, n);
    let mut v = DVector::zeros(m);
    let mut w = DVector::zeros(m);
    for (i, (sat, u, resid, weight)) in rows.iter().enumerate() {
        for k in 0..3 {
            h[(i, k)] = -u[k];
        }
        for (k, c) in layout.design_row(*sat).into_iter().enumerate() {
            h[(i, 3 + k)] = c;
        }
        let clk: f64 = (0..layout.len())
            .map(|k| h[(i, 3 + k)] * x.get(3 + k).copied().unwrap_or(0.0))
            .sum();
        v[i] = resid - clk;
        w[i] = *weight;
    }
    Linearized {
        sats: rows.into_iter().map(|r| r.0).collect(),
        h,
        v,
        w,
        layout,
    }
}

fn normal_solve(lin: &Linearized) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let hw = lin.h.transpose() * DMatrix::from_diagonal(&lin.w);
    let n = &hw * &lin.h;
    let b = &hw * &lin.v;
    let chol = n.cholesky()?;
    Some((chol.solve(&b), chol.inverse()))
}

/// SPP with the default configuration and the given mask.
pub fn solve_spp(
    epoch: &ObservationEpoch,
    store: &EphemerisStore,
    iono: &IonoCoefficients,
    mask_el: f64,
) -> Result<SppSolution, SppError> {
    let cfg = SppConfig {
        mask_el,
        ..Default::default()
    };
    solve_spp_with(epoch, store, iono, &cfg, None)
}

/// Iterative weighted least squares. `initial` seeds the position (for
/// example the previous epoch's solution); otherwise the iteration starts on
/// the Earth's surface below the first satellite.
pub fn solve_spp_with(
    epoch: &ObservationEpoch,
    store: &EphemerisStore,
    iono: &IonoCoefficients,
    cfg: &SppConfig,
    initial: Option<&Vector3<f64>>,
) -> Result<SppSolution, SppError> {
    let prep = prepare(epoch, store);
    if prep.len() < 4 {
        return Err(SppError::TooFewSatellites {
            have: prep.len(),
            need: 4,
        });
    }
    let start = match initial {
        Some(p) => *p,
        None => prep[0].sat_pos.normalize() * WGS84_A,
    };

    // Screening (mask, atmosphere, elevation weights) needs a position near
    // the surface; a cold start runs two unscreened iterations first.
    let warmup = if initial.is_some() { 0 } else { 2 };
    let mut x: DVector<f64> = DVector::zeros(3);
    x.rows_mut(0, 3).copy_from(&start);
    let mut layout: Option<ClockLayout> = None;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations + warmup {
        let screened = iterations >= warmup;
        let lin = linearize(&prep, &x, None, epoch.time, iono, cfg, screened);
        let need = 3 + lin.layout.len();
        if lin.sats.len() < need {
            return Err(SppError::TooFewSatellites {
                have: lin.sats.len(),
                need,
            });
        }
        if layout.as_ref() != Some(&lin.layout) {
            // Satellite set changed the clock layout: remap clock values.
            let mut nx = DVector::zeros(3 + lin.layout.len());
            nx.rows_mut(0, 3).copy_from(&x.rows(0, 3));
            if let Some(old) = &layout {
                for (k, g) in lin.layout.groups().iter().enumerate() {
                    if let Some(j) = old.index_of(*g) {
                        nx[3 + k] = x[3 + j];
                    }
                }
            }
            x = nx;
            layout = Some(lin.layout.clone());
            // Residuals were formed with the old clock vector; re-linearize.
            continue;
        }
        let (dx, _) = normal_solve(&lin).ok_or(SppError::Singular)?;
        x += &dx;
        iterations += 1;
        if screened && dx.rows(0, 3).norm() < cfg.tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(SppError::NotConverged(iterations));
    }

    let layout = layout.expect("set during iteration");
    let lin = linearize(&prep, &x, Some(&layout), epoch.time, iono, cfg, true);
    if lin.sats.len() < 3 + layout.len() || lin.layout != layout {
        return Err(SppError::NotConverged(iterations));
    }
    let (_, cov) = normal_solve(&lin).ok_or(SppError::Singular)?;
    let pos_covariance: Matrix3<f64> = cov.fixed_view::<3, 3>(0, 0).into_owned();
    let residual_rms = (lin.v.norm_squared() / lin.v.len() as f64).sqrt();
    Ok(SppSolution {
        time: epoch.time,
        pos: Vector3::new(x[0], x[1], x[2]),
        clock: x.rows(3, layout.len()).iter().copied().collect(),
        layout,
        used_sats: lin.sats,
        sigma: pos_covariance.trace().sqrt(),
        pos_covariance,
        residual_rms,
        iterations,
    })
}

/// Weighted normal-equation gradient Hᵀ W v at a solution, relative to
/// ‖Hᵀ W‖·‖v‖. Zero at an exact least-squares optimum.
pub fn normal_equation_residual(
    sol: &SppSolution,
    epoch: &ObservationEpoch,
    store: &EphemerisStore,
    iono: &IonoCoefficients,
    cfg: &SppConfig,
) -> f64 {
    let prep = prepare(epoch, store);
    let mut x = DVector::zeros(3 + sol.layout.len());
    x.rows_mut(0, 3).copy_from(&sol.pos);
    for (k, c) in sol.clock.iter().enumerate() {
        x[3 + k] = *c;
    }
    let lin = linearize(&prep, &x, Some(&sol.layout), epoch.time, iono, cfg, true);
    let hw = lin.h.transpose() * DMatrix::from_diagonal(&lin.w);
    let g = &hw * &lin.v;
    g.norm() / (hw.norm() * lin.v.norm()).max(f64::MIN_POSITIVE)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::coords::Geodetic;
    use crate::ephemeris::{ClockPolynomial, EphemerisRecord, Orbit};
    use crate::gnss::Constellation;
    use crate::rinex::CarrierPhaseObs;

    /// Satellites on circular orbits spread over the sky of (35°N, 139°E),
    /// elevations cycling from 2° up to 80°.
    pub(crate) fn sky(n: usize, t: GnssTime) -> (EphemerisStore, Vec<SatId>) {
        let mut store = EphemerisStore::new();
        let mut sats = Vec::new();
        let rx = rx();
        for k in 0..n {
            let sat = if k % 4 == 3 {
                SatId::new(Constellation::Galileo, k as u8 + 1).unwrap()
            } else {
                SatId::gps(k as u8 + 1)
            };
            let az = 2.4 * k as f64;
            let el = [2.0f64, 12.0, 25.0, 40.0, 60.0, 80.0][k % 6].to_radians();
            let rec = EphemerisRecord {
                sat,
                toc: t,
                toe: t,
                orbit: Orbit::Kepler(crate::sim::circular_orbit_through(&rx, az, el, t, k % 2 == 0)),
                clock: ClockPolynomial {
                    af0: 1e-5 * k as f64,
                    af1: 0.0,
                    af2: 0.0,
                },
                tgd: 2e-9,
                tgd_l2: 0.0,
                health: 0,
                iod: 0.0,
            };
            store.insert(rec);
            sats.push(sat);
        }
        (store, sats)
    }

    /// Exact pseudorange by iterating the light-time equation around the
    /// true receiver position.
    pub(crate) fn exact_pseudorange(
        rec: &EphemerisRecord,
        rx: &Vector3<f64>,
        t_true_rx: GnssTime,
        rcv_clock_m: f64,
    ) -> (f64, f64) {
        let we = crate::ephemeris::EARTH_ROTATION_RATE;
        let mut tau = 0.07;
        let mut st = sat_state(rec, t_true_rx - tau).unwrap();
        for _ in 0..10 {
            st = sat_state(rec, t_true_rx - tau).unwrap();
            let (s, c) = (we * tau).sin_cos();
            let p = Vector3::new(c * st.pos.x + s * st.pos.y, -s * st.pos.x + c * st.pos.y, st.pos.z);
            tau = (p - rx).norm() / SPEED_OF_LIGHT;
        }
        let (_, el) = {
            let (s, c) = (we * tau).sin_cos();
            let p = Vector3::new(c * st.pos.x + s * st.pos.y, -s * st.pos.x + c * st.pos.y, st.pos.z);
            az_el(rx, &p)
        };
        let pr = tau * SPEED_OF_LIGHT + rcv_clock_m - SPEED_OF_LIGHT * (st.clock_bias - rec.tgd);
        (pr, el)
    }

    pub(crate) fn synthetic_epoch(
        store: &EphemerisStore,
        sats: &[SatId],
        rx: &Vector3<f64>,
        t: GnssTime,
        clock_s: f64,
        min_el: f64,
    ) -> ObservationEpoch {
        let mut e = ObservationEpoch::new(t + clock_s);
        for sat in sats {
            let rec = &store.records(*sat)[0];
            let (pr, el) = exact_pseudorange(rec, rx, t, clock_s * SPEED_OF_LIGHT);
            if el < min_el {
                continue;
            }
            e.obs.push(CarrierPhaseObs {
                sat: *sat,
                band: Band::L1,
                code: "1C".into(),
                phase: None,
                pseudorange: Some(pr),
                doppler: None,
                snr: None,
                lli_flags: 0,
                wavelength: 0.19,
            });
        }
        e
    }

    fn plain_cfg() -> SppConfig {
        SppConfig {
            ionosphere: false,
            troposphere: false,
            ..Default::default()
        }
    }

    fn rx() -> Vector3<f64> {
        Geodetic::from_degrees(35.0, 139.0, 50.0).to_ecef()
    }

    #[test]
    fn noiseless_recovers_position() {
        let t = GnssTime::new(2100, 10_000.0);
        let (store, sats) = sky(8, t);
        let e = synthetic_epoch(&store, &sats, &rx(), t, 0.0, 0.2);
        assert!(e.obs.len() >= 6, "{} visible", e.obs.len());
        let sol = solve_spp_with(&e, &store, &IonoCoefficients::default(), &plain_cfg(), None).unwrap();
        assert!((sol.pos - rx()).norm() < 1e-6, "{}", (sol.pos - rx()).norm());
        assert!(sol.clock.iter().all(|c| c.abs() < 1e-6));
    }

    #[test]
    fn clock_separates_from_position() {
        let t = GnssTime::new(2100, 10_000.0);
        let (store, sats) = sky(8, t);
        let e = synthetic_epoch(&store, &sats, &rx(), t, 1e-3, 0.2);
        let sol = solve_spp_with(&e, &store, &IonoCoefficients::default(), &plain_cfg(), None).unwrap();
        assert!((sol.pos - rx()).norm() < 1e-6);
        assert!((sol.clock[0] - SPEED_OF_LIGHT * 1e-3).abs() < 1e-6);
        // Galileo shares the receiver clock, so its inter-system bias is zero.
        assert_eq!(sol.layout.len(), 2);
        assert!(sol.clock[1].abs() < 1e-6);
    }

    #[test]
    fn residuals_orthogonal_to_parameters() {
        let t = GnssTime::new(2100, 10_000.0);
        let (store, sats) = sky(12, t);
        let mut e = synthetic_epoch(&store, &sats, &rx(), t, 2e-4, 0.1);
        for (k, o) in e.obs.iter_mut().enumerate() {
            *o.pseudorange.as_mut().unwrap() += 0.8 * (1.7 * k as f64).sin();
        }
        let cfg = SppConfig::default();
        let sol = solve_spp_with(&e, &store, &IonoCoefficients::default(), &cfg, None).unwrap();
        assert!(sol.residual_rms > 0.1);
        let g = normal_equation_residual(&sol, &e, &store, &IonoCoefficients::default(), &cfg);
        assert!(g < 1e-9, "{g}");
    }

    #[test]
    fn too_few_satellites() {
        let t = GnssTime::new(2100, 10_000.0);
        let (store, sats) = sky(8, t);
        let mut e = synthetic_epoch(&store, &sats, &rx(), t, 0.0, 0.2);
        e.obs.truncate(3);
        assert!(matches!(
            solve_spp(&e, &store, &IonoCoefficients::default(), 0.0),
            Err(SppError::TooFewSatellites { .. })
        ));
    }

    #[test]
    fn mask_is_exclusive() {
        let t = GnssTime::new(2100, 10_000.0);
        let (store, sats) = sky(12, t);
        let e = synthetic_epoch(&store, &sats, &rx(), t, 0.0, -0.05);
        let mask = 5f64.to_radians();
        let cfg = SppConfig {
            mask_el: mask,
            ..plain_cfg()
        };
        let sol = solve_spp_with(&e, &store, &IonoCoefficients::default(), &cfg, None).unwrap();
        let mut excluded = 0;
        for sat in e.satellites() {
            let rec = &store.records(sat)[0];
            let (_, el) = exact_pseudorange(rec, &rx(), t, 0.0);
            if el < mask {
                excluded += 1;
                assert!(!sol.used_sats.contains(&sat));
            } else {
                assert!(sol.used_sats.contains(&sat));
            }
        }
        assert!(excluded > 0);
    }

    #[test]
    fn zenith_and_horizon() {
        let g = Geodetic::from_degrees(-33.0, 151.0, 0.0);
        let user = g.to_ecef();
        let above = Geodetic::new(g.lat, g.lon, 2.0e7).to_ecef();
        let (_, el) = az_el(&user, &above);
        assert!((el - std::f64::consts::FRAC_PI_2).abs() < 1e-9);
        let east = crate::coords::ecef_to_enu_matrix(&g).transpose() * Vector3::new(1.0, 0.0, 0.0);
        let (az, el) = az_el(&user, &(user + east * 2.0e7));
        assert!(el.abs() < 1e-9);
        assert!((az - std::f64::consts::FRAC_PI_2).abs() < 1e-9);
    }

    #[test]
    fn az_el_hand_computed() {
        // Observer on the equator at 0° longitude, target in the southern
        // hemisphere on the 90°E meridian plane: line of sight (−R, R, −R)
        // from the observer has ENU components (R, −R, −R).
        let user = Vector3::new(crate::coords::WGS84_A, 0.0, 0.0);
        let r = 1.0e7;
        let target = user + Vector3::new(-r, r, -r);
        let (az, el) = az_el(&user, &target);
        assert!((az - 135f64.to_radians()).abs() < 1e-12);
        assert!((el - (-1.0f64 / 3f64.sqrt()).asin()).abs() < 1e-12);
    }
}
