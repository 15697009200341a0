//! Time-differenced carrier phase between epoch pairs, and cycle-slip
//! evidence from loss-of-lock flags and the geometry-free combination.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::atmosphere::{iono_frequency_scale, klobuchar_delay, saastamoinen_delay, DEFAULT_HUMIDITY};
use crate::coords::{az_el, ecef_to_geodetic};
use crate::ephemeris::{geometric_range, sat_state, signal_transmit_time_delayed, EphemerisRecord, EphemerisStore};
use crate::gnss::{Band, SatId, SPEED_OF_LIGHT};
use crate::rinex::{IonoCoefficients, ObservationEpoch};
use crate::time::GnssTime;

/// Zenith carrier-phase noise (m).
pub const PHASE_SIGMA_ZENITH: f64 = 0.003;

/// Geometry-free jump threshold (m).
pub const GF_JUMP_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TdcpConfig {
    pub mask_el: f64,
    pub sigma0: f64,
    pub ionosphere: bool,
    pub troposphere: bool,
    pub humidity: f64,
    /// Band forced per satellite; others use L1 when both epochs carry an L1
    /// phase, else L2.
    pub bands: BTreeMap<SatId, Band>,
}

impl Default for TdcpConfig {
    fn default() -> Self {
        Self {
            mask_el: 5f64.to_radians(),
            sigma0: PHASE_SIGMA_ZENITH,
            ionosphere: true,
            troposphere: true,
            humidity: DEFAULT_HUMIDITY,
            bands: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdcpMeasurement {
    pub sat: SatId,
    pub band: Band,
    pub t1: GnssTime,
    pub t2: GnssTime,
    /// Phase difference in meters with satellite clock and atmosphere removed.
    pub corrected: f64,
    /// Range change caused by satellite motion, receiver held at the
    /// reference point (m).
    pub delta_l: f64,
    /// Unit vector from the reference point to the satellite at t2 (ECEF).
    pub u: Vector3<f64>,
    pub variance: f64,
    pub wavelength: f64,
    /// Elevation at t2 (rad).
    pub elevation: f64,
}

impl TdcpMeasurement {
    /// corrected − ΔL: receiver displacement along −u plus clock change and
    /// any slip.
    pub fn observed(&self) -> f64 {
        self.corrected - self.delta_l
    }
}

/// Phase noise σ(el) = σ0 / sin(el) (m).
pub fn phase_sigma(sigma0: f64, el: f64) -> f64 {
    sigma0 / el.sin()
}

/// Variance of a phase difference between two epochs: 2σ(el)².
pub fn tdcp_variance(sigma0: f64, el: f64) -> f64 {
    2.0 * phase_sigma(sigma0, el).powi(2)
}

pub fn processing_band(e1: &ObservationEpoch, e2: &ObservationEpoch, sat: SatId) -> Option<Band> {
    [Band::L1, Band::L2].into_iter().find(|b| {
        let has = |e: &ObservationEpoch| e.get(sat, *b).is_some_and(|o| o.phase.is_some());
        has(e1) && has(e2)
    })
}

struct EpochTerms {
    phase_m: f64,
    sat_pos: Vector3<f64>,
    sat_clock: f64,
    wavelength: f64,
    freq: f64,
}

fn epoch_terms(e: &ObservationEpoch, sat: SatId, band: Band, rec: &EphemerisRecord) -> Option<EpochTerms> {
    let obs = e.get(sat, band)?;
    let phase = obs.phase.filter(|p| p.is_finite())?;
    let (pr_band, pr) = [band, other(band)]
        .into_iter()
        .find_map(|b| e.get(sat, b).and_then(|o| o.pseudorange).map(|p| (b, p)))?;
    if !(1.0e7..6.0e7).contains(&pr) {
        return None;
    }
    let t_tx = signal_transmit_time_delayed(pr, e.time, rec, rec.group_delay(pr_band)).ok()?;
    let state = sat_state(rec, t_tx).ok()?;
    Some(EpochTerms {
        phase_m: phase * obs.wavelength,
        sat_pos: state.pos,
        sat_clock: state.clock_bias,
        wavelength: obs.wavelength,
        freq: SPEED_OF_LIGHT / obs.wavelength,
    })
}

fn other(b: Band) -> Band {
    match b {
        Band::L1 => Band::L2,
        Band::L2 => Band::L1,
    }
}

/// Ionosphere and troposphere in the phase at one epoch, with the sign they
/// enter the carrier phase: −I + T (m).
fn phase_atmosphere(
    t: GnssTime,
    approx: &Vector3<f64>,
    sat_pos: &Vector3<f64>,
    freq: f64,
    iono: &IonoCoefficients,
    cfg: &TdcpConfig,
) -> (f64, f64) {
    let (range, u) = geometric_range(sat_pos, approx);
    let (az, el) = az_el(approx, &(approx + u * range));
    let geo = ecef_to_geodetic(approx);
    let mut atm = 0.0;
    if cfg.ionosphere && iono.present {
        atm -= klobuchar_delay(t, &geo, az, el, iono) * iono_frequency_scale(freq);
    }
    if cfg.troposphere {
        atm += saastamoinen_delay(&geo, el, cfg.humidity).meters;
    }
    (atm, el)
}

/// TDCP measurements between `e1` and `e2` with the default configuration
/// and the given elevation mask.
pub fn build_tdcp(
    e1: &ObservationEpoch,
    e2: &ObservationEpoch,
    store: &EphemerisStore,
    iono: &IonoCoefficients,
    approx_pos1: &Vector3<f64>,
    approx_pos2: &Vector3<f64>,
    mask_el: f64,
) -> Vec<TdcpMeasurement> {
    let cfg = TdcpConfig {
        mask_el,
        ..TdcpConfig::default()
    };
    build_tdcp_with(e1, e2, store, iono, approx_pos1, approx_pos2, &cfg)
}

/// TDCP measurements between `e1` and `e2`.
///
/// Both epochs use the record selected at `e2`. ΔL and u are computed with
/// the receiver held at `approx_pos1`, so that the residual receiver motion
/// enters as −u·(p2 − p1); atmosphere terms use each epoch's own position.
pub fn build_tdcp_with(
    e1: &ObservationEpoch,
    e2: &ObservationEpoch,
    store: &EphemerisStore,
    iono: &IonoCoefficients,
    approx_pos1: &Vector3<f64>,
    approx_pos2: &Vector3<f64>,
    cfg: &TdcpConfig,
) -> Vec<TdcpMeasurement> {
    let mut out = Vec::new();
    for sat in e2.satellites() {
        let band = match cfg.bands.get(&sat) {
            Some(b) => *b,
            None => match processing_band(e1, e2, sat) {
                Some(b) => b,
                None => continue,
            },
        };
        let Ok(rec) = store.select(sat, e2.time) else {
            continue;
        };
        let (Some(a), Some(b)) = (epoch_terms(e1, sat, band, rec), epoch_terms(e2, sat, band, rec)) else {
            continue;
        };
        if (a.wavelength - b.wavelength).abs() > 1e-12 {
            continue;
        }
        let (atm1, _) = phase_atmosphere(e1.time, approx_pos1, &a.sat_pos, a.freq, iono, cfg);
        let (atm2, el2) = phase_atmosphere(e2.time, approx_pos2, &b.sat_pos, b.freq, iono, cfg);
        if el2 < cfg.mask_el || !el2.is_finite() {
            continue;
        }
        let corrected = (b.phase_m - a.phase_m) - (atm2 - atm1) + SPEED_OF_LIGHT * (b.sat_clock - a.sat_clock);
        let (r2, u) = geometric_range(&b.sat_pos, approx_pos1);
        let (r1, _) = geometric_range(&a.sat_pos, approx_pos1);
        if !corrected.is_finite() {
            continue;
        }
        out.push(TdcpMeasurement {
            sat,
            band,
            t1: e1.time,
            t2: e2.time,
            corrected,
            delta_l: r2 - r1,
            u,
            variance: tdcp_variance(cfg.sigma0, el2),
            wavelength: b.wavelength,
            elevation: el2,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlipEvidence {
    pub sat: SatId,
    pub t: GnssTime,
    /// Loss-of-lock bit on any phase of the satellite at `t`.
    pub lli_flag: bool,
    pub gf_jump: bool,
    /// λ1Φ1 − λ2Φ2 at `t` (m), when both phases are present.
    pub gf_value: Option<f64>,
}

impl SlipEvidence {
    pub fn fired(&self) -> bool {
        self.lli_flag || self.gf_jump
    }
}

/// Geometry-free combination λ1Φ1 − λ2Φ2 (m).
pub fn geometry_free(e: &ObservationEpoch, sat: SatId) -> Option<f64> {
    let l1 = e.get(sat, Band::L1)?;
    let l2 = e.get(sat, Band::L2)?;
    Some(l1.phase? * l1.wavelength - l2.phase? * l2.wavelength)
}

pub fn detect_slip_evidence(e_prev: &ObservationEpoch, e_cur: &ObservationEpoch) -> Vec<SlipEvidence> {
    detect_slip_evidence_with(e_prev, e_cur, GF_JUMP_THRESHOLD)
}

/// Slip evidence for every satellite with a phase at `e_cur`.
pub fn detect_slip_evidence_with(
    e_prev: &ObservationEpoch,
    e_cur: &ObservationEpoch,
    gf_threshold: f64,
) -> Vec<SlipEvidence> {
    e_cur
        .satellites()
        .into_iter()
        .filter(|sat| e_cur.obs.iter().any(|o| o.sat == *sat && o.phase.is_some()))
        .map(|sat| {
            let lli_flag = e_cur.obs.iter().any(|o| o.sat == sat && o.phase.is_some() && o.lli());
            let gf_value = geometry_free(e_cur, sat);
            let gf_jump = match (geometry_free(e_prev, sat), gf_value) {
                (Some(p), Some(c)) => (c - p).abs() > gf_threshold,
                _ => false,
            };
            SlipEvidence {
                sat,
                t: e_cur.time,
                lli_flag,
                gf_jump,
                gf_value,
            }
        })
        .collect()
}
