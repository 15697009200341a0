//! Broadcast ephemeris storage and evaluation.
//!
//! Kepler-type records (GPS, Galileo, BeiDou, QZSS) are evaluated with the
//! interface-document algorithm; GLONASS records are propagated from their
//! broadcast state vector. All positions are ECEF meters at the signal
//! transmission instant, in the satellite's own ECEF frame at that instant.

mod glonass;
mod kepler;

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gnss::{Band, Constellation, SatId, SPEED_OF_LIGHT};
use crate::time::GnssTime;

pub use glonass::{propagate_glonass, GLONASS_MAX_STEP};
pub use kepler::RELATIVISTIC_F_GPS;

/// Earth rotation rate used for the Sagnac correction (rad/s).
pub const EARTH_ROTATION_RATE: f64 = 7.292_115_146_7e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EphemerisError {
    #[error("no ephemeris for {0}")]
    NoEphemeris(SatId),
    #[error("only unhealthy ephemerides for {0}")]
    Unhealthy(SatId),
    #[error("no ephemeris for {sat} within {window_s} s of {t}")]
    OutOfWindow { sat: SatId, t: GnssTime, window_s: f64 },
    #[error("eccentric anomaly iteration did not converge for {0}")]
    KeplerNotConverged(SatId),
}

impl EphemerisError {
    /// Soft errors only exclude the satellite for the epoch at hand.
    pub fn is_soft(&self) -> bool {
        !matches!(self, Self::KeplerNotConverged(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeplerElements {
    pub sqrt_a: f64,
    pub e: f64,
    pub i0: f64,
    pub omega0: f64,
    pub omega: f64,
    pub m0: f64,
    pub delta_n: f64,
    pub idot: f64,
    pub omega_dot: f64,
    pub cuc: f64,
    pub cus: f64,
    pub crc: f64,
    pub crs: f64,
    pub cic: f64,
    pub cis: f64,
}

impl KeplerElements {
    pub fn semi_major_axis(&self) -> f64 {
        self.sqrt_a * self.sqrt_a
    }
}

/// GLONASS broadcast state vector, already converted to meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlonassState {
    pub pos: [f64; 3],
    pub vel: [f64; 3],
    pub acc: [f64; 3],
    pub freq_channel: i8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Orbit {
    Kepler(KeplerElements),
    Glonass(GlonassState),
}

/// Satellite clock polynomial: bias = af0 + af1·dt + af2·dt², dt from toc.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClockPolynomial {
    pub af0: f64,
    pub af1: f64,
    pub af2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EphemerisRecord {
    pub sat: SatId,
    pub toc: GnssTime,
    pub toe: GnssTime,
    pub orbit: Orbit,
    pub clock: ClockPolynomial,
    /// Group delay applying to the L1-class signal (s).
    pub tgd: f64,
    /// Group delay applying to the L2-class signal (s).
    pub tgd_l2: f64,
    pub health: u32,
    /// Issue of data (IODE / AODE / GLONASS tb), informational.
    pub iod: f64,
}

impl EphemerisRecord {
    pub fn is_healthy(&self) -> bool {
        self.health == 0
    }

    pub fn glonass_channel(&self) -> Option<i8> {
        match &self.orbit {
            Orbit::Glonass(g) => Some(g.freq_channel),
            Orbit::Kepler(_) => None,
        }
    }

    pub fn group_delay(&self, band: Band) -> f64 {
        match band {
            Band::L1 => self.tgd,
            Band::L2 => self.tgd_l2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SatelliteState {
    pub pos: Vector3<f64>,
    pub vel: Vector3<f64>,
    /// Satellite clock offset (s), relativistic term included for Kepler orbits.
    pub clock_bias: f64,
    pub clock_drift: f64,
}

/// Maximum |t - toe| for selecting a record, per constellation (s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidityWindows {
    pub gps: f64,
    pub glonass: f64,
    pub galileo: f64,
    pub beidou: f64,
    pub qzss: f64,
}

impl Default for ValidityWindows {
    fn default() -> Self {
        Self {
            gps: 7200.0,
            glonass: 900.0,
            galileo: 7200.0,
            beidou: 3600.0,
            qzss: 7200.0,
        }
    }
}

impl ValidityWindows {
    pub fn for_constellation(&self, c: Constellation) -> f64 {
        match c {
            Constellation::Gps => self.gps,
            Constellation::Glonass => self.glonass,
            Constellation::Galileo => self.galileo,
            Constellation::BeiDou => self.beidou,
            Constellation::Qzss => self.qzss,
        }
    }
}

/// Read-only collection of broadcast records keyed by satellite and toe.
#[derive(Debug, Clone, Default)]
pub struct EphemerisStore {
    records: BTreeMap<SatId, Vec<EphemerisRecord>>,
    pub windows: ValidityWindows,
}

impl EphemerisStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a record; a second record with the same (sat, toe) is ignored.
    /// Returns whether the record was stored.
    pub fn insert(&mut self, rec: EphemerisRecord) -> bool {
        let list = self.records.entry(rec.sat).or_default();
        if list.iter().any(|r| (r.toe - rec.toe).abs() < 1e-3) {
            return false;
        }
        let pos = list.partition_point(|r| r.toe < rec.toe);
        list.insert(pos, rec);
        true
    }

    pub fn len(&self) -> usize {
        self.records.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn satellites(&self) -> impl Iterator<Item = SatId> + '_ {
        self.records.keys().copied()
    }

    pub fn records(&self, sat: SatId) -> &[EphemerisRecord] {
        self.records.get(&sat).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn iter(&self) -> impl Iterator<Item = &EphemerisRecord> {
        self.records.values().flatten()
    }

    /// GLONASS FDMA channel for a satellite, from any of its records.
    pub fn glonass_channel(&self, sat: SatId) -> Option<i8> {
        self.records(sat).iter().find_map(EphemerisRecord::glonass_channel)
    }

    /// Healthy record with the smallest |t - toe| inside the validity window.
    pub fn select(&self, sat: SatId, t: GnssTime) -> Result<&EphemerisRecord, EphemerisError> {
        let list = self
            .records
            .get(&sat)
            .filter(|l| !l.is_empty())
            .ok_or(EphemerisError::NoEphemeris(sat))?;
        let window = self.windows.for_constellation(sat.constellation);
        let mut any_healthy = false;
        let mut best: Option<(&EphemerisRecord, f64)> = None;
        for rec in list.iter().filter(|r| r.is_healthy()) {
            any_healthy = true;
            let dt = (t - rec.toe).abs();
            if dt <= window && best.is_none_or(|(_, b)| dt < b) {
                best = Some((rec, dt));
            }
        }
        match best {
            Some((rec, _)) => Ok(rec),
            None if !any_healthy => Err(EphemerisError::Unhealthy(sat)),
            None => Err(EphemerisError::OutOfWindow {
                sat,
                t,
                window_s: window,
            }),
        }
    }
}

pub fn select_ephemeris(store: &EphemerisStore, sat: SatId, t: GnssTime) -> Result<&EphemerisRecord, EphemerisError> {
    store.select(sat, t)
}

/// Satellite clock offset at `t` (s).
pub fn sat_clock(rec: &EphemerisRecord, t: GnssTime) -> Result<f64, EphemerisError> {
    Ok(sat_state(rec, t)?.clock_bias)
}

/// Satellite position, velocity and clock at GPS time `t`.
pub fn sat_state(rec: &EphemerisRecord, t: GnssTime) -> Result<SatelliteState, EphemerisError> {
    match &rec.orbit {
        Orbit::Kepler(k) => kepler::evaluate(rec, k, t),
        Orbit::Glonass(g) => Ok(glonass::evaluate(rec, g, t, GLONASS_MAX_STEP)),
    }
}

/// Transmission time of a signal received at `t_receive` (receiver time tag)
/// with the given pseudorange: `t_rx - P/c - dts(t_tx)`, iterated twice.
pub fn signal_transmit_time(
    pseudorange: f64,
    t_receive: GnssTime,
    rec: &EphemerisRecord,
) -> Result<GnssTime, EphemerisError> {
    signal_transmit_time_delayed(pseudorange, t_receive, rec, 0.0)
}

/// As [`signal_transmit_time`], with the satellite clock of a specific signal:
/// `group_delay` (s) is subtracted from the broadcast clock.
pub fn signal_transmit_time_delayed(
    pseudorange: f64,
    t_receive: GnssTime,
    rec: &EphemerisRecord,
    group_delay: f64,
) -> Result<GnssTime, EphemerisError> {
    let t0 = t_receive - pseudorange / SPEED_OF_LIGHT;
    let mut t = t0;
    for _ in 0..2 {
        let dts = sat_clock(rec, t)? - group_delay;
        t = t0 - dts;
    }
    Ok(t)
}

/// Geometric range including the Earth-rotation (Sagnac) correction.
///
/// `sat_pos` is the satellite ECEF position at transmission; the satellite is
/// rotated into the ECEF frame of the reception instant, with the flight time
/// solved by fixed-point iteration. Returns the range and the unit vector from
/// the receiver towards the rotated satellite position.
pub fn geometric_range(sat_pos: &Vector3<f64>, rcv_pos: &Vector3<f64>) -> (f64, Vector3<f64>) {
    let mut tau = (sat_pos - rcv_pos).norm() / SPEED_OF_LIGHT;
    for _ in 0..4 {
        tau = (rotate_earth(sat_pos, tau) - rcv_pos).norm() / SPEED_OF_LIGHT;
    }
    let los = rotate_earth(sat_pos, tau) - rcv_pos;
    let range = los.norm();
    (range, los / range)
}

/// Expresses an ECEF position in the frame rotated by `ωe·tau`.
fn rotate_earth(p: &Vector3<f64>, tau: f64) -> Vector3<f64> {
    let (s, c) = (EARTH_ROTATION_RATE * tau).sin_cos();
    Vector3::new(c * p.x + s * p.y, -s * p.x + c * p.y, p.z)
}
