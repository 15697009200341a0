//! Deterministic GNSS observable simulator.
//!
//! Orbits come from broadcast records evaluated by the ephemeris module (the
//! simulator and the estimator share that evaluator). Everything else in the
//! measurement chain is computed here independently: light time, Earth
//! rotation, receiver and satellite clocks, atmosphere, ambiguities, slips and
//! noise.

mod orbits;
mod scenarios;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atmosphere::{iono_frequency_scale, klobuchar_delay, saastamoinen_delay, DEFAULT_HUMIDITY};
use crate::coords::{az_el, ecef_to_geodetic};
use crate::ephemeris::{
    propagate_glonass, sat_state, ClockPolynomial, EphemerisRecord, EphemerisStore, GlonassState, KeplerElements,
    Orbit, EARTH_ROTATION_RATE, GLONASS_MAX_STEP,
};
use crate::gnss::{carrier_frequency, Band, Constellation, SatId, SPEED_OF_LIGHT};
use crate::rinex::{
    parse_nav, write_nav, write_obs, CarrierPhaseObs, IonoCoefficients, ObsWriterHeader, ObservationEpoch,
};
use crate::time::{GnssTime, BDT_TO_GPST_SECONDS};

pub use orbits::{circular_orbit_through, DEFAULT_INCLINATION, GPS_SQRT_A};
pub use scenarios::{
    builtin_scenario, scenario_low_elevation_slips, scenario_moving, scenario_static_clean, BUILTIN_SCENARIOS,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("empty scenario")]
    EmptyScenario,
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TrajectorySpec {
    Static {
        position: [f64; 3],
    },
    /// Piecewise-linear path; `t` in seconds from the scenario start.
    Waypoints {
        points: Vec<Waypoint>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    pub position: [f64; 3],
}

impl TrajectorySpec {
    /// Receiver position `s` seconds after the start; constant outside the
    /// waypoint span.
    pub fn position_at(&self, s: f64) -> Vector3<f64> {
        match self {
            Self::Static { position } => Vector3::from(*position),
            Self::Waypoints { points } => {
                let first = &points[0];
                if s <= first.t {
                    return Vector3::from(first.position);
                }
                for w in points.windows(2) {
                    if s <= w[1].t {
                        let f = (s - w[0].t) / (w[1].t - w[0].t);
                        return Vector3::from(w[0].position) * (1.0 - f) + Vector3::from(w[1].position) * f;
                    }
                }
                Vector3::from(points[points.len() - 1].position)
            }
        }
    }

    fn origin(&self) -> Vector3<f64> {
        self.position_at(f64::NEG_INFINITY)
    }
}

/// One simulated satellite. Placement is either a look direction from the
/// receiver's start position (`az_deg`, `el_deg`) or explicit Kepler
/// elements referenced to the scenario start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatelliteSpec {
    pub sat: SatId,
    #[serde(default)]
    pub az_deg: Option<f64>,
    #[serde(default)]
    pub el_deg: Option<f64>,
    /// Elevation increasing at the start (look-direction placement only).
    #[serde(default)]
    pub rising: bool,
    #[serde(default)]
    pub kepler: Option<KeplerElements>,
    /// Broadcast clock offset af0 (s).
    #[serde(default)]
    pub clock_bias_s: f64,
    /// Broadcast clock drift af1 (s/s).
    #[serde(default)]
    pub clock_drift: f64,
    #[serde(default)]
    pub glonass_channel: Option<i8>,
}

impl SatelliteSpec {
    pub fn look(sat: SatId, az_deg: f64, el_deg: f64, rising: bool) -> Self {
        Self {
            sat,
            az_deg: Some(az_deg),
            el_deg: Some(el_deg),
            rising,
            kepler: None,
            clock_bias_s: 0.0,
            clock_drift: 0.0,
            glonass_channel: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub phase_sigma_m: f64,
    pub pseudorange_sigma_m: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            phase_sigma_m: 0.003,
            pseudorange_sigma_m: 0.5,
        }
    }
}

/// Receiver clock: offset + drift·t + random walk, all in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClockSpec {
    pub offset_m: f64,
    pub drift_m_per_s: f64,
    pub random_walk_m_per_sqrt_s: f64,
}

impl Default for ClockSpec {
    fn default() -> Self {
        Self {
            offset_m: 15_000.0,
            drift_m_per_s: 0.05,
            random_walk_m_per_sqrt_s: 0.5,
        }
    }
}

/// Integer cycle slip applied from epoch index `epoch` on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlipSpec {
    pub sat: SatId,
    pub epoch: usize,
    pub cycles: i64,
    #[serde(default = "default_band")]
    pub band: Band,
}

fn default_band() -> Band {
    Band::L1
}

/// Satellite not tracked for epoch indices `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutageSpec {
    pub sat: SatId,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub start: GnssTime,
    pub duration_s: f64,
    pub rate_hz: f64,
    pub trajectory: TrajectorySpec,
    pub satellites: Vec<SatelliteSpec>,
    pub noise: NoiseSpec,
    pub clock: ClockSpec,
    /// Constant receiver bias per constellation on top of the receiver clock (m).
    pub inter_system_bias_m: BTreeMap<Constellation, f64>,
    /// Random walk of the true satellite clocks away from the broadcast
    /// polynomial (m/√s).
    pub satellite_clock_walk_m_per_sqrt_s: f64,
    pub slips: Vec<SlipSpec>,
    pub outages: Vec<OutageSpec>,
    /// Probability of the LLI bit being set at an injected slip.
    pub lli_probability: f64,
    pub dual_frequency: bool,
    /// Klobuchar ionosphere and Saastamoinen troposphere in the observables.
    pub atmosphere: bool,
    pub iono: IonoCoefficients,
    /// Satellites below this elevation are not tracked (deg).
    pub tracking_mask_deg: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            seed: 1,
            start: GnssTime::new(2300, 345_600.0),
            duration_s: 100.0,
            rate_hz: 1.0,
            trajectory: TrajectorySpec::Static {
                position: [-3_961_904.0, 3_348_993.0, 3_698_211.0],
            },
            satellites: Vec::new(),
            noise: NoiseSpec::default(),
            clock: ClockSpec::default(),
            inter_system_bias_m: BTreeMap::new(),
            satellite_clock_walk_m_per_sqrt_s: 0.0,
            slips: Vec::new(),
            outages: Vec::new(),
            lli_probability: 0.5,
            dual_frequency: true,
            atmosphere: false,
            iono: IonoCoefficients {
                alpha: [1.118e-8, 2.235e-8, -5.960e-8, -1.192e-7],
                beta: [9.011e4, 1.638e5, -6.554e4, -5.243e5],
                present: true,
            },
            tracking_mask_deg: 0.0,
        }
    }
}

impl ScenarioConfig {
    pub fn from_json(s: &str) -> Result<Self, SimError> {
        serde_json::from_str(s).map_err(|e| SimError::Invalid(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn epoch_count(&self) -> usize {
        (self.duration_s * self.rate_hz).round().max(0.0) as usize
    }

    pub fn epoch_time(&self, k: usize) -> GnssTime {
        self.start + k as f64 / self.rate_hz
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.duration_s > 0.0) || !(self.rate_hz > 0.0) || self.epoch_count() == 0 {
            return Err(SimError::EmptyScenario);
        }
        if self.satellites.is_empty() {
            return Err(SimError::Invalid("no satellites".into()));
        }
        let n = self.epoch_count();
        for s in &self.slips {
            if s.epoch >= n {
                return Err(SimError::Invalid(format!(
                    "slip on {} at epoch {} outside 0..{n}",
                    s.sat, s.epoch
                )));
            }
            if !self.satellites.iter().any(|x| x.sat == s.sat) {
                return Err(SimError::Invalid(format!("slip on unknown satellite {}", s.sat)));
            }
        }
        if let TrajectorySpec::Waypoints { points } = &self.trajectory {
            if points.is_empty() || points.windows(2).any(|w| w[1].t <= w[0].t) {
                return Err(SimError::Invalid(
                    "waypoints must be non-empty and increasing in t".into(),
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.lli_probability) {
            return Err(SimError::Invalid("lli_probability outside [0, 1]".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.satellites {
            if !seen.insert(s.sat) {
                return Err(SimError::Invalid(format!("duplicate satellite {}", s.sat)));
            }
            let look = s.az_deg.is_some() && s.el_deg.is_some();
            if look == s.kepler.is_some() {
                return Err(SimError::Invalid(format!(
                    "{} needs either az_deg/el_deg or kepler",
                    s.sat
                )));
            }
            if s.sat.is_beidou_geo() {
                return Err(SimError::Invalid(format!(
                    "{}: BeiDou GEO orbits are not simulated",
                    s.sat
                )));
            }
            if s.sat.constellation == Constellation::Glonass && s.glonass_channel.is_none() {
                return Err(SimError::Invalid(format!("{} needs glonass_channel", s.sat)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthBundle {
    /// Receiver time tags of the epochs.
    pub times: Vec<GnssTime>,
    /// True antenna positions at the true reception instants.
    pub positions: Vec<Vector3<f64>>,
    /// True receiver (GPS base) clock in meters.
    pub receiver_clock_m: Vec<f64>,
    pub slips: Vec<SlipSpec>,
    epoch_count: usize,
}

impl TruthBundle {
    /// Cumulative injected slip of `sat` on `band` per epoch.
    pub fn cumulative_slips(&self, sat: SatId, band: Band) -> Vec<i64> {
        let mut out = vec![0i64; self.epoch_count];
        for s in self.slips.iter().filter(|s| s.sat == sat && s.band == band) {
            for v in &mut out[s.epoch..] {
                *v += s.cycles;
            }
        }
        out
    }

    /// Slip events sorted by epoch, then satellite.
    pub fn slip_events(&self) -> Vec<SlipSpec> {
        let mut v = self.slips.clone();
        v.sort_by(|a, b| (a.epoch, a.sat, a.band).cmp(&(b.epoch, b.sat, b.band)));
        v
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub epochs: Vec<ObservationEpoch>,
    pub store: EphemerisStore,
    pub iono: IonoCoefficients,
    pub truth: TruthBundle,
    /// Whether the observables contain atmospheric delays.
    pub atmosphere: bool,
}

fn signal_code(c: Constellation, band: Band) -> &'static str {
    match (c, band) {
        (Constellation::Gps, Band::L1) => "1C",
        (Constellation::Gps, Band::L2) => "2W",
        (Constellation::Glonass, Band::L1) => "1C",
        (Constellation::Glonass, Band::L2) => "2C",
        (Constellation::Galileo, Band::L1) => "1C",
        (Constellation::Galileo, Band::L2) => "7Q",
        (Constellation::BeiDou, Band::L1) => "2I",
        (Constellation::BeiDou, Band::L2) => "7I",
        (Constellation::Qzss, Band::L1) => "1C",
        (Constellation::Qzss, Band::L2) => "2L",
    }
}

fn record_spacing(c: Constellation) -> f64 {
    match c {
        Constellation::Glonass => 1800.0,
        Constellation::BeiDou => 3600.0,
        _ => 7200.0,
    }
}

/// Seconds of week of `toe` in the time scale the Kepler evaluator uses.
fn toe_sow(sat: SatId, toe: GnssTime) -> f64 {
    if sat.constellation == Constellation::BeiDou {
        (toe - BDT_TO_GPST_SECONDS).tow()
    } else {
        toe.tow()
    }
}

/// Elements valid at `toe + d` describing the same orbit as `k` at `toe`.
fn shift_elements(sat: SatId, k: &KeplerElements, toe: GnssTime, d: f64) -> KeplerElements {
    let a = k.semi_major_axis();
    let n = (3.986_004_418e14 / (a * a * a)).sqrt() + k.delta_n;
    let mut out = *k;
    out.m0 = k.m0 + n * d;
    out.i0 = k.i0 + k.idot * d;
    out.omega0 = k.omega0
        + EARTH_ROTATION_RATE * (toe_sow(sat, toe + d) - toe_sow(sat, toe))
        + (k.omega_dot - EARTH_ROTATION_RATE) * d;
    out
}

fn base_record(spec: &SatelliteSpec, toe: GnssTime, orbit: Orbit) -> EphemerisRecord {
    EphemerisRecord {
        sat: spec.sat,
        toc: toe,
        toe,
        orbit,
        clock: ClockPolynomial {
            af0: spec.clock_bias_s,
            af1: spec.clock_drift,
            af2: 0.0,
        },
        tgd: 0.0,
        tgd_l2: 0.0,
        health: 0,
        iod: 0.0,
    }
}

/// Broadcast records covering the session for one satellite.
fn satellite_records(cfg: &ScenarioConfig, spec: &SatelliteSpec) -> Vec<EphemerisRecord> {
    let rx = cfg.trajectory.origin();
    let t0 = cfg.start;
    let mut elements = match (spec.kepler, spec.az_deg, spec.el_deg) {
        (Some(k), _, _) => k,
        (None, Some(az), Some(el)) => circular_orbit_through(&rx, az.to_radians(), el.to_radians(), t0, spec.rising),
        _ => unreachable!("validated placement"),
    };
    if spec.kepler.is_none() && spec.sat.constellation == Constellation::BeiDou {
        elements.omega0 -= EARTH_ROTATION_RATE * BDT_TO_GPST_SECONDS;
    }
    let spacing = record_spacing(spec.sat.constellation);
    let count = (cfg.duration_s / spacing).ceil() as usize + 1;
    let tgd = 1e-9 * (1.0 + f64::from(spec.sat.prn % 7));

    let mut records = Vec::with_capacity(count);
    if spec.sat.constellation == Constellation::Glonass {
        let mut probe = base_record(spec, t0, Orbit::Kepler(elements));
        probe.sat = SatId::gps(1);
        let s0 = sat_state(&probe, t0).expect("circular orbit evaluates");
        let mut state = GlonassState {
            pos: s0.pos.into(),
            vel: s0.vel.into(),
            acc: [0.0; 3],
            freq_channel: spec.glonass_channel.expect("validated channel"),
        };
        for j in 0..count {
            let toe = t0 + spacing * j as f64;
            let mut rec = base_record(spec, toe, Orbit::Glonass(state));
            rec.clock.af0 = spec.clock_bias_s + spec.clock_drift * (toe - t0);
            records.push(rec);
            let (p, v) = propagate_glonass(&state, spacing, GLONASS_MAX_STEP);
            state.pos = p.into();
            state.vel = v.into();
        }
    } else {
        for j in 0..count {
            let d = spacing * j as f64;
            let toe = t0 + d;
            let mut rec = base_record(spec, toe, Orbit::Kepler(shift_elements(spec.sat, &elements, t0, d)));
            rec.clock.af0 = spec.clock_bias_s + spec.clock_drift * d;
            rec.tgd = tgd;
            rec.tgd_l2 = match spec.sat.constellation {
                Constellation::BeiDou => 0.6 * tgd,
                Constellation::Galileo => (crate::gnss::FREQ_GAL_E1 / crate::gnss::FREQ_GAL_E5B).powi(2) * tgd,
                _ => (crate::gnss::FREQ_GPS_L1 / crate::gnss::FREQ_GPS_L2).powi(2) * tgd,
            };
            records.push(rec);
        }
    }
    records
}

/// Builds the broadcast store and passes it through the RINEX writer and
/// parser, so in-memory and file outputs carry identical records.
fn broadcast_store(cfg: &ScenarioConfig) -> Result<(EphemerisStore, IonoCoefficients), SimError> {
    let mut store = EphemerisStore::new();
    for spec in &cfg.satellites {
        for rec in satellite_records(cfg, spec) {
            store.insert(rec);
        }
    }
    let iono = if cfg.atmosphere {
        cfg.iono
    } else {
        IonoCoefficients::default()
    };
    let mut buf = Vec::new();
    write_nav(&mut buf, &store, &iono)?;
    let nav = parse_nav(buf.as_slice()).map_err(|e| SimError::Invalid(e.to_string()))?;
    if nav.store.len() != store.len() {
        return Err(SimError::Invalid(format!(
            "{} of {} navigation records failed to round-trip",
            store.len() - nav.store.len(),
            store.len()
        )));
    }
    Ok((nav.store, nav.iono))
}

fn rotate_z(p: &Vector3<f64>, angle: f64) -> Vector3<f64> {
    let (s, c) = angle.sin_cos();
    Vector3::new(c * p.x + s * p.y, -s * p.x + c * p.y, p.z)
}

pub(crate) struct Geometry {
    pub(crate) range: f64,
    pub(crate) clock_bias: f64,
    pub(crate) el: f64,
    pub(crate) az: f64,
}

/// Light-time solution for a receiver at `p` at reception time `t_r`.
///
/// `delay_m` is the non-geometric part of the flight (atmosphere and receiver
/// hardware), so the signal left at t_r − (ρ + delay)/c. The Earth-rotation
/// angle covers the geometric flight time.
pub(crate) fn line_of_sight(rec: &EphemerisRecord, t_r: GnssTime, p: &Vector3<f64>, delay_m: f64) -> Geometry {
    let t_rx = t_r - delay_m / SPEED_OF_LIGHT;
    let mut tau = 0.075;
    let mut state = sat_state(rec, t_rx - tau).expect("simulated orbit evaluates");
    for _ in 0..6 {
        state = sat_state(rec, t_rx - tau).expect("simulated orbit evaluates");
        let sat_rx_frame = rotate_z(&state.pos, EARTH_ROTATION_RATE * tau);
        tau = (sat_rx_frame - p).norm() / SPEED_OF_LIGHT;
    }
    let sat_rx_frame = rotate_z(&state.pos, EARTH_ROTATION_RATE * tau);
    let (az, el) = az_el(p, &sat_rx_frame);
    Geometry {
        range: (sat_rx_frame - p).norm(),
        clock_bias: state.clock_bias,
        el,
        az,
    }
}

pub fn simulate(cfg: &ScenarioConfig) -> Result<Simulation, SimError> {
    cfg.validate()?;
    let (store, iono) = broadcast_store(cfg)?;
    let n = cfg.epoch_count();
    let dt = 1.0 / cfg.rate_hz;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let mut sats: Vec<&SatelliteSpec> = cfg.satellites.iter().collect();
    sats.sort_by_key(|s| s.sat);
    let ambiguities: Vec<[f64; 2]> = sats
        .iter()
        .map(|_| {
            [
                rng.random_range(-1_000_000i64..1_000_000) as f64,
                rng.random_range(-1_000_000i64..1_000_000) as f64,
            ]
        })
        .collect();
    let mut lli_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    lli_rng.set_stream(1);
    let lli_draws: Vec<bool> = cfg
        .slips
        .iter()
        .map(|_| lli_rng.random::<f64>() < cfg.lli_probability)
        .collect();

    let mut rx_walk = 0.0;
    let mut sat_walk = vec![0.0; sats.len()];
    let mut tracked_prev = vec![false; sats.len()];
    let mut epochs = Vec::with_capacity(n);
    let mut truth = TruthBundle {
        times: Vec::with_capacity(n),
        positions: Vec::with_capacity(n),
        receiver_clock_m: Vec::with_capacity(n),
        slips: cfg.slips.clone(),
        epoch_count: n,
    };
    let bands: &[Band] = if cfg.dual_frequency {
        &[Band::L1, Band::L2]
    } else {
        &[Band::L1]
    };

    for k in 0..n {
        if k > 0 {
            rx_walk += cfg.clock.random_walk_m_per_sqrt_s * dt.sqrt() * unit.sample(&mut rng);
            for w in &mut sat_walk {
                *w += cfg.satellite_clock_walk_m_per_sqrt_s * dt.sqrt() * unit.sample(&mut rng);
            }
        }
        let tag = cfg.epoch_time(k);
        let offset = k as f64 * dt;
        let clock_m = cfg.clock.offset_m + cfg.clock.drift_m_per_s * offset + rx_walk;
        let t_r = tag - clock_m / SPEED_OF_LIGHT;
        let p = cfg.trajectory.position_at(t_r - cfg.start);
        let geo = ecef_to_geodetic(&p);
        truth.times.push(tag);
        truth.positions.push(p);
        truth.receiver_clock_m.push(clock_m);

        let mut epoch = ObservationEpoch::new(tag);
        for (i, spec) in sats.iter().enumerate() {
            let noise: Vec<[f64; 2]> = bands
                .iter()
                .map(|_| [unit.sample(&mut rng), unit.sample(&mut rng)])
                .collect();
            let Ok(rec) = store.select(spec.sat, tag) else {
                tracked_prev[i] = false;
                continue;
            };
            let g = line_of_sight(rec, t_r, &p, 0.0);
            let in_outage = cfg
                .outages
                .iter()
                .any(|o| o.sat == spec.sat && (o.start..o.end).contains(&k));
            if g.el < cfg.tracking_mask_deg.to_radians() || in_outage {
                tracked_prev[i] = false;
                continue;
            }
            let reacquired = k > 0 && !tracked_prev[i];
            tracked_prev[i] = true;

            let isb = cfg
                .inter_system_bias_m
                .get(&spec.sat.constellation)
                .copied()
                .unwrap_or(0.0);
            let (iono_l1, tropo) = if cfg.atmosphere {
                (
                    klobuchar_delay(t_r, &geo, g.az, g.el, &iono),
                    saastamoinen_delay(&geo, g.el, DEFAULT_HUMIDITY).meters,
                )
            } else {
                (0.0, 0.0)
            };
            for (b, band) in bands.iter().enumerate() {
                let channel = spec.glonass_channel;
                let freq =
                    carrier_frequency(spec.sat.constellation, *band, channel).expect("simulated band has a carrier");
                let lambda = SPEED_OF_LIGHT / freq;
                let iono_b = iono_l1 * iono_frequency_scale(freq);
                let group_delay = SPEED_OF_LIGHT * rec.group_delay(*band);
                // Code-timed geometry of this signal.
                let gb = line_of_sight(rec, t_r, &p, iono_b + tropo + isb);
                let sat_clock_m = SPEED_OF_LIGHT * gb.clock_bias + sat_walk[i];
                let slip: i64 = cfg
                    .slips
                    .iter()
                    .filter(|s| s.sat == spec.sat && s.band == *band && s.epoch <= k)
                    .map(|s| s.cycles)
                    .sum();
                let slip_now = cfg
                    .slips
                    .iter()
                    .zip(&lli_draws)
                    .any(|(s, flag)| s.sat == spec.sat && s.band == *band && s.epoch == k && *flag);
                let common = gb.range + clock_m + isb - sat_clock_m + tropo;
                let pseudorange = common + group_delay + iono_b + cfg.noise.pseudorange_sigma_m * noise[b][1];
                let phase = (common - iono_b + cfg.noise.phase_sigma_m * noise[b][0]) / lambda
                    + ambiguities[i][b]
                    + slip as f64;
                epoch.obs.push(CarrierPhaseObs {
                    sat: spec.sat,
                    band: *band,
                    code: signal_code(spec.sat.constellation, *band).to_string(),
                    phase: Some(phase),
                    pseudorange: Some(pseudorange),
                    doppler: None,
                    snr: None,
                    lli_flags: u8::from(slip_now || reacquired),
                    wavelength: lambda,
                });
            }
        }
        epochs.push(epoch);
    }

    Ok(Simulation {
        epochs,
        store,
        iono,
        truth,
        atmosphere: cfg.atmosphere,
    })
}

/// Paths of the files written by [`write_simulation`].
#[derive(Debug, Clone)]
pub struct SimulationFiles {
    pub obs: PathBuf,
    pub nav: PathBuf,
    pub truth: PathBuf,
    pub truth_slips: PathBuf,
}

#[derive(Serialize)]
struct TruthRow {
    week: i32,
    tow: f64,
    x: f64,
    y: f64,
    z: f64,
    e: f64,
    n: f64,
    u: f64,
    clock_m: f64,
}

#[derive(Serialize)]
struct SlipRow {
    week: i32,
    tow: f64,
    epoch: usize,
    sat: SatId,
    band: Band,
    cycles: i64,
    cumulative: i64,
}

/// Writes `obs.rnx`, `nav.rnx`, `truth.csv` and `truth_slips.csv` into `dir`.
pub fn write_simulation(sim: &Simulation, cfg: &ScenarioConfig, dir: &Path) -> Result<SimulationFiles, SimError> {
    std::fs::create_dir_all(dir)?;
    let files = SimulationFiles {
        obs: dir.join("obs.rnx"),
        nav: dir.join("nav.rnx"),
        truth: dir.join("truth.csv"),
        truth_slips: dir.join("truth_slips.csv"),
    };
    let header = ObsWriterHeader {
        marker_name: cfg.name.clone(),
        approx_position: sim.truth.positions.first().map(|p| [p.x, p.y, p.z]),
        interval: Some(1.0 / cfg.rate_hz),
        glonass_channels: cfg
            .satellites
            .iter()
            .filter_map(|s| s.glonass_channel.map(|c| (s.sat, c)))
            .collect(),
    };
    write_obs(BufWriter::new(File::create(&files.obs)?), &header, &sim.epochs)?;
    write_nav(BufWriter::new(File::create(&files.nav)?), &sim.store, &sim.iono)?;

    let origin = sim.truth.positions[0];
    let geo = ecef_to_geodetic(&origin);
    let mut w = csv::Writer::from_path(&files.truth).map_err(csv_io)?;
    for ((t, p), c) in sim
        .truth
        .times
        .iter()
        .zip(&sim.truth.positions)
        .zip(&sim.truth.receiver_clock_m)
    {
        let enu = crate::coords::enu(&geo, &(p - origin));
        w.serialize(TruthRow {
            week: t.week(),
            tow: t.tow(),
            x: p.x,
            y: p.y,
            z: p.z,
            e: enu.x,
            n: enu.y,
            u: enu.z,
            clock_m: *c,
        })
        .map_err(csv_io)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&files.truth_slips).map_err(csv_io)?;
    for s in sim.truth.slip_events() {
        let t = sim.truth.times[s.epoch];
        let cumulative = sim.truth.cumulative_slips(s.sat, s.band)[s.epoch];
        w.serialize(SlipRow {
            week: t.week(),
            tow: t.tow(),
            epoch: s.epoch,
            sat: s.sat,
            band: s.band,
            cycles: s.cycles,
            cumulative,
        })
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(files)
}

fn csv_io(e: csv::Error) -> io::Error {
    io::Error::other(e)
}
