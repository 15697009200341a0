//! Carrier-phase odometry over a factor graph.
//!
//! One state node per epoch (ECEF position plus clock terms in meters), one
//! cumulative cycle-slip node per tracked satellite per epoch, TDCP factors
//! between epoch pairs at the configured loop-closure offsets, relative slip
//! factors between consecutive slip nodes, and anchors on the first state and
//! on each satellite's first slip node. The two baselines drop the slip nodes
//! and robustify the TDCP factors instead.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ephemeris::EphemerisStore;
use crate::gnss::{ClockLayout, SatId};
use crate::rinex::{IonoCoefficients, ObservationEpoch};
use crate::solver::{
    optimize, Factor, FactorGraph, FactorModel, GraphSolution, Kernel, LinearModel, PriorModel, SolverError,
    SolverOptions, Values, VariableKey, HUBER_C,
};
use crate::spp::{solve_spp_with, SppConfig, SppError, SppSolution};
use crate::tdcp::{build_tdcp_with, detect_slip_evidence_with, TdcpConfig, TdcpMeasurement, GF_JUMP_THRESHOLD};
use crate::time::GnssTime;

mod output;

pub use output::{read_trajectory_csv, write_report, write_slips_csv, write_trajectory_csv, OutputError};

/// Version of the run report JSON layout.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Flag added to the report when the slip chains were rounded and frozen.
pub const INTEGER_ROUNDED: &str = "integer-rounded";

/// Two epoch tags closer than this are the same instant (s).
const TIME_MATCH_TOL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "slip", alias = "cycle_slip_estimation")]
    CycleSlipEstimation,
    #[serde(rename = "huber", alias = "huber_baseline")]
    HuberBaseline,
    #[serde(rename = "switchable", alias = "switchable_baseline")]
    SwitchableBaseline,
}

impl Method {
    pub const ALL: [Method; 3] = [Self::CycleSlipEstimation, Self::HuberBaseline, Self::SwitchableBaseline];

    pub fn name(self) -> &'static str {
        match self {
            Self::CycleSlipEstimation => "slip",
            Self::HuberBaseline => "huber",
            Self::SwitchableBaseline => "switchable",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = OdometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "slip" | "cycle_slip_estimation" => Ok(Self::CycleSlipEstimation),
            "huber" | "huber_baseline" => Ok(Self::HuberBaseline),
            "switchable" | "switchable_baseline" => Ok(Self::SwitchableBaseline),
            other => Err(OdometryError::InvalidConfig(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodConfig {
    pub method: Method,
    /// Epoch separations (s) that receive TDCP factors.
    pub loop_closure_offsets: Vec<f64>,
    pub max_loop_dt: f64,
    /// Relative slip σ between consecutive epochs without slip evidence (cycles).
    pub sigma_b_normal: f64,
    /// Relative slip σ when slip evidence fires or after a tracking gap (cycles).
    pub sigma_b_slip: f64,
    /// Elevation mask for TDCP factors (rad).
    pub mask_el: f64,
    pub huber_c: f64,
    /// Prior σ of switch variables.
    pub switch_sigma: f64,
    /// Geometry-free jump threshold (m).
    pub gf_threshold: f64,
    /// Keep one epoch per this many seconds; 0 keeps every epoch.
    pub decimation_interval: f64,
    /// Longest tolerated run of epochs without any TDCP factor.
    pub max_gap_epochs: usize,
    /// σ of the first state's clock anchor (m).
    pub anchor_clock_sigma: f64,
    /// σ of the weak priors that fix otherwise unobservable clock or state
    /// components (m).
    pub gauge_sigma: f64,
    /// Rebuild the TDCP linearization around the first-pass trajectory.
    pub relinearize: bool,
    /// Round the converged slip chains, freeze them and re-solve.
    pub round_slips: bool,
    /// Anchor the first position here instead of at the SPP solution (ECEF m).
    pub anchor_position: Option<[f64; 3]>,
    pub spp: SppConfig,
    pub tdcp: TdcpConfig,
    pub solver: SolverOptions,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            method: Method::CycleSlipEstimation,
            loop_closure_offsets: vec![1.0, 10.0, 30.0, 60.0],
            max_loop_dt: 60.0,
            sigma_b_normal: 0.01,
            sigma_b_slip: 10.0,
            mask_el: 5f64.to_radians(),
            huber_c: HUBER_C,
            switch_sigma: 1.0,
            gf_threshold: GF_JUMP_THRESHOLD,
            decimation_interval: 1.0,
            max_gap_epochs: 10,
            anchor_clock_sigma: 100.0,
            gauge_sigma: 1e3,
            relinearize: true,
            round_slips: true,
            anchor_position: None,
            spp: SppConfig::default(),
            tdcp: TdcpConfig::default(),
            solver: SolverOptions::default(),
        }
    }
}

impl MethodConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    /// Turns off ionosphere and troposphere corrections in SPP and TDCP, for
    /// data that carries no atmospheric delay.
    pub fn without_atmosphere(mut self) -> Self {
        self.spp.ionosphere = false;
        self.spp.troposphere = false;
        self.tdcp.ionosphere = false;
        self.tdcp.troposphere = false;
        self
    }

    pub fn from_json(s: &str) -> Result<Self, OdometryError> {
        serde_json::from_str(s).map_err(|e| OdometryError::InvalidConfig(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), OdometryError> {
        let bad = |m: String| Err(OdometryError::InvalidConfig(m));
        if self.loop_closure_offsets.is_empty() {
            return bad("no loop-closure offsets".into());
        }
        for d in &self.loop_closure_offsets {
            if !(d.is_finite() && *d > 0.0) {
                return bad(format!("loop-closure offset {d} must be positive"));
            }
            if *d > self.max_loop_dt {
                return bad(format!(
                    "loop-closure offset {d} s exceeds max_loop_dt {} s",
                    self.max_loop_dt
                ));
            }
        }
        let positive = [
            ("sigma_b_normal", self.sigma_b_normal),
            ("sigma_b_slip", self.sigma_b_slip),
            ("huber_c", self.huber_c),
            ("switch_sigma", self.switch_sigma),
            ("anchor_clock_sigma", self.anchor_clock_sigma),
            ("gauge_sigma", self.gauge_sigma),
            ("gf_threshold", self.gf_threshold),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.sigma_b_normal > self.sigma_b_slip {
            return bad(format!(
                "sigma_b_normal {} exceeds sigma_b_slip {}",
                self.sigma_b_normal, self.sigma_b_slip
            ));
        }
        if !(self.decimation_interval >= 0.0 && self.decimation_interval.is_finite()) {
            return bad(format!(
                "decimation_interval {} must be nonnegative",
                self.decimation_interval
            ));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.mask_el) {
            return bad(format!("mask_el {} rad out of range", self.mask_el));
        }
        Ok(())
    }

    fn offsets(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .loop_closure_offsets
            .iter()
            .copied()
            .filter(|d| *d <= self.max_loop_dt)
            .collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }
}

#[derive(Debug, Error)]
pub enum OdometryError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("session has no epochs")]
    EmptySession,
    #[error("epochs are not strictly increasing in time at index {0}")]
    UnsortedEpochs(usize),
    #[error("SPP failed at the first epoch: {0}")]
    InitialSpp(#[from] SppError),
    #[error("graph disconnected: no satellites above mask for {length} consecutive epochs starting at {start}")]
    GraphDisconnected { start: GnssTime, length: usize },
    #[error("solver: {0}")]
    Solver(#[from] SolverError),
}

/// Observations and broadcast ephemeris of one receiver.
#[derive(Debug, Clone)]
pub struct Session {
    pub epochs: Vec<ObservationEpoch>,
    pub store: EphemerisStore,
    pub iono: IonoCoefficients,
}

impl Session {
    pub fn new(epochs: Vec<ObservationEpoch>, store: EphemerisStore, iono: IonoCoefficients) -> Self {
        Self { epochs, store, iono }
    }
}

/// Epoch times with ECEF positions.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<GnssTime>,
    pub positions: Vec<Vector3<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Cumulative slip estimate of one satellite over its tracked span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlipSeries {
    pub epochs: Vec<usize>,
    pub times: Vec<GnssTime>,
    /// Real-valued estimates (cycles).
    pub values: Vec<f64>,
    /// Integer values frozen in the rounding step, when it ran.
    pub rounded: Option<Vec<i64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GraphCounts {
    pub state_nodes: usize,
    pub slip_nodes: usize,
    pub tdcp_factors: usize,
    pub relative_slip_factors: usize,
    pub position_anchors: usize,
    pub slip_anchors: usize,
    pub gauge_priors: usize,
    pub switch_variables: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassReport {
    pub name: String,
    pub iterations: usize,
    pub initial_cost: f64,
    pub cost: f64,
    pub converged: bool,
    pub diverged: bool,
}

impl PassReport {
    fn new(name: &str, s: &GraphSolution) -> Self {
        Self {
            name: name.into(),
            iterations: s.iterations,
            initial_cost: s.initial_cost,
            cost: s.cost,
            converged: s.converged,
            diverged: s.diverged,
        }
    }
}

/// A jump of more than half a cycle between consecutive slip nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedSlip {
    pub sat: SatId,
    pub epoch: usize,
    pub week: i32,
    pub tow: f64,
    pub cycles: f64,
    pub rounded: Option<i64>,
    /// Whether LLI or the geometry-free test fired at this epoch.
    pub evidence: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub method: Method,
    pub epochs: usize,
    pub counts: GraphCounts,
    pub passes: Vec<PassReport>,
    pub iterations: usize,
    pub cost: f64,
    pub converged: bool,
    pub diverged: bool,
    /// The final solve did not converge.
    pub failed: bool,
    pub flags: Vec<String>,
    pub detected_slips: Vec<DetectedSlip>,
    pub config: MethodConfig,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone)]
pub struct EstimateResult {
    pub trajectory: Trajectory,
    /// Session origin (the first SPP position, ECEF m); state positions are
    /// optimized as offsets from it.
    pub origin: Vector3<f64>,
    /// Optimized positions relative to `origin`, free of ECEF rounding.
    pub offsets: Vec<Vector3<f64>>,
    /// Clock terms per epoch, ordered as `layout` (m).
    pub clocks: Vec<Vec<f64>>,
    pub layout: ClockLayout,
    pub slips: BTreeMap<SatId, SlipSeries>,
    pub report: RunReport,
}

/// r = h·(x2 − x1) − (observed − λ(B2 − B1)) − fixed offset.
///
/// Keys are `[x1, x2]` or, with slip nodes, `[x1, x2, B1, B2]`. `observed`
/// is the corrected TDCP minus ΔL (m); `fixed_slip_m` holds λ(B2 − B1) when
/// the slips are frozen.
#[derive(Debug, Clone)]
pub struct TdcpFactor {
    pub h: DVector<f64>,
    pub observed: f64,
    pub wavelength: f64,
    pub with_slips: bool,
    pub fixed_slip_m: f64,
}

impl TdcpFactor {
    pub fn new(m: &TdcpMeasurement, layout: &ClockLayout, with_slips: bool) -> Self {
        let clock = layout.design_row(m.sat);
        let mut h = DVector::zeros(3 + clock.len());
        for i in 0..3 {
            h[i] = -m.u[i];
        }
        for (i, c) in clock.iter().enumerate() {
            h[3 + i] = *c;
        }
        Self {
            h,
            observed: m.observed(),
            wavelength: m.wavelength,
            with_slips,
            fixed_slip_m: 0.0,
        }
    }
}

impl FactorModel for TdcpFactor {
    fn dim(&self) -> usize {
        1
    }

    fn residual(&self, x: &[&DVector<f64>]) -> DVector<f64> {
        let mut r = self.h.dot(&(x[1] - x[0])) - self.observed + self.fixed_slip_m;
        if self.with_slips {
            r += self.wavelength * (x[3][0] - x[2][0]);
        }
        DVector::from_element(1, r)
    }

    fn jacobians(&self, _x: &[&DVector<f64>]) -> Vec<DMatrix<f64>> {
        let row = DMatrix::from_row_slice(1, self.h.len(), self.h.as_slice());
        let mut j = vec![-&row, row];
        if self.with_slips {
            j.push(DMatrix::from_element(1, 1, -self.wavelength));
            j.push(DMatrix::from_element(1, 1, self.wavelength));
        }
        j
    }
}

/// r = B2 − B1 (cycles).
#[derive(Debug, Clone, Copy)]
pub struct RelativeSlipFactor;

impl FactorModel for RelativeSlipFactor {
    fn dim(&self) -> usize {
        1
    }

    fn residual(&self, x: &[&DVector<f64>]) -> DVector<f64> {
        DVector::from_element(1, x[1][0] - x[0][0])
    }

    fn jacobians(&self, _x: &[&DVector<f64>]) -> Vec<DMatrix<f64>> {
        vec![DMatrix::from_element(1, 1, -1.0), DMatrix::from_element(1, 1, 1.0)]
    }
}

/// Factor graph with its initial values and bookkeeping.
#[derive(Debug, Clone)]
pub struct BuiltGraph {
    pub graph: FactorGraph,
    pub initial: Values,
    pub counts: GraphCounts,
    /// State positions are offsets from this point (ECEF m).
    pub origin: Vector3<f64>,
    pub layout: ClockLayout,
    pub times: Vec<GnssTime>,
    /// First and last epoch index of each satellite's slip chain.
    pub slip_spans: BTreeMap<SatId, (usize, usize)>,
}

enum SlipTreatment {
    Estimate,
    Ignore,
    Fixed(BTreeMap<(usize, SatId), f64>),
}

type PairMeasurements = Vec<(usize, usize, Vec<TdcpMeasurement>)>;

/// Session-level quantities shared by every pass.
struct Context<'a> {
    cfg: &'a MethodConfig,
    session: &'a Session,
    epochs: Vec<&'a ObservationEpoch>,
    layout: ClockLayout,
    init_pos: Vec<Vector3<f64>>,
    init_clock: Vec<DVector<f64>>,
    spp_ok: Vec<bool>,
    origin: Vector3<f64>,
    anchor_pos: Vector3<f64>,
    anchor_sigma: f64,
    pairs: Vec<(usize, usize)>,
    spans: BTreeMap<SatId, (usize, usize)>,
    observed: Vec<BTreeSet<SatId>>,
    evidence: Vec<BTreeSet<SatId>>,
    tdcp_cfg: TdcpConfig,
}

fn decimate<'a>(epochs: &'a [ObservationEpoch], interval: f64) -> Vec<&'a ObservationEpoch> {
    if interval <= 0.0 || epochs.is_empty() {
        return epochs.iter().collect();
    }
    let t0 = epochs[0].time;
    epochs
        .iter()
        .filter(|e| {
            let q = (e.time - t0) / interval;
            (q - q.round()).abs() * interval < TIME_MATCH_TOL
        })
        .collect()
}

fn spp_clock(sol: &SppSolution, layout: &ClockLayout, prev: Option<&DVector<f64>>) -> DVector<f64> {
    let mut c = match prev {
        Some(p) => p.clone(),
        None => DVector::zeros(layout.len()),
    };
    for (i, g) in sol.layout.groups().iter().enumerate() {
        if let Some(j) = layout.index_of(*g) {
            c[j] = sol.clock[i];
        }
    }
    c
}

impl<'a> Context<'a> {
    fn new(session: &'a Session, cfg: &'a MethodConfig) -> Result<Self, OdometryError> {
        cfg.validate()?;
        let epochs = decimate(&session.epochs, cfg.decimation_interval);
        if epochs.is_empty() {
            return Err(OdometryError::EmptySession);
        }
        for k in 1..epochs.len() {
            if epochs[k].time - epochs[k - 1].time <= 0.0 {
                return Err(OdometryError::UnsortedEpochs(k));
            }
        }
        let phase_sats = |e: &ObservationEpoch| -> BTreeSet<SatId> {
            e.obs.iter().filter(|o| o.phase.is_some()).map(|o| o.sat).collect()
        };
        let observed: Vec<BTreeSet<SatId>> = epochs.iter().map(|e| phase_sats(e)).collect();
        let all: BTreeSet<SatId> = observed
            .iter()
            .flatten()
            .copied()
            .filter(|s| !session.store.records(*s).is_empty())
            .collect();
        let layout = ClockLayout::from_sats(&all);

        let mut init_pos = Vec::with_capacity(epochs.len());
        let mut init_clock: Vec<DVector<f64>> = Vec::with_capacity(epochs.len());
        let mut spp_ok = Vec::with_capacity(epochs.len());
        let mut first: Option<SppSolution> = None;
        for (k, e) in epochs.iter().enumerate() {
            let seed = init_pos.last();
            match solve_spp_with(e, &session.store, &session.iono, &cfg.spp, seed) {
                Ok(sol) => {
                    init_clock.push(spp_clock(&sol, &layout, init_clock.last()));
                    init_pos.push(sol.pos);
                    spp_ok.push(true);
                    if k == 0 {
                        first = Some(sol);
                    }
                }
                Err(err) if k == 0 => return Err(OdometryError::InitialSpp(err)),
                Err(err) => {
                    log::debug!("SPP failed at {}: {err}; keeping the previous state", e.time);
                    init_pos.push(*init_pos.last().expect("first epoch solved"));
                    init_clock.push(init_clock.last().expect("first epoch solved").clone());
                    spp_ok.push(false);
                }
            }
        }
        let first = first.expect("first epoch solved");
        let anchor_pos = cfg.anchor_position.map(Vector3::from).unwrap_or(first.pos);

        let times: Vec<GnssTime> = epochs.iter().map(|e| e.time).collect();
        let mut pairs = Vec::new();
        for i in 0..times.len() {
            for d in cfg.offsets() {
                let target = times[i] + d;
                let j = times.partition_point(|t| *t - target < -TIME_MATCH_TOL);
                if j < times.len() && (times[j] - target).abs() <= TIME_MATCH_TOL && j > i {
                    pairs.push((i, j));
                }
            }
        }
        pairs.sort();
        pairs.dedup();

        let mut spans: BTreeMap<SatId, (usize, usize)> = BTreeMap::new();
        for (k, set) in observed.iter().enumerate() {
            for s in set {
                spans.entry(*s).and_modify(|sp| sp.1 = k).or_insert((k, k));
            }
        }
        let mut evidence = vec![BTreeSet::new(); epochs.len()];
        for k in 1..epochs.len() {
            evidence[k] = detect_slip_evidence_with(epochs[k - 1], epochs[k], cfg.gf_threshold)
                .into_iter()
                .filter(|ev| ev.fired())
                .map(|ev| ev.sat)
                .collect();
        }
        let tdcp_cfg = TdcpConfig {
            mask_el: cfg.mask_el,
            ..cfg.tdcp.clone()
        };
        Ok(Self {
            cfg,
            session,
            epochs,
            layout,
            init_pos,
            init_clock,
            spp_ok,
            origin: first.pos,
            anchor_pos,
            anchor_sigma: first.sigma.max(1e-3),
            pairs,
            spans,
            observed,
            evidence,
            tdcp_cfg,
        })
    }

    fn dim(&self) -> usize {
        3 + self.layout.len()
    }

    fn times(&self) -> Vec<GnssTime> {
        self.epochs.iter().map(|e| e.time).collect()
    }

    fn initial_state(&self, k: usize) -> DVector<f64> {
        let mut x = DVector::zeros(self.dim());
        x.rows_mut(0, 3).copy_from(&(self.init_pos[k] - self.origin));
        x.rows_mut(3, self.layout.len()).copy_from(&self.init_clock[k]);
        x
    }

    fn measurements(&self, lin: &[Vector3<f64>]) -> PairMeasurements {
        self.pairs
            .par_iter()
            .map(|&(i, j)| {
                let m = build_tdcp_with(
                    self.epochs[i],
                    self.epochs[j],
                    &self.session.store,
                    &self.session.iono,
                    &lin[i],
                    &lin[j],
                    &self.tdcp_cfg,
                );
                (i, j, m)
            })
            .collect()
    }

    /// Relative slip σ for the factor entering epoch `k`.
    fn relative_slip_sigma(&self, sat: SatId, k: usize) -> f64 {
        let reacquired = self.observed[k].contains(&sat) && !self.observed[k - 1].contains(&sat);
        if reacquired || self.evidence[k].contains(&sat) {
            self.cfg.sigma_b_slip
        } else {
            self.cfg.sigma_b_normal
        }
    }

    /// The optimized trajectory translated so that its mean over epochs with
    /// an SPP fix equals the mean SPP position.
    fn linearization_points(&self, values: &Values) -> Vec<Vector3<f64>> {
        let p: Vec<Vector3<f64>> = offsets(values, self.epochs.len())
            .iter()
            .map(|d| d + self.origin)
            .collect();
        let ok: Vec<usize> = (0..p.len()).filter(|k| self.spp_ok[*k]).collect();
        let mean = |v: &[Vector3<f64>]| ok.iter().map(|k| v[*k]).sum::<Vector3<f64>>() / ok.len() as f64;
        let shift = mean(&self.init_pos) - mean(&p);
        p.iter().map(|x| x + shift).collect()
    }

    fn assemble(
        &self,
        meas: &PairMeasurements,
        slips: &SlipTreatment,
    ) -> Result<(FactorGraph, GraphCounts), OdometryError> {
        let n = self.epochs.len();
        let dim = self.dim();
        let mut touched: Vec<BTreeSet<SatId>> = vec![BTreeSet::new(); n];
        for (i, j, ms) in meas {
            for m in ms {
                touched[*i].insert(m.sat);
                touched[*j].insert(m.sat);
            }
        }
        let mut run = 0;
        for k in 0..n {
            if touched[k].is_empty() {
                run += 1;
                if run > self.cfg.max_gap_epochs {
                    return Err(OdometryError::GraphDisconnected {
                        start: self.epochs[k + 1 - run].time,
                        length: run,
                    });
                }
            } else {
                run = 0;
            }
        }

        let mut g = FactorGraph::new();
        let mut counts = GraphCounts {
            state_nodes: n,
            ..GraphCounts::default()
        };

        let mut target = self.initial_state(0);
        target.rows_mut(0, 3).copy_from(&(self.anchor_pos - self.origin));
        let mut info = DVector::from_element(dim, self.cfg.anchor_clock_sigma.powi(-2));
        info.rows_mut(0, 3).fill(self.anchor_sigma.powi(-2));
        g.add(Factor::new(
            vec![VariableKey::State(0)],
            Arc::new(PriorModel { target }),
            DMatrix::from_diagonal(&info),
        )?);
        counts.position_anchors = 1;

        let with_slips = matches!(slips, SlipTreatment::Estimate);
        let kernel_for = |switch: u32| match self.cfg.method {
            Method::CycleSlipEstimation => Kernel::None,
            Method::HuberBaseline => Kernel::Huber { c: self.cfg.huber_c },
            Method::SwitchableBaseline => Kernel::Switchable {
                switch: VariableKey::Switch(switch),
                sigma_s: self.cfg.switch_sigma,
            },
        };
        for (i, j, ms) in meas {
            for m in ms {
                let mut model = TdcpFactor::new(m, &self.layout, with_slips);
                let mut keys = vec![VariableKey::State(*i as u32), VariableKey::State(*j as u32)];
                match slips {
                    SlipTreatment::Estimate => {
                        keys.push(VariableKey::CycleSlip(*i as u32, m.sat));
                        keys.push(VariableKey::CycleSlip(*j as u32, m.sat));
                    }
                    SlipTreatment::Fixed(b) => {
                        let at = |k: usize| b.get(&(k, m.sat)).copied().unwrap_or(0.0);
                        model.fixed_slip_m = m.wavelength * (at(*j) - at(*i));
                    }
                    SlipTreatment::Ignore => {}
                }
                let kernel = kernel_for(counts.tdcp_factors as u32);
                if let Kernel::Switchable { .. } = kernel {
                    counts.switch_variables += 1;
                }
                g.add(Factor::scalar(keys, Arc::new(model), m.variance.sqrt())?.with_kernel(kernel));
                counts.tdcp_factors += 1;
            }
        }

        if with_slips {
            for (sat, (a, b)) in &self.spans {
                g.add(Factor::scalar(
                    vec![VariableKey::CycleSlip(*a as u32, *sat)],
                    Arc::new(PriorModel {
                        target: DVector::zeros(1),
                    }),
                    self.cfg.sigma_b_normal,
                )?);
                counts.slip_anchors += 1;
                counts.slip_nodes += b - a + 1;
                for k in a + 1..=*b {
                    g.add(Factor::scalar(
                        vec![
                            VariableKey::CycleSlip(k as u32 - 1, *sat),
                            VariableKey::CycleSlip(k as u32, *sat),
                        ],
                        Arc::new(RelativeSlipFactor),
                        self.relative_slip_sigma(*sat, k),
                    )?);
                    counts.relative_slip_factors += 1;
                }
            }
        }

        for k in 1..n {
            let key = VariableKey::State(k as u32);
            let groups: BTreeSet<_> = touched[k].iter().map(|s| s.constellation.clock_group()).collect();
            if touched[k].len() < 3 + groups.len() {
                g.add(Factor::scalar(
                    vec![key],
                    Arc::new(PriorModel {
                        target: self.initial_state(k),
                    }),
                    self.cfg.gauge_sigma,
                )?);
                counts.gauge_priors += 1;
                continue;
            }
            for (c, grp) in self.layout.groups().iter().enumerate() {
                if groups.contains(grp) {
                    continue;
                }
                let mut a = DMatrix::zeros(1, dim);
                a[(0, 3 + c)] = 1.0;
                g.add(Factor::scalar(
                    vec![key],
                    Arc::new(LinearModel {
                        a: vec![a],
                        b: DVector::from_element(1, self.init_clock[k][c]),
                    }),
                    self.cfg.gauge_sigma,
                )?);
                counts.gauge_priors += 1;
            }
        }
        Ok((g, counts))
    }

    fn initial_values(&self, graph: &FactorGraph) -> Values {
        let mut v = Values::new();
        for k in 0..self.epochs.len() {
            v.insert(VariableKey::State(k as u32), self.initial_state(k));
        }
        for key in crate::solver::referenced_keys(graph) {
            match key {
                VariableKey::CycleSlip(..) => v.insert(key, DVector::zeros(1)),
                VariableKey::Switch(_) => v.insert(key, DVector::from_element(1, 1.0)),
                VariableKey::State(_) => {}
            }
        }
        v
    }
}

/// Graph of the first pass: TDCP linearized at the per-epoch SPP positions.
pub fn build_graph(session: &Session, cfg: &MethodConfig) -> Result<BuiltGraph, OdometryError> {
    let ctx = Context::new(session, cfg)?;
    let meas = ctx.measurements(&ctx.init_pos);
    let treatment = match cfg.method {
        Method::CycleSlipEstimation => SlipTreatment::Estimate,
        _ => SlipTreatment::Ignore,
    };
    let (graph, counts) = ctx.assemble(&meas, &treatment)?;
    let initial = ctx.initial_values(&graph);
    Ok(BuiltGraph {
        graph,
        initial,
        counts,
        origin: ctx.origin,
        layout: ctx.layout.clone(),
        times: ctx.times(),
        slip_spans: if with_slip_nodes(cfg.method) {
            ctx.spans.clone()
        } else {
            BTreeMap::new()
        },
    })
}

fn with_slip_nodes(m: Method) -> bool {
    m == Method::CycleSlipEstimation
}

/// Per-epoch state positions in `values`, relative to the origin.
fn offsets(values: &Values, n: usize) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|k| {
            values.map[&VariableKey::State(k as u32)]
                .fixed_rows::<3>(0)
                .into_owned()
        })
        .collect()
}

/// Estimates the trajectory and the slip chains.
pub fn estimate_trajectory(session: &Session, cfg: &MethodConfig) -> Result<EstimateResult, OdometryError> {
    let ctx = Context::new(session, cfg)?;
    let n = ctx.epochs.len();
    let treatment = if with_slip_nodes(cfg.method) {
        SlipTreatment::Estimate
    } else {
        SlipTreatment::Ignore
    };

    let mut passes = Vec::new();
    let meas = ctx.measurements(&ctx.init_pos);
    let (graph, counts) = ctx.assemble(&meas, &treatment)?;
    let mut sol = optimize(&graph, &ctx.initial_values(&graph), &cfg.solver)?;
    passes.push(PassReport::new("initial", &sol));
    let mut final_counts = counts;

    let mut lin = ctx.init_pos.clone();
    if cfg.relinearize && n > 1 {
        lin = ctx.linearization_points(&sol.values);
        let meas = ctx.measurements(&lin);
        let (graph, counts) = ctx.assemble(&meas, &treatment)?;
        let mut init = ctx.initial_values(&graph);
        for (k, v) in sol.values.map.iter() {
            if init.map.contains_key(k) {
                init.insert(*k, v.clone());
            }
        }
        sol = optimize(&graph, &init, &cfg.solver)?;
        passes.push(PassReport::new("relinearized", &sol));
        final_counts = counts;
    }

    let mut slips: BTreeMap<SatId, SlipSeries> = BTreeMap::new();
    if with_slip_nodes(cfg.method) {
        for (sat, (a, b)) in &ctx.spans {
            let epochs: Vec<usize> = (*a..=*b).collect();
            slips.insert(
                *sat,
                SlipSeries {
                    times: epochs.iter().map(|k| ctx.epochs[*k].time).collect(),
                    values: epochs
                        .iter()
                        .map(|k| sol.values.map[&VariableKey::CycleSlip(*k as u32, *sat)][0])
                        .collect(),
                    epochs,
                    rounded: None,
                },
            );
        }
    }

    let mut flags = Vec::new();
    if cfg.round_slips && with_slip_nodes(cfg.method) {
        let mut fixed = BTreeMap::new();
        for (sat, s) in slips.iter_mut() {
            let r: Vec<i64> = s.values.iter().map(|v| v.round() as i64).collect();
            for (k, v) in s.epochs.iter().zip(&r) {
                fixed.insert((*k, *sat), *v as f64);
            }
            s.rounded = Some(r);
        }
        if cfg.relinearize && n > 1 {
            lin = ctx.linearization_points(&sol.values);
        }
        let meas = ctx.measurements(&lin);
        let (graph, _) = ctx.assemble(&meas, &SlipTreatment::Fixed(fixed))?;
        let mut init = Values::new();
        for k in 0..n {
            let key = VariableKey::State(k as u32);
            init.insert(key, sol.values.map[&key].clone());
        }
        sol = optimize(&graph, &init, &cfg.solver)?;
        passes.push(PassReport::new(INTEGER_ROUNDED, &sol));
        flags.push(INTEGER_ROUNDED.to_string());
    }

    let mut detected = Vec::new();
    for (sat, s) in &slips {
        for w in 1..s.values.len() {
            let jump = s.values[w] - s.values[w - 1];
            if jump.abs() > 0.5 {
                let k = s.epochs[w];
                let t = ctx.epochs[k].time;
                detected.push(DetectedSlip {
                    sat: *sat,
                    epoch: k,
                    week: t.week(),
                    tow: t.tow(),
                    cycles: jump,
                    rounded: s.rounded.as_ref().map(|r| r[w] - r[w - 1]),
                    evidence: ctx.evidence[k].contains(sat),
                });
            }
        }
    }
    detected.sort_by(|a, b| (a.epoch, a.sat).cmp(&(b.epoch, b.sat)));

    let offsets = offsets(&sol.values, n);
    let trajectory = Trajectory {
        times: ctx.times(),
        positions: offsets.iter().map(|d| d + ctx.origin).collect(),
    };
    let clocks = (0..n)
        .map(|k| {
            let x = &sol.values.map[&VariableKey::State(k as u32)];
            x.rows(3, ctx.layout.len()).iter().copied().collect()
        })
        .collect();
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        method: cfg.method,
        epochs: n,
        counts: final_counts,
        iterations: passes.iter().map(|p| p.iterations).sum(),
        cost: sol.cost,
        converged: sol.converged,
        diverged: sol.diverged,
        failed: !sol.converged || sol.diverged,
        passes,
        flags,
        detected_slips: detected,
        config: cfg.clone(),
    };
    Ok(EstimateResult {
        trajectory,
        origin: ctx.origin,
        offsets,
        clocks,
        layout: ctx.layout.clone(),
        slips,
        report,
    })
}

#[cfg(test)]
mod tests;
