//! Trajectory error against ground truth and TDCP residual diagnostics.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gnss::{Band, SatId};
use crate::odometry::{OutputError, Session, SlipSeries, Trajectory};
use crate::sim::SlipSpec;
use crate::tdcp::{build_tdcp_with, TdcpConfig};
use crate::time::GnssTime;

/// Two epoch tags closer than this are matched (s).
pub const MATCH_TOL: f64 = 0.1;

/// Epoch pairs whose separation differs from the requested offset by less
/// than this are used (s).
const OFFSET_TOL: f64 = 0.05;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trajectories share no epochs")]
    NoOverlap,
    #[error("only {0} common epoch; at least 2 are needed")]
    TooFewCommon(usize),
    #[error("negative or non-finite offset {0}")]
    BadOffset(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    pub rms: f64,
    pub max: f64,
    /// Matched estimate epochs.
    pub times: Vec<GnssTime>,
    /// 3D error per matched epoch after alignment (m).
    pub errors: Vec<f64>,
    /// Translation added to the estimate (m).
    pub alignment: [f64; 3],
}

impl AteReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Index of the entry of `sorted` nearest to `t`, if within `tol`.
fn nearest(sorted: &[(f64, usize)], t: f64, tol: f64) -> Option<usize> {
    let i = sorted.partition_point(|(s, _)| *s < t);
    [i.checked_sub(1), Some(i)]
        .into_iter()
        .flatten()
        .filter_map(|j| sorted.get(j))
        .map(|(s, k)| ((s - t).abs(), *k))
        .filter(|(d, _)| *d <= tol)
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, k)| k)
}

/// Absolute trajectory error after translation-only alignment at the first
/// common epoch. Estimate epochs are matched to the nearest truth epoch
/// within `MATCH_TOL`.
pub fn ate(traj: &Trajectory, truth: &Trajectory) -> Result<AteReport, EvalError> {
    let mut index: Vec<(f64, usize)> = truth
        .times
        .iter()
        .enumerate()
        .map(|(k, t)| (t.total_seconds(), k))
        .collect();
    index.sort_by(|a, b| a.0.total_cmp(&b.0));
    let pairs: Vec<(usize, usize)> = traj
        .times
        .iter()
        .enumerate()
        .filter_map(|(i, t)| nearest(&index, t.total_seconds(), MATCH_TOL).map(|k| (i, k)))
        .collect();
    match pairs.len() {
        0 => return Err(EvalError::NoOverlap),
        1 => return Err(EvalError::TooFewCommon(1)),
        _ => {}
    }
    let (i0, k0) = pairs[0];
    let shift = truth.positions[k0] - traj.positions[i0];
    let errors: Vec<f64> = pairs
        .iter()
        .map(|(i, k)| (traj.positions[*i] + shift - truth.positions[*k]).norm())
        .collect();
    let rms = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt();
    let max = errors.iter().copied().fold(0.0, f64::max);
    Ok(AteReport {
        rms,
        max,
        times: pairs.iter().map(|(i, _)| traj.times[*i]).collect(),
        errors,
        alignment: shift.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DdResidual {
    pub sat: SatId,
    /// Epoch separation (s).
    pub dt: f64,
    /// Start epoch of the pair.
    pub t1: GnssTime,
    /// Between-satellite difference of TDCP residuals, satellite minus
    /// reference (m).
    pub residual: f64,
}

/// Double-difference TDCP residuals for a static receiver at `position`.
///
/// For every epoch and offset Δt, the TDCP residual (phase change minus
/// satellite-motion range change, with satellite clock and modeled
/// atmosphere removed) of each satellite minus that of `reference_sat`.
/// The between-satellite difference removes the receiver clock change.
/// Epochs where the reference satellite has no TDCP measurement are
/// skipped.
pub fn dd_residual_series(
    session: &Session,
    reference_sat: SatId,
    offsets: &[f64],
    position: &Vector3<f64>,
    cfg: &TdcpConfig,
) -> Result<Vec<DdResidual>, EvalError> {
    if let Some(d) = offsets.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
        return Err(EvalError::BadOffset(*d));
    }
    let epochs = &session.epochs;
    let secs: Vec<f64> = epochs.iter().map(|e| e.time.total_seconds()).collect();
    let mut out = Vec::new();
    for &dt in offsets {
        for (i, e1) in epochs.iter().enumerate() {
            let target = secs[i] + dt;
            let j = i + secs[i..].partition_point(|s| *s < target - OFFSET_TOL);
            if j >= epochs.len() || (secs[j] - target).abs() > OFFSET_TOL {
                continue;
            }
            let meas = build_tdcp_with(e1, &epochs[j], &session.store, &session.iono, position, position, cfg);
            let Some(r) = meas.iter().find(|m| m.sat == reference_sat) else {
                continue;
            };
            let r_obs = r.observed();
            out.extend(meas.iter().filter(|m| m.sat != reference_sat).map(|m| DdResidual {
                sat: m.sat,
                dt,
                t1: e1.time,
                residual: m.observed() - r_obs,
            }));
        }
    }
    Ok(out)
}

/// (Δt, standard deviation of the residuals) per offset, in offset order.
pub fn dd_spread(rows: &[DdResidual]) -> Vec<(f64, f64)> {
    let mut groups: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        groups
            .entry(r.dt.to_bits())
            .or_insert((r.dt, Vec::new()))
            .1
            .push(r.residual);
    }
    let mut out: Vec<(f64, f64)> = groups
        .into_values()
        .map(|(dt, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            (dt, (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
        })
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Writes columns sat, dt, week, tow, residual.
pub fn write_dd_csv(path: &Path, rows: &[DdResidual]) -> Result<(), OutputError> {
    #[derive(Serialize)]
    struct Row {
        sat: SatId,
        dt: f64,
        week: i32,
        tow: f64,
        residual: f64,
    }
    let csv_err = |source| OutputError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if rows.is_empty() {
        w.write_record(["sat", "dt", "week", "tow", "residual"])
            .map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(Row {
            sat: r.sat,
            dt: r.dt,
            week: r.t1.week(),
            tow: r.t1.tow(),
            residual: r.residual,
        })
        .map_err(csv_err)?;
    }
    w.flush().map_err(|source| OutputError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlipComparison {
    pub sat: SatId,
    /// Largest |estimated − true| change of the cumulative slip since the
    /// first epoch of the chain (cycles).
    pub max_float_error: f64,
    /// Rounded chain equals the true chain at every epoch; `None` without
    /// rounding.
    pub rounded_exact: Option<bool>,
}

/// Compares estimated slip chains with true slip events.
///
/// `true_slips` lists (time of the first affected epoch, cycles) per
/// satellite. Both chains are referenced to their first epoch, where the
/// estimate is anchored to zero.
pub fn compare_slips(
    estimated: &BTreeMap<SatId, SlipSeries>,
    true_slips: &BTreeMap<SatId, Vec<(GnssTime, i64)>>,
) -> Vec<SlipComparison> {
    let cumulative = |sat: SatId, t: GnssTime| -> i64 {
        true_slips
            .get(&sat)
            .map(|v| v.iter().filter(|(s, _)| (*s - t) <= OFFSET_TOL).map(|(_, c)| c).sum())
            .unwrap_or(0)
    };
    estimated
        .iter()
        .filter(|(_, s)| !s.times.is_empty())
        .map(|(sat, s)| {
            let base = cumulative(*sat, s.times[0]);
            let truth: Vec<i64> = s.times.iter().map(|t| cumulative(*sat, *t) - base).collect();
            let max_float_error = s
                .values
                .iter()
                .zip(&truth)
                .map(|(v, t)| (v - s.values[0] - *t as f64).abs())
                .fold(0.0, f64::max);
            let rounded_exact = s
                .rounded
                .as_ref()
                .map(|r| r.iter().zip(&truth).all(|(a, t)| a - r[0] == *t));
            SlipComparison {
                sat: *sat,
                max_float_error,
                rounded_exact,
            }
        })
        .collect()
}

/// True slip events on `band` keyed by satellite, with the time of the first
/// affected epoch.
pub fn slip_events_by_time(
    slips: &[SlipSpec],
    times: &[GnssTime],
    band: Band,
) -> BTreeMap<SatId, Vec<(GnssTime, i64)>> {
    let mut out: BTreeMap<SatId, Vec<(GnssTime, i64)>> = BTreeMap::new();
    for s in slips.iter().filter(|s| s.band == band) {
        if let Some(t) = times.get(s.epoch) {
            out.entry(s.sat).or_default().push((*t, s.cycles));
        }
    }
    out
}
