//! CSV and JSON products of a run.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coords::{ecef_to_geodetic, enu};
use crate::gnss::SatId;
use crate::time::GnssTime;

use super::{RunReport, SlipSeries, Trajectory};

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> OutputError + '_ {
    move |source| OutputError::Csv {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Serialize)]
struct TrajectoryRow {
    week: i32,
    tow: f64,
    x: f64,
    y: f64,
    z: f64,
    e: f64,
    n: f64,
    u: f64,
}

/// Columns week, tow, x, y, z (ECEF m) and e, n, u relative to the first
/// epoch (m).
pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<(), OutputError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    if let Some(origin) = traj.positions.first() {
        let geo = ecef_to_geodetic(origin);
        for (t, p) in traj.times.iter().zip(&traj.positions) {
            let d = enu(&geo, &(p - origin));
            w.serialize(TrajectoryRow {
                week: t.week(),
                tow: t.tow(),
                x: p.x,
                y: p.y,
                z: p.z,
                e: d.x,
                n: d.y,
                u: d.z,
            })
            .map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(|source| OutputError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Deserialize)]
struct TrajectoryInRow {
    #[serde(default)]
    week: Option<i32>,
    tow: f64,
    x: f64,
    y: f64,
    z: f64,
}

/// Reads a trajectory CSV with at least the columns tow, x, y, z; a week
/// column is optional (week 0 when absent). Extra columns are ignored.
pub fn read_trajectory_csv(path: &Path) -> Result<Trajectory, OutputError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut traj = Trajectory::default();
    for row in r.deserialize::<TrajectoryInRow>() {
        let row = row.map_err(csv_err(path))?;
        let p = Vector3::new(row.x, row.y, row.z);
        if !(p.iter().all(|v| v.is_finite()) && row.tow.is_finite()) {
            return Err(OutputError::Format {
                path: path.display().to_string(),
                detail: format!("non-finite value at tow {}", row.tow),
            });
        }
        traj.times.push(GnssTime::new(row.week.unwrap_or(0), row.tow));
        traj.positions.push(p);
    }
    Ok(traj)
}

#[derive(Serialize)]
struct SlipRow {
    week: i32,
    tow: f64,
    sat: SatId,
    #[serde(rename = "B")]
    b: f64,
    #[serde(rename = "B_float")]
    b_float: f64,
}

/// Columns week, tow, sat, B (rounded when the rounding step ran) and
/// B_float (real-valued estimate), in cycles.
pub fn write_slips_csv(path: &Path, slips: &BTreeMap<SatId, SlipSeries>) -> Result<(), OutputError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    if slips.is_empty() {
        w.write_record(["week", "tow", "sat", "B", "B_float"])
            .map_err(csv_err(path))?;
    }
    for (sat, s) in slips {
        for (i, t) in s.times.iter().enumerate() {
            let b_float = s.values[i];
            let b = s.rounded.as_ref().map_or(b_float, |r| r[i] as f64);
            w.serialize(SlipRow {
                week: t.week(),
                tow: t.tow(),
                sat: *sat,
                b,
                b_float,
            })
            .map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(|source| OutputError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_report(path: &Path, report: &RunReport) -> Result<(), OutputError> {
    std::fs::write(path, report.to_json() + "\n").map_err(|source| OutputError::Io {
        path: path.display().to_string(),
        source,
    })
}
