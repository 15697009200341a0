//! RINEX 3.02–3.04 observation and navigation files.
//!
//! Parsing is line-oriented and column-based as in the format description;
//! floating-point fields are read with Rust's locale-independent parser, with
//! Fortran `D` exponents accepted.

mod nav;
mod obs;
mod writer;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gnss::{Band, Constellation, SatId};
use crate::time::GnssTime;

pub use nav::{parse_nav, NavFile};
pub use obs::{parse_obs, parse_obs_with, ObsFile, ObsHeader};
pub use writer::{write_nav, write_obs, ObsWriterHeader};

#[derive(Debug, Error)]
pub enum RinexError {
    #[error("missing header")]
    MissingHeader,
    #[error("header ended without END OF HEADER")]
    UnterminatedHeader,
    #[error("unsupported RINEX version {0}")]
    UnsupportedVersion(String),
    #[error("expected RINEX {expected} file, found type {found:?}")]
    WrongFileType { expected: &'static str, found: String },
    #[error("malformed header line {line_no}: {line:?}")]
    MalformedHeader { line_no: usize, line: String },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Counts of everything the parser dropped, plus the first few messages.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseReport {
    pub warnings: usize,
    pub epochs_read: usize,
    pub epochs_skipped: usize,
    pub records_read: usize,
    pub records_skipped: usize,
    pub messages: Vec<String>,
}

const MAX_MESSAGES: usize = 50;

impl ParseReport {
    pub(crate) fn warn(&mut self, msg: impl Into<String>) {
        self.warnings += 1;
        if self.messages.len() < MAX_MESSAGES {
            self.messages.push(msg.into());
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// One satellite's observables on one frequency band at one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarrierPhaseObs {
    pub sat: SatId,
    pub band: Band,
    /// Two-character signal code without the type letter, e.g. `"1C"`.
    pub code: String,
    /// Carrier phase in cycles.
    pub phase: Option<f64>,
    /// Pseudorange in meters.
    pub pseudorange: Option<f64>,
    pub doppler: Option<f64>,
    pub snr: Option<f64>,
    /// Raw LLI digit of the phase field.
    pub lli_flags: u8,
    pub wavelength: f64,
}

impl CarrierPhaseObs {
    /// Loss-of-lock flag, bit 0 of the LLI digit.
    pub fn lli(&self) -> bool {
        self.lli_flags & 1 != 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationEpoch {
    pub time: GnssTime,
    pub obs: Vec<CarrierPhaseObs>,
}

impl ObservationEpoch {
    pub fn new(time: GnssTime) -> Self {
        Self { time, obs: Vec::new() }
    }

    pub fn get(&self, sat: SatId, band: Band) -> Option<&CarrierPhaseObs> {
        self.obs.iter().find(|o| o.sat == sat && o.band == band)
    }

    /// Distinct satellites in the epoch, sorted.
    pub fn satellites(&self) -> Vec<SatId> {
        let mut s: Vec<SatId> = self.obs.iter().map(|o| o.sat).collect();
        s.sort();
        s.dedup();
        s
    }
}

/// Klobuchar broadcast coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IonoCoefficients {
    pub alpha: [f64; 4],
    pub beta: [f64; 4],
    /// False when the navigation header carried no GPS ionosphere lines.
    pub present: bool,
}

/// Signal codes considered for each constellation and band, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodePreferences {
    pub table: BTreeMap<Constellation, BandCodes>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandCodes {
    pub l1: Vec<String>,
    pub l2: Vec<String>,
}

impl BandCodes {
    fn new(l1: &[&str], l2: &[&str]) -> Self {
        Self {
            l1: l1.iter().map(|s| s.to_string()).collect(),
            l2: l2.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn for_band(&self, band: Band) -> &[String] {
        match band {
            Band::L1 => &self.l1,
            Band::L2 => &self.l2,
        }
    }
}

impl Default for CodePreferences {
    fn default() -> Self {
        use Constellation::*;
        let mut table = BTreeMap::new();
        table.insert(
            Gps,
            BandCodes::new(
                &["1C", "1S", "1L", "1X", "1P", "1W", "1Y", "1M"],
                &["2W", "2C", "2L", "2X", "2S", "2P", "2D", "2Y", "2M"],
            ),
        );
        table.insert(Glonass, BandCodes::new(&["1C", "1P"], &["2C", "2P"]));
        table.insert(
            Galileo,
            BandCodes::new(&["1C", "1B", "1X", "1A", "1Z"], &["7Q", "7I", "7X"]),
        );
        table.insert(
            BeiDou,
            BandCodes::new(&["2I", "2Q", "2X", "1I", "1Q", "1X"], &["7I", "7Q", "7X"]),
        );
        table.insert(Qzss, BandCodes::new(&["1C", "1S", "1L", "1X"], &["2L", "2S", "2X"]));
        Self { table }
    }
}

impl CodePreferences {
    /// Band and rank of a signal code, if listed.
    pub fn classify(&self, c: Constellation, code: &str) -> Option<(Band, usize)> {
        let entry = self.table.get(&c)?;
        for band in [Band::L1, Band::L2] {
            if let Some(rank) = entry.for_band(band).iter().position(|x| x == code) {
                return Some((band, rank));
            }
        }
        None
    }
}

/// Parses a Fortran-style float field; blank fields yield `None`.
pub(crate) fn parse_float(field: &str) -> Option<Result<f64, ()>> {
    let t = field.trim();
    if t.is_empty() {
        return None;
    }
    let s = t.replace(['D', 'd'], "E");
    Some(s.parse::<f64>().map_err(|_| ()))
}

/// Byte-safe column slice; short lines yield truncated or empty slices.
pub(crate) fn col(line: &str, start: usize, end: usize) -> &str {
    let len = line.len();
    let s = start.min(len);
    let e = end.min(len);
    line.get(s..e).unwrap_or("")
}

pub(crate) fn header_label(line: &str) -> &str {
    col(line, 60, 80).trim()
}
