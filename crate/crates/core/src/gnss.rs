//! Constellations, satellite identifiers, signal bands and physical constants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub const FREQ_GPS_L1: f64 = 1575.42e6;
pub const FREQ_GPS_L2: f64 = 1227.60e6;
pub const FREQ_GLO_G1: f64 = 1602.0e6;
pub const FREQ_GLO_G1_STEP: f64 = 0.5625e6;
pub const FREQ_GLO_G2: f64 = 1246.0e6;
pub const FREQ_GLO_G2_STEP: f64 = 0.4375e6;
pub const FREQ_GAL_E1: f64 = 1575.42e6;
pub const FREQ_GAL_E5B: f64 = 1207.14e6;
pub const FREQ_BDS_B1I: f64 = 1561.098e6;
pub const FREQ_BDS_B2I: f64 = 1207.14e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Constellation {
    Gps,
    Glonass,
    Galileo,
    BeiDou,
    Qzss,
}

impl Constellation {
    pub const ALL: [Constellation; 5] = [
        Constellation::Gps,
        Constellation::Glonass,
        Constellation::Galileo,
        Constellation::BeiDou,
        Constellation::Qzss,
    ];

    pub fn from_rinex_char(c: char) -> Option<Self> {
        match c {
            'G' => Some(Self::Gps),
            'R' => Some(Self::Glonass),
            'E' => Some(Self::Galileo),
            'C' => Some(Self::BeiDou),
            'J' => Some(Self::Qzss),
            _ => None,
        }
    }

    pub fn rinex_char(self) -> char {
        match self {
            Self::Gps => 'G',
            Self::Glonass => 'R',
            Self::Galileo => 'E',
            Self::BeiDou => 'C',
            Self::Qzss => 'J',
        }
    }

    pub fn max_prn(self) -> u8 {
        match self {
            Self::Gps => 32,
            Self::Glonass => 27,
            Self::Galileo => 36,
            Self::BeiDou => 63,
            Self::Qzss => 10,
        }
    }

    /// Receiver clock group this constellation's measurements share.
    /// QZSS is broadcast in GPS time and shares the GPS clock state.
    pub fn clock_group(self) -> ClockGroup {
        match self {
            Self::Gps | Self::Qzss => ClockGroup::Gps,
            Self::Glonass => ClockGroup::Glonass,
            Self::Galileo => ClockGroup::Galileo,
            Self::BeiDou => ClockGroup::BeiDou,
        }
    }
}

/// Receiver clock states: one absolute GPS clock plus one inter-system bias
/// for every other system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClockGroup {
    Gps,
    Glonass,
    Galileo,
    BeiDou,
}

impl fmt::Display for ClockGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Gps => "GPS",
            Self::Glonass => "GLO",
            Self::Galileo => "GAL",
            Self::BeiDou => "BDS",
        };
        f.write_str(s)
    }
}

/// Ordered set of clock groups making up the clock part of a receiver state.
///
/// The first group is the base clock (GPS when present); every other entry is
/// a bias relative to the base.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClockLayout {
    groups: Vec<ClockGroup>,
}

impl ClockLayout {
    pub fn from_groups<I: IntoIterator<Item = ClockGroup>>(groups: I) -> Self {
        let mut groups: Vec<ClockGroup> = groups.into_iter().collect();
        groups.sort();
        groups.dedup();
        Self { groups }
    }

    pub fn from_sats<'a, I: IntoIterator<Item = &'a SatId>>(sats: I) -> Self {
        Self::from_groups(sats.into_iter().map(|s| s.constellation.clock_group()))
    }

    pub fn groups(&self) -> &[ClockGroup] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn index_of(&self, group: ClockGroup) -> Option<usize> {
        self.groups.iter().position(|g| *g == group)
    }

    /// Clock-part row of the measurement matrix for a satellite: a one in the
    /// base column plus a one in the satellite's own bias column.
    pub fn design_row(&self, sat: SatId) -> Vec<f64> {
        let mut row = vec![0.0; self.groups.len()];
        if row.is_empty() {
            return row;
        }
        row[0] = 1.0;
        if let Some(i) = self.index_of(sat.constellation.clock_group()) {
            if i > 0 {
                row[i] = 1.0;
            }
        }
        row
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SatIdError {
    #[error("invalid satellite identifier {0:?}")]
    Invalid(String),
    #[error("prn {prn} out of range for {constellation:?}")]
    PrnRange { constellation: Constellation, prn: u8 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SatId {
    pub constellation: Constellation,
    pub prn: u8,
}

impl SatId {
    pub fn new(constellation: Constellation, prn: u8) -> Result<Self, SatIdError> {
        if prn == 0 || prn > constellation.max_prn() {
            return Err(SatIdError::PrnRange { constellation, prn });
        }
        Ok(Self { constellation, prn })
    }

    pub fn gps(prn: u8) -> Self {
        Self::new(Constellation::Gps, prn).expect("valid GPS prn")
    }

    /// BeiDou GEO satellites need a dedicated orbit rotation.
    pub fn is_beidou_geo(&self) -> bool {
        self.constellation == Constellation::BeiDou && (self.prn <= 5 || self.prn >= 59)
    }
}

impl fmt::Display for SatId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{:02}", self.constellation.rinex_char(), self.prn)
    }
}

impl FromStr for SatId {
    type Err = SatIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let mut chars = s.chars();
        let c = chars.next().ok_or_else(|| SatIdError::Invalid(s.to_string()))?;
        let constellation = Constellation::from_rinex_char(c).ok_or_else(|| SatIdError::Invalid(s.to_string()))?;
        let prn: u8 = chars
            .as_str()
            .trim()
            .parse()
            .map_err(|_| SatIdError::Invalid(s.to_string()))?;
        Self::new(constellation, prn)
    }
}

impl TryFrom<String> for SatId {
    type Error = SatIdError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<SatId> for String {
    fn from(value: SatId) -> Self {
        value.to_string()
    }
}

/// Frequency band class.
///
/// `L1` covers GPS/QZSS L1, GLONASS G1, Galileo E1 and BeiDou B1I; `L2` covers
/// GPS/QZSS L2, GLONASS G2, Galileo E5b and BeiDou B2I.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Band {
    L1,
    L2,
}

/// Carrier frequency in Hz. GLONASS needs its FDMA channel number.
pub fn carrier_frequency(constellation: Constellation, band: Band, glo_channel: Option<i8>) -> Option<f64> {
    use Constellation::*;
    let f = match (constellation, band) {
        (Gps | Qzss, Band::L1) => FREQ_GPS_L1,
        (Gps | Qzss, Band::L2) => FREQ_GPS_L2,
        (Galileo, Band::L1) => FREQ_GAL_E1,
        (Galileo, Band::L2) => FREQ_GAL_E5B,
        (BeiDou, Band::L1) => FREQ_BDS_B1I,
        (BeiDou, Band::L2) => FREQ_BDS_B2I,
        (Glonass, b) => {
            let k = glo_channel? as f64;
            if !(-7.0..=6.0).contains(&k) {
                return None;
            }
            match b {
                Band::L1 => FREQ_GLO_G1 + k * FREQ_GLO_G1_STEP,
                Band::L2 => FREQ_GLO_G2 + k * FREQ_GLO_G2_STEP,
            }
        }
    };
    Some(f)
}

pub fn wavelength(constellation: Constellation, band: Band, glo_channel: Option<i8>) -> Option<f64> {
    carrier_frequency(constellation, band, glo_channel).map(|f| SPEED_OF_LIGHT / f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gps_l1_wavelength() {
        let l = wavelength(Constellation::Gps, Band::L1, None).unwrap();
        assert!((l - SPEED_OF_LIGHT / 1575.42e6).abs() < 1e-12);
        assert!((l - 0.19029).abs() < 1e-4);
    }

    #[test]
    fn glonass_needs_channel() {
        assert!(wavelength(Constellation::Glonass, Band::L1, None).is_none());
        assert!(wavelength(Constellation::Glonass, Band::L1, Some(9)).is_none());
        let f = carrier_frequency(Constellation::Glonass, Band::L1, Some(-7)).unwrap();
        assert!((f - 1598.0625e6).abs() < 1.0);
    }

    #[test]
    fn sat_id_parse_and_display() {
        let s: SatId = "G03".parse().unwrap();
        assert_eq!(s, SatId::gps(3));
        assert_eq!(s.to_string(), "G03");
        let r: SatId = "R 9".parse().unwrap();
        assert_eq!(r.to_string(), "R09");
        assert!("G33".parse::<SatId>().is_err());
        assert!("X01".parse::<SatId>().is_err());
        assert!("C01".parse::<SatId>().unwrap().is_beidou_geo());
    }

    #[test]
    fn clock_layout_rows() {
        let sats = ["E11".parse::<SatId>().unwrap(), SatId::gps(1), "J02".parse().unwrap()];
        let layout = ClockLayout::from_sats(sats.iter());
        assert_eq!(layout.groups(), &[ClockGroup::Gps, ClockGroup::Galileo]);
        assert_eq!(layout.design_row(sats[0]), vec![1.0, 1.0]);
        assert_eq!(layout.design_row(sats[1]), vec![1.0, 0.0]);
        assert_eq!(layout.design_row(sats[2]), vec![1.0, 0.0]);
    }
}
