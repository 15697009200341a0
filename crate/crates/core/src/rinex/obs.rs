use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use serde::{Deserialize, Serialize};

use super::{
    col, header_label, parse_float, CarrierPhaseObs, CodePreferences, ObservationEpoch, ParseReport, RinexError,
};
use crate::gnss::{wavelength, Band, Constellation, SatId};
use crate::time::{Calendar, GnssTime};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObsHeader {
    pub version: f64,
    pub marker_name: Option<String>,
    pub approx_position: Option<[f64; 3]>,
    pub interval: Option<f64>,
    /// Three-character observation types per constellation, in file order.
    pub obs_types: BTreeMap<Constellation, Vec<String>>,
    pub glonass_channels: BTreeMap<SatId, i8>,
    /// Time system of epoch tags ("GPS", "GLO", "GAL", "BDT", "QZS").
    pub time_system: String,
}

#[derive(Debug, Clone)]
pub struct ObsFile {
    pub header: ObsHeader,
    pub epochs: Vec<ObservationEpoch>,
    pub report: ParseReport,
}

/// Parses an observation file with the default code preferences.
pub fn parse_obs<R: Read>(source: R) -> Result<ObsFile, RinexError> {
    parse_obs_with(source, &CodePreferences::default(), &BTreeMap::new())
}

/// Parses an observation file. `extra_channels` supplies GLONASS frequency
/// channels (e.g. from navigation data) for satellites missing from the
/// header's slot table.
pub fn parse_obs_with<R: Read>(
    mut source: R,
    prefs: &CodePreferences,
    extra_channels: &BTreeMap<SatId, i8>,
) -> Result<ObsFile, RinexError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let text = String::from_utf8_lossy(&bytes);
    let lines: Vec<&str> = text.lines().map(|l| l.trim_end_matches('\r')).collect();

    let (header, body_start) = parse_header(&lines)?;
    let mut report = ParseReport::default();
    if !(3.02..3.045).contains(&header.version) {
        report.warn(format!(
            "RINEX version {:.2} outside the tested 3.02-3.04 range",
            header.version
        ));
    }
    let mut channels = extra_channels.clone();
    channels.extend(header.glonass_channels.iter().map(|(k, v)| (*k, *v)));

    let mut epochs: Vec<ObservationEpoch> = Vec::new();
    let mut missing_channel: BTreeSet<SatId> = BTreeSet::new();
    let mut i = body_start;
    while i < lines.len() {
        let line = lines[i];
        i += 1;
        if line.trim().is_empty() {
            continue;
        }
        if !line.starts_with('>') {
            report.warn(format!("line {}: unexpected data outside an epoch", i));
            continue;
        }
        let Some((cal, flag, nsat)) = parse_epoch_line(line) else {
            report.epochs_skipped += 1;
            report.warn(format!("line {}: unreadable epoch record", i));
            while i < lines.len() && !lines[i].starts_with('>') {
                i += 1;
            }
            continue;
        };
        if flag > 1 {
            // Event records carry `nsat` special lines instead of data.
            i += nsat.min(lines.len() - i);
            continue;
        }
        let body_end = (i + nsat).min(lines.len());
        let sat_lines: Vec<(usize, &str)> = (i..body_end)
            .take_while(|&j| !lines[j].starts_with('>'))
            .map(|j| (j + 1, lines[j]))
            .collect();
        i += sat_lines.len();
        if sat_lines.len() < nsat {
            report.warn(format!("line {}: epoch truncated", i));
        }
        let time = match convert_time(cal, &header.time_system) {
            Some(t) => t,
            None => {
                report.epochs_skipped += 1;
                report.warn(format!("line {}: invalid epoch time", i));
                continue;
            }
        };
        if let Some(last) = epochs.last() {
            if time <= last.time {
                report.epochs_skipped += 1;
                report.warn(format!("epoch {} is not after {}; rejected", time, last.time));
                continue;
            }
        }
        let mut epoch = ObservationEpoch::new(time);
        for (line_no, sl) in sat_lines {
            match parse_sat_line(sl, &header, prefs, &channels) {
                Ok(SatLine::Obs(mut obs)) => {
                    report.records_read += 1;
                    for o in obs.drain(..) {
                        if epoch.get(o.sat, o.band).is_none() {
                            epoch.obs.push(o);
                        }
                    }
                }
                Ok(SatLine::Ignored) => {}
                Ok(SatLine::NoChannel(sat)) => {
                    missing_channel.insert(sat);
                    report.records_skipped += 1;
                }
                Err(msg) => {
                    report.records_skipped += 1;
                    report.warn(format!("line {line_no}: {msg}"));
                }
            }
        }
        report.epochs_read += 1;
        epochs.push(epoch);
    }
    for sat in missing_channel {
        report.warn(format!(
            "{sat}: unknown GLONASS frequency channel; observations dropped"
        ));
    }
    Ok(ObsFile { header, epochs, report })
}

fn convert_time(cal: Calendar, system: &str) -> Option<GnssTime> {
    match system {
        "GLO" | "UTC" => GnssTime::from_utc_calendar(cal),
        "BDT" => GnssTime::from_bdt_calendar(cal),
        _ => GnssTime::from_calendar(cal),
    }
}

fn parse_header(lines: &[&str]) -> Result<(ObsHeader, usize), RinexError> {
    let first = lines
        .iter()
        .position(|l| !l.trim().is_empty())
        .ok_or(RinexError::MissingHeader)?;
    if header_label(lines[first]) != "RINEX VERSION / TYPE" {
        return Err(RinexError::MissingHeader);
    }
    let mut h = ObsHeader {
        time_system: "GPS".to_string(),
        ..Default::default()
    };
    let malformed = |idx: usize| RinexError::MalformedHeader {
        line_no: idx + 1,
        line: lines[idx].to_string(),
    };
    let mut current_sys: Option<(Option<Constellation>, usize)> = None;
    let mut glo_expected: Option<usize> = None;
    for idx in first..lines.len() {
        let line = lines[idx];
        match header_label(line) {
            "RINEX VERSION / TYPE" => {
                let v = col(line, 0, 9).trim();
                let version: f64 = v.parse().map_err(|_| malformed(idx))?;
                if version.floor() != 3.0 {
                    return Err(RinexError::UnsupportedVersion(v.to_string()));
                }
                let file_type = col(line, 20, 21);
                if file_type != "O" {
                    return Err(RinexError::WrongFileType {
                        expected: "observation",
                        found: file_type.to_string(),
                    });
                }
                h.version = version;
            }
            "MARKER NAME" => h.marker_name = Some(col(line, 0, 60).trim().to_string()),
            "APPROX POSITION XYZ" => {
                let mut p = [0.0; 3];
                for (k, v) in p.iter_mut().enumerate() {
                    *v = col(line, 14 * k, 14 * k + 14)
                        .trim()
                        .parse()
                        .map_err(|_| malformed(idx))?;
                }
                h.approx_position = Some(p);
            }
            "INTERVAL" => {
                h.interval = Some(col(line, 0, 10).trim().parse().map_err(|_| malformed(idx))?);
            }
            "SYS / # / OBS TYPES" => {
                let sys = col(line, 0, 1);
                if sys != " " && !sys.is_empty() {
                    let c = sys.chars().next().expect("non-empty");
                    let n: usize = col(line, 3, 6).trim().parse().map_err(|_| malformed(idx))?;
                    let constellation = Constellation::from_rinex_char(c);
                    if constellation.is_none() && !"SI".contains(c) {
                        return Err(malformed(idx));
                    }
                    if let Some(cst) = constellation {
                        h.obs_types.insert(cst, Vec::with_capacity(n));
                    }
                    current_sys = Some((constellation, n));
                }
                let Some((cst, n)) = current_sys else {
                    return Err(malformed(idx));
                };
                let codes: Vec<String> = (0..13)
                    .map(|k| col(line, 7 + 4 * k, 10 + 4 * k).trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
                if codes.iter().any(|c| c.len() != 3) {
                    return Err(malformed(idx));
                }
                if let Some(cst) = cst {
                    let list = h.obs_types.get_mut(&cst).expect("inserted above");
                    list.extend(codes);
                    if list.len() > n {
                        return Err(malformed(idx));
                    }
                }
            }
            "GLONASS SLOT / FRQ #" => {
                if let Ok(n) = col(line, 0, 3).trim().parse::<usize>() {
                    glo_expected = Some(n);
                }
                for k in 0..8 {
                    let entry = col(line, 4 + 7 * k, 11 + 7 * k);
                    if entry.trim().is_empty() {
                        continue;
                    }
                    let sat: SatId = col(entry, 0, 3).parse().map_err(|_| malformed(idx))?;
                    let ch: i8 = col(entry, 3, 7).trim().parse().map_err(|_| malformed(idx))?;
                    if !(-7..=6).contains(&ch) {
                        return Err(malformed(idx));
                    }
                    h.glonass_channels.insert(sat, ch);
                }
            }
            "TIME OF FIRST OBS" => {
                let ts = col(line, 48, 51).trim();
                if !ts.is_empty() {
                    h.time_system = ts.to_string();
                }
            }
            "END OF HEADER" => {
                for (cst, list) in &h.obs_types {
                    if list.is_empty() {
                        return Err(RinexError::MalformedHeader {
                            line_no: idx + 1,
                            line: format!("no observation types for {cst:?}"),
                        });
                    }
                }
                if let Some(n) = glo_expected {
                    if n < h.glonass_channels.len() {
                        return Err(malformed(idx));
                    }
                }
                if h.version == 0.0 {
                    return Err(RinexError::MissingHeader);
                }
                return Ok((h, idx + 1));
            }
            _ => {}
        }
    }
    Err(RinexError::UnterminatedHeader)
}

fn parse_epoch_line(line: &str) -> Option<(Calendar, u8, usize)> {
    let int = |a, b| col(line, a, b).trim().parse::<u32>().ok();
    let cal = Calendar {
        year: col(line, 2, 6).trim().parse().ok()?,
        month: int(7, 9)?,
        day: int(10, 12)?,
        hour: int(13, 15)?,
        minute: int(16, 18)?,
        second: col(line, 18, 29).trim().parse().ok()?,
    };
    let flag: u8 = col(line, 31, 32).trim().parse().unwrap_or(0);
    let nsat: usize = col(line, 32, 35).trim().parse().ok()?;
    Some((cal, flag, nsat))
}

enum SatLine {
    Obs(Vec<CarrierPhaseObs>),
    Ignored,
    NoChannel(SatId),
}

#[derive(Default, Clone)]
struct CodeValues {
    phase: Option<f64>,
    lli: u8,
    pseudorange: Option<f64>,
    doppler: Option<f64>,
    snr: Option<f64>,
}

fn parse_sat_line(
    line: &str,
    header: &ObsHeader,
    prefs: &CodePreferences,
    channels: &BTreeMap<SatId, i8>,
) -> Result<SatLine, String> {
    let id = col(line, 0, 3);
    let first = id.chars().next().unwrap_or(' ');
    let Some(constellation) = Constellation::from_rinex_char(first) else {
        if "SI".contains(first) {
            return Ok(SatLine::Ignored);
        }
        return Err(format!("unknown satellite {id:?}"));
    };
    let sat: SatId = id.parse().map_err(|e| format!("{e}"))?;
    let Some(types) = header.obs_types.get(&constellation) else {
        return Err(format!("{sat}: constellation has no observation types"));
    };

    let mut per_code: BTreeMap<&str, CodeValues> = BTreeMap::new();
    for (k, ty) in types.iter().enumerate() {
        let start = 3 + 16 * k;
        let Some(value) = parse_float(col(line, start, start + 14)) else {
            continue;
        };
        let value = value.map_err(|_| format!("{sat}: unreadable {ty} field"))?;
        if !value.is_finite() {
            return Err(format!("{sat}: non-finite {ty} field"));
        }
        let code = &ty[1..3];
        let entry = per_code.entry(code).or_default();
        match &ty[0..1] {
            "L" => {
                entry.phase = Some(value);
                entry.lli = col(line, start + 14, start + 15).trim().parse().unwrap_or(0);
            }
            "C" => entry.pseudorange = Some(value),
            "D" => entry.doppler = Some(value),
            "S" => entry.snr = Some(value),
            _ => {}
        }
    }

    let mut best: [Option<(usize, &str)>; 2] = [None, None];
    for (code, v) in &per_code {
        if v.phase.is_none() && v.pseudorange.is_none() {
            continue;
        }
        if let Some((band, rank)) = prefs.classify(constellation, code) {
            let slot = &mut best[band as usize];
            if slot.is_none_or(|(r, _)| rank < r) {
                *slot = Some((rank, code));
            }
        }
    }

    let channel = channels.get(&sat).copied();
    let mut out = Vec::new();
    for (band, pick) in [Band::L1, Band::L2].into_iter().zip(best) {
        let Some((_, code)) = pick else { continue };
        let Some(lambda) = wavelength(constellation, band, channel) else {
            return Ok(SatLine::NoChannel(sat));
        };
        let v = per_code[code].clone();
        out.push(CarrierPhaseObs {
            sat,
            band,
            code: code.to_string(),
            phase: v.phase,
            pseudorange: v.pseudorange,
            doppler: v.doppler,
            snr: v.snr,
            lli_flags: v.lli,
            wavelength: lambda,
        });
    }
    Ok(SatLine::Obs(out))
}
