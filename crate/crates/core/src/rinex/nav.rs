use std::io::Read;

use super::{col, header_label, parse_float, IonoCoefficients, ParseReport, RinexError};
use crate::ephemeris::{ClockPolynomial, EphemerisRecord, EphemerisStore, GlonassState, KeplerElements, Orbit};
use crate::gnss::{Constellation, SatId, FREQ_GAL_E1, FREQ_GAL_E5B, FREQ_GPS_L1, FREQ_GPS_L2};
use crate::time::{Calendar, GnssTime};

#[derive(Debug, Clone)]
pub struct NavFile {
    pub store: EphemerisStore,
    pub iono: IonoCoefficients,
    pub leap_seconds: Option<f64>,
    pub report: ParseReport,
}

/// Parses a (possibly mixed-constellation) navigation file.
pub fn parse_nav<R: Read>(mut source: R) -> Result<NavFile, RinexError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let text = String::from_utf8_lossy(&bytes);
    let lines: Vec<&str> = text.lines().map(|l| l.trim_end_matches('\r')).collect();

    let first = lines
        .iter()
        .position(|l| !l.trim().is_empty())
        .ok_or(RinexError::MissingHeader)?;
    if header_label(lines[first]) != "RINEX VERSION / TYPE" {
        return Err(RinexError::MissingHeader);
    }
    let malformed = |idx: usize| RinexError::MalformedHeader {
        line_no: idx + 1,
        line: lines[idx].to_string(),
    };

    let mut report = ParseReport::default();
    let mut iono = IonoCoefficients::default();
    let mut have_alpha = false;
    let mut have_beta = false;
    let mut leap_seconds = None;
    let mut body = None;
    for idx in first..lines.len() {
        let line = lines[idx];
        match header_label(line) {
            "RINEX VERSION / TYPE" => {
                let v = col(line, 0, 9).trim();
                let version: f64 = v.parse().map_err(|_| malformed(idx))?;
                if version.floor() != 3.0 {
                    return Err(RinexError::UnsupportedVersion(v.to_string()));
                }
                let ty = col(line, 20, 21);
                if ty != "N" && ty != "G" {
                    return Err(RinexError::WrongFileType {
                        expected: "navigation",
                        found: ty.to_string(),
                    });
                }
                if !(3.02..3.045).contains(&version) {
                    report.warn(format!("RINEX version {version:.2} outside the tested 3.02-3.04 range"));
                }
            }
            "IONOSPHERIC CORR" => {
                let kind = col(line, 0, 4);
                let target = match kind {
                    "GPSA" => Some(&mut iono.alpha),
                    "GPSB" => Some(&mut iono.beta),
                    _ => None,
                };
                if let Some(target) = target {
                    for (k, v) in target.iter_mut().enumerate() {
                        *v = match parse_float(col(line, 5 + 12 * k, 17 + 12 * k)) {
                            Some(Ok(x)) if x.is_finite() => x,
                            None => 0.0,
                            _ => return Err(malformed(idx)),
                        };
                    }
                    if kind == "GPSA" {
                        have_alpha = true;
                    } else {
                        have_beta = true;
                    }
                }
            }
            "LEAP SECONDS" => {
                leap_seconds = col(line, 0, 6).trim().parse().ok();
            }
            "END OF HEADER" => {
                body = Some(idx + 1);
                break;
            }
            _ => {}
        }
    }
    let mut i = body.ok_or(RinexError::UnterminatedHeader)?;
    iono.present = have_alpha && have_beta;
    if !iono.present {
        iono.alpha = [0.0; 4];
        iono.beta = [0.0; 4];
    }

    let mut store = EphemerisStore::new();
    while i < lines.len() {
        let line = lines[i];
        if line.trim().is_empty() {
            i += 1;
            continue;
        }
        let sys = line.chars().next().unwrap_or(' ');
        let n_lines = match sys {
            'G' | 'E' | 'C' | 'J' | 'I' => 8,
            'R' | 'S' => 4,
            _ => {
                report.warn(format!("line {}: unrecognised record start", i + 1));
                i += 1;
                continue;
            }
        };
        let start = i;
        let end = (i + n_lines).min(lines.len());
        i = end;
        if end - start < n_lines {
            report.records_skipped += 1;
            report.warn(format!("line {}: truncated navigation record", start + 1));
            break;
        }
        if sys == 'I' || sys == 'S' {
            continue;
        }
        report.records_read += 1;
        match parse_record(&lines[start..end]) {
            Ok(Some(rec)) => {
                store.insert(rec);
            }
            Ok(None) => {}
            Err(msg) => {
                report.records_skipped += 1;
                report.warn(format!("line {}: {msg}", start + 1));
            }
        }
    }
    Ok(NavFile {
        store,
        iono,
        leap_seconds,
        report,
    })
}

fn parse_record(lines: &[&str]) -> Result<Option<EphemerisRecord>, String> {
    let first = lines[0];
    let sat: SatId = col(first, 0, 3).parse().map_err(|e| format!("{e}"))?;
    let int = |a, b| -> Result<u32, String> {
        col(first, a, b)
            .trim()
            .parse()
            .map_err(|_| format!("{sat}: unreadable epoch"))
    };
    let cal = Calendar {
        year: int(4, 8)? as i32,
        month: int(9, 11)?,
        day: int(12, 14)?,
        hour: int(15, 17)?,
        minute: int(18, 20)?,
        second: int(21, 23)? as f64,
    };

    let mut d = Vec::with_capacity(4 * lines.len());
    let mut push = |field: &str| -> Result<(), String> {
        match parse_float(field) {
            None => d.push(0.0),
            Some(Ok(v)) if v.is_finite() => d.push(v),
            Some(Ok(_)) => return Err(format!("{sat}: non-finite field")),
            Some(Err(())) => return Err(format!("{sat}: unreadable field {field:?}")),
        }
        Ok(())
    };
    for k in 0..3 {
        push(col(first, 23 + 19 * k, 42 + 19 * k))?;
    }
    for line in &lines[1..] {
        for k in 0..4 {
            push(col(line, 4 + 19 * k, 23 + 19 * k))?;
        }
    }
    let bad_time = || format!("{sat}: invalid epoch");

    if sat.constellation == Constellation::Glonass {
        let toc = GnssTime::from_utc_calendar(cal).ok_or_else(bad_time)?;
        let channel = d[10].round();
        if !(-7.0..=6.0).contains(&channel) {
            return Err(format!("{sat}: frequency channel {channel} out of range"));
        }
        let km = 1000.0;
        return Ok(Some(EphemerisRecord {
            sat,
            toc,
            toe: toc,
            orbit: Orbit::Glonass(GlonassState {
                pos: [d[3] * km, d[7] * km, d[11] * km],
                vel: [d[4] * km, d[8] * km, d[12] * km],
                acc: [d[5] * km, d[9] * km, d[13] * km],
                freq_channel: channel as i8,
            }),
            clock: ClockPolynomial {
                af0: d[0],
                af1: d[1],
                af2: 0.0,
            },
            tgd: 0.0,
            tgd_l2: 0.0,
            health: d[6] as u32,
            iod: d[2],
        }));
    }

    let kepler = KeplerElements {
        crs: d[4],
        delta_n: d[5],
        m0: d[6],
        cuc: d[7],
        e: d[8],
        cus: d[9],
        sqrt_a: d[10],
        cic: d[12],
        omega0: d[13],
        cis: d[14],
        i0: d[15],
        crc: d[16],
        omega: d[17],
        omega_dot: d[18],
        idot: d[19],
    };
    if !(0.0..0.1).contains(&kepler.e) || kepler.sqrt_a <= 0.0 {
        return Err(format!("{sat}: orbit elements out of range"));
    }
    let week = d[21].round() as i32;
    let (toc, toe, tgd, tgd_l2) = match sat.constellation {
        Constellation::BeiDou => (
            GnssTime::from_bdt_calendar(cal).ok_or_else(bad_time)?,
            GnssTime::from_bdt(week, d[11]),
            d[25],
            d[26],
        ),
        Constellation::Galileo => {
            let source = d[20] as u32;
            // F/NAV clocks refer to E5a; only I/NAV matches the E1/E5b pair.
            if source & 0x2 != 0 && source & 0x201 == 0 {
                return Ok(None);
            }
            let g = (FREQ_GAL_E1 / FREQ_GAL_E5B).powi(2);
            (
                GnssTime::from_calendar(cal).ok_or_else(bad_time)?,
                GnssTime::new(week, d[11]),
                d[26],
                g * d[26],
            )
        }
        _ => {
            let g = (FREQ_GPS_L1 / FREQ_GPS_L2).powi(2);
            (
                GnssTime::from_calendar(cal).ok_or_else(bad_time)?,
                GnssTime::new(week, d[11]),
                d[25],
                g * d[25],
            )
        }
    };
    Ok(Some(EphemerisRecord {
        sat,
        toc,
        toe,
        orbit: Orbit::Kepler(kepler),
        clock: ClockPolynomial {
            af0: d[0],
            af1: d[1],
            af2: d[2],
        },
        tgd,
        tgd_l2,
        health: d[24] as u32,
        iod: d[3],
    }))
}
