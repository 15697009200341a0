use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};

use super::{CarrierPhaseObs, IonoCoefficients, ObservationEpoch};
use crate::ephemeris::{EphemerisRecord, EphemerisStore, Orbit};
use crate::gnss::{Band, Constellation, SatId};
use crate::time::{leap_seconds, Calendar, GnssTime, BDT_TO_GPST_SECONDS, BDT_WEEK_OFFSET};

#[derive(Debug, Clone, Default)]
pub struct ObsWriterHeader {
    pub marker_name: String,
    pub approx_position: Option<[f64; 3]>,
    pub interval: Option<f64>,
    pub glonass_channels: BTreeMap<SatId, i8>,
}

fn header_line(w: &mut impl Write, content: &str, label: &str) -> io::Result<()> {
    writeln!(w, "{content:<60}{label}")
}

/// Fortran D19.12 representation, e.g. `-8.397013880310D-04`.
pub(crate) fn fmt_d19(v: f64) -> String {
    let s = format!("{v:.12E}");
    let (mantissa, exp) = s.split_once('E').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    format!("{:>19}", format!("{mantissa}D{exp:+03}"))
}

/// Observation types emitted for each constellation: C, L, D, S of every
/// signal code in use, L1-class codes first.
fn obs_types(epochs: &[ObservationEpoch]) -> BTreeMap<Constellation, Vec<String>> {
    let mut codes: BTreeMap<Constellation, BTreeSet<(Band, String)>> = BTreeMap::new();
    for o in epochs.iter().flat_map(|e| e.obs.iter()) {
        codes
            .entry(o.sat.constellation)
            .or_default()
            .insert((o.band, o.code.clone()));
    }
    codes
        .into_iter()
        .map(|(c, set)| {
            let types = set
                .iter()
                .flat_map(|(_, code)| ["C", "L", "D", "S"].map(|t| format!("{t}{code}")))
                .collect();
            (c, types)
        })
        .collect()
}

fn obs_value(o: &CarrierPhaseObs, ty: char) -> (Option<f64>, u8) {
    match ty {
        'C' => (o.pseudorange, 0),
        'L' => (o.phase, o.lli_flags),
        'D' => (o.doppler, 0),
        'S' => (o.snr, 0),
        _ => (None, 0),
    }
}

/// Writes a RINEX 3.04 observation file with epochs tagged in GPS time.
pub fn write_obs<W: Write>(mut w: W, header: &ObsWriterHeader, epochs: &[ObservationEpoch]) -> io::Result<()> {
    let types = obs_types(epochs);
    header_line(
        &mut w,
        "     3.04           OBSERVATION DATA    M: MIXED",
        "RINEX VERSION / TYPE",
    )?;
    header_line(&mut w, "gnss-odometry", "PGM / RUN BY / DATE")?;
    header_line(&mut w, &header.marker_name, "MARKER NAME")?;
    if let Some(p) = header.approx_position {
        header_line(
            &mut w,
            &format!("{:14.4}{:14.4}{:14.4}", p[0], p[1], p[2]),
            "APPROX POSITION XYZ",
        )?;
    }
    for (c, list) in &types {
        for (k, chunk) in list.chunks(13).enumerate() {
            let mut s = if k == 0 {
                format!("{}  {:3}", c.rinex_char(), list.len())
            } else {
                "      ".to_string()
            };
            for t in chunk {
                s += &format!(" {t}");
            }
            header_line(&mut w, &s, "SYS / # / OBS TYPES")?;
        }
    }
    if let Some(dt) = header.interval {
        header_line(&mut w, &format!("{dt:10.3}"), "INTERVAL")?;
    }
    if !header.glonass_channels.is_empty() {
        let entries: Vec<_> = header.glonass_channels.iter().collect();
        for (k, chunk) in entries.chunks(8).enumerate() {
            let mut s = if k == 0 {
                format!("{:3} ", entries.len())
            } else {
                "    ".to_string()
            };
            for (sat, ch) in chunk {
                s += &format!("{sat} {ch:2} ");
            }
            header_line(&mut w, &s, "GLONASS SLOT / FRQ #")?;
        }
    }
    if let Some(first) = epochs.first() {
        let c = first.time.to_calendar();
        header_line(
            &mut w,
            &format!(
                "  {:4}{:6}{:6}{:6}{:6}{:13.7}     GPS",
                c.year, c.month, c.day, c.hour, c.minute, c.second
            ),
            "TIME OF FIRST OBS",
        )?;
    }
    header_line(&mut w, "", "END OF HEADER")?;

    for epoch in epochs {
        let sats = epoch.satellites();
        let c = epoch.time.to_calendar();
        writeln!(
            w,
            "> {:4} {:02} {:02} {:02} {:02}{:11.7}  0{:3}",
            c.year,
            c.month,
            c.day,
            c.hour,
            c.minute,
            c.second,
            sats.len()
        )?;
        for sat in sats {
            let mut line = sat.to_string();
            for ty in &types[&sat.constellation] {
                let kind = ty.chars().next().expect("type letter");
                let code = &ty[1..3];
                let o = epoch.obs.iter().find(|o| o.sat == sat && o.code == code);
                match o.map(|o| obs_value(o, kind)) {
                    Some((Some(v), lli)) => {
                        line += &format!("{v:14.3}");
                        line.push(if lli > 0 { char::from(b'0' + lli % 10) } else { ' ' });
                        line.push(' ');
                    }
                    _ => line += &" ".repeat(16),
                }
            }
            writeln!(w, "{}", line.trim_end())?;
        }
    }
    Ok(())
}

fn nav_epoch(sat: SatId, c: &Calendar) -> String {
    format!(
        "{sat} {:4} {:02} {:02} {:02} {:02} {:02}",
        c.year,
        c.month,
        c.day,
        c.hour,
        c.minute,
        c.second.round() as u32
    )
}

fn nav_rows(w: &mut impl Write, first: &str, d: &[f64]) -> io::Result<()> {
    let mut line = first.to_string();
    for v in &d[..3] {
        line += &fmt_d19(*v);
    }
    writeln!(w, "{line}")?;
    for row in d[3..].chunks(4) {
        let mut line = "    ".to_string();
        for v in row {
            line += &fmt_d19(*v);
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

fn write_record(w: &mut impl Write, rec: &EphemerisRecord) -> io::Result<()> {
    let c = &rec.clock;
    match &rec.orbit {
        Orbit::Glonass(g) => {
            let utc = rec.toc - gps_minus_utc(rec.toc);
            let km = 1e-3;
            let d = [
                c.af0,
                c.af1,
                rec.iod,
                g.pos[0] * km,
                g.vel[0] * km,
                g.acc[0] * km,
                rec.health as f64,
                g.pos[1] * km,
                g.vel[1] * km,
                g.acc[1] * km,
                g.freq_channel as f64,
                g.pos[2] * km,
                g.vel[2] * km,
                g.acc[2] * km,
                0.0,
            ];
            nav_rows(w, &nav_epoch(rec.sat, &utc.to_calendar()), &d)
        }
        Orbit::Kepler(k) => {
            let (toc, week, sow, extra) = match rec.sat.constellation {
                Constellation::BeiDou => {
                    let toe = rec.toe - BDT_TO_GPST_SECONDS;
                    (
                        (rec.toc - BDT_TO_GPST_SECONDS).to_calendar(),
                        toe.week() - BDT_WEEK_OFFSET,
                        toe.tow(),
                        [rec.tgd, rec.tgd_l2],
                    )
                }
                Constellation::Galileo => (rec.toc.to_calendar(), rec.toe.week(), rec.toe.tow(), [rec.tgd, rec.tgd]),
                _ => (rec.toc.to_calendar(), rec.toe.week(), rec.toe.tow(), [rec.tgd, rec.iod]),
            };
            let data_source = if rec.sat.constellation == Constellation::Galileo {
                517.0
            } else {
                0.0
            };
            let d = [
                c.af0,
                c.af1,
                c.af2,
                rec.iod,
                k.crs,
                k.delta_n,
                k.m0,
                k.cuc,
                k.e,
                k.cus,
                k.sqrt_a,
                sow,
                k.cic,
                k.omega0,
                k.cis,
                k.i0,
                k.crc,
                k.omega,
                k.omega_dot,
                k.idot,
                data_source,
                week as f64,
                0.0,
                2.0,
                rec.health as f64,
                extra[0],
                extra[1],
                sow,
                4.0,
            ];
            nav_rows(w, &nav_epoch(rec.sat, &toc), &d)
        }
    }
}

fn gps_minus_utc(t: GnssTime) -> f64 {
    let c = t.to_calendar();
    leap_seconds(c.year, c.month, c.day)
}

/// Writes a RINEX 3.04 mixed navigation file.
pub fn write_nav<W: Write>(mut w: W, store: &EphemerisStore, iono: &IonoCoefficients) -> io::Result<()> {
    header_line(
        &mut w,
        "     3.04           N: GNSS NAV DATA    M: MIXED",
        "RINEX VERSION / TYPE",
    )?;
    header_line(&mut w, "gnss-odometry", "PGM / RUN BY / DATE")?;
    if iono.present {
        for (name, v) in [("GPSA", &iono.alpha), ("GPSB", &iono.beta)] {
            let s = format!(
                "{name} {}{}{}{}",
                fmt_d12(v[0]),
                fmt_d12(v[1]),
                fmt_d12(v[2]),
                fmt_d12(v[3])
            );
            header_line(&mut w, &s, "IONOSPHERIC CORR")?;
        }
    }
    if let Some(rec) = store.iter().next() {
        header_line(&mut w, &format!("{:6}", gps_minus_utc(rec.toc) as i32), "LEAP SECONDS")?;
    }
    header_line(&mut w, "", "END OF HEADER")?;
    for rec in store.iter() {
        write_record(&mut w, rec)?;
    }
    Ok(())
}

/// D12.4 as used by the ionosphere header lines.
fn fmt_d12(v: f64) -> String {
    let s = format!("{v:.4E}");
    let (mantissa, exp) = s.split_once('E').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    format!("{:>12}", format!("{mantissa}D{exp:+03}"))
}
