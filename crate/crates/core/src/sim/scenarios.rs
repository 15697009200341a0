use std::collections::BTreeMap;

use crate::coords::{ecef_to_enu_matrix, ecef_to_geodetic};
use crate::gnss::{Constellation, SatId};

use nalgebra::Vector3;

use super::{NoiseSpec, SatelliteSpec, ScenarioConfig, SlipSpec, TrajectorySpec, Waypoint};

/// Names accepted by [`builtin_scenario`].
pub const BUILTIN_SCENARIOS: [&str; 3] = ["static-low-el-slips", "static-clean", "moving"];

pub fn builtin_scenario(name: &str) -> Option<ScenarioConfig> {
    match name {
        "static-low-el-slips" => Some(scenario_low_elevation_slips()),
        "static-clean" => Some(scenario_static_clean()),
        "moving" => Some(scenario_moving()),
        _ => None,
    }
}

fn sat(c: Constellation, prn: u8) -> SatId {
    SatId::new(c, prn).expect("valid PRN")
}

/// Well-spread satellites above 20° elevation.
fn high_sky() -> Vec<SatelliteSpec> {
    use Constellation::*;
    [
        (sat(Gps, 2), 40.0, 75.0, true),
        (sat(Gps, 5), 130.0, 52.0, false),
        (sat(Gps, 7), 220.0, 38.0, true),
        (sat(Gps, 9), 300.0, 47.0, false),
        (sat(Gps, 13), 10.0, 28.0, true),
        (sat(Galileo, 11), 170.0, 62.0, true),
        (sat(Galileo, 24), 260.0, 24.0, false),
    ]
    .into_iter()
    .enumerate()
    .map(|(k, (s, az, el, rising))| {
        let mut spec = SatelliteSpec::look(s, az, el, rising);
        spec.clock_bias_s = 1e-5 * (k as f64 - 3.0);
        spec.clock_drift = 1e-12 * k as f64;
        spec
    })
    .collect()
}

/// Static receiver, ten satellites of which three stay below 15° elevation
/// and carry slips of +1, −2 and +5 cycles; 400 s at 1 Hz, 3 mm phase noise.
pub fn scenario_low_elevation_slips() -> ScenarioConfig {
    let mut satellites = high_sky();
    for (prn, az, el) in [(6, 80.0, 13.0), (17, 190.0, 11.0), (21, 250.0, 14.0)] {
        let mut spec = SatelliteSpec::look(SatId::gps(prn), az, el, false);
        spec.clock_bias_s = -2e-5;
        satellites.push(spec);
    }
    ScenarioConfig {
        name: "static-low-el-slips".into(),
        seed: 42,
        duration_s: 400.0,
        rate_hz: 1.0,
        satellites,
        noise: NoiseSpec {
            phase_sigma_m: 0.003,
            pseudorange_sigma_m: 0.5,
        },
        inter_system_bias_m: BTreeMap::from([(Constellation::Galileo, 4.0)]),
        slips: vec![
            SlipSpec {
                sat: SatId::gps(6),
                epoch: 100,
                cycles: 1,
                band: crate::gnss::Band::L1,
            },
            SlipSpec {
                sat: SatId::gps(17),
                epoch: 200,
                cycles: -2,
                band: crate::gnss::Band::L1,
            },
            SlipSpec {
                sat: SatId::gps(21),
                epoch: 300,
                cycles: 5,
                band: crate::gnss::Band::L1,
            },
        ],
        ..ScenarioConfig::default()
    }
}

/// Static receiver, eight satellites, 100 s, no measurement noise, no slips.
pub fn scenario_static_clean() -> ScenarioConfig {
    let mut satellites = high_sky();
    satellites.push(SatelliteSpec::look(SatId::gps(21), 330.0, 18.0, false));
    ScenarioConfig {
        name: "static-clean".into(),
        seed: 7,
        duration_s: 100.0,
        satellites,
        noise: NoiseSpec {
            phase_sigma_m: 0.0,
            pseudorange_sigma_m: 0.0,
        },
        ..ScenarioConfig::default()
    }
}

/// Receiver driving a 200 m east-north-up polyline over 120 s.
pub fn scenario_moving() -> ScenarioConfig {
    let base = ScenarioConfig::default();
    let TrajectorySpec::Static { position } = base.trajectory else {
        unreachable!("default trajectory is static")
    };
    let origin = Vector3::from(position);
    let to_ecef = ecef_to_enu_matrix(&ecef_to_geodetic(&origin)).transpose();
    let points = [
        (0.0, [0.0, 0.0, 0.0]),
        (40.0, [80.0, 10.0, 0.5]),
        (80.0, [120.0, 70.0, 1.0]),
        (120.0, [100.0, 150.0, 0.0]),
    ]
    .into_iter()
    .map(|(t, enu)| Waypoint {
        t,
        position: (origin + to_ecef * Vector3::from(enu)).into(),
    })
    .collect();
    let mut satellites = high_sky();
    satellites.push(SatelliteSpec::look(SatId::gps(21), 330.0, 14.0, false));
    ScenarioConfig {
        name: "moving".into(),
        seed: 3,
        duration_s: 120.0,
        trajectory: TrajectorySpec::Waypoints { points },
        satellites,
        slips: vec![SlipSpec {
            sat: SatId::gps(21),
            epoch: 60,
            cycles: 3,
            band: crate::gnss::Band::L1,
        }],
        ..base
    }
}
