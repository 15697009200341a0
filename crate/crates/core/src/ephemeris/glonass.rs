use nalgebra::Vector3;

use super::{EphemerisRecord, GlonassState, SatelliteState};
use crate::time::GnssTime;

const MU_GLO: f64 = 3.986_004_4e14;
const J2_GLO: f64 = 1.082_625_7e-3;
const RE_GLO: f64 = 6_378_136.0;
const OMEGA_E_GLO: f64 = 7.292_115e-5;

/// Largest RK4 step used when propagating a broadcast state vector (s).
pub const GLONASS_MAX_STEP: f64 = 60.0;

type State = [f64; 6];

/// Equations of motion in the rotating PZ-90 frame: central term, J2, the
/// centrifugal and Coriolis terms, plus the broadcast luni-solar acceleration.
fn derivative(x: &State, acc: &[f64; 3]) -> State {
    let r2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
    let r3 = r2 * r2.sqrt();
    let omg2 = OMEGA_E_GLO * OMEGA_E_GLO;
    let a = 1.5 * J2_GLO * MU_GLO * RE_GLO * RE_GLO / r2 / r3;
    let b = 5.0 * x[2] * x[2] / r2;
    let c = -MU_GLO / r3 - a * (1.0 - b);
    [
        x[3],
        x[4],
        x[5],
        (c + omg2) * x[0] + 2.0 * OMEGA_E_GLO * x[4] + acc[0],
        (c + omg2) * x[1] - 2.0 * OMEGA_E_GLO * x[3] + acc[1],
        (c - 2.0 * a) * x[2] + acc[2],
    ]
}

fn axpy(x: &State, k: &State, h: f64) -> State {
    let mut out = *x;
    for i in 0..6 {
        out[i] += k[i] * h;
    }
    out
}

fn rk4_step(x: &State, acc: &[f64; 3], h: f64) -> State {
    let k1 = derivative(x, acc);
    let k2 = derivative(&axpy(x, &k1, h / 2.0), acc);
    let k3 = derivative(&axpy(x, &k2, h / 2.0), acc);
    let k4 = derivative(&axpy(x, &k3, h), acc);
    let mut out = *x;
    for i in 0..6 {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Propagates a broadcast state vector by `dt` seconds (either sign) with RK4
/// steps no longer than `max_step`. Returns (position, velocity).
pub fn propagate_glonass(g: &GlonassState, dt: f64, max_step: f64) -> (Vector3<f64>, Vector3<f64>) {
    let mut x: State = [g.pos[0], g.pos[1], g.pos[2], g.vel[0], g.vel[1], g.vel[2]];
    let h = max_step.abs().max(1e-3);
    let steps = (dt.abs() / h).ceil() as usize;
    if steps > 0 {
        let step = dt / steps as f64;
        for _ in 0..steps {
            x = rk4_step(&x, &g.acc, step);
        }
    }
    (Vector3::new(x[0], x[1], x[2]), Vector3::new(x[3], x[4], x[5]))
}

pub(super) fn evaluate(rec: &EphemerisRecord, g: &GlonassState, t: GnssTime, max_step: f64) -> SatelliteState {
    let (pos, vel) = propagate_glonass(g, t - rec.toe, max_step);
    let dt = t - rec.toc;
    let c = &rec.clock;
    SatelliteState {
        pos,
        vel,
        clock_bias: c.af0 + c.af1 * dt + c.af2 * dt * dt,
        clock_drift: c.af1 + 2.0 * c.af2 * dt,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> GlonassState {
        // Typical GLONASS orbit: radius ≈ 25 510 km, speed ≈ 3.95 km/s.
        GlonassState {
            pos: [-14_855_253.9, -1_308_211.9, 20_610_441.4],
            vel: [-1_553.007, -2_670.628, -1_277.247],
            acc: [2.794e-6, 0.0, -1.863e-6],
            freq_channel: 1,
        }
    }

    #[test]
    fn step_size_insensitive() {
        let g = state();
        for dt in [900.0, -900.0, 437.5] {
            let (p60, v60) = propagate_glonass(&g, dt, 60.0);
            let (p10, v10) = propagate_glonass(&g, dt, 10.0);
            assert!((p60 - p10).norm() < 1e-2, "dt {dt}: {}", (p60 - p10).norm());
            assert!((v60 - v10).norm() < 1e-4);
        }
    }

    #[test]
    fn zero_step_is_identity() {
        let g = state();
        let (p, v) = propagate_glonass(&g, 0.0, 60.0);
        assert_eq!(p, Vector3::from(g.pos));
        assert_eq!(v, Vector3::from(g.vel));
    }

    #[test]
    fn forward_then_back() {
        let g = state();
        let (p, v) = propagate_glonass(&g, 600.0, 30.0);
        let fwd = GlonassState {
            pos: p.into(),
            vel: v.into(),
            ..g
        };
        let (p0, _) = propagate_glonass(&fwd, -600.0, 30.0);
        assert!((p0 - Vector3::from(g.pos)).norm() < 1e-3);
    }

    #[test]
    fn velocity_matches_position_rate() {
        let g = state();
        let (pa, _) = propagate_glonass(&g, 299.5, 10.0);
        let (pb, _) = propagate_glonass(&g, 300.5, 10.0);
        let (_, v) = propagate_glonass(&g, 300.0, 10.0);
        assert!(((pb - pa) - v).norm() < 1e-3);
    }
}
