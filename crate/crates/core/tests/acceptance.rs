//! Acceptance criteria. Each test writes one `[PASS]`/`[FAIL]` line to
//! stderr (unbuffered by the test harness) and then asserts the criterion.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gnss_odometry::atmosphere::klobuchar_delay;
use gnss_odometry::coords::ecef_to_geodetic;
use gnss_odometry::eval::{ate, compare_slips, slip_events_by_time};
use gnss_odometry::gnss::{wavelength, Band, Constellation, SatId};
use gnss_odometry::odometry::{
    build_graph, estimate_trajectory, read_trajectory_csv, EstimateResult, Method, MethodConfig, Session, Trajectory,
};
use gnss_odometry::rinex::{parse_nav, parse_obs, IonoCoefficients};
use gnss_odometry::sim::{scenario_low_elevation_slips, scenario_static_clean, simulate, Simulation, SlipSpec};
use gnss_odometry::solver::{
    huber_weight, jacobian_check, optimize, Factor, FactorGraph, LinearModel, PriorModel, SolverOptions, Values,
    VariableKey, HUBER_C,
};
use gnss_odometry::tdcp::build_tdcp;
use gnss_odometry::time::GnssTime;

fn report(id: &str, pass: bool, detail: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr().lock(), "[{tag}] criterion {id}: {detail}");
}

fn skip(id: &str, detail: &str) {
    let _ = writeln!(std::io::stderr().lock(), "[SKIP] criterion {id}: {detail}");
}

fn session(sim: &Simulation) -> Session {
    Session::new(sim.epochs.clone(), sim.store.clone(), sim.iono)
}

fn config(sim: &Simulation, method: Method) -> MethodConfig {
    let cfg = MethodConfig::for_method(method);
    if sim.atmosphere {
        cfg
    } else {
        cfg.without_atmosphere()
    }
}

fn truth_trajectory(sim: &Simulation) -> Trajectory {
    Trajectory {
        times: sim.truth.times.clone(),
        positions: sim.truth.positions.clone(),
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn criterion_1_closed_loop_exactness() {
    let ((sim, res), elapsed) = timed(|| {
        let sim = simulate(&scenario_static_clean()).unwrap();
        let res = estimate_trajectory(&session(&sim), &config(&sim, Method::CycleSlipEstimation)).unwrap();
        (sim, res)
    });
    let pos_err = res
        .trajectory
        .positions
        .iter()
        .zip(&sim.truth.positions)
        .map(|(p, t)| (p - t).norm())
        .fold(0.0, f64::max);
    let slip_err = res
        .slips
        .values()
        .flat_map(|s| s.values.iter())
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    let sats = sim.epochs[0].satellites().len();
    let pass =
        sats == 8 && sim.epochs.len() == 100 && pos_err < 1e-6 && slip_err < 1e-6 && elapsed < Duration::from_secs(10);
    report(
        "1 (closed-loop exactness)",
        pass,
        format!(
            "{sats} satellites, {} epochs: max position error {pos_err:.3e} m, max |slip| {slip_err:.3e} cycles, {:.2} s",
            sim.epochs.len(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

fn slip_errors(sim: &Simulation, res: &EstimateResult) -> (bool, usize) {
    let truth = slip_events_by_time(&sim.truth.slips, &sim.truth.times, Band::L1);
    let cmp = compare_slips(&res.slips, &truth);
    let exact = cmp.iter().filter(|c| c.rounded_exact == Some(true)).count();
    (exact == cmp.len() && !cmp.is_empty(), cmp.len())
}

#[test]
fn criterion_2_slip_recovery() {
    let scen = scenario_low_elevation_slips();
    let ((sim, res), elapsed) = timed(|| {
        let sim = simulate(&scen).unwrap();
        let res = estimate_trajectory(&session(&sim), &config(&sim, Method::CycleSlipEstimation)).unwrap();
        (sim, res)
    });
    let mut injected: Vec<String> = scen
        .slips
        .iter()
        .map(|s| format!("{}@{}:{:+}", s.sat, s.epoch, s.cycles))
        .collect();
    let mut detected: Vec<String> = res
        .report
        .detected_slips
        .iter()
        .map(|d| format!("{}@{}:{:+}", d.sat, d.epoch, d.rounded.unwrap_or(0)))
        .collect();
    injected.sort();
    detected.sort();
    let (exact, n) = slip_errors(&sim, &res);
    let a = exact && injected == detected;
    let ate = ate(&res.trajectory, &truth_trajectory(&sim)).unwrap();
    let b = ate.rms <= 0.01;
    let fast = elapsed < Duration::from_secs(120);
    report(
        "2a (rounded slips equal injected integers)",
        a,
        format!("injected {injected:?}, detected {detected:?}, {n} chains compared"),
    );
    report(
        "2b (trajectory RMS <= 1 cm)",
        b && fast,
        format!(
            "ATE RMS {:.2} mm, max {:.2} mm over {} epochs, {:.1} s",
            ate.rms * 1e3,
            ate.max * 1e3,
            ate.errors.len(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(a, "slip recovery");
    assert!(b && fast, "rms {} m, {:?}", ate.rms, elapsed);
}

#[test]
fn criterion_3_method_ordering() {
    let base = scenario_low_elevation_slips();
    let mut rms: BTreeMap<Method, Vec<f64>> = BTreeMap::new();
    for k in 0..10 {
        let mut scen = base.clone();
        scen.seed = base.seed + k;
        let sim = simulate(&scen).unwrap();
        let s = session(&sim);
        let truth = truth_trajectory(&sim);
        for m in Method::ALL {
            let res = estimate_trajectory(&s, &config(&sim, m)).unwrap();
            rms.entry(m)
                .or_default()
                .push(ate(&res.trajectory, &truth).unwrap().rms);
        }
    }
    let per_seed: Vec<String> = (0..10)
        .map(|i| {
            let v: Vec<String> = Method::ALL.iter().map(|m| format!("{:.2}", rms[m][i] * 1e3)).collect();
            v.join("/")
        })
        .collect();
    let med: BTreeMap<Method, f64> = rms.iter_mut().map(|(m, v)| (*m, median(v))).collect();
    let ours = med[&Method::CycleSlipEstimation];
    let pass = ours <= med[&Method::HuberBaseline] && ours <= med[&Method::SwitchableBaseline];
    report(
        "3 (method ordering, median ATE over 10 seeds)",
        pass,
        format!(
            "median RMS slip {:.2} mm, huber {:.2} mm, switchable {:.2} mm; per seed slip/huber/switchable mm {per_seed:?}",
            ours * 1e3,
            med[&Method::HuberBaseline] * 1e3,
            med[&Method::SwitchableBaseline] * 1e3
        ),
    );
    assert!(pass, "{med:?}");
}

/// Random linear graph with dense blocks and full information matrices.
fn random_linear_graph(seed: u64) -> (FactorGraph, Values, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 12;
    let dims: Vec<usize> = (0..n).map(|_| rng.random_range(1..=4)).collect();
    let mut g = FactorGraph::new();
    let mut init = Values::new();
    for (i, d) in dims.iter().enumerate() {
        let k = VariableKey::State(i as u32);
        init.insert(k, DVector::from_fn(*d, |_, _| rng.random_range(-10.0..10.0)));
        let target = DVector::from_fn(*d, |_, _| rng.random_range(-1.0..1.0));
        let sigma = rng.random_range(0.5..5.0);
        g.add(
            Factor::new(
                vec![k],
                Arc::new(PriorModel { target }),
                DMatrix::identity(*d, *d) / (sigma * sigma),
            )
            .unwrap(),
        );
    }
    for _ in 0..40 {
        let m = rng.random_range(1..=3);
        let a = rng.random_range(0..n);
        let b = (a + rng.random_range(1..n)) % n;
        let blocks = vec![
            DMatrix::from_fn(m, dims[a], |_, _| rng.random_range(-3.0..3.0)),
            DMatrix::from_fn(m, dims[b], |_, _| rng.random_range(-3.0..3.0)),
        ];
        let rhs = DVector::from_fn(m, |_, _| rng.random_range(-5.0..5.0));
        let l = DMatrix::from_fn(m, m, |r, c| match r.cmp(&c) {
            std::cmp::Ordering::Equal => rng.random_range(0.5..2.0),
            std::cmp::Ordering::Greater => rng.random_range(-0.5..0.5),
            std::cmp::Ordering::Less => 0.0,
        });
        g.add(
            Factor::new(
                vec![VariableKey::State(a as u32), VariableKey::State(b as u32)],
                Arc::new(LinearModel { a: blocks, b: rhs }),
                &l * l.transpose(),
            )
            .unwrap(),
        );
    }
    (g, init, dims)
}

/// Dense normal equations Σ JᵀΩJ δ = −Σ JᵀΩr at `values`, solved by LU.
fn dense_normal_solution(g: &FactorGraph, values: &Values) -> Values {
    let keys: Vec<VariableKey> = values.map.keys().copied().collect();
    let mut offset = BTreeMap::new();
    let mut n = 0;
    for k in &keys {
        offset.insert(*k, n);
        n += values.map[k].len();
    }
    let mut h = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for f in &g.factors {
        let inputs: Vec<&DVector<f64>> = f.keys.iter().map(|k| &values.map[k]).collect();
        let r = f.model.residual(&inputs);
        let jac = f.model.jacobians(&inputs);
        let omega = f.sqrt_info.transpose() * &f.sqrt_info;
        for (ka, ja) in f.keys.iter().zip(&jac) {
            let oa = offset[ka];
            let g_a = -(ja.transpose() * &omega * &r);
            let mut seg = rhs.rows_mut(oa, ja.ncols());
            seg += g_a;
            for (kb, jb) in f.keys.iter().zip(&jac) {
                let ob = offset[kb];
                let block = ja.transpose() * &omega * jb;
                let mut v = h.view_mut((oa, ob), (ja.ncols(), jb.ncols()));
                v += block;
            }
        }
    }
    let delta = h.lu().solve(&rhs).expect("nonsingular");
    let mut out = values.clone();
    for k in &keys {
        let v = out.map.get_mut(k).unwrap();
        let len = v.len();
        *v += delta.rows(offset[k], len);
    }
    out
}

fn relative_difference(a: &Values, b: &Values) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (k, va) in &a.map {
        num += (va - &b.map[k]).norm_squared();
        den += b.map[k].norm_squared();
    }
    (num / den.max(1e-300)).sqrt()
}

#[test]
fn criterion_4_solver_correctness() {
    let mut worst_rel: f64 = 0.0;
    let mut iterations = Vec::new();
    for seed in 0..5 {
        let (g, init, _) = random_linear_graph(seed);
        let sol = optimize(&g, &init, &SolverOptions::default()).unwrap();
        iterations.push(sol.iterations);
        worst_rel = worst_rel.max(relative_difference(&sol.values, &dense_normal_solution(&g, &init)));
    }

    // The cycle-slip graph is linear in its variables as well.
    let mut scen = scenario_static_clean();
    scen.duration_s = 30.0;
    scen.noise.phase_sigma_m = 0.003;
    scen.noise.pseudorange_sigma_m = 0.5;
    let sim = simulate(&scen).unwrap();
    let s = session(&sim);
    let built = build_graph(&s, &config(&sim, Method::CycleSlipEstimation)).unwrap();
    let sol = optimize(&built.graph, &built.initial, &SolverOptions::default()).unwrap();
    iterations.push(sol.iterations);
    let odo_rel = relative_difference(&sol.values, &dense_normal_solution(&built.graph, &built.initial));
    worst_rel = worst_rel.max(odo_rel);

    // Jacobians of every factor of every method's graph, at perturbed values.
    let mut worst_jac: f64 = 0.0;
    let mut checked = 0;
    for m in Method::ALL {
        let built = build_graph(&s, &config(&sim, m)).unwrap();
        let mut v = built.initial.clone();
        for (k, x) in v.map.iter_mut() {
            match k {
                VariableKey::CycleSlip(..) => x[0] = 0.35,
                VariableKey::Switch(_) => x[0] = 0.65,
                VariableKey::State(i) => {
                    for (c, xc) in x.iter_mut().enumerate() {
                        *xc += 0.01 * (*i as f64 + c as f64);
                    }
                }
            }
        }
        for f in &built.graph.factors {
            worst_jac = worst_jac.max(jacobian_check(f, &v, 1e-6));
            checked += 1;
        }
    }
    let (ok_iter, ok_rel, ok_jac) = (iterations.iter().all(|i| *i == 1), worst_rel <= 1e-9, worst_jac <= 1e-5);
    report(
        "4 (solver correctness)",
        ok_iter && ok_rel && ok_jac,
        format!(
            "iterations {iterations:?}; max relative deviation from dense normal equations {worst_rel:.2e} \
             (odometry graph {odo_rel:.2e}); {checked} factor Jacobians, worst FD deviation {worst_jac:.2e}"
        ),
    );
    assert!(ok_iter && ok_rel && ok_jac);
}

#[test]
fn criterion_5_huber_arithmetic() {
    let w = huber_weight(2.690, HUBER_C);
    let pass = w == 0.5 && HUBER_C == 1.345;
    report("5 (Huber weight)", pass, format!("w(2.690; c = {HUBER_C}) = {w}"));
    assert!(pass);
}

#[test]
fn criterion_6_slip_magnitude() {
    let sat = SatId::gps(9);
    let k = 50;
    let mut scen = scenario_static_clean();
    let clean = simulate(&scen).unwrap();
    scen.slips.push(SlipSpec {
        sat,
        epoch: k,
        cycles: 1,
        band: Band::L1,
    });
    let slipped = simulate(&scen).unwrap();
    let p = clean.truth.positions[k];
    let tdcp = |sim: &Simulation| {
        build_tdcp(
            &sim.epochs[k - 1],
            &sim.epochs[k],
            &sim.store,
            &sim.iono,
            &p,
            &p,
            5f64.to_radians(),
        )
        .into_iter()
        .find(|m| m.sat == sat && m.band == Band::L1)
        .expect("satellite tracked")
        .corrected
    };
    let jump = tdcp(&slipped) - tdcp(&clean);
    let lambda = wavelength(Constellation::Gps, Band::L1, None).unwrap();
    let pass = (jump - 0.19029).abs() <= 1e-4;
    report(
        "6 (+1 cycle L1 slip in TDCP)",
        pass,
        format!("TDCP jump {jump:.6} m, L1 wavelength {lambda:.6} m"),
    );
    assert!(pass);
}

#[test]
fn criterion_7_klobuchar_floor() {
    let coef = IonoCoefficients {
        alpha: [0.0; 4],
        beta: [0.0; 4],
        present: true,
    };
    let geo = ecef_to_geodetic(&Vector3::new(-3_961_904.0, 3_348_993.0, 3_698_211.0));
    let mut worst: f64 = 0.0;
    let mut value = 0.0;
    for tow in [0.0, 21_600.0, 50_400.0, 72_000.0] {
        let d = klobuchar_delay(GnssTime::new(2300, tow), &geo, 0.0, std::f64::consts::FRAC_PI_2, &coef);
        worst = worst.max((d - 1.4996).abs());
        value = d;
    }
    let pass = worst <= 0.001;
    report(
        "7 (Klobuchar zero-coefficient zenith floor)",
        pass,
        format!("delay {value:.5} m, worst deviation from 1.4996 m {worst:.5} m"),
    );
    assert!(pass);
}

/// Real static data: set GNSS_ODO_REAL_DATA to a directory holding obs.rnx,
/// nav.rnx and truth.csv (columns tow, x, y, z; optional week).
#[test]
fn criterion_8_real_data_regression() {
    let Some(dir) = std::env::var_os("GNSS_ODO_REAL_DATA").map(PathBuf::from) else {
        skip(
            "8 (real-data regression)",
            "GNSS_ODO_REAL_DATA not set; environment-dependent, not run",
        );
        return;
    };
    let open = |name: &str| std::fs::File::open(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
    let nav = parse_nav(open("nav.rnx")).unwrap();
    let obs = parse_obs(open("obs.rnx")).unwrap();
    let truth = read_trajectory_csv(&dir.join("truth.csv")).unwrap();
    let s = Session::new(obs.epochs, nav.store, nav.iono);
    let res = estimate_trajectory(&s, &MethodConfig::for_method(Method::CycleSlipEstimation)).unwrap();
    let a = ate(&res.trajectory, &truth).unwrap();
    let bound = 2.0 * 0.0368;
    let pass = a.rms <= bound;
    report(
        "8 (real-data regression)",
        pass,
        format!(
            "ATE RMS {:.2} cm, max {:.2} cm (bound {:.2} cm)",
            a.rms * 100.0,
            a.max * 100.0,
            bound * 100.0
        ),
    );
    assert!(pass);
}
