#![allow(dead_code)]

use gfcsim::pinn::features::N_FEATURES;
use gfcsim::pinn::loss::LossWeights;
use gfcsim::pinn::train::{backward, flatten, objective, unflatten, Batch};
use gfcsim::pinn::PinnModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random batch of `windows` consecutive-sample windows. Raw currents are
/// scaled so a share of samples crosses the current hinge.
pub fn random_batch(model: &PinnModel, windows: usize, len: usize, rng: &mut ChaCha8Rng) -> Batch {
    let mut b = Batch::default();
    for _ in 0..windows {
        let x: Vec<[f64; N_FEATURES]> = (0..len)
            .map(|_| {
                let mut f: [f64; N_FEATURES] = std::array::from_fn(|_| rng.gen_range(-2.0..2.0));
                for i in 0..3 {
                    f[i] *= 400.0;
                }
                f
            })
            .collect();
        let y: Vec<[f64; 2]> = (0..len).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        b.push_window(model, &x, &y);
    }
    b
}

/// Worst relative error between backpropagated and central-difference
/// gradients over `batches` random batches of a small network.
pub fn gradient_oracle_error(batches: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = LossWeights {
        lambda_pde: 0.3,
        lambda_current: 1.0,
        lambda_rocof: 0.1,
        lambda_rocov: 0.1,
    };
    let dt = 0.01;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..batches {
        let mut model = PinnModel::new(N_FEATURES, &[4, 4, 4], 2, seed + k as u64);
        for s in model.x_std.iter_mut().take(3) {
            *s = 400.0;
        }
        let batch = random_batch(&model, 3, 6, &mut rng);
        let (_, g) = backward(&model, &batch, &w, dt, false).expect("backward");
        let analytic = g.flat();
        let theta = flatten(&model.layers);
        let mut numeric = vec![0.0; theta.len()];
        for i in 0..theta.len() {
            let mut p = theta.clone();
            p[i] = theta[i] + h;
            unflatten(&mut model.layers, &p);
            let up = objective(&model, &batch, &w, dt, false);
            p[i] = theta[i] - h;
            unflatten(&mut model.layers, &p);
            let dn = objective(&model, &batch, &w, dt, false);
            numeric[i] = (up - dn) / (2.0 * h);
        }
        unflatten(&mut model.layers, &theta);
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(1e-300));
    }
    worst
}

/// Largest relative RMS difference between two runs of the same scenario,
/// over each converter's voltage magnitude, DC voltage, switch current and
/// active power.
pub fn step_halving_rms(a: &gfcsim::network::RunRecord, b: &gfcsim::network::RunRecord) -> f64 {
    assert_eq!(a.rows.len(), b.rows.len());
    let sig = |s: &gfcsim::network::GfcSample| {
        [
            s.features[7].hypot(s.features[8]),
            s.v_dc,
            s.features[3].hypot(s.features[4]),
            s.features[14],
        ]
    };
    let mut worst: f64 = 0.0;
    for k in 0..a.n_gfc() {
        for j in 0..4 {
            let (mut d2, mut r2) = (0.0, 0.0);
            for (ra, rb) in a.rows.iter().zip(&b.rows) {
                let (x, y) = (sig(&ra.gfc[k])[j], sig(&rb.gfc[k])[j]);
                d2 += (x - y) * (x - y);
                r2 += x * x;
            }
            worst = worst.max((d2 / r2).sqrt());
        }
    }
    worst
}

/// Islanded feeder started at its droop equilibrium.
pub fn islanded(mg_load: f64) -> gfcsim::network::Simulator {
    use gfcsim::control::ControlGains;
    use gfcsim::converter::ConverterParams;
    use gfcsim::network::engine::InitOptions;
    use gfcsim::network::{default_topology, ControllerKind, Simulator};
    let mut model = default_topology().build().unwrap();
    model.set_mg_load(mg_load).unwrap();
    for cb in ["CB2", "CB3", "CB4", "CB5"] {
        model.apply_breaker(cb, true).unwrap();
    }
    model.apply_breaker("CB1", false).unwrap();
    let params = ConverterParams::default();
    let gains = ControlGains::for_params(&params);
    Simulator::new(model, params, gains, ControllerKind::Droop, 20e-6, 0.01, 0.1, &InitOptions::default()).unwrap()
}

/// Largest relative change of the measured operating point over `steps`
/// steps from the islanded equilibrium, and the power balance error after.
pub fn equilibrium_drift(mg_load: f64, steps: usize) -> (f64, f64) {
    use gfcsim::network::engine::measurements_of;
    use gfcsim::network::Simulator;
    let mut sim = islanded(mg_load);
    let snap = |s: &Simulator| -> Vec<f64> {
        (0..s.state.gfcs.len())
            .flat_map(|k| {
                let m = measurements_of(s, k);
                let c = s.state.gfcs[k].conv;
                [m.v.d, m.v.q, m.i_s.d, m.i_s.q, m.p, m.q, c.v_d, c.i_tau]
            })
            .collect()
    };
    let x0 = snap(&sim);
    for _ in 0..steps {
        sim.step().unwrap();
    }
    let x1 = snap(&sim);
    let drift = x0
        .iter()
        .zip(&x1)
        .map(|(a, b)| (a - b).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max);
    let (p_in, p_out) = sim.power_balance();
    (drift, (p_in - p_out).abs() / p_in.abs())
}

/// Worst relative RMS change of the standard 9 s droop run when the step is halved.
pub fn step_halving_error(mg_load: f64) -> f64 {
    use gfcsim::harness::scenario::ScenarioSpec;
    use gfcsim::network::{run_scenario, ControllerKind};
    let coarse = ScenarioSpec::standard("halving", mg_load);
    let fine = ScenarioSpec {
        dt: coarse.dt / 2.0,
        ..coarse.clone()
    };
    let net = coarse.network().unwrap();
    let a = run_scenario(&coarse, &net, &ControllerKind::Droop).unwrap();
    let b = run_scenario(&fine, &net, &ControllerKind::Droop).unwrap();
    step_halving_rms(&a, &b)
}

/// Worst relative error of abc→αβ0→abc and αβ0→dq0→αβ0 over random vectors.
pub fn frame_round_trip_error(n: usize, seed: u64) -> f64 {
    use gfcsim::frames::{ab0_to_abc, ab0_to_dq0, abc_to_ab0, dq0_to_ab0, AlphaBeta0, ThreePhase};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let x = ThreePhase::new(rng.gen_range(-1e3..1e3), rng.gen_range(-1e3..1e3), rng.gen_range(-1e3..1e3));
        let y = ab0_to_abc(abc_to_ab0(x));
        let scale = x.a.abs().max(x.b.abs()).max(x.c.abs());
        for (p, q) in [(x.a, y.a), (x.b, y.b), (x.c, y.c)] {
            worst = worst.max((p - q).abs() / scale);
        }
        let v = AlphaBeta0::new(rng.gen_range(-1e3..1e3), rng.gen_range(-1e3..1e3), rng.gen_range(-1e3..1e3));
        let th = rng.gen_range(-10.0..10.0);
        let w = dq0_to_ab0(ab0_to_dq0(v, th), th);
        worst = worst.max((v - w).norm() / v.norm());
    }
    worst
}
