//! Closed-loop fixed-step simulation of converters and network.
//!
//! The classic cascades are continuous-time: their integrators and droop angle
//! are integrated together with the plant, and the cascade is re-evaluated at
//! every RK4 stage. The neural controller is sampled once per step; its dq
//! command is held and turned with the continuously integrated droop angle.

use super::solver::{CompiledNetwork, NetworkEval};
use super::NetworkModel;
use crate::control::{
    classic_controller_rates, dc_current_reference, droop_frequency, measure, wrap_angle, ControlGains,
    ControllerRates, ControllerState, LocalSignals, Measurements,
};
use crate::converter::{
    converter_derivative, dc_source_current, saturate_modulation, switch_dc_current, ConverterInputs,
    ConverterParams, ConverterState,
};
use crate::frames::{ab0_to_dq0, dq0_to_ab0, instantaneous_pq, AlphaBeta0, Dq0};
use crate::harness::ref11::Ref11Params;
use crate::harness::scenario::{Action, ScenarioSpec};
use crate::pinn::features::{assemble_features, SlopeTracker, N_FEATURES};
use crate::pinn::PinnModel;
use crate::SimError;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;

/// Inner-loop controller used by every converter of a run.
#[derive(Debug, Clone)]
pub enum ControllerKind {
    Droop,
    Ref11(Ref11Params),
    Pinn(Arc<PinnModel>),
}

impl ControllerKind {
    pub fn label(&self) -> &'static str {
        match self {
            ControllerKind::Droop => "droop",
            ControllerKind::Ref11(_) => "ref11",
            ControllerKind::Pinn(_) => "pinn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GfcState {
    pub conv: ConverterState,
    pub ctrl: ControllerState,
    pub gains: ControlGains,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub gfcs: Vec<GfcState>,
    /// Branch then load inductor currents (aggregate amperes).
    pub currents: Vec<[f64; 3]>,
    pub t: f64,
    pub step: u64,
}

/// Neural command held over one step.
#[derive(Debug, Clone, Copy, Default)]
struct Actuation {
    v_star: Dq0,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GfcSample {
    pub features: [f64; N_FEATURES],
    pub v_s_ref: [f64; 2],
    pub v_dc: f64,
    pub i_dc: f64,
    pub f: f64,
    pub v_star: [f64; 2],
    pub theta: f64,
    /// Active-power setpoint in effect, p.u.
    pub p_ref_eff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub t: f64,
    pub gfc: Vec<GfcSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scenario: String,
    pub controller: String,
    pub sample_interval: f64,
    pub rows: Vec<SampleRow>,
    pub diverged: bool,
    pub diverged_at: Option<f64>,
    /// Per converter, largest switch-node current magnitude over all steps.
    pub peak_i_s: Vec<f64>,
    /// Per converter, largest DC source current magnitude over all steps.
    pub peak_i_dc: Vec<f64>,
    pub v_base: f64,
    pub i_peak: f64,
    pub i_ac_max: f64,
    pub i_d_max: f64,
    pub p_ref: f64,
}

impl RunRecord {
    pub fn n_gfc(&self) -> usize {
        self.rows.first().map(|r| r.gfc.len()).unwrap_or(0)
    }
}

pub struct Simulator {
    pub model: NetworkModel,
    pub params: ConverterParams,
    pub state: SystemState,
    net: CompiledNetwork,
    controller: ControllerKind,
    trackers: Vec<SlopeTracker>,
    dt: f64,
    sample_every: u64,
    eval: NetworkEval,
    acts: Vec<Actuation>,
    peak_i_s: Vec<f64>,
    peak_i_dc: Vec<f64>,
}

fn cplx(x: AlphaBeta0) -> Complex64 {
    Complex64::new(x.alpha, x.beta)
}

fn from_cplx(z: Complex64) -> AlphaBeta0 {
    AlphaBeta0::new(z.re, z.im, 0.0)
}

/// Operating point of one module feeding `i_out` at capacitor voltage `v`
/// (both module-scale phasors at t = 0) while rotating at `omega`.
pub fn gfc_equilibrium(
    v: Complex64,
    i_out: Complex64,
    omega: f64,
    gains: &ControlGains,
    params: &ConverterParams,
) -> (ConverterState, ControllerState) {
    let j = Complex64::new(0.0, 1.0);
    let i_s = i_out + j * omega * params.c * v;
    let z = Complex64::new(params.r, omega * params.l);
    let v_s = v + z * i_s;
    let p = 1.5 * (v * i_out.conj()).re;
    let p_s = 1.5 * (v_s * i_s.conj()).re;
    let vr = gains.v_d_ref;
    // k_d (v_r − v_d) + P_ref/v_r + (P_s − P)/v_r − P_s/v_d = 0
    let c0 = gains.p_ref / vr + (p_s - p) / vr;
    let mut v_d = vr;
    for _ in 0..50 {
        let f = gains.k_d * (vr - v_d) + c0 - p_s / v_d;
        let df = -gains.k_d + p_s / (v_d * v_d);
        let step = f / df;
        v_d -= step;
        if step.abs() < 1e-13 * vr {
            break;
        }
    }
    let theta = wrap_angle(v.arg());
    let rot = |x: Complex64| ab0_to_dq0(from_cplx(x), theta);
    let v_star = v_s * (vr / v_d);
    let y_i = rot(v_star - v - z * i_s).scale(1.0 / gains.k_ii);
    let i_x = p_s / v_d;
    let conv = ConverterState {
        v_d,
        i_tau: params.g_d * v_d + i_x,
        i_s: from_cplx(i_s),
        v: from_cplx(v),
    };
    let ctrl = ControllerState {
        y_v: Dq0::default(),
        y_i: Dq0 { zero: 0.0, ..y_i },
        theta,
    };
    (conv, ctrl)
}

/// Options for building an initial state.
#[derive(Debug, Clone, Default)]
pub struct InitOptions {
    /// Per converter, time at which its breaker first closes; its angle is
    /// preset so that it is in phase with its feeder bus at that instant.
    pub sync_at: Vec<Option<f64>>,
}

impl Simulator {
    pub fn new(
        model: NetworkModel,
        params: ConverterParams,
        gains: ControlGains,
        controller: ControllerKind,
        dt: f64,
        sample_interval: f64,
        rocof_window: f64,
        init: &InitOptions,
    ) -> Result<Self, SimError> {
        params.validate()?;
        model.validate()?;
        if !(dt > 0.0 && sample_interval >= dt) {
            return Err(SimError::Config("need 0 < dt <= sample interval".into()));
        }
        let sample_every = (sample_interval / dt).round() as u64;
        if ((sample_every as f64) * dt - sample_interval).abs() > 1e-9 * sample_interval {
            return Err(SimError::Config("sample interval must be a multiple of dt".into()));
        }
        let net = CompiledNetwork::compile(&model)?;
        let n = model.gfcs.len();
        let state = initial_state(&model, &net, &params, &gains, init)?;
        let window = (rocof_window / sample_interval).round() as usize + 1;
        Ok(Self {
            eval: NetworkEval::new(net.n_states(), n, model.buses.len()),
            trackers: (0..n).map(|_| SlopeTracker::new(window.max(2), sample_interval)).collect(),
            model,
            params,
            state,
            net,
            controller,
            dt,
            sample_every,
            acts: vec![Actuation::default(); n],
            peak_i_s: vec![0.0; n],
            peak_i_dc: vec![0.0; n],
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn network(&self) -> &CompiledNetwork {
        &self.net
    }

    fn source_voltage(&self, t: f64) -> AlphaBeta0 {
        let g = &self.model.grid;
        let th = g.omega() * t + g.phase;
        AlphaBeta0::new(g.v_peak() * th.cos(), g.v_peak() * th.sin(), 0.0)
    }

    /// Changes a breaker and rebuilds the network equations.
    pub fn set_breaker(&mut self, id: &str, closed: bool) -> Result<(), SimError> {
        if !self.model.apply_breaker(id, closed)? {
            return Ok(());
        }
        if closed {
            // grid-synchronized references once a converter joins the feeder
            let (w, v) = (self.model.grid.omega(), self.model.grid.v_peak());
            for (k, g) in self.model.gfcs.iter().enumerate() {
                if g.breaker.as_deref() == Some(id) {
                    self.state.gfcs[k].gains.omega_ref = w;
                    self.state.gfcs[k].gains.v_ref = v;
                }
            }
        }
        self.recompile()
    }

    pub fn set_mg_load(&mut self, s: f64) -> Result<(), SimError> {
        self.model.set_mg_load(s)?;
        self.recompile()
    }

    pub fn set_local_load(&mut self, gfc: usize, s: f64) -> Result<(), SimError> {
        self.model.set_local_load(gfc, s)?;
        self.recompile()
    }

    fn recompile(&mut self) -> Result<(), SimError> {
        self.net = CompiledNetwork::compile(&self.model)?;
        self.net.project(&mut self.state.currents);
        Ok(())
    }

    /// Converter inputs and controller rates at one RK4 stage.
    fn stage_inputs(
        &self,
        k: usize,
        c: &ConverterState,
        ctrl: &ControllerState,
        i_out_agg: AlphaBeta0,
    ) -> (ConverterInputs, ControllerRates) {
        let params = &self.params;
        let mut gains = self.state.gfcs[k].gains;
        let i_out = i_out_agg * (1.0 / params.n_modules as f64);
        let (v_star, rates) = match &self.controller {
            ControllerKind::Droop | ControllerKind::Ref11(_) => {
                if let ControllerKind::Ref11(r) = &self.controller {
                    gains.p_ref = r.effective_p_ref(&gains, c.i_s.norm_ab(), params.i_peak());
                }
                let sig = LocalSignals {
                    v: c.v,
                    i: i_out,
                    i_s: c.i_s,
                    v_d: c.v_d,
                };
                let meas = measure(&sig, ctrl.theta, &gains);
                let (out, rates) = classic_controller_rates(&meas, c.i_s, ctrl, &gains, params);
                (out.v_star, rates)
            }
            ControllerKind::Pinn(_) => {
                let p = instantaneous_pq(c.v, i_out).0;
                let rates = ControllerRates {
                    omega: droop_frequency(p, &gains),
                    ..Default::default()
                };
                (self.acts[k].v_star, rates)
            }
        };
        let v_s = dq0_to_ab0(v_star, ctrl.theta);
        let m = saturate_modulation(v_s * (2.0 / gains.v_d_ref), params.m_max);
        let p = instantaneous_pq(c.v, i_out).0;
        let i_x = switch_dc_current(m, c.i_s);
        let inputs = ConverterInputs {
            m,
            i_dc_ref: dc_current_reference(c.v_d, p, i_x, &gains, params),
            i_out,
        };
        (inputs, rates)
    }

    fn derivative(
        &self,
        t: f64,
        conv: &[ConverterState],
        ctrl: &[ControllerState],
        currents: &[[f64; 3]],
        eval: &mut NetworkEval,
        dconv: &mut [ConverterState],
        dctrl: &mut [ControllerRates],
    ) -> Result<(), SimError> {
        let gv: Vec<AlphaBeta0> = conv.iter().map(|c| c.v).collect();
        self.net.eval(currents, &gv, self.source_voltage(t), eval);
        for (k, c) in conv.iter().enumerate() {
            let (inputs, rates) = self.stage_inputs(k, c, &ctrl[k], eval.i_gfc[k]);
            dconv[k] = converter_derivative(c, &inputs, &self.params)?;
            dctrl[k] = rates;
        }
        Ok(())
    }

    /// Advances one step. Returns the sample taken at the step start when the
    /// step index falls on the sampling grid.
    pub fn step(&mut self) -> Result<Option<SampleRow>, SimError> {
        let n = self.state.gfcs.len();
        let dt = self.dt;
        let t0 = self.state.t;
        let conv0: Vec<ConverterState> = self.state.gfcs.iter().map(|g| g.conv).collect();
        let cur0 = self.state.currents.clone();

        let gv: Vec<AlphaBeta0> = conv0.iter().map(|c| c.v).collect();
        let src0 = self.source_voltage(t0);
        let mut eval = std::mem::take(&mut self.eval);
        self.net.eval(&cur0, &gv, src0, &mut eval);

        let sampling = self.state.step.is_multiple_of(self.sample_every);
        let mut row = sampling.then(|| SampleRow {
            t: t0,
            gfc: Vec::with_capacity(n),
        });
        let n_mod = self.params.n_modules as f64;
        for k in 0..n {
            let g = self.state.gfcs[k];
            let sig = LocalSignals {
                v: g.conv.v,
                i: eval.i_gfc[k] * (1.0 / n_mod),
                i_s: g.conv.i_s,
                v_d: g.conv.v_d,
            };
            let vg_bus = eval.v_bus[self.model.gfcs[k].grid_bus];
            let v_g = AlphaBeta0::from_array(vg_bus);
            let (act, sample) = self.control(k, &sig, v_g, sampling)?;
            self.acts[k] = act;
            if let (Some(r), Some(s)) = (row.as_mut(), sample) {
                r.gfc.push(s);
            }
            self.peak_i_s[k] = self.peak_i_s[k].max(g.conv.i_s.norm_ab());
            self.peak_i_dc[k] = self.peak_i_dc[k].max(dc_source_current(g.conv.i_tau, self.params.i_d_max).abs());
        }

        // RK4 with the stage-1 network evaluation reused
        let ctrl0: Vec<ControllerState> = self.state.gfcs.iter().map(|g| g.ctrl).collect();
        let mut k1 = vec![ConverterState::default(); n];
        let mut r1 = vec![ControllerRates::default(); n];
        for (k, c) in conv0.iter().enumerate() {
            let (inputs, rates) = self.stage_inputs(k, c, &ctrl0[k], eval.i_gfc[k]);
            k1[k] = converter_derivative(c, &inputs, &self.params)?;
            r1[k] = rates;
        }
        let c1 = eval.di.clone();

        type Stage = (Vec<ConverterState>, Vec<ControllerState>, Vec<[f64; 3]>);
        let stage = |h: f64, kc: &[ConverterState], kr: &[ControllerRates], ki: &[[f64; 3]]| -> Stage {
            let c = conv0.iter().zip(kc).map(|(x, d)| x.axpy(h, d)).collect();
            let r = ctrl0.iter().zip(kr).map(|(x, d)| x.advance(h, d)).collect();
            let i = cur0
                .iter()
                .zip(ki)
                .map(|(x, d)| [x[0] + h * d[0], x[1] + h * d[1], x[2] + h * d[2]])
                .collect();
            (c, r, i)
        };

        let mut k2 = vec![ConverterState::default(); n];
        let mut r2 = vec![ControllerRates::default(); n];
        let (c_2, s_2, i_2) = stage(0.5 * dt, &k1, &r1, &c1);
        self.derivative(t0 + 0.5 * dt, &c_2, &s_2, &i_2, &mut eval, &mut k2, &mut r2)?;
        let c2 = eval.di.clone();

        let mut k3 = vec![ConverterState::default(); n];
        let mut r3 = vec![ControllerRates::default(); n];
        let (c_3, s_3, i_3) = stage(0.5 * dt, &k2, &r2, &c2);
        self.derivative(t0 + 0.5 * dt, &c_3, &s_3, &i_3, &mut eval, &mut k3, &mut r3)?;
        let c3 = eval.di.clone();

        let mut k4 = vec![ConverterState::default(); n];
        let mut r4 = vec![ControllerRates::default(); n];
        let (c_4, s_4, i_4) = stage(dt, &k3, &r3, &c3);
        self.derivative(t0 + dt, &c_4, &s_4, &i_4, &mut eval, &mut k4, &mut r4)?;
        let c4 = eval.di.clone();
        self.eval = eval;

        let w = dt / 6.0;
        for k in 0..n {
            let x = conv0[k]
                .axpy(w, &k1[k])
                .axpy(2.0 * w, &k2[k])
                .axpy(2.0 * w, &k3[k])
                .axpy(w, &k4[k]);
            if !x.is_finite() || x.v_d <= 0.0 {
                return Err(SimError::NonFiniteState);
            }
            self.state.gfcs[k].conv = x;
            let y = ctrl0[k]
                .advance(w, &r1[k])
                .advance(2.0 * w, &r2[k])
                .advance(2.0 * w, &r3[k])
                .advance(w, &r4[k]);
            let g = self.state.gfcs[k].gains;
            let y = y.clamped(&g, &self.params);
            if !y.is_finite() {
                return Err(SimError::NonFiniteState);
            }
            self.state.gfcs[k].ctrl = y;
        }
        for s in 0..cur0.len() {
            for c in 0..3 {
                self.state.currents[s][c] =
                    cur0[s][c] + w * (c1[s][c] + 2.0 * c2[s][c] + 2.0 * c3[s][c] + c4[s][c]);
            }
            if !self.state.currents[s].iter().all(|x| x.is_finite()) {
                return Err(SimError::NonFiniteState);
            }
        }
        self.state.step += 1;
        self.state.t = self.state.step as f64 * dt;
        Ok(row)
    }

    fn control(
        &mut self,
        k: usize,
        sig: &LocalSignals,
        v_g: AlphaBeta0,
        sampling: bool,
    ) -> Result<(Actuation, Option<GfcSample>), SimError> {
        let classic = !matches!(self.controller, ControllerKind::Pinn(_));
        if classic && !sampling {
            return Ok((Actuation::default(), None));
        }
        let g = self.state.gfcs[k];
        let params = self.params;
        let mut gains = g.gains;
        if let ControllerKind::Ref11(r) = &self.controller {
            gains.p_ref = r.effective_p_ref(&gains, sig.i_s.norm_ab(), params.i_peak());
        }
        let theta = g.ctrl.theta;
        let meas = measure(sig, theta, &gains);
        let v_ref = crate::control::droop_voltage(meas.q, &gains);
        if sampling {
            let v_mag = meas.v.norm_dq() / gains.v_base;
            self.trackers[k].push(meas.omega / (2.0 * PI), v_mag);
        }
        let (rocof, rocov) = self.trackers[k].slopes();
        let v_g_dq = ab0_to_dq0(v_g, theta);
        let feats = assemble_features(&meas, &v_g_dq, v_ref.d, gains.p_base, rocof, rocov);

        let v_star = match &self.controller {
            ControllerKind::Droop | ControllerKind::Ref11(_) => {
                classic_controller_rates(&meas, sig.i_s, &g.ctrl, &gains, &params).0.v_star
            }
            ControllerKind::Pinn(model) => model.predict_dq(&feats)?,
        };
        let act = Actuation { v_star };
        let sample = sampling.then(|| {
            let v_s = dq0_to_ab0(v_star, theta);
            GfcSample {
                features: feats,
                v_s_ref: [v_s.alpha, v_s.beta],
                v_dc: sig.v_d,
                i_dc: dc_source_current(g.conv.i_tau, params.i_d_max),
                f: meas.omega / (2.0 * PI),
                v_star: [v_star.d, v_star.q],
                theta,
                p_ref_eff: gains.p_ref / gains.p_base,
            }
        });
        Ok((act, sample))
    }

    /// Aggregate power balance at the current state: (sources, sinks) in watts.
    /// Sources are converter outputs plus the grid source; sinks are all
    /// resistive losses and loads.
    pub fn power_balance(&self) -> (f64, f64) {
        let gv: Vec<AlphaBeta0> = self.state.gfcs.iter().map(|g| g.conv.v).collect();
        let mut eval = NetworkEval::new(self.net.n_states(), gv.len(), self.model.buses.len());
        let src = self.source_voltage(self.state.t);
        self.net.eval(&self.state.currents, &gv, src, &mut eval);
        let mut p_in = self.net.source_power(&self.state.currents, src);
        for (k, v) in gv.iter().enumerate() {
            p_in += instantaneous_pq(*v, eval.i_gfc[k]).0;
        }
        let p_out = self.net.dissipation(&self.state.currents, &eval, &gv);
        (p_in, p_out)
    }

    /// Current drawn by each converter (aggregate) at the present state.
    pub fn gfc_currents(&self) -> Vec<AlphaBeta0> {
        let gv: Vec<AlphaBeta0> = self.state.gfcs.iter().map(|g| g.conv.v).collect();
        let mut eval = NetworkEval::new(self.net.n_states(), gv.len(), self.model.buses.len());
        self.net.eval(&self.state.currents, &gv, self.source_voltage(self.state.t), &mut eval);
        eval.i_gfc
    }

    pub fn peaks(&self) -> (Vec<f64>, Vec<f64>) {
        (self.peak_i_s.clone(), self.peak_i_dc.clone())
    }
}

/// Measurements of converter `k` at the present state, for diagnostics.
pub fn measurements_of(sim: &Simulator, k: usize) -> Measurements {
    let i = sim.gfc_currents()[k] * (1.0 / sim.params.n_modules as f64);
    let g = &sim.state.gfcs[k];
    let sig = LocalSignals {
        v: g.conv.v,
        i,
        i_s: g.conv.i_s,
        v_d: g.conv.v_d,
    };
    measure(&sig, g.ctrl.theta, &g.gains)
}

/// Steady-state initialization: the grid-fed part of the network at its
/// phasor solution, isolated converters at their droop equilibrium.
fn initial_state(
    model: &NetworkModel,
    net: &CompiledNetwork,
    params: &ConverterParams,
    gains: &ControlGains,
    init: &InitOptions,
) -> Result<SystemState, SimError> {
    let n = model.gfcs.len();
    let n_mod = params.n_modules as f64;
    let comp = components(model);
    let src_comp = comp[model.source_node];
    let w_g = model.grid.omega();
    let src = Complex64::from_polar(model.grid.v_peak(), model.grid.phase);

    // converters sharing a group with the grid start at grid frequency and
    // the angle of their feeder bus with all converters idle
    let mut v_ph = vec![Complex64::new(gains.v_ref, 0.0); n];
    let mut omega = vec![gains.omega_ref; n];
    let (_, bus0) = net.phasor_solve(w_g, &v_ph, src)?;
    let mut base_ang = vec![0.0; n];
    for k in 0..n {
        let bus = bus0[model.gfcs[k].grid_bus];
        base_ang[k] = if bus.norm() > 0.0 { bus.arg() } else { 0.0 };
        v_ph[k] = Complex64::from_polar(gains.v_ref, base_ang[k]);
        if comp[model.gfcs[k].bus] == src_comp {
            omega[k] = w_g;
        }
    }
    let (cur_g, _) = net.phasor_solve(w_g, &v_ph, src)?;

    // isolated groups: droop fixed point for frequency and voltage magnitude
    let mut gfc_gains = vec![*gains; n];
    let mut state_cur = vec![[0.0; 3]; net.n_states()];
    let mut group_of_state = vec![usize::MAX; net.n_states()];
    for (s, g) in group_of_state.iter_mut().enumerate() {
        *g = state_group(model, &comp, s);
    }
    for (s, x) in state_cur.iter_mut().enumerate() {
        if group_of_state[s] == src_comp {
            *x = [cur_g[s].re, cur_g[s].im, 0.0];
        }
    }
    let mut groups: Vec<usize> = (0..n).map(|k| comp[model.gfcs[k].bus]).filter(|&c| c != src_comp).collect();
    groups.sort_unstable();
    groups.dedup();
    for grp in groups {
        let members: Vec<usize> = (0..n).filter(|&k| comp[model.gfcs[k].bus] == grp).collect();
        let x = droop_equilibrium(net, &members, &v_ph, src, gains, params, |w| {
            phase_for(members[0], init, w, w_g, base_ang[members[0]])
        })?;
        let m = members.len();
        let w = x[2 * m - 1];
        let ang0 = phase_for(members[0], init, w, w_g, base_ang[members[0]]);
        for (j, &k) in members.iter().enumerate() {
            let ang = if j == 0 { ang0 } else { ang0 + x[m + j - 1] };
            v_ph[k] = Complex64::from_polar(x[j], ang);
            omega[k] = w;
        }
        let (cur, _) = net.phasor_solve(w, &v_ph, src)?;
        for (s, x) in state_cur.iter_mut().enumerate() {
            if group_of_state[s] == grp {
                *x = [cur[s].re, cur[s].im, 0.0];
            }
        }
    }

    let gv: Vec<AlphaBeta0> = v_ph.iter().map(|z| from_cplx(*z)).collect();
    let mut eval = NetworkEval::new(net.n_states(), n, model.buses.len());
    net.eval(&state_cur, &gv, from_cplx(src), &mut eval);
    let mut gfcs = Vec::with_capacity(n);
    for k in 0..n {
        let i_out = cplx(eval.i_gfc[k]) / n_mod;
        gfc_gains[k].omega_ref = gains.omega_ref;
        let (conv, ctrl) = gfc_equilibrium(v_ph[k], i_out, omega[k], &gfc_gains[k], params);
        gfcs.push(GfcState {
            conv,
            ctrl,
            gains: gfc_gains[k],
        });
    }
    Ok(SystemState {
        gfcs,
        currents: state_cur,
        t: 0.0,
        step: 0,
    })
}

/// Droop equilibrium of an islanded group by Newton's method. Unknowns are
/// the voltage magnitudes, the angles relative to the first member and the
/// common frequency; each member must sit on both of its droop lines.
fn droop_equilibrium(
    net: &CompiledNetwork,
    members: &[usize],
    v_ph: &[Complex64],
    src: Complex64,
    gains: &ControlGains,
    params: &ConverterParams,
    first_angle: impl Fn(f64) -> f64,
) -> Result<Vec<f64>, SimError> {
    let m = members.len();
    let n_mod = params.n_modules as f64;
    let dim = 2 * m;
    let residual = |x: &[f64]| -> Result<Vec<f64>, SimError> {
        let w = x[dim - 1];
        let ang0 = first_angle(w);
        let mut vv = v_ph.to_vec();
        for (j, &k) in members.iter().enumerate() {
            let ang = if j == 0 { ang0 } else { ang0 + x[m + j - 1] };
            vv[k] = Complex64::from_polar(x[j], ang);
        }
        let (c, _) = net.phasor_solve(w, &vv, src)?;
        let i = net.gfc_phasor_currents(&c, &vv);
        let mut r = Vec::with_capacity(dim);
        for &k in members {
            let s = vv[k] * (i[k] / n_mod).conj() * 1.5;
            r.push((droop_frequency(s.re, gains) - w) / gains.omega_ref);
            r.push((crate::control::droop_voltage(s.im, gains).d - vv[k].norm()) / gains.v_base);
        }
        Ok(r)
    };
    let mut x = vec![0.0; dim];
    for j in 0..m {
        x[j] = gains.v_ref;
    }
    x[dim - 1] = gains.omega_ref;
    let scale = |j: usize| if j < m { gains.v_base } else if j < dim - 1 { 1.0 } else { gains.omega_ref };
    for _ in 0..50 {
        let r0 = residual(&x)?;
        let norm = r0.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        if norm < 1e-15 {
            break;
        }
        let mut jac = nalgebra::DMatrix::<f64>::zeros(dim, dim);
        for j in 0..dim {
            let h = 1e-7 * scale(j);
            let mut xp = x.clone();
            xp[j] += h;
            let mut xm = x.clone();
            xm[j] -= h;
            let (rp, rm) = (residual(&xp)?, residual(&xm)?);
            for i in 0..dim {
                jac[(i, j)] = (rp[i] - rm[i]) / (2.0 * h);
            }
        }
        let rhs = nalgebra::DVector::from_vec(r0);
        let dx = jac
            .lu()
            .solve(&rhs)
            .ok_or_else(|| SimError::Config("islanded group has no droop equilibrium".into()))?;
        for j in 0..dim {
            x[j] -= dx[j];
        }
        if dx.iter().enumerate().all(|(j, d)| d.abs() < 1e-13 * scale(j)) {
            break;
        }
    }
    if residual(&x)?.iter().any(|r| !(r.abs() < 1e-9)) {
        return Err(SimError::Config("islanded group has no droop equilibrium".into()));
    }
    Ok(x)
}

/// Angle at t = 0 that puts converter `k` in phase with the grid at its
/// synchronization instant.
fn phase_for(k: usize, init: &InitOptions, w: f64, w_g: f64, bus_angle: f64) -> f64 {
    match init.sync_at.get(k).copied().flatten() {
        Some(t) => bus_angle + (w_g - w) * t,
        None => bus_angle,
    }
}

/// Connected groups of nodes through closed branches (index per node,
/// including the source node).
fn components(model: &NetworkModel) -> Vec<usize> {
    let n = model.buses.len() + 1;
    let mut comp: Vec<usize> = (0..n).collect();
    loop {
        let mut changed = false;
        for (k, b) in model.branches.iter().enumerate() {
            if model.branch_closed(k) {
                let m = comp[b.from].min(comp[b.to]);
                if comp[b.from] != m || comp[b.to] != m {
                    comp[b.from] = m;
                    comp[b.to] = m;
                    changed = true;
                }
            }
        }
        if !changed {
            return comp;
        }
    }
}

fn state_group(model: &NetworkModel, comp: &[usize], s: usize) -> usize {
    let nb = model.branches.len();
    if s < nb {
        comp[model.branches[s].from]
    } else {
        comp[model.loads[s - nb].bus]
    }
}

/// Runs the scenario timeline on `model` and returns the sampled record.
pub fn run_scenario(spec: &ScenarioSpec, model: &NetworkModel, controller: &ControllerKind) -> Result<RunRecord, SimError> {
    spec.validate()?;
    let mut model = model.clone();
    model.set_mg_load(spec.mg_load_va)?;
    if let Some(locals) = &spec.local_load_va {
        for (k, s) in locals.iter().enumerate() {
            model.set_local_load(k, *s)?;
        }
    }
    let dt = spec.dt;
    let to_step = |t: f64| (t / dt).round() as u64;
    let mut events: Vec<(u64, &Action)> = spec.events.iter().map(|e| (to_step(e.time), &e.action)).collect();
    events.sort_by_key(|e| e.0);
    for (_, a) in events.iter().filter(|e| e.0 == 0) {
        apply_static(&mut model, a)?;
    }
    let sync_at = model
        .gfcs
        .iter()
        .map(|g| {
            let id = g.breaker.as_deref()?;
            if model.breakers.iter().any(|b| b.id == id && b.closed) {
                return None;
            }
            events.iter().find_map(|(s, a)| match a {
                Action::Breaker { id: x, closed: true } if x == id => Some(*s as f64 * dt),
                _ => None,
            })
        })
        .collect();
    let params = spec.converter;
    let gains = spec.gains.unwrap_or_else(|| ControlGains::for_params(&params));
    let mut sim = Simulator::new(
        model,
        params,
        gains,
        controller.clone(),
        dt,
        spec.sample_interval,
        spec.rocof_window,
        &InitOptions { sync_at },
    )?;
    let n_steps = to_step(spec.horizon);
    let mut rows = Vec::with_capacity((n_steps / sim.sample_every + 1) as usize);
    let mut next_event = events.iter().position(|e| e.0 > 0).unwrap_or(events.len());
    let mut diverged_at = None;
    while sim.state.step < n_steps {
        while next_event < events.len() && events[next_event].0 == sim.state.step {
            apply_dynamic(&mut sim, events[next_event].1)?;
            next_event += 1;
        }
        let t = sim.state.t;
        match sim.step() {
            Ok(Some(r)) => rows.push(r),
            Ok(None) => {}
            Err(SimError::NonFiniteState) => {
                diverged_at = Some(t);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let (peak_i_s, peak_i_dc) = sim.peaks();
    Ok(RunRecord {
        scenario: spec.name.clone(),
        controller: controller.label().to_string(),
        sample_interval: spec.sample_interval,
        rows,
        diverged: diverged_at.is_some(),
        diverged_at,
        peak_i_s,
        peak_i_dc,
        v_base: gains.v_base,
        i_peak: params.i_peak(),
        i_ac_max: params.i_ac_max,
        i_d_max: params.i_d_max,
        p_ref: gains.p_ref / gains.p_base,
    })
}

fn apply_static(model: &mut NetworkModel, a: &Action) -> Result<(), SimError> {
    match a {
        Action::Breaker { id, closed } => model.apply_breaker(id, *closed).map(|_| ()),
        Action::MgLoad { s_va } => model.set_mg_load(*s_va),
        Action::LocalLoad { gfc, s_va } => model.set_local_load(*gfc, *s_va),
    }
}

fn apply_dynamic(sim: &mut Simulator, a: &Action) -> Result<(), SimError> {
    match a {
        Action::Breaker { id, closed } => sim.set_breaker(id, *closed),
        Action::MgLoad { s_va } => sim.set_mg_load(*s_va),
        Action::LocalLoad { gfc, s_va } => sim.set_local_load(*gfc, *s_va),
    }
}
