//! Cascaded grid-forming controller: P/f and Q/V droop, AC voltage PI,
//! current-reference limiter, AC current PI, modulation and DC voltage control.
//!
//! All quantities are per module. Droop powers are per unit of `p_base`
//! (the module rating, which equals the aggregate per-unit value).

use crate::converter::{switch_dc_current, ConverterParams};
use crate::frames::{ab0_to_dq0, dq0_to_ab0, instantaneous_pq, AlphaBeta0, Dq0};
use log::warn;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlGains {
    pub k_d: f64,
    pub k_vp: f64,
    pub k_vi: f64,
    pub k_ip: f64,
    pub k_ii: f64,
    /// rad/s per p.u. active power
    pub d_g: f64,
    /// p.u. voltage per p.u. reactive power
    pub n_q: f64,
    pub omega_ref: f64,
    /// watts per module
    pub p_ref: f64,
    /// peak phase volts
    pub v_ref: f64,
    pub v_d_ref: f64,
    /// power base for the droop laws, VA
    pub p_base: f64,
    /// voltage base for the droop laws, peak phase volts
    pub v_base: f64,
}

impl Default for ControlGains {
    fn default() -> Self {
        ControlGains::for_params(&ConverterParams::default())
    }
}

impl ControlGains {
    pub fn for_params(p: &ConverterParams) -> Self {
        let omega = p.omega_nom();
        let d_g = 2.0 * PI * 0.05;
        Self {
            k_d: 1600.0,
            k_vp: 0.52,
            k_vi: 3.48,
            k_ip: 1.48,
            k_ii: 0.4,
            d_g,
            n_q: 1.5 * d_g / omega,
            omega_ref: omega,
            p_ref: 0.3 * p.s_rated,
            v_ref: p.v_peak(),
            v_d_ref: p.v_d_ref,
            p_base: p.s_rated,
            v_base: p.v_peak(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControllerState {
    pub y_v: Dq0,
    pub y_i: Dq0,
    pub theta: f64,
}

impl ControllerState {
    pub fn is_finite(&self) -> bool {
        [self.y_v.d, self.y_v.q, self.y_i.d, self.y_i.q, self.theta]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// Measured signals rotated into the controller frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Measurements {
    pub v: Dq0,
    pub i: Dq0,
    pub i_s: Dq0,
    pub v_d: f64,
    pub p: f64,
    pub q: f64,
    pub omega: f64,
}

/// Raw stationary-frame signals available to a module controller.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LocalSignals {
    pub v: AlphaBeta0,
    pub i: AlphaBeta0,
    pub i_s: AlphaBeta0,
    pub v_d: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("current limiter engaged with a zero reference")]
    DegenerateReference,
}

pub fn droop_frequency(p: f64, g: &ControlGains) -> f64 {
    g.omega_ref + g.d_g * (g.p_ref - p) / g.p_base
}

pub fn droop_voltage(q: f64, g: &ControlGains) -> Dq0 {
    Dq0::new(g.v_ref - g.n_q * (q / g.p_base) * g.v_base, 0.0, 0.0)
}

/// Rotates the raw signals with `theta` and evaluates power and droop frequency.
pub fn measure(sig: &LocalSignals, theta: f64, g: &ControlGains) -> Measurements {
    let (p, q) = instantaneous_pq(sig.v, sig.i);
    Measurements {
        v: ab0_to_dq0(sig.v, theta),
        i: ab0_to_dq0(sig.i, theta),
        i_s: ab0_to_dq0(sig.i_s, theta),
        v_d: sig.v_d,
        p,
        q,
        omega: droop_frequency(p, g),
    }
}

pub fn dc_voltage_control(meas: &Measurements, i_x: f64, g: &ControlGains, params: &ConverterParams) -> f64 {
    dc_current_reference(meas.v_d, meas.p, i_x, g, params)
}

/// DC source current reference from the DC voltage, output power and
/// switch-side DC current.
pub fn dc_current_reference(v_d: f64, p: f64, i_x: f64, g: &ControlGains, params: &ConverterParams) -> f64 {
    g.k_d * (g.v_d_ref - v_d) + g.p_ref / g.v_d_ref + params.g_d * v_d + (v_d * i_x - p) / g.v_d_ref
}

pub fn ac_voltage_control(
    v_ref: &Dq0,
    meas: &Measurements,
    ctrl: &ControllerState,
    params: &ConverterParams,
    g: &ControlGains,
) -> Dq0 {
    let ff = meas.v.rot90().scale(params.c * meas.omega);
    let err = v_ref.minus(&meas.v);
    let i = meas.i.plus(&ff).plus(&err.scale(g.k_vp)).plus(&ctrl.y_v.scale(g.k_vi));
    Dq0 { zero: 0.0, ..i }
}

/// Scales the current reference back onto the limit circle when the measured
/// switch-node current exceeds `i_ac_max`.
pub fn limit_current(i_star: &Dq0, i_s_meas: &Dq0, i_ac_max: f64) -> Result<Dq0, ControlError> {
    if i_s_meas.norm_dq() <= i_ac_max {
        return Ok(*i_star);
    }
    let n = i_star.norm_dq();
    if n == 0.0 {
        return Err(ControlError::DegenerateReference);
    }
    Ok(i_star.scale(i_ac_max / n))
}

pub fn ac_current_control(
    i_lim: &Dq0,
    meas: &Measurements,
    ctrl: &ControllerState,
    params: &ConverterParams,
    g: &ControlGains,
) -> Dq0 {
    let z = meas.i_s.rot90().scale(params.l * meas.omega).plus(&meas.i_s.scale(params.r));
    let v = meas
        .v
        .plus(&z)
        .plus(&i_lim.minus(&meas.i_s).scale(g.k_ip))
        .plus(&ctrl.y_i.scale(g.k_ii));
    Dq0 { zero: 0.0, ..v }
}

pub fn modulation(v_s_ref: AlphaBeta0, v_d_ref: f64) -> AlphaBeta0 {
    v_s_ref * (2.0 / v_d_ref)
}

/// Integrator clamps; beyond these the integral term alone would exceed the
/// current limit (voltage loop) or half the DC voltage (current loop).
pub fn integrator_limits(g: &ControlGains, params: &ConverterParams) -> (f64, f64) {
    let y_v = if g.k_vi > 0.0 { params.i_ac_max / g.k_vi } else { f64::INFINITY };
    let y_i = if g.k_ii > 0.0 { 0.5 * g.v_d_ref / g.k_ii } else { f64::INFINITY };
    (y_v, y_i)
}

fn clamp_dq(x: Dq0, lim: f64) -> Dq0 {
    let n = x.norm_dq();
    if n > lim {
        x.scale(lim / n)
    } else {
        x
    }
}

/// Outputs of one controller evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlOutput {
    pub m: AlphaBeta0,
    pub i_dc_ref: f64,
    pub v_s_ref: AlphaBeta0,
    pub v_star: Dq0,
    pub v_ref: Dq0,
    pub omega: f64,
    pub limiting: bool,
}

/// Modulation and DC current reference for a given dq voltage command.
pub fn actuate(
    v_star: Dq0,
    theta: f64,
    meas: &Measurements,
    i_s_ab: AlphaBeta0,
    g: &ControlGains,
    params: &ConverterParams,
) -> (AlphaBeta0, AlphaBeta0, f64) {
    let v_s_ref = dq0_to_ab0(v_star, theta);
    let m = modulation(v_s_ref, g.v_d_ref);
    let i_x = switch_dc_current(m, i_s_ab);
    let i_dc_ref = dc_voltage_control(meas, i_x, g, params);
    (m, v_s_ref, i_dc_ref)
}

/// Time derivatives of the controller state.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControllerRates {
    pub y_v: Dq0,
    pub y_i: Dq0,
    pub omega: f64,
}

impl ControllerState {
    /// `self + h·r`, angle left unwrapped.
    pub fn advance(&self, h: f64, r: &ControllerRates) -> ControllerState {
        ControllerState {
            y_v: self.y_v.plus(&r.y_v.scale(h)),
            y_i: self.y_i.plus(&r.y_i.scale(h)),
            theta: self.theta + h * r.omega,
        }
    }

    /// Applies the integrator clamps and wraps the angle.
    pub fn clamped(&self, g: &ControlGains, params: &ConverterParams) -> ControllerState {
        let (yv_max, yi_max) = integrator_limits(g, params);
        ControllerState {
            y_v: Dq0 { zero: 0.0, ..clamp_dq(self.y_v, yv_max) },
            y_i: Dq0 { zero: 0.0, ..clamp_dq(self.y_i, yi_max) },
            theta: wrap_angle(self.theta),
        }
    }
}

/// Full cascade evaluated at one instant: outputs plus the rates of the
/// integrators and the droop angle. The voltage-loop integrator is frozen
/// while the current limiter is active.
pub fn classic_controller_rates(
    meas: &Measurements,
    i_s_ab: AlphaBeta0,
    ctrl: &ControllerState,
    g: &ControlGains,
    params: &ConverterParams,
) -> (ControlOutput, ControllerRates) {
    let v_ref = droop_voltage(meas.q, g);
    let i_star = ac_voltage_control(&v_ref, meas, ctrl, params, g);
    let limiting = meas.i_s.norm_dq() > params.i_ac_max;
    let i_lim = match limit_current(&i_star, &meas.i_s, params.i_ac_max) {
        Ok(x) => x,
        Err(e) => {
            warn!("{e}");
            Dq0::default()
        }
    };
    let v_star = ac_current_control(&i_lim, meas, ctrl, params, g);
    let (m, v_s_ref, i_dc_ref) = actuate(v_star, ctrl.theta, meas, i_s_ab, g, params);
    let y_v = if limiting { Dq0::default() } else { v_ref.minus(&meas.v) };
    let rates = ControllerRates {
        y_v: Dq0 { zero: 0.0, ..y_v },
        y_i: Dq0 { zero: 0.0, ..i_lim.minus(&meas.i_s) },
        omega: meas.omega,
    };
    let out = ControlOutput {
        m,
        i_dc_ref,
        v_s_ref,
        v_star,
        v_ref,
        omega: meas.omega,
        limiting,
    };
    (out, rates)
}

/// Full cascade for one step. Integrators and the droop angle advance by `dt`
/// with the derivative evaluated at the step start.
pub fn classic_controller_step(
    meas: &Measurements,
    i_s_ab: AlphaBeta0,
    ctrl: &ControllerState,
    g: &ControlGains,
    params: &ConverterParams,
    dt: f64,
) -> (ControlOutput, ControllerState) {
    let (out, rates) = classic_controller_rates(meas, i_s_ab, ctrl, g, params);
    (out, ctrl.advance(dt, &rates).clamped(g, params))
}

pub fn wrap_angle(x: f64) -> f64 {
    let t = 2.0 * PI;
    if (0.0..t).contains(&x) {
        x
    } else {
        x.rem_euclid(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> (ControlGains, ConverterParams) {
        let p = ConverterParams::default();
        (ControlGains::for_params(&p), p)
    }

    #[test]
    fn droop_frequency_examples() {
        let (g, _) = base();
        assert!((droop_frequency(g.p_ref, &g) - 2.0 * PI * 50.0).abs() < 1e-12);
        let w = droop_frequency(g.p_ref + g.p_base, &g);
        assert!((w / (2.0 * PI) - 49.95).abs() < 1e-12);
        let w = droop_frequency(g.p_ref - 0.5 * g.p_base, &g);
        assert!((w / (2.0 * PI) - 50.025).abs() < 1e-12);
    }

    #[test]
    fn droop_voltage_examples() {
        let (g, _) = base();
        assert_eq!(droop_voltage(0.0, &g), Dq0::new(g.v_ref, 0.0, 0.0));
        let v = droop_voltage(0.1 * g.p_base, &g);
        let dg_pu = 2.0 * PI * 0.05 / g.omega_ref;
        assert!((v.d - (g.v_ref - 0.15 * dg_pu * g.v_base)).abs() < 1e-9);
        assert_eq!(v.q, 0.0);
        assert!(droop_voltage(-0.2 * g.p_base, &g).d > g.v_ref);
    }

    #[test]
    fn dc_voltage_control_examples() {
        let (g, p) = base();
        let m = Measurements {
            v_d: g.v_d_ref,
            p: 1000.0,
            ..Default::default()
        };
        let i = dc_voltage_control(&m, 1000.0 / g.v_d_ref, &g, &p);
        assert!((i - (g.p_ref / g.v_d_ref + p.g_d * g.v_d_ref)).abs() < 1e-9);

        let m1 = Measurements { v_d: g.v_d_ref - 1.0, ..m };
        let i1 = dc_voltage_control(&m1, 1000.0 / m1.v_d, &g, &p);
        let i0 = dc_voltage_control(&Measurements { v_d: g.v_d_ref, ..m }, 1000.0 / g.v_d_ref, &g, &p);
        assert!((i1 - i0 - 1600.0 + p.g_d).abs() < 1e-9);

        let zero = ControlGains {
            k_d: 0.0,
            p_ref: 0.0,
            ..g
        };
        let pz = ConverterParams { g_d: 0.0, ..p };
        let m = Measurements {
            v_d: 0.0,
            p: 1000.0,
            ..Default::default()
        };
        assert!((dc_voltage_control(&m, 0.0, &zero, &pz) + 0.4098).abs() < 1e-4);
    }

    fn zero_gains() -> ControlGains {
        ControlGains {
            k_vp: 0.0,
            k_vi: 0.0,
            k_ip: 0.0,
            k_ii: 0.0,
            ..ControlGains::default()
        }
    }

    #[test]
    fn ac_voltage_control_examples() {
        let p = ConverterParams::default();
        let ctrl = ControllerState::default();
        let m = Measurements {
            i: Dq0::new(12.0, -3.0, 0.0),
            ..Default::default()
        };
        let out = ac_voltage_control(&Dq0::default(), &m, &ctrl, &p, &zero_gains());
        assert_eq!((out.d, out.q), (12.0, -3.0));

        let g = ControlGains { k_vp: 0.52, ..zero_gains() };
        let out = ac_voltage_control(&Dq0::new(1.0, 0.0, 0.0), &Measurements::default(), &ctrl, &p, &g);
        assert!((out.d - 0.52).abs() < 1e-15 && out.q == 0.0);

        // C·ω = 0.1
        let m = Measurements {
            v: Dq0::new(1.0, 0.0, 0.0),
            omega: 0.1 / p.c,
            ..Default::default()
        };
        let out = ac_voltage_control(&m.v, &m, &ctrl, &p, &zero_gains());
        assert!(out.d.abs() < 1e-15 && (out.q - 0.1).abs() < 1e-12);
    }

    #[test]
    fn limiter_examples() {
        let i = Dq0::new(900.0, 100.0, 0.0);
        assert_eq!(limit_current(&i, &Dq0::new(1000.0, 0.0, 0.0), 1224.7).unwrap(), i);
        let out = limit_current(&Dq0::new(1500.0, 0.0, 0.0), &Dq0::new(1300.0, 0.0, 0.0), 1224.7).unwrap();
        assert!((out.d - 1224.7).abs() < 1e-9 && out.q == 0.0);
        assert_eq!(
            limit_current(&Dq0::default(), &Dq0::new(1300.0, 0.0, 0.0), 1224.7),
            Err(ControlError::DegenerateReference)
        );
    }

    #[test]
    fn ac_current_control_examples() {
        let p = ConverterParams::default();
        let ctrl = ControllerState::default();
        let m = Measurements {
            v: Dq0::new(800.0, 5.0, 0.0),
            i_s: Dq0::new(100.0, 0.0, 0.0),
            ..Default::default()
        };
        let out = ac_current_control(&m.i_s, &m, &ctrl, &p, &zero_gains());
        assert!((out.d - 800.1).abs() < 1e-12 && (out.q - 5.0).abs() < 1e-12);

        let g = ControlGains { k_ip: 1.48, ..zero_gains() };
        let out = ac_current_control(&Dq0::new(10.0, 0.0, 0.0), &Measurements::default(), &ctrl, &p, &g);
        assert!((out.d - 14.8).abs() < 1e-12);

        // L·ω = 0.05 Ω
        let m = Measurements {
            i_s: Dq0::new(100.0, 0.0, 0.0),
            omega: 0.05 / p.l,
            ..Default::default()
        };
        let out = ac_current_control(&m.i_s, &m, &ctrl, &p, &zero_gains());
        assert!((out.d - 0.1).abs() < 1e-12 && (out.q - 5.0).abs() < 1e-9);
    }

    #[test]
    fn modulation_examples() {
        let m = modulation(AlphaBeta0::new(1220.0, 0.0, 0.0), 2440.0);
        assert_eq!((m.alpha, m.beta), (1.0, 0.0));
        assert_eq!(modulation(AlphaBeta0::ZERO, 2440.0), AlphaBeta0::ZERO);
        let a = AlphaBeta0::new(310.0, -42.0, 0.0);
        assert_eq!(modulation(a * 2.0, 2440.0), modulation(a, 2440.0) * 2.0);
    }

    fn steady_case() -> (Measurements, AlphaBeta0, ControllerState, ControlGains, ConverterParams) {
        let (g, p) = base();
        let theta = 0.4;
        let v = Dq0::new(g.v_ref, 0.0, 0.0);
        let i = Dq0::new(0.3 * p.s_rated / (1.5 * g.v_ref), 0.0, 0.0);
        let w = g.omega_ref;
        let i_s = i.plus(&v.rot90().scale(p.c * w));
        let v_s = v.plus(&i_s.rot90().scale(p.l * w)).plus(&i_s.scale(p.r));
        let ctrl = ControllerState {
            y_v: Dq0::default(),
            y_i: v_s
                .minus(&v)
                .minus(&i_s.rot90().scale(p.l * w))
                .minus(&i_s.scale(p.r))
                .scale(1.0 / g.k_ii),
            theta,
        };
        let sig = LocalSignals {
            v: dq0_to_ab0(v, theta),
            i: dq0_to_ab0(i, theta),
            i_s: dq0_to_ab0(i_s, theta),
            v_d: g.v_d_ref,
        };
        let meas = measure(&sig, theta, &g);
        (meas, sig.i_s, ctrl, g, p)
    }

    #[test]
    fn steady_state_is_fixed_point() {
        let (meas, i_s_ab, ctrl, g, p) = steady_case();
        let (o1, c1) = classic_controller_step(&meas, i_s_ab, &ctrl, &g, &p, 2e-5);
        assert!((c1.y_v.d - ctrl.y_v.d).abs() < 1e-9 && (c1.y_i.q - ctrl.y_i.q).abs() < 1e-9);
        // same measurements seen from the advanced frame
        let th = c1.theta;
        let rot = |x: AlphaBeta0| dq0_to_ab0(ab0_to_dq0(x, ctrl.theta), th);
        let sig = LocalSignals {
            v: rot(dq0_to_ab0(meas.v, ctrl.theta)),
            i: rot(dq0_to_ab0(meas.i, ctrl.theta)),
            i_s: rot(i_s_ab),
            v_d: meas.v_d,
        };
        let m2 = measure(&sig, th, &g);
        let (o2, _) = classic_controller_step(&m2, sig.i_s, &c1, &g, &p, 2e-5);
        assert!((o1.v_star.d - o2.v_star.d).abs() < 1e-9 && (o1.v_star.q - o2.v_star.q).abs() < 1e-9);
        assert!((o1.i_dc_ref - o2.i_dc_ref).abs() < 1e-9);
    }

    #[test]
    fn raising_v_ref_raises_command() {
        let (meas, i_s_ab, ctrl, g, p) = steady_case();
        let (o1, _) = classic_controller_step(&meas, i_s_ab, &ctrl, &g, &p, 2e-5);
        let g2 = ControlGains { v_ref: g.v_ref + 10.0, ..g };
        let (o2, _) = classic_controller_step(&meas, i_s_ab, &ctrl, &g2, &p, 2e-5);
        assert!(o2.v_star.norm_dq() > o1.v_star.norm_dq());
    }

    #[test]
    fn hand_composed_chain() {
        let (g, p) = base();
        let ctrl = ControllerState {
            y_v: Dq0::new(3.1, -1.7, 0.0),
            y_i: Dq0::new(40.0, 12.0, 0.0),
            theta: 2.2,
        };
        let sig = LocalSignals {
            v: AlphaBeta0::new(512.0, -611.0, 0.0),
            i: AlphaBeta0::new(120.0, 88.0, 0.0),
            i_s: AlphaBeta0::new(131.0, 70.0, 0.0),
            v_d: 2431.0,
        };
        let meas = measure(&sig, ctrl.theta, &g);
        let (out, _) = classic_controller_step(&meas, sig.i_s, &ctrl, &g, &p, 2e-5);

        // independent evaluation with plain arrays
        let (s, c) = ctrl.theta.sin_cos();
        let park = |a: f64, b: f64| [a * c + b * s, -a * s + b * c];
        let v = park(sig.v.alpha, sig.v.beta);
        let i = park(sig.i.alpha, sig.i.beta);
        let is = park(sig.i_s.alpha, sig.i_s.beta);
        let pw = 1.5 * (sig.v.alpha * sig.i.alpha + sig.v.beta * sig.i.beta);
        let qw = 1.5 * (sig.v.beta * sig.i.alpha - sig.v.alpha * sig.i.beta);
        let w = g.omega_ref + g.d_g * (g.p_ref - pw) / g.p_base;
        let vr = [g.v_ref - g.n_q * qw / g.p_base * g.v_base, 0.0];
        let istar: Vec<f64> = (0..2)
            .map(|k| {
                let t2v = if k == 0 { -v[1] } else { v[0] };
                i[k] + p.c * w * t2v + g.k_vp * (vr[k] - v[k]) + g.k_vi * [3.1, -1.7][k]
            })
            .collect();
        let vs: Vec<f64> = (0..2)
            .map(|k| {
                let t2i = if k == 0 { -is[1] } else { is[0] };
                v[k] + p.l * w * t2i + p.r * is[k] + g.k_ip * (istar[k] - is[k]) + g.k_ii * [40.0, 12.0][k]
            })
            .collect();
        let va = vs[0] * c - vs[1] * s;
        let vb = vs[0] * s + vs[1] * c;
        assert!((out.m.alpha - 2.0 * va / g.v_d_ref).abs() < 1e-12);
        assert!((out.m.beta - 2.0 * vb / g.v_d_ref).abs() < 1e-12);
        let ix = 0.75 * (out.m.alpha * sig.i_s.alpha + out.m.beta * sig.i_s.beta);
        let idc = g.k_d * (g.v_d_ref - sig.v_d) + g.p_ref / g.v_d_ref + p.g_d * sig.v_d + (sig.v_d * ix - pw) / g.v_d_ref;
        assert!((out.i_dc_ref - idc).abs() < 1e-9);
    }

    #[test]
    fn voltage_integrator_frozen_while_limiting() {
        let (g, p) = base();
        let ctrl = ControllerState {
            y_v: Dq0::new(5.0, 1.0, 0.0),
            ..Default::default()
        };
        let sig = LocalSignals {
            v: AlphaBeta0::new(600.0, 0.0, 0.0),
            i: AlphaBeta0::new(500.0, 0.0, 0.0),
            i_s: AlphaBeta0::new(520.0, 0.0, 0.0),
            v_d: 2440.0,
        };
        let meas = measure(&sig, 0.0, &g);
        let (out, next) = classic_controller_step(&meas, sig.i_s, &ctrl, &g, &p, 1e-3);
        assert!(out.limiting);
        assert_eq!(next.y_v, ctrl.y_v);
    }
}
