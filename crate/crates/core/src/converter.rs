//! Averaged model of one converter module: DC link with a lagged, saturating
//! DC source, switching stage, and LC output filter.

use crate::frames::AlphaBeta0;
use crate::SimError;
use serde::{Deserialize, Serialize};

/// Electrical constants of one module. Limits are per module.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConverterParams {
    pub c_d: f64,
    pub g_d: f64,
    pub l: f64,
    pub c: f64,
    pub r: f64,
    pub tau_d: f64,
    pub i_d_max: f64,
    pub i_ac_max: f64,
    pub n_modules: usize,
    pub v_d_ref: f64,
    pub s_rated: f64,
    pub f_nom: f64,
    pub v_ll_rms: f64,
    /// Largest modulation vector length the switching stage can realize.
    pub m_max: f64,
}

impl Default for ConverterParams {
    fn default() -> Self {
        let s_rated = 500e3;
        let v_ll_rms = 1000.0;
        let v_d_ref = 2440.0;
        let i_peak = rated_peak_current(s_rated, v_ll_rms);
        Self {
            c_d: 0.008,
            g_d: 0.83e-3,
            l: 200e-6,
            c: 300e-6,
            r: 0.001,
            tau_d: 0.05,
            i_d_max: 1.2 * s_rated / v_d_ref,
            i_ac_max: 1.2 * i_peak,
            n_modules: 3,
            v_d_ref,
            s_rated,
            f_nom: 50.0,
            v_ll_rms,
            m_max: 1.0,
        }
    }
}

/// Peak phase current at rated apparent power.
pub fn rated_peak_current(s: f64, v_ll_rms: f64) -> f64 {
    s / (3f64.sqrt() * v_ll_rms) * 2f64.sqrt()
}

impl ConverterParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let pos = [
            ("c_d", self.c_d),
            ("g_d", self.g_d),
            ("l", self.l),
            ("c", self.c),
            ("r", self.r),
            ("tau_d", self.tau_d),
            ("i_d_max", self.i_d_max),
            ("i_ac_max", self.i_ac_max),
            ("v_d_ref", self.v_d_ref),
            ("s_rated", self.s_rated),
            ("f_nom", self.f_nom),
            ("v_ll_rms", self.v_ll_rms),
            ("m_max", self.m_max),
        ];
        for (name, v) in pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::Config(format!("converter parameter {name} must be positive, got {v}")));
            }
        }
        if self.n_modules == 0 {
            return Err(SimError::Config("n_modules must be at least 1".into()));
        }
        Ok(())
    }

    /// Rated peak phase current of one module.
    pub fn i_peak(&self) -> f64 {
        rated_peak_current(self.s_rated, self.v_ll_rms)
    }

    /// Nominal peak phase voltage.
    pub fn v_peak(&self) -> f64 {
        self.v_ll_rms * (2.0f64 / 3.0).sqrt()
    }

    pub fn omega_nom(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.f_nom
    }

    /// Apparent-power base of the aggregate converter.
    pub fn s_base(&self) -> f64 {
        self.s_rated * self.n_modules as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ConverterState {
    pub v_d: f64,
    pub i_tau: f64,
    pub i_s: AlphaBeta0,
    pub v: AlphaBeta0,
}

impl ConverterState {
    pub fn is_finite(&self) -> bool {
        self.v_d.is_finite() && self.i_tau.is_finite() && self.i_s.is_finite() && self.v.is_finite()
    }

    /// `self + k·d`, used by the integrator.
    pub fn axpy(&self, k: f64, d: &ConverterState) -> ConverterState {
        ConverterState {
            v_d: self.v_d + k * d.v_d,
            i_tau: self.i_tau + k * d.i_tau,
            i_s: self.i_s + d.i_s * k,
            v: self.v + d.v * k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ConverterInputs {
    pub m: AlphaBeta0,
    pub i_dc_ref: f64,
    /// Current drawn by the network from this module's capacitor.
    pub i_out: AlphaBeta0,
}

/// Hard clamp of the DC source current.
pub fn dc_source_current(i_tau: f64, i_d_max: f64) -> f64 {
    if i_tau.abs() < i_d_max {
        i_tau
    } else {
        i_d_max.copysign(i_tau)
    }
}

/// Switch-node voltage `½ m v_d`.
pub fn switch_voltage(m: AlphaBeta0, v_d: f64) -> AlphaBeta0 {
    m * (0.5 * v_d)
}

/// DC-side current of the switching stage. The 3/4 factor makes `v_d·i_x`
/// equal the three-phase switch-node power `3/2 v_s·i_s`.
pub fn switch_dc_current(m: AlphaBeta0, i_s: AlphaBeta0) -> f64 {
    0.75 * (m.alpha * i_s.alpha + m.beta * i_s.beta + m.zero * i_s.zero)
}

/// Clips the modulation vector to the realizable range `‖m_αβ‖ ≤ m_max`.
pub fn saturate_modulation(m: AlphaBeta0, m_max: f64) -> AlphaBeta0 {
    let n = m.norm_ab();
    if n > m_max {
        let k = m_max / n;
        AlphaBeta0::new(m.alpha * k, m.beta * k, m.zero)
    } else {
        m
    }
}

pub fn converter_derivative(
    state: &ConverterState,
    inputs: &ConverterInputs,
    params: &ConverterParams,
) -> Result<ConverterState, SimError> {
    let v_s = switch_voltage(inputs.m, state.v_d);
    let i_x = switch_dc_current(inputs.m, state.i_s);
    let i_d = dc_source_current(state.i_tau, params.i_d_max);
    let d = ConverterState {
        v_d: (i_d - params.g_d * state.v_d - i_x) / params.c_d,
        i_tau: (inputs.i_dc_ref - state.i_tau) / params.tau_d,
        i_s: (v_s - state.i_s * params.r - state.v) * (1.0 / params.l),
        v: (state.i_s - inputs.i_out) * (1.0 / params.c),
    };
    if d.is_finite() {
        Ok(d)
    } else {
        Err(SimError::NonFiniteState)
    }
}

/// Scales a per-module current to the aggregate seen by the network.
pub fn aggregate_output(i_module: AlphaBeta0, n_modules: usize) -> AlphaBeta0 {
    i_module * n_modules as f64
}
