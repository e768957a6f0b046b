//! Input vector of the neural controller and the online slope estimator that
//! provides its ROCOF and ROCOV entries.

use crate::control::Measurements;
use crate::frames::Dq0;
use std::collections::VecDeque;

pub const N_FEATURES: usize = 18;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "i_d_m", "i_q_m", "i_o_m", "i_sd_m", "i_sq_m", "i_so_m", "omega", "v_d_m", "v_q_m", "v_o_m", "v_err", "v_gd",
    "v_gq", "v_go", "p", "q", "rocof", "rocov",
];

pub const IDX_I: [usize; 3] = [0, 1, 2];
pub const IDX_I_S: [usize; 3] = [3, 4, 5];
pub const IDX_V: [usize; 3] = [7, 8, 9];
pub const IDX_P: usize = 14;
pub const IDX_ROCOF: usize = 16;
pub const IDX_ROCOV: usize = 17;

/// Builds the feature vector. Currents and voltages are per module in the
/// controller frame, powers in p.u., ROCOF in Hz/s and ROCOV in p.u./s.
pub fn assemble_features(
    m: &Measurements,
    v_g: &Dq0,
    v_ref: f64,
    p_base: f64,
    rocof: f64,
    rocov: f64,
) -> [f64; N_FEATURES] {
    [
        m.i.d,
        m.i.q,
        m.i.zero,
        m.i_s.d,
        m.i_s.q,
        m.i_s.zero,
        m.omega,
        m.v.d,
        m.v.q,
        m.v.zero,
        v_ref - m.v.norm_dq(),
        v_g.d,
        v_g.q,
        v_g.zero,
        m.p / p_base,
        m.q / p_base,
        rocof,
        rocov,
    ]
}

/// Least-squares slope of equally spaced samples.
pub fn ls_slope(ys: &[f64], dt: f64) -> f64 {
    let n = ys.len();
    if n < 2 {
        return 0.0;
    }
    let tm = (n as f64 - 1.0) / 2.0;
    let ym = ys.iter().sum::<f64>() / n as f64;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (k, y) in ys.iter().enumerate() {
        let x = k as f64 - tm;
        sxy += x * (y - ym);
        sxx += x * x;
    }
    sxy / (sxx * dt)
}

/// Trailing least-squares slopes of frequency and voltage magnitude over the
/// most recent `window` samples.
#[derive(Debug, Clone)]
pub struct SlopeTracker {
    window: usize,
    dt: f64,
    f: VecDeque<f64>,
    v: VecDeque<f64>,
    buf: Vec<f64>,
}

impl SlopeTracker {
    pub fn new(window: usize, dt: f64) -> Self {
        Self {
            window,
            dt,
            f: VecDeque::with_capacity(window),
            v: VecDeque::with_capacity(window),
            buf: Vec::with_capacity(window),
        }
    }

    pub fn push(&mut self, f: f64, v: f64) {
        if self.f.len() == self.window {
            self.f.pop_front();
            self.v.pop_front();
        }
        self.f.push_back(f);
        self.v.push_back(v);
    }

    fn slope(&mut self, which: bool) -> f64 {
        self.buf.clear();
        let src = if which { &self.f } else { &self.v };
        self.buf.extend(src.iter().copied());
        ls_slope(&self.buf, self.dt)
    }

    /// (ROCOF, ROCOV) from the samples pushed so far.
    pub fn slopes(&mut self) -> (f64, f64) {
        (self.slope(true), self.slope(false))
    }
}

/// Recomputes the trailing slope of a whole series, as the tracker would.
pub fn trailing_slopes(ys: &[f64], window: usize, dt: f64) -> Vec<f64> {
    (0..ys.len())
        .map(|k| {
            let lo = (k + 1).saturating_sub(window);
            ls_slope(&ys[lo..=k], dt)
        })
        .collect()
}
