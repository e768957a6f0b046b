//! Reference-frame transforms (abc, αβ0, dq0) and instantaneous power.
//!
//! Clarke is amplitude invariant: a balanced set with peak `X` maps to an αβ
//! vector of length `X`, so powers carry the 3/2 factor.

use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul, Neg, Sub};

const SQRT3_2: f64 = 0.866_025_403_784_438_6;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ThreePhase {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AlphaBeta0 {
    pub alpha: f64,
    pub beta: f64,
    pub zero: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Dq0 {
    pub d: f64,
    pub q: f64,
    pub zero: f64,
    pub theta_used: f64,
}

impl ThreePhase {
    pub fn new(a: f64, b: f64, c: f64) -> Self {
        Self { a, b, c }
    }

    /// Balanced positive-sequence set `amp·cos(θ − k·2π/3)`.
    pub fn balanced(amp: f64, theta: f64) -> Self {
        let k = 2.0 * std::f64::consts::PI / 3.0;
        Self {
            a: amp * theta.cos(),
            b: amp * (theta - k).cos(),
            c: amp * (theta + k).cos(),
        }
    }
}

impl AlphaBeta0 {
    pub const ZERO: AlphaBeta0 = AlphaBeta0 {
        alpha: 0.0,
        beta: 0.0,
        zero: 0.0,
    };

    pub fn new(alpha: f64, beta: f64, zero: f64) -> Self {
        Self { alpha, beta, zero }
    }

    /// Length of the αβ part (zero sequence excluded).
    pub fn norm_ab(&self) -> f64 {
        self.alpha.hypot(self.beta)
    }

    pub fn norm(&self) -> f64 {
        (self.alpha * self.alpha + self.beta * self.beta + self.zero * self.zero).sqrt()
    }

    pub fn dot(&self, o: &AlphaBeta0) -> f64 {
        self.alpha * o.alpha + self.beta * o.beta + self.zero * o.zero
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.is_finite() && self.beta.is_finite() && self.zero.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.alpha, self.beta, self.zero]
    }

    pub fn from_array(x: [f64; 3]) -> Self {
        Self::new(x[0], x[1], x[2])
    }
}

impl Add for AlphaBeta0 {
    type Output = AlphaBeta0;
    fn add(self, o: AlphaBeta0) -> AlphaBeta0 {
        AlphaBeta0::new(self.alpha + o.alpha, self.beta + o.beta, self.zero + o.zero)
    }
}

impl Sub for AlphaBeta0 {
    type Output = AlphaBeta0;
    fn sub(self, o: AlphaBeta0) -> AlphaBeta0 {
        AlphaBeta0::new(self.alpha - o.alpha, self.beta - o.beta, self.zero - o.zero)
    }
}

impl Neg for AlphaBeta0 {
    type Output = AlphaBeta0;
    fn neg(self) -> AlphaBeta0 {
        AlphaBeta0::new(-self.alpha, -self.beta, -self.zero)
    }
}

impl Mul<f64> for AlphaBeta0 {
    type Output = AlphaBeta0;
    fn mul(self, k: f64) -> AlphaBeta0 {
        AlphaBeta0::new(self.alpha * k, self.beta * k, self.zero * k)
    }
}

impl Dq0 {
    pub fn new(d: f64, q: f64, zero: f64) -> Self {
        Self {
            d,
            q,
            zero,
            theta_used: 0.0,
        }
    }

    pub fn norm_dq(&self) -> f64 {
        self.d.hypot(self.q)
    }

    pub fn norm(&self) -> f64 {
        (self.d * self.d + self.q * self.q + self.zero * self.zero).sqrt()
    }

    /// Componentwise scaling; keeps the frame angle.
    pub fn scale(&self, k: f64) -> Dq0 {
        Dq0 {
            d: self.d * k,
            q: self.q * k,
            zero: self.zero * k,
            theta_used: self.theta_used,
        }
    }

    /// 90° rotation in the dq plane: (d, q) -> (−q, d).
    pub fn rot90(&self) -> Dq0 {
        Dq0 {
            d: -self.q,
            q: self.d,
            zero: 0.0,
            theta_used: self.theta_used,
        }
    }

    pub fn plus(&self, o: &Dq0) -> Dq0 {
        Dq0 {
            d: self.d + o.d,
            q: self.q + o.q,
            zero: self.zero + o.zero,
            theta_used: self.theta_used,
        }
    }

    pub fn minus(&self, o: &Dq0) -> Dq0 {
        Dq0 {
            d: self.d - o.d,
            q: self.q - o.q,
            zero: self.zero - o.zero,
            theta_used: self.theta_used,
        }
    }
}

pub fn abc_to_ab0(x: ThreePhase) -> AlphaBeta0 {
    AlphaBeta0 {
        alpha: (2.0 / 3.0) * (x.a - 0.5 * x.b - 0.5 * x.c),
        beta: (2.0 / 3.0) * SQRT3_2 * (x.b - x.c),
        zero: (x.a + x.b + x.c) / 3.0,
    }
}

pub fn ab0_to_abc(x: AlphaBeta0) -> ThreePhase {
    ThreePhase {
        a: x.alpha + x.zero,
        b: -0.5 * x.alpha + SQRT3_2 * x.beta + x.zero,
        c: -0.5 * x.alpha - SQRT3_2 * x.beta + x.zero,
    }
}

pub fn ab0_to_dq0(x: AlphaBeta0, theta: f64) -> Dq0 {
    let (s, c) = theta.sin_cos();
    Dq0 {
        d: x.alpha * c + x.beta * s,
        q: -x.alpha * s + x.beta * c,
        zero: x.zero,
        theta_used: theta,
    }
}

pub fn dq0_to_ab0(x: Dq0, theta: f64) -> AlphaBeta0 {
    let (s, c) = theta.sin_cos();
    AlphaBeta0 {
        alpha: x.d * c - x.q * s,
        beta: x.d * s + x.q * c,
        zero: x.zero,
    }
}

/// Instantaneous active and reactive power of peak-valued αβ signals.
pub fn instantaneous_pq(v: AlphaBeta0, i: AlphaBeta0) -> (f64, f64) {
    let p = 1.5 * (v.alpha * i.alpha + v.beta * i.beta);
    let q = 1.5 * (v.beta * i.alpha - v.alpha * i.beta);
    (p, q)
}
