//! Reconstruction of a threshold-based current limiter that lowers the
//! active-power setpoint while the converter current is high.

use crate::control::ControlGains;
use crate::SimError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ref11Params {
    /// Current threshold as a fraction of rated peak current.
    pub threshold: f64,
    /// Setpoint reduction (p.u. power) per p.u. of current above threshold.
    pub gain: f64,
}

impl Default for Ref11Params {
    fn default() -> Self {
        Self {
            threshold: 0.9,
            gain: 1.0,
        }
    }
}

impl Ref11Params {
    pub fn new(threshold: f64, gain: f64) -> Result<Self, SimError> {
        if !(threshold > 0.0 && threshold < 1.2) || !(gain >= 0.0) {
            return Err(SimError::Config(format!("limiter threshold {threshold} must lie in (0, 1.2)")));
        }
        Ok(Self { threshold, gain })
    }

    /// Setpoint in watts after the reduction for switch-node current `i_s`.
    pub fn effective_p_ref(&self, g: &ControlGains, i_s: f64, i_peak: f64) -> f64 {
        let excess = (i_s / i_peak - self.threshold).max(0.0);
        (g.p_ref - self.gain * excess * g.p_base).max(0.0)
    }
}

/// Gains of the limiter variant seen at current `i_s`.
pub fn ref11_limiter_variant(g: &ControlGains, p: &Ref11Params, i_s: f64, i_peak: f64) -> ControlGains {
    ControlGains {
        p_ref: p.effective_p_ref(g, i_s, i_peak),
        ..*g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inactive_below_threshold() {
        let g = ControlGains::default();
        let p = Ref11Params::default();
        assert_eq!(ref11_limiter_variant(&g, &p, 0.5 * 408.0, 408.0), g);
    }

    #[test]
    fn reduces_above_threshold() {
        let g = ControlGains::default();
        let p = Ref11Params::default();
        let e = p.effective_p_ref(&g, 1.1 * 408.0, 408.0);
        assert!((g.p_ref - e - 0.2 * g.p_base).abs() < 1e-6);
        assert_eq!(p.effective_p_ref(&g, 10.0 * 408.0, 408.0), 0.0);
        assert!(Ref11Params::new(1.3, 1.0).is_err());
    }
}
