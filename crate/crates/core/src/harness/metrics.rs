//! Post-run metrics: frequency nadir, ROCOF/ROCOV peaks, voltage deviation,
//! setpoint drift and the stability verdict.

use super::scenario::T_ISLAND;
use crate::network::RunRecord;
use crate::pinn::features::{ls_slope, IDX_I_S, IDX_P, IDX_V};
use crate::SimError;
use serde::{Deserialize, Serialize};

/// Deviation limit of the stability verdict, p.u.
pub const STABLE_DEVIATION: f64 = 0.05;
/// Trailing span over which the verdict and steady values are evaluated, s.
pub const FINAL_SPAN: f64 = 1.0;
/// Span before islanding that defines the reference voltage, s.
pub const REFERENCE_SPAN: f64 = 1.0;

/// Centered least-squares slope over `window` seconds at every sample,
/// shrinking symmetrically at the record ends.
pub fn centered_slope(ys: &[f64], window: f64, dt: f64) -> Result<Vec<f64>, SimError> {
    let half = ((window / dt).round() as usize / 2).max(1);
    if ys.len() < 2 {
        return Err(SimError::RecordTooShort);
    }
    let n = ys.len();
    Ok((0..n)
        .map(|k| {
            let h = half.min(k).min(n - 1 - k).max(if k == 0 || k == n - 1 { 1 } else { 0 });
            let lo = k.saturating_sub(h);
            let hi = (k + h).min(n - 1);
            ls_slope(&ys[lo..=hi], dt)
        })
        .collect())
}

/// (ROCOF in Hz/s, ROCOV in p.u./s) series of converter `gfc`.
pub fn rocof_rocov(rec: &RunRecord, gfc: usize, window: f64) -> Result<(Vec<f64>, Vec<f64>), SimError> {
    let dt = rec.sample_interval;
    if window < 2.0 * dt {
        return Err(SimError::Config("ROCOF window must span at least two samples".into()));
    }
    let f: Vec<f64> = rec.rows.iter().map(|r| r.gfc[gfc].f).collect();
    let v: Vec<f64> = rec.rows.iter().map(|r| voltage_magnitude(&r.gfc[gfc].features) / rec.v_base).collect();
    Ok((centered_slope(&f, window, dt)?, centered_slope(&v, window, dt)?))
}

pub fn voltage_magnitude(x: &[f64; 18]) -> f64 {
    x[IDX_V[0]].hypot(x[IDX_V[1]])
}

pub fn switch_current(x: &[f64; 18]) -> f64 {
    x[IDX_I_S[0]].hypot(x[IDX_I_S[1]])
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GfcMetrics {
    pub f_nadir: f64,
    pub f_final: f64,
    pub peak_rocof: f64,
    pub peak_rocov: f64,
    /// Largest |‖v‖/v₀ − 1| after islanding, v₀ the pre-islanding mean.
    pub peak_v_dev: f64,
    /// Largest deviation over the final span.
    pub final_v_dev: f64,
    /// |mean effective P_ref − P_ref| over the final span, p.u.
    pub setpoint_drift: f64,
    /// |mean P − P_ref| over the final span, p.u.
    pub p_error: f64,
    /// Largest sampled ‖i_s‖ relative to the AC current limit.
    pub peak_i_s_ratio: f64,
    /// Largest DC source current relative to its limit.
    pub peak_i_dc_ratio: f64,
    /// Share of samples after islanding with the DC source at its limit.
    pub dc_pinned: f64,
    pub stable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub controller: String,
    pub diverged: bool,
    pub diverged_at: Option<f64>,
    pub gfc: Vec<GfcMetrics>,
    /// Worst value of each metric across converters.
    pub worst: GfcMetrics,
}

impl MetricsReport {
    pub fn stable(&self) -> bool {
        !self.diverged && self.worst.stable
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Metrics of every converter after the islanding instant `t_event`.
pub fn extract_metrics_at(rec: &RunRecord, t_event: f64, window: f64) -> Result<MetricsReport, SimError> {
    if rec.rows.len() < 2 {
        return Err(SimError::RecordTooShort);
    }
    let n = rec.n_gfc();
    let t_end = rec.rows.last().expect("rows").t;
    let eps = 1e-9;
    let post = |t: f64| t > t_event + eps;
    let last = |t: f64| t > t_end - FINAL_SPAN + eps;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let (rocof, rocov) = rocof_rocov(rec, k, window)?;
        let rows = &rec.rows;
        let pre = mean(
            rows.iter()
                .filter(|r| r.t <= t_event + eps && r.t > t_event - REFERENCE_SPAN + eps)
                .map(|r| voltage_magnitude(&r.gfc[k].features)),
        );
        let v0 = if pre.is_finite() && pre > 0.0 { pre } else { rec.v_base };
        let dev = |r: &crate::network::SampleRow| (voltage_magnitude(&r.gfc[k].features) / v0 - 1.0).abs();
        let mut m = GfcMetrics {
            f_nadir: f64::INFINITY,
            ..Default::default()
        };
        let mut n_post = 0usize;
        let mut n_pinned = 0usize;
        for (j, r) in rows.iter().enumerate() {
            let s = &r.gfc[k];
            m.peak_i_s_ratio = m.peak_i_s_ratio.max(switch_current(&s.features) / rec.i_ac_max);
            m.peak_i_dc_ratio = m.peak_i_dc_ratio.max(s.i_dc.abs() / rec.i_d_max);
            if !post(r.t) {
                continue;
            }
            m.f_nadir = m.f_nadir.min(s.f);
            m.peak_rocof = m.peak_rocof.max(rocof[j].abs());
            m.peak_rocov = m.peak_rocov.max(rocov[j].abs());
            m.peak_v_dev = m.peak_v_dev.max(dev(r));
            n_post += 1;
            if s.i_dc >= rec.i_d_max * (1.0 - 1e-9) {
                n_pinned += 1;
            }
        }
        if n_post == 0 {
            m.f_nadir = f64::NAN;
        }
        m.dc_pinned = if n_post > 0 { n_pinned as f64 / n_post as f64 } else { 0.0 };
        let tail: Vec<_> = rows.iter().filter(|r| last(r.t)).collect();
        m.final_v_dev = tail.iter().map(|r| dev(r)).fold(0.0, f64::max);
        m.f_final = mean(tail.iter().map(|r| r.gfc[k].f));
        m.setpoint_drift = (mean(tail.iter().map(|r| r.gfc[k].p_ref_eff)) - rec.p_ref).abs();
        m.p_error = (mean(tail.iter().map(|r| r.gfc[k].features[IDX_P])) - rec.p_ref).abs();
        m.stable = !rec.diverged && m.final_v_dev <= STABLE_DEVIATION;
        out.push(m);
    }
    let worst = out.iter().fold(
        GfcMetrics {
            f_nadir: f64::INFINITY,
            f_final: f64::INFINITY,
            stable: true,
            ..Default::default()
        },
        |w, m| GfcMetrics {
            f_nadir: w.f_nadir.min(m.f_nadir),
            f_final: w.f_final.min(m.f_final),
            peak_rocof: w.peak_rocof.max(m.peak_rocof),
            peak_rocov: w.peak_rocov.max(m.peak_rocov),
            peak_v_dev: w.peak_v_dev.max(m.peak_v_dev),
            final_v_dev: w.final_v_dev.max(m.final_v_dev),
            setpoint_drift: w.setpoint_drift.max(m.setpoint_drift),
            p_error: w.p_error.max(m.p_error),
            peak_i_s_ratio: w.peak_i_s_ratio.max(m.peak_i_s_ratio),
            peak_i_dc_ratio: w.peak_i_dc_ratio.max(m.peak_i_dc_ratio),
            dc_pinned: w.dc_pinned.max(m.dc_pinned),
            stable: w.stable && m.stable,
        },
    );
    Ok(MetricsReport {
        scenario: rec.scenario.clone(),
        controller: rec.controller.clone(),
        diverged: rec.diverged,
        diverged_at: rec.diverged_at,
        gfc: out,
        worst,
    })
}

/// Metrics after the standard islanding instant with a 100 ms slope window.
pub fn extract_metrics(rec: &RunRecord) -> Result<MetricsReport, SimError> {
    extract_metrics_at(rec, T_ISLAND, 0.1)
}

/// Metrics after the scenario's own disturbance with its slope window.
pub fn extract_metrics_for(rec: &RunRecord, spec: &super::scenario::ScenarioSpec) -> Result<MetricsReport, SimError> {
    extract_metrics_at(rec, spec.disturbance_time(), spec.rocof_window)
}

pub const METRICS_HEADER: [&str; 17] = [
    "scenario",
    "controller",
    "gfc",
    "f_nadir_hz",
    "f_final_hz",
    "peak_rocof_hz_per_s",
    "peak_rocov_pu_per_s",
    "peak_v_dev_pu",
    "final_v_dev_pu",
    "setpoint_drift_pu",
    "p_error_pu",
    "peak_i_s_over_i_ac_max",
    "peak_i_dc_over_i_d_max",
    "dc_pinned_fraction",
    "stable",
    "diverged",
    "diverged_at_s",
];

pub fn metrics_rows(r: &MetricsReport) -> Vec<Vec<String>> {
    let row = |label: String, m: &GfcMetrics| {
        vec![
            r.scenario.clone(),
            r.controller.clone(),
            label,
            m.f_nadir.to_string(),
            m.f_final.to_string(),
            m.peak_rocof.to_string(),
            m.peak_rocov.to_string(),
            m.peak_v_dev.to_string(),
            m.final_v_dev.to_string(),
            m.setpoint_drift.to_string(),
            m.p_error.to_string(),
            m.peak_i_s_ratio.to_string(),
            m.peak_i_dc_ratio.to_string(),
            m.dc_pinned.to_string(),
            (m.stable && !r.diverged).to_string(),
            r.diverged.to_string(),
            r.diverged_at.map(|t| t.to_string()).unwrap_or_default(),
        ]
    };
    let mut rows: Vec<Vec<String>> = r.gfc.iter().enumerate().map(|(k, m)| row(format!("{}", k + 1), m)).collect();
    rows.push(row("worst".into(), &r.worst));
    rows
}

pub fn write_metrics_csv(path: &std::path::Path, reports: &[MetricsReport]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in reports {
        for row in metrics_rows(r) {
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
