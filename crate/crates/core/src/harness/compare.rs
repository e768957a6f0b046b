//! Runs several controllers on one scenario and tabulates their metrics.

use super::metrics::{extract_metrics_for, MetricsReport};
use super::scenario::{ControllerChoice, ScenarioSpec};
use super::{controller_for, ModelSource};
use crate::network::{run_scenario, RunRecord};
use crate::SimError;
use rayon::prelude::*;
use std::path::Path;

#[derive(Debug)]
pub struct ControllerResult {
    pub choice: ControllerChoice,
    pub outcome: Result<(RunRecord, MetricsReport), SimError>,
}

#[derive(Debug)]
pub struct Comparison {
    pub scenario: String,
    pub results: Vec<ControllerResult>,
}

/// Differences of headline (worst-converter) metrics, `b − a`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Deltas {
    pub f_final: f64,
    pub f_nadir: f64,
    pub setpoint_drift: f64,
    pub p_error: f64,
    pub peak_v_dev: f64,
    pub peak_rocof: f64,
}

pub fn deltas(a: &MetricsReport, b: &MetricsReport) -> Deltas {
    let (x, y) = (&a.worst, &b.worst);
    Deltas {
        f_final: y.f_final - x.f_final,
        f_nadir: y.f_nadir - x.f_nadir,
        setpoint_drift: y.setpoint_drift - x.setpoint_drift,
        p_error: y.p_error - x.p_error,
        peak_v_dev: y.peak_v_dev - x.peak_v_dev,
        peak_rocof: y.peak_rocof - x.peak_rocof,
    }
}

pub fn compare(spec: &ScenarioSpec, choices: &[ControllerChoice], model: &ModelSource) -> Result<Comparison, SimError> {
    spec.validate()?;
    let net = spec.network()?;
    let kinds = choices
        .iter()
        .map(|c| controller_for(*c, model).map(|k| (*c, k)))
        .collect::<Result<Vec<_>, _>>()?;
    let results = kinds
        .par_iter()
        .map(|(c, k)| ControllerResult {
            choice: *c,
            outcome: run_scenario(spec, &net, k).and_then(|r| {
                let m = extract_metrics_for(&r, spec)?;
                Ok((r, m))
            }),
        })
        .collect();
    Ok(Comparison {
        scenario: spec.name.clone(),
        results,
    })
}

pub const COMPARE_HEADER: [&str; 20] = [
    "scenario",
    "controller",
    "status",
    "stable",
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
    "delta_f_final_hz",
    "delta_f_nadir_hz",
    "delta_setpoint_drift_pu",
    "delta_p_error_pu",
    "delta_peak_v_dev_pu",
    "delta_peak_rocof_hz_per_s",
];

/// One row per controller; deltas are relative to the first controller that ran.
pub fn write_comparison_csv(path: &Path, c: &Comparison) -> Result<(), SimError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(COMPARE_HEADER)?;
    let base = c.results.iter().find_map(|r| r.outcome.as_ref().ok().map(|(_, m)| m));
    for r in &c.results {
        let name = format!("{:?}", r.choice).to_lowercase();
        let label = if r.choice == ControllerChoice::Ref11 { format!("{name} (reconstruction)") } else { name };
        let mut row = vec![c.scenario.clone(), label];
        match &r.outcome {
            Ok((_, m)) => {
                row.push(if m.diverged { "diverged".into() } else { "ok".into() });
                row.push(m.stable().to_string());
                let x = &m.worst;
                row.extend(
                    [
                        x.f_nadir,
                        x.f_final,
                        x.peak_rocof,
                        x.peak_rocov,
                        x.peak_v_dev,
                        x.final_v_dev,
                        x.setpoint_drift,
                        x.p_error,
                        x.peak_i_s_ratio,
                        x.peak_i_dc_ratio,
                    ]
                    .iter()
                    .map(|v| v.to_string()),
                );
                let d = base.map(|b| deltas(b, m)).unwrap_or_default();
                row.extend(
                    [d.f_final, d.f_nadir, d.setpoint_drift, d.p_error, d.peak_v_dev, d.peak_rocof]
                        .iter()
                        .map(|v| v.to_string()),
                );
            }
            Err(e) => {
                row.push(format!("error: {e}"));
                row.extend(std::iter::repeat_n(String::new(), COMPARE_HEADER.len() - 3));
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
