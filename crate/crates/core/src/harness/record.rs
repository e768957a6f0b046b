//! CSV form of a run record.
//!
//! Columns: `time`, then per converter `k` (1-based) the 18 features and
//! `v_s_alpha_ref`, `v_s_beta_ref`, `v_d`, `i_d`, `f` prefixed `gfc{k}_`, then
//! `diverged`, then per converter the auxiliary `v_star_d`, `v_star_q`,
//! `theta`, `p_ref_eff`.

use crate::converter::ConverterParams;
use crate::control::ControlGains;
use crate::network::engine::GfcSample;
use crate::network::{RunRecord, SampleRow};
use crate::pinn::features::{FEATURE_NAMES, N_FEATURES};
use crate::SimError;
use std::path::Path;

const MAIN: [&str; 5] = ["v_s_alpha_ref", "v_s_beta_ref", "v_d", "i_d", "f"];
const AUX: [&str; 4] = ["v_star_d", "v_star_q", "theta", "p_ref_eff"];

pub fn record_header(n_gfc: usize) -> Vec<String> {
    let mut h = vec!["time".to_string()];
    for k in 1..=n_gfc {
        h.extend(FEATURE_NAMES.iter().chain(MAIN.iter()).map(|c| format!("gfc{k}_{c}")));
    }
    h.push("diverged".into());
    for k in 1..=n_gfc {
        h.extend(AUX.iter().map(|c| format!("gfc{k}_{c}")));
    }
    h
}

pub fn write_record_csv(path: &Path, rec: &RunRecord) -> Result<(), SimError> {
    let file = std::fs::File::create(path)?;
    write_record(file, rec)
}

pub fn write_record<W: std::io::Write>(out: W, rec: &RunRecord) -> Result<(), SimError> {
    let n = rec.n_gfc().max(rec.peak_i_s.len());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(record_header(n))?;
    let flag = if rec.diverged { "1" } else { "0" };
    for r in &rec.rows {
        let mut row = Vec::with_capacity(1 + n * 27);
        row.push(r.t.to_string());
        for g in &r.gfc {
            row.extend(g.features.iter().map(|x| x.to_string()));
            row.extend([g.v_s_ref[0], g.v_s_ref[1], g.v_dc, g.i_dc, g.f].iter().map(|x| x.to_string()));
        }
        row.push(flag.into());
        for g in &r.gfc {
            row.extend([g.v_star[0], g.v_star[1], g.theta, g.p_ref_eff].iter().map(|x| x.to_string()));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a record written by [`write_record_csv`]. Limits and bases, which
/// the file does not carry, are taken from the default converter.
pub fn read_record_csv(path: &Path) -> Result<RunRecord, SimError> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let per = N_FEATURES + MAIN.len();
    let n = (header.len() - 2) / (per + AUX.len());
    if header != record_header(n) {
        return Err(SimError::Config(format!("{} is not a run record", path.display())));
    }
    let mut rows = Vec::new();
    let mut diverged = false;
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64, SimError> {
            rec[i].parse().map_err(|_| SimError::Config(format!("bad number {:?} in column {}", &rec[i], header[i])))
        };
        let mut gfc = Vec::with_capacity(n);
        for k in 0..n {
            let b = 1 + k * per;
            let a = 2 + n * per + k * AUX.len();
            let mut s = GfcSample::default();
            for j in 0..N_FEATURES {
                s.features[j] = num(b + j)?;
            }
            let m = b + N_FEATURES;
            s.v_s_ref = [num(m)?, num(m + 1)?];
            s.v_dc = num(m + 2)?;
            s.i_dc = num(m + 3)?;
            s.f = num(m + 4)?;
            s.v_star = [num(a)?, num(a + 1)?];
            s.theta = num(a + 2)?;
            s.p_ref_eff = num(a + 3)?;
            gfc.push(s);
        }
        diverged = &rec[1 + n * per] == "1";
        rows.push(SampleRow { t: num(0)?, gfc });
    }
    let params = ConverterParams::default();
    let gains = ControlGains::for_params(&params);
    let dt = if rows.len() > 1 { rows[1].t - rows[0].t } else { 0.01 };
    Ok(RunRecord {
        scenario: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        controller: String::new(),
        sample_interval: dt,
        diverged_at: if diverged { rows.last().map(|r| r.t) } else { None },
        rows,
        diverged,
        peak_i_s: vec![0.0; n],
        peak_i_dc: vec![0.0; n],
        v_base: gains.v_base,
        i_peak: params.i_peak(),
        i_ac_max: params.i_ac_max,
        i_d_max: params.i_d_max,
        p_ref: gains.p_ref / gains.p_base,
    })
}
