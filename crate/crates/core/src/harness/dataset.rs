//! Training-data sweeps under the droop controller.

use super::metrics::extract_metrics_for;
use super::scenario::ScenarioSpec;
use crate::network::{run_scenario, ControllerKind, NetworkModel, RunRecord};
use crate::pinn::features::{FEATURE_NAMES, N_FEATURES};
use crate::pinn::train::{Trajectory, TrainingSet};
use crate::SimError;
use log::{info, warn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Topology file; the built-in feeder when absent.
    pub topology: Option<PathBuf>,
    pub horizon: f64,
    pub dt: f64,
    /// Local load range per converter as fractions of `local_rated_va`.
    pub local_min: f64,
    pub local_max: f64,
    pub local_rated_va: f64,
    /// Microgrid load range as fractions of `mg_rated_va`.
    pub mg_min: f64,
    pub mg_max: f64,
    pub mg_rated_va: f64,
    /// Also drop runs that end outside the voltage band.
    pub discard_unstable: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            topology: None,
            horizon: super::scenario::DEFAULT_HORIZON,
            dt: super::scenario::DEFAULT_DT,
            local_min: 0.0,
            local_max: 0.9,
            local_rated_va: 1.5e6,
            mg_min: 0.1,
            mg_max: 1.0,
            mg_rated_va: 6.0e6,
            discard_unstable: false,
        }
    }
}

impl SweepConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let s: Self = toml::from_str(text).map_err(|e| SimError::Config(format!("sweep: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Config(format!("cannot read sweep {}: {e}", path.display())))?;
        let mut s = Self::from_toml(&text)?;
        if let Some(t) = s.topology.as_mut() {
            if t.is_relative() {
                *t = path.parent().unwrap_or(Path::new(".")).join(&*t);
            }
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let range = |a: f64, b: f64| a >= 0.0 && a <= b && b.is_finite();
        if !(range(self.local_min, self.local_max) && range(self.mg_min, self.mg_max))
            || !(self.local_rated_va > 0.0 && self.mg_rated_va > 0.0)
        {
            return Err(SimError::Config("sweep load ranges must satisfy 0 <= min <= max".into()));
        }
        Ok(())
    }
}

/// Loads drawn for one run of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub id: String,
    pub mg_load_va: f64,
    pub local_load_va: Vec<f64>,
}

/// Deterministic load draws for `runs` scenarios with `n_gfc` converters.
pub fn draw_loads(cfg: &SweepConfig, runs: usize, n_gfc: usize, seed: u64) -> Vec<Draw> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..runs)
        .map(|i| {
            let mg = cfg.mg_rated_va * rng.gen_range(cfg.mg_min..=cfg.mg_max);
            let local = (0..n_gfc)
                .map(|_| cfg.local_rated_va * rng.gen_range(cfg.local_min..=cfg.local_max))
                .collect();
            Draw {
                id: format!("s{seed}_{i:04}"),
                mg_load_va: mg,
                local_load_va: local,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub draw: Draw,
    pub diverged: bool,
    pub diverged_at: Option<f64>,
    pub stable: bool,
    pub kept: bool,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub set: TrainingSet,
    pub runs: Vec<RunSummary>,
}

pub fn trajectories_of(rec: &RunRecord) -> Vec<Trajectory> {
    (0..rec.n_gfc())
        .map(|k| Trajectory {
            scenario: rec.scenario.clone(),
            gfc: k,
            t: rec.rows.iter().map(|r| r.t).collect(),
            x: rec.rows.iter().map(|r| r.gfc[k].features).collect(),
            y: rec.rows.iter().map(|r| r.gfc[k].v_star).collect(),
        })
        .collect()
}

/// Runs the standard timeline under droop control for every draw. Diverged
/// runs are reported but left out of the training set.
pub fn generate_dataset(cfg: &SweepConfig, runs: usize, seed: u64) -> Result<Dataset, SimError> {
    cfg.validate()?;
    if runs == 0 {
        return Err(SimError::Config("a sweep needs at least one run".into()));
    }
    let model: NetworkModel = match &cfg.topology {
        Some(p) => crate::network::TopologyConfig::load(p)?.build()?,
        None => crate::network::default_topology().build()?,
    };
    let draws = draw_loads(cfg, runs, model.gfcs.len(), seed);
    let results: Vec<Result<(RunSummary, Vec<Trajectory>), SimError>> = draws
        .par_iter()
        .map(|d| {
            let mut spec = ScenarioSpec::standard(&d.id, d.mg_load_va);
            spec.horizon = cfg.horizon;
            // a short sweep keeps only the part of the timeline it covers
            spec.events.retain(|e| e.time <= cfg.horizon);
            spec.dt = cfg.dt;
            spec.local_load_va = Some(d.local_load_va.clone());
            spec.seed = seed;
            let rec = run_scenario(&spec, &model, &ControllerKind::Droop)?;
            let stable = !rec.diverged && extract_metrics_for(&rec, &spec).map(|m| m.stable()).unwrap_or(false);
            let kept = !rec.diverged && (stable || !cfg.discard_unstable);
            info!(
                "{}: mg {:.3} MVA, diverged {}, stable {}",
                d.id,
                d.mg_load_va / 1e6,
                rec.diverged,
                stable
            );
            let tr = if kept { trajectories_of(&rec) } else { Vec::new() };
            Ok((
                RunSummary {
                    draw: d.clone(),
                    diverged: rec.diverged,
                    diverged_at: rec.diverged_at,
                    stable,
                    kept,
                },
                tr,
            ))
        })
        .collect();
    let mut set = TrainingSet::default();
    let mut summaries = Vec::with_capacity(runs);
    for r in results {
        let (s, tr) = r?;
        if !s.kept {
            warn!("{} discarded (diverged {}, stable {})", s.draw.id, s.diverged, s.stable);
        }
        summaries.push(s);
        set.trajectories.extend(tr);
    }
    if set.trajectories.is_empty() {
        return Err(SimError::AllRunsDiverged);
    }
    Ok(Dataset { set, runs: summaries })
}

pub const DATASET_FILE: &str = "dataset.csv";
pub const RUNS_FILE: &str = "runs.csv";

pub fn dataset_header() -> Vec<String> {
    let mut h: Vec<String> = ["scenario", "gfc", "time"].iter().map(|s| s.to_string()).collect();
    h.extend(FEATURE_NAMES.iter().map(|s| s.to_string()));
    h.extend(["target_v_star_d", "target_v_star_q"].iter().map(|s| s.to_string()));
    h
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<(), SimError> {
    std::fs::create_dir_all(dir)?;
    write_training_set(&dir.join(DATASET_FILE), &ds.set)?;
    let mut w = csv::Writer::from_path(dir.join(RUNS_FILE))?;
    let n = ds.runs.first().map(|r| r.draw.local_load_va.len()).unwrap_or(0);
    let mut h: Vec<String> = ["id", "mg_load_va"].iter().map(|s| s.to_string()).collect();
    h.extend((1..=n).map(|k| format!("local_load_va_{k}")));
    h.extend(["diverged", "diverged_at_s", "stable", "kept"].iter().map(|s| s.to_string()));
    w.write_record(&h)?;
    for r in &ds.runs {
        let mut row = vec![r.draw.id.clone(), r.draw.mg_load_va.to_string()];
        row.extend(r.draw.local_load_va.iter().map(|x| x.to_string()));
        row.push(r.diverged.to_string());
        row.push(r.diverged_at.map(|t| t.to_string()).unwrap_or_default());
        row.push(r.stable.to_string());
        row.push(r.kept.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_training_set(path: &Path, set: &TrainingSet) -> Result<(), SimError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(dataset_header())?;
    for tr in &set.trajectories {
        for j in 0..tr.x.len() {
            let mut row = vec![tr.scenario.clone(), tr.gfc.to_string(), tr.t[j].to_string()];
            row.extend(tr.x[j].iter().map(|v| v.to_string()));
            row.push(tr.y[j][0].to_string());
            row.push(tr.y[j][1].to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads `dataset.csv` from a dataset directory (or a CSV file directly).
pub fn read_training_set(path: &Path) -> Result<TrainingSet, SimError> {
    let file = if path.is_dir() { path.join(DATASET_FILE) } else { path.to_path_buf() };
    let mut r = csv::Reader::from_path(&file)
        .map_err(|e| SimError::Config(format!("cannot read dataset {}: {e}", file.display())))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != dataset_header() {
        return Err(SimError::Config(format!("{} does not have the dataset columns", file.display())));
    }
    let mut set = TrainingSet::default();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64, SimError> {
            rec[i].parse().map_err(|_| SimError::Config(format!("bad number {:?} in {}", &rec[i], header[i])))
        };
        let scenario = &rec[0];
        let gfc: usize = rec[1].parse().map_err(|_| SimError::Config("bad converter index".into()))?;
        let new = !matches!(set.trajectories.last(), Some(t) if t.scenario == scenario && t.gfc == gfc);
        if new {
            set.trajectories.push(Trajectory {
                scenario: scenario.to_string(),
                gfc,
                t: Vec::new(),
                x: Vec::new(),
                y: Vec::new(),
            });
        }
        let tr = set.trajectories.last_mut().expect("pushed");
        tr.t.push(num(2)?);
        let mut x = [0.0; N_FEATURES];
        for (j, v) in x.iter_mut().enumerate() {
            *v = num(3 + j)?;
        }
        tr.x.push(x);
        tr.y.push([num(3 + N_FEATURES)?, num(4 + N_FEATURES)?]);
    }
    if set.trajectories.is_empty() {
        return Err(SimError::Config(format!("{} holds no samples", file.display())));
    }
    Ok(set)
}
