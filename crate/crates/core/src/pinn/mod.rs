//! Neural inner-loop controller: a sigmoid MLP mapping the 18 local
//! measurements to the switch-node voltage command, its losses and training.

pub mod features;
pub mod loss;
pub mod train;

use crate::frames::Dq0;
use crate::SimError;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub use features::N_FEATURES;
pub use loss::LossWeights;

pub const MODEL_FORMAT: &str = "gfcsim-pinn";
pub const MODEL_VERSION: u32 = 1;
pub const N_OUTPUTS: usize = 2;
pub const DEFAULT_HIDDEN: [usize; 3] = [128, 128, 128];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `n_out × n_in`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            w: vec![0.0; n_in * n_out],
            b: vec![0.0; n_out],
        }
    }

    /// Uniform in ±√(6 / (fan_in + fan_out)), zero biases.
    pub fn glorot(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / (n_in + n_out) as f64).sqrt();
        Self {
            n_in,
            n_out,
            w: (0..n_in * n_out).map(|_| rng.gen_range(-a..a)).collect(),
            b: vec![0.0; n_out],
        }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out.iter_mut().zip(self.w.chunks_exact(self.n_in).zip(&self.b)) {
            let mut acc = *b;
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            *o = acc;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub iterations: usize,
    pub seed: u64,
    pub final_mse: f64,
    pub final_physics: f64,
    pub final_total: f64,
    pub heldout_mse: f64,
    pub n_train_samples: usize,
    pub n_heldout_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinnModel {
    pub format: String,
    pub version: u32,
    pub layers: Vec<Layer>,
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
    pub weights: LossWeights,
    /// Rated peak current per module used by the current penalty.
    pub i_peak: f64,
    pub meta: TrainingMeta,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl PinnModel {
    /// Network with the given hidden widths, Glorot-initialized from `seed`,
    /// and identity normalization.
    pub fn new(n_in: usize, hidden: &[usize], n_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![n_in];
        dims.extend_from_slice(hidden);
        dims.push(n_out);
        let layers = dims.windows(2).map(|d| Layer::glorot(d[0], d[1], &mut rng)).collect();
        Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            layers,
            x_mean: vec![0.0; n_in],
            x_std: vec![1.0; n_in],
            y_mean: vec![0.0; n_out],
            y_std: vec![1.0; n_out],
            weights: LossWeights::default(),
            i_peak: crate::converter::ConverterParams::default().i_peak(),
            meta: TrainingMeta {
                seed,
                ..Default::default()
            },
        }
    }

    pub fn n_in(&self) -> usize {
        self.layers.first().map(|l| l.n_in).unwrap_or(0)
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().map(|l| l.n_out).unwrap_or(0)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.format != MODEL_FORMAT {
            return Err(SimError::CorruptModel(format!("unexpected format tag {:?}", self.format)));
        }
        if self.version != MODEL_VERSION {
            return Err(SimError::CorruptModel(format!(
                "model file version {} is not supported (expected {MODEL_VERSION})",
                self.version
            )));
        }
        if self.layers.is_empty() {
            return Err(SimError::CorruptModel("no layers".into()));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.w.len() != l.n_in * l.n_out || l.b.len() != l.n_out {
                return Err(SimError::CorruptModel(format!("layer {k} arrays do not match its shape")));
            }
            if k > 0 && self.layers[k - 1].n_out != l.n_in {
                return Err(SimError::CorruptModel(format!("layer {k} input width does not match layer {}", k - 1)));
            }
        }
        if self.x_mean.len() != self.n_in() || self.x_std.len() != self.n_in() {
            return Err(SimError::CorruptModel("input statistics length".into()));
        }
        if self.y_mean.len() != self.n_out() || self.y_std.len() != self.n_out() {
            return Err(SimError::CorruptModel("output statistics length".into()));
        }
        if self.x_std.iter().chain(&self.y_std).any(|s| !(*s > 0.0)) {
            return Err(SimError::CorruptModel("standard deviations must be positive".into()));
        }
        Ok(())
    }

    /// Forward pass on a normalized input. Returns the output and the
    /// activations of every layer (input first).
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>), SimError> {
        if x.len() != self.n_in() {
            return Err(SimError::ShapeMismatch(format!("expected {} inputs, got {}", self.n_in(), x.len())));
        }
        let mut acts = vec![x.to_vec()];
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; l.n_out];
            l.apply(acts.last().expect("input present"), &mut z);
            if k < last {
                z.iter_mut().for_each(|v| *v = sigmoid(*v));
            }
            acts.push(z);
        }
        let out = acts.last().expect("output present").clone();
        Ok((out, acts))
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.x_mean.iter().zip(&self.x_std)).map(|(v, (m, s))| (v - m) / s).collect()
    }

    pub fn denormalize_x(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(self.x_mean.iter().zip(&self.x_std)).map(|(v, (m, s))| v * s + m).collect()
    }

    pub fn normalize_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(self.y_mean.iter().zip(&self.y_std)).map(|(v, (m, s))| (v - m) / s).collect()
    }

    pub fn denormalize_y(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(self.y_mean.iter().zip(&self.y_std)).map(|(v, (m, s))| v * s + m).collect()
    }

    /// Raw features in, physical command out.
    pub fn predict(&self, features: &[f64]) -> Result<Vec<f64>, SimError> {
        let (z, _) = self.forward(&self.normalize(features))?;
        Ok(self.denormalize_y(&z))
    }

    /// Allocation-light inference used inside the simulation loop; returns the
    /// rotating-frame voltage command.
    pub fn predict_dq(&self, features: &[f64; N_FEATURES]) -> Result<Dq0, SimError> {
        if self.n_in() != N_FEATURES || self.n_out() != N_OUTPUTS {
            return Err(SimError::ShapeMismatch("controller model must be 18 -> 2".into()));
        }
        let mut a: Vec<f64> = self.normalize(features);
        let mut b = Vec::new();
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            b.resize(l.n_out, 0.0);
            l.apply(&a, &mut b);
            if k < last {
                b.iter_mut().for_each(|v| *v = sigmoid(*v));
            }
            std::mem::swap(&mut a, &mut b);
        }
        let y = self.denormalize_y(&a);
        if !(y[0].is_finite() && y[1].is_finite()) {
            return Err(SimError::NonFiniteState);
        }
        Ok(Dq0::new(y[0], y[1], 0.0))
    }

    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| SimError::CorruptModel(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| SimError::CorruptModel(e.to_string()))?;
        if let Some(v) = raw.get("version").and_then(|v| v.as_u64()) {
            if v != MODEL_VERSION as u64 {
                return Err(SimError::CorruptModel(format!(
                    "model file version {v} is not supported (expected {MODEL_VERSION})"
                )));
            }
        }
        let m: PinnModel = serde_json::from_value(raw).map_err(|e| SimError::CorruptModel(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }
}

pub fn save_model(model: &PinnModel, path: &Path) -> Result<(), SimError> {
    model.save(path)
}

pub fn load_model(path: &Path) -> Result<PinnModel, SimError> {
    PinnModel::load(path)
}
