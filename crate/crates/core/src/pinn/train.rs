//! Batched forward/backward passes, Adam and the training loop.

use super::features::N_FEATURES;
use super::loss::{
    current_excess, loss_current, loss_rocof, loss_rocov, LossComponents, LossWeights,
};
use super::{sigmoid, Layer, PinnModel, DEFAULT_HIDDEN, N_OUTPUTS};
use crate::SimError;
use log::info;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// One converter's sampled trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub scenario: String,
    pub gfc: usize,
    pub t: Vec<f64>,
    pub x: Vec<[f64; N_FEATURES]>,
    /// Rotating-frame voltage command (d, q).
    pub y: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub trajectories: Vec<Trajectory>,
}

impl TrainingSet {
    pub fn n_samples(&self) -> usize {
        self.trajectories.iter().map(|t| t.x.len()).sum()
    }

    pub fn validate(&self, dt: f64) -> Result<(), SimError> {
        for tr in &self.trajectories {
            if tr.x.len() != tr.y.len() || tr.x.len() != tr.t.len() {
                return Err(SimError::Config(format!("trajectory {}:{} has ragged columns", tr.scenario, tr.gfc)));
            }
            for w in tr.t.windows(2) {
                if ((w[1] - w[0]) - dt).abs() > 1e-6 {
                    return Err(SimError::Config(format!(
                        "trajectory {}:{} is not sampled every {dt} s",
                        tr.scenario, tr.gfc
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    /// Learning rate reached at the last iteration (exponential schedule).
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// Consecutive samples per window; physics pairs never cross windows.
    pub window: usize,
    /// Mini-batches per pass over the training windows; 1 means full batch.
    pub batches_per_epoch: usize,
    pub heldout_fraction: f64,
    pub dt: f64,
    pub weights: LossWeights,
    /// Emphasize constraint-violating samples by weighting their squared
    /// error with (1 + penalty).
    pub reweight: bool,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 6000,
            lr: 1e-3,
            lr_final: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 7,
            hidden: DEFAULT_HIDDEN.to_vec(),
            window: 10,
            batches_per_epoch: 100,
            heldout_fraction: 0.2,
            dt: 0.01,
            weights: LossWeights::default(),
            reweight: false,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        toml::from_str(text).map_err(|e| SimError::Config(format!("training config: {e}")))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let ok = self.iterations > 0
            && self.lr > 0.0
            && self.lr_final > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.window >= 2
            && self.batches_per_epoch >= 1
            && (0.0..1.0).contains(&self.heldout_fraction)
            && self.dt > 0.0
            && !self.hidden.is_empty();
        let w = &self.weights;
        let lam = [w.lambda_pde, w.lambda_current, w.lambda_rocof, w.lambda_rocov];
        if !ok || lam.iter().any(|l| !(*l >= 0.0)) {
            return Err(SimError::Config("invalid training configuration".into()));
        }
        Ok(())
    }
}

/// A set of windows packed for the batched passes. Inputs and targets are
/// normalized; raw features are kept for the constraint terms.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub raw: Vec<[f64; N_FEATURES]>,
    /// (start, len) of each window inside the batch.
    pub windows: Vec<(usize, usize)>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn push_window(&mut self, model: &PinnModel, x: &[[f64; N_FEATURES]], y: &[[f64; 2]]) {
        let start = self.raw.len();
        for (xi, yi) in x.iter().zip(y) {
            self.x.extend(model.normalize(xi));
            self.y.extend(model.normalize_y(yi));
            self.raw.push(*xi);
        }
        self.windows.push((start, x.len()));
    }
}

/// Gradient with the same layout as the model layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(model: &PinnModel) -> Self {
        Self {
            layers: model.layers.iter().map(|l| Layer::zeros(l.n_in, l.n_out)).collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }
}

pub fn flatten(layers: &[Layer]) -> Vec<f64> {
    let mut v = Vec::new();
    for l in layers {
        v.extend_from_slice(&l.w);
        v.extend_from_slice(&l.b);
    }
    v
}

pub fn unflatten(layers: &mut [Layer], v: &[f64]) {
    let mut k = 0;
    for l in layers.iter_mut() {
        let nw = l.w.len();
        l.w.copy_from_slice(&v[k..k + nw]);
        k += nw;
        let nb = l.b.len();
        l.b.copy_from_slice(&v[k..k + nb]);
        k += nb;
    }
}

/// `C (m×n) = A (m×k) · op(B)`; `b_t` selects `B` stored as `n×k` row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    // a: if a_t, stored k×m row-major
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Batched forward pass; returns activations per layer (input first).
pub fn forward_batch(model: &PinnModel, x: &[f64], rows: usize) -> Vec<Vec<f64>> {
    let mut acts = vec![x.to_vec()];
    let last = model.layers.len() - 1;
    for (li, l) in model.layers.iter().enumerate() {
        let mut z = vec![0.0; rows * l.n_out];
        for r in 0..rows {
            z[r * l.n_out..(r + 1) * l.n_out].copy_from_slice(&l.b);
        }
        gemm(rows, l.n_in, l.n_out, acts.last().expect("input present"), false, &l.w, true, &mut z, 1.0);
        if li < last {
            z.iter_mut().for_each(|v| *v = sigmoid(*v));
        }
        acts.push(z);
    }
    acts
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-sample squared-error weights of the reweighting variant.
fn sample_weights(batch: &Batch, model: &PinnModel, w: &LossWeights, reweight: bool) -> Vec<f64> {
    batch
        .raw
        .iter()
        .map(|x| {
            if reweight {
                1.0 + w.lambda_current * current_excess(x, model.i_peak) / model.i_peak
                    + w.lambda_rocof * x[super::features::IDX_ROCOF].abs()
                    + w.lambda_rocov * x[super::features::IDX_ROCOV].abs()
            } else {
                1.0
            }
        })
        .collect()
}

/// Loss components of a batch and the derivative of the training objective
/// with respect to the normalized outputs.
fn loss_and_output_grad(
    out: &[f64],
    batch: &Batch,
    model: &PinnModel,
    w: &LossWeights,
    dt: f64,
    reweight: bool,
) -> (LossComponents, Vec<f64>) {
    let n = batch.len();
    let sw = sample_weights(batch, model, w, reweight);
    let mut g = vec![0.0; n * N_OUTPUTS];
    let mut mse = 0.0;
    for i in 0..n {
        for c in 0..N_OUTPUTS {
            let r = out[i * N_OUTPUTS + c] - batch.y[i * N_OUTPUTS + c];
            mse += r * r;
            g[i * N_OUTPUTS + c] = sw[i] * r / n as f64;
        }
    }
    mse /= (N_OUTPUTS * n) as f64;

    let pairs: usize = batch.windows.iter().map(|(_, l)| l.saturating_sub(1)).sum();
    let mut phys = 0.0;
    if pairs > 0 {
        let scale = w.lambda_pde / (N_OUTPUTS * pairs) as f64;
        for &(s, l) in &batch.windows {
            for i in s..s + l.saturating_sub(1) {
                for c in 0..N_OUTPUTS {
                    let a = out[i * N_OUTPUTS + c];
                    let b = out[(i + 1) * N_OUTPUTS + c];
                    let r = (b - a) / dt + a;
                    phys += r.abs();
                    let gr = scale * sgn(r);
                    g[(i + 1) * N_OUTPUTS + c] += gr / dt;
                    g[i * N_OUTPUTS + c] += gr * (1.0 - 1.0 / dt);
                }
            }
        }
        phys /= (N_OUTPUTS * pairs) as f64;
    }
    let comps = LossComponents {
        mse,
        physics: phys,
        current: loss_current(&batch.raw, model.i_peak),
        rocof: loss_rocof(&batch.raw),
        rocov: loss_rocov(&batch.raw),
    };
    (comps, g)
}

/// Loss components and exact gradients of the training objective.
pub fn backward(
    model: &PinnModel,
    batch: &Batch,
    w: &LossWeights,
    dt: f64,
    reweight: bool,
) -> Result<(LossComponents, Gradients), SimError> {
    let n = batch.len();
    if n == 0 {
        return Err(SimError::EmptyBatch);
    }
    if batch.x.len() != n * model.n_in() || batch.y.len() != n * model.n_out() {
        return Err(SimError::ShapeMismatch("batch does not match model widths".into()));
    }
    let acts = forward_batch(model, &batch.x, n);
    let (comps, mut delta) = loss_and_output_grad(acts.last().expect("output"), batch, model, w, dt, reweight);
    let mut grads = Gradients::zeros_like(model);
    for li in (0..model.layers.len()).rev() {
        let l = &model.layers[li];
        let a_in = &acts[li];
        // dW = δᵀ · a_in
        gemm(l.n_out, n, l.n_in, &delta, true, a_in, false, &mut grads.layers[li].w, 0.0);
        for r in 0..n {
            for (gb, d) in grads.layers[li].b.iter_mut().zip(&delta[r * l.n_out..(r + 1) * l.n_out]) {
                *gb += d;
            }
        }
        if li > 0 {
            let mut d_in = vec![0.0; n * l.n_in];
            gemm(n, l.n_out, l.n_in, &delta, false, &l.w, false, &mut d_in, 0.0);
            for (d, a) in d_in.iter_mut().zip(a_in) {
                *d *= a * (1.0 - a);
            }
            delta = d_in;
        }
    }
    Ok((comps, grads))
}

/// Objective value used by the optimizer (equals `total` unless reweighting).
pub fn objective(model: &PinnModel, batch: &Batch, w: &LossWeights, dt: f64, reweight: bool) -> f64 {
    let acts = forward_batch(model, &batch.x, batch.len());
    let out = acts.last().expect("output");
    let (c, _) = loss_and_output_grad(out, batch, model, w, dt, reweight);
    if !reweight {
        return c.total(w);
    }
    let sw = sample_weights(batch, model, w, true);
    let mut wm = 0.0;
    for i in 0..batch.len() {
        for k in 0..N_OUTPUTS {
            let r = out[i * N_OUTPUTS + k] - batch.y[i * N_OUTPUTS + k];
            wm += sw[i] * r * r;
        }
    }
    wm /= (N_OUTPUTS * batch.len()) as f64;
    c.total(w) - c.mse + wm
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over the flattened parameters.
pub fn adam_step(params: &mut [f64], grads: &[f64], st: &mut AdamState, cfg: &AdamConfig) {
    st.t += 1;
    let t = st.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for k in 0..params.len() {
        let g = grads[k];
        st.m[k] = cfg.beta1 * st.m[k] + (1.0 - cfg.beta1) * g;
        st.v[k] = cfg.beta2 * st.v[k] + (1.0 - cfg.beta2) * g * g;
        let mh = st.m[k] / c1;
        let vh = st.v[k] / c2;
        params[k] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
}

/// Adam step applied to a model in place.
pub fn adam_step_model(model: &mut PinnModel, grads: &Gradients, st: &mut AdamState, cfg: &AdamConfig) {
    let mut p = flatten(&model.layers);
    adam_step(&mut p, &grads.flat(), st, cfg);
    unflatten(&mut model.layers, &p);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub mse: f64,
    pub physics: f64,
    pub current: f64,
    pub rocof: f64,
    pub rocov: f64,
    pub total: f64,
    pub heldout_mse: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PinnModel,
    pub log: Vec<LogRow>,
    /// MSE over the whole training split at the end, normalized units.
    pub train_mse: f64,
    pub heldout_mse: f64,
    pub train_ids: Vec<String>,
    pub heldout_ids: Vec<String>,
}

fn mean_std(cols: usize, rows: impl Iterator<Item = Vec<f64>>) -> (Vec<f64>, Vec<f64>) {
    let mut n = 0usize;
    let mut mean = vec![0.0; cols];
    let mut m2 = vec![0.0; cols];
    for r in rows {
        n += 1;
        for c in 0..cols {
            let d = r[c] - mean[c];
            mean[c] += d / n as f64;
            m2[c] += d * (r[c] - mean[c]);
        }
    }
    let std = m2
        .iter()
        .zip(&mean)
        .map(|(s, m)| {
            let sd = (s / n.max(1) as f64).sqrt();
            if sd > 1e-6 * m.abs().max(1.0) {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

/// Splits whole scenarios into training and held-out groups.
pub fn split_scenarios(set: &TrainingSet, frac: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut ids: Vec<String> = set.trajectories.iter().map(|t| t.scenario.clone()).collect();
    ids.sort();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT);
    ids.shuffle(&mut rng);
    let n_held = if ids.len() > 1 {
        ((ids.len() as f64 * frac).round() as usize).clamp(1, ids.len() - 1)
    } else {
        0
    };
    let held = ids[..n_held].to_vec();
    let mut train = ids[n_held..].to_vec();
    train.sort();
    let mut held = held;
    held.sort();
    (train, held)
}

const SPLIT_SALT: u64 = 0x5eed_5911;

fn windows_of(set: &TrainingSet, ids: &[String], len: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (ti, tr) in set.trajectories.iter().enumerate() {
        if ids.binary_search(&tr.scenario).is_err() {
            continue;
        }
        let mut s = 0;
        while s + len <= tr.x.len() {
            out.push((ti, s));
            s += len;
        }
        if s < tr.x.len() && tr.x.len() - s >= 2 {
            out.push((ti, s));
        }
    }
    out
}

fn build_batch(model: &PinnModel, set: &TrainingSet, wins: &[(usize, usize)], len: usize) -> Batch {
    let mut b = Batch::default();
    for &(ti, s) in wins {
        let tr = &set.trajectories[ti];
        let e = (s + len).min(tr.x.len());
        b.push_window(model, &tr.x[s..e], &tr.y[s..e]);
    }
    b
}

/// MSE of the model over all samples of the given scenarios, normalized units.
pub fn dataset_mse(model: &PinnModel, set: &TrainingSet, ids: &[String]) -> f64 {
    let mut se = 0.0;
    let mut n = 0usize;
    for tr in set.trajectories.iter().filter(|t| ids.binary_search(&t.scenario).is_ok()) {
        for chunk in (0..tr.x.len()).collect::<Vec<_>>().chunks(2048) {
            let mut b = Batch::default();
            let lo = chunk[0];
            let hi = chunk[chunk.len() - 1] + 1;
            b.push_window(model, &tr.x[lo..hi], &tr.y[lo..hi]);
            let acts = forward_batch(model, &b.x, b.len());
            let out = acts.last().expect("output");
            for (o, y) in out.iter().zip(&b.y) {
                se += (o - y) * (o - y);
            }
            n += b.len();
        }
    }
    if n == 0 {
        return f64::NAN;
    }
    se / (N_OUTPUTS * n) as f64
}

/// Trains a model on `set`. Each group of `batches_per_epoch` iterations is one
/// pass over the training windows in a seeded order.
pub fn train(set: &TrainingSet, cfg: &TrainConfig, log_sink: Option<&Path>) -> Result<TrainOutcome, SimError> {
    cfg.validate()?;
    if set.trajectories.is_empty() || set.n_samples() == 0 {
        return Err(SimError::EmptyBatch);
    }
    set.validate(cfg.dt)?;
    let (train_ids, held_ids) = split_scenarios(set, cfg.heldout_fraction, cfg.seed);

    let mut model = PinnModel::new(N_FEATURES, &cfg.hidden, N_OUTPUTS, cfg.seed);
    model.weights = cfg.weights;
    let train_rows = || {
        set.trajectories
            .iter()
            .filter(|t| train_ids.binary_search(&t.scenario).is_ok())
            .flat_map(|t| t.x.iter().zip(&t.y))
    };
    let (xm, xs) = mean_std(N_FEATURES, train_rows().map(|(x, _)| x.to_vec()));
    let (ym, ys) = mean_std(N_OUTPUTS, train_rows().map(|(_, y)| y.to_vec()));
    model.x_mean = xm;
    model.x_std = xs;
    model.y_mean = ym;
    model.y_std = ys;

    let mut wins = windows_of(set, &train_ids, cfg.window);
    if wins.is_empty() {
        return Err(SimError::EmptyBatch);
    }
    let nb = cfg.batches_per_epoch.min(wins.len());
    let mut adam = AdamState::new(model.n_params());
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut writer = match log_sink {
        Some(p) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(p)?);
            writeln!(f, "iteration,L_MSE,L_Physics,L_current,L_ROCOF,L_ROCOV,total,heldout_MSE")?;
            Some(f)
        }
        None => None,
    };
    let decay = (cfg.lr_final / cfg.lr).ln() / (cfg.iterations.max(2) - 1) as f64;
    let mut batches: Vec<Batch> = Vec::new();
    for it in 0..cfg.iterations {
        let slot = it % nb;
        if slot == 0 {
            let epoch = (it / nb) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(epoch));
            wins.shuffle(&mut rng);
            let per = wins.len().div_ceil(nb);
            batches = wins.chunks(per).map(|c| build_batch(&model, set, c, cfg.window)).collect();
        }
        let batch = &batches[slot.min(batches.len() - 1)];
        let (comps, grads) = backward(&model, batch, &cfg.weights, cfg.dt, cfg.reweight)?;
        let total = comps.total(&cfg.weights);
        if !total.is_finite() || !comps.is_finite() {
            return Err(SimError::Diverged(it));
        }
        let lr = cfg.lr * (decay * it as f64).exp();
        adam_step_model(
            &mut model,
            &grads,
            &mut adam,
            &AdamConfig {
                lr,
                beta1: cfg.beta1,
                beta2: cfg.beta2,
                eps: cfg.eps,
            },
        );
        let held = if (it + 1) % cfg.log_every.max(1) == 0 && !held_ids.is_empty() {
            Some(dataset_mse(&model, set, &held_ids))
        } else {
            None
        };
        let row = LogRow {
            iteration: it + 1,
            mse: comps.mse,
            physics: comps.physics,
            current: comps.current,
            rocof: comps.rocof,
            rocov: comps.rocov,
            total,
            heldout_mse: held,
        };
        if let Some(h) = held {
            info!("iteration {} total {:.6} mse {:.6} held-out {:.6}", it + 1, total, comps.mse, h);
        }
        if let Some(f) = writer.as_mut() {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{}",
                row.iteration,
                row.mse,
                row.physics,
                row.current,
                row.rocof,
                row.rocov,
                row.total,
                row.heldout_mse.map(|h| h.to_string()).unwrap_or_default()
            )?;
        }
        log.push(row);
    }
    if let Some(mut f) = writer {
        f.flush()?;
    }
    let train_mse = dataset_mse(&model, set, &train_ids);
    let heldout_mse = if held_ids.is_empty() { f64::NAN } else { dataset_mse(&model, set, &held_ids) };
    let last = log.last().copied();
    model.meta = super::TrainingMeta {
        iterations: cfg.iterations,
        seed: cfg.seed,
        final_mse: train_mse,
        final_physics: last.map(|r| r.physics).unwrap_or(0.0),
        final_total: last.map(|r| r.total).unwrap_or(0.0),
        heldout_mse,
        n_train_samples: train_rows().count(),
        n_heldout_samples: set.n_samples() - train_rows().count(),
    };
    Ok(TrainOutcome {
        model,
        log,
        train_mse,
        heldout_mse,
        train_ids,
        heldout_ids: held_ids,
    })
}

/// Means of consecutive non-overlapping blocks of the total loss.
pub fn block_means(log: &[LogRow], block: usize) -> Vec<f64> {
    log.chunks(block)
        .filter(|c| c.len() == block)
        .map(|c| c.iter().map(|r| r.total).sum::<f64>() / block as f64)
        .collect()
}
