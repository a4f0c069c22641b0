//! Elman recurrent network mapping a system setting to a control window, with
//! BPTT training, JSON persistence and receding-horizon rollout.
//!
//! The input vector is fed at every step; step `k` emits one logistic output per
//! control channel, rescaled to that channel's bounds.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bo::dataset::ControlDataset;
use crate::bo::window::step_state;
use crate::control::{evaluate_from, Channel, ControlSignal, ObjectiveConfig, ObjectiveEval, ScenarioSetting};
use crate::error::{Error, Result};
use crate::integrator::IntegratorConfig;
use crate::params::ParameterSet;
use crate::state::{state_scales, StateVector, STATE_DIM};

pub const MODEL_VERSION: u32 = 1;

/// Floor inside the log of capacity-normalized state components.
const LOG_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub input_dim: usize,
    pub hidden: usize,
    /// Outputs per step (control channels).
    pub outputs: usize,
    /// Steps per window.
    pub d: usize,
}

impl Arch {
    pub fn param_count(&self) -> usize {
        (self.input_dim + 1) * self.hidden + (self.hidden + 1) * self.hidden + (self.hidden + 1) * self.outputs
    }

    // Offsets of each block in the flat parameter vector.
    fn w_xh(&self) -> usize {
        0
    }
    fn b_xh(&self) -> usize {
        self.hidden * self.input_dim
    }
    fn w_hh(&self) -> usize {
        self.b_xh() + self.hidden
    }
    fn b_hh(&self) -> usize {
        self.w_hh() + self.hidden * self.hidden
    }
    fn w_o(&self) -> usize {
        self.b_hh() + self.hidden
    }
    fn b_o(&self) -> usize {
        self.w_o() + self.outputs * self.hidden
    }
}

/// How raw inputs are built from a setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FeatureMap {
    /// Inputs are given directly.
    Raw,
    /// Log of the capacity-normalized 20-component state, then the listed overrides.
    Setting { override_keys: Vec<String>, state_scales: Vec<f64> },
}

impl FeatureMap {
    pub fn setting(override_keys: Vec<String>, p: &ParameterSet) -> Self {
        FeatureMap::Setting { override_keys, state_scales: state_scales(p).to_vec() }
    }

    pub fn features(&self, state: &StateVector, overrides: &BTreeMap<String, f64>) -> Result<Vec<f64>> {
        match self {
            FeatureMap::Raw => Err(Error::config("raw feature map takes input vectors, not settings")),
            FeatureMap::Setting { override_keys, state_scales } => {
                let mut f: Vec<f64> =
                    (0..STATE_DIM).map(|i| (LOG_FLOOR + state.0[i].max(0.0) / state_scales[i]).ln()).collect();
                for k in override_keys {
                    let v = overrides.get(k).ok_or_else(|| Error::domain(format!("setting lacks override `{k}`")))?;
                    f.push(*v);
                }
                Ok(f)
            }
        }
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            FeatureMap::Raw => None,
            FeatureMap::Setting { override_keys, .. } => Some(STATE_DIM + override_keys.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnModel {
    pub version: u32,
    pub arch: Arch,
    pub features: FeatureMap,
    /// Present when the model drives the sepsis controls.
    pub channel: Option<Channel>,
    /// Per-output control bounds.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub weights: Weights,
    /// Unit-space outputs within this distance of 0 or 1 are applied at the
    /// bound. A logistic output never reaches its bounds, and a small residual
    /// dose away from a saturated optimum can cost a lot; zero disables.
    #[serde(default = "default_bound_snap")]
    pub bound_snap: f64,
}

pub const DEFAULT_BOUND_SNAP: f64 = 0.02;

fn default_bound_snap() -> f64 {
    DEFAULT_BOUND_SNAP
}

fn snap_unit(y: f64, tol: f64) -> f64 {
    if y <= tol {
        0.0
    } else if y >= 1.0 - tol {
        1.0
    } else {
        y
    }
}

/// Weight blocks, row-major with explicit shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub w_xh: Matrix,
    pub b_xh: Vec<f64>,
    pub w_hh: Matrix,
    pub b_hh: Vec<f64>,
    pub w_o: Matrix,
    pub b_o: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Weights {
    fn from_flat(a: &Arch, w: &[f64]) -> Self {
        let m = |off: usize, rows: usize, cols: usize| Matrix { rows, cols, data: w[off..off + rows * cols].to_vec() };
        Weights {
            w_xh: m(a.w_xh(), a.hidden, a.input_dim),
            b_xh: w[a.b_xh()..a.b_xh() + a.hidden].to_vec(),
            w_hh: m(a.w_hh(), a.hidden, a.hidden),
            b_hh: w[a.b_hh()..a.b_hh() + a.hidden].to_vec(),
            w_o: m(a.w_o(), a.outputs, a.hidden),
            b_o: w[a.b_o()..a.b_o() + a.outputs].to_vec(),
        }
    }

    fn flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for part in [&self.w_xh.data, &self.b_xh, &self.w_hh.data, &self.b_hh, &self.w_o.data, &self.b_o] {
            v.extend_from_slice(part);
        }
        v
    }

    pub fn count(&self) -> usize {
        self.w_xh.data.len() + self.b_xh.len() + self.w_hh.data.len() + self.b_hh.len() + self.w_o.data.len() + self.b_o.len()
    }

    fn check(&self, a: &Arch) -> Result<()> {
        let shapes = [
            (&self.w_xh, a.hidden, a.input_dim),
            (&self.w_hh, a.hidden, a.hidden),
            (&self.w_o, a.outputs, a.hidden),
        ];
        for (m, r, c) in shapes {
            if m.rows != r || m.cols != c || m.data.len() != r * c {
                return Err(Error::config("weight matrix shape does not match the architecture"));
            }
        }
        if self.b_xh.len() != a.hidden || self.b_hh.len() != a.hidden || self.b_o.len() != a.outputs {
            return Err(Error::config("bias length does not match the architecture"));
        }
        if self.flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::config("non-finite weight"));
        }
        Ok(())
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

// Activations of one unroll, kept for backpropagation.
struct Tape {
    h: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
}

fn forward(a: &Arch, w: &[f64], x: &[f64]) -> Tape {
    let (nh, no) = (a.hidden, a.outputs);
    // The input projection is the same at every step.
    let mut xin = vec![0.0; nh];
    for i in 0..nh {
        let row = &w[a.w_xh() + i * a.input_dim..a.w_xh() + (i + 1) * a.input_dim];
        xin[i] = w[a.b_xh() + i] + w[a.b_hh() + i] + row.iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
    }
    let mut h = vec![vec![0.0; nh]];
    let mut y = Vec::with_capacity(a.d);
    for k in 0..a.d {
        let prev = &h[k];
        let next: Vec<f64> = (0..nh)
            .map(|i| {
                let row = &w[a.w_hh() + i * nh..a.w_hh() + (i + 1) * nh];
                (xin[i] + row.iter().zip(prev).map(|(p, q)| p * q).sum::<f64>()).tanh()
            })
            .collect();
        let out: Vec<f64> = (0..no)
            .map(|o| {
                let row = &w[a.w_o() + o * nh..a.w_o() + (o + 1) * nh];
                sigmoid(w[a.b_o() + o] + row.iter().zip(&next).map(|(p, q)| p * q).sum::<f64>())
            })
            .collect();
        h.push(next);
        y.push(out);
    }
    Tape { h, y }
}

/// Squared error of one sample (summed) and its gradient added into `grad`
/// with weight `scale`.
fn backward(a: &Arch, w: &[f64], x: &[f64], target: &[f64], scale: f64, grad: &mut [f64]) -> f64 {
    let (nh, no) = (a.hidden, a.outputs);
    let tape = forward(a, w, x);
    let mut loss = 0.0;
    let mut dh_next = vec![0.0; nh];
    let mut dxin = vec![0.0; nh];
    for k in (0..a.d).rev() {
        let h = &tape.h[k + 1];
        let hp = &tape.h[k];
        let mut dh = dh_next.clone();
        for o in 0..no {
            let y = tape.y[k][o];
            let e = y - target[k * no + o];
            loss += e * e;
            let dz = scale * 2.0 * e * y * (1.0 - y);
            grad[a.b_o() + o] += dz;
            for i in 0..nh {
                grad[a.w_o() + o * nh + i] += dz * h[i];
                dh[i] += dz * w[a.w_o() + o * nh + i];
            }
        }
        let da: Vec<f64> = (0..nh).map(|i| dh[i] * (1.0 - h[i] * h[i])).collect();
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..nh {
            dxin[i] += da[i];
            for j in 0..nh {
                grad[a.w_hh() + i * nh + j] += da[i] * hp[j];
                dh_next[j] += da[i] * w[a.w_hh() + i * nh + j];
            }
        }
    }
    for i in 0..nh {
        grad[a.b_xh() + i] += dxin[i];
        grad[a.b_hh() + i] += dxin[i];
        for j in 0..a.input_dim {
            grad[a.w_xh() + i * a.input_dim + j] += dxin[i] * x[j];
        }
    }
    loss
}

/// Mean squared error over samples, steps and channels, with its gradient.
pub fn loss_and_grad(a: &Arch, w: &[f64], inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; w.len()];
    let denom = (inputs.len() * a.d * a.outputs) as f64;
    let mut loss = 0.0;
    for (x, t) in inputs.iter().zip(targets) {
        loss += backward(a, w, x, t, 1.0 / denom, &mut grad);
    }
    (loss / denom, grad)
}

/// Mean squared error without gradients.
pub fn loss(a: &Arch, w: &[f64], inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (x, t) in inputs.iter().zip(targets) {
        let tape = forward(a, w, x);
        for (k, y) in tape.y.iter().enumerate() {
            for (o, v) in y.iter().enumerate() {
                total += (v - t[k * a.outputs + o]).powi(2);
            }
        }
    }
    total / (inputs.len() * a.d * a.outputs) as f64
}

impl RnnModel {
    /// Model with all weights zero.
    pub fn zeros(arch: Arch, features: FeatureMap, channel: Option<Channel>, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        RnnModel {
            version: MODEL_VERSION,
            arch,
            features,
            channel,
            lower,
            upper,
            input_mean: vec![0.0; arch.input_dim],
            input_scale: vec![1.0; arch.input_dim],
            weights: Weights::from_flat(&arch, &vec![0.0; arch.param_count()]),
            bound_snap: DEFAULT_BOUND_SNAP,
        }
    }

    pub fn flat_weights(&self) -> Vec<f64> {
        self.weights.flat()
    }

    pub fn set_flat_weights(&mut self, w: &[f64]) -> Result<()> {
        if w.len() != self.arch.param_count() {
            return Err(Error::domain("weight vector length does not match the architecture"));
        }
        self.weights = Weights::from_flat(&self.arch, w);
        Ok(())
    }

    fn standardize(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.arch.input_dim {
            return Err(Error::domain(format!("input has {} features, model expects {}", raw.len(), self.arch.input_dim)));
        }
        Ok(raw.iter().zip(&self.input_mean).zip(&self.input_scale).map(|((v, m), s)| (v - m) / s).collect())
    }

    /// Outputs in `[0,1]`, step-major (`d` rows of `outputs` values).
    pub fn predict_unit(&self, raw: &[f64]) -> Result<Vec<Vec<f64>>> {
        let x = self.standardize(raw)?;
        Ok(forward(&self.arch, &self.weights.flat(), &x).y)
    }

    /// Control window from raw inputs: one row of `d` values per channel, within bounds.
    pub fn predict_window(&self, raw: &[f64]) -> Result<Vec<Vec<f64>>> {
        let y = self.predict_unit(raw)?;
        Ok((0..self.arch.outputs)
            .map(|o| {
                let (lo, hi) = (self.lower[o], self.upper[o]);
                y.iter().map(|r| (lo + (hi - lo) * snap_unit(r[o], self.bound_snap)).clamp(lo, hi)).collect()
            })
            .collect())
    }

    /// Control window for a state plus parameter overrides.
    pub fn predict_setting(&self, state: &StateVector, overrides: &BTreeMap<String, f64>) -> Result<Vec<Vec<f64>>> {
        let f = self.features.features(state, overrides)?;
        self.predict_window(&f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MODEL_VERSION {
            return Err(Error::config(format!("model version {} is not supported (expected {})", self.version, MODEL_VERSION)));
        }
        self.weights.check(&self.arch)?;
        let n_in = self.arch.input_dim;
        if self.input_mean.len() != n_in || self.input_scale.len() != n_in {
            return Err(Error::config("normalization statistics have the wrong length"));
        }
        if self.input_scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::config("normalization scales must be positive"));
        }
        if self.lower.len() != self.arch.outputs || self.upper.len() != self.arch.outputs {
            return Err(Error::config("bounds do not match the output count"));
        }
        if !(0.0..0.5).contains(&self.bound_snap) {
            return Err(Error::config("bound_snap must lie in [0, 0.5)"));
        }
        if let Some(d) = self.features.dim() {
            if d != n_in {
                return Err(Error::config("feature map does not match the input dimension"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        match v.get("version").and_then(|v| v.as_u64()) {
            Some(x) if x == MODEL_VERSION as u64 => {}
            Some(x) => return Err(Error::config(format!("model version {x} is not supported (expected {MODEL_VERSION})"))),
            None => return Err(Error::config("model file lacks a version field")),
        }
        let m: RnnModel = serde_json::from_value(v)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    /// Fraction of samples held out for validation.
    pub validation_fraction: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; zero disables.
    pub patience: usize,
    pub clip_norm: f64,
    /// Copied into the trained model; see `RnnModel::bound_snap`.
    pub bound_snap: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: 32,
            epochs: 200,
            learning_rate: 3e-3,
            batch_size: 32,
            optimizer: Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            validation_fraction: 0.2,
            seed: 0,
            patience: 50,
            clip_norm: 5.0,
            bound_snap: DEFAULT_BOUND_SNAP,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::config("epochs, batch_size and hidden must be positive"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::config("validation_fraction must lie in (0, 1)"));
        }
        if !(self.learning_rate > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::config("learning_rate and clip_norm must be positive"));
        }
        if !(0.0..0.5).contains(&self.bound_snap) {
            return Err(Error::config("bound_snap must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub best_epoch: usize,
    /// Validation MSE of the returned snapshot, in bound-normalized units.
    pub final_validation_mse: f64,
    pub n_train: usize,
    pub n_validation: usize,
}

/// Supervised pairs: raw inputs and step-major targets in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub d: usize,
    pub outputs: usize,
}

impl TrainSet {
    /// Build pairs from a control dataset; targets are normalized by each
    /// record's own control bounds.
    pub fn from_dataset(ds: &ControlDataset, base: &ParameterSet) -> Result<(Self, FeatureMap)> {
        let first = ds.records.first().ok_or_else(|| Error::config("dataset has no records"))?;
        let keys: Vec<String> = first.param_overrides.keys().cloned().collect();
        let fm = FeatureMap::setting(keys.clone(), base);
        let channel = ds.header.scenario.channel();
        let mut inputs = Vec::with_capacity(ds.records.len());
        let mut targets = Vec::with_capacity(ds.records.len());
        for r in &ds.records {
            if r.param_overrides.keys().ne(keys.iter()) {
                return Err(Error::config("records vary different parameter sets"));
            }
            if r.control.len() != channel.count() || r.control.iter().any(|row| row.len() != ds.header.d) {
                return Err(Error::config("record control shape does not match the dataset header"));
            }
            let p = base.with_overrides(&r.param_overrides)?;
            let bounds = channel_bounds(channel, &p);
            inputs.push(fm.features(&r.state, &r.param_overrides)?);
            let mut t = Vec::with_capacity(ds.header.d * bounds.len());
            for k in 0..ds.header.d {
                for (o, (lo, hi)) in bounds.iter().enumerate() {
                    t.push(if hi > lo { ((r.control[o][k] - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 });
                }
            }
            targets.push(t);
        }
        Ok((TrainSet { inputs, targets, d: ds.header.d, outputs: channel.count() }, fm))
    }
}

/// Bounds of the channels a signal drives, in value order.
pub fn channel_bounds(channel: Channel, p: &ParameterSet) -> Vec<(f64, f64)> {
    match channel {
        Channel::Up => vec![(p.u_pL, p.u_pU)],
        Channel::Ut => vec![(p.u_TL, p.u_TU)],
        Channel::Both => vec![(p.u_pL, p.u_pU), (p.u_TL, p.u_TU)],
    }
}

fn clip(g: &mut [f64], max_norm: f64) {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        g.iter_mut().for_each(|v| *v *= s);
    }
}

/// Fit a model. `template` supplies the feature map, channel and bounds; its
/// weights and statistics are replaced.
pub fn train(set: &TrainSet, template: RnnModel, cfg: &TrainConfig) -> Result<(RnnModel, TrainReport)> {
    cfg.validate()?;
    let n = set.inputs.len();
    if n < 2 {
        return Err(Error::config("training needs at least two samples"));
    }
    let input_dim = set.inputs[0].len();
    if set.inputs.iter().any(|x| x.len() != input_dim)
        || set.targets.iter().any(|t| t.len() != set.d * set.outputs)
        || set.targets.len() != n
    {
        return Err(Error::config("inconsistent training pairs"));
    }
    let arch = Arch { input_dim, hidden: cfg.hidden, outputs: set.outputs, d: set.d };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((n as f64 * cfg.validation_fraction).round() as usize).clamp(1, n - 1);
    let (val_idx, train_idx) = order.split_at(n_val);

    let mut mean = vec![0.0; input_dim];
    let mut scale = vec![0.0; input_dim];
    for &i in train_idx {
        for (m, v) in mean.iter_mut().zip(&set.inputs[i]) {
            *m += v / train_idx.len() as f64;
        }
    }
    for &i in train_idx {
        for ((s, v), m) in scale.iter_mut().zip(&set.inputs[i]).zip(&mean) {
            *s += (v - m).powi(2) / train_idx.len() as f64;
        }
    }
    for s in scale.iter_mut() {
        *s = if s.sqrt() > 1e-12 { s.sqrt() } else { 1.0 };
    }
    let norm = |i: usize| -> Vec<f64> { set.inputs[i].iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect() };
    let xt: Vec<Vec<f64>> = train_idx.iter().map(|&i| norm(i)).collect();
    let yt: Vec<Vec<f64>> = train_idx.iter().map(|&i| set.targets[i].clone()).collect();
    let xv: Vec<Vec<f64>> = val_idx.iter().map(|&i| norm(i)).collect();
    let yv: Vec<Vec<f64>> = val_idx.iter().map(|&i| set.targets[i].clone()).collect();

    let mut w = vec![0.0; arch.param_count()];
    let glorot = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
    let blocks = [
        (arch.w_xh(), arch.hidden * input_dim, glorot(input_dim, arch.hidden)),
        (arch.w_hh(), arch.hidden * arch.hidden, glorot(arch.hidden, arch.hidden)),
        (arch.w_o(), arch.outputs * arch.hidden, glorot(arch.hidden, arch.outputs)),
    ];
    for (off, len, lim) in blocks {
        for v in &mut w[off..off + len] {
            *v = rng.gen_range(-lim..lim);
        }
    }

    let mut m1 = vec![0.0; w.len()];
    let mut m2 = vec![0.0; w.len()];
    let mut step = 0i32;
    let mut report = TrainReport {
        train_loss: Vec::new(),
        validation_loss: Vec::new(),
        epoch_seconds: Vec::new(),
        best_epoch: 0,
        final_validation_mse: f64::INFINITY,
        n_train: xt.len(),
        n_validation: xv.len(),
    };
    let mut best_w = w.clone();
    let mut idx: Vec<usize> = (0..xt.len()).collect();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        idx.shuffle(&mut rng);
        for (b, chunk) in idx.chunks(cfg.batch_size).enumerate() {
            let bx: Vec<Vec<f64>> = chunk.iter().map(|&i| xt[i].clone()).collect();
            let by: Vec<Vec<f64>> = chunk.iter().map(|&i| yt[i].clone()).collect();
            let (l, mut g) = loss_and_grad(&arch, &w, &bx, &by);
            if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("non-finite loss at epoch {epoch}, batch {b} (loss {l})")));
            }
            clip(&mut g, cfg.clip_norm);
            step += 1;
            match cfg.optimizer {
                Optimizer::Momentum { beta } => {
                    for i in 0..w.len() {
                        m1[i] = beta * m1[i] - cfg.learning_rate * g[i];
                        w[i] += m1[i];
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(step);
                    let c2 = 1.0 - beta2.powi(step);
                    for i in 0..w.len() {
                        m1[i] = beta1 * m1[i] + (1.0 - beta1) * g[i];
                        m2[i] = beta2 * m2[i] + (1.0 - beta2) * g[i] * g[i];
                        w[i] -= cfg.learning_rate * (m1[i] / c1) / ((m2[i] / c2).sqrt() + eps);
                    }
                }
            }
        }
        let tl = loss(&arch, &w, &xt, &yt);
        let vl = loss(&arch, &w, &xv, &yv);
        if !tl.is_finite() || !vl.is_finite() {
            return Err(Error::numeric(format!("non-finite loss after epoch {epoch}")));
        }
        report.train_loss.push(tl);
        report.validation_loss.push(vl);
        report.epoch_seconds.push(start.elapsed().as_secs_f64());
        if vl < report.final_validation_mse {
            report.final_validation_mse = vl;
            report.best_epoch = epoch;
            best_w = w.clone();
        } else if cfg.patience > 0 && epoch - report.best_epoch >= cfg.patience {
            break;
        }
    }

    let mut model = RnnModel { arch, input_mean: mean, input_scale: scale, ..template };
    model.version = MODEL_VERSION;
    model.bound_snap = cfg.bound_snap;
    model.weights = Weights::from_flat(&arch, &best_w);
    model.validate()?;
    Ok((model, report))
}

/// Train on a control dataset with the feature map and bounds it implies.
pub fn train_on_dataset(ds: &ControlDataset, base: &ParameterSet, cfg: &TrainConfig) -> Result<(RnnModel, TrainReport)> {
    let (set, fm) = TrainSet::from_dataset(ds, base)?;
    let channel = ds.header.scenario.channel();
    let bounds = channel_bounds(channel, base);
    let arch = Arch { input_dim: set.inputs[0].len(), hidden: cfg.hidden, outputs: set.outputs, d: set.d };
    let template = RnnModel::zeros(
        arch,
        fm,
        Some(channel),
        bounds.iter().map(|b| b.0).collect(),
        bounds.iter().map(|b| b.1).collect(),
    );
    train(&set, template, cfg)
}

/// Whether the rollout re-predicts every step or applies whole windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    ClosedLoop,
    OpenLoop,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    /// Control applied on every completed step.
    pub control: ControlSignal,
    /// Scored trajectory under `control` (absent after a failure).
    pub evaluation: Option<ObjectiveEval>,
    /// State at every reached grid time.
    pub states: Vec<StateVector>,
    pub failure: Option<String>,
    /// Time spent producing the control, excluding scoring.
    pub predict_seconds: f64,
}

/// Drive the full model over a setting's horizon with the network in place of BO.
pub fn rollout(
    model: &RnnModel,
    setting: &ScenarioSetting,
    base: &ParameterSet,
    mode: RolloutMode,
    obj: &ObjectiveConfig,
    integ: &IntegratorConfig,
) -> Result<Rollout> {
    setting.validate()?;
    let channel = model.channel.ok_or_else(|| Error::config("model is not tied to a control channel"))?;
    if channel != setting.scenario.channel() {
        return Err(Error::config("model channel differs from the setting's scenario"));
    }
    let params = setting.params(base)?;
    let start = Instant::now();
    let mut x = setting.initial;
    let mut states = vec![x];
    let mut applied: Vec<Vec<f64>> = vec![Vec::with_capacity(setting.t_f); channel.count()];
    let mut failure = None;
    let mut t = 0;
    'outer: while t < setting.t_f {
        let window = model.predict_setting(&x, &setting.overrides)?;
        let take = match mode {
            RolloutMode::ClosedLoop => 1,
            RolloutMode::OpenLoop => model.arch.d.min(setting.t_f - t),
        };
        for k in 0..take {
            let values: Vec<f64> = window.iter().map(|row| row[k]).collect();
            match step_state(&x, &params, channel, t, &values, integ) {
                Ok(next) => x = next,
                Err(e) => {
                    failure = Some(format!("step {t}: {e}"));
                    break 'outer;
                }
            }
            for (out, v) in applied.iter_mut().zip(&values) {
                out.push(*v);
            }
            states.push(x);
            t += 1;
        }
    }
    let predict_seconds = start.elapsed().as_secs_f64();
    let control = ControlSignal::from_values(channel, 0.0, 1.0, &applied.concat(), &params)?;
    let evaluation = if failure.is_none() {
        Some(evaluate_from(&setting.initial, &params, &control, setting.horizon(), obj, integ)?)
    } else {
        None
    };
    Ok(Rollout { control, evaluation, states, failure, predict_seconds })
}

/// Closed-loop rollout of a generic plant: `step(x, u)` advances one step.
pub fn rollout_plant<F>(model: &RnnModel, x0: &[f64], steps: usize, mut step: F) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)>
where
    F: FnMut(&[f64], &[f64]) -> Vec<f64>,
{
    let mut x = x0.to_vec();
    let mut xs = vec![x.clone()];
    let mut us = Vec::with_capacity(steps);
    for _ in 0..steps {
        let w = model.predict_window(&x)?;
        let u: Vec<f64> = w.iter().map(|row| row[0]).collect();
        x = step(&x, &u);
        xs.push(x.clone());
        us.push(u);
    }
    Ok((xs, us))
}
