//! Gaussian-process regression with a squared-exponential kernel.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kernel and noise hyperparameters, in standardized output units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub length_scale: f64,
    pub signal_var: f64,
    pub noise_var: f64,
}

/// How hyperparameters are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperPolicy {
    Fixed(Hyper),
    /// Maximize the log marginal likelihood over the Cartesian grid.
    Grid {
        length_scales: Vec<f64>,
        signal_vars: Vec<f64>,
        noise_vars: Vec<f64>,
    },
}

impl Default for HyperPolicy {
    fn default() -> Self {
        HyperPolicy::Grid {
            length_scales: vec![0.05, 0.1, 0.2, 0.35, 0.6, 1.0, 2.0],
            signal_vars: vec![0.5, 1.0, 2.0],
            noise_vars: vec![1e-6, 1e-4, 1e-2],
        }
    }
}

const JITTERS: [f64; 6] = [0.0, 1e-10, 1e-8, 1e-6, 1e-5, 1e-4];

#[derive(Debug, Clone)]
pub struct GpSurrogate {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub hyper: Hyper,
    /// Diagonal jitter added on top of the noise variance.
    pub jitter: f64,
    pub y_mean: f64,
    pub y_scale: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    pub log_marginal_likelihood: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kernel(h: &Hyper, a: &[f64], b: &[f64]) -> f64 {
    h.signal_var * (-0.5 * sq_dist(a, b) / (h.length_scale * h.length_scale)).exp()
}

fn factor(x: &[Vec<f64>], h: &Hyper) -> Option<(Cholesky<f64, Dyn>, f64)> {
    let n = x.len();
    let base = DMatrix::from_fn(n, n, |i, j| kernel(h, &x[i], &x[j]) + if i == j { h.noise_var } else { 0.0 });
    for jitter in JITTERS {
        let mut k = base.clone();
        for i in 0..n {
            k[(i, i)] += jitter * h.signal_var;
        }
        if let Some(c) = k.cholesky() {
            if c.l_dirty().diagonal().iter().all(|v| v.is_finite() && *v > 0.0) {
                return Some((c, jitter * h.signal_var));
            }
        }
    }
    None
}

/// Fit an exact GP posterior to `(x, y)`.
pub fn fit_gp(x: &[Vec<f64>], y: &[f64], policy: &HyperPolicy) -> Result<GpSurrogate> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::domain("fit_gp needs at least two matching input/output pairs"));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::domain("inputs must be finite vectors of equal length"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("outputs must be finite"));
    }
    let n = y.len() as f64;
    let y_mean = y.iter().sum::<f64>() / n;
    let sd = (y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n).sqrt();
    let y_scale = if sd > 0.0 && sd.is_finite() { sd } else { 1.0 };
    let ys = DVector::from_iterator(y.len(), y.iter().map(|v| (v - y_mean) / y_scale));

    let candidates: Vec<Hyper> = match policy {
        HyperPolicy::Fixed(h) => vec![*h],
        HyperPolicy::Grid { length_scales, signal_vars, noise_vars } => {
            let mut out = Vec::new();
            for &l in length_scales {
                for &s in signal_vars {
                    for &nv in noise_vars {
                        out.push(Hyper { length_scale: l, signal_var: s, noise_var: nv });
                    }
                }
            }
            out
        }
    };
    if candidates.iter().any(|h| !(h.noise_var > 0.0 && h.signal_var > 0.0 && h.length_scale > 0.0)) {
        return Err(Error::config("hyperparameters must be positive"));
    }

    let mut best: Option<GpSurrogate> = None;
    for h in candidates {
        let Some((chol, jitter)) = factor(x, &h) else { continue };
        let alpha = chol.solve(&ys);
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
        let lml = -0.5 * ys.dot(&alpha) - log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
        if best.as_ref().map_or(true, |b| lml > b.log_marginal_likelihood) {
            best = Some(GpSurrogate {
                x: x.to_vec(),
                y: y.to_vec(),
                hyper: h,
                jitter,
                y_mean,
                y_scale,
                chol,
                alpha,
                log_marginal_likelihood: lml,
            });
        }
    }
    best.ok_or_else(|| Error::numeric("kernel matrix not positive definite after jitter escalation"))
}

impl GpSurrogate {
    /// Posterior mean and latent variance in standardized output units.
    pub fn predict_standardized(&self, x: &[f64]) -> (f64, f64) {
        let ks = DVector::from_iterator(self.x.len(), self.x.iter().map(|xi| kernel(&self.hyper, xi, x)));
        let mean = ks.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&ks)
            .unwrap_or_else(|| DVector::zeros(self.x.len()));
        let var = (self.hyper.signal_var - v.dot(&v)).max(0.0);
        (mean, var)
    }

    /// Posterior mean and latent variance in original output units.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let (m, v) = self.predict_standardized(x);
        (self.y_mean + self.y_scale * m, self.y_scale * self.y_scale * v)
    }

    pub fn dim(&self) -> usize {
        self.x[0].len()
    }
}

/// Lower confidence bound `mean - kappa * sd`.
pub fn lcb(gp: &GpSurrogate, x: &[f64], kappa: f64) -> f64 {
    let (m, v) = gp.predict(x);
    m - kappa * v.sqrt()
}
