//! Equilibria, linear stability, one-parameter sweeps and oscillation detection.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{integrate, IntegratorConfig, Trajectory};
use crate::model::rhs_into;
use crate::params::ParameterSet;
use crate::state::{idx, state_index, state_scales, ControlInput, StateVector, Subsystem, STATE_DIM, STATE_NAMES};

/// An autonomous vector field `x' = f(x)` on the nonnegative orthant.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64], out: &mut [f64]);
    /// Characteristic magnitude of each coordinate.
    fn scales(&self) -> Vec<f64>;
    fn names(&self) -> Vec<String>;
    /// Problem-specific starting points for the equilibrium search.
    fn hint_starts(&self) -> Vec<Vec<f64>> {
        Vec::new()
    }
    /// Whether coordinates are confined to the nonnegative orthant.
    fn nonnegative(&self) -> bool {
        true
    }
}

/// One subsystem of the immune model restricted to its active coordinates.
#[derive(Debug, Clone)]
pub struct SubsystemField {
    pub subsystem: Subsystem,
    pub params: ParameterSet,
    /// Initial pathogen loads whose simulated end states seed the search.
    pub probe_loads: Vec<f64>,
    pub probe_horizon: f64,
    /// Log-spaced pathogen levels for the slice scan; zero disables it.
    pub slice_points: usize,
}

impl SubsystemField {
    pub fn new(subsystem: Subsystem, params: ParameterSet) -> Self {
        SubsystemField { subsystem, params, probe_loads: vec![1e2, 1e4, 1e6], probe_horizon: 400.0, slice_points: 200 }
    }

    /// Coordinates of the analysed state: the subsystem's active components
    /// minus the M1 and M2 tallies, which integrate phagocytosis fluxes and feed
    /// back into nothing, so they have no equilibrium while those fluxes are on.
    pub fn coords(&self) -> Vec<usize> {
        self.subsystem.active().iter().copied().filter(|&i| i != idx::M1 && i != idx::M2).collect()
    }

    pub fn embed(&self, x: &[f64]) -> StateVector {
        let mut s = StateVector::zeros();
        for (k, &i) in self.coords().iter().enumerate() {
            s.0[i] = x[k];
        }
        s
    }

    pub fn project(&self, s: &StateVector) -> Vec<f64> {
        self.coords().iter().map(|&i| s.0[i]).collect()
    }

    /// Pathogen-free rest state: every population at its logistic balance,
    /// `r1 = k_r1/u_r1`, and all mediators at zero.
    pub fn boundary_equilibrium(&self) -> StateVector {
        let p = &self.params;
        let mut s = StateVector::zeros();
        let balance = |growth: f64, death: f64, cap: f64| if growth > death { cap * (1.0 - death / growth) } else { 0.0 };
        s.0[1] = balance(p.k_mk, p.u_mk, p.K_inf);
        s.0[4] = balance(p.k_rd, p.u_nr, p.N_S);
        s.0[7] = p.k_r1 / p.u_r1;
        if self.subsystem != Subsystem::Neutrophil {
            s.0[9] = balance(p.k_mr, p.u_mr, p.M_S);
        }
        if self.subsystem == Subsystem::Full {
            s.0[16] = balance(p.k_cd4, p.u_cd4, p.T_CD4_inf);
            s.0[17] = balance(p.k_cd8, p.u_cd8, p.T_CD8_inf);
            s.0[18] = balance(p.k_B, p.u_B, p.B_inf);
            let b = s.0[18];
            s.0[19] = p.r_Abmax * b * b / (p.m_Ab + b) / p.u_Ab;
        }
        s
    }

    /// Starts near interior equilibria. The curve on which every rate except the
    /// pathogen's vanishes is traced by pseudo-arclength continuation in
    /// (log pathogen level, scaled state) from the rest state, and the points
    /// where the pathogen rate changes sign along it are returned.
    pub fn slice_starts(&self) -> Vec<Vec<f64>> {
        if self.slice_points < 2 {
            return Vec::new();
        }
        let n = self.dim();
        let scales = self.scales();
        let (u_lo, u_hi) = (1e-3f64.ln(), (self.params.P_inf * 1.5).ln());
        let ds_max = (u_hi - u_lo) / self.slice_points as f64;
        let raw = |w: &[f64]| -> Vec<f64> {
            let mut x = vec![w[0].exp()];
            x.extend((1..n).map(|i| w[i] * scales[i]));
            x
        };
        // Residual of the non-pathogen equations in scaled units, and the pathogen rate per pathogen.
        let eval = |w: &[f64]| -> (Vec<f64>, f64) {
            let x = raw(w);
            let mut f = vec![0.0; n];
            self.eval(&x, &mut f);
            ((1..n).map(|i| f[i] / scales[i]).collect(), f[0] / x[0])
        };
        let jac = |w: &[f64]| -> DMatrix<f64> {
            let x = raw(w);
            let j = jacobian(self, &x, 1e-7);
            DMatrix::from_fn(n - 1, n, |r, c| {
                let dcol = if c == 0 { x[0] } else { scales[c] };
                j[(r + 1, c)] * dcol / scales[r + 1]
            })
        };
        let tangent = |a: &DMatrix<f64>, prev: &DVector<f64>| -> Option<DVector<f64>> {
            let mut m = a.clone().insert_row(n - 1, 0.0);
            m.set_row(n - 1, &prev.transpose());
            let mut rhs = DVector::zeros(n);
            rhs[n - 1] = 1.0;
            let t = m.lu().solve(&rhs)?;
            let norm = t.norm();
            (norm.is_finite() && norm > 0.0).then(|| t / norm)
        };
        let correct = |w0: DVector<f64>, t: &DVector<f64>| -> Option<DVector<f64>> {
            let mut w = w0.clone();
            for _ in 0..12 {
                let (h, _) = eval(w.as_slice());
                let mut g = DVector::from_vec(h);
                let norm = g.amax();
                if !norm.is_finite() {
                    return None;
                }
                g = g.insert_row(n - 1, t.dot(&(&w - &w0)));
                if norm <= 1e-10 {
                    return Some(w);
                }
                let mut m = jac(w.as_slice()).insert_row(n - 1, 0.0);
                m.set_row(n - 1, &t.transpose());
                w -= m.lu().solve(&g)?;
            }
            let (h, _) = eval(w.as_slice());
            (h.iter().fold(0.0f64, |m, v| m.max(v.abs())) <= 1e-8).then_some(w)
        };

        // Secant steps along the chord between opposite-signed points, each
        // pulled back onto the curve.
        let refine = |mut a: DVector<f64>, mut ga: f64, mut b: DVector<f64>, mut gb: f64| -> DVector<f64> {
            let chord = (&b - &a).normalize();
            for _ in 0..30 {
                let theta = ga / (ga - gb);
                let Some(m) = correct(&a + (&b - &a) * theta, &chord) else { break };
                let gm = eval(m.as_slice()).1;
                if gm.signum() == ga.signum() {
                    (a, ga) = (m, gm);
                } else {
                    (b, gb) = (m, gm);
                }
                if ga.abs().min(gb.abs()) < 1e-14 {
                    break;
                }
            }
            if ga.abs() < gb.abs() {
                a
            } else {
                b
            }
        };
        // Golden-section search for the extremum of `g` toward zero between `a` and `b`.
        let closest = |a: &DVector<f64>, b: &DVector<f64>, sign: f64| -> Option<(DVector<f64>, f64)> {
            let chord = (b - a).normalize();
            let at = |theta: f64| -> Option<(DVector<f64>, f64)> {
                let m = correct(a + (b - a) * theta, &chord)?;
                let g = eval(m.as_slice()).1;
                Some((m, g))
            };
            let r = 0.5 * (5f64.sqrt() - 1.0);
            let (mut lo, mut hi) = (0.0, 1.0);
            let mut c = at(hi - r * (hi - lo))?;
            let mut d = at(lo + r * (hi - lo))?;
            let (mut tc, mut td) = (hi - r * (hi - lo), lo + r * (hi - lo));
            for _ in 0..40 {
                if sign * c.1 < sign * d.1 {
                    hi = td;
                    (td, d) = (tc, c);
                    tc = hi - r * (hi - lo);
                    c = at(tc)?;
                } else {
                    lo = tc;
                    (tc, c) = (td, d);
                    td = lo + r * (hi - lo);
                    d = at(td)?;
                }
                if sign * c.1 < 0.0 || sign * d.1 < 0.0 {
                    break;
                }
            }
            Some(if sign * c.1 < sign * d.1 { c } else { d })
        };

        let rest = self.project(&self.boundary_equilibrium());
        let mut w0: Vec<f64> = vec![u_lo];
        w0.extend((1..n).map(|i| rest[i] / scales[i]));
        let mut e_u = DVector::zeros(n);
        e_u[0] = 1.0;
        let Some(mut w) = correct(DVector::from_vec(w0), &e_u) else { return Vec::new() };
        let mut t = e_u;
        let mut ds = ds_max;
        let mut g_prev = eval(w.as_slice()).1;
        let mut before: Option<(DVector<f64>, f64)> = None;
        let mut starts = Vec::new();
        for _ in 0..40 * self.slice_points {
            let Some(t_new) = tangent(&jac(w.as_slice()), &t) else { break };
            t = t_new;
            let next = loop {
                if let Some(v) = correct(&w + &t * ds, &t) {
                    break Some(v);
                }
                ds *= 0.5;
                if ds < 1e-8 * ds_max {
                    break None;
                }
            };
            let Some(next) = next else { break };
            let g = eval(next.as_slice()).1;
            if g.signum() != g_prev.signum() {
                starts.push(raw(refine(w.clone(), g_prev, next.clone(), g).as_slice()));
            } else if let Some((wb, gb)) = &before {
                // A dip of |g| between samples may hide a pair of close roots.
                if gb.signum() == g.signum() && g_prev.abs() < gb.abs() && g_prev.abs() < g.abs() {
                    let sign = g_prev.signum();
                    if let Some((m, gm)) = closest(wb, &next, sign) {
                        if gm.signum() != sign {
                            starts.push(raw(refine(wb.clone(), *gb, m.clone(), gm).as_slice()));
                            starts.push(raw(refine(m, gm, next.clone(), g).as_slice()));
                        } else {
                            starts.push(raw(m.as_slice()));
                        }
                    }
                }
            }
            before = Some((w.clone(), g_prev));
            g_prev = g;
            w = next;
            ds = (ds * 1.5).min(ds_max);
            if w[0] > u_hi || w[0] < u_lo - 1.0 {
                break;
            }
        }
        starts
    }
}

impl VectorField for SubsystemField {
    fn dim(&self) -> usize {
        self.coords().len()
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let s = self.embed(x);
        let mut d = [0.0; STATE_DIM];
        rhs_into(self.subsystem, &s.0, &self.params, ControlInput::ZERO, &mut d);
        for (k, &i) in self.coords().iter().enumerate() {
            out[k] = d[i];
        }
    }

    fn scales(&self) -> Vec<f64> {
        let s = state_scales(&self.params);
        self.coords().iter().map(|&i| s[i]).collect()
    }

    fn names(&self) -> Vec<String> {
        self.coords().iter().map(|&i| STATE_NAMES[i].to_string()).collect()
    }

    fn hint_starts(&self) -> Vec<Vec<f64>> {
        let rest = self.boundary_equilibrium();
        let mut starts = vec![self.project(&rest)];
        let mut infected = rest;
        infected.0[0] = self.params.P_inf;
        starts.push(self.project(&infected));
        let cfg = IntegratorConfig { grid_dt: self.probe_horizon, ..Default::default() };
        for &load in &self.probe_loads {
            let mut x0 = rest;
            x0.0[0] = load;
            if let Ok(traj) = integrate(self.subsystem, &x0, &self.params, None, (0.0, self.probe_horizon), &cfg) {
                starts.push(self.project(traj.last_state()));
            }
        }
        starts.extend(self.slice_starts());
        starts
    }
}

/// Multi-start Newton settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub n_starts: usize,
    /// Start box in scale units, per coordinate or one value for all.
    pub box_lower: Vec<f64>,
    pub box_upper: Vec<f64>,
    /// Sample the start box log-uniformly (requires positive lower bounds).
    pub log_box: bool,
    /// Bound on the max-norm of the scaled residual `f_i / scale_i`.
    pub newton_tol: f64,
    pub max_iter: usize,
    /// Max-norm distance in scale units below which two equilibria are merged.
    pub dedup_radius: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            n_starts: 48,
            box_lower: vec![1e-7],
            box_upper: vec![1.0],
            log_box: true,
            newton_tol: 1e-10,
            max_iter: 100,
            dedup_radius: 1e-6,
            seed: 7,
        }
    }
}

/// Jacobian classification settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifyConfig {
    pub fd_eps: f64,
    pub margin: f64,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        ClassifyConfig { fd_eps: 1e-6, margin: 1e-6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stability {
    Stable,
    Unstable,
    Marginal,
}

impl Stability {
    pub fn name(self) -> &'static str {
        match self {
            Stability::Stable => "stable",
            Stability::Unstable => "unstable",
            Stability::Marginal => "marginal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub param_value: f64,
    /// Coordinates of the vector field.
    pub state: Vec<f64>,
    pub stability: Stability,
    pub leading_eigenvalue_real_part: f64,
    /// Max-norm of the scaled residual.
    pub residual_norm: f64,
    /// Eigenvalues as `(re, im)`, sorted by decreasing real part.
    pub eigenvalues: Vec<(f64, f64)>,
}

// Step for central differences in scaled coordinates.
fn fd_step(z: f64, eps: f64) -> f64 {
    eps * (z.abs() + 1e-8)
}

/// Central-difference Jacobian of `f` at `x`, in raw coordinates.
pub fn jacobian<F: VectorField + ?Sized>(field: &F, x: &[f64], fd_eps: f64) -> DMatrix<f64> {
    let n = field.dim();
    let scales = field.scales();
    let mut jac = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    for j in 0..n {
        let h = fd_step(x[j] / scales[j], fd_eps) * scales[j];
        xp[j] = x[j] + h;
        field.eval(&xp, &mut fp);
        xp[j] = x[j] - h;
        field.eval(&xp, &mut fm);
        xp[j] = x[j];
        for i in 0..n {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

fn scaled_residual<F: VectorField + ?Sized>(field: &F, z: &[f64], scales: &[f64], x: &mut [f64], out: &mut [f64]) -> f64 {
    for i in 0..z.len() {
        x[i] = z[i] * scales[i];
    }
    field.eval(x, out);
    let mut norm = 0.0f64;
    for i in 0..z.len() {
        out[i] /= scales[i];
        norm = norm.max(out[i].abs());
    }
    if norm.is_finite() {
        norm
    } else {
        f64::INFINITY
    }
}

/// Damped Newton from `z0` in scaled coordinates. Returns the scaled root and residual.
fn newton<F: VectorField + ?Sized>(field: &F, z0: &[f64], scales: &[f64], cfg: &SearchConfig) -> Option<(Vec<f64>, f64)> {
    let n = z0.len();
    let clip = field.nonnegative();
    let mut z = z0.to_vec();
    let mut x = vec![0.0; n];
    let mut f = vec![0.0; n];
    let mut trial_f = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut norm = scaled_residual(field, &z, scales, &mut x, &mut f);
    let mut polish = 0;
    for _ in 0..cfg.max_iter + 50 {
        if !norm.is_finite() {
            return None;
        }
        let x_raw: Vec<f64> = z.iter().zip(scales).map(|(a, s)| a * s).collect();
        let jac_raw = jacobian(field, &x_raw, 1e-7);
        let jac = DMatrix::from_fn(n, n, |i, j| jac_raw[(i, j)] * scales[j] / scales[i]);
        let rhs = DVector::from_iterator(n, f.iter().map(|v| -v));
        let step = match jac.clone().lu().solve(&rhs) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => {
                // Levenberg-Marquardt fallback for singular Jacobians.
                let jt = jac.transpose();
                let mut a = &jt * &jac;
                let mu = 1e-10 * a.diagonal().amax().max(1e-300);
                for i in 0..n {
                    a[(i, i)] += mu;
                }
                a.cholesky()?.solve(&(&jt * &rhs))
            }
        };
        let mut lambda = 1.0;
        let mut accepted = false;
        while lambda >= 1e-6 {
            for i in 0..n {
                let v = z[i] + lambda * step[i];
                trial[i] = if clip { v.max(0.0) } else { v };
            }
            let tn = scaled_residual(field, &trial, scales, &mut x, &mut trial_f);
            if tn < (1.0 - 1e-4 * lambda) * norm || (norm <= cfg.newton_tol && tn <= norm) {
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        let step_size = (0..n).map(|i| (trial[i] - z[i]).abs()).fold(0.0, f64::max);
        if !accepted {
            return (norm <= cfg.newton_tol).then_some((z, norm));
        }
        z.copy_from_slice(&trial);
        f.copy_from_slice(&trial_f);
        norm = scaled_residual(field, &z, scales, &mut x, &mut f);
        if norm <= cfg.newton_tol {
            // Keep polishing so slowly converging roots settle before deduplication.
            polish += 1;
            let znorm = z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if step_size <= 1e-14 * (1.0 + znorm) || polish > 50 || norm == 0.0 {
                return Some((z, norm));
            }
        }
    }
    (norm <= cfg.newton_tol).then_some((z, norm))
}

// Radical inverse in base `b`.
fn radical_inverse(mut i: u64, b: u64) -> f64 {
    let inv = 1.0 / b as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += (i % b) as f64 * f;
        i /= b;
        f *= inv;
    }
    r
}

fn primes(n: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(n);
    let mut c = 2u64;
    while out.len() < n {
        if out.iter().all(|p| c % p != 0) {
            out.push(c);
        }
        c += 1;
    }
    out
}

/// Randomly shifted Halton points in `[0,1)^dim`.
pub fn halton(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let bases = primes(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>()).collect();
    (1..=n as u64)
        .map(|i| bases.iter().zip(&shift).map(|(&b, s)| (radical_inverse(i, b) + s).fract()).collect())
        .collect()
}

fn box_bound(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

/// All distinct equilibria reachable from the start set, sorted by the first coordinate.
pub fn find_equilibria<F: VectorField + ?Sized>(field: &F, param_value: f64, search: &SearchConfig, classify: &ClassifyConfig) -> Result<Vec<Equilibrium>> {
    let n = field.dim();
    let scales = field.scales();
    for bound in [&search.box_lower, &search.box_upper] {
        if bound.len() != 1 && bound.len() != n {
            return Err(Error::config("start box bounds need one value or one per coordinate"));
        }
    }
    let mut starts: Vec<Vec<f64>> = field
        .hint_starts()
        .into_iter()
        .map(|x| x.iter().zip(&scales).map(|(a, s)| a / s).collect())
        .collect();
    starts.push(vec![0.0; n]);
    let mut points = vec![vec![0.5; n]];
    points.extend(halton(search.n_starts, n, search.seed));
    for u in points {
        let z = (0..n)
            .map(|i| {
                let (lo, hi) = (box_bound(&search.box_lower, i), box_bound(&search.box_upper, i));
                if search.log_box && lo > 0.0 {
                    lo * (hi / lo).powf(u[i])
                } else {
                    lo + (hi - lo) * u[i]
                }
            })
            .collect();
        starts.push(z);
    }

    let mut roots: Vec<(Vec<f64>, f64)> = Vec::new();
    for z0 in &starts {
        let Some((z, res)) = newton(field, z0, &scales, search) else { continue };
        let dup = roots.iter().any(|(r, _)| r.iter().zip(&z).all(|(a, b)| (a - b).abs() <= search.dedup_radius));
        if !dup {
            roots.push((z, res));
        }
    }
    roots.sort_by(|a, b| {
        for (x, y) in a.0.iter().zip(&b.0) {
            match x.partial_cmp(y) {
                Some(std::cmp::Ordering::Equal) | None => continue,
                Some(o) => return o,
            }
        }
        std::cmp::Ordering::Equal
    });
    roots
        .into_iter()
        .map(|(z, residual)| {
            let state: Vec<f64> = z.iter().zip(&scales).map(|(a, s)| a * s).collect();
            let (stability, eigenvalues) = classify_stability(field, &state, classify)?;
            Ok(Equilibrium {
                param_value,
                leading_eigenvalue_real_part: eigenvalues.first().map(|e| e.0).unwrap_or(f64::NEG_INFINITY),
                state,
                stability,
                residual_norm: residual,
                eigenvalues,
            })
        })
        .collect()
}

/// Stability from the eigenvalues of the finite-difference Jacobian.
pub fn classify_stability<F: VectorField + ?Sized>(field: &F, x: &[f64], cfg: &ClassifyConfig) -> Result<(Stability, Vec<(f64, f64)>)> {
    let scales = field.scales();
    let n = field.dim();
    let raw = jacobian(field, x, cfg.fd_eps);
    let jac = DMatrix::from_fn(n, n, |i, j| raw[(i, j)] * scales[j] / scales[i]);
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite Jacobian entry"));
    }
    let mut eig: Vec<(f64, f64)> = jac.complex_eigenvalues().iter().map(|c| (c.re, c.im)).collect();
    if eig.iter().any(|(re, im)| !re.is_finite() || !im.is_finite()) {
        return Err(Error::numeric("eigenvalue computation failed"));
    }
    eig.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
    let lead = eig.first().map(|e| e.0).unwrap_or(f64::NEG_INFINITY);
    let stability = if lead < -cfg.margin {
        Stability::Stable
    } else if lead > cfg.margin {
        Stability::Unstable
    } else {
        Stability::Marginal
    };
    Ok((stability, eig))
}

/// A qualitative change between adjacent grid points, refined by bisection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedBifurcation {
    pub lower: f64,
    pub upper: f64,
    pub location: f64,
    pub count_before: usize,
    pub count_after: usize,
    /// True when the branch count is unchanged and only stabilities differ.
    pub stability_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BifurcationDiagram {
    pub subsystem: Option<Subsystem>,
    pub param_name: String,
    pub variable_names: Vec<String>,
    pub grid: Vec<f64>,
    pub equilibria: Vec<Vec<Equilibrium>>,
    pub detected_bifurcations: Vec<DetectedBifurcation>,
}

fn signature(eqs: &[Equilibrium]) -> Vec<Stability> {
    eqs.iter().map(|e| e.stability).collect()
}

/// Sweep a parameter over `grid`, locating and classifying equilibria at every
/// point and bisecting each interval where the branch structure changes.
pub fn sweep<F, M>(make: M, param_name: &str, grid: &[f64], search: &SearchConfig, classify: &ClassifyConfig) -> Result<BifurcationDiagram>
where
    F: VectorField,
    M: Fn(f64) -> Result<F> + Sync,
{
    if grid.is_empty() {
        return Err(Error::config("sweep grid is empty"));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let solve = |v: f64| -> Result<Vec<Equilibrium>> { find_equilibria(&make(v)?, v, search, classify) };
    let equilibria: Vec<Vec<Equilibrium>> = sorted.par_iter().map(|&v| solve(v)).collect::<Result<_>>()?;
    let variable_names = make(sorted[0])?.names();

    let range = sorted[sorted.len() - 1] - sorted[0];
    let mut detected = Vec::new();
    for k in 0..sorted.len().saturating_sub(1) {
        let (sig_a, sig_b) = (signature(&equilibria[k]), signature(&equilibria[k + 1]));
        if sig_a == sig_b {
            continue;
        }
        let (mut lo, mut hi) = (sorted[k], sorted[k + 1]);
        loop {
            let tol = 1e-3 * lo.abs().max(hi.abs()).max(1e-3 * range);
            if hi - lo <= tol {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if signature(&solve(mid)?) == sig_a {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        detected.push(DetectedBifurcation {
            lower: lo,
            upper: hi,
            location: 0.5 * (lo + hi),
            count_before: sig_a.len(),
            count_after: sig_b.len(),
            stability_only: sig_a.len() == sig_b.len(),
        });
    }
    Ok(BifurcationDiagram {
        subsystem: None,
        param_name: param_name.to_string(),
        variable_names,
        grid: sorted,
        equilibria,
        detected_bifurcations: detected,
    })
}

/// Sweep one model parameter for a subsystem.
pub fn sweep_subsystem(
    sub: Subsystem,
    params: &ParameterSet,
    param_name: &str,
    grid: &[f64],
    search: &SearchConfig,
    classify: &ClassifyConfig,
) -> Result<BifurcationDiagram> {
    if ParameterSet::spec(param_name).is_none() {
        return Err(Error::config(format!("unknown parameter `{param_name}`")));
    }
    let make = |v: f64| -> Result<SubsystemField> {
        let mut p = params.clone();
        p.set(param_name, v)?;
        p.validate()?;
        Ok(SubsystemField::new(sub, p))
    };
    let mut diagram = sweep(make, param_name, grid, search, classify)?;
    diagram.subsystem = Some(sub);
    Ok(diagram)
}

impl BifurcationDiagram {
    /// One row per equilibrium: parameter value, branch index, coordinates, stability.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("param_value,branch_id");
        for name in &self.variable_names {
            out.push(',');
            out.push_str(name);
        }
        out.push_str(",stability,leading_real_part\n");
        for eqs in &self.equilibria {
            for (b, e) in eqs.iter().enumerate() {
                write!(out, "{},{b}", e.param_value).unwrap();
                for v in &e.state {
                    write!(out, ",{v}").unwrap();
                }
                writeln!(out, ",{},{}", e.stability.name(), e.leading_eigenvalue_real_part).unwrap();
            }
        }
        out
    }

    pub fn has_stable_and_unstable(&self) -> bool {
        let all = self.equilibria.iter().flatten();
        let stable = all.clone().any(|e| e.stability == Stability::Stable);
        let unstable = all.into_iter().any(|e| e.stability == Stability::Unstable);
        stable && unstable
    }
}

/// Oscillation thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CycleConfig {
    /// Minimum trailing amplitude as a fraction of the variable's capacity.
    pub floor: f64,
    /// Minimum ratio of last to previous cycle amplitude.
    pub sustain_threshold: f64,
}

impl Default for CycleConfig {
    fn default() -> Self {
        CycleConfig { floor: 1e-4, sustain_threshold: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableCycle {
    pub name: String,
    pub oscillating: bool,
    /// Peak-to-trough height of the last complete cycle.
    pub amplitude: f64,
    pub amplitude_decay_ratio: f64,
    pub period: Option<f64>,
    pub peaks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitCycleReport {
    /// True when at least one analyzed variable oscillates.
    pub oscillating: bool,
    pub variables: Vec<VariableCycle>,
    /// Period of the first oscillating variable.
    pub period: Option<f64>,
    /// Fewer than three peaks were seen in the analysis window.
    pub low_confidence: bool,
}

impl LimitCycleReport {
    pub fn variable(&self, name: &str) -> Option<&VariableCycle> {
        self.variables.iter().find(|v| v.name == name)
    }
}

// Alternating extrema with hysteresis `h`: returns (peak indices, trough values preceding each peak).
fn zigzag(x: &[f64], h: f64) -> (Vec<usize>, Vec<f64>) {
    let mut peaks = Vec::new();
    let mut troughs = Vec::new();
    if x.is_empty() {
        return (peaks, troughs);
    }
    let mut rising: Option<bool> = None;
    let (mut hi_i, mut lo_v) = (0usize, x[0]);
    let mut hi_v = x[0];
    let mut last_trough: Option<f64> = None;
    for (i, &v) in x.iter().enumerate().skip(1) {
        match rising {
            None => {
                if v > hi_v {
                    hi_v = v;
                    hi_i = i;
                }
                if v < lo_v {
                    lo_v = v;
                }
                if hi_v - lo_v > h {
                    rising = Some(hi_i == i);
                    if hi_i == i {
                        last_trough = Some(lo_v);
                    } else {
                        lo_v = v;
                    }
                }
            }
            Some(true) => {
                if v > hi_v {
                    hi_v = v;
                    hi_i = i;
                } else if hi_v - v > h {
                    if let Some(t) = last_trough {
                        peaks.push(hi_i);
                        troughs.push(t);
                    }
                    rising = Some(false);
                    lo_v = v;
                }
            }
            Some(false) => {
                if v < lo_v {
                    lo_v = v;
                } else if v - lo_v > h {
                    last_trough = Some(lo_v);
                    rising = Some(true);
                    hi_v = v;
                    hi_i = i;
                }
            }
        }
    }
    (peaks, troughs)
}

/// Peak-to-trough analysis of the trailing half of each series.
/// `series` holds `(name, values, capacity)` triples sampled at `times`.
pub fn detect_limit_cycle(times: &[f64], series: &[(String, Vec<f64>, f64)], cfg: &CycleConfig) -> LimitCycleReport {
    let start = times.len() / 2;
    let tail_t = &times[start..];
    let mut low_confidence = false;
    let variables: Vec<VariableCycle> = series
        .iter()
        .map(|(name, values, capacity)| {
            let tail = &values[start..];
            let floor = cfg.floor * capacity;
            let (peaks, troughs) = zigzag(tail, 0.5 * floor);
            if peaks.len() < 3 {
                low_confidence = true;
            }
            let amps: Vec<f64> = peaks.iter().zip(&troughs).map(|(&p, t)| tail[p] - t).collect();
            let amplitude = amps.last().copied().unwrap_or(0.0);
            let ratio = if amps.len() >= 2 { amplitude / amps[amps.len() - 2] } else { 0.0 };
            let period = (peaks.len() >= 2).then(|| (tail_t[peaks[peaks.len() - 1]] - tail_t[peaks[0]]) / (peaks.len() - 1) as f64);
            VariableCycle {
                name: name.clone(),
                oscillating: amps.len() >= 2 && amplitude > floor && ratio >= cfg.sustain_threshold,
                amplitude,
                amplitude_decay_ratio: ratio,
                period,
                peaks: peaks.len(),
            }
        })
        .collect();
    let period = variables.iter().find(|v| v.oscillating).and_then(|v| v.period);
    LimitCycleReport { oscillating: variables.iter().any(|v| v.oscillating), variables, period, low_confidence }
}

/// Limit-cycle analysis of named model components, with capacities from the parameter scales.
pub fn detect_limit_cycle_traj(traj: &Trajectory, params: &ParameterSet, vars: &[&str], cfg: &CycleConfig) -> Result<LimitCycleReport> {
    let scales = state_scales(params);
    let series = vars
        .iter()
        .map(|name| {
            let i = state_index(name).ok_or_else(|| Error::domain(format!("unknown state `{name}`")))?;
            Ok((name.to_string(), traj.series(i), scales[i]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(detect_limit_cycle(&traj.times, &series, cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub t: f64,
    pub coords: Vec<f64>,
    /// Difference to the next point (to the previous one for the last point).
    pub direction: Vec<f64>,
}

/// Projection of a trajectory onto two or three named components, in time order.
pub fn phase_export(traj: &Trajectory, vars: &[&str]) -> Result<Vec<PhasePoint>> {
    if !(2..=3).contains(&vars.len()) {
        return Err(Error::domain("phase export needs two or three variables"));
    }
    let idx = vars
        .iter()
        .map(|name| {
            let i = state_index(name).ok_or_else(|| Error::domain(format!("unknown state `{name}`")))?;
            if !traj.subsystem.is_active(i) {
                return Err(Error::domain(format!("`{name}` is not part of the {} subsystem", traj.subsystem.name())));
            }
            Ok(i)
        })
        .collect::<Result<Vec<_>>>()?;
    let coords: Vec<Vec<f64>> = traj.states.iter().map(|s| idx.iter().map(|&i| s.0[i]).collect()).collect();
    Ok(phase_points(&traj.times, &coords))
}

/// Phase points with direction marks for arbitrary coordinate rows.
pub fn phase_points(times: &[f64], coords: &[Vec<f64>]) -> Vec<PhasePoint> {
    let n = coords.len();
    (0..n)
        .map(|k| {
            let (a, b) = if k + 1 < n { (k, k + 1) } else if k > 0 { (k - 1, k) } else { (k, k) };
            PhasePoint {
                t: times[k],
                coords: coords[k].clone(),
                direction: coords[b].iter().zip(&coords[a]).map(|(x, y)| x - y).collect(),
            }
        })
        .collect()
}

pub fn phase_csv(vars: &[&str], points: &[PhasePoint]) -> String {
    let mut out = String::from("time");
    for v in vars {
        write!(out, ",{v}").unwrap();
    }
    for v in vars {
        write!(out, ",d_{v}").unwrap();
    }
    out.push('\n');
    for p in points {
        write!(out, "{}", p.t).unwrap();
        for v in p.coords.iter().chain(&p.direction) {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// `x' = mu*x - x^3`, a reference system with a pitchfork at `mu = 0`.
#[derive(Debug, Clone, Copy)]
pub struct Pitchfork {
    pub mu: f64,
}

impl VectorField for Pitchfork {
    fn dim(&self) -> usize {
        1
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.mu * x[0] - x[0].powi(3);
    }
    fn scales(&self) -> Vec<f64> {
        vec![1.0]
    }
    fn names(&self) -> Vec<String> {
        vec!["x".into()]
    }
    fn nonnegative(&self) -> bool {
        false
    }
}

/// Start settings suited to [`Pitchfork`]: a symmetric linear box.
pub fn pitchfork_search() -> SearchConfig {
    SearchConfig { n_starts: 24, box_lower: vec![-2.0], box_upper: vec![2.0], log_box: false, ..Default::default() }
}
