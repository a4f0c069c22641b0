//! Time-gridded control signals, scenario settings and the two treatment objectives.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{integrate, IntegratorConfig, Trajectory};
use crate::params::ParameterSet;
use crate::state::{ControlInput, StateVector, Subsystem};

/// Which control inputs a signal drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    /// Antibiotic reduction of the pathogen growth rate.
    Up,
    /// Anti-TNF reduction of neutrophil TNF release.
    Ut,
    Both,
}

impl Channel {
    pub fn count(self) -> usize {
        match self {
            Channel::Both => 2,
            _ => 1,
        }
    }
}

/// Piecewise-constant control on a uniform grid. Value `k` is held on
/// `[t_start + k*dt, t_start + (k+1)*dt)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSignal {
    pub t_start: f64,
    pub dt: f64,
    pub channel: Channel,
    pub u_p: Vec<f64>,
    pub u_t: Vec<f64>,
}

impl ControlSignal {
    /// Signal of `len` intervals holding every channel at its lower bound.
    pub fn lower(channel: Channel, t_start: f64, dt: f64, len: usize, p: &ParameterSet) -> Self {
        ControlSignal { t_start, dt, channel, u_p: vec![p.u_pL; len], u_t: vec![p.u_TL; len] }
    }

    /// Single-channel signal; the other channel sits at its lower bound.
    /// For `Channel::Both`, `values` holds all `u_p` values followed by all `u_T` values.
    pub fn from_values(channel: Channel, t_start: f64, dt: f64, values: &[f64], p: &ParameterSet) -> Result<Self> {
        let len = values.len() / channel.count();
        if len * channel.count() != values.len() {
            return Err(Error::domain("value count is not a multiple of the channel count"));
        }
        let mut s = Self::lower(channel, t_start, dt, len, p);
        match channel {
            Channel::Up => s.u_p.copy_from_slice(values),
            Channel::Ut => s.u_t.copy_from_slice(values),
            Channel::Both => {
                s.u_p.copy_from_slice(&values[..len]);
                s.u_t.copy_from_slice(&values[len..]);
            }
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.u_p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u_p.is_empty()
    }

    pub fn t_end(&self) -> f64 {
        self.t_start + self.len() as f64 * self.dt
    }

    pub fn input(&self, k: usize) -> ControlInput {
        ControlInput { u_p: self.u_p[k], u_t: self.u_t[k] }
    }

    /// Active-channel values flattened as in [`ControlSignal::from_values`].
    pub fn active_values(&self) -> Vec<f64> {
        match self.channel {
            Channel::Up => self.u_p.clone(),
            Channel::Ut => self.u_t.clone(),
            Channel::Both => self.u_p.iter().chain(&self.u_t).copied().collect(),
        }
    }

    pub fn check_shape(&self) -> Result<()> {
        if self.u_p.len() != self.u_t.len() {
            return Err(Error::domain("u_p and u_T lengths differ"));
        }
        if !(self.dt > 0.0) || !self.t_start.is_finite() {
            return Err(Error::domain("control grid must have positive spacing"));
        }
        Ok(())
    }

    pub fn check_bounds(&self, p: &ParameterSet) -> Result<()> {
        self.check_shape()?;
        for k in 0..self.len() {
            self.input(k).check_bounds(p)?;
        }
        Ok(())
    }

    /// Output grid and per-interval inputs covering `[t1, tf]`, which must
    /// align with the signal's grid.
    pub fn segment(&self, t1: f64, tf: f64) -> Result<(Vec<f64>, Vec<ControlInput>)> {
        self.check_shape()?;
        let tol = 1e-9 * self.dt;
        let first = (t1 - self.t_start) / self.dt;
        let count = (tf - t1) / self.dt;
        let (first_i, count_i) = (first.round(), count.round());
        if (first - first_i).abs() > 1e-9 || (count - count_i).abs() > 1e-9 || first_i < 0.0 {
            return Err(Error::domain(format!("span [{t1}, {tf}] does not align with the control grid")));
        }
        let (first_i, count_i) = (first_i as usize, count_i as usize);
        if first_i + count_i > self.len() || tf > self.t_end() + tol {
            return Err(Error::domain(format!("control grid does not cover [{t1}, {tf}]")));
        }
        let times = (0..=count_i).map(|k| t1 + k as f64 * self.dt).collect();
        let controls = (first_i..first_i + count_i).map(|k| self.input(k)).collect();
        Ok((times, controls))
    }

    /// CSV with columns `time`, `u_p`, `u_T`; one row per interval start.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,u_p,u_T\n");
        for k in 0..self.len() {
            let t = self.t_start + k as f64 * self.dt;
            writeln!(out, "{t},{},{}", self.u_p[k], self.u_t[k]).unwrap();
        }
        out
    }

    /// Parse the format written by [`ControlSignal::to_csv`]. Times must be
    /// uniformly spaced; both channels are read as given.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::config("empty control file"))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols != ["time", "u_p", "u_T"] {
            return Err(Error::config(format!("control file header must be `time,u_p,u_T`, got `{header}`")));
        }
        let (mut times, mut u_p, mut u_t) = (Vec::new(), Vec::new(), Vec::new());
        for (i, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::config(format!("control file row {}: {e}", i + 1)))?;
            if vals.len() != 3 {
                return Err(Error::config(format!("control file row {} has {} fields", i + 1, vals.len())));
            }
            times.push(vals[0]);
            u_p.push(vals[1]);
            u_t.push(vals[2]);
        }
        if times.is_empty() {
            return Err(Error::config("control file has no rows"));
        }
        let dt = if times.len() > 1 { times[1] - times[0] } else { 1.0 };
        for (k, t) in times.iter().enumerate() {
            if (t - (times[0] + k as f64 * dt)).abs() > 1e-9 * dt.abs().max(1.0) {
                return Err(Error::config("control file times are not uniformly spaced"));
            }
        }
        let s = ControlSignal { t_start: times[0], dt, channel: Channel::Both, u_p, u_t };
        s.check_shape()?;
        Ok(s)
    }
}

/// Componentwise projection onto the control bounds.
pub fn clamp_to_bounds(signal: &ControlSignal, p: &ParameterSet) -> ControlSignal {
    let mut out = signal.clone();
    for v in &mut out.u_p {
        *v = v.clamp(p.u_pL, p.u_pU);
    }
    for v in &mut out.u_t {
        *v = v.clamp(p.u_TL, p.u_TU);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Antibiotic control against a persistent pathogen load.
    Pathogen,
    /// Anti-TNF control against persistent inflammation.
    Tnf,
}

impl Scenario {
    pub fn channel(self) -> Channel {
        match self {
            Scenario::Pathogen => Channel::Up,
            Scenario::Tnf => Channel::Ut,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Pathogen => "pathogen",
            Scenario::Tnf => "tnf",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Objective at the final grid time.
    Terminal,
    /// Trapezoidal time integral over the horizon.
    Integral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub scenario: Scenario,
    pub w1: f64,
    pub w2: f64,
    /// Lower guard applied to every ratio denominator.
    pub epsilon_floor: f64,
    pub aggregation: Aggregation,
}

impl ObjectiveConfig {
    pub fn new(scenario: Scenario) -> Self {
        ObjectiveConfig { scenario, w1: 1.0, w2: 1.0, epsilon_floor: 1e-6, aggregation: Aggregation::Integral }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w1 >= 0.0 && self.w2 >= 0.0) || (self.w1 == 0.0 && self.w2 == 0.0) {
            return Err(Error::config("weights must be nonnegative and not both zero"));
        }
        if !(self.epsilon_floor > 0.0) {
            return Err(Error::config("epsilon_floor must be positive"));
        }
        Ok(())
    }
}

/// Scenario objective at one instant: the M1/M2 and CD8/CD4 ratios for the
/// pathogen scenario, the TNF/IL-10 ratio for the inflammation scenario.
pub fn instantaneous_objective(s: &StateVector, cfg: &ObjectiveConfig) -> f64 {
    let eps = cfg.epsilon_floor;
    match cfg.scenario {
        Scenario::Pathogen => cfg.w1 * s.m1() / s.m2().max(eps) + cfg.w2 * s.t_cd8() / s.t_cd4().max(eps),
        Scenario::Tnf => s.t() / s.c_a().max(eps),
    }
}

/// Patient description: initial state, parameter overrides and horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSetting {
    pub initial: StateVector,
    #[serde(default)]
    pub overrides: BTreeMap<String, f64>,
    pub scenario: Scenario,
    /// Horizon length in grid steps (hours).
    pub t_f: usize,
    /// Control window length in grid steps.
    pub d: usize,
}

impl ScenarioSetting {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d > self.t_f.max(1) {
            return Err(Error::config(format!("window length d={} must be in 1..=t_f={}", self.d, self.t_f)));
        }
        if !self.initial.is_nonnegative() {
            return Err(Error::config("initial state must be nonnegative"));
        }
        Ok(())
    }

    /// Base parameters with this setting's overrides applied.
    pub fn params(&self, base: &ParameterSet) -> Result<ParameterSet> {
        let p = base.with_overrides(&self.overrides)?;
        p.validate()?;
        Ok(p)
    }

    pub fn horizon(&self) -> (f64, f64) {
        (0.0, self.t_f as f64)
    }
}

/// Result of applying a control to a setting.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveEval {
    pub j: f64,
    /// Instantaneous objective at every grid time.
    pub instantaneous: Vec<f64>,
    /// Running trapezoidal integral at every grid time.
    pub accumulated: Vec<f64>,
    pub trajectory: Trajectory,
}

/// Integrate the full model from `x0` over `span` under `control` and score it.
pub fn evaluate_from(
    x0: &StateVector,
    params: &ParameterSet,
    control: &ControlSignal,
    span: (f64, f64),
    cfg: &ObjectiveConfig,
    integ: &IntegratorConfig,
) -> Result<ObjectiveEval> {
    cfg.validate()?;
    let trajectory = integrate(Subsystem::Full, x0, params, Some(control), span, integ)?;
    let instantaneous: Vec<f64> = trajectory.states.iter().map(|s| instantaneous_objective(s, cfg)).collect();
    let mut accumulated = Vec::with_capacity(instantaneous.len());
    let mut acc = 0.0;
    accumulated.push(acc);
    for k in 1..instantaneous.len() {
        let dt = trajectory.times[k] - trajectory.times[k - 1];
        acc += 0.5 * dt * (instantaneous[k - 1] + instantaneous[k]);
        accumulated.push(acc);
    }
    let j = match cfg.aggregation {
        Aggregation::Integral => acc,
        Aggregation::Terminal => *instantaneous.last().expect("nonempty trajectory"),
    };
    Ok(ObjectiveEval { j, instantaneous, accumulated, trajectory })
}

/// Score a full-horizon control for a setting.
pub fn evaluate_objective(
    setting: &ScenarioSetting,
    base: &ParameterSet,
    control: &ControlSignal,
    cfg: &ObjectiveConfig,
    integ: &IntegratorConfig,
) -> Result<ObjectiveEval> {
    setting.validate()?;
    let params = setting.params(base)?;
    evaluate_from(&setting.initial, &params, control, setting.horizon(), cfg, integ)
}

/// Score the uncontrolled course (every channel at its lower bound).
pub fn evaluate_uncontrolled(
    setting: &ScenarioSetting,
    base: &ParameterSet,
    cfg: &ObjectiveConfig,
    integ: &IntegratorConfig,
) -> Result<ObjectiveEval> {
    let params = setting.params(base)?;
    let zero = ControlSignal::lower(setting.scenario.channel(), 0.0, 1.0, setting.t_f, &params);
    evaluate_from(&setting.initial, &params, &zero, setting.horizon(), cfg, integ)
}
