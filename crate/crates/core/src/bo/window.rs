//! One control window solved by BO, and the receding-horizon driver that
//! stitches window solutions into a full-horizon control.

use serde::{Deserialize, Serialize};

use super::{minimize, random_search, BoConfig, BoRun};
use crate::control::{evaluate_from, Channel, ControlSignal, ObjectiveConfig, ScenarioSetting};
use crate::error::{Error, Result};
use crate::integrator::{integrate, IntegratorConfig};
use crate::params::ParameterSet;
use crate::state::{StateVector, Subsystem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSolution {
    pub window_start: usize,
    /// One row of `d` values per active channel.
    pub control_window: Vec<Vec<f64>>,
    pub objective: f64,
    pub eval_count: usize,
    /// Evaluations that failed and were scored as +inf.
    pub failures: usize,
    pub x_start: StateVector,
}

impl WindowSolution {
    /// The window as a control signal starting at the window's grid time.
    pub fn signal(&self, channel: Channel, p: &ParameterSet) -> Result<ControlSignal> {
        let flat: Vec<f64> = self.control_window.concat();
        ControlSignal::from_values(channel, self.window_start as f64, 1.0, &flat, p)
    }
}

/// How each window is searched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Searcher {
    Improved,
    Standard,
    Random,
}

/// Objective of a normalized control vector for one window.
pub struct WindowProblem<'a> {
    pub params: ParameterSet,
    pub channel: Channel,
    pub window_start: usize,
    pub d: usize,
    pub x_start: StateVector,
    pub obj: &'a ObjectiveConfig,
    pub integ: &'a IntegratorConfig,
}

impl<'a> WindowProblem<'a> {
    pub fn new(
        setting: &ScenarioSetting,
        base: &ParameterSet,
        window_start: usize,
        x_start: &StateVector,
        obj: &'a ObjectiveConfig,
        integ: &'a IntegratorConfig,
    ) -> Result<Self> {
        setting.validate()?;
        obj.validate()?;
        if window_start + setting.d > setting.t_f {
            return Err(Error::config(format!(
                "window [{}, {}] exceeds horizon {}",
                window_start,
                window_start + setting.d,
                setting.t_f
            )));
        }
        Ok(WindowProblem {
            params: setting.params(base)?,
            channel: setting.scenario.channel(),
            window_start,
            d: setting.d,
            x_start: *x_start,
            obj,
            integ,
        })
    }

    pub fn dim(&self) -> usize {
        self.d * self.channel.count()
    }

    /// Map `[0,1]` coordinates to raw control values, channel by channel.
    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        let p = &self.params;
        x.iter()
            .enumerate()
            .map(|(i, v)| {
                let up = match self.channel {
                    Channel::Up => true,
                    Channel::Ut => false,
                    Channel::Both => i < self.d,
                };
                let (lo, hi) = if up { (p.u_pL, p.u_pU) } else { (p.u_TL, p.u_TU) };
                (lo + (hi - lo) * v.clamp(0.0, 1.0)).clamp(lo, hi)
            })
            .collect()
    }

    pub fn signal(&self, x: &[f64]) -> Result<ControlSignal> {
        ControlSignal::from_values(self.channel, self.window_start as f64, 1.0, &self.denormalize(x), &self.params)
    }

    /// Window-restricted accumulated objective.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        let signal = self.signal(x)?;
        let span = (self.window_start as f64, (self.window_start + self.d) as f64);
        let e = evaluate_from(&self.x_start, &self.params, &signal, span, self.obj, self.integ)?;
        if e.j.is_finite() {
            Ok(e.j)
        } else {
            Err(Error::numeric("objective is not finite"))
        }
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        self.evaluate(x).unwrap_or(f64::INFINITY)
    }

    fn rows(&self, raw: &[f64]) -> Vec<Vec<f64>> {
        raw.chunks(self.d).map(|c| c.to_vec()).collect()
    }

    pub fn solution(&self, run: &BoRun) -> Result<WindowSolution> {
        if !run.best_value.is_finite() {
            return Err(Error::numeric(format!("every evaluation failed in window starting at {}", self.window_start)));
        }
        Ok(WindowSolution {
            window_start: self.window_start,
            control_window: self.rows(&self.denormalize(&run.best_x)),
            objective: run.best_value,
            eval_count: run.eval_count(),
            failures: run.history.iter().filter(|e| !e.value.is_finite()).count(),
            x_start: self.x_start,
        })
    }
}

/// Run the search for one window.
pub fn solve_window_with(
    setting: &ScenarioSetting,
    base: &ParameterSet,
    window_start: usize,
    x_start: &StateVector,
    cfg: &BoConfig,
    searcher: Searcher,
    obj: &ObjectiveConfig,
    integ: &IntegratorConfig,
) -> Result<WindowSolution> {
    let prob = WindowProblem::new(setting, base, window_start, x_start, obj, integ)?;
    let f = |x: &[f64]| prob.score(x);
    let run = match searcher {
        Searcher::Improved => minimize(f, prob.dim(), cfg)?,
        Searcher::Standard => minimize(f, prob.dim(), &cfg.standard())?,
        Searcher::Random => random_search(f, prob.dim(), cfg.budget(), cfg.seed, cfg.parallel_eval),
    };
    prob.solution(&run)
}

/// Improved BO on one window.
pub fn solve_window(
    setting: &ScenarioSetting,
    base: &ParameterSet,
    window_start: usize,
    x_start: &StateVector,
    cfg: &BoConfig,
    obj: &ObjectiveConfig,
    integ: &IntegratorConfig,
) -> Result<WindowSolution> {
    solve_window_with(setting, base, window_start, x_start, cfg, Searcher::Improved, obj, integ)
}

/// Advance `x` by one grid step from `t` under the constant `input` values.
pub fn step_state(
    x: &StateVector,
    params: &ParameterSet,
    channel: Channel,
    t: usize,
    first: &[f64],
    integ: &IntegratorConfig,
) -> Result<StateVector> {
    let signal = ControlSignal::from_values(channel, t as f64, 1.0, first, params)?;
    let traj = integrate(Subsystem::Full, x, params, Some(&signal), (t as f64, t as f64 + 1.0), integ)?;
    Ok(*traj.last_state())
}

/// Receding-horizon plan: one solved window per start index, and the
/// full-horizon control built from each window's first value, with the last
/// window supplying the tail.
#[derive(Debug, Clone, PartialEq)]
pub struct RecedingPlan {
    pub windows: Vec<WindowSolution>,
    pub control: ControlSignal,
    /// Start state of every window, plus the state after the last applied step.
    pub states: Vec<StateVector>,
}

impl RecedingPlan {
    pub fn eval_count(&self) -> usize {
        self.windows.iter().map(|w| w.eval_count).sum()
    }
}

/// Solve every window of the horizon in turn. The seed of window `s` is derived
/// from `cfg.seed` and `s`.
pub fn receding_horizon(
    setting: &ScenarioSetting,
    base: &ParameterSet,
    cfg: &BoConfig,
    searcher: Searcher,
    obj: &ObjectiveConfig,
    integ: &IntegratorConfig,
) -> Result<RecedingPlan> {
    setting.validate()?;
    let params = setting.params(base)?;
    let channel = setting.scenario.channel();
    let n_windows = setting.t_f - setting.d + 1;
    let mut x = setting.initial;
    let mut windows = Vec::with_capacity(n_windows);
    let mut states = vec![x];
    let mut applied: Vec<Vec<f64>> = vec![Vec::with_capacity(setting.t_f); channel.count()];
    for s in 0..n_windows {
        let wcfg = BoConfig { seed: super::derive_seed(cfg.seed, 0, s as u64), ..cfg.clone() };
        let w = solve_window_with(setting, base, s, &x, &wcfg, searcher, obj, integ)?;
        let take = if s + 1 == n_windows { setting.d } else { 1 };
        for (row, out) in w.control_window.iter().zip(applied.iter_mut()) {
            out.extend_from_slice(&row[..take]);
        }
        let first: Vec<f64> = w.control_window.iter().map(|r| r[0]).collect();
        x = step_state(&x, &params, channel, s, &first, integ)?;
        states.push(x);
        windows.push(w);
    }
    let control = ControlSignal::from_values(channel, 0.0, 1.0, &applied.concat(), &params)?;
    Ok(RecedingPlan { windows, control, states })
}
