//! Sliding-window control dataset: for each setting, solve every window of the
//! horizon from the state reached by applying earlier windows' first values.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::window::{solve_window, step_state};
use super::{derive_seed, BoConfig};
use crate::control::{evaluate_from, ControlSignal, ObjectiveConfig, Scenario, ScenarioSetting};
use crate::error::{Error, Result};
use crate::integrator::IntegratorConfig;
use crate::params::ParameterSet;
use crate::state::StateVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub setting_id: usize,
    pub window_start: usize,
    pub state: StateVector,
    pub param_overrides: BTreeMap<String, f64>,
    /// One row of `d` values per active channel.
    pub control: Vec<Vec<f64>>,
    pub objective: f64,
    pub seed: u64,
}

impl DatasetRecord {
    /// Re-evaluate the stored control window from the stored state; the result
    /// should equal `objective`.
    pub fn replay(&self, scenario: Scenario, base: &ParameterSet, obj: &ObjectiveConfig, integ: &IntegratorConfig) -> Result<f64> {
        let params = base.with_overrides(&self.param_overrides)?;
        let d = self.control.first().map_or(0, |r| r.len());
        let signal = ControlSignal::from_values(scenario.channel(), self.window_start as f64, 1.0, &self.control.concat(), &params)?;
        let span = (self.window_start as f64, (self.window_start + d) as f64);
        Ok(evaluate_from(&self.state, &params, &signal, span, obj, integ)?.j)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingFailure {
    pub setting_id: usize,
    pub window_start: usize,
    pub error: String,
    /// Records kept for this setting before the failure.
    pub partial_records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub scenario: Scenario,
    pub d: usize,
    pub t_f: usize,
    pub n_settings: usize,
    pub seed: u64,
    pub config_hash: String,
    pub complete: bool,
    #[serde(default)]
    pub failures: Vec<SettingFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlDataset {
    pub header: DatasetHeader,
    pub records: Vec<DatasetRecord>,
}

#[derive(Serialize)]
struct HashInput<'a> {
    settings: &'a [ScenarioSetting],
    base: &'a ParameterSet,
    bo: &'a BoConfig,
    objective: &'a ObjectiveConfig,
    integrator: &'a IntegratorConfig,
}

/// SHA-256 of the canonical JSON of everything that determines the dataset.
pub fn config_hash(
    settings: &[ScenarioSetting],
    base: &ParameterSet,
    cfg: &BoConfig,
    obj: &ObjectiveConfig,
    integ: &IntegratorConfig,
) -> Result<String> {
    let json = serde_json::to_vec(&HashInput { settings, base, bo: cfg, objective: obj, integrator: integ })?;
    Ok(hex::encode(Sha256::digest(json)))
}

fn run_setting(
    id: usize,
    setting: &ScenarioSetting,
    base: &ParameterSet,
    cfg: &BoConfig,
    obj: &ObjectiveConfig,
    integ: &IntegratorConfig,
) -> (Vec<DatasetRecord>, Option<SettingFailure>) {
    let mut records = Vec::new();
    let fail = |s: usize, e: Error, n: usize| SettingFailure { setting_id: id, window_start: s, error: e.to_string(), partial_records: n };
    let params = match setting.params(base) {
        Ok(p) => p,
        Err(e) => return (records, Some(fail(0, e, 0))),
    };
    let channel = setting.scenario.channel();
    let mut x = setting.initial;
    for s in 0..=setting.t_f - setting.d {
        let seed = derive_seed(cfg.seed, id as u64 + 1, s as u64);
        let wcfg = BoConfig { seed, ..cfg.clone() };
        let w = match solve_window(setting, base, s, &x, &wcfg, obj, integ) {
            Ok(w) => w,
            Err(e) => return (records, Some(fail(s, e, s))),
        };
        let first: Vec<f64> = w.control_window.iter().map(|r| r[0]).collect();
        records.push(DatasetRecord {
            setting_id: id,
            window_start: s,
            state: x,
            param_overrides: setting.overrides.clone(),
            control: w.control_window,
            objective: w.objective,
            seed,
        });
        if s < setting.t_f - setting.d {
            match step_state(&x, &params, channel, s, &first, integ) {
                Ok(next) => x = next,
                Err(e) => return (records, Some(fail(s + 1, e, s + 1))),
            }
        }
    }
    (records, None)
}

/// Build the dataset. Settings run in parallel; output order is by setting
/// then window, independent of scheduling.
pub fn generate_dataset(
    settings: &[ScenarioSetting],
    base: &ParameterSet,
    cfg: &BoConfig,
    obj: &ObjectiveConfig,
    integ: &IntegratorConfig,
) -> Result<ControlDataset> {
    let first = settings.first().ok_or_else(|| Error::config("no settings given"))?;
    cfg.validate()?;
    obj.validate()?;
    integ.validate()?;
    for s in settings {
        s.validate()?;
        if s.t_f != first.t_f || s.d != first.d || s.scenario != first.scenario {
            return Err(Error::config("all settings must share scenario, t_f and d"));
        }
    }
    if obj.scenario != first.scenario {
        return Err(Error::config("objective scenario differs from the settings' scenario"));
    }
    let results: Vec<_> =
        settings.par_iter().enumerate().map(|(i, s)| run_setting(i, s, base, cfg, obj, integ)).collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (r, f) in results {
        records.extend(r);
        failures.extend(f);
    }
    Ok(ControlDataset {
        header: DatasetHeader {
            scenario: first.scenario,
            d: first.d,
            t_f: first.t_f,
            n_settings: settings.len(),
            seed: cfg.seed,
            config_hash: config_hash(settings, base, cfg, obj, integ)?,
            complete: failures.is_empty(),
            failures,
        },
        records,
    })
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: DatasetHeader,
}

impl ControlDataset {
    pub fn expected_records(&self) -> usize {
        self.header.n_settings * (self.header.t_f - self.header.d + 1)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &HeaderLine { header: self.header.clone() })?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let head = lines.next().ok_or_else(|| Error::config("empty dataset file"))??;
        let header = serde_json::from_str::<HeaderLine>(&head)?.header;
        let mut records = Vec::new();
        for line in lines {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(ControlDataset { header, records })
    }
}
