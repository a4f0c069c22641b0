//! Run configuration: one JSON document shared by every command. Sections a
//! command does not use are ignored; everything has a default.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use sepsis_core::bifurcation::{ClassifyConfig, CycleConfig, SearchConfig};
use sepsis_core::bo::BoConfig;
use sepsis_core::control::{Aggregation, ObjectiveConfig, Scenario};
use sepsis_core::integrator::IntegratorConfig;
use sepsis_core::rnn::{RolloutMode, TrainConfig};
use sepsis_core::state::{state_index, StateVector, STATE_DIM};
use sepsis_core::{Error, Result, Subsystem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialState {
    Vector(Vec<f64>),
    Named(BTreeMap<String, f64>),
}

impl InitialState {
    /// Resolve onto `base`: a full vector replaces it, named entries patch it.
    pub fn apply(&self, base: &StateVector) -> Result<StateVector> {
        match self {
            InitialState::Vector(v) => {
                if v.len() != STATE_DIM {
                    return Err(Error::Config(format!("initial state needs {STATE_DIM} values, got {}", v.len())));
                }
                StateVector::from_slice(v)
            }
            InitialState::Named(m) => {
                let mut x = *base;
                for (k, v) in m {
                    let i = state_index(k).ok_or_else(|| Error::Config(format!("unknown state variable `{k}`")))?;
                    x.0[i] = *v;
                }
                Ok(x)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    Values(Vec<f64>),
    Linspace { start: f64, stop: f64, points: usize },
}

impl Grid {
    pub fn values(&self) -> Result<Vec<f64>> {
        match self {
            Grid::Values(v) if !v.is_empty() => Ok(v.clone()),
            Grid::Values(_) => Err(Error::Config("sweep grid is empty".into())),
            Grid::Linspace { start, stop, points } => {
                if *points < 2 || !(stop > start) {
                    return Err(Error::Config("linspace needs points >= 2 and stop > start".into()));
                }
                let n = *points - 1;
                Ok((0..=n).map(|k| start + (stop - start) * k as f64 / n as f64).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CycleSection {
    pub enabled: bool,
    /// Simulation length for the oscillation check (hours).
    pub t_end: f64,
    pub variables: Vec<String>,
    pub thresholds: CycleConfig,
}

impl Default for CycleSection {
    fn default() -> Self {
        CycleSection { enabled: true, t_end: 4000.0, variables: vec!["P".into(), "N_b".into()], thresholds: CycleConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BifurcationSection {
    /// Analysis parameter set: neutrophil, neutrophil-rpn or monocyte.
    pub analysis: String,
    pub param: String,
    pub grid: Grid,
    pub search: SearchConfig,
    pub classify: ClassifyConfig,
    pub cycle: CycleSection,
    /// Run the analytic pitchfork reference instead of a model sweep.
    pub pitchfork: bool,
}

impl Default for BifurcationSection {
    fn default() -> Self {
        BifurcationSection {
            analysis: "neutrophil".into(),
            param: "k_pg".into(),
            grid: Grid::Linspace { start: 0.11, stop: 0.35, points: 25 },
            search: SearchConfig::default(),
            classify: ClassifyConfig::default(),
            cycle: CycleSection::default(),
            pitchfork: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSection {
    pub w1: f64,
    pub w2: f64,
    pub epsilon_floor: f64,
    pub aggregation: Aggregation,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        let o = ObjectiveConfig::new(Scenario::Pathogen);
        ObjectiveSection { w1: o.w1, w2: o.w2, epsilon_floor: o.epsilon_floor, aggregation: o.aggregation }
    }
}

impl ObjectiveSection {
    pub fn for_scenario(&self, scenario: Scenario) -> ObjectiveConfig {
        ObjectiveConfig { scenario, w1: self.w1, w2: self.w2, epsilon_floor: self.epsilon_floor, aggregation: self.aggregation }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub n_settings: usize,
    /// Log-uniform spread of the initial-state perturbation around the preset.
    pub spread: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { n_settings: 5, spread: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSection {
    pub mode: RolloutMode,
    /// Number of held-out settings drawn around the preset; zero uses the preset itself.
    pub n_settings: usize,
    pub spread: f64,
}

impl Default for PredictSection {
    fn default() -> Self {
        PredictSection { mode: RolloutMode::ClosedLoop, n_settings: 0, spread: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    /// Scenario preset: pathogen-high or tnf-persistent.
    pub preset: String,
    /// Subsystem simulated by `simulate` when no preset scenario is wanted.
    pub subsystem: Subsystem,
    pub t_f: usize,
    pub d: usize,
    /// Parameter overrides applied on top of the preset's.
    pub params: BTreeMap<String, f64>,
    pub initial: Option<InitialState>,
    /// Control CSV for `simulate`.
    pub control_file: Option<PathBuf>,
    pub integrator: IntegratorConfig,
    pub objective: ObjectiveSection,
    pub bo: BoConfig,
    pub bifurcation: BifurcationSection,
    pub dataset: DatasetSection,
    pub train: TrainConfig,
    pub predict: PredictSection,
    /// Presets run by `compare`.
    pub compare_presets: Vec<String>,
    pub dataset_path: Option<PathBuf>,
    pub model_path: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 1,
            preset: "tnf-persistent".into(),
            subsystem: Subsystem::Full,
            t_f: 50,
            d: 5,
            params: BTreeMap::new(),
            initial: None,
            control_file: None,
            integrator: IntegratorConfig::default(),
            objective: ObjectiveSection::default(),
            bo: BoConfig::default(),
            bifurcation: BifurcationSection::default(),
            dataset: DatasetSection::default(),
            train: TrainConfig::default(),
            predict: PredictSection::default(),
            compare_presets: vec!["pathogen-high".into(), "tnf-persistent".into()],
            dataset_path: None,
            model_path: None,
        }
    }
}

impl RunConfig {
    /// Parse a config file. A manifest from an earlier run is accepted too:
    /// its resolved config is used.
    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let v = match v.get("resolved_config") {
            Some(inner) if v.get("command").is_some() => inner.clone(),
            _ => v,
        };
        Ok(serde_json::from_value(v)?)
    }

    /// Push the single top-level seed into every seeded component.
    pub fn finalize(mut self) -> Result<Self> {
        self.bo.seed = self.seed;
        self.bo.d = self.d;
        self.train.seed = self.seed;
        self.bifurcation.search.seed = self.seed;
        if self.workers == 0 {
            return Err(Error::Config("workers must be positive".into()));
        }
        self.integrator.validate()?;
        self.bo.validate()?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linspace_includes_both_ends() {
        let g = Grid::Linspace { start: 130.0, stop: 133.0, points: 31 };
        let v = g.values().unwrap();
        assert_eq!(v.len(), 31);
        assert_eq!(v[0], 130.0);
        assert_eq!(v[30], 133.0);
        assert!(Grid::Linspace { start: 1.0, stop: 0.0, points: 5 }.values().is_err());
        assert!(Grid::Values(vec![]).values().is_err());
    }

    #[test]
    fn named_initial_patches_base() {
        let base = StateVector::from_slice(&[1.0; STATE_DIM]).unwrap();
        let mut m = BTreeMap::new();
        m.insert("P".to_string(), 5.0);
        let x = InitialState::Named(m).apply(&base).unwrap();
        assert_eq!(x.0[0], 5.0);
        assert_eq!(x.0[1], 1.0);
        let mut bad = BTreeMap::new();
        bad.insert("nope".to_string(), 1.0);
        assert!(InitialState::Named(bad).apply(&base).is_err());
        assert!(InitialState::Vector(vec![0.0; 3]).apply(&base).is_err());
    }

    #[test]
    fn seed_reaches_every_component() {
        let cfg = RunConfig { seed: 7, d: 3, ..RunConfig::default() }.finalize().unwrap();
        assert_eq!((cfg.bo.seed, cfg.train.seed, cfg.bifurcation.search.seed, cfg.bo.d), (7, 7, 7, 3));
        assert!(RunConfig { workers: 0, ..RunConfig::default() }.finalize().is_err());
    }

    #[test]
    fn manifest_wrapper_yields_resolved_config() {
        let cfg = RunConfig { seed: 11, ..RunConfig::default() };
        let wrapped = serde_json::json!({ "command": "simulate", "resolved_config": cfg });
        assert_eq!(RunConfig::from_json(&wrapped.to_string()).unwrap(), cfg);
        assert!(RunConfig::from_json("{\"typo\": 1}").is_err());
    }
}
