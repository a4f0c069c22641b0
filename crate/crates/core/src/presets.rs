//! Frozen parameter sets and patient scenarios used by the analyses, the CLI
//! and the acceptance suite. Values were tuned once and are pinned by hash in
//! the tests; change them only together with those pins.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::control::{ObjectiveConfig, Scenario, ScenarioSetting};
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::state::{idx, StateVector, Subsystem};

/// Growth rate at which the neutrophil subsystem oscillates.
pub const NEUTROPHIL_OSC_KPG: f64 = 0.1;
/// Growth rate at which the monocyte subsystem oscillates.
pub const MONOCYTE_OSC_KPG: f64 = 0.65;
/// Growth rate held fixed while sweeping the neutrophil kill rate.
pub const NEUTROPHIL_RPN_SWEEP_KPG: f64 = 0.9926;

fn with(pairs: &[(&str, f64)]) -> ParameterSet {
    let mut p = ParameterSet::default();
    for (k, v) in pairs {
        p.set(k, *v).expect("preset keys are valid");
    }
    p
}

/// Neutrophil subsystem parameters for the oscillation and sweep analyses.
pub fn neutrophil_params() -> ParameterSet {
    with(&[
        ("k_pg", NEUTROPHIL_OSC_KPG),
        ("k_mk", 0.015),
        ("u_mk", 0.62),
        ("k_mkub", 0.143),
        ("u_t", 0.0487),
        ("k_rd", 0.57),
        ("u_nr", 0.0766),
        ("k_nub", 0.0378),
        ("r_pn", 23.7),
        ("T_ref", 3.4e10),
        ("u_r1", 0.0298),
    ])
}

/// Neutrophil parameters for the kill-rate sweep.
pub fn neutrophil_rpn_params() -> ParameterSet {
    let mut p = neutrophil_params();
    p.k_pg = NEUTROPHIL_RPN_SWEEP_KPG;
    p
}

/// Monocyte subsystem parameters for the oscillation analysis.
pub fn monocyte_params() -> ParameterSet {
    with(&[
        ("k_pg", MONOCYTE_OSC_KPG),
        ("k_mk", 0.015),
        ("u_mk", 0.35),
        ("k_mkub", 0.22),
        ("u_t", 0.13),
        ("k_rd", 0.31),
        ("u_nr", 0.12),
        ("k_nub", 0.118),
        ("r_pn", 55.0),
        ("u_h", 0.5),
        ("T_ref", 1e6),
        ("H_ref", 86.0),
    ])
}

/// Start for oscillation runs: the pathogen-free equilibrium of the subsystem
/// seeded with a small pathogen load.
pub fn oscillation_start(sub: Subsystem, p: &ParameterSet) -> StateVector {
    let field = crate::bifurcation::SubsystemField::new(sub, p.clone());
    let mut x = field.boundary_equilibrium();
    x.0[idx::P] = 1e3;
    x
}

/// Patient scenario with its objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioPreset {
    pub name: String,
    pub setting: ScenarioSetting,
    pub objective: ObjectiveConfig,
}

pub const PRESET_NAMES: [&str; 2] = ["pathogen-high", "tnf-persistent"];

// Shared by both scenarios: keeps TNF-driven recruitment and activation rates
// on the same footing as the pathogen-driven ones.
const SCENARIO_T_REF: f64 = 1e8;

fn state(pairs: &[(usize, f64)]) -> StateVector {
    let mut x = StateVector::zeros();
    for (i, v) in pairs {
        x.0[*i] = *v;
    }
    x
}

/// Pathogen overwhelms a waning resident-macrophage pool: untreated, the load
/// stays near capacity while TNF collapses. Antibiotic control.
pub fn pathogen_high(t_f: usize, d: usize) -> ScenarioPreset {
    use idx::*;
    let initial = state(&[
        (P, 1e6),
        (M_KF, 1e7),
        (T, 10.0),
        (N_R, 3e5),
        (R1, 1000.0),
        (M_R, 4e4),
        (M_F, 1e3),
        (M1, 1.0),
        (M2, 1.0),
        (C_A, 1.0),
        (T_CD4, 1e7),
        (T_CD8, 2e6),
        (B, 1e7),
        (A, 1.0),
    ]);
    let overrides = BTreeMap::from([("k_mk".into(), 0.015), ("u_mk".into(), 0.9), ("T_ref".into(), SCENARIO_T_REF)]);
    ScenarioPreset {
        name: "pathogen-high".into(),
        setting: ScenarioSetting { initial, overrides, scenario: Scenario::Pathogen, t_f, d },
        objective: ObjectiveConfig::new(Scenario::Pathogen),
    }
}

/// A large pool of slowly releasing pathogen-bound neutrophils keeps TNF high
/// after the pathogen is cleared. Anti-TNF control.
pub fn tnf_persistent(t_f: usize, d: usize) -> ScenarioPreset {
    use idx::*;
    let initial = state(&[
        (P, 1e5),
        (M_KF, 1e7),
        (T, 100.0),
        (N_R, 3e5),
        (N_F, 1e4),
        (N_B, 1e5),
        (R1, 1000.0),
        (M_R, 4e4),
        (M1, 1.0),
        (M2, 1.0),
        (C_A, 100.0),
        (T_CD4, 1e7),
        (T_CD8, 1e3),
        (B, 1e7),
        (A, 1.0),
    ]);
    let overrides = BTreeMap::from([("k_pg".into(), 0.3), ("k_nub".into(), 0.01), ("T_ref".into(), SCENARIO_T_REF)]);
    ScenarioPreset {
        name: "tnf-persistent".into(),
        setting: ScenarioSetting { initial, overrides, scenario: Scenario::Tnf, t_f, d },
        objective: ObjectiveConfig::new(Scenario::Tnf),
    }
}

pub fn scenario_preset(name: &str, t_f: usize, d: usize) -> Result<ScenarioPreset> {
    match name {
        "pathogen-high" => Ok(pathogen_high(t_f, d)),
        "tnf-persistent" => Ok(tnf_persistent(t_f, d)),
        _ => Err(Error::config(format!("unknown preset `{name}` (expected one of {})", PRESET_NAMES.join(", ")))),
    }
}

/// Named parameter sets for the subsystem analyses.
pub fn analysis_params(name: &str) -> Result<(Subsystem, ParameterSet)> {
    match name {
        "neutrophil" => Ok((Subsystem::Neutrophil, neutrophil_params())),
        "neutrophil-rpn" => Ok((Subsystem::Neutrophil, neutrophil_rpn_params())),
        "monocyte" => Ok((Subsystem::Monocyte, monocyte_params())),
        _ => Err(Error::config(format!("unknown analysis preset `{name}`"))),
    }
}

/// Perturbed copies of a scenario: each initial state component with a
/// positive value is scaled by a log-uniform factor in `[1/spread, spread]`.
pub fn perturbed_settings(base: &ScenarioSetting, n: usize, spread: f64, seed: u64) -> Vec<ScenarioSetting> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let ln = spread.max(1.0).ln();
    (0..n)
        .map(|_| {
            let mut s = base.clone();
            for v in s.initial.0.iter_mut() {
                if *v > 0.0 {
                    *v *= (rng.gen_range(-1.0..=1.0) * ln).exp();
                }
            }
            s
        })
        .collect()
}
