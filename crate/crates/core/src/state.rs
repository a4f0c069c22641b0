//! State vector layout, subsystem masks and control inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterSet;

/// Number of state components in the full model.
pub const STATE_DIM: usize = 20;

/// Component names in storage order.
pub const STATE_NAMES: [&str; STATE_DIM] = [
    "P", "M_kf", "M_kb", "T", "N_R", "N_f", "N_b", "r1", "D", "M_R", "M_f", "M_b", "M1", "M2", "H",
    "C_A", "T_CD4", "T_CD8", "B", "A",
];

/// Storage index of every component.
pub mod idx {
    pub const P: usize = 0;
    pub const M_KF: usize = 1;
    pub const M_KB: usize = 2;
    pub const T: usize = 3;
    pub const N_R: usize = 4;
    pub const N_F: usize = 5;
    pub const N_B: usize = 6;
    pub const R1: usize = 7;
    pub const D: usize = 8;
    pub const M_R: usize = 9;
    pub const M_F: usize = 10;
    pub const M_B: usize = 11;
    pub const M1: usize = 12;
    pub const M2: usize = 13;
    pub const H: usize = 14;
    pub const C_A: usize = 15;
    pub const T_CD4: usize = 16;
    pub const T_CD8: usize = 17;
    pub const B: usize = 18;
    pub const A: usize = 19;
}

/// Index of a component by name.
pub fn state_index(name: &str) -> Option<usize> {
    STATE_NAMES.iter().position(|n| *n == name)
}

/// Immune-system state: twenty nonnegative levels in the order of [`STATE_NAMES`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVector(pub [f64; STATE_DIM]);

impl Default for StateVector {
    fn default() -> Self {
        StateVector([0.0; STATE_DIM])
    }
}

macro_rules! accessors {
    ($( $name:ident = $i:expr ),* $(,)?) => {
        impl StateVector {
            $( #[inline] pub fn $name(&self) -> f64 { self.0[$i] } )*
        }
    };
}

accessors! {
    p = idx::P, m_kf = idx::M_KF, m_kb = idx::M_KB, t = idx::T, n_r = idx::N_R,
    n_f = idx::N_F, n_b = idx::N_B, r1 = idx::R1, d = idx::D, m_r = idx::M_R,
    m_f = idx::M_F, m_b = idx::M_B, m1 = idx::M1, m2 = idx::M2, h = idx::H,
    c_a = idx::C_A, t_cd4 = idx::T_CD4, t_cd8 = idx::T_CD8, b = idx::B, a = idx::A,
}

impl StateVector {
    pub fn zeros() -> Self {
        Self::default()
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; STATE_DIM] = values
            .try_into()
            .map_err(|_| Error::domain(format!("state needs {STATE_DIM} values, got {}", values.len())))?;
        Ok(StateVector(arr))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        state_index(name).map(|i| self.0[i])
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let i = state_index(name).ok_or_else(|| Error::domain(format!("unknown state `{name}`")))?;
        self.0[i] = value;
        Ok(())
    }

    pub fn is_nonnegative(&self) -> bool {
        self.0.iter().all(|v| *v >= 0.0)
    }

    /// Zero every component outside the subsystem's active set.
    pub fn masked(&self, sub: Subsystem) -> Self {
        let mut out = StateVector::zeros();
        for &i in sub.active() {
            out.0[i] = self.0[i];
        }
        out
    }
}

const NEUTROPHIL_ACTIVE: [usize; 9] = [0, 1, 2, 3, 4, 5, 6, 7, 8];
const MONOCYTE_ACTIVE: [usize; 15] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 14, 15];
const FULL_ACTIVE: [usize; 20] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19];

/// The three nested model variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subsystem {
    Neutrophil,
    Monocyte,
    Full,
}

impl Subsystem {
    /// Storage indices of the components this subsystem evolves.
    pub fn active(self) -> &'static [usize] {
        match self {
            Subsystem::Neutrophil => &NEUTROPHIL_ACTIVE,
            Subsystem::Monocyte => &MONOCYTE_ACTIVE,
            Subsystem::Full => &FULL_ACTIVE,
        }
    }

    pub fn is_active(self, i: usize) -> bool {
        self.active().contains(&i)
    }

    pub fn name(self) -> &'static str {
        match self {
            Subsystem::Neutrophil => "neutrophil",
            Subsystem::Monocyte => "monocyte",
            Subsystem::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "neutrophil" => Ok(Subsystem::Neutrophil),
            "monocyte" => Ok(Subsystem::Monocyte),
            "full" => Ok(Subsystem::Full),
            other => Err(Error::config(format!("unknown subsystem `{other}`"))),
        }
    }
}

/// Typical magnitude of every component, used for error weighting,
/// clamping thresholds and scaled norms.
pub fn state_scales(p: &ParameterSet) -> [f64; STATE_DIM] {
    let r1_scale = if p.u_r1 > 0.0 { (p.k_r1 / p.u_r1).max(1.0) } else { 1.0 };
    [
        p.P_inf,
        p.K_inf,
        p.K_inf,
        p.T_ref,
        p.N_S,
        p.N_S,
        p.N_S,
        r1_scale,
        p.A_inf,
        p.M_S,
        p.M_S,
        p.M_S,
        p.M_S,
        p.M_S,
        p.H_ref,
        p.C_inf,
        p.T_CD4_inf,
        p.T_CD8_inf,
        p.B_inf,
        1.0,
    ]
}

/// Instantaneous control values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    /// Fractional reduction of the pathogen growth rate.
    pub u_p: f64,
    /// Fractional reduction of neutrophil TNF-alpha release.
    pub u_t: f64,
}

impl ControlInput {
    pub const ZERO: ControlInput = ControlInput { u_p: 0.0, u_t: 0.0 };

    pub fn new(u_p: f64, u_t: f64) -> Self {
        ControlInput { u_p, u_t }
    }

    /// Error unless both channels lie within the parameter set's bounds.
    pub fn check_bounds(&self, p: &ParameterSet) -> Result<()> {
        let ok_p = self.u_p >= p.u_pL && self.u_p <= p.u_pU;
        let ok_t = self.u_t >= p.u_TL && self.u_t <= p.u_TU;
        if ok_p && ok_t {
            Ok(())
        } else {
            Err(Error::domain(format!(
                "control (u_p={}, u_T={}) outside bounds [{}, {}] x [{}, {}]",
                self.u_p, self.u_t, p.u_pL, p.u_pU, p.u_TL, p.u_TU
            )))
        }
    }
}
