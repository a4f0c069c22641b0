//! Rate constants, capacities, control bounds and objective weights.
//!
//! Every parameter is addressed by its symbol name (`k_pg`, `P_inf`, ...).
//! The table below is the single source for defaults and admissible ranges;
//! the struct, name lookup and JSON mapping are generated from it.

use serde::de::Deserializer;
use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Static description of one parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamSpec {
    pub key: &'static str,
    pub default: f64,
    /// Admissible interval when the source table gives a range.
    pub range: Option<(f64, f64)>,
    pub kind: ParamKind,
}

/// How a parameter is validated beyond finiteness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Rate or constant, must be nonnegative.
    Rate,
    /// Carrying capacity or half-saturation constant, must be strictly positive.
    Positive,
    /// Hill exponent, must be at least 1.
    Exponent,
    /// Control bound, must lie in [0, 1].
    Fraction,
}

macro_rules! parameter_table {
    ($( $field:ident : $key:literal = $default:expr, $kind:ident $(, [$lo:expr, $hi:expr])? ; )*) => {
        /// All model constants, control bounds and objective weights.
        #[allow(non_snake_case)]
        #[derive(Debug, Clone, PartialEq)]
        pub struct ParameterSet {
            $( pub $field: f64, )*
        }

        impl Default for ParameterSet {
            fn default() -> Self {
                ParameterSet { $( $field: $default, )* }
            }
        }

        /// Parameter table in declaration order.
        pub const PARAMETERS: &[ParamSpec] = &[
            $( ParamSpec {
                key: $key,
                default: $default,
                range: parameter_table!(@range $( $lo, $hi )?),
                kind: ParamKind::$kind,
            }, )*
        ];

        impl ParameterSet {
            /// Value of the parameter named `key`.
            pub fn get(&self, key: &str) -> Option<f64> {
                match key {
                    $( $key => Some(self.$field), )*
                    _ => None,
                }
            }

            /// Set the parameter named `key` (no validation; see [`ParameterSet::validate`]).
            pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
                match key {
                    $( $key => { self.$field = value; Ok(()) } )*
                    _ => Err(Error::config(format!("unknown parameter `{key}`"))),
                }
            }
        }
    };
    (@range $lo:expr, $hi:expr) => { Some(($lo, $hi)) };
    (@range) => { None };
}

parameter_table! {
    k_pg: "k_pg" = 1.8, Rate, [0.0, 3.6];
    P_inf: "P_inf" = 1e8, Positive;
    r_pmk: "r_pmk" = 0.03, Rate;
    n: "n" = 2.0, Exponent;
    k_c1: "k_c1" = 0.03, Positive;
    r_pn: "r_pn" = 60.0, Rate, [20.0, 100.0];
    k_c2: "k_c2" = 1.5e-4, Positive;
    k_mk: "k_mk" = 1.0075, Rate, [0.015, 2.0];
    K_inf: "K_inf" = 18e6, Positive, [16e6, 20e6];
    k_mkub: "k_mkub" = 0.435, Rate, [0.1, 0.77];
    u_mk: "u_mk" = 0.565, Rate, [0.23, 0.9];
    r_t1max: "r_t1max" = 10.0, Rate;
    m_t1: "m_t1" = 1e4, Positive;
    r_t2max: "r_t2max" = 1000.0, Rate;
    m_t2: "m_t2" = 1e4, Positive;
    u_t: "u_t" = 0.2625, Rate, [0.025, 0.5];
    k_rd: "k_rd" = 0.41, Rate, [0.1, 0.72];
    N_S: "N_S" = 3.5e5, Positive;
    u_nr: "u_nr" = 0.0945, Rate, [0.069, 0.12];
    k_nub: "k_nub" = 0.255, Rate, [0.01, 0.5];
    u_n: "u_n" = 0.05, Rate;
    k_r1: "k_r1" = 3.0, Rate;
    u_r1: "u_r1" = 0.003, Rate;
    r_hn: "r_hn" = 9000.0, Rate;
    k_c3: "k_c3" = 0.04, Positive;
    A_inf: "A_inf" = 3.2e8, Positive;
    r_ah: "r_ah" = 1.25, Rate, [0.5, 2.0];
    C_inf: "C_inf" = 0.02, Positive;
    u_mn: "u_mn" = 200.0, Rate;
    k_mr: "k_mr" = 0.5, Rate;
    M_S: "M_S" = 5e4, Positive;
    r_2: "r_2" = 80.0, Rate;
    u_mr: "u_mr" = 0.2, Rate;
    u_m: "u_m" = 0.08, Rate;
    k_umb: "k_umb" = 0.4, Rate;
    r_pm: "r_pm" = 7.0, Rate;
    k_c4: "k_c4" = 0.002, Positive;
    r_h1max: "r_h1max" = 0.001, Rate;
    mh_1: "mh_1" = 1e4, Positive;
    u_h: "u_h" = 1.75, Rate, [0.5, 3.0];
    r_camax: "r_camax" = 1e4, Rate;
    C_Ah: "C_Ah" = 1e4, Positive;
    u_ca: "u_ca" = 0.02, Rate;
    r_pcd4: "r_pcd4" = 8.0, Rate;
    k_c5: "k_c5" = 0.035, Positive;
    k_c6: "k_c6" = 0.0015, Positive;
    r_pAb: "r_pAb" = 1.0, Rate;
    r_Mkbcd8: "r_Mkbcd8" = 0.25, Rate;
    r_Nbcd8: "r_Nbcd8" = 0.25, Rate;
    k_c7: "k_c7" = 0.0015, Positive;
    r_cd4Mb: "r_cd4Mb" = 4.0, Rate;
    r_cd8Mb: "r_cd8Mb" = 4.0, Rate;
    k_c8: "k_c8" = 0.0075, Positive;
    r_Mbcd8: "r_Mbcd8" = 0.25, Rate;
    k_cd4M: "k_cd4M" = 1.365, Rate, [0.73, 2.0];
    k_cd8M: "k_cd8M" = 1.365, Rate, [0.73, 2.0];
    k_c9: "k_c9" = 0.045, Positive;
    k_c10: "k_c10" = 0.018, Positive;
    k_cd4: "k_cd4" = 0.014, Rate;
    T_CD4_inf: "T_CD4_inf" = 27.4e6, Positive;
    u_cd4: "u_cd4" = 0.000915, Rate, [0.00083, 0.001];
    k_cd8: "k_cd8" = 0.0625, Rate;
    T_CD8_inf: "T_CD8_inf" = 5e6, Positive;
    u_cd8: "u_cd8" = 0.000895, Rate, [0.00079, 0.001];
    k_B: "k_B" = 0.0122, Rate;
    B_inf: "B_inf" = 28.6e6, Positive;
    r_Bt: "r_Bt" = 5.5, Rate, [1.0, 10.0];
    u_B: "u_B" = 0.00014, Rate, [0.00012, 0.00016];
    r_Abmax: "r_Abmax" = 0.00053, Rate;
    m_Ab: "m_Ab" = 1e4, Positive;
    u_Ab: "u_Ab" = 0.00675, Rate;
    w1: "w1" = 1.0, Rate;
    w2: "w2" = 1.0, Rate;
    u_pL: "u_pL" = 0.0, Fraction;
    u_pU: "u_pU" = 1.0, Fraction;
    u_TL: "u_TL" = 0.0, Fraction;
    u_TU: "u_TU" = 1.0, Fraction;
    T_ref: "T_ref" = 1.0, Positive;
    H_ref: "H_ref" = 1.0, Positive;
}

impl ParameterSet {
    /// Look up the static description of a parameter.
    pub fn spec(key: &str) -> Option<&'static ParamSpec> {
        PARAMETERS.iter().find(|s| s.key == key)
    }

    /// `(name, value)` pairs in table order.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        PARAMETERS
            .iter()
            .map(|s| (s.key, self.get(s.key).expect("table key")))
            .collect()
    }

    /// Check the hard invariants: finiteness, sign constraints, `n >= 1`,
    /// ordered control bounds and strictly positive capacities.
    pub fn validate(&self) -> Result<()> {
        for spec in PARAMETERS {
            let v = self.get(spec.key).expect("table key");
            if !v.is_finite() {
                return Err(Error::config(format!("{} is not finite", spec.key)));
            }
            let ok = match spec.kind {
                ParamKind::Rate => v >= 0.0,
                ParamKind::Positive => v > 0.0,
                ParamKind::Exponent => v >= 1.0,
                ParamKind::Fraction => (0.0..=1.0).contains(&v),
            };
            if !ok {
                let need = match spec.kind {
                    ParamKind::Rate => ">= 0",
                    ParamKind::Positive => "> 0",
                    ParamKind::Exponent => ">= 1",
                    ParamKind::Fraction => "in [0, 1]",
                };
                return Err(Error::config(format!("{} = {v} must be {need}", spec.key)));
            }
        }
        if self.u_pL > self.u_pU {
            return Err(Error::config("u_pL must not exceed u_pU"));
        }
        if self.u_TL > self.u_TU {
            return Err(Error::config("u_TL must not exceed u_TU"));
        }
        if self.w1 == 0.0 && self.w2 == 0.0 {
            return Err(Error::config("w1 and w2 must not both be zero"));
        }
        Ok(())
    }

    /// Parameters whose value lies outside the tabulated range, as readable messages.
    pub fn range_warnings(&self) -> Vec<String> {
        PARAMETERS
            .iter()
            .filter_map(|s| {
                let (lo, hi) = s.range?;
                let v = self.get(s.key).expect("table key");
                (v < lo || v > hi).then(|| format!("{} = {v} is outside the tabulated range [{lo}, {hi}]", s.key))
            })
            .collect()
    }

    /// Build from a flat JSON object. Unknown keys are rejected; missing keys
    /// take their defaults and are reported in the returned warning list.
    pub fn from_json_map(map: &Map<String, Value>) -> Result<(ParameterSet, Vec<String>)> {
        let mut params = ParameterSet::default();
        for (key, value) in map {
            if Self::spec(key).is_none() {
                return Err(Error::config(format!("unknown parameter `{key}`")));
            }
            let v = value
                .as_f64()
                .ok_or_else(|| Error::config(format!("parameter `{key}` must be a number")))?;
            params.set(key, v)?;
        }
        let warnings = PARAMETERS
            .iter()
            .filter(|s| !map.contains_key(s.key))
            .map(|s| format!("{} missing, using default {}", s.key, s.default))
            .collect();
        Ok((params, warnings))
    }

    /// Apply a partial override map on top of `self`.
    pub fn with_overrides<'a, I>(&self, overrides: I) -> Result<ParameterSet>
    where
        I: IntoIterator<Item = (&'a String, &'a f64)>,
    {
        let mut out = self.clone();
        for (k, v) in overrides {
            out.set(k, *v)?;
        }
        Ok(out)
    }

    pub fn to_json_map(&self) -> Map<String, Value> {
        self.entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), Value::from(v)))
            .collect()
    }
}

impl Serialize for ParameterSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(PARAMETERS.len()))?;
        for (k, v) in self.entries() {
            map.serialize_entry(k, &v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for ParameterSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let map = Map::<String, Value>::deserialize(deserializer)?;
        ParameterSet::from_json_map(&map)
            .map(|(p, _)| p)
            .map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let p = ParameterSet::default();
        p.validate().unwrap();
        assert!(p.range_warnings().is_empty());
    }

    #[test]
    fn defaults_sit_at_range_midpoints() {
        for spec in PARAMETERS {
            if let Some((lo, hi)) = spec.range {
                let mid = 0.5 * (lo + hi);
                assert!((spec.default - mid).abs() <= 1e-12 * mid.abs().max(1.0), "{}", spec.key);
            }
        }
    }

    #[test]
    fn get_set_roundtrip() {
        let mut p = ParameterSet::default();
        p.set("r_pn", 42.0).unwrap();
        assert_eq!(p.r_pn, 42.0);
        assert_eq!(p.get("r_pn"), Some(42.0));
        assert!(p.set("nope", 1.0).is_err());
        assert_eq!(p.get("nope"), None);
    }

    #[test]
    fn json_rejects_unknown_and_fills_missing() {
        let mut map = Map::new();
        map.insert("k_pg".into(), Value::from(0.5));
        let (p, warnings) = ParameterSet::from_json_map(&map).unwrap();
        assert_eq!(p.k_pg, 0.5);
        assert_eq!(warnings.len(), PARAMETERS.len() - 1);

        map.insert("bogus".into(), Value::from(1.0));
        assert!(ParameterSet::from_json_map(&map).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let mut p = ParameterSet::default();
        p.T_ref = 3.5e9;
        let text = serde_json::to_string(&p).unwrap();
        let back: ParameterSet = serde_json::from_str(&text).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn invalid_values_rejected() {
        let mut p = ParameterSet::default();
        p.P_inf = 0.0;
        assert!(p.validate().is_err());
        let mut p = ParameterSet::default();
        p.n = 0.5;
        assert!(p.validate().is_err());
        let mut p = ParameterSet::default();
        p.u_pL = 0.8;
        p.u_pU = 0.2;
        assert!(p.validate().is_err());
        let mut p = ParameterSet::default();
        p.r_pn = 132.6;
        p.validate().unwrap();
        assert_eq!(p.range_warnings().len(), 1);
    }
}
