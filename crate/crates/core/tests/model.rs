mod common;

use common::{max_rel_error, oracle, random_control, random_state};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sepsis_core::model::{rhs, rhs_full, rhs_monocyte, rhs_neutrophil};
use sepsis_core::presets;
use sepsis_core::state::{idx, StateVector, Subsystem, STATE_DIM};
use sepsis_core::{ControlInput, ParameterSet};

fn parameter_sets() -> Vec<ParameterSet> {
    vec![
        ParameterSet::default(),
        presets::neutrophil_params(),
        presets::monocyte_params(),
        presets::scenario_preset("tnf-persistent", 50, 5).unwrap().setting.params(&ParameterSet::default()).unwrap(),
    ]
}

#[test]
fn matches_term_by_term_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for p in parameter_sets() {
        for sub in [Subsystem::Neutrophil, Subsystem::Monocyte, Subsystem::Full] {
            for _ in 0..1000 {
                let s = random_state(&mut rng, &p);
                let u = random_control(&mut rng, &p);
                let got = rhs(sub, &s, &p, u).unwrap();
                let want = oracle(sub, &s, &p, u);
                let err = max_rel_error(&got, &want, sub.active());
                assert!(err <= 1e-12, "{sub:?}: relative error {err:e}");
                for i in 0..STATE_DIM {
                    if !sub.is_active(i) {
                        assert_eq!(got.0[i], 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn no_pathogen_means_no_pathogen_growth() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let p = ParameterSet::default();
    for _ in 0..200 {
        let mut s = random_state(&mut rng, &p);
        s.0[idx::P] = 0.0;
        assert_eq!(rhs_neutrophil(&s, &p).p(), 0.0);
        assert_eq!(rhs_monocyte(&s, &p).p(), 0.0);
        assert_eq!(rhs_full(&s, &p, random_control(&mut rng, &p)).unwrap().p(), 0.0);
    }
}

#[test]
fn full_without_adaptive_reduces_to_monocyte() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for p in parameter_sets() {
        for _ in 0..1000 {
            let mut s = random_state(&mut rng, &p);
            for i in [idx::T_CD4, idx::T_CD8, idx::B, idx::A] {
                s.0[i] = 0.0;
            }
            let full = rhs_full(&s, &p, ControlInput::ZERO).unwrap();
            let mono = rhs_monocyte(&s, &p);
            for &i in Subsystem::Monocyte.active() {
                let scale = full.0[i].abs().max(mono.0[i].abs());
                assert!((full.0[i] - mono.0[i]).abs() <= 1e-12 * scale, "component {i}");
            }
        }
    }
}

#[test]
fn control_bounds_are_enforced() {
    let p = ParameterSet::default();
    let s = StateVector([1.0; STATE_DIM]);
    assert!(rhs_full(&s, &p, ControlInput::new(-0.1, 0.0)).is_err());
    assert!(rhs_full(&s, &p, ControlInput::new(0.0, 1.1)).is_err());
}

fn state_strategy() -> impl Strategy<Value = (StateVector, f64, f64)> {
    let p = ParameterSet::default();
    let scales = sepsis_core::state::state_scales(&p);
    let comps: Vec<_> = scales
        .iter()
        .map(|&s| prop_oneof![1 => Just(0.0), 4 => (-8.0f64..0.5).prop_map(move |e| s * 10f64.powf(e))])
        .collect();
    (comps, 0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(c, up, ut)| (StateVector::from_slice(&c).unwrap(), up, ut))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    // On the boundary of the nonnegative orthant the field points inward.
    #[test]
    fn boundary_rates_point_inward((s, up, ut) in state_strategy(), sub_ix in 0usize..3) {
        let p = ParameterSet::default();
        let sub = [Subsystem::Neutrophil, Subsystem::Monocyte, Subsystem::Full][sub_ix];
        let d = rhs(sub, &s, &p, ControlInput::new(up, ut)).unwrap();
        for &i in sub.active() {
            if s.0[i] == 0.0 {
                prop_assert!(d.0[i] >= 0.0, "component {} rate {}", i, d.0[i]);
            }
        }
    }

    #[test]
    fn rates_are_finite((s, up, ut) in state_strategy()) {
        let p = ParameterSet::default();
        let d = rhs_full(&s, &p, ControlInput::new(up, ut)).unwrap();
        prop_assert!(d.0.iter().all(|v| v.is_finite()));
    }

    // Below capacity, stronger growth control never increases the pathogen rate.
    #[test]
    fn growth_control_is_monotone((s, a, b) in state_strategy()) {
        let p = ParameterSet::default();
        prop_assume!(s.p() <= p.P_inf);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let d_lo = rhs_full(&s, &p, ControlInput::new(lo, 0.0)).unwrap().p();
        let d_hi = rhs_full(&s, &p, ControlInput::new(hi, 0.0)).unwrap().p();
        prop_assert!(d_hi <= d_lo + 1e-12 * d_lo.abs());
    }
}
