//! Right-hand sides of the neutrophil, monocyte and full immune-response models.

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::state::{idx, ControlInput, StateVector, Subsystem, STATE_DIM};

/// Hill saturation `x^n / (x^n + k^n)`.
pub fn hill(x: f64, k: f64, n: f64) -> Result<f64> {
    if !(k > 0.0) {
        return Err(Error::domain(format!("hill half-saturation must be positive, got {k}")));
    }
    if !(n >= 1.0) {
        return Err(Error::domain(format!("hill exponent must be >= 1, got {n}")));
    }
    if x < 0.0 {
        return Err(Error::domain(format!("hill argument must be nonnegative, got {x}")));
    }
    Ok(hill_raw(x, k, n))
}

// Nonpositive arguments map to zero so that tiny negative excursions
// inside a numerical scheme stay harmless.
#[inline]
fn hill_raw(x: f64, k: f64, n: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let (xn, kn) = if n == 2.0 { (x * x, k * k) } else { (x.powf(n), k.powf(n)) };
    xn / (xn + kn)
}

/// Capacity-normalized levels used inside the rate laws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Concentrations {
    pub p: f64,
    pub m_kb: f64,
    pub n_f: f64,
    pub n_b: f64,
    pub d: f64,
    pub m_f: f64,
    pub m_b: f64,
    pub t_cd4: f64,
    pub t_cd8: f64,
    pub b: f64,
}

pub fn concentrations(s: &StateVector, p: &ParameterSet) -> Concentrations {
    Concentrations {
        p: s.p() / p.P_inf,
        m_kb: s.m_kb() / p.K_inf,
        n_f: s.n_f() / p.N_S,
        n_b: s.n_b() / p.N_S,
        d: s.d() / p.A_inf,
        m_f: s.m_f() / p.M_S,
        m_b: s.m_b() / p.M_S,
        t_cd4: s.t_cd4() / p.T_CD4_inf,
        t_cd8: s.t_cd8() / p.T_CD8_inf,
        b: s.b() / p.B_inf,
    }
}

/// Neutrophil subsystem derivative (components outside the subsystem are zero).
pub fn rhs_neutrophil(s: &StateVector, p: &ParameterSet) -> StateVector {
    let mut out = [0.0; STATE_DIM];
    rhs_into(Subsystem::Neutrophil, &s.0, p, ControlInput::ZERO, &mut out);
    StateVector(out)
}

/// Monocyte subsystem derivative (components outside the subsystem are zero).
pub fn rhs_monocyte(s: &StateVector, p: &ParameterSet) -> StateVector {
    let mut out = [0.0; STATE_DIM];
    rhs_into(Subsystem::Monocyte, &s.0, p, ControlInput::ZERO, &mut out);
    StateVector(out)
}

/// Full model derivative under the given control.
pub fn rhs_full(s: &StateVector, p: &ParameterSet, u: ControlInput) -> Result<StateVector> {
    u.check_bounds(p)?;
    let mut out = [0.0; STATE_DIM];
    rhs_into(Subsystem::Full, &s.0, p, u, &mut out);
    Ok(StateVector(out))
}

/// Derivative of any subsystem; control only affects the full model.
pub fn rhs(sub: Subsystem, s: &StateVector, p: &ParameterSet, u: ControlInput) -> Result<StateVector> {
    match sub {
        Subsystem::Neutrophil => Ok(rhs_neutrophil(s, p)),
        Subsystem::Monocyte => Ok(rhs_monocyte(s, p)),
        Subsystem::Full => rhs_full(s, p, u),
    }
}

/// Allocation-free derivative used by the solvers. Writes every entry of `out`;
/// inactive components get zero. The control is not bounds-checked here.
pub fn rhs_into(sub: Subsystem, x: &[f64; STATE_DIM], p: &ParameterSet, u: ControlInput, out: &mut [f64; STATE_DIM]) {
    use idx::*;
    out.fill(0.0);
    let n = p.n;
    let (pp, mkf, mkb, t, nr, nf, nb, r1, d) =
        (x[P], x[M_KF], x[M_KB], x[T], x[N_R], x[N_F], x[N_B], x[R1], x[D]);
    let p_star = pp / p.P_inf;

    // Kupffer-cell and neutrophil phagocytosis of pathogen.
    let h_kupffer = hill_raw(pp, p.k_c1, n);
    let h_neut = hill_raw(pp, p.k_c2, n);
    let bind_k = h_kupffer * mkf * p_star;
    let bind_n = h_neut * nf * p_star;
    let growth = (1.0 - u.u_p) * p.k_pg * pp * (1.0 - p_star);
    let mut dp = growth - p.r_pmk * bind_k - p.r_pn * h_neut * (nf + nb) * p_star;

    let mut dmkb = bind_k - p.k_mkub * mkb;
    let dmkf = p.k_mk * mkf * (1.0 - mkf / p.K_inf) + p.k_mkub * mkb - bind_k - p.u_mk * mkf;

    let tnf_kupffer = p.r_t1max * mkb * mkb / (p.m_t1 + mkb);
    let tnf_neut = (1.0 - u.u_t) * p.r_t2max * nb * nb / (p.m_t2 + nb);
    let dt = tnf_kupffer + tnf_neut - p.u_t * t;

    let il10 = if sub == Subsystem::Neutrophil { 1.0 } else { 1.0 / (1.0 + x[C_A] / p.C_inf) };
    let activation = r1 * nr * (t / p.T_ref + p_star) * il10;
    let dnr = p.k_rd * nr * (1.0 - nr / p.N_S) - activation - p.u_nr * nr;
    let dnf = activation + p.k_nub * nb - bind_n - p.u_n * nf;
    let mut dnb = bind_n - p.k_nub * nb;
    let dr1 = p.k_r1 * (1.0 + (nf / p.N_S).tanh()) - p.u_r1 * r1;
    let d_star = d / p.A_inf;
    let dd = p.r_hn * hill_raw(d, p.k_c3, n) * nf * d_star * (1.0 - d_star) - p.r_ah * d;

    if sub != Subsystem::Neutrophil {
        let (mr, mf, mb, hmgb, ca) = (x[M_R], x[M_F], x[M_B], x[H], x[C_A]);
        let mf_star = mf / p.M_S;
        let m1_phago = p.r_pm * hill_raw(pp, p.k_c4, n) * mf * p_star;
        dp -= m1_phago;
        dnb -= p.u_mn * nb * mf_star;

        let mut drive = hmgb / p.H_ref + t / p.T_ref;
        if sub == Subsystem::Full {
            drive += x[T_CD4] / p.T_CD4_inf + x[T_CD8] / p.T_CD8_inf;
        }
        let recruit = p.r_2 * mr * drive * il10;
        out[M_R] = p.k_mr * mr * (1.0 - mr / p.M_S) - recruit - p.u_mr * mr;
        out[M_F] = recruit + p.k_umb * mb - m1_phago - p.u_m * mf;
        out[M_B] = m1_phago - p.k_umb * mb;
        out[M1] = m1_phago;
        let hmgb_src = mb + d;
        out[H] = p.r_h1max * hmgb_src * hmgb_src / (p.mh_1 + hmgb_src) - p.u_h * hmgb;
        out[C_A] = p.r_camax * mb * mb / (p.C_Ah + mb) - p.u_ca * ca;

        if sub == Subsystem::Full {
            let (t4, t8, b, ab) = (x[T_CD4], x[T_CD8], x[B], x[A]);
            let t4_star = t4 / p.T_CD4_inf;
            let t8_star = t8 / p.T_CD8_inf;

            let cd4_kill_p = p.r_pcd4 * hill_raw(pp, p.k_c6, n) * t4 * p_star;
            dp -= cd4_kill_p + p.r_pAb * hill_raw(pp, p.k_c5, n) * ab * p_star;

            let cd8_kill_mkb = p.r_Mkbcd8 * hill_raw(mkb, p.k_c6, n) * t8 * (mkb / p.K_inf);
            let cd8_kill_nb = p.r_Nbcd8 * hill_raw(nb, p.k_c7, n) * t8 * (nb / p.N_S);
            let cd8_kill_mb = p.r_Mbcd8 * hill_raw(mb, p.k_c7, n) * t8 * (mb / p.M_S);
            dmkb -= cd8_kill_mkb;
            dnb -= cd8_kill_nb;

            // M2 phagocytosis of apoptotic T cells.
            let m2_cd4 = p.k_cd4M * hill_raw(t4, p.k_c10, n) * mf * t4_star;
            let m2_cd8 = p.k_cd8M * hill_raw(t8, p.k_c10, n) * mf * t8_star;
            let m2_phago = m2_cd4 + m2_cd8;
            let h_mf = hill_raw(mf, p.k_c8, n);
            let bind_cd4 = p.r_cd4Mb * h_mf * t4 * mf_star;
            let bind_cd8 = p.r_cd8Mb * h_mf * t8 * mf_star;

            out[M_F] -= m2_phago + bind_cd4 + bind_cd8;
            out[M_B] += m2_phago + bind_cd4 + bind_cd8 - cd8_kill_mb;
            out[M2] = m2_phago;
            out[T_CD4] = p.k_cd4 * t4 * (1.0 - t4_star) + bind_cd4 - m2_cd4 - cd4_kill_p - p.u_cd4 * t4;
            out[T_CD8] = p.k_cd8 * t8 * (1.0 - t8_star) + bind_cd8 - m2_cd8 - cd8_kill_mkb - cd8_kill_nb
                - cd8_kill_mb
                - p.u_cd8 * t8;
            out[B] = p.k_B * b * (1.0 - b / p.B_inf) + p.r_Bt * hill_raw(b, p.k_c9, n) * t4 * (b / p.B_inf)
                - p.u_B * b;
            out[A] = p.r_Abmax * b * b / (p.m_Ab + b) - p.u_Ab * ab;
        }
    }

    out[P] = dp;
    out[M_KF] = dmkf;
    out[M_KB] = dmkb;
    out[T] = dt;
    out[N_R] = dnr;
    out[N_F] = dnf;
    out[N_B] = dnb;
    out[R1] = dr1;
    out[D] = dd;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hill_values() {
        assert_eq!(hill(0.0, 0.03, 2.0).unwrap(), 0.0);
        assert!((hill(0.03, 0.03, 2.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((hill(7.0, 7.0, 3.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((hill(0.06, 0.03, 2.0).unwrap() - 0.8).abs() < 1e-14);
        assert!(hill(1.0, 0.0, 2.0).is_err());
        assert!(hill(1.0, -1.0, 2.0).is_err());
    }

    #[test]
    fn concentration_examples() {
        let p = ParameterSet::default();
        let mut s = StateVector::zeros();
        s.0[idx::P] = 1e8;
        s.0[idx::N_F] = 1.75e5;
        let c = concentrations(&s, &p);
        assert_eq!(c.p, 1.0);
        assert_eq!(c.n_f, 0.5);
        let z = concentrations(&StateVector::zeros(), &p);
        assert_eq!(z.p + z.n_f + z.d + z.m_f + z.b, 0.0);
    }

    #[test]
    fn r1_balance_without_neutrophils() {
        let p = ParameterSet::default();
        let mut s = StateVector::zeros();
        s.0[idx::R1] = p.k_r1 / p.u_r1;
        let d = rhs_neutrophil(&s, &p);
        assert!(d.r1().abs() < 1e-12);
    }

    #[test]
    fn hmgb_decays_without_sources() {
        let p = ParameterSet::default();
        let mut s = StateVector::zeros();
        s.0[idx::H] = 4.0;
        let d = rhs_monocyte(&s, &p);
        assert_eq!(d.h(), -p.u_h * 4.0);
    }

    #[test]
    fn full_control_stops_growth() {
        let p = ParameterSet::default();
        let mut s = StateVector::zeros();
        s.0[idx::P] = 1e5;
        let d = rhs_full(&s, &p, ControlInput::new(1.0, 0.0)).unwrap();
        assert_eq!(d.p(), 0.0);
        assert!(rhs_full(&s, &p, ControlInput::new(1.5, 0.0)).is_err());
    }

    #[test]
    fn inactive_components_stay_zero() {
        let p = ParameterSet::default();
        let s = StateVector([1e3; STATE_DIM]);
        let d = rhs_neutrophil(&s, &p);
        assert!(d.0[9..].iter().all(|v| *v == 0.0));
        let d = rhs_monocyte(&s, &p);
        for i in 0..STATE_DIM {
            if !Subsystem::Monocyte.is_active(i) {
                assert_eq!(d.0[i], 0.0);
            }
        }
    }
}
