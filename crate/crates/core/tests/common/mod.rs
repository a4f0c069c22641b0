//! Shared test helpers: an independent term-by-term evaluation of the model
//! equations and random-state generators.
#![allow(dead_code)]

use rand::Rng;
use sepsis_core::state::{state_scales, StateVector, Subsystem};
use sepsis_core::{ControlInput, ParameterSet};

/// Rate and the sum of absolute values of its terms (the reference magnitude
/// for relative comparisons, robust to cancellation).
#[derive(Clone, Copy, Default)]
pub struct Rate {
    pub value: f64,
    pub magnitude: f64,
}

impl Rate {
    fn of(terms: &[f64]) -> Rate {
        Rate { value: terms.iter().sum(), magnitude: terms.iter().map(|t| t.abs()).sum() }
    }
}

fn gate(x: f64, half: f64, n: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        1.0 / (1.0 + (half / x).powf(n))
    }
}

/// Evaluates the model one equation at a time from named quantities.
pub fn oracle(sub: Subsystem, s: &StateVector, p: &ParameterSet, u: ControlInput) -> [Rate; 20] {
    let x = &s.0;
    let (pth, mkf, mkb, tnf, nr, nf, nb, r1, dmg) = (x[0], x[1], x[2], x[3], x[4], x[5], x[6], x[7], x[8]);
    let (mr, mf, mb, hm, il10) = (x[9], x[10], x[11], x[14], x[15]);
    let (cd4, cd8, bc, ab) = (x[16], x[17], x[18], x[19]);
    let mono = sub != Subsystem::Neutrophil;
    let full = sub == Subsystem::Full;
    let (up, ut) = if full { (u.u_p, u.u_t) } else { (0.0, 0.0) };
    let n = p.n;
    let pn = pth / p.P_inf;
    let inhib = if mono { 1.0 / (1.0 + il10 / p.C_inf) } else { 1.0 };

    let mut out = [Rate::default(); 20];

    // pathogen
    let mut terms = vec![
        (1.0 - up) * p.k_pg * pth * (1.0 - pn),
        -p.r_pmk * gate(pth, p.k_c1, n) * mkf * pn,
        -p.r_pn * gate(pth, p.k_c2, n) * (nf + nb) * pn,
    ];
    if mono {
        terms.push(-p.r_pm * gate(pth, p.k_c4, n) * mf * pn);
    }
    if full {
        terms.push(-p.r_pcd4 * gate(pth, p.k_c6, n) * cd4 * pn);
        terms.push(-p.r_pAb * gate(pth, p.k_c5, n) * ab * pn);
    }
    out[0] = Rate::of(&terms);

    // Kupffer cells
    let kb_bind = gate(pth, p.k_c1, n) * mkf * pn;
    out[1] = Rate::of(&[p.k_mk * mkf * (1.0 - mkf / p.K_inf), p.k_mkub * mkb, -kb_bind, -p.u_mk * mkf]);
    let mut terms = vec![kb_bind, -p.k_mkub * mkb];
    if full {
        terms.push(-p.r_Mkbcd8 * gate(mkb, p.k_c6, n) * cd8 * mkb / p.K_inf);
    }
    out[2] = Rate::of(&terms);

    // TNF
    out[3] = Rate::of(&[
        p.r_t1max * mkb.powi(2) / (p.m_t1 + mkb),
        (1.0 - ut) * p.r_t2max * nb.powi(2) / (p.m_t2 + nb),
        -p.u_t * tnf,
    ]);

    // neutrophils
    let act = r1 * nr * (tnf / p.T_ref + pn) * inhib;
    out[4] = Rate::of(&[p.k_rd * nr * (1.0 - nr / p.N_S), -act, -p.u_nr * nr]);
    let nb_bind = gate(pth, p.k_c2, n) * nf * pn;
    out[5] = Rate::of(&[act, p.k_nub * nb, -nb_bind, -p.u_n * nf]);
    let mut terms = vec![nb_bind, -p.k_nub * nb];
    if mono {
        terms.push(-p.u_mn * nb * mf / p.M_S);
    }
    if full {
        terms.push(-p.r_Nbcd8 * gate(nb, p.k_c7, n) * cd8 * nb / p.N_S);
    }
    out[6] = Rate::of(&terms);
    out[7] = Rate::of(&[p.k_r1 * (1.0 + (nf / p.N_S).tanh()), -p.u_r1 * r1]);
    let dn = dmg / p.A_inf;
    out[8] = Rate::of(&[p.r_hn * gate(dmg, p.k_c3, n) * nf * dn * (1.0 - dn), -p.r_ah * dmg]);
    if !mono {
        return out;
    }

    // monocytes
    let mut drive = hm / p.H_ref + tnf / p.T_ref;
    if full {
        drive += cd4 / p.T_CD4_inf + cd8 / p.T_CD8_inf;
    }
    let rec = p.r_2 * mr * drive * inhib;
    out[9] = Rate::of(&[p.k_mr * mr * (1.0 - mr / p.M_S), -rec, -p.u_mr * mr]);
    let phago_p = p.r_pm * gate(pth, p.k_c4, n) * mf * pn;
    let (mut to_m2, mut bind_t) = (0.0, 0.0);
    let mut kill_mb = 0.0;
    if full {
        to_m2 = p.k_cd4M * gate(cd4, p.k_c10, n) * mf * cd4 / p.T_CD4_inf
            + p.k_cd8M * gate(cd8, p.k_c10, n) * mf * cd8 / p.T_CD8_inf;
        bind_t = gate(mf, p.k_c8, n) * (p.r_cd4Mb * cd4 + p.r_cd8Mb * cd8) * mf / p.M_S;
        kill_mb = p.r_Mbcd8 * gate(mb, p.k_c7, n) * cd8 * mb / p.M_S;
    }
    out[10] = Rate::of(&[rec, p.k_umb * mb, -phago_p, -p.u_m * mf, -to_m2, -bind_t]);
    out[11] = Rate::of(&[phago_p, -p.k_umb * mb, to_m2, bind_t, -kill_mb]);
    out[12] = Rate::of(&[phago_p]);
    out[13] = Rate::of(&[to_m2]);
    let src = mb + dmg;
    out[14] = Rate::of(&[p.r_h1max * src * src / (p.mh_1 + src), -p.u_h * hm]);
    out[15] = Rate::of(&[p.r_camax * mb * mb / (p.C_Ah + mb), -p.u_ca * il10]);
    if !full {
        return out;
    }

    // adaptive
    let c4 = cd4 / p.T_CD4_inf;
    let c8 = cd8 / p.T_CD8_inf;
    let h_mf = gate(mf, p.k_c8, n);
    out[16] = Rate::of(&[
        p.k_cd4 * cd4 * (1.0 - c4),
        p.r_cd4Mb * h_mf * cd4 * mf / p.M_S,
        -p.k_cd4M * gate(cd4, p.k_c10, n) * mf * c4,
        -p.r_pcd4 * gate(pth, p.k_c6, n) * cd4 * pn,
        -p.u_cd4 * cd4,
    ]);
    out[17] = Rate::of(&[
        p.k_cd8 * cd8 * (1.0 - c8),
        p.r_cd8Mb * h_mf * cd8 * mf / p.M_S,
        -p.k_cd8M * gate(cd8, p.k_c10, n) * mf * c8,
        -p.r_Mkbcd8 * gate(mkb, p.k_c6, n) * cd8 * mkb / p.K_inf,
        -p.r_Nbcd8 * gate(nb, p.k_c7, n) * cd8 * nb / p.N_S,
        -kill_mb,
        -p.u_cd8 * cd8,
    ]);
    out[18] = Rate::of(&[
        p.k_B * bc * (1.0 - bc / p.B_inf),
        p.r_Bt * gate(bc, p.k_c9, n) * cd4 * bc / p.B_inf,
        -p.u_B * bc,
    ]);
    out[19] = Rate::of(&[p.r_Abmax * bc * bc / (p.m_Ab + bc), -p.u_Ab * ab]);
    out
}

/// Nonnegative state with each component log-uniform between 1e-6 and 2 times
/// its scale, and a share of exact zeros.
pub fn random_state<R: Rng>(rng: &mut R, p: &ParameterSet) -> StateVector {
    let scales = state_scales(p);
    let mut x = StateVector::zeros();
    for i in 0..20 {
        x.0[i] = if rng.gen::<f64>() < 0.05 {
            0.0
        } else {
            scales[i] * 10f64.powf(rng.gen_range(-6.0..0.3))
        };
    }
    x
}

pub fn random_control<R: Rng>(rng: &mut R, p: &ParameterSet) -> ControlInput {
    ControlInput { u_p: rng.gen_range(p.u_pL..=p.u_pU), u_t: rng.gen_range(p.u_TL..=p.u_TU) }
}

/// Largest deviation relative to the oracle's term magnitude.
pub fn max_rel_error(got: &StateVector, want: &[Rate; 20], mask: &[usize]) -> f64 {
    mask.iter()
        .map(|&i| {
            let d = (got.0[i] - want[i].value).abs();
            if d == 0.0 {
                0.0
            } else {
                d / want[i].magnitude.max(f64::MIN_POSITIVE)
            }
        })
        .fold(0.0, f64::max)
}

/// Dense Gaussian elimination with partial pivoting; solves `a x = b`.
pub fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// GP posterior mean and variance from the textbook formulas, in original units.
/// `noise` is the total diagonal term (noise variance plus jitter).
pub fn dense_gp(
    xs: &[Vec<f64>],
    ys: &[f64],
    length: f64,
    signal: f64,
    noise: f64,
    x: &[f64],
) -> (f64, f64) {
    let n = ys.len();
    let mean = ys.iter().sum::<f64>() / n as f64;
    let sd = (ys.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let k = |a: &[f64], b: &[f64]| {
        let r2: f64 = a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum();
        signal * (-r2 / (2.0 * length * length)).exp()
    };
    let mut gram = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            gram[i][j] = k(&xs[i], &xs[j]) + if i == j { noise } else { 0.0 };
        }
    }
    let z: Vec<f64> = ys.iter().map(|v| (v - mean) / sd).collect();
    let kx: Vec<f64> = xs.iter().map(|xi| k(xi, x)).collect();
    let alpha = dense_solve(gram.clone(), z);
    let beta = dense_solve(gram, kx.clone());
    let m: f64 = kx.iter().zip(&alpha).map(|(a, b)| a * b).sum();
    let q: f64 = kx.iter().zip(&beta).map(|(a, b)| a * b).sum();
    (mean + sd * m, sd * sd * (signal - q).max(0.0))
}

/// Central-difference Jacobian with one extrapolation step:
/// `(4 D(h/2) - D(h)) / 3`, fourth-order accurate.
pub fn richardson_jacobian(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], steps: &[f64]) -> Vec<Vec<f64>> {
    let n = x.len();
    let central = |h: &[f64]| -> Vec<Vec<f64>> {
        let mut jac = vec![vec![0.0; n]; n];
        for j in 0..n {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h[j];
            xm[j] -= h[j];
            let (fp, fm) = (f(&xp), f(&xm));
            for i in 0..n {
                jac[i][j] = (fp[i] - fm[i]) / (2.0 * h[j]);
            }
        }
        jac
    };
    let coarse = central(steps);
    let half: Vec<f64> = steps.iter().map(|h| h / 2.0).collect();
    let fine = central(&half);
    (0..n).map(|i| (0..n).map(|j| (4.0 * fine[i][j] - coarse[i][j]) / 3.0).collect()).collect()
}

/// Period of the Van der Pol oscillator at mu = 1 (literature value).
pub const VDP_PERIOD_MU1: f64 = 6.6633;

/// Limit-cycle period of the Van der Pol oscillator at mu = 1 as measured by the detector.
pub fn vdp_period() -> Option<f64> {
    use sepsis_core::bifurcation::{detect_limit_cycle, CycleConfig};
    use sepsis_core::integrator::{integrate_system, uniform_grid, IntegratorConfig, NegativityMode};
    let times = uniform_grid(0.0, 200.0, 0.01);
    let (ys, _, _) = integrate_system(
        |_, _, y, dy| {
            dy[0] = y[1];
            dy[1] = (1.0 - y[0] * y[0]) * y[1] - y[0];
        },
        &[0.5, 0.0],
        &times,
        &[1.0, 1.0],
        &IntegratorConfig { negativity_mode: NegativityMode::Signed, ..Default::default() },
    )
    .ok()?;
    let x: Vec<f64> = ys.iter().map(|y| y[0]).collect();
    let report = detect_limit_cycle(&times, &[("x".to_string(), x, 1.0)], &CycleConfig::default());
    report.oscillating.then_some(report.period).flatten()
}

/// Scalar plant `x' = A x + B u` with the stabilizing law `u = -K x`.
pub const PLANT_A: f64 = 1.0;
pub const PLANT_B: f64 = 0.5;
pub const PLANT_K: f64 = 0.8;

pub fn plant_step(x: f64, u: f64) -> f64 {
    PLANT_A * x + PLANT_B * u
}

/// Control window of length `d` produced by the law from `x0`.
pub fn law_window(x0: f64, d: usize) -> Vec<f64> {
    let mut x = x0;
    (0..d)
        .map(|_| {
            let u = -PLANT_K * x;
            x = plant_step(x, u);
            u
        })
        .collect()
}

/// Quadratic cost of a closed-loop run.
pub fn plant_cost(xs: &[f64], us: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>() + 0.1 * us.iter().map(|u| u * u).sum::<f64>()
}
