//! Bayesian optimization with bandit-plus-random-search candidate proposal,
//! LCB acquisition and a local-search polish, plus the sliding-window control
//! driver and dataset generator built on it.

pub mod dataset;
pub mod gp;
pub mod window;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use gp::{fit_gp, lcb, GpSurrogate, Hyper, HyperPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalSearchConfig {
    /// Initial perturbation size in normalized units.
    pub radius: f64,
    /// Evaluation budget; zero disables the local search.
    pub steps: usize,
    pub shrink: f64,
}

impl Default for LocalSearchConfig {
    fn default() -> Self {
        LocalSearchConfig { radius: 0.25, steps: 40, shrink: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoConfig {
    /// Control window length in grid steps.
    pub d: usize,
    pub n_init: usize,
    pub n_iter: usize,
    pub kappa: f64,
    pub n_arms: usize,
    pub arm_batch: usize,
    pub rs_batch: usize,
    pub local_search: LocalSearchConfig,
    pub seed: u64,
    /// Evaluations run concurrently when greater than one.
    pub parallel_eval: usize,
    pub hyper: HyperPolicy,
}

impl Default for BoConfig {
    fn default() -> Self {
        BoConfig {
            d: 10,
            n_init: 10,
            n_iter: 40,
            kappa: 2.0,
            n_arms: 8,
            arm_batch: 64,
            rs_batch: 64,
            local_search: LocalSearchConfig::default(),
            seed: 0,
            parallel_eval: 1,
            hyper: HyperPolicy::default(),
        }
    }
}

impl BoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_init < 2 || !(self.kappa >= 0.0) || self.arm_batch == 0 || self.rs_batch == 0 || self.n_arms == 0 {
            return Err(Error::config("BO config needs d >= 1, n_init >= 2, kappa >= 0, positive batches and arms"));
        }
        if self.local_search.steps > 0 && !(self.local_search.radius > 0.0 && self.local_search.shrink > 0.0 && self.local_search.shrink < 1.0) {
            return Err(Error::config("local search needs radius > 0 and shrink in (0, 1)"));
        }
        Ok(())
    }

    /// The baseline without the extensions: one bandit arm, no local search.
    pub fn standard(&self) -> BoConfig {
        BoConfig { n_arms: 1, local_search: LocalSearchConfig { steps: 0, ..self.local_search }, ..self.clone() }
    }

    /// Exact number of true-objective evaluations per run.
    pub fn budget(&self) -> usize {
        self.n_init + self.n_iter + self.local_search.steps
    }
}

/// Axis-aligned partition of the unit box with UCB statistics per cell.
#[derive(Debug, Clone)]
pub struct ArmBandit {
    splits: Vec<usize>,
    count: Vec<f64>,
    reward: Vec<f64>,
}

fn prime_factors(mut n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut p = 2;
    while n > 1 {
        while n % p == 0 {
            out.push(p);
            n /= p;
        }
        p += 1;
    }
    out
}

impl ArmBandit {
    /// Split `[0,1]^dim` into `n_arms` cells, distributing the prime factors
    /// of `n_arms` over the coordinates in turn.
    pub fn new(dim: usize, n_arms: usize) -> Self {
        let mut splits = vec![1usize; dim.max(1)];
        for (k, p) in prime_factors(n_arms.max(1)).into_iter().enumerate() {
            splits[k % dim.max(1)] *= p;
        }
        ArmBandit { splits, count: vec![0.0; n_arms.max(1)], reward: vec![0.0; n_arms.max(1)] }
    }

    pub fn n_arms(&self) -> usize {
        self.count.len()
    }

    /// Bounds of cell `a`.
    pub fn cell(&self, a: usize) -> (Vec<f64>, Vec<f64>) {
        let mut rest = a;
        let mut lo = Vec::with_capacity(self.splits.len());
        let mut hi = Vec::with_capacity(self.splits.len());
        for &s in &self.splits {
            let i = rest % s;
            rest /= s;
            lo.push(i as f64 / s as f64);
            hi.push((i + 1) as f64 / s as f64);
        }
        (lo, hi)
    }

    fn score(&self, a: usize, pending: &[f64]) -> f64 {
        let n = self.count[a] + pending[a];
        if n == 0.0 {
            return f64::INFINITY;
        }
        let total: f64 = self.count.iter().sum::<f64>() + pending.iter().sum::<f64>();
        let mean = if self.count[a] > 0.0 { self.reward[a] / self.count[a] } else { 0.5 };
        mean + (2.0 * (total + 1.0).ln() / n).sqrt()
    }

    /// Pick arms for `batch` samples, lowest index on ties.
    pub fn select(&self, batch: usize) -> Vec<usize> {
        let mut pending = vec![0.0; self.n_arms()];
        (0..batch)
            .map(|_| {
                let mut best = 0;
                let mut best_s = f64::NEG_INFINITY;
                for a in 0..self.n_arms() {
                    let s = self.score(a, &pending);
                    if s > best_s {
                        best_s = s;
                        best = a;
                    }
                }
                pending[best] += 1.0;
                best
            })
            .collect()
    }

    pub fn update(&mut self, arm: usize, reward: f64) {
        self.count[arm] += 1.0;
        self.reward[arm] += reward;
    }

    pub fn arm_of(&self, x: &[f64]) -> usize {
        let mut a = 0;
        let mut mult = 1;
        for (v, &s) in x.iter().zip(&self.splits) {
            let i = ((v * s as f64).floor() as usize).min(s - 1);
            a += i * mult;
            mult *= s;
        }
        a
    }
}

/// Candidate set and the acquisition minimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub candidates: Vec<Vec<f64>>,
    pub acquisition: Vec<f64>,
    pub chosen: usize,
}

impl Proposal {
    pub fn x_star(&self) -> &[f64] {
        &self.candidates[self.chosen]
    }
}

/// Draw `arm_batch` points from bandit-selected cells and `rs_batch` uniform
/// points, score all by LCB and return the minimizer.
pub fn propose_candidates(gp: &GpSurrogate, cfg: &BoConfig, bandit: &mut ArmBandit, rng: &mut ChaCha8Rng) -> Proposal {
    let dim = gp.dim();
    let arms = bandit.select(cfg.arm_batch);
    let mut candidates = Vec::with_capacity(cfg.arm_batch + cfg.rs_batch);
    for &a in &arms {
        let (lo, hi) = bandit.cell(a);
        candidates.push((0..dim).map(|i| lo[i] + (hi[i] - lo[i]) * rng.gen::<f64>()).collect::<Vec<f64>>());
    }
    for _ in 0..cfg.rs_batch {
        candidates.push((0..dim).map(|_| rng.gen::<f64>()).collect());
    }
    let acquisition: Vec<f64> = candidates.iter().map(|x| lcb(gp, x, cfg.kappa)).collect();
    let mut chosen = 0;
    for (i, v) in acquisition.iter().enumerate() {
        if *v < acquisition[chosen] {
            chosen = i;
        }
    }
    let (lo, hi) = acquisition.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    for (x, v) in candidates.iter().zip(&acquisition) {
        let reward = if hi > lo { (hi - v) / (hi - lo) } else { 0.5 };
        let arm = bandit.arm_of(x);
        bandit.update(arm, reward);
    }
    Proposal { candidates, acquisition, chosen }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub accepted: usize,
}

/// Coordinate-wise stochastic descent inside `[0,1]^dim`: perturb one coordinate
/// by `±radius`, keep strict improvements, shrink the radius after a sweep with
/// no improvement.
pub fn local_search<F>(mut f: F, x0: &[f64], f0: f64, cfg: &LocalSearchConfig, rng: &mut ChaCha8Rng) -> LocalResult
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f0;
    let mut radius = cfg.radius;
    let mut evals = 0;
    let mut accepted = 0;
    let mut order: Vec<usize> = (0..dim).collect();
    while evals < cfg.steps && radius > 1e-12 {
        for i in (1..dim).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut improved = false;
        for &c in &order {
            let first = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            for sign in [first, -first] {
                if evals >= cfg.steps {
                    break;
                }
                let v = (x[c] + sign * radius).clamp(0.0, 1.0);
                if v == x[c] {
                    continue;
                }
                let mut trial = x.clone();
                trial[c] = v;
                let ft = f(&trial);
                evals += 1;
                if ft < fx {
                    x = trial;
                    fx = ft;
                    improved = true;
                    accepted += 1;
                    break;
                }
            }
        }
        if !improved {
            radius *= cfg.shrink;
        }
    }
    LocalResult { x, value: fx, evals, accepted }
}

/// Which stage of the optimizer produced an evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Bayes,
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub x: Vec<f64>,
    pub value: f64,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoRun {
    pub best_x: Vec<f64>,
    pub best_value: f64,
    pub history: Vec<Evaluation>,
    /// Best value seen after each evaluation.
    pub incumbent_trace: Vec<f64>,
}

impl BoRun {
    pub fn eval_count(&self) -> usize {
        self.history.len()
    }

    pub fn count(&self, phase: Phase) -> usize {
        self.history.iter().filter(|e| e.phase == phase).count()
    }

    fn push(&mut self, x: Vec<f64>, value: f64, phase: Phase) {
        if value < self.best_value || self.history.is_empty() {
            self.best_value = value;
            self.best_x = x.clone();
        }
        self.history.push(Evaluation { x, value, phase });
        self.incumbent_trace.push(self.best_value);
    }
}

fn eval_batch<F>(f: &F, xs: &[Vec<f64>], parallel: usize) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let clean = |v: f64| if v.is_nan() { f64::INFINITY } else { v };
    if parallel > 1 {
        xs.par_iter().map(|x| clean(f(x))).collect()
    } else {
        xs.iter().map(|x| clean(f(x))).collect()
    }
}

/// Minimize `f` over `[0,1]^dim`. Non-finite values count as failures: they
/// are kept in the history and replaced by the worst finite value for the surrogate.
pub fn minimize<F>(f: F, dim: usize, cfg: &BoConfig) -> Result<BoRun>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    cfg.validate()?;
    if dim == 0 {
        return Err(Error::config("search dimension must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut run = BoRun { best_x: Vec::new(), best_value: f64::INFINITY, history: Vec::new(), incumbent_trace: Vec::new() };

    let init: Vec<Vec<f64>> = (0..cfg.n_init).map(|_| (0..dim).map(|_| rng.gen::<f64>()).collect()).collect();
    for (x, v) in init.iter().cloned().zip(eval_batch(&f, &init, cfg.parallel_eval)) {
        run.push(x, v, Phase::Init);
    }

    let mut bandit = ArmBandit::new(dim, cfg.n_arms);
    for _ in 0..cfg.n_iter {
        let finite_max = run.history.iter().map(|e| e.value).filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
        let xs: Vec<Vec<f64>> = run.history.iter().map(|e| e.x.clone()).collect();
        let next = if finite_max.is_finite() {
            let ys: Vec<f64> = run.history.iter().map(|e| if e.value.is_finite() { e.value } else { finite_max }).collect();
            let gp = fit_gp(&xs, &ys, &cfg.hyper)?;
            propose_candidates(&gp, cfg, &mut bandit, &mut rng).x_star().to_vec()
        } else {
            (0..dim).map(|_| rng.gen::<f64>()).collect()
        };
        let v = eval_batch(&f, std::slice::from_ref(&next), 1)[0];
        run.push(next, v, Phase::Bayes);
    }

    if cfg.local_search.steps > 0 && run.best_value.is_finite() {
        let start = run.best_x.clone();
        let mut local = Vec::new();
        let res = local_search(
            |x| {
                let v = eval_batch(&f, &[x.to_vec()], 1)[0];
                local.push((x.to_vec(), v));
                v
            },
            &start,
            run.best_value,
            &cfg.local_search,
            &mut rng,
        );
        debug_assert_eq!(res.evals, local.len());
        for (x, v) in local {
            run.push(x, v, Phase::Local);
        }
    }
    Ok(run)
}

/// Uniform random search with the same bookkeeping as [`minimize`].
pub fn random_search<F>(f: F, dim: usize, budget: usize, seed: u64, parallel: usize) -> BoRun
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<Vec<f64>> = (0..budget).map(|_| (0..dim).map(|_| rng.gen::<f64>()).collect()).collect();
    let mut run = BoRun { best_x: Vec::new(), best_value: f64::INFINITY, history: Vec::new(), incumbent_trace: Vec::new() };
    for (x, v) in xs.iter().cloned().zip(eval_batch(&f, &xs, parallel)) {
        run.push(x, v, Phase::Init);
    }
    run
}

/// Derive an independent stream seed from a base seed and indices.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(x: &[f64]) -> f64 {
        (x[0] - 0.3).powi(2)
    }

    #[test]
    fn single_arm_covers_box() {
        let b = ArmBandit::new(3, 1);
        assert_eq!(b.cell(0), (vec![0.0; 3], vec![1.0; 3]));
        let b = ArmBandit::new(2, 6);
        assert_eq!(b.n_arms(), 6);
        for a in 0..6 {
            let (lo, hi) = b.cell(a);
            let mid: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
            assert_eq!(b.arm_of(&mid), a);
        }
    }

    #[test]
    fn bandit_visits_every_arm_first() {
        let b = ArmBandit::new(2, 4);
        let mut picks = b.select(4);
        picks.sort();
        assert_eq!(picks, vec![0, 1, 2, 3]);
    }

    #[test]
    fn proposal_size_and_argmin() {
        let xs: Vec<Vec<f64>> = (0..6).map(|k| vec![k as f64 / 5.0]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| quad(x)).collect();
        let gp = fit_gp(&xs, &ys, &HyperPolicy::default()).unwrap();
        let cfg = BoConfig { arm_batch: 7, rs_batch: 5, n_arms: 3, ..Default::default() };
        let mut bandit = ArmBandit::new(1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = propose_candidates(&gp, &cfg, &mut bandit, &mut rng);
        assert_eq!(p.candidates.len(), 12);
        assert!(p.acquisition.iter().all(|v| p.acquisition[p.chosen] <= *v));
    }

    #[test]
    fn local_search_does_not_move_from_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = local_search(quad, &[0.3], 0.0, &LocalSearchConfig::default(), &mut rng);
        assert_eq!(r.x, vec![0.3]);
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn local_search_reaches_quadratic_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = local_search(quad, &[0.9], quad(&[0.9]), &LocalSearchConfig::default(), &mut rng);
        assert!((r.x[0] - 0.3).abs() <= 0.05, "{:?}", r);
        assert!(r.evals <= LocalSearchConfig::default().steps);
    }

    #[test]
    fn bo_budget_and_incumbent() {
        let cfg = BoConfig { n_init: 4, n_iter: 6, local_search: LocalSearchConfig { steps: 5, ..Default::default() }, ..Default::default() };
        let run = minimize(quad, 1, &cfg).unwrap();
        assert_eq!(run.eval_count(), cfg.budget());
        assert_eq!((run.count(Phase::Init), run.count(Phase::Bayes), run.count(Phase::Local)), (4, 6, 5));
        assert!(run.history.iter().all(|e| run.best_value <= e.value));
        assert!(run.incumbent_trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(run, minimize(quad, 1, &cfg).unwrap());
    }

    #[test]
    fn failures_do_not_abort() {
        let cfg = BoConfig { n_init: 4, n_iter: 4, ..Default::default() };
        let run = minimize(|x| if x[0] > 0.5 { f64::INFINITY } else { quad(x) }, 1, &cfg).unwrap();
        assert!(run.best_value.is_finite());
    }
}
