//! Prior training with evolution strategies and PAC-Bayes certification of a
//! finite policy set.
//!
//! The prior is a diagonal Gaussian over policy weights. Its parameters
//! `(μ, log σ)` follow Adam steps along an antithetic score-function
//! estimate of the smoothed cost gradient. Certification samples `m`
//! policies from the prior, evaluates every policy on every certification
//! environment, and picks the posterior over those `m` policies that
//! minimizes the bound.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environments::Environment;
use crate::error::{Error, Result};
use crate::policy::{funnel_cost, Architecture, EpisodeContext, PolicyParams};
use crate::seed::{self, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicyDist {
    pub architecture: Architecture,
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl GaussianPolicyDist {
    /// `μ ~ N(0, init_std²)` entrywise and `σ = init_std`.
    pub fn initialize(architecture: Architecture, init_std: f64, seed: u64) -> Result<Self> {
        if !(init_std > 0.0 && init_std.is_finite()) {
            return Err(Error::invalid(format!("initial std must be positive, got {init_std}")));
        }
        let q = architecture.param_count();
        let mut rng = seed::rng(seed::derive(seed, &[tag::PRIOR_INIT]));
        let mu = (0..q)
            .map(|_| init_std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        Ok(GaussianPolicyDist {
            architecture,
            mu,
            log_sigma: vec![init_std.ln(); q],
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|l| l.exp()).collect()
    }

    /// `μ + σ⊙ε`.
    pub fn perturb(&self, eps: &[f64], sign: f64) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.log_sigma)
            .zip(eps)
            .map(|((m, l), e)| m + sign * l.exp() * e)
            .collect()
    }

    pub fn sample(&self, seed: u64) -> PolicyParams {
        let eps = standard_normal(self.dim(), seed);
        PolicyParams {
            architecture: self.architecture.clone(),
            theta: self.perturb(&eps, 1.0),
        }
    }

    fn check(&self) -> Result<()> {
        if self.mu.len() != self.architecture.param_count() || self.log_sigma.len() != self.mu.len() {
            return Err(Error::DimensionMismatch {
                expected: self.architecture.param_count(),
                got: self.mu.len(),
            });
        }
        if !self.mu.iter().chain(&self.log_sigma).all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite prior parameters"));
        }
        Ok(())
    }
}

fn standard_normal(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

pub fn empirical_cost(costs: &[f64]) -> Result<f64> {
    if costs.is_empty() {
        return Err(Error::invalid("empirical cost of an empty sample"));
    }
    if let Some(c) = costs.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::invalid(format!("cost {c} outside [0, 1]")));
    }
    Ok(costs.iter().sum::<f64>() / costs.len() as f64)
}

/// Gradient estimate in `(μ, log σ)` coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EsGradient {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
    /// Mean cost over all `2·n_pairs` evaluations.
    pub mean_cost: f64,
}

/// Antithetic score-function estimate of `∇ E_{θ~N(μ,σ²)}[cost(θ)]`.
///
/// Pair `i` draws `ε_i` from its own seeded stream and evaluates
/// `c± = cost(μ ± σ⊙ε_i)`; the pair contributes `(c₊ − c₋)/2 · ε_i/σ` to the
/// `μ` gradient and `(c₊ + c₋)/2 · (ε_i² − 1)` to the `log σ` gradient.
pub fn es_gradient<F>(mu: &[f64], log_sigma: &[f64], n_pairs: usize, seed: u64, cost: F) -> Result<EsGradient>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if n_pairs == 0 {
        return Err(Error::invalid("n_pairs must be at least 1"));
    }
    if mu.len() != log_sigma.len() {
        return Err(Error::DimensionMismatch {
            expected: mu.len(),
            got: log_sigma.len(),
        });
    }
    let q = mu.len();
    let pairs = (0..n_pairs)
        .into_par_iter()
        .map(|i| {
            let eps = standard_normal(q, seed::derive(seed, &[i as u64]));
            let theta = |sign: f64| -> Vec<f64> {
                mu.iter()
                    .zip(log_sigma)
                    .zip(&eps)
                    .map(|((m, l), e)| m + sign * l.exp() * e)
                    .collect()
            };
            let plus = cost(&theta(1.0))?;
            let minus = cost(&theta(-1.0))?;
            Ok((eps, plus, minus))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut g_mu = vec![0.0; q];
    let mut g_ls = vec![0.0; q];
    let mut total = 0.0;
    for (eps, plus, minus) in &pairs {
        let diff = 0.5 * (plus - minus);
        let avg = 0.5 * (plus + minus);
        for j in 0..q {
            g_mu[j] += diff * eps[j] / log_sigma[j].exp();
            g_ls[j] += avg * (eps[j] * eps[j] - 1.0);
        }
        total += plus + minus;
    }
    let n = n_pairs as f64;
    g_mu.iter_mut().for_each(|g| *g /= n);
    g_ls.iter_mut().for_each(|g| *g /= n);
    Ok(EsGradient {
        mu: g_mu,
        log_sigma: g_ls,
        mean_cost: total / (2.0 * n),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Multiplicative step-size decay per iteration.
    pub lr_decay: f64,
    pub n_pairs: usize,
    /// Environments drawn from the training set per iteration.
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            learning_rate: 0.01,
            lr_decay: 1.0,
            n_pairs: 16,
            batch_size: 20,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Mean ES sample cost per iteration.
    pub costs: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, cfg: &TrainingConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.epsilon);
        }
    }
}

/// Adam on `(μ, log σ)` with ES gradients of `cost(iteration, θ)`.
pub fn train_gaussian<F>(
    init: GaussianPolicyDist,
    cfg: &TrainingConfig,
    cost: F,
) -> Result<(GaussianPolicyDist, TrainingLog)>
where
    F: Fn(usize, &[f64]) -> Result<f64> + Sync,
{
    init.check()?;
    let mut dist = init;
    let q = dist.dim();
    let mut adam = Adam::new(2 * q);
    let mut params: Vec<f64> = dist.mu.iter().chain(&dist.log_sigma).copied().collect();
    let mut log = TrainingLog {
        costs: Vec::with_capacity(cfg.iterations),
    };
    let mut lr = cfg.learning_rate;
    for it in 0..cfg.iterations {
        let g = es_gradient(
            &params[..q],
            &params[q..],
            cfg.n_pairs,
            seed::derive(cfg.seed, &[tag::ES_ITERATION, it as u64]),
            |theta| cost(it, theta),
        )?;
        let grad: Vec<f64> = g.mu.iter().chain(&g.log_sigma).copied().collect();
        if !g.mean_cost.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::TrainingDiverged { iteration: it });
        }
        adam.step(&mut params, &grad, lr, cfg);
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::TrainingDiverged { iteration: it });
        }
        log.costs.push(g.mean_cost);
        lr *= cfg.lr_decay;
    }
    dist.mu = params[..q].to_vec();
    dist.log_sigma = params[q..].to_vec();
    Ok((dist, log))
}

/// Trains the prior on funnel-mode costs over minibatches of `envs`.
pub fn train_prior(
    init: GaussianPolicyDist,
    envs: &[Environment],
    ctx: &EpisodeContext,
    cfg: &TrainingConfig,
) -> Result<(GaussianPolicyDist, TrainingLog)> {
    if envs.is_empty() {
        return Err(Error::invalid("training needs at least one environment"));
    }
    let arch = init.architecture.clone();
    let batches: Vec<Vec<usize>> = (0..cfg.iterations)
        .map(|it| {
            use rand::seq::index::sample;
            let mut rng = seed::rng(seed::derive(cfg.seed, &[tag::ENVIRONMENT, it as u64]));
            let k = cfg.batch_size.clamp(1, envs.len());
            let mut idx = sample(&mut rng, envs.len(), k).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    train_gaussian(init, cfg, |it, theta| {
        let policy = PolicyParams {
            architecture: arch.clone(),
            theta: theta.to_vec(),
        };
        let costs = batches[it]
            .iter()
            .map(|&i| Ok(funnel_cost(&envs[i], ctx, &policy)?.cost))
            .collect::<Result<Vec<_>>>()?;
        empirical_cost(&costs)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostMatrix {
    /// `entries[i][l] = C(π_i, E_l)`.
    pub entries: Vec<Vec<f64>>,
    pub policy_seeds: Vec<u64>,
    pub env_seeds: Vec<u64>,
    pub horizon: usize,
}

impl CostMatrix {
    pub fn m(&self) -> usize {
        self.entries.len()
    }

    pub fn n(&self) -> usize {
        self.env_seeds.len()
    }

    /// Policy-wise cost vector `C`.
    pub fn row_means(&self) -> Vec<f64> {
        self.entries
            .iter()
            .map(|r| r.iter().sum::<f64>() / r.len() as f64)
            .collect()
    }
}

/// Seed of the `i`-th certification policy.
pub fn policy_seed(seed: u64, i: usize) -> u64 {
    seed::derive(seed, &[tag::POLICY_SAMPLE, i as u64])
}

/// Samples `m` policies from `prior` and evaluates each on every environment.
pub fn build_cost_matrix(
    prior: &GaussianPolicyDist,
    m: usize,
    envs: &[Environment],
    ctx: &EpisodeContext,
    seed: u64,
) -> Result<CostMatrix> {
    if m < 2 {
        return Err(Error::invalid("a cost matrix needs at least two policies"));
    }
    if envs.is_empty() {
        return Err(Error::invalid("a cost matrix needs at least one environment"));
    }
    prior.check()?;
    let policy_seeds: Vec<u64> = (0..m).map(|i| policy_seed(seed, i)).collect();
    let policies: Vec<PolicyParams> = policy_seeds.iter().map(|&s| prior.sample(s)).collect();
    let n = envs.len();
    let flat = (0..m * n)
        .into_par_iter()
        .map(|k| Ok(funnel_cost(&envs[k % n], ctx, &policies[k / n])?.cost))
        .collect::<Result<Vec<f64>>>()?;
    Ok(CostMatrix {
        entries: flat.chunks(n).map(<[f64]>::to_vec).collect(),
        policy_seeds,
        env_seeds: envs.iter().map(Environment::seed).collect(),
        horizon: envs[0].horizon(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscretePosterior {
    pub p: Vec<f64>,
    pub p0: Vec<f64>,
}

impl DiscretePosterior {
    pub fn uniform(m: usize) -> Self {
        DiscretePosterior {
            p: vec![1.0 / m as f64; m],
            p0: vec![1.0 / m as f64; m],
        }
    }

    /// Index drawn from `p` with a uniform variate `u ∈ [0, 1)`.
    pub fn pick(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (i, &pi) in self.p.iter().enumerate() {
            acc += pi;
            if u < acc {
                return i;
            }
        }
        self.p.iter().rposition(|&pi| pi > 0.0).unwrap_or(0)
    }
}

/// `Σ p_i log(p_i / p0_i)` with `0·log 0 = 0`.
pub fn kl_discrete(p: &[f64], p0: &[f64]) -> Result<f64> {
    if p.len() != p0.len() {
        return Err(Error::DimensionMismatch {
            expected: p0.len(),
            got: p.len(),
        });
    }
    let mut kl = 0.0;
    for (index, (&pi, &qi)) in p.iter().zip(p0).enumerate() {
        if pi <= 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Err(Error::InfiniteKl { index, mass: pi });
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl.max(0.0))
}

/// `(KL + log(2√N/δ)) / (2N)`.
pub fn regularizer(kl: f64, n: usize, delta: f64) -> f64 {
    let n = n as f64;
    (kl + (2.0 * n.sqrt() / delta).ln()) / (2.0 * n)
}

fn bound_value(c_s: f64, r: f64) -> f64 {
    ((c_s + r).sqrt() + r.sqrt()).powi(2)
}

/// `(√(C_S + R) + √R)²`, capped at 1.
pub fn pac_bound(c_s: f64, r: f64) -> f64 {
    bound_value(c_s, r).min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacCertificate {
    pub c_s: f64,
    pub kl: f64,
    pub r: f64,
    pub c_pac: f64,
    pub delta: f64,
    pub n: usize,
    pub m: usize,
    /// Gibbs temperature of the winning posterior.
    pub lambda: f64,
    pub posterior: DiscretePosterior,
    /// Hash of the certification dataset manifest, when known.
    pub dataset_hash: Option<String>,
}

impl PacCertificate {
    /// Recomputes the bound from the stored pieces.
    pub fn recomputed_bound(&self) -> f64 {
        pac_bound(self.c_s, regularizer(self.kl, self.n, self.delta))
    }
}

/// Gibbs posterior `p_i ∝ p0_i · exp(−λ C_i)`.
pub fn gibbs(costs: &[f64], p0: &[f64], lambda: f64) -> Vec<f64> {
    let cmin = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = costs
        .iter()
        .zip(p0)
        .map(|(c, q)| q * (-lambda * (c - cmin)).exp())
        .collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

struct Candidate {
    lambda: f64,
    p: Vec<f64>,
    c_s: f64,
    kl: f64,
    r: f64,
    value: f64,
}

fn evaluate(costs: &[f64], p0: &[f64], lambda: f64, n: usize, delta: f64) -> Result<Candidate> {
    let p = gibbs(costs, p0, lambda);
    let c_s = p.iter().zip(costs).map(|(a, b)| a * b).sum::<f64>().clamp(0.0, 1.0);
    let kl = kl_discrete(&p, p0)?;
    let r = regularizer(kl, n, delta);
    Ok(Candidate {
        lambda,
        p,
        c_s,
        kl,
        r,
        value: bound_value(c_s, r),
    })
}

/// Minimizes the bound over the Gibbs frontier: `λ = 0`, a log-spaced scan
/// of `[1e-3, 1e6]`, then golden-section refinement of `log λ` around the
/// best scan point.
pub fn optimize_posterior(matrix: &CostMatrix, delta: f64) -> Result<(DiscretePosterior, PacCertificate)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    let m = matrix.m();
    if m == 0 || matrix.n() == 0 {
        return Err(Error::invalid("empty cost matrix"));
    }
    let costs = matrix.row_means();
    optimize_costs(&costs, matrix.n(), delta)
}

/// [`optimize_posterior`] on a policy-wise cost vector directly.
pub fn optimize_costs(costs: &[f64], n: usize, delta: f64) -> Result<(DiscretePosterior, PacCertificate)> {
    let m = costs.len();
    let p0 = vec![1.0 / m as f64; m];
    let (lo, hi) = (1e-3f64.ln(), 1e6f64.ln());
    const SCAN: usize = 200;
    let grid: Vec<f64> = (0..=SCAN).map(|i| lo + (hi - lo) * i as f64 / SCAN as f64).collect();
    let mut best = evaluate(costs, &p0, 0.0, n, delta)?;
    let mut best_idx = None;
    for (i, &g) in grid.iter().enumerate() {
        let c = evaluate(costs, &p0, g.exp(), n, delta)?;
        if c.value < best.value {
            best = c;
            best_idx = Some(i);
        }
    }
    if let Some(i) = best_idx {
        let (mut a, mut b) = (grid[i.saturating_sub(1)], grid[(i + 1).min(SCAN)]);
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut x1 = b - phi * (b - a);
        let mut x2 = a + phi * (b - a);
        let mut f1 = evaluate(costs, &p0, x1.exp(), n, delta)?;
        let mut f2 = evaluate(costs, &p0, x2.exp(), n, delta)?;
        for _ in 0..80 {
            if f1.value <= f2.value {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - phi * (b - a);
                f1 = evaluate(costs, &p0, x1.exp(), n, delta)?;
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + phi * (b - a);
                f2 = evaluate(costs, &p0, x2.exp(), n, delta)?;
            }
        }
        for c in [f1, f2] {
            if c.value < best.value {
                best = c;
            }
        }
    }
    let posterior = DiscretePosterior { p: best.p, p0 };
    let cert = PacCertificate {
        c_s: best.c_s,
        kl: best.kl,
        r: best.r,
        c_pac: pac_bound(best.c_s, best.r),
        delta,
        n,
        m,
        lambda: best.lambda,
        posterior: posterior.clone(),
        dataset_hash: None,
    };
    Ok((posterior, cert))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empirical_cost_examples() {
        assert_eq!(empirical_cost(&[0.0, 1.0, 0.5]).unwrap(), 0.5);
        assert_eq!(empirical_cost(&[0.0; 4]).unwrap(), 0.0);
        assert!(empirical_cost(&[]).is_err());
        assert!(empirical_cost(&[1.5]).is_err());
    }

    #[test]
    fn posterior_weighted_row_means_are_linear() {
        let m = CostMatrix {
            entries: vec![vec![0.0, 0.5, 1.0], vec![0.1, 0.2, 0.3]],
            policy_seeds: vec![0, 1],
            env_seeds: vec![0, 1, 2],
            horizon: 10,
        };
        let p = [0.25, 0.75];
        let c = m.row_means();
        let direct: f64 = (0..3)
            .map(|l| p[0] * m.entries[0][l] + p[1] * m.entries[1][l])
            .sum::<f64>()
            / 3.0;
        assert!((p[0] * c[0] + p[1] * c[1] - direct).abs() < 1e-15);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_discrete(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        assert!((kl_discrete(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let expected = 0.75 * (1.5f64).ln() + 0.25 * (0.5f64).ln();
        assert!((kl_discrete(&[0.75, 0.25], &[0.5, 0.5]).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.130812).abs() < 1e-6);
        assert!(matches!(
            kl_discrete(&[0.5, 0.5], &[1.0, 0.0]),
            Err(Error::InfiniteKl { index: 1, .. })
        ));
    }

    #[test]
    fn regularizer_examples() {
        let base = (2.0 * 4000f64.sqrt() / 0.01).ln() / 8000.0;
        assert!((regularizer(0.0, 4000, 0.01) - base).abs() < 1e-15);
        assert!((regularizer(0.0, 4000, 0.01) - 0.00118066).abs() < 1e-8);
        assert!((regularizer(2.0, 4000, 0.01) - 0.00143066).abs() < 1e-8);
        assert!(regularizer(0.1, 4000, 0.01) > regularizer(0.0, 4000, 0.01));
        assert!(regularizer(0.1, 5000, 0.01) < regularizer(0.1, 4000, 0.01));
    }

    #[test]
    fn bound_examples() {
        assert_eq!(pac_bound(0.0, 0.0), 0.0);
        assert!((pac_bound(0.3, 0.0) - 0.3).abs() < 1e-15);
        let expected = (0.26f64.sqrt() + 0.1).powi(2);
        assert!((pac_bound(0.25, 0.01) - expected).abs() < 1e-15);
        assert!((expected - 0.371980).abs() < 1e-6);
        assert_eq!(pac_bound(0.9, 0.5), 1.0);
    }

    #[test]
    fn equal_costs_keep_the_uniform_posterior() {
        let (p, cert) = optimize_costs(&[0.3; 4], 1000, 0.05).unwrap();
        for v in &p.p {
            assert!((v - 0.25).abs() < 1e-12);
        }
        assert!(cert.kl.abs() < 1e-12);
        assert!((cert.c_pac - pac_bound(0.3, regularizer(0.0, 1000, 0.05))).abs() < 1e-12);
    }

    #[test]
    fn two_policy_endpoint() {
        let (p, cert) = optimize_costs(&[0.0, 1.0], 4000, 0.01).unwrap();
        let endpoint = 4.0 * regularizer(2f64.ln(), 4000, 0.01);
        assert!((endpoint - 0.005069).abs() < 1e-6);
        assert!(p.p[0] > 0.99);
        assert!(cert.c_pac <= endpoint + 1e-12);
        assert!((cert.c_pac - endpoint).abs() < 5e-5);
    }

    /// Exhaustive search over the simplex on a 0.01 grid.
    fn grid_bound(costs: &[f64], n: usize, delta: f64) -> f64 {
        let m = costs.len();
        let p0 = vec![1.0 / m as f64; m];
        let steps = 100;
        let mut best = f64::INFINITY;
        let mut p = vec![0usize; m];
        fn rec(i: usize, left: usize, p: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
            if i + 1 == p.len() {
                p[i] = left;
                f(p);
                return;
            }
            for k in 0..=left {
                p[i] = k;
                rec(i + 1, left - k, p, f);
            }
        }
        rec(0, steps, &mut p, &mut |ks| {
            let q: Vec<f64> = ks.iter().map(|&k| k as f64 / steps as f64).collect();
            let c: f64 = q.iter().zip(costs).map(|(a, b)| a * b).sum();
            let kl = kl_discrete(&q, &p0).unwrap();
            best = best.min(bound_value(c, regularizer(kl, n, delta)));
        });
        best
    }

    #[test]
    fn gibbs_search_matches_grid_oracle() {
        let mut rng = seed::rng(17);
        for _ in 0..10 {
            let m = 2 + rand::Rng::random_range(&mut rng, 0..3);
            let costs: Vec<f64> = (0..m).map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0)).collect();
            let (_, cert) = optimize_costs(&costs, 200, 0.05).unwrap();
            let oracle = grid_bound(&costs, 200, 0.05);
            assert!(
                cert.c_pac <= oracle.min(1.0) + 1e-3,
                "{costs:?}: {} vs {oracle}",
                cert.c_pac
            );
        }
    }

    #[test]
    fn gibbs_endpoints() {
        let c = [0.4, 0.1, 0.7];
        let p0 = [1.0 / 3.0; 3];
        for (a, b) in gibbs(&c, &p0, 0.0).iter().zip(&p0) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(gibbs(&c, &p0, 1e6)[1] > 1.0 - 1e-6);
    }

    #[test]
    fn es_gradient_on_a_quadratic() {
        // E[θ²] under N(μ, σ²) is μ² + σ², so ∂μ = 2μ and ∂σ = 2σ.
        // One 10⁴-pair log σ estimate has a relative standard error near 7%,
        // so the estimator mean is taken over 50 independent estimates.
        let (mu, sigma): (f64, f64) = (1.0, 0.5);
        let reps = 50;
        let (mut g_mu, mut g_ls) = (0.0, 0.0);
        for r in 0..reps {
            let g = es_gradient(&[mu], &[sigma.ln()], 10_000, r, |t| Ok(t[0] * t[0])).unwrap();
            g_mu += g.mu[0] / reps as f64;
            g_ls += g.log_sigma[0] / reps as f64;
        }
        let d_sigma = g_ls / sigma;
        assert!((g_mu - 2.0 * mu).abs() < 0.05 * 2.0 * mu, "{g_mu}");
        assert!((d_sigma - 2.0 * sigma).abs() < 0.05 * 2.0 * sigma, "{d_sigma}");
    }

    #[test]
    fn es_gradient_of_a_constant_is_centered() {
        let n = 4000;
        let q = 3;
        let g = es_gradient(&[0.2; 3], &[0.0; 3], n, 5, |_| Ok(0.7)).unwrap();
        assert!(g.mu.iter().all(|v| *v == 0.0));
        // Each log-σ term is 0.7·(ε² − 1), whose standard deviation is 0.7·√2.
        let se = 0.7 * 2f64.sqrt() / (n as f64).sqrt();
        for j in 0..q {
            assert!(g.log_sigma[j].abs() < 3.0 * se, "{}", g.log_sigma[j]);
        }
    }

    #[test]
    fn antithetic_labels_are_symmetric() {
        // Flipping ε ↦ −ε swaps c₊ and c₋; the estimate must not change.
        let cost = |t: &[f64]| Ok((t[0] - 0.3).powi(2) + t[1].sin());
        let a = es_gradient(&[0.1, -0.2], &[0.0, -1.0], 64, 9, cost).unwrap();
        let flipped = |t: &[f64]| {
            let m = [0.1, -0.2];
            let r: Vec<f64> = t.iter().zip(&m).map(|(x, mu)| 2.0 * mu - x).collect();
            cost(&r)
        };
        let b = es_gradient(&[0.1, -0.2], &[0.0, -1.0], 64, 9, flipped).unwrap();
        for (x, y) in a.mu.iter().zip(&b.mu) {
            assert!((x + y).abs() < 1e-12);
        }
        for (x, y) in a.log_sigma.iter().zip(&b.log_sigma) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_solves_the_quadratic() {
        let init = GaussianPolicyDist {
            architecture: Architecture::new(vec![1, 1]).unwrap(),
            mu: vec![1.0, 0.0],
            log_sigma: vec![0.5f64.ln(), 0.5f64.ln()],
        };
        let cfg = TrainingConfig {
            iterations: 500,
            learning_rate: 0.02,
            n_pairs: 32,
            seed: 1,
            ..TrainingConfig::default()
        };
        let (d, log) = train_gaussian(init, &cfg, |_, t| Ok(t[0] * t[0] + t[1] * t[1])).unwrap();
        assert_eq!(log.costs.len(), 500);
        assert!(d.mu.iter().all(|m| m.abs() < 0.05), "{:?}", d.mu);
    }

    #[test]
    fn zero_iterations_change_nothing() {
        let init = GaussianPolicyDist::initialize(Architecture::new(vec![2, 3]).unwrap(), 0.1, 4).unwrap();
        let cfg = TrainingConfig {
            iterations: 0,
            ..TrainingConfig::default()
        };
        let (d, log) = train_gaussian(init.clone(), &cfg, |_, _| Ok(0.0)).unwrap();
        assert_eq!(d, init);
        assert!(log.costs.is_empty());
    }

    #[test]
    fn nan_cost_aborts_training() {
        let init = GaussianPolicyDist::initialize(Architecture::new(vec![2, 3]).unwrap(), 0.1, 4).unwrap();
        let cfg = TrainingConfig {
            iterations: 5,
            ..TrainingConfig::default()
        };
        assert!(matches!(
            train_gaussian(init, &cfg, |it, _| Ok(if it == 3 { f64::NAN } else { 0.5 })),
            Err(Error::TrainingDiverged { iteration: 3 })
        ));
    }

    #[test]
    fn posterior_pick_follows_cumulative_mass() {
        let p = DiscretePosterior {
            p: vec![0.2, 0.0, 0.8],
            p0: vec![1.0 / 3.0; 3],
        };
        assert_eq!(p.pick(0.1), 0);
        assert_eq!(p.pick(0.2), 2);
        assert_eq!(p.pick(0.999_999), 2);
    }

    proptest! {
        #[test]
        fn certificates_dominate_and_are_consistent(
            costs in prop::collection::vec(0.0f64..1.0, 2..6),
            n in 10usize..5000,
            delta in 0.001f64..0.5,
        ) {
            let (p, cert) = optimize_costs(&costs, n, delta).unwrap();
            prop_assert!(cert.c_pac >= cert.c_s);
            prop_assert!((cert.recomputed_bound() - cert.c_pac).abs() < 1e-12);
            prop_assert!((p.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.p.iter().all(|&v| v >= 0.0));
            prop_assert!(cert.r >= regularizer(0.0, n, delta));
        }
    }
}
