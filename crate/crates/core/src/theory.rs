//! Numerical verification of the round-wise contraction bound on synthetic
//! strongly convex (quadratic) federations: closed-form constants, sampled
//! participation moments, and Monte Carlo bound checks.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::attack::{poison_batch, AttackSpec};
use crate::error::{Error, Result};
use crate::model::{grad_params, Mode, ModelArch, ModelParams};
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryParams {
    /// Smoothness constant L.
    pub l: f64,
    /// Strong convexity constant mu.
    pub mu: f64,
    /// Per-step stochastic gradient variance sigma_g^2.
    pub sigma_g2: f64,
    /// Client drift bound zeta^2.
    pub zeta2: f64,
    /// Reserve gradient variance sigma_r^2.
    pub sigma_r2: f64,
    /// Reserve objective mismatch eps_r (gap units are eps_r^2).
    pub eps_r: f64,
    /// Adversarial gradient bias bound Gamma.
    pub gamma_bias: f64,
    pub rho: f64,
    pub n: usize,
    pub m: usize,
    /// Local steps per round.
    pub tau: usize,
    /// Client step size eta; the effective aggregated step is gamma_g = eta * tau.
    pub eta: f64,
    /// Reserve step size.
    pub gamma_r: f64,
    /// Reserve steps per round.
    pub r: usize,
    /// Free constant a in (0, 1) of the c_g term.
    pub a: f64,
    /// Absolute constant multiplying sigma_g^2 / m.
    pub c_s: f64,
}

impl TheoryParams {
    /// Effective aggregated step size.
    pub fn gamma_g(&self) -> f64 {
        self.eta * self.tau as f64
    }

    /// c_g(gamma_g) = gamma_g / (2a) + L gamma_g^2 / 2.
    pub fn c_g(&self) -> f64 {
        let g = self.gamma_g();
        g / (2.0 * self.a) + self.l * g * g / 2.0
    }

    /// c_tau = tau (tau - 1) eta^2 L^2 / 2.
    pub fn c_tau(&self) -> f64 {
        let t = self.tau as f64;
        t * (t - 1.0) * self.eta * self.eta * self.l * self.l / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu <= self.l) {
            return Err(Error::TheoryParams(format!(
                "need 0 < mu <= L, got mu={}, L={}",
                self.mu, self.l
            )));
        }
        if self.gamma_g() > 1.0 / self.l || self.gamma_r > 1.0 / self.l {
            return Err(Error::TheoryParams(
                "step sizes must satisfy gamma <= 1/L".into(),
            ));
        }
        if !(0.0 < self.a && self.a < 1.0) {
            return Err(Error::TheoryParams(format!("need a in (0,1), got {}", self.a)));
        }
        if self.m < 1 || self.m > self.n {
            return Err(Error::TheoryParams(format!(
                "need 1 <= m <= N, got m={}, N={}",
                self.m, self.n
            )));
        }
        if [self.sigma_g2, self.zeta2, self.sigma_r2, self.eps_r, self.gamma_bias]
            .iter()
            .any(|v| *v < 0.0)
        {
            return Err(Error::TheoryParams("noise constants must be >= 0".into()));
        }
        Ok(())
    }
}

/// Closed-form first and second moments of the sampled adversarial fraction.
pub fn beta_moments(rho: f64, n: usize, m: usize) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&rho) || m < 1 || m > n {
        return Err(Error::TheoryParams(format!(
            "beta_moments: rho={rho}, N={n}, m={m}"
        )));
    }
    let exact = rho * n as f64;
    if (exact - exact.round()).abs() > 1e-9 {
        return Err(Error::TheoryParams(format!(
            "rho * N = {exact} must be integral (fixed adversary count)"
        )));
    }
    let e1 = rho;
    let e2 = if n == 1 {
        rho * rho
    } else {
        rho * rho + rho * (1.0 - rho) * (n - m) as f64 / (m as f64 * (n - 1) as f64)
    };
    Ok((e1, e2))
}

/// Chain-rule bound on the poisoned-gradient bias:
/// Gamma = L_loss * mixed_norm * sqrt(d) * epsilon.
pub fn gradient_bias_bound(l_loss: f64, mixed_norm: f64, d: usize, epsilon: f64) -> f64 {
    l_loss * mixed_norm * (d as f64).sqrt() * epsilon
}

/// Contraction factor q and steady-state constant C'.
pub fn contraction_constants(p: &TheoryParams) -> Result<(f64, f64)> {
    p.validate()?;
    let (_, e_beta2) = beta_moments(p.rho, p.n, p.m)?;
    let reserve_decay = (1.0 - p.mu * p.gamma_r).powi(p.r as i32);
    let q = (1.0 - p.mu * p.gamma_g()) * reserve_decay;
    let client_noise = p.c_s * p.sigma_g2 / p.m as f64
        + p.c_tau() * p.zeta2
        + e_beta2 * p.gamma_bias * p.gamma_bias;
    let c_prime = reserve_decay * p.c_g() * client_noise
        + p.l * p.gamma_r * p.gamma_r * p.r as f64 * p.sigma_r2 / 2.0
        + reserve_decay * p.eps_r * p.eps_r;
    Ok((q, c_prime))
}

/// Synthetic strongly convex federation: every client objective is
/// `0.5 (theta - theta_n*)^T H (theta - theta_n*)` with a shared diagonal H
/// whose spectrum lies in `[mu, L]`. The global minimizer is the origin,
/// so the optimality gap is `0.5 theta^T H theta`.
#[derive(Debug, Clone)]
pub struct QuadraticFederation {
    pub dim: usize,
    h: Vec<f64>,
    client_opts: Vec<Vec<f64>>,
    reserve_opt: Vec<f64>,
    adversaries: Vec<usize>,
    bias: Vec<f64>,
}

impl QuadraticFederation {
    pub fn new(dim: usize, p: &TheoryParams, seed: u64) -> Result<Self> {
        p.validate()?;
        if dim < 2 {
            return Err(Error::TheoryParams("dim must be >= 2".into()));
        }
        let mut rng = stream(seed, &[0x71]);
        // spectrum spans [mu, L] with both endpoints present
        let mut h = vec![0.0; dim];
        h[0] = p.mu;
        h[1] = p.l;
        for v in h.iter_mut().skip(2) {
            *v = rng.gen_range(p.mu..=p.l);
        }
        // antisymmetric client minimizers: mean is 0 (global minimizer at
        // the origin) and every drift norm ||H theta_n*|| equals zeta
        let zeta = p.zeta2.sqrt();
        let mut client_opts = vec![vec![0.0; dim]; p.n];
        for i in 0..p.n / 2 {
            let mut dir: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let hnorm: f64 = dir
                .iter()
                .zip(&h)
                .map(|(d, hv)| (d * hv) * (d * hv))
                .sum::<f64>()
                .sqrt();
            if hnorm > 0.0 && zeta > 0.0 {
                for d in dir.iter_mut() {
                    *d *= zeta / hnorm;
                }
            } else {
                dir.iter_mut().for_each(|d| *d = 0.0);
            }
            client_opts[2 * i + 1] = dir.iter().map(|d| -d).collect();
            client_opts[2 * i] = dir;
        }
        // reserve minimizer with optimality gap exactly eps_r^2
        let mut reserve_opt: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gap_now: f64 = 0.5
            * reserve_opt
                .iter()
                .zip(&h)
                .map(|(v, hv)| hv * v * v)
                .sum::<f64>();
        let scale = if gap_now > 0.0 {
            (p.eps_r * p.eps_r / gap_now).sqrt()
        } else {
            0.0
        };
        for v in reserve_opt.iter_mut() {
            *v *= scale;
        }
        // fixed-direction adversarial bias of norm Gamma (worst case allowed)
        let mut bias: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bnorm: f64 = bias.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in bias.iter_mut() {
            *v *= p.gamma_bias / bnorm;
        }
        let count = (p.rho * p.n as f64).ceil() as usize;
        let fed = Self {
            dim,
            h,
            client_opts,
            reserve_opt,
            adversaries: (0..count).collect(),
            bias,
        };
        fed.check_consistency(p)?;
        Ok(fed)
    }

    /// Runtime consistency checks against the declared constants.
    pub fn check_consistency(&self, p: &TheoryParams) -> Result<()> {
        let tol = 1e-9;
        if self.h.iter().any(|&v| v < p.mu - tol || v > p.l + tol) {
            return Err(Error::TheoryParams("spectrum outside [mu, L]".into()));
        }
        let max_drift = self
            .client_opts
            .iter()
            .map(|c| {
                c.iter()
                    .zip(&self.h)
                    .map(|(v, h)| (v * h) * (v * h))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        if max_drift > p.zeta2.sqrt() + tol {
            return Err(Error::TheoryParams(format!(
                "drift {max_drift} exceeds declared zeta {}",
                p.zeta2.sqrt()
            )));
        }
        let bias_norm: f64 = self.bias.iter().map(|v| v * v).sum::<f64>().sqrt();
        if bias_norm > p.gamma_bias + tol {
            return Err(Error::TheoryParams("bias norm exceeds Gamma".into()));
        }
        Ok(())
    }

    /// Optimality gap of the global objective.
    pub fn gap(&self, theta: &[f64]) -> f64 {
        0.5 * theta
            .iter()
            .zip(&self.h)
            .map(|(v, h)| h * v * v)
            .sum::<f64>()
    }

    /// A starting point with unit optimality gap.
    pub fn start(&self) -> Vec<f64> {
        let mut theta = vec![1.0; self.dim];
        let g = self.gap(&theta);
        let s = (1.0 / g).sqrt();
        for v in theta.iter_mut() {
            *v *= s;
        }
        theta
    }

    fn noise(&self, variance: f64, rng: &mut impl Rng) -> Vec<f64> {
        if variance == 0.0 {
            return vec![0.0; self.dim];
        }
        let per_coord = (variance / self.dim as f64).sqrt();
        let normal = Normal::new(0.0, per_coord).unwrap();
        (0..self.dim).map(|_| normal.sample(rng)).collect()
    }

    /// One protocol round: sample m clients, tau noisy local SGD steps each
    /// (adversaries add the fixed bias), average, then r reserve steps.
    pub fn simulate_round(&self, theta: &mut Vec<f64>, p: &TheoryParams, rng: &mut impl Rng) {
        let selected = crate::fed::sample_clients(p.n, p.m, rng);
        let mut aggregate = vec![0.0; self.dim];
        for &cid in &selected {
            let mut local = theta.clone();
            let adversarial = self.adversaries.binary_search(&cid).is_ok();
            for _ in 0..p.tau {
                let noise = self.noise(p.sigma_g2, rng);
                for i in 0..self.dim {
                    let mut g = self.h[i] * (local[i] - self.client_opts[cid][i]) + noise[i];
                    if adversarial {
                        g += self.bias[i];
                    }
                    local[i] -= p.eta * g;
                }
            }
            for (a, l) in aggregate.iter_mut().zip(&local) {
                *a += l / selected.len() as f64;
            }
        }
        *theta = aggregate;
        for _ in 0..p.r {
            let noise = self.noise(p.sigma_r2, rng);
            for i in 0..self.dim {
                let g = self.h[i] * (theta[i] - self.reserve_opt[i]) + noise[i];
                theta[i] -= p.gamma_r * g;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct RoundCheck {
    pub round: usize,
    pub mean_gap: f64,
    /// q * mean_gap(previous round) + C'.
    pub bound: f64,
    /// Three standard errors of the mean gap.
    pub slack: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct ContractionReport {
    pub q: f64,
    pub c_prime: f64,
    pub trials: usize,
    pub initial_gap: f64,
    pub rounds: Vec<RoundCheck>,
    pub all_pass: bool,
}

impl ContractionReport {
    /// Mean gap over the last quarter of the run.
    pub fn steady_state_gap(&self) -> f64 {
        let k = (self.rounds.len() / 4).max(1);
        let tail = &self.rounds[self.rounds.len() - k..];
        tail.iter().map(|r| r.mean_gap).sum::<f64>() / k as f64
    }

    pub fn to_text_table(&self) -> String {
        let mut out = format!(
            "q = {:.6}, C' = {:.6e}, trials = {}\n{:>5} {:>14} {:>14} {:>12} {:>6}\n",
            self.q, self.c_prime, self.trials, "round", "mean_gap", "bound", "slack", "pass"
        );
        for r in &self.rounds {
            out.push_str(&format!(
                "{:>5} {:>14.6e} {:>14.6e} {:>12.4e} {:>6}\n",
                r.round,
                r.mean_gap,
                r.bound,
                r.slack,
                if r.pass { "yes" } else { "NO" }
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,mean_gap,bound,slack,pass\n");
        for r in &self.rounds {
            out.push_str(&format!(
                "{},{:.12e},{:.12e},{:.12e},{}\n",
                r.round, r.mean_gap, r.bound, r.slack, r.pass
            ));
        }
        out
    }
}

/// Monte Carlo check of `E[gap_{t+1}] <= q E[gap_t] + C'` round by round,
/// with three standard errors of statistical slack.
pub fn verify_contraction(
    fed: &QuadraticFederation,
    p: &TheoryParams,
    rounds: usize,
    trials: usize,
    seed: u64,
) -> Result<ContractionReport> {
    fed.check_consistency(p)?;
    let (q, c_prime) = contraction_constants(p)?;
    let start = fed.start();
    // gap trajectories per trial, keyed RNG so trials parallelize stably
    let trajectories: Vec<Vec<f64>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = stream(seed, &[0x7a, trial as u64]);
            let mut theta = start.clone();
            let mut gaps = Vec::with_capacity(rounds);
            for _ in 0..rounds {
                fed.simulate_round(&mut theta, p, &mut rng);
                gaps.push(fed.gap(&theta));
            }
            gaps
        })
        .collect();
    let initial_gap = fed.gap(&start);
    let mut checks = Vec::with_capacity(rounds);
    let mut prev_mean = initial_gap;
    let mut all_pass = true;
    for t in 0..rounds {
        let vals: Vec<f64> = trajectories.iter().map(|g| g[t]).collect();
        let mean = vals.iter().sum::<f64>() / trials as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (trials.max(2) - 1) as f64;
        let slack = 3.0 * (var / trials as f64).sqrt();
        let bound = q * prev_mean + c_prime;
        let pass = mean <= bound + slack;
        all_pass &= pass;
        checks.push(RoundCheck {
            round: t + 1,
            mean_gap: mean,
            bound,
            slack,
            pass,
        });
        prev_mean = mean;
    }
    Ok(ContractionReport {
        q,
        c_prime,
        trials,
        initial_gap,
        rounds: checks,
        all_pass,
    })
}

/// Noiseless exact-gradient special case: deterministic gradient descent on
/// the global quadratic must contract the gap by at least `1 - mu * gamma`
/// every round, with zero statistical slack. Returns the per-round ratios.
pub fn exact_contraction_ratios(
    fed: &QuadraticFederation,
    gamma: f64,
    rounds: usize,
) -> Vec<f64> {
    let mut theta = fed.start();
    let mut ratios = Vec::with_capacity(rounds);
    let mut prev = fed.gap(&theta);
    for _ in 0..rounds {
        for i in 0..fed.dim {
            theta[i] -= gamma * fed.h[i] * theta[i];
        }
        let g = fed.gap(&theta);
        ratios.push(if prev > 0.0 { g / prev } else { 0.0 });
        prev = g;
    }
    ratios
}

/// Empirical l2 distance between the poisoned-batch and clean-batch
/// parameter gradients — the quantity Gamma upper-bounds.
pub fn measure_gradient_bias(
    arch: &ModelArch,
    params: &ModelParams,
    batch: &Tensor,
    labels: &Tensor,
    spec: &AttackSpec,
    rng: &mut dyn rand::RngCore,
) -> Result<f64> {
    let poisoned = poison_batch(arch, params, batch, labels, spec, rng)?;
    let clean = grad_params(arch, params, batch, labels, Mode::Eval, 0.0, None)?;
    let adv = grad_params(arch, params, &poisoned, labels, Mode::Eval, 0.0, None)?;
    let mut total = 0.0;
    for (name, g0) in clean.grads.iter() {
        let g1 = adv.grads.get(name).unwrap();
        for (a, b) in g0.data().iter().zip(g1.data()) {
            total += (a - b) * (a - b);
        }
    }
    Ok(total.sqrt())
}
