//! Numerical checks of the convergence theory on tabular instances, plus
//! the gradient-variance ablation and the projected-gradient residual track
//! for two-layer networks.

use log::warn;
use rand::Rng;
use serde::Serialize;

use crate::envs::Environment;
use crate::error::{check_len, Error, Result};
use crate::lp::{alm_inner_solve, lagrangian, projected_gradient, run_alm, z_table, AlmState, InnerOptions, WeightFn};
use crate::mdp::{dot, max_abs, TabularMdp, TransitionTuple};
use crate::nets::{sparse, NetBundle, TwoLayerNet};
use crate::rng::{split, stream, Stream};
use crate::scal::{scal_train_observed, z_target, ScalConfig, TrainingLog};

/// Inner tolerance used whenever the exact proximal map is needed.
pub const EXACT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorTerms {
    pub eps_l: f64,
    pub eps_x: f64,
    pub k: usize,
}

impl ErrorTerms {
    /// True when either term is below `-1e-10`, which only an inexact
    /// infimum can cause.
    pub fn flagged(&self) -> bool {
        self.eps_l < -1e-10 || self.eps_x < -1e-10
    }
}

pub fn weighted_sq_dist(w: &WeightFn, a: &[f64], b: &[f64]) -> f64 {
    w.as_slice().iter().zip(a).zip(b).map(|((w, a), b)| w * (a - b).powi(2)).sum()
}

/// Optimization and fit errors of the step `iterate_k -> iterate_k1`:
/// `eps_L = L(V1, h1, x0) - inf L(., ., x0)` and
/// `eps_x = sum w (x1 - Z(V1, h1, x0))^2`.
pub fn error_terms(
    mdp: &TabularMdp,
    w: &WeightFn,
    iterate_k: &AlmState,
    iterate_k1: &AlmState,
    mu: f64,
    tol: f64,
) -> Result<ErrorTerms> {
    iterate_k.validate(mdp)?;
    iterate_k1.validate(mdp)?;
    let x0 = &iterate_k.x;
    let best = alm_inner_solve(mdp, w, x0, mu, &InnerOptions::newton(tol / 10.0), Some(&iterate_k1.v))?;
    let inf = lagrangian(mdp, w, &best.v, &best.h, x0, mu);
    let eps_l = lagrangian(mdp, w, &iterate_k1.v, &iterate_k1.h, x0, mu) - inf;
    let z = z_table(mdp, &iterate_k1.v, &iterate_k1.h, x0, mu);
    let eps_x = weighted_sq_dist(w, &iterate_k1.x, &z);
    let terms = ErrorTerms {
        eps_l,
        eps_x,
        k: iterate_k.iteration,
    };
    if terms.flagged() {
        warn!("eps_L = {eps_l:e} is negative beyond rounding; the inner infimum is inexact");
    }
    Ok(terms)
}

/// The exact ALM multiplier map `T x = [Z(V_hat, h_hat, x)]_+` where
/// `(V_hat, h_hat)` minimises `L_mu(., ., x)`.
pub fn proximal_map(mdp: &TabularMdp, w: &WeightFn, x: &[f64], mu: f64, tol: f64) -> Result<Vec<f64>> {
    let sol = alm_inner_solve(mdp, w, x, mu, &InnerOptions::newton(tol), None)?;
    Ok(z_table(mdp, &sol.v, &sol.h, x, mu)
        .into_iter()
        .map(|z| z.max(0.0))
        .collect())
}

/// `E_w (x - T x)^2`.
pub fn prox_residual(mdp: &TabularMdp, w: &WeightFn, x: &[f64], mu: f64, tol: f64) -> Result<f64> {
    let tx = proximal_map(mdp, w, x, mu, tol)?;
    Ok(weighted_sq_dist(w, x, &tx))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerturbationBound {
    /// `sum w (x1 - T x0)^2`.
    pub lhs: f64,
    /// `2 eps_x + 4 mu eps_L`.
    pub rhs: f64,
    pub terms: ErrorTerms,
}

impl PerturbationBound {
    pub fn holds(&self, slack: f64) -> bool {
        self.lhs <= self.rhs + slack
    }
}

/// Distance of an inexact update to the exact one, against the bound
/// built from its error terms.
pub fn perturbation_bound(
    mdp: &TabularMdp,
    w: &WeightFn,
    iterate_k: &AlmState,
    iterate_k1: &AlmState,
    mu: f64,
    tol: f64,
) -> Result<PerturbationBound> {
    let terms = error_terms(mdp, w, iterate_k, iterate_k1, mu, tol)?;
    let exact = proximal_map(mdp, w, &iterate_k.x, mu, tol / 10.0)?;
    Ok(PerturbationBound {
        lhs: weighted_sq_dist(w, &iterate_k1.x, &exact),
        rhs: 2.0 * terms.eps_x + 4.0 * mu * terms.eps_l,
        terms,
    })
}

/// Tabular penalty surrogate
/// `rho0.V + (1/2mu) sum w x Z + (beta/2) sum w (x - Z)^2`, with
/// `Z = Z(V, h, x_k)`.
#[allow(clippy::too_many_arguments)]
pub fn penalty_surrogate_value(
    mdp: &TabularMdp,
    w: &WeightFn,
    v: &[f64],
    h: &[f64],
    x: &[f64],
    x_k: &[f64],
    mu: f64,
    beta: f64,
) -> f64 {
    let z = z_table(mdp, v, h, x_k, mu);
    let mut total = dot(mdp.rho0(), v);
    for ((&wi, &xi), &zi) in w.as_slice().iter().zip(x).zip(&z) {
        total += wi * (xi * zi / (2.0 * mu) + 0.5 * beta * (xi - zi).powi(2));
    }
    total
}

/// Gradient of [`penalty_surrogate_value`] in `(V, h, x)`.
#[allow(clippy::too_many_arguments)]
pub fn penalty_surrogate_grad(
    mdp: &TabularMdp,
    w: &WeightFn,
    v: &[f64],
    h: &[f64],
    x: &[f64],
    x_k: &[f64],
    mu: f64,
    beta: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let z = z_table(mdp, v, h, x_k, mu);
    let na = mdp.n_actions();
    let gamma = mdp.gamma();
    let mut gv = mdp.rho0().to_vec();
    let mut gh = vec![0.0; mdp.n_pairs()];
    let mut gx = vec![0.0; mdp.n_pairs()];
    for s in 0..mdp.n_states() {
        for a in 0..na {
            let i = s * na + a;
            let wi = w.as_slice()[i];
            gx[i] = wi * (z[i] / (2.0 * mu) + beta * (x[i] - z[i]));
            // d/dZ, then Z moves by mu per unit of h and mu (gamma P - e_s) in V
            let c = wi * (x[i] / (2.0 * mu) - beta * (x[i] - z[i])) * mu;
            gh[i] = c;
            gv[s] -= c;
            for (t, p) in mdp.next_dist(s, a).iter().enumerate() {
                gv[t] += c * gamma * p;
            }
        }
    }
    (gv, gh, gx)
}

/// `xi1 = 4 mu beta / (4 mu beta - 1)`, `xi2 = (4 mu beta - 2) / (4 mu beta - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingRatios {
    pub xi1: f64,
    pub xi2: f64,
    pub mu: f64,
    pub beta: f64,
}

impl ScalingRatios {
    pub fn new(mu: f64, beta: f64) -> Result<Self> {
        check_penalty(mu, beta)?;
        let q = 4.0 * mu * beta;
        Ok(Self {
            xi1: q / (q - 1.0),
            xi2: (q - 2.0) / (q - 1.0),
            mu,
            beta,
        })
    }
}

fn check_penalty(mu: f64, beta: f64) -> Result<()> {
    if !(mu > 0.0) {
        return Err(Error::Config(format!("mu must be positive, got {mu}")));
    }
    if !(beta > 1.0 / (4.0 * mu)) {
        return Err(Error::Config(format!("beta = {beta} must exceed 1/(4 mu) = {}", 1.0 / (4.0 * mu))));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingReport {
    pub ratios: ScalingRatios,
    /// `max |x_tilde - xi2 x_hat|`.
    pub x_deviation: f64,
    /// `max |Z_tilde - xi1 Z_hat|`.
    pub z_deviation: f64,
    pub x_tilde: Vec<f64>,
    pub x_hat: Vec<f64>,
    pub stationarity: f64,
    pub iterations: usize,
}

/// Compare the minimiser of the penalty surrogate with one exact ALM update,
/// both taken from the converged ALM multiplier.
pub fn scaling_ratio_check(mdp: &TabularMdp, w: &WeightFn, mu: f64, beta: f64, tol: f64) -> Result<ScalingReport> {
    check_penalty(mu, beta)?;
    let run = run_alm(mdp, w, mu, &InnerOptions::newton(1e-12), 1000, 1e-10)?;
    if !run.converged {
        return Err(Error::NoConvergence {
            solver: "ALM reference multiplier",
            iterations: run.history.len(),
            achieved: run.history.last().map_or(f64::NAN, |r| r.dual_residual),
            tol: 1e-10,
        });
    }
    scaling_ratio_check_at(mdp, w, &run.state.x, mu, beta, tol)
}

/// [`scaling_ratio_check`] from an explicit prior multiplier `x_k`.
pub fn scaling_ratio_check_at(
    mdp: &TabularMdp,
    w: &WeightFn,
    x_k: &[f64],
    mu: f64,
    beta: f64,
    tol: f64,
) -> Result<ScalingReport> {
    let ratios = ScalingRatios::new(mu, beta)?;
    check_len("x_k", x_k.len(), mdp.n_pairs())?;
    let exact = alm_inner_solve(mdp, w, x_k, mu, &InnerOptions::newton(tol.min(1e-12)), None)?;
    let z_hat = z_table(mdp, &exact.v, &exact.h, x_k, mu);
    let x_hat: Vec<f64> = z_hat.iter().map(|z| z.max(0.0)).collect();

    let (ns, np) = (mdp.n_states(), mdp.n_pairs());
    let split3 = |z: &[f64]| (z[..ns].to_vec(), z[ns..ns + np].to_vec(), z[ns + np..].to_vec());
    let lower: Vec<bool> = (0..ns + 2 * np).map(|i| i >= ns && i < ns + np).collect();
    let f = |z: &[f64]| {
        let (v, h, x) = split3(z);
        penalty_surrogate_value(mdp, w, &v, &h, &x, x_k, mu, beta)
    };
    let g = |z: &[f64]| {
        let (v, h, x) = split3(z);
        let (gv, gh, gx) = penalty_surrogate_grad(mdp, w, &v, &h, &x, x_k, mu, beta);
        [gv, gh, gx].concat()
    };
    let (z, iterations, stationarity) = projected_gradient(vec![0.0; ns + 2 * np], &lower, f, g, tol, 5_000_000)
        .map_err(|(it, stat)| Error::NoConvergence {
            solver: "penalty surrogate minimisation",
            iterations: it,
            achieved: stat,
            tol,
        })?;
    let (v, h, x_tilde) = split3(&z);
    let z_tilde = z_table(mdp, &v, &h, x_k, mu);
    Ok(ScalingReport {
        ratios,
        x_deviation: max_abs(x_tilde.iter().zip(&x_hat).map(|(a, b)| a - ratios.xi2 * b)),
        z_deviation: max_abs(z_tilde.iter().zip(&z_hat).map(|(a, b)| a - ratios.xi1 * b)),
        x_tilde,
        x_hat,
        stationarity,
        iterations,
    })
}

/// Random MDP where action 0 beats every other action by at least `gap`
/// in immediate reward, so the optimal action set is stable under moderate
/// changes of `V`.
pub fn dominated_action_mdp<R: Rng + ?Sized>(
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    gap: f64,
    rng: &mut R,
) -> Result<TabularMdp> {
    let base = TabularMdp::random(n_states, n_actions, gamma, rng)?;
    let mut reward = Vec::with_capacity(n_states * n_actions);
    for _ in 0..n_states {
        let best = rng.random::<f64>();
        reward.push(best);
        for _ in 1..n_actions {
            reward.push(best - gap - rng.random::<f64>());
        }
    }
    TabularMdp::new(
        n_states,
        n_actions,
        base.transitions().to_vec(),
        reward,
        base.rho0().to_vec(),
        gamma,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvexityProbe {
    /// Smallest `Q(d) / |d|_H^2` over the probes.
    pub min_quotient: f64,
    /// Smallest `Q(d) / sum w dx^2` over the probes.
    pub x_block_constant: f64,
    /// `(1/2mu)(1 - 1/(4 mu beta))`.
    pub x_block_bound: f64,
    pub n_probes: usize,
}

/// Quadratic part of the penalty surrogate along `(dv, dh, dx)`.
#[allow(clippy::too_many_arguments)]
pub fn surrogate_quadratic_form(
    mdp: &TabularMdp,
    w: &WeightFn,
    dv: &[f64],
    dh: &[f64],
    dx: &[f64],
    mu: f64,
    beta: f64,
) -> f64 {
    let na = mdp.n_actions();
    let mut q = 0.0;
    for s in 0..mdp.n_states() {
        for a in 0..na {
            let i = s * na + a;
            let dz = mu * (dh[i] + mdp.gamma() * mdp.expected_next(s, a, dv) - dv[s]);
            q += w.as_slice()[i] * (dx[i] * dz / (2.0 * mu) + 0.5 * beta * (dx[i] - dz).powi(2));
        }
    }
    q
}

fn h_norm_sq(mdp: &TabularMdp, w: &WeightFn, dv: &[f64], dh: &[f64], dx: &[f64]) -> f64 {
    let na = mdp.n_actions();
    (0..mdp.n_pairs())
        .map(|i| w.as_slice()[i] * (dv[i / na].powi(2) + dh[i].powi(2) + dx[i].powi(2)))
        .sum()
}

/// Random function-space probes of the surrogate's curvature on a small
/// random MDP. Half of the probes put the `h` direction at the minimiser of
/// `Q` for their `dx`, which is where the x-block bound is tight; one probe
/// is the null direction `V = c, h = (1 - gamma) c, x = 0`.
pub fn strong_convexity_probe<R: Rng + ?Sized>(mu: f64, beta: f64, n_probes: usize, rng: &mut R) -> Result<ConvexityProbe> {
    check_penalty(mu, beta)?;
    if n_probes == 0 {
        return Err(Error::Invalid("at least one probe is needed".into()));
    }
    let mdp = TabularMdp::random(3, 2, 0.9, rng)?;
    let w = WeightFn::for_mdp(&mdp);
    let (ns, np) = (mdp.n_states(), mdp.n_pairs());
    let normal = |rng: &mut R, n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng))
            .collect()
    };
    let mut min_quotient = f64::INFINITY;
    let mut x_block = f64::INFINITY;
    let tight = 1.0 - 1.0 / (2.0 * mu * beta);
    for k in 0..n_probes {
        let (dv, dh, dx) = if k == 0 {
            let c = 1.0 + rng.random::<f64>();
            (vec![c; ns], vec![(1.0 - mdp.gamma()) * c; np], vec![0.0; np])
        } else if k % 2 == 0 {
            let dx = normal(rng, np);
            let dh = dx.iter().map(|d| tight * d / mu).collect();
            (vec![0.0; ns], dh, dx)
        } else {
            (normal(rng, ns), normal(rng, np), normal(rng, np))
        };
        let q = surrogate_quadratic_form(&mdp, &w, &dv, &dh, &dx, mu, beta);
        min_quotient = min_quotient.min(q / h_norm_sq(&mdp, &w, &dv, &dh, &dx));
        let xn: f64 = w.as_slice().iter().zip(&dx).map(|(w, d)| w * d * d).sum();
        if xn > 0.0 {
            x_block = x_block.min(q / xn);
        }
    }
    Ok(ConvexityProbe {
        min_quotient,
        x_block_constant: x_block,
        x_block_bound: (1.0 - 1.0 / (4.0 * mu * beta)) / (2.0 * mu),
        n_probes,
    })
}

/// Trace of the sample covariance (`n - 1` denominator) of a stream of
/// gradient vectors; 0 for fewer than two samples.
pub fn trace_variance(samples: &[Vec<f64>]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return 0.0;
    }
    let dim = samples[0].len();
    let mut mean = vec![0.0; dim];
    for g in samples {
        for (m, x) in mean.iter_mut().zip(g) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let ss: f64 = samples
        .iter()
        .map(|g| g.iter().zip(&mean).map(|(x, m)| (x - m).powi(2)).sum::<f64>())
        .sum();
    ss / (n - 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceRecord {
    pub step: usize,
    pub unbias: f64,
    pub bias: f64,
}

#[derive(Debug, Clone)]
pub struct VarianceAblation {
    pub records: Vec<VarianceRecord>,
    pub log: TrainingLog,
}

impl VarianceAblation {
    pub fn mean_unbias(&self) -> f64 {
        mean(self.records.iter().map(|r| r.unbias))
    }

    pub fn mean_bias(&self) -> f64 {
        mean(self.records.iter().map(|r| r.bias))
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut total, mut n) = (0.0, 0usize);
    for x in xs {
        total += x;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        total / n as f64
    }
}

/// Value-head minibatch gradient `mean(grad V(s0) + c (disc grad V(s') - grad V(s)))`.
fn value_head_grad(bundle: &NetBundle, batch: &[TransitionTuple], initial: &[usize], coef: &[f64], gamma: f64) -> Vec<f64> {
    let mut g = bundle.zero_grad();
    for ((t, &s0), &c) in batch.iter().zip(initial).zip(coef) {
        bundle.value_grad(s0, 1.0, &mut g);
        bundle.value_grad(t.s_next, c * t.discount(gamma), &mut g);
        bundle.value_grad(t.s, -c, &mut g);
    }
    let n = batch.len() as f64;
    g.v.iter().map(|x| x / n).collect()
}

/// Variance of the value-head gradient with the model's expected `Z(s,a)`
/// as coefficient (un-bias) against the sampled `z(s,a,s')` (bias), at
/// every evaluation point of a SCAL run.
pub fn grad_variance_ablation(env: &Environment, cfg: &ScalConfig, n_samples: usize) -> Result<VarianceAblation> {
    if cfg.lookahead != 1 {
        return Err(Error::Config("the variance ablation needs one-step tuples (lookahead = 1)".into()));
    }
    if n_samples < 2 {
        warn!("n_samples = {n_samples}: a single draw has no spread, variances are reported as 0");
    }
    let model = env.model();
    let gamma = env.gamma();
    let mut probe_rng = stream(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut records = Vec::new();
    let out = scal_train_observed(env, cfg, |step, bundle, buffer| {
        if buffer.len() < cfg.batch {
            return Ok(());
        }
        let mut rng: Stream = split(&mut probe_rng);
        let mut g1 = Vec::with_capacity(n_samples);
        let mut g2 = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let batch: Vec<TransitionTuple> = (0..cfg.batch)
                .map(|_| *buffer.get(rng.random_range(0..buffer.len())))
                .collect();
            let initial = buffer.sample_initial(cfg.batch, &mut rng)?;
            let expected: Vec<f64> = batch
                .iter()
                .map(|t| {
                    let ev: f64 = model
                        .next_dist(t.s, t.a)
                        .iter()
                        .enumerate()
                        .map(|(s2, p)| p * bundle.value_target(s2))
                        .sum();
                    bundle.x_target(t.s, t.a)
                        + cfg.mu * (bundle.slack(t.s, t.a) + model.reward(t.s, t.a) + gamma * ev - bundle.value(t.s))
                })
                .collect();
            let sampled: Vec<f64> = batch.iter().map(|t| z_target(bundle, t, cfg.mu, gamma)).collect();
            g1.push(value_head_grad(bundle, &batch, &initial, &expected, gamma));
            g2.push(value_head_grad(bundle, &batch, &initial, &sampled, gamma));
        }
        records.push(VarianceRecord {
            step,
            unbias: trace_variance(&g1),
            bias: trace_variance(&g2),
        });
        Ok(())
    })?;
    Ok(VarianceAblation { records, log: out.log })
}

/// Settings for [`ntk_residual_track`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NtkConfig {
    pub mu: f64,
    pub beta: f64,
    pub width: usize,
    /// Radius of the parameter ball around the initialisation.
    pub radius: f64,
    /// Gradient step on the parameters.
    pub step: f64,
    /// Outer rounds `K`.
    pub rounds: usize,
    /// Projected steps averaged per round `T`.
    pub inner_steps: usize,
    pub seed: u64,
}

impl Default for NtkConfig {
    fn default() -> Self {
        Self {
            mu: 1.0,
            beta: 30.0,
            width: 64,
            radius: 50.0,
            step: 0.2,
            rounds: 20,
            inner_steps: 1000,
            seed: 0,
        }
    }
}

impl NtkConfig {
    /// Take `mu`, `beta`, `width`, `seed` and the ball radius from a SCAL
    /// configuration; the radius falls back to the default when unset.
    pub fn from_scal(cfg: &ScalConfig) -> Self {
        Self {
            mu: cfg.mu,
            beta: cfg.beta,
            width: cfg.width,
            radius: cfg.ntk_radius.unwrap_or(Self::default().radius),
            seed: cfg.seed,
            ..Self::default()
        }
    }
}

struct NtkNets {
    v: TwoLayerNet,
    h: TwoLayerNet,
    x: TwoLayerNet,
}

impl NtkNets {
    fn tables(&self, states: &[Vec<(usize, f64)>], pairs: &[Vec<(usize, f64)>]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        (
            states.iter().map(|s| self.v.forward(s)).collect(),
            pairs.iter().map(|p| self.h.forward(p)).collect(),
            pairs.iter().map(|p| self.x.forward(p)).collect(),
        )
    }
}

/// Projected and averaged gradient descent on the penalty surrogate with
/// plain two-layer ReLU nets for `V`, `h` (nonnegative output) and `x`.
/// Entry `k` is `E_w (x - T x)^2` for the multiplier after round `k + 1`.
pub fn ntk_residual_track(mdp: &TabularMdp, cfg: &NtkConfig) -> Result<Vec<f64>> {
    check_penalty(cfg.mu, cfg.beta)?;
    if cfg.rounds == 0 || cfg.inner_steps == 0 || !(cfg.step > 0.0) || !(cfg.radius >= 0.0) {
        return Err(Error::Config("rounds, inner steps and step must be positive; radius nonnegative".into()));
    }
    let w = WeightFn::for_mdp(mdp);
    let (ns, np) = (mdp.n_states(), mdp.n_pairs());
    let one_hot = |n: usize| -> Vec<Vec<(usize, f64)>> {
        (0..n)
            .map(|i| {
                let mut e = vec![0.0; n];
                e[i] = 1.0;
                sparse(&e)
            })
            .collect()
    };
    let (states, pairs) = (one_hot(ns), one_hot(np));
    let mut rng = stream(cfg.seed);
    let mut nets = NtkNets {
        v: TwoLayerNet::init(cfg.width, ns, &mut rng)?,
        h: TwoLayerNet::init_nonnegative(cfg.width, np, &mut rng)?,
        x: TwoLayerNet::init(cfg.width, np, &mut rng)?,
    };
    let mut residuals = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let x_k: Vec<f64> = pairs.iter().map(|p| nets.x.forward(p)).collect();
        let mut sum_v = vec![0.0; nets.v.n_params()];
        let mut sum_h = vec![0.0; nets.h.n_params()];
        let mut sum_x = vec![0.0; nets.x.n_params()];
        for _ in 0..cfg.inner_steps {
            let (v, h, x) = nets.tables(&states, &pairs);
            let (gv, gh, gx) = penalty_surrogate_grad(mdp, &w, &v, &h, &x, &x_k, cfg.mu, cfg.beta);
            for (net, table, inputs, sum, slack) in [
                (&mut nets.v, &gv, &states, &mut sum_v, false),
                (&mut nets.h, &gh, &pairs, &mut sum_h, true),
                (&mut nets.x, &gx, &pairs, &mut sum_x, false),
            ] {
                let mut g = vec![0.0; net.n_params()];
                for (input, &c) in inputs.iter().zip(table) {
                    net.accumulate_grad(input, c, &mut g);
                }
                for (p, gi) in net.weights_mut().iter_mut().zip(&g) {
                    *p -= cfg.step * gi;
                }
                if slack {
                    net.clamp_nonnegative();
                }
                net.project_ball(cfg.radius);
                for (s, p) in sum.iter_mut().zip(net.weights()) {
                    *s += p;
                }
            }
        }
        let t = cfg.inner_steps as f64;
        for (net, sum) in [(&mut nets.v, &sum_v), (&mut nets.h, &sum_h), (&mut nets.x, &sum_x)] {
            for (p, s) in net.weights_mut().iter_mut().zip(sum) {
                *p = s / t;
            }
        }
        let x: Vec<f64> = pairs.iter().map(|p| nets.x.forward(p)).collect();
        residuals.push(prox_residual(mdp, &w, &x, cfg.mu, EXACT_TOL)?);
    }
    Ok(residuals)
}

/// Running minimum of a series.
pub fn best_so_far(series: &[f64]) -> Vec<f64> {
    let mut best = f64::INFINITY;
    series
        .iter()
        .map(|&r| {
            best = best.min(r);
            best
        })
        .collect()
}
