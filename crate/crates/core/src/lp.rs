//! Exact tabular machinery for the LP view of a discounted MDP.
//!
//! The primal LP is `min rho0.V  s.t.  V(s) >= r(s,a) + gamma E[V(s')]`,
//! written with a slack `h >= 0` as an equality. Its multipliers `x(s,a)`
//! carry a weight `w(s,a)`. Everything here works on full tables and is the
//! ground truth the sampled solvers are checked against.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::mdp::{argmax, bellman_operator, dot, max_abs, Policy, TabularMdp};

/// A probability table `w(s,a)` over state-action pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFn {
    n_actions: usize,
    w: Vec<f64>,
}

impl WeightFn {
    pub fn new(n_states: usize, n_actions: usize, w: Vec<f64>) -> Result<Self> {
        check_len("weight table", w.len(), n_states * n_actions)?;
        if w.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::Invalid("weights must be nonnegative".into()));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!("weights sum to {total}")));
        }
        Ok(Self { n_actions, w })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let n = n_states * n_actions;
        Self {
            n_actions,
            w: vec![1.0 / n as f64; n],
        }
    }

    pub fn for_mdp(mdp: &TabularMdp) -> Self {
        Self::uniform(mdp.n_states(), mdp.n_actions())
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.w[s * self.n_actions + a]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// Iterate bundle of the classic ALM: value `v`, slack `h >= 0`, multiplier
/// `x >= 0` (all `(s,a)` tables row-major), penalty `mu`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlmState {
    pub v: Vec<f64>,
    pub h: Vec<f64>,
    pub x: Vec<f64>,
    pub mu: f64,
    pub iteration: usize,
    /// Largest negative multiplier value zeroed by the last update.
    pub last_clamp: f64,
}

impl AlmState {
    pub fn zeros(mdp: &TabularMdp, mu: f64) -> Self {
        Self {
            v: vec![0.0; mdp.n_states()],
            h: vec![0.0; mdp.n_pairs()],
            x: vec![0.0; mdp.n_pairs()],
            mu,
            iteration: 0,
            last_clamp: 0.0,
        }
    }

    pub fn validate(&self, mdp: &TabularMdp) -> Result<()> {
        check_len("V", self.v.len(), mdp.n_states())?;
        check_len("h", self.h.len(), mdp.n_pairs())?;
        check_len("x", self.x.len(), mdp.n_pairs())?;
        if !(self.mu > 0.0) {
            return Err(Error::Invalid(format!("penalty mu must be positive, got {}", self.mu)));
        }
        Ok(())
    }
}

/// Sampled Z-value `x + mu (h + r + disc * V(s') - V(s))`.
///
/// `disc` is `gamma` for one-step tuples and `gamma^steps` for compressed
/// multi-step tuples.
#[inline]
pub fn z_sample(x: f64, h: f64, r: f64, disc: f64, v_next: f64, v_s: f64, mu: f64) -> f64 {
    x + mu * (h + r + disc * v_next - v_s)
}

/// Z-function: the conditional expectation of [`z_sample`] over `s'`.
pub fn z_function(mdp: &TabularMdp, state: &AlmState, s: usize, a: usize) -> f64 {
    let i = s * mdp.n_actions() + a;
    z_sample(
        state.x[i],
        state.h[i],
        mdp.reward(s, a),
        mdp.gamma(),
        mdp.expected_next(s, a, &state.v),
        state.v[s],
        state.mu,
    )
}

/// Z over every pair, evaluated at `(v, h)` with prior multiplier `x`.
pub fn z_table(mdp: &TabularMdp, v: &[f64], h: &[f64], x: &[f64], mu: f64) -> Vec<f64> {
    let na = mdp.n_actions();
    let mut z = Vec::with_capacity(mdp.n_pairs());
    for s in 0..mdp.n_states() {
        for a in 0..na {
            let i = s * na + a;
            z.push(x[i] + mu * (h[i] + mdp.q_value(s, a, v) - v[s]));
        }
    }
    z
}

/// Weighted augmented Lagrangian `rho0.V + (1/2mu) sum w Z^2`.
pub fn augmented_lagrangian_value(mdp: &TabularMdp, w: &WeightFn, state: &AlmState) -> Result<f64> {
    state.validate(mdp)?;
    check_len("weight table", w.len(), mdp.n_pairs())?;
    Ok(lagrangian(mdp, w, &state.v, &state.h, &state.x, state.mu))
}

pub(crate) fn lagrangian(mdp: &TabularMdp, w: &WeightFn, v: &[f64], h: &[f64], x: &[f64], mu: f64) -> f64 {
    let z = z_table(mdp, v, h, x, mu);
    let penalty: f64 = z.iter().zip(w.as_slice()).map(|(z, w)| w * z * z).sum();
    dot(mdp.rho0(), v) + penalty / (2.0 * mu)
}

/// Gradient of the augmented Lagrangian in `(V, h)`.
pub(crate) fn lagrangian_grad(
    mdp: &TabularMdp,
    w: &WeightFn,
    v: &[f64],
    h: &[f64],
    x: &[f64],
    mu: f64,
) -> (Vec<f64>, Vec<f64>) {
    let z = z_table(mdp, v, h, x, mu);
    let na = mdp.n_actions();
    let gamma = mdp.gamma();
    let mut gv = mdp.rho0().to_vec();
    let mut gh = vec![0.0; mdp.n_pairs()];
    for s in 0..mdp.n_states() {
        for a in 0..na {
            let i = s * na + a;
            let c = w.as_slice()[i] * z[i];
            gh[i] = c;
            gv[s] -= c;
            for (t, p) in mdp.next_dist(s, a).iter().enumerate() {
                gv[t] += c * gamma * p;
            }
        }
    }
    (gv, gh)
}

/// Inner minimisation strategy for `min_{V, h >= 0} L_mu(V, h, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InnerMethod {
    /// Eliminates `h` in closed form and runs a regularised semismooth
    /// Newton method on the remaining piecewise-quadratic problem in `V`.
    Newton,
    /// Accelerated projected gradient on `(V, h)` with backtracking.
    ProjectedGradient,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub method: InnerMethod,
}

impl InnerOptions {
    pub fn newton(tol: f64) -> Self {
        Self {
            tol,
            max_iter: 500,
            method: InnerMethod::Newton,
        }
    }

    pub fn projected_gradient(tol: f64) -> Self {
        Self {
            tol,
            max_iter: 2_000_000,
            method: InnerMethod::ProjectedGradient,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolution {
    pub v: Vec<f64>,
    pub h: Vec<f64>,
    pub iterations: usize,
    /// Infinity norm of the projected gradient at `(v, h)`.
    pub stationarity: f64,
}

/// Projected-gradient stationarity `||z - P(z - grad)||_inf` for the
/// `(V free, h >= 0)` problem.
pub fn stationarity(mdp: &TabularMdp, w: &WeightFn, v: &[f64], h: &[f64], x: &[f64], mu: f64) -> f64 {
    let (gv, gh) = lagrangian_grad(mdp, w, v, h, x, mu);
    let sv = max_abs(gv.iter().copied());
    let sh = max_abs(h.iter().zip(&gh).map(|(&hi, &gi)| hi - (hi - gi).max(0.0)));
    sv.max(sh)
}

/// Approximately solve `min_{V, h >= 0} L_mu(V, h, x)`.
pub fn alm_inner_solve(
    mdp: &TabularMdp,
    w: &WeightFn,
    x: &[f64],
    mu: f64,
    opts: &InnerOptions,
    warm_v: Option<&[f64]>,
) -> Result<InnerSolution> {
    check_len("x", x.len(), mdp.n_pairs())?;
    check_len("weight table", w.len(), mdp.n_pairs())?;
    if !(mu > 0.0) {
        return Err(Error::Invalid("penalty mu must be positive".into()));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::Invalid("inner tolerance must be positive".into()));
    }
    let v0 = match warm_v {
        Some(v) => {
            check_len("warm start", v.len(), mdp.n_states())?;
            v.to_vec()
        }
        None => vec![0.0; mdp.n_states()],
    };
    match opts.method {
        InnerMethod::Newton => newton_inner(mdp, w, x, mu, opts, v0),
        InnerMethod::ProjectedGradient => pg_inner(mdp, w, x, mu, opts, v0),
    }
}

/// Reduced objective `rho0.V + (1/2mu) sum w [u]_+^2` with
/// `u = x + mu (r + gamma P V - V)`; its gradient and active-set Hessian.
struct Reduced<'a> {
    mdp: &'a TabularMdp,
    w: &'a WeightFn,
    x: &'a [f64],
    mu: f64,
}

impl Reduced<'_> {
    fn residual(&self, v: &[f64]) -> Vec<f64> {
        let zeros = vec![0.0; self.mdp.n_pairs()];
        z_table(self.mdp, v, &zeros, self.x, self.mu)
    }

    fn value(&self, v: &[f64]) -> f64 {
        let u = self.residual(v);
        let pen: f64 = u
            .iter()
            .zip(self.w.as_slice())
            .map(|(u, w)| {
                let p = u.max(0.0);
                w * p * p
            })
            .sum();
        dot(self.mdp.rho0(), v) + pen / (2.0 * self.mu)
    }

    fn grad(&self, u: &[f64]) -> Vec<f64> {
        let mdp = self.mdp;
        let na = mdp.n_actions();
        let mut g = mdp.rho0().to_vec();
        for s in 0..mdp.n_states() {
            for a in 0..na {
                let i = s * na + a;
                let c = self.w.as_slice()[i] * u[i].max(0.0);
                if c == 0.0 {
                    continue;
                }
                g[s] -= c;
                for (t, p) in mdp.next_dist(s, a).iter().enumerate() {
                    g[t] += c * mdp.gamma() * p;
                }
            }
        }
        g
    }

    fn hessian(&self, u: &[f64]) -> nalgebra::DMatrix<f64> {
        let mdp = self.mdp;
        let n = mdp.n_states();
        let na = mdp.n_actions();
        let mut hess = nalgebra::DMatrix::<f64>::zeros(n, n);
        let mut b = vec![0.0; n];
        for s in 0..n {
            for a in 0..na {
                let i = s * na + a;
                if u[i] <= 0.0 {
                    continue;
                }
                for (t, p) in mdp.next_dist(s, a).iter().enumerate() {
                    b[t] = mdp.gamma() * p;
                }
                b[s] -= 1.0;
                let c = self.mu * self.w.as_slice()[i];
                for p in 0..n {
                    if b[p] == 0.0 {
                        continue;
                    }
                    for q in 0..n {
                        hess[(p, q)] += c * b[p] * b[q];
                    }
                }
            }
        }
        hess
    }

    fn slack(&self, u: &[f64]) -> Vec<f64> {
        u.iter().map(|&u| (-u).max(0.0) / self.mu).collect()
    }
}

fn newton_inner(
    mdp: &TabularMdp,
    w: &WeightFn,
    x: &[f64],
    mu: f64,
    opts: &InnerOptions,
    mut v: Vec<f64>,
) -> Result<InnerSolution> {
    let red = Reduced { mdp, w, x, mu };
    let n = mdp.n_states();
    let mut u = red.residual(&v);
    let mut g = red.grad(&u);
    let mut f = red.value(&v);
    for it in 0..opts.max_iter {
        let gnorm = max_abs(g.iter().copied());
        if gnorm <= opts.tol {
            let h = red.slack(&u);
            return Ok(InnerSolution {
                v,
                h,
                iterations: it,
                stationarity: gnorm,
            });
        }
        // regularisation proportional to the gradient keeps the step bounded
        // when the active set leaves some state without curvature
        let mut hess = red.hessian(&u);
        let reg = gnorm.min(1.0) * 1e-3 + 1e-14;
        for i in 0..n {
            hess[(i, i)] += reg;
        }
        let rhs = nalgebra::DVector::from_iterator(n, g.iter().map(|gi| -gi));
        let mut d: Vec<f64> = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&rhs).iter().copied().collect(),
            None => g.iter().map(|gi| -gi).collect(),
        };
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            d = g.iter().map(|gi| -gi).collect();
            slope = -dot(&g, &g);
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..80 {
            let trial: Vec<f64> = v.iter().zip(&d).map(|(vi, di)| vi + step * di).collect();
            let ft = red.value(&trial);
            let ut = red.residual(&trial);
            let gt = red.grad(&ut);
            // near the solution the decrease in f drops below rounding, so a
            // clear drop in the gradient norm also counts as progress
            let armijo = ft <= f + 1e-4 * step * slope;
            let flat = ft <= f + 1e-12 * f.abs().max(1.0);
            if armijo || (flat && max_abs(gt.iter().copied()) < 0.9 * gnorm) {
                v = trial;
                f = ft;
                u = ut;
                g = gt;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let achieved = max_abs(g.iter().copied());
    if achieved <= opts.tol {
        let h = red.slack(&u);
        return Ok(InnerSolution {
            v,
            h,
            iterations: opts.max_iter,
            stationarity: achieved,
        });
    }
    Err(Error::NoConvergence {
        solver: "newton inner solve",
        iterations: opts.max_iter,
        achieved,
        tol: opts.tol,
    })
}

fn pg_inner(
    mdp: &TabularMdp,
    w: &WeightFn,
    x: &[f64],
    mu: f64,
    opts: &InnerOptions,
    v0: Vec<f64>,
) -> Result<InnerSolution> {
    let n = mdp.n_states();
    let na = mdp.n_pairs();
    // start h at its optimal value for the warm-start V
    let red = Reduced { mdp, w, x, mu };
    let h0 = red.slack(&red.residual(&v0));
    let mut z0 = v0;
    z0.extend(h0);
    let lower: Vec<bool> = (0..n + na).map(|i| i >= n).collect();
    let objective = |z: &[f64]| {
        let (v, h) = z.split_at(n);
        lagrangian(mdp, w, v, h, x, mu)
    };
    let gradient = |z: &[f64]| {
        let (v, h) = z.split_at(n);
        let (mut gv, gh) = lagrangian_grad(mdp, w, v, h, x, mu);
        gv.extend(gh);
        gv
    };
    let out = projected_gradient(z0, &lower, objective, gradient, opts.tol, opts.max_iter);
    match out {
        Ok((z, iterations, stat)) => {
            let (v, h) = z.split_at(n);
            Ok(InnerSolution {
                v: v.to_vec(),
                h: h.to_vec(),
                iterations,
                stationarity: stat,
            })
        }
        Err((iterations, achieved)) => Err(Error::NoConvergence {
            solver: "projected-gradient inner solve",
            iterations,
            achieved,
            tol: opts.tol,
        }),
    }
}

/// Accelerated projected gradient (FISTA with backtracking and gradient
/// restart) for smooth objectives where coordinates flagged in `lower` are
/// constrained to be nonnegative.
///
/// Returns `(z, iterations, stationarity)` or `(iterations, stationarity)`
/// when the cap is hit. Stationarity is `||z - P(z - grad)||_inf`.
pub(crate) fn projected_gradient(
    z0: Vec<f64>,
    lower: &[bool],
    f: impl Fn(&[f64]) -> f64,
    grad: impl Fn(&[f64]) -> Vec<f64>,
    tol: f64,
    max_iter: usize,
) -> std::result::Result<(Vec<f64>, usize, f64), (usize, f64)> {
    let project = |z: &mut [f64]| {
        for (zi, &lo) in z.iter_mut().zip(lower) {
            if lo && *zi < 0.0 {
                *zi = 0.0;
            }
        }
    };
    let measure = |z: &[f64], g: &[f64]| {
        max_abs(z.iter().zip(g).zip(lower).map(|((&zi, &gi), &lo)| {
            if lo {
                zi - (zi - gi).max(0.0)
            } else {
                gi
            }
        }))
    };
    let mut z = z0;
    project(&mut z);
    let mut y = z.clone();
    let mut t = 1.0f64;
    let mut lip = 1.0f64;
    let mut stat = f64::INFINITY;
    for it in 0..max_iter {
        let gz = grad(&z);
        stat = measure(&z, &gz);
        if stat <= tol {
            return Ok((z, it, stat));
        }
        let gy = grad(&y);
        let fy = f(&y);
        // backtracking on the local Lipschitz estimate
        let mut next;
        loop {
            next = y.iter().zip(&gy).map(|(yi, gi)| yi - gi / lip).collect::<Vec<_>>();
            project(&mut next);
            let diff: Vec<f64> = next.iter().zip(&y).map(|(a, b)| a - b).collect();
            let quad = fy + dot(&gy, &diff) + 0.5 * lip * dot(&diff, &diff);
            let fn_ = f(&next);
            if fn_ <= quad + 1e-12 * fy.abs().max(1.0) || lip > 1e300 {
                break;
            }
            lip *= 2.0;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let step: Vec<f64> = next.iter().zip(&z).map(|(a, b)| a - b).collect();
        // restart momentum when it points uphill
        let uphill = dot(&gy, &step) > 0.0;
        let beta = if uphill { 0.0 } else { (t - 1.0) / t_next };
        y = next.iter().zip(&step).map(|(n, s)| n + beta * s).collect();
        project(&mut y);
        z = next;
        t = if uphill { 1.0 } else { t_next };
        lip *= 0.9;
    }
    Err((max_iter, stat))
}

/// One classic ALM iteration: minimise `L_mu(., ., x)` then set `x <- Z`.
///
/// Negative multiplier entries left by an inexact inner solve are clamped to
/// zero and the largest clamp is recorded in `last_clamp`.
pub fn alm_iterate(mdp: &TabularMdp, w: &WeightFn, state: &AlmState, opts: &InnerOptions) -> Result<AlmState> {
    state.validate(mdp)?;
    let sol = alm_inner_solve(mdp, w, &state.x, state.mu, opts, Some(&state.v))?;
    let z = z_table(mdp, &sol.v, &sol.h, &state.x, state.mu);
    let mut clamp = 0.0f64;
    let x: Vec<f64> = z
        .into_iter()
        .map(|zi| {
            if zi < 0.0 {
                clamp = clamp.max(-zi);
                0.0
            } else {
                zi
            }
        })
        .collect();
    Ok(AlmState {
        v: sol.v,
        h: sol.h,
        x,
        mu: state.mu,
        iteration: state.iteration + 1,
        last_clamp: clamp,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlmRecord {
    pub iteration: usize,
    pub lagrangian: f64,
    pub dual_residual: f64,
    pub multiplier_change: f64,
    pub mass: f64,
    pub inner_clamp: f64,
}

#[derive(Debug, Clone)]
pub struct AlmRun {
    pub state: AlmState,
    pub history: Vec<AlmRecord>,
    pub converged: bool,
}

/// Run ALM from zero until the dual residual and the primal residual
/// `||x^{k+1} - x^k||_inf / mu` both drop below `tol`, or `max_outer`
/// iterations.
pub fn run_alm(
    mdp: &TabularMdp,
    w: &WeightFn,
    mu: f64,
    opts: &InnerOptions,
    max_outer: usize,
    tol: f64,
) -> Result<AlmRun> {
    let mut state = AlmState::zeros(mdp, mu);
    let mut history = Vec::new();
    for _ in 0..max_outer {
        let next = alm_iterate(mdp, w, &state, opts)?;
        let (_, dual) = dual_residuals(mdp, w, &next.x)?;
        let change = max_abs(next.x.iter().zip(&state.x).map(|(a, b)| a - b));
        let mass: f64 = next.x.iter().zip(w.as_slice()).map(|(x, w)| x * w).sum();
        history.push(AlmRecord {
            iteration: next.iteration,
            lagrangian: lagrangian(mdp, w, &next.v, &next.h, &state.x, mu),
            dual_residual: dual,
            multiplier_change: change,
            mass,
            inner_clamp: next.last_clamp,
        });
        state = next;
        if dual <= tol && change <= tol * mu {
            return Ok(AlmRun {
                state,
                history,
                converged: true,
            });
        }
    }
    Ok(AlmRun {
        state,
        history,
        converged: false,
    })
}

/// Fixed-point iteration of the Bellman operator from zero until
/// `||TV - V||_inf <= tol`.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<Vec<f64>> {
    if !(tol > 0.0) {
        return Err(Error::Invalid("value-iteration tolerance must be positive".into()));
    }
    let mut v = vec![0.0; mdp.n_states()];
    let cap = 10_000_000usize;
    for _ in 0..cap {
        let tv = bellman_operator(mdp, &v)?;
        let gap = max_abs(tv.iter().zip(&v).map(|(a, b)| a - b));
        if gap <= tol {
            return Ok(v);
        }
        v = tv;
    }
    Err(Error::NoConvergence {
        solver: "value iteration",
        iterations: cap,
        achieved: f64::NAN,
        tol,
    })
}

/// Deterministic policy maximising `r + gamma E[V(s')]`, ties to the lowest
/// action index.
pub fn greedy_policy(mdp: &TabularMdp, v: &[f64]) -> Result<Policy> {
    let q = mdp.q_values(v)?;
    let actions: Vec<usize> = q.chunks(mdp.n_actions()).map(argmax).collect();
    Policy::deterministic(mdp.n_actions(), &actions)
}

/// Per-state residual of the weighted dual flow constraint,
/// `sum_{s,a} (delta_{s'}(s) - gamma P(s'|s,a)) w x - rho0(s')`, and its
/// infinity norm.
pub fn dual_residuals(mdp: &TabularMdp, w: &WeightFn, x: &[f64]) -> Result<(Vec<f64>, f64)> {
    check_len("x", x.len(), mdp.n_pairs())?;
    check_len("weight table", w.len(), mdp.n_pairs())?;
    let na = mdp.n_actions();
    let mut res: Vec<f64> = mdp.rho0().iter().map(|p| -p).collect();
    for s in 0..mdp.n_states() {
        for a in 0..na {
            let i = s * na + a;
            let wx = w.as_slice()[i] * x[i];
            if wx == 0.0 {
                continue;
            }
            res[s] += wx;
            for (t, p) in mdp.next_dist(s, a).iter().enumerate() {
                res[t] -= mdp.gamma() * p * wx;
            }
        }
    }
    let norm = max_abs(res.iter().copied());
    Ok((res, norm))
}

/// `pi(a|s) = w x / sum_a' w x`; states without mass get the uniform row.
pub fn policy_from_multiplier(w: &WeightFn, x: &[f64]) -> Result<Policy> {
    check_len("x", x.len(), w.len())?;
    let na = w.n_actions;
    let ns = x.len() / na;
    let mut probs = Vec::with_capacity(x.len());
    for s in 0..ns {
        let mass: Vec<f64> = (0..na).map(|a| (w.get(s, a) * x[s * na + a]).max(0.0)).collect();
        let total: f64 = mass.iter().sum();
        if total > 0.0 && total.is_finite() {
            probs.extend(mass.iter().map(|m| m / total));
        } else {
            probs.extend(std::iter::repeat_n(1.0 / na as f64, na));
        }
    }
    Policy::from_probs(ns, na, probs)
}

/// Infinity norms of the three blocks of the proximal-LP KKT system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KktReport {
    /// `x - [x_prev + mu (h + r + gamma P V - V)]`.
    pub multiplier_update: f64,
    /// Dual flow-constraint residual.
    pub dual_feasibility: f64,
    /// Largest violation of `x >= 0`, `h >= 0`.
    pub nonnegativity: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.multiplier_update.max(self.dual_feasibility).max(self.nonnegativity)
    }
}

pub fn kkt_check(
    mdp: &TabularMdp,
    w: &WeightFn,
    v: &[f64],
    h: &[f64],
    x: &[f64],
    x_prev: &[f64],
    mu: f64,
) -> Result<KktReport> {
    check_len("V", v.len(), mdp.n_states())?;
    check_len("h", h.len(), mdp.n_pairs())?;
    check_len("x_prev", x_prev.len(), mdp.n_pairs())?;
    let z = z_table(mdp, v, h, x_prev, mu);
    let (_, dual) = dual_residuals(mdp, w, x)?;
    let update = max_abs(x.iter().zip(&z).map(|(a, b)| a - b));
    let neg = x.iter().chain(h).fold(0.0f64, |m, &v| m.max(-v));
    Ok(KktReport {
        multiplier_update: update,
        dual_feasibility: dual,
        nonnegativity: neg,
    })
}

/// Serializable summary of the exact solution of one MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub v_star: Vec<f64>,
    pub greedy_actions: Vec<usize>,
    pub x_star: Vec<f64>,
    pub bellman_residual: f64,
    pub dual_residual: f64,
    pub optimal_return: f64,
    pub alm_iterations: usize,
}

/// Value iteration plus a full ALM solve, packaged for the report file.
pub fn oracle_report(mdp: &TabularMdp, tol: f64, mu: f64, max_outer: usize) -> Result<OracleReport> {
    let v = value_iteration(mdp, tol)?;
    let tv = bellman_operator(mdp, &v)?;
    let bellman = max_abs(tv.iter().zip(&v).map(|(a, b)| a - b));
    let pi = greedy_policy(mdp, &v)?;
    let w = WeightFn::for_mdp(mdp);
    let run = run_alm(mdp, &w, mu, &InnerOptions::newton(tol.min(1e-9)), max_outer, tol.max(1e-9))?;
    let (_, dual) = dual_residuals(mdp, &w, &run.state.x)?;
    Ok(OracleReport {
        n_states: mdp.n_states(),
        n_actions: mdp.n_actions(),
        gamma: mdp.gamma(),
        optimal_return: mdp.policy_return(&pi)?,
        greedy_actions: pi.argmax_actions(),
        v_star: v,
        x_star: run.state.x,
        bellman_residual: bellman,
        dual_residual: dual,
        alm_iterations: run.history.len(),
    })
}
