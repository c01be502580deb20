//! Finite discounted MDPs: exact Bellman machinery, model-free sampling,
//! trajectory generation and multi-step reward compression.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{check_len, Error, Result};
use crate::rng::categorical;

const STOCHASTIC_TOL: f64 = 1e-12;

/// Explicit finite MDP `(S, A, P, r, rho0, gamma)`.
///
/// `transition` is stored row-major over `(s, a, s')` and `reward` over
/// `(s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    rho0: Vec<f64>,
    gamma: f64,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        rho0: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Invalid("an MDP needs at least one state and one action".into()));
        }
        check_len("transition", transition.len(), n_states * n_actions * n_states)?;
        check_len("reward", reward.len(), n_states * n_actions)?;
        check_len("rho0", rho0.len(), n_states)?;
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Invalid(format!("discount must lie in (0, 1), got {gamma}")));
        }
        if let Some(r) = reward.iter().find(|r| !r.is_finite()) {
            return Err(Error::Invalid(format!("non-finite reward {r}")));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = &transition[(s * n_actions + a) * n_states..][..n_states];
                if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                    return Err(Error::Invalid(format!("negative transition probability at ({s}, {a})")));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(Error::Invalid(format!(
                        "transition row ({s}, {a}) sums to {total}"
                    )));
                }
            }
        }
        if rho0.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::Invalid("negative initial-state probability".into()));
        }
        let total: f64 = rho0.iter().sum();
        if (total - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::Invalid(format!("rho0 sums to {total}")));
        }
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            rho0,
            gamma,
        })
    }

    /// Random dense MDP with uniform `rho0` and rewards in `[0, 1)`.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, gamma: f64, rng: &mut R) -> Result<Self> {
        let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            let row: Vec<f64> = (0..n_states).map(|_| rng.random::<f64>() + 1e-3).collect();
            let total: f64 = row.iter().sum();
            transition.extend(row.iter().map(|p| p / total));
        }
        renormalize_rows(&mut transition, n_states);
        let reward = (0..n_states * n_actions).map(|_| rng.random::<f64>()).collect();
        let rho0 = vec![1.0 / n_states as f64; n_states];
        Self::new(n_states, n_actions, transition, reward, rho0, gamma)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn rho0(&self) -> &[f64] {
        &self.rho0
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    pub fn transitions(&self) -> &[f64] {
        &self.transition
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    /// Next-state distribution `P(. | s, a)`.
    #[inline]
    pub fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    /// `sum_{s'} P(s'|s,a) v(s')`.
    #[inline]
    pub fn expected_next(&self, s: usize, a: usize, v: &[f64]) -> f64 {
        self.next_dist(s, a).iter().zip(v).map(|(p, x)| p * x).sum()
    }

    /// `r(s,a) + gamma * E[v(s')]`.
    #[inline]
    pub fn q_value(&self, s: usize, a: usize, v: &[f64]) -> f64 {
        self.reward(s, a) + self.gamma * self.expected_next(s, a, v)
    }

    pub fn q_values(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len("value vector", v.len(), self.n_states)?;
        let mut q = Vec::with_capacity(self.n_pairs());
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                q.push(self.q_value(s, a, v));
            }
        }
        Ok(q)
    }

    pub fn with_rho0(mut self, rho0: Vec<f64>) -> Result<Self> {
        check_len("rho0", rho0.len(), self.n_states)?;
        self.rho0 = rho0;
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition,
            self.reward,
            self.rho0,
            self.gamma,
        )
    }

    /// Serialize to the plain-text exchange format:
    ///
    /// ```text
    /// n_states <S>
    /// n_actions <A>
    /// gamma <g>
    /// reward <S*A values, row-major (s, a)>
    /// transition <S*A*S values, row-major (s, a, s')>
    /// rho0 <S values>
    /// ```
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let join = |xs: &[f64]| xs.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(out, "n_states {}", self.n_states);
        let _ = writeln!(out, "n_actions {}", self.n_actions);
        let _ = writeln!(out, "gamma {:e}", self.gamma);
        let _ = writeln!(out, "reward {}", join(&self.reward));
        let _ = writeln!(out, "transition {}", join(&self.transition));
        let _ = writeln!(out, "rho0 {}", join(&self.rho0));
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut n_states = None;
        let mut n_actions = None;
        let mut gamma = None;
        let mut reward = None;
        let mut transition = None;
        let mut rho0 = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or_default();
            let values: Vec<&str> = parts.collect();
            let floats = || -> Result<Vec<f64>> {
                values
                    .iter()
                    .map(|v| {
                        v.parse::<f64>()
                            .map_err(|e| Error::Parse(format!("line {}: {v}: {e}", lineno + 1)))
                    })
                    .collect()
            };
            let single_usize = || -> Result<usize> {
                match values.as_slice() {
                    [v] => v
                        .parse::<usize>()
                        .map_err(|e| Error::Parse(format!("line {}: {v}: {e}", lineno + 1))),
                    _ => Err(Error::Parse(format!("line {}: expected one integer", lineno + 1))),
                }
            };
            match key {
                "n_states" => n_states = Some(single_usize()?),
                "n_actions" => n_actions = Some(single_usize()?),
                "gamma" => {
                    let v = floats()?;
                    if v.len() != 1 {
                        return Err(Error::Parse(format!("line {}: expected one value", lineno + 1)));
                    }
                    gamma = Some(v[0]);
                }
                "reward" => reward = Some(floats()?),
                "transition" => transition = Some(floats()?),
                "rho0" => rho0 = Some(floats()?),
                other => return Err(Error::Parse(format!("line {}: unknown key {other:?}", lineno + 1))),
            }
        }
        let missing = |k: &str| Error::Parse(format!("missing key {k}"));
        Self::new(
            n_states.ok_or_else(|| missing("n_states"))?,
            n_actions.ok_or_else(|| missing("n_actions"))?,
            transition.ok_or_else(|| missing("transition"))?,
            reward.ok_or_else(|| missing("reward"))?,
            rho0.ok_or_else(|| missing("rho0"))?,
            gamma.ok_or_else(|| missing("gamma"))?,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Exact discounted value of a stationary policy, `(I - gamma P_pi)^{-1} r_pi`.
    pub fn policy_values(&self, policy: &Policy) -> Result<Vec<f64>> {
        self.check_policy(policy)?;
        let n = self.n_states;
        let mut m = DMatrix::<f64>::identity(n, n);
        let mut rhs = DVector::<f64>::zeros(n);
        for s in 0..n {
            for a in 0..self.n_actions {
                let pa = policy.prob(s, a);
                if pa == 0.0 {
                    continue;
                }
                rhs[s] += pa * self.reward(s, a);
                for (t, p) in self.next_dist(s, a).iter().enumerate() {
                    m[(s, t)] -= self.gamma * pa * p;
                }
            }
        }
        let sol = m
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Invalid("policy evaluation system is singular".into()))?;
        Ok(sol.iter().copied().collect())
    }

    /// `sum_s rho0(s) V^pi(s)`.
    pub fn policy_return(&self, policy: &Policy) -> Result<f64> {
        let v = self.policy_values(policy)?;
        Ok(dot(&self.rho0, &v))
    }

    /// Expected return over a finite window of `horizon` steps starting from
    /// `rho0`, discounted by `gamma^t` when `discounted` is set.
    pub fn window_return(&self, policy: &Policy, horizon: usize, discounted: bool) -> Result<f64> {
        self.check_policy(policy)?;
        let mut dist = self.rho0.clone();
        let mut total = 0.0;
        let mut disc = 1.0;
        for _ in 0..horizon {
            let mut next = vec![0.0; self.n_states];
            for (s, &ds) in dist.iter().enumerate() {
                if ds == 0.0 {
                    continue;
                }
                for a in 0..self.n_actions {
                    let w = ds * policy.prob(s, a);
                    if w == 0.0 {
                        continue;
                    }
                    total += disc * w * self.reward(s, a);
                    for (t, p) in self.next_dist(s, a).iter().enumerate() {
                        next[t] += w * p;
                    }
                }
            }
            dist = next;
            if discounted {
                disc *= self.gamma;
            }
        }
        Ok(total)
    }

    fn check_policy(&self, policy: &Policy) -> Result<()> {
        check_len("policy states", policy.n_states(), self.n_states)?;
        check_len("policy actions", policy.n_actions(), self.n_actions)
    }
}

fn renormalize_rows(values: &mut [f64], width: usize) {
    for row in values.chunks_mut(width) {
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= total);
        // push the residual rounding error into the largest entry
        let total: f64 = row.iter().sum();
        if let Some(max) = row.iter_mut().max_by(|a, b| a.total_cmp(b)) {
            *max += 1.0 - total;
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn max_abs(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// One experience `(s, a, r, s')`. For multi-step tuples `r` is the
/// compressed discounted reward and `steps` the lookahead actually used, so
/// the bootstrap term is `gamma^steps V(s')`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionTuple {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    pub priority: f64,
    pub steps: u32,
}

impl TransitionTuple {
    pub fn new(s: usize, a: usize, r: f64, s_next: usize) -> Self {
        Self {
            s,
            a,
            r,
            s_next,
            priority: 0.0,
            steps: 1,
        }
    }

    pub fn discount(&self, gamma: f64) -> f64 {
        gamma.powi(self.steps as i32)
    }
}

/// Stochastic policy stored as a row-major `(s, a)` probability table.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    n_actions: usize,
    probs: Vec<f64>,
}

impl Policy {
    pub fn from_probs(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        check_len("policy table", probs.len(), n_states * n_actions)?;
        if n_actions == 0 {
            return Err(Error::Invalid("policy needs at least one action".into()));
        }
        for (s, row) in probs.chunks(n_actions).enumerate() {
            if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                return Err(Error::Invalid(format!("negative probability in policy row {s}")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::Invalid(format!("policy row {s} sums to {total}")));
            }
        }
        Ok(Self { n_actions, probs })
    }

    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::Invalid(format!("action {a} out of range in state {s}")));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Ok(Self { n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn n_states(&self) -> usize {
        self.probs.len() / self.n_actions
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// Most likely action per state, ties to the lowest index.
    pub fn argmax_actions(&self) -> Vec<usize> {
        (0..self.n_states()).map(|s| argmax(self.row(s))).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        categorical(rng, self.row(s)).unwrap_or(0)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Optimal Bellman backup `(TV)(s) = max_a { r(s,a) + gamma E[V(s')] }`.
pub fn bellman_operator(mdp: &TabularMdp, v: &[f64]) -> Result<Vec<f64>> {
    check_len("value vector", v.len(), mdp.n_states())?;
    Ok((0..mdp.n_states())
        .map(|s| {
            (0..mdp.n_actions())
                .map(|a| mdp.q_value(s, a, v))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// Draw `s' ~ P(.|s,a)` and return it with the table reward `r(s,a)`.
pub fn sample_transition<R: Rng + ?Sized>(mdp: &TabularMdp, s: usize, a: usize, rng: &mut R) -> Result<(usize, f64)> {
    if s >= mdp.n_states() || a >= mdp.n_actions() {
        return Err(Error::Invalid(format!("state/action ({s}, {a}) out of range")));
    }
    let next = categorical(rng, mdp.next_dist(s, a)).expect("validated transition row");
    Ok((next, mdp.reward(s, a)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub initial_state: usize,
    pub tuples: Vec<TransitionTuple>,
}

impl Trajectory {
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        discounted_return(&self.tuples, gamma)
    }
}

/// `sum_t gamma^t r_t` over a chained one-step tuple list.
pub fn discounted_return(tuples: &[TransitionTuple], gamma: f64) -> f64 {
    let mut disc = 1.0;
    let mut total = 0.0;
    for t in tuples {
        total += disc * t.r;
        disc *= gamma;
    }
    total
}

pub fn rollout<R: Rng + ?Sized>(mdp: &TabularMdp, policy: &Policy, horizon: usize, rng: &mut R) -> Result<Trajectory> {
    if horizon == 0 {
        return Err(Error::Invalid("rollout horizon must be at least 1".into()));
    }
    check_len("policy states", policy.n_states(), mdp.n_states())?;
    let s0 = categorical(rng, mdp.rho0()).expect("validated rho0");
    let mut s = s0;
    let mut tuples = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let a = policy.sample(s, rng);
        let (next, r) = sample_transition(mdp, s, a, rng)?;
        tuples.push(TransitionTuple::new(s, a, r, next));
        s = next;
    }
    Ok(Trajectory {
        initial_state: s0,
        tuples,
    })
}

/// Replace each one-step reward by the discounted sum of the next `l`
/// rewards along the trajectory. Tuples closer than `l` to the end keep the
/// shorter horizon that is available and record it in `steps`.
pub fn multi_step_compress(trajectory: &[TransitionTuple], l: usize, gamma: f64) -> Result<Vec<TransitionTuple>> {
    if l == 0 {
        return Err(Error::Invalid("lookahead must be at least 1".into()));
    }
    let n = trajectory.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let len = l.min(n - i);
        let mut r = 0.0;
        let mut disc = 1.0;
        for t in &trajectory[i..i + len] {
            r += disc * t.r;
            disc *= gamma;
        }
        out.push(TransitionTuple {
            r,
            s_next: trajectory[i + len - 1].s_next,
            steps: len as u32,
            ..trajectory[i]
        });
    }
    Ok(out)
}
