//! Stochastic training: replay buffer with proportional sampling, the
//! composite quadratic-penalty objective, the SCAL loop and the deep
//! parameterized ALM loop.

use std::collections::VecDeque;

use rand::Rng;
use serde::Serialize;

use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::mdp::TransitionTuple;
use crate::nets::{BundleGrad, Features, MultiplierOutput, NetBundle, OptState};
use crate::rng::{categorical, split, stream, Stream};

/// Floor added to every priority so proportional sampling stays proper.
pub const EPS_PRIO: f64 = 1e-3;

/// Binary sum tree over fixed slots; each node keeps the priority total and
/// the number of occupied slots beneath it.
#[derive(Debug, Clone)]
struct SumTree {
    leaves: usize,
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl SumTree {
    fn new(slots: usize) -> Self {
        let leaves = slots.next_power_of_two();
        Self {
            leaves,
            sum: vec![0.0; 2 * leaves],
            count: vec![0; 2 * leaves],
        }
    }

    fn set(&mut self, slot: usize, priority: f64, occupied: bool) {
        let mut i = slot + self.leaves;
        self.sum[i] = priority;
        self.count[i] = occupied as u32;
        while i > 1 {
            i /= 2;
            self.sum[i] = self.sum[2 * i] + self.sum[2 * i + 1];
            self.count[i] = self.count[2 * i] + self.count[2 * i + 1];
        }
    }

    fn weight(&self, node: usize, eps: f64) -> f64 {
        self.sum[node] + eps * self.count[node] as f64
    }

    fn total(&self, eps: f64) -> f64 {
        self.weight(1, eps)
    }

    /// Slot whose cumulative weight interval contains `u`.
    fn find(&self, mut u: f64, eps: f64) -> usize {
        let mut i = 1;
        while i < self.leaves {
            let left = self.weight(2 * i, eps);
            if u < left || self.weight(2 * i + 1, eps) <= 0.0 {
                i *= 2;
            } else {
                u -= left;
                i = 2 * i + 1;
            }
        }
        i - self.leaves
    }
}

/// FIFO replay memory of transitions plus a ring of episode-start states.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    slots: Vec<TransitionTuple>,
    /// Slot of the oldest transition once the ring is full.
    head: usize,
    tree: SumTree,
    initial_states: VecDeque<usize>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Invalid("replay capacity must be positive".into()));
        }
        Ok(Self {
            slots: Vec::with_capacity(capacity.min(1 << 16)),
            head: 0,
            tree: SumTree::new(capacity),
            initial_states: VecDeque::new(),
            capacity,
        })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn initial_len(&self) -> usize {
        self.initial_states.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// The `i`-th oldest stored transition.
    pub fn get(&self, i: usize) -> &TransitionTuple {
        &self.slots[(self.head + i) % self.slots.len()]
    }

    /// Stored transitions, oldest first.
    pub fn transitions(&self) -> impl Iterator<Item = &TransitionTuple> {
        (0..self.len()).map(move |i| self.get(i))
    }

    /// Append a transition whose `priority` is already set; evicts the
    /// oldest entry when full. Negative priorities are clamped to zero.
    pub fn push(&mut self, mut t: TransitionTuple) {
        t.priority = t.priority.max(0.0);
        let slot = if self.slots.len() < self.capacity {
            self.slots.push(t);
            self.slots.len() - 1
        } else {
            let slot = self.head;
            self.slots[slot] = t;
            self.head = (self.head + 1) % self.capacity;
            slot
        };
        self.tree.set(slot, t.priority, true);
    }

    /// Append a transition with priority `[r + gamma^steps V_targ(s') - V(s)]_+`.
    pub fn push_scored(&mut self, mut t: TransitionTuple, bundle: &NetBundle, gamma: f64) {
        t.priority = violation(&t, bundle.value(t.s), bundle.value_target(t.s_next), gamma);
        self.push(t);
    }

    pub fn push_initial(&mut self, s: usize) {
        if self.initial_states.len() == self.capacity {
            self.initial_states.pop_front();
        }
        self.initial_states.push_back(s);
    }

    /// Draw `b` transitions with probability proportional to
    /// `priority + eps_prio`, then rescore the drawn ones with the current
    /// networks so later draws see fresh priorities.
    pub fn sample_proportional<R: Rng + ?Sized>(
        &mut self,
        b: usize,
        rng: &mut R,
        bundle: &NetBundle,
        gamma: f64,
        eps_prio: f64,
    ) -> Result<Vec<TransitionTuple>> {
        let slots = self.sample_slots(b, rng, eps_prio)?;
        let batch = slots.iter().map(|&i| self.slots[i]).collect();
        for i in slots {
            let t = &mut self.slots[i];
            t.priority = violation(t, bundle.value(t.s), bundle.value_target(t.s_next), gamma);
            self.tree.set(i, t.priority, true);
        }
        Ok(batch)
    }

    /// Proportional draw using the priorities as currently stored.
    pub fn sample_stored<R: Rng + ?Sized>(&self, b: usize, rng: &mut R, eps_prio: f64) -> Result<Vec<TransitionTuple>> {
        Ok(self.sample_slots(b, rng, eps_prio)?.into_iter().map(|i| self.slots[i]).collect())
    }

    fn sample_slots<R: Rng + ?Sized>(&self, b: usize, rng: &mut R, eps_prio: f64) -> Result<Vec<usize>> {
        if self.slots.is_empty() {
            return Err(Error::NotReady("no transitions stored".into()));
        }
        let total = self.tree.total(eps_prio);
        if !(total > 0.0) {
            return Err(Error::NotReady("all priorities are zero".into()));
        }
        Ok((0..b)
            .map(|_| self.tree.find(rng.random::<f64>() * total, eps_prio))
            .collect())
    }

    /// Uniform draw (with replacement) of `b` stored initial states.
    pub fn sample_initial<R: Rng + ?Sized>(&self, b: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.initial_states.is_empty() {
            return Err(Error::NotReady("no initial states stored".into()));
        }
        Ok((0..b)
            .map(|_| self.initial_states[rng.random_range(0..self.initial_states.len())])
            .collect())
    }
}

fn violation(t: &TransitionTuple, v_s: f64, v_target_next: f64, gamma: f64) -> f64 {
    (t.r + t.discount(gamma) * v_target_next - v_s).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalConfig {
    pub mu: f64,
    pub beta: f64,
    pub lr_v: f64,
    pub lr_h: f64,
    pub lr_x: f64,
    pub batch: usize,
    pub target_period: usize,
    pub total_steps: usize,
    pub lookahead: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of training over which exploration is annealed.
    pub explore_fraction: f64,
    pub ntk_radius: Option<f64>,
    pub width: usize,
    /// Negative-side activation slope of the trained heads.
    pub leak: f64,
    pub capacity: usize,
    /// Factor applied to sampled rewards; `None` uses `1 / max|r|`.
    pub reward_scale: Option<f64>,
    /// Slack bound `C`; `None` uses `(1 + max|r'|) / (1 - gamma)` for the
    /// scaled rewards `r'`.
    pub slack_scale: Option<f64>,
    pub eval_every: usize,
    /// Adam annealing horizon; `None` uses `total_steps`.
    pub anneal_horizon: Option<u64>,
    pub eps_prio: f64,
    pub seed: u64,
}

impl Default for ScalConfig {
    fn default() -> Self {
        Self {
            mu: 1.0,
            beta: 10.0,
            lr_v: 1e-3,
            lr_h: 1e-3,
            lr_x: 1e-3,
            batch: 64,
            target_period: 100,
            total_steps: 100_000,
            lookahead: 1,
            eps_start: 1.0,
            eps_end: 0.05,
            explore_fraction: 1.0 / 3.0,
            ntk_radius: None,
            width: 64,
            leak: 0.01,
            capacity: 100_000,
            reward_scale: None,
            slack_scale: None,
            eval_every: 1000,
            anneal_horizon: None,
            eps_prio: EPS_PRIO,
            seed: 0,
        }
    }
}

impl ScalConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mu", self.mu),
            ("beta", self.beta),
            ("lr_v", self.lr_v),
            ("lr_h", self.lr_h),
            ("lr_x", self.lr_x),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.beta > 1.0 / (4.0 * self.mu)) {
            return Err(Error::Config(format!(
                "beta={} must exceed 1/(4 mu)={}",
                self.beta,
                1.0 / (4.0 * self.mu)
            )));
        }
        for (name, v) in [
            ("batch", self.batch),
            ("target_period", self.target_period),
            ("lookahead", self.lookahead),
            ("width", self.width),
            ("capacity", self.capacity),
            ("eval_every", self.eval_every),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [("eps_start", self.eps_start), ("eps_end", self.eps_end)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if let Some(r) = self.ntk_radius {
            if !(r > 0.0) {
                return Err(Error::Config("ntk_radius must be positive".into()));
            }
        }
        if let Some(r) = self.reward_scale {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::Config(format!("reward_scale must be positive, got {r}")));
            }
        }
        if !(0.0..1.0).contains(&self.leak) {
            return Err(Error::Config(format!("leak must lie in [0, 1), got {}", self.leak)));
        }
        if !(self.eps_prio >= 0.0) {
            return Err(Error::Config("eps_prio must be nonnegative".into()));
        }
        Ok(())
    }

    /// Exploration rate at `step`: linear from `eps_start` to `eps_end`
    /// over the first `explore_fraction` of training, constant after.
    pub fn epsilon(&self, step: usize) -> f64 {
        let horizon = (self.total_steps as f64 * self.explore_fraction).max(1.0);
        let frac = (step as f64 / horizon).min(1.0);
        self.eps_start + (self.eps_end - self.eps_start) * frac
    }
}

/// Epsilon-uniform mixture with the softmax multiplier head.
pub fn behavior_action<R: Rng + ?Sized>(bundle: &NetBundle, s: usize, epsilon: f64, rng: &mut R) -> usize {
    let na = bundle.n_actions();
    if rng.random::<f64>() < epsilon {
        return rng.random_range(0..na);
    }
    categorical(rng, &bundle.multiplier(s).probs).unwrap_or(0)
}

/// Per-sample scalars of the composite gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleTerms {
    pub x: f64,
    pub z: f64,
    /// `beta (z - x)`.
    pub e: f64,
}

impl SampleTerms {
    /// Coefficient multiplying `grad V(s)` in `g` (with sign), and `grad h` in `q`.
    pub fn value_coef(&self, mu: f64) -> f64 {
        -(self.x + mu * self.e)
    }

    pub fn slack_coef(&self, mu: f64) -> f64 {
        self.x + mu * self.e
    }

    pub fn multiplier_coef(&self, mu: f64) -> f64 {
        (self.z - mu * self.e) / mu
    }
}

/// Sampled `z_targ = x_targ(s,a) + mu (h(s,a) + r + gamma^steps V_targ(s') - V(s))`.
pub fn z_target(bundle: &NetBundle, t: &TransitionTuple, mu: f64, gamma: f64) -> f64 {
    crate::lp::z_sample(
        bundle.x_target(t.s, t.a),
        bundle.slack(t.s, t.a),
        t.r,
        t.discount(gamma),
        bundle.value_target(t.s_next),
        bundle.value(t.s),
        mu,
    )
}

#[derive(Debug, Clone)]
pub struct CompositeTerms {
    pub samples: Vec<SampleTerms>,
    /// Batch means of `g`, `q` and `m` (the multiplier part split over the
    /// mass and logit heads).
    pub grad: BundleGrad,
}

fn check_batches(batch: &[TransitionTuple], initial: &[usize]) -> Result<()> {
    if batch.is_empty() || batch.len() != initial.len() {
        return Err(Error::Invalid(format!(
            "transition batch ({}) and initial batch ({}) must be equal and nonempty",
            batch.len(),
            initial.len()
        )));
    }
    Ok(())
}

pub fn composite_grad_terms(
    batch: &[TransitionTuple],
    initial: &[usize],
    bundle: &NetBundle,
    mu: f64,
    beta: f64,
    gamma: f64,
) -> Result<CompositeTerms> {
    check_batches(batch, initial)?;
    let mut fwd = Forwards::new(bundle);
    let mut acc = Coefs::new(bundle);
    let mut samples = Vec::with_capacity(batch.len());
    for (t, &s0) in batch.iter().zip(initial) {
        let x = fwd.live(t.s).x[t.a];
        let z = crate::lp::z_sample(
            fwd.target(t.s).x[t.a],
            bundle.slack(t.s, t.a),
            t.r,
            t.discount(gamma),
            bundle.value_target(t.s_next),
            bundle.value(t.s),
            mu,
        );
        let st = SampleTerms { x, z, e: beta * (z - x) };
        acc.v[s0] += 1.0;
        acc.v[t.s] += st.value_coef(mu);
        let i = acc.pair(t.s, t.a);
        acc.h[i] += st.slack_coef(mu);
        acc.x[i] += st.multiplier_coef(mu);
        samples.push(st);
    }
    let mut grad = acc.backward(bundle, &mut fwd);
    grad.scale(1.0 / batch.len() as f64);
    Ok(CompositeTerms { samples, grad })
}

/// Multiplier outputs memoised per state for one batch.
struct Forwards<'a> {
    bundle: &'a NetBundle,
    live: Vec<Option<MultiplierOutput>>,
    target: Vec<Option<MultiplierOutput>>,
}

impl<'a> Forwards<'a> {
    fn new(bundle: &'a NetBundle) -> Self {
        Self {
            bundle,
            live: vec![None; bundle.n_states()],
            target: vec![None; bundle.n_states()],
        }
    }

    fn live(&mut self, s: usize) -> &MultiplierOutput {
        let b = self.bundle;
        self.live[s].get_or_insert_with(|| b.multiplier(s))
    }

    fn target(&mut self, s: usize) -> &MultiplierOutput {
        let b = self.bundle;
        self.target[s].get_or_insert_with(|| b.multiplier_target(s))
    }
}

/// Batch gradient coefficients keyed by state (`v`) and pair (`h`, `x`).
/// The gradient is linear in them, so each input is backpropagated once.
struct Coefs {
    n_actions: usize,
    v: Vec<f64>,
    h: Vec<f64>,
    x: Vec<f64>,
}

impl Coefs {
    fn new(bundle: &NetBundle) -> Self {
        let (ns, na) = (bundle.n_states(), bundle.n_actions());
        Self {
            n_actions: na,
            v: vec![0.0; ns],
            h: vec![0.0; ns * na],
            x: vec![0.0; ns * na],
        }
    }

    fn pair(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    fn backward(&self, bundle: &NetBundle, fwd: &mut Forwards) -> BundleGrad {
        let mut grad = bundle.zero_grad();
        let na = self.n_actions;
        for (s, &c) in self.v.iter().enumerate() {
            bundle.value_grad(s, c, &mut grad);
        }
        for (i, &c) in self.h.iter().enumerate() {
            if c != 0.0 {
                bundle.slack_grad(i / na, i % na, c, &mut grad);
            }
        }
        for (s, row) in self.x.chunks(na).enumerate() {
            if row.iter().any(|&c| c != 0.0) {
                bundle.multiplier_grad_row(s, fwd.live(s), row, &mut grad);
            }
        }
        grad
    }
}

/// `(1/b) sum V(s0) + (1/(mu b)) sum x z_targ + (beta/(2b)) sum (x - z_targ)^2`.
pub fn composite_objective_value(
    batch: &[TransitionTuple],
    initial: &[usize],
    bundle: &NetBundle,
    mu: f64,
    beta: f64,
    gamma: f64,
) -> Result<f64> {
    check_batches(batch, initial)?;
    let b = batch.len() as f64;
    let mut total = 0.0;
    for (t, &s0) in batch.iter().zip(initial) {
        let x = bundle.x(t.s, t.a);
        let z = z_target(bundle, t, mu, gamma);
        total += bundle.value(s0) + x * z / mu + 0.5 * beta * (x - z) * (x - z);
    }
    Ok(total / b)
}

/// Batch summary of one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub objective: f64,
    /// Mean of `e^2` over the batch.
    pub penalty_residual: f64,
    /// Batch mean of `x(s, a)`, an estimate of `sum w x`.
    pub mass_estimate: f64,
    pub lr: f64,
}

/// Optimizer state for the four trainable heads.
pub type Optimizers = [OptState; 4];

pub fn make_optimizers(bundle: &NetBundle, cfg: &ScalConfig) -> Optimizers {
    let horizon = cfg.anneal_horizon.unwrap_or(cfg.total_steps as u64);
    bundle.optimizers([cfg.lr_v, cfg.lr_h, cfg.lr_x, cfg.lr_x], horizon)
}

/// One Jacobi update of all heads from a proportional minibatch.
pub fn scal_step<R: Rng + ?Sized>(
    buffer: &mut ReplayBuffer,
    bundle: &mut NetBundle,
    opts: &mut Optimizers,
    cfg: &ScalConfig,
    gamma: f64,
    step_index: usize,
    rng: &mut R,
) -> Result<StepStats> {
    let batch = buffer.sample_proportional(cfg.batch, rng, bundle, gamma, cfg.eps_prio)?;
    let initial = buffer.sample_initial(cfg.batch, rng)?;
    let terms = composite_grad_terms(&batch, &initial, bundle, cfg.mu, cfg.beta, gamma)?;
    let n = terms.samples.len() as f64;
    let v0: f64 = initial.iter().map(|&s| bundle.value(s)).sum::<f64>() / n;
    let mut objective = v0;
    let mut penalty = 0.0;
    let mut mass = 0.0;
    for st in &terms.samples {
        objective += (st.x * st.z / cfg.mu + 0.5 * cfg.beta * (st.x - st.z).powi(2)) / n;
        penalty += st.e * st.e / n;
        mass += st.x / n;
    }
    let lr = opts[0].lr();
    bundle.apply(terms.grad, opts)?;
    if let Some(r) = cfg.ntk_radius {
        bundle.project_ball(r);
    }
    if step_index % cfg.target_period == 0 {
        bundle.sync_target();
    }
    Ok(StepStats {
        objective,
        penalty_residual: penalty,
        mass_estimate: mass,
        lr,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub window_return: f64,
    pub objective: f64,
    pub penalty_residual: f64,
    pub mass_estimate: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    /// First logged step whose return reaches `threshold`.
    pub fn first_step_reaching(&self, threshold: f64) -> Option<usize> {
        self.rows.iter().find(|r| r.window_return >= threshold).map(|r| r.step)
    }

    pub fn final_return(&self) -> Option<f64> {
        self.rows.last().map(|r| r.window_return)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: TrainingLog,
    pub bundle: NetBundle,
}

fn max_abs_reward(env: &Environment) -> f64 {
    env.model().rewards().iter().fold(0.0f64, |m, r| m.max(r.abs()))
}

/// Reward multiplier used for training: the configured one, else `1 / max|r|`
/// (1 when every reward is zero).
pub fn reward_scale(env: &Environment, cfg: &ScalConfig) -> f64 {
    cfg.reward_scale.unwrap_or_else(|| {
        let m = max_abs_reward(env);
        if m > 0.0 {
            1.0 / m
        } else {
            1.0
        }
    })
}

/// Default slack bound `(1 + max|r|) / (1 - gamma)` after reward scaling.
pub fn default_slack_scale(env: &Environment, cfg: &ScalConfig) -> f64 {
    (1.0 + reward_scale(env, cfg) * max_abs_reward(env)) / (1.0 - env.gamma())
}

pub fn init_bundle(env: &Environment, cfg: &ScalConfig, rng: &mut Stream) -> Result<NetBundle> {
    let features = Features::one_hot(env.n_states(), env.n_actions());
    let c = cfg.slack_scale.unwrap_or_else(|| default_slack_scale(env, cfg));
    NetBundle::with_leak(features, cfg.width, c, cfg.leak, rng)
}

/// Online experience collection: one environment step per call, with the
/// `l`-step compression applied on the fly.
struct Collector {
    state: usize,
    reward_scale: f64,
    t_in_episode: usize,
    window: VecDeque<TransitionTuple>,
}

impl Collector {
    fn new(env: &Environment, buffer: &mut ReplayBuffer, rng: &mut Stream) -> Self {
        let state = env.reset(rng);
        buffer.push_initial(state);
        Self {
            state,
            reward_scale: 1.0,
            t_in_episode: 0,
            window: VecDeque::new(),
        }
    }

    fn compress(&self, len: usize, gamma: f64) -> TransitionTuple {
        let mut r = 0.0;
        let mut disc = 1.0;
        for t in self.window.iter().take(len) {
            r += disc * t.r;
            disc *= gamma;
        }
        TransitionTuple {
            r,
            s_next: self.window[len - 1].s_next,
            steps: len as u32,
            ..self.window[0]
        }
    }

    fn step(
        &mut self,
        env: &Environment,
        bundle: &NetBundle,
        buffer: &mut ReplayBuffer,
        epsilon: f64,
        lookahead: usize,
        rng: &mut Stream,
    ) -> Result<()> {
        let gamma = env.gamma();
        let a = behavior_action(bundle, self.state, epsilon, rng);
        let (next, r) = env.step(self.state, a, rng)?;
        self.window.push_back(TransitionTuple::new(self.state, a, self.reward_scale * r, next));
        if self.window.len() == lookahead {
            buffer.push_scored(self.compress(lookahead, gamma), bundle, gamma);
            self.window.pop_front();
        }
        self.t_in_episode += 1;
        if self.t_in_episode >= env.episode_len {
            while !self.window.is_empty() {
                buffer.push_scored(self.compress(self.window.len(), gamma), bundle, gamma);
                self.window.pop_front();
            }
            self.state = env.reset(rng);
            buffer.push_initial(self.state);
            self.t_in_episode = 0;
        } else {
            self.state = next;
        }
        Ok(())
    }
}

fn evaluate(env: &Environment, bundle: &NetBundle) -> Result<f64> {
    let policy = crate::mdp::Policy::deterministic(bundle.n_actions(), &bundle.greedy_actions())?;
    env.evaluate(&policy)
}

/// Algorithm SCAL: interleave one interaction with one composite update.
pub fn scal_train(env: &Environment, cfg: &ScalConfig) -> Result<TrainOutcome> {
    scal_train_observed(env, cfg, |_, _, _| Ok(()))
}

/// [`scal_train`] that also hands the networks and the replay buffer to
/// `observe` at every evaluation point, after the log row is written.
pub fn scal_train_observed(
    env: &Environment,
    cfg: &ScalConfig,
    mut observe: impl FnMut(usize, &NetBundle, &ReplayBuffer) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed);
    let mut init_rng = split(&mut rng);
    let mut bundle = init_bundle(env, cfg, &mut init_rng)?;
    let mut opts = make_optimizers(&bundle, cfg);
    let mut buffer = ReplayBuffer::new(cfg.capacity)?;
    let mut log = TrainingLog::default();
    if cfg.total_steps == 0 {
        return Ok(TrainOutcome { log, bundle });
    }
    let mut collector = Collector::new(env, &mut buffer, &mut rng);
    collector.reward_scale = reward_scale(env, cfg);
    let mut last: Option<StepStats> = None;
    let mut updates = 0usize;
    for k in 0..cfg.total_steps {
        collector.step(env, &bundle, &mut buffer, cfg.epsilon(k), cfg.lookahead, &mut rng)?;
        if buffer.len() >= cfg.batch {
            last = Some(scal_step(&mut buffer, &mut bundle, &mut opts, cfg, env.gamma(), updates, &mut rng)?);
            updates += 1;
        }
        if (k + 1) % cfg.eval_every == 0 {
            log.rows.push(log_row(env, &bundle, k + 1, last, &opts)?);
            observe(k + 1, &bundle, &buffer)?;
        }
    }
    Ok(TrainOutcome { log, bundle })
}

fn log_row(env: &Environment, bundle: &NetBundle, step: usize, last: Option<StepStats>, opts: &Optimizers) -> Result<LogRow> {
    let stats = last.unwrap_or(StepStats {
        objective: f64::NAN,
        penalty_residual: f64::NAN,
        mass_estimate: f64::NAN,
        lr: opts[0].lr(),
    });
    Ok(LogRow {
        step,
        window_return: evaluate(env, bundle)?,
        objective: stats.objective,
        penalty_residual: stats.penalty_residual,
        mass_estimate: stats.mass_estimate,
        lr: stats.lr,
    })
}

/// Gradients of the deep parameterized ALM surrogate
/// `rho0.V + (1/mu) sum x_theta z(phi, psi, theta^k)` in the value and slack
/// heads, and of the fit `(x_theta - z)^2 / 2` in the multiplier heads.
/// Here `z` uses the frozen multiplier `theta^k` (the target snapshot) and
/// the live value at both `s` and `s'`.
pub fn deep_alm_grads(
    batch: &[TransitionTuple],
    initial: &[usize],
    bundle: &NetBundle,
    mu: f64,
    gamma: f64,
) -> Result<(BundleGrad, StepStats)> {
    check_batches(batch, initial)?;
    let mut fwd = Forwards::new(bundle);
    let mut acc = Coefs::new(bundle);
    let n = batch.len() as f64;
    let mut objective = 0.0;
    let mut penalty = 0.0;
    let mut mass = 0.0;
    for (t, &s0) in batch.iter().zip(initial) {
        let x = fwd.live(t.s).x[t.a];
        let disc = t.discount(gamma);
        let z = crate::lp::z_sample(
            fwd.target(t.s).x[t.a],
            bundle.slack(t.s, t.a),
            t.r,
            disc,
            bundle.value(t.s_next),
            bundle.value(t.s),
            mu,
        );
        acc.v[s0] += 1.0;
        acc.v[t.s_next] += x * disc;
        acc.v[t.s] -= x;
        let i = acc.pair(t.s, t.a);
        acc.h[i] += x;
        acc.x[i] += x - z;
        objective += (bundle.value(s0) + x * z / mu) / n;
        penalty += (x - z).powi(2) / n;
        mass += x / n;
    }
    let mut grad = acc.backward(bundle, &mut fwd);
    grad.scale(1.0 / n);
    Ok((
        grad,
        StepStats {
            objective,
            penalty_residual: penalty,
            mass_estimate: mass,
            lr: f64::NAN,
        },
    ))
}

/// Deep parameterized ALM: the outer loop freezes `theta^k` in `z`; each
/// inner step updates the multiplier, then the value, then the slack head
/// (Gauss-Seidel), each on a fresh minibatch.
pub fn deep_alm_train(env: &Environment, cfg: &ScalConfig, inner_steps: usize) -> Result<TrainOutcome> {
    cfg.validate()?;
    if inner_steps == 0 {
        return Err(Error::Config("inner_steps must be at least 1".into()));
    }
    let mut rng = stream(cfg.seed);
    let mut init_rng = split(&mut rng);
    let mut bundle = init_bundle(env, cfg, &mut init_rng)?;
    let mut opts = make_optimizers(&bundle, cfg);
    let mut buffer = ReplayBuffer::new(cfg.capacity)?;
    let mut log = TrainingLog::default();
    if cfg.total_steps == 0 {
        return Ok(TrainOutcome { log, bundle });
    }
    let gamma = env.gamma();
    let mut collector = Collector::new(env, &mut buffer, &mut rng);
    collector.reward_scale = reward_scale(env, cfg);
    let mut last: Option<StepStats> = None;
    let mut inner = 0usize;
    for k in 0..cfg.total_steps {
        collector.step(env, &bundle, &mut buffer, cfg.epsilon(k), cfg.lookahead, &mut rng)?;
        if buffer.len() >= cfg.batch {
            let lr = opts[0].lr();
            let mut stats = None;
            // theta, then phi, then psi, each against the latest iterate
            for heads in [&[2usize, 3][..], &[0][..], &[1][..]] {
                let batch = buffer.sample_proportional(cfg.batch, &mut rng, &bundle, gamma, cfg.eps_prio)?;
                let initial = buffer.sample_initial(cfg.batch, &mut rng)?;
                let (mut grad, st) = deep_alm_grads(&batch, &initial, &bundle, cfg.mu, gamma)?;
                stats.get_or_insert(st);
                for (i, head) in crate::nets::HEADS.into_iter().enumerate() {
                    if heads.contains(&i) {
                        let g = grad.head_mut(head);
                        crate::nets::clip_local(g);
                        opts[i].adam_step(bundle.net_mut(head).weights_mut(), g)?;
                    }
                }
            }
            if let Some(r) = cfg.ntk_radius {
                bundle.project_ball(r);
            }
            inner += 1;
            if inner % inner_steps == 0 {
                // next outer iteration: refreeze theta^k (and the value target)
                bundle.sync_target();
            }
            last = stats.map(|s| StepStats { lr, ..s });
        }
        if (k + 1) % cfg.eval_every == 0 {
            log.rows.push(log_row(env, &bundle, k + 1, last, &opts)?);
        }
    }
    Ok(TrainOutcome { log, bundle })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::chain_mdp;
    use crate::mdp::TabularMdp;
    use crate::nets::HEADS;

    fn tuple(s: usize, a: usize, r: f64, s_next: usize) -> TransitionTuple {
        TransitionTuple::new(s, a, r, s_next)
    }

    fn small_bundle(seed: u64, ns: usize, na: usize) -> NetBundle {
        NetBundle::new(Features::one_hot(ns, na), 8, 3.0, &mut stream(seed)).unwrap()
    }

    fn jitter(b: &mut NetBundle, rng: &mut impl Rng) {
        for head in HEADS {
            for w in b.net_mut(head).weights_mut() {
                *w = if rng.random::<bool>() { 1.0 } else { -1.0 } * (0.05 + rng.random::<f64>());
            }
        }
        b.sync_target();
        for head in HEADS {
            for w in b.net_mut(head).weights_mut() {
                *w += 0.1 * (rng.random::<f64>() - 0.5);
            }
        }
    }

    #[test]
    fn buffer_is_fifo() {
        let mut buf = ReplayBuffer::new(2).unwrap();
        for s in 0..3 {
            buf.push(tuple(s, 0, 0.0, 0));
        }
        assert_eq!(buf.len(), 2);
        assert_eq!(buf.get(0).s, 1);
        assert_eq!(buf.get(1).s, 2);
        assert!(ReplayBuffer::new(0).is_err());
    }

    #[test]
    fn eviction_keeps_sampling_weights_in_sync() {
        let mut buf = ReplayBuffer::new(3).unwrap();
        for (s, p) in [(0, 100.0), (1, 1.0), (2, 0.0), (3, 3.0), (4, 0.0)] {
            let mut t = tuple(s, 0, 0.0, 0);
            t.priority = p;
            buf.push(t);
        }
        let order: Vec<usize> = buf.transitions().map(|t| t.s).collect();
        assert_eq!(order, vec![2, 3, 4]);
        let mut rng = stream(3);
        let draws = buf.sample_stored(1000, &mut rng, 0.0).unwrap();
        assert!(draws.iter().all(|t| t.s == 3));
        let eps = 1.0;
        let n = 40_000;
        let hits = buf.sample_stored(n, &mut rng, eps).unwrap().iter().filter(|t| t.s == 3).count();
        let p = 4.0 / 6.0;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((hits as f64 - n as f64 * p).abs() < 4.0 * sd, "{hits}");
    }

    #[test]
    fn sampled_priorities_are_refreshed() {
        let mut b = small_bundle(1, 2, 1);
        b.v_net.weights_mut().iter_mut().for_each(|w| *w = 0.0);
        b.sync_target();
        let mut buf = ReplayBuffer::new(4).unwrap();
        let mut t = tuple(0, 0, 2.0, 1);
        t.priority = 50.0;
        buf.push(t);
        let mut rng = stream(0);
        buf.sample_proportional(1, &mut rng, &b, 0.9, 0.0).unwrap();
        assert_eq!(buf.get(0).priority, 2.0);
    }

    #[test]
    fn priorities_are_positive_parts() {
        let mut b = small_bundle(1, 2, 1);
        b.v_net.weights_mut().iter_mut().for_each(|w| *w = 0.0);
        b.sync_target();
        let mut buf = ReplayBuffer::new(10).unwrap();
        buf.push_scored(tuple(0, 0, 0.0, 1), &b, 0.9);
        buf.push_scored(tuple(0, 0, -3.0, 1), &b, 0.9);
        buf.push_scored(tuple(0, 0, 2.0, 1), &b, 0.9);
        let p: Vec<f64> = buf.transitions().map(|t| t.priority).collect();
        assert_eq!(p, vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn sampling_requires_data() {
        let b = small_bundle(1, 2, 1);
        let mut buf = ReplayBuffer::new(4).unwrap();
        let mut rng = stream(0);
        assert!(matches!(buf.sample_proportional(4, &mut rng, &b, 0.9, EPS_PRIO), Err(Error::NotReady(_))));
        assert!(matches!(buf.sample_initial(4, &mut rng), Err(Error::NotReady(_))));
    }

    #[test]
    fn zero_priority_is_never_drawn_without_floor() {
        let mut buf = ReplayBuffer::new(4).unwrap();
        let mut a = tuple(0, 0, 0.0, 0);
        a.priority = 0.0;
        let mut b = tuple(1, 0, 0.0, 0);
        b.priority = 50.0;
        buf.push(a);
        buf.push(b);
        let mut rng = stream(2);
        let draws = buf.sample_stored(10_000, &mut rng, 0.0).unwrap();
        assert!(draws.iter().all(|t| t.s == 1));
    }

    #[test]
    fn equal_priorities_sample_uniformly() {
        let mut buf = ReplayBuffer::new(8).unwrap();
        for s in 0..8 {
            let mut t = tuple(s, 0, 0.0, 0);
            t.priority = 0.7;
            buf.push(t);
        }
        let mut rng = stream(3);
        let n = 100_000;
        let mut counts = [0usize; 8];
        for t in buf.sample_stored(n, &mut rng, EPS_PRIO).unwrap() {
            counts[t.s] += 1;
        }
        let expected = n as f64 / 8.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 0.999 quantile of chi-square with 7 degrees of freedom
        assert!(chi2 < 24.32, "chi2 = {chi2}");
    }

    #[test]
    fn proportional_frequencies_within_four_sigma() {
        let mut buf = ReplayBuffer::new(8).unwrap();
        let prios = [0.0, 1.0, 2.0, 5.0, 0.5];
        for (s, &p) in prios.iter().enumerate() {
            let mut t = tuple(s, 0, 0.0, 0);
            t.priority = p;
            buf.push(t);
        }
        let mut rng = stream(4);
        let n = 100_000;
        let mut counts = [0usize; 5];
        for t in buf.sample_stored(n, &mut rng, EPS_PRIO).unwrap() {
            counts[t.s] += 1;
        }
        let total: f64 = prios.iter().map(|p| p + EPS_PRIO).sum();
        for (s, &p) in prios.iter().enumerate() {
            let q = (p + EPS_PRIO) / total;
            let sd = (n as f64 * q * (1.0 - q)).sqrt();
            assert!((counts[s] as f64 - n as f64 * q).abs() <= 4.0 * sd + 1e-9, "state {s}");
        }
    }

    #[test]
    fn behavior_action_examples() {
        let mut b = small_bundle(5, 2, 3);
        let mut rng = stream(6);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[behavior_action(&b, 0, 1.0, &mut rng)] += 1;
        }
        for c in counts {
            let sd = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
            assert!((c as f64 - n as f64 / 3.0).abs() <= 4.0 * sd);
        }
        // push the logit of action 0 far above the others
        let pair_dim = b.features.pair_dim();
        for i in 0..b.x2_net.width() {
            let sign = b.x2_net.out_sign()[i];
            b.x2_net.weights_mut()[i * pair_dim] = if sign > 0.0 { 30.0 } else { -1.0 };
        }
        let probs = b.multiplier(0).probs;
        assert!(probs[0] > 0.999);
        let hits = (0..10_000).filter(|_| behavior_action(&b, 0, 0.0, &mut rng) == 0).count();
        assert!(hits >= 9_950);
        let mut b = small_bundle(7, 2, 3);
        jitter(&mut b, &mut rng);
        let probs = b.multiplier(1).probs;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[behavior_action(&b, 1, 0.0, &mut rng)] += 1;
        }
        for a in 0..3 {
            let sd = (n as f64 * probs[a] * (1.0 - probs[a])).sqrt();
            assert!((counts[a] as f64 - n as f64 * probs[a]).abs() <= 4.0 * sd + 1e-9);
        }
    }

    /// Bundle whose every output is exactly zero: value nets with zero
    /// weights, slack scale zero, and a multiplier mass head pushed far
    /// negative so softplus underflows.
    fn zero_output_bundle() -> NetBundle {
        let mut b = NetBundle::new(Features::one_hot(2, 1), 4, 0.0, &mut stream(8)).unwrap();
        b.v_net.weights_mut().iter_mut().for_each(|w| *w = 0.0);
        let signs = b.x1_net.out_sign().to_vec();
        for (i, s) in signs.iter().enumerate() {
            for j in 0..2 {
                b.x1_net.weights_mut()[i * 2 + j] = if *s > 0.0 { 0.0 } else { 2000.0 };
            }
        }
        b.sync_target();
        b
    }

    #[test]
    fn grad_terms_hand_example() {
        let b = zero_output_bundle();
        assert_eq!(b.x(0, 0), 0.0);
        let terms = composite_grad_terms(&[tuple(0, 0, 1.0, 1)], &[1], &b, 1.0, 1.0, 0.9).unwrap();
        let st = terms.samples[0];
        assert_eq!(st.z, 1.0);
        assert_eq!(st.e, 1.0);
        assert_eq!(st.value_coef(1.0), -1.0);
        assert_eq!(st.multiplier_coef(1.0), 0.0);
    }

    #[test]
    fn zero_residual_reduces_value_gradient() {
        let mut rng = stream(9);
        let mut b = small_bundle(9, 3, 2);
        jitter(&mut b, &mut rng);
        let t = tuple(0, 1, 0.5, 2);
        // choose beta so that e vanishes: x equals z already when the reward
        // is set to the value that makes them match
        let x = b.x(0, 1);
        let z0 = z_target(&b, &t, 1.0, 0.9);
        let t = tuple(0, 1, 0.5 + (x - z0), 2);
        let terms = composite_grad_terms(&[t], &[1], &b, 1.0, 2.0, 0.9).unwrap();
        let st = terms.samples[0];
        assert!(st.e.abs() < 1e-12);
        let mut expect = b.zero_grad();
        b.value_grad(1, 1.0, &mut expect);
        b.value_grad(0, -x, &mut expect);
        for (p, q) in terms.grad.v.iter().zip(&expect.v) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    fn random_batch(rng: &mut impl Rng, ns: usize, na: usize, b: usize) -> (Vec<TransitionTuple>, Vec<usize>) {
        let batch = (0..b)
            .map(|_| {
                let mut t = tuple(
                    rng.random_range(0..ns),
                    rng.random_range(0..na),
                    rng.random::<f64>() * 2.0 - 1.0,
                    rng.random_range(0..ns),
                );
                t.steps = rng.random_range(1..4);
                t
            })
            .collect();
        let initial = (0..b).map(|_| rng.random_range(0..ns)).collect();
        (batch, initial)
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let mut rng = stream(10);
        for trial in 0..100 {
            let mut b = small_bundle(100 + trial, 3, 2);
            jitter(&mut b, &mut rng);
            let (batch, initial) = random_batch(&mut rng, 3, 2, 4);
            let (mu, beta) = (0.5 + rng.random::<f64>(), 1.0 + rng.random::<f64>());
            let terms = composite_grad_terms(&batch, &initial, &b, mu, beta, 0.9).unwrap();
            for head in HEADS {
                let analytic = terms.grad.head(head);
                let w0 = b.net(head).weights().to_vec();
                let eps = 1e-6;
                let mut worst = 0.0f64;
                let scale = crate::nets::norm(analytic).max(1e-8);
                for i in 0..w0.len() {
                    let mut p = b.clone();
                    p.net_mut(head).weights_mut()[i] += eps;
                    let mut q = b.clone();
                    q.net_mut(head).weights_mut()[i] -= eps;
                    let fd = (composite_objective_value(&batch, &initial, &p, mu, beta, 0.9).unwrap()
                        - composite_objective_value(&batch, &initial, &q, mu, beta, 0.9).unwrap())
                        / (2.0 * eps);
                    worst = worst.max((fd - analytic[i]).abs());
                }
                assert!(worst / scale <= 1e-4, "head {head:?}: {worst} vs {scale}");
            }
        }
    }

    #[test]
    fn objective_with_zero_multiplier_and_slack() {
        let b = zero_output_bundle();
        let batch = vec![tuple(0, 0, 1.0, 1), tuple(1, 0, -2.0, 0)];
        let initial = vec![0, 1];
        let beta = 1.5;
        let val = composite_objective_value(&batch, &initial, &b, 1.0, beta, 0.9).unwrap();
        // V = 0 everywhere, so z = r
        let expect = 0.0 + beta / 4.0 * (1.0 + 4.0);
        assert!((val - expect).abs() < 1e-12);
        assert!(composite_objective_value(&batch, &[0], &b, 1.0, beta, 0.9).is_err());
    }

    #[test]
    fn config_requires_beta_above_quarter_inverse_mu() {
        let cfg = ScalConfig {
            mu: 1.0,
            beta: 0.25,
            ..ScalConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ScalConfig {
            mu: 1.0,
            beta: 0.26,
            ..ScalConfig::default()
        };
        assert!(cfg.validate().is_ok());
    }

    fn chain_env(n: usize, noise: f64) -> Environment {
        Environment::from_mdp(chain_mdp(n, 0.9, noise).unwrap(), 20)
    }

    fn filled_buffer(env: &Environment, b: &NetBundle, rng: &mut Stream) -> ReplayBuffer {
        let mut buf = ReplayBuffer::new(1000).unwrap();
        let mut c = Collector::new(env, &mut buf, rng);
        for _ in 0..200 {
            c.step(env, b, &mut buf, 1.0, 1, rng).unwrap();
        }
        buf
    }

    #[test]
    fn scal_step_sync_projection_and_zero_gradients() {
        let env = chain_env(4, 0.1);
        let mut rng = stream(11);
        let cfg = ScalConfig {
            batch: 8,
            target_period: 5,
            ntk_radius: Some(0.05),
            lr_v: 0.1,
            lr_h: 0.1,
            lr_x: 0.1,
            ..ScalConfig::default()
        };
        let mut b = init_bundle(&env, &cfg, &mut rng).unwrap();
        let mut buf = filled_buffer(&env, &b, &mut rng);
        let mut opts = make_optimizers(&b, &cfg);
        for k in 0..12 {
            scal_step(&mut buf, &mut b, &mut opts, &cfg, 0.9, k, &mut rng).unwrap();
            for head in HEADS {
                assert!(b.net(head).distance_to_init() <= 0.05 + 1e-12);
            }
            if k % 5 == 0 {
                assert_eq!(b.v_target, b.v_net);
                assert_eq!(b.x1_target, b.x1_net);
                assert_eq!(b.x2_target, b.x2_net);
            }
        }
        let before = b.clone();
        let mut fresh = make_optimizers(&b, &cfg);
        b.apply(b.zero_grad(), &mut fresh).unwrap();
        assert_eq!(b, before);
    }

    #[test]
    fn targets_do_not_move_between_syncs() {
        let env = chain_env(4, 0.1);
        let mut rng = stream(12);
        let cfg = ScalConfig {
            batch: 8,
            target_period: 1000,
            lr_v: 0.05,
            lr_h: 0.05,
            lr_x: 0.05,
            ..ScalConfig::default()
        };
        let mut b = init_bundle(&env, &cfg, &mut rng).unwrap();
        let mut buf = filled_buffer(&env, &b, &mut rng);
        let mut opts = make_optimizers(&b, &cfg);
        scal_step(&mut buf, &mut b, &mut opts, &cfg, 0.9, 0, &mut rng).unwrap();
        let t = tuple(1, 0, 0.3, 2);
        let z_before = z_target(&b, &t, cfg.mu, 0.9);
        let (vt, x1t, x2t) = (b.v_target.clone(), b.x1_target.clone(), b.x2_target.clone());
        // an update that touches only the multiplier heads
        b.x1_net.weights_mut().iter_mut().for_each(|v| *v += 0.01);
        b.x2_net.weights_mut().iter_mut().for_each(|v| *v -= 0.01);
        assert_eq!((&b.v_target, &b.x1_target, &b.x2_target), (&vt, &x1t, &x2t));
        assert_eq!(z_target(&b, &t, cfg.mu, 0.9), z_before);
    }

    #[test]
    fn training_with_zero_steps_is_empty() {
        let env = chain_env(3, 0.0);
        let cfg = ScalConfig {
            total_steps: 0,
            ..ScalConfig::default()
        };
        let out = scal_train(&env, &cfg).unwrap();
        assert!(out.log.rows.is_empty());
        let mut rng = stream(cfg.seed);
        let mut init_rng = split(&mut rng);
        assert_eq!(out.bundle, init_bundle(&env, &cfg, &mut init_rng).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let env = chain_env(4, 0.1);
        let cfg = ScalConfig {
            total_steps: 600,
            eval_every: 100,
            batch: 16,
            ..ScalConfig::default()
        };
        let a = scal_train(&env, &cfg).unwrap();
        let b = scal_train(&env, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.bundle, b.bundle);
        assert_eq!(a.log.rows.len(), 6);
        let a = deep_alm_train(&env, &cfg, 3).unwrap();
        let b = deep_alm_train(&env, &cfg, 3).unwrap();
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn multi_step_tuples_enter_the_buffer() {
        let env = chain_env(4, 0.0);
        let mut rng = stream(13);
        let b = small_bundle(13, 4, 2);
        let mut buf = ReplayBuffer::new(100).unwrap();
        let mut c = Collector::new(&env, &mut buf, &mut rng);
        for _ in 0..20 {
            c.step(&env, &b, &mut buf, 1.0, 3, &mut rng).unwrap();
        }
        // one episode of 20 steps: 18 full tuples then the 2- and 1-step tail
        let steps: Vec<u32> = buf.transitions().map(|t| t.steps).collect();
        assert_eq!(steps.len(), 20);
        assert!(steps[..18].iter().all(|&s| s == 3));
        assert_eq!(&steps[18..], &[2, 1]);
        assert_eq!(buf.initial_len(), 2);
    }

    #[test]
    fn deep_alm_single_state_multiplier() {
        let mdp = TabularMdp::new(1, 1, vec![1.0], vec![1.0], vec![1.0], 0.5).unwrap();
        let env = Environment::from_mdp(mdp, 50);
        let cfg = ScalConfig {
            total_steps: 20_000,
            eval_every: 1000,
            batch: 16,
            lr_v: 1e-2,
            lr_h: 1e-2,
            lr_x: 1e-2,
            ..ScalConfig::default()
        };
        let out = deep_alm_train(&env, &cfg, 500).unwrap();
        let x = out.bundle.x(0, 0);
        assert!((x - 2.0).abs() < 0.2, "x = {x}");
    }

    #[test]
    fn reward_scale_defaults_to_inverse_max_reward() {
        let mdp = TabularMdp::new(1, 2, vec![1.0, 1.0], vec![-4.0, 2.0], vec![1.0], 0.5).unwrap();
        let env = Environment::from_mdp(mdp, 10);
        let cfg = ScalConfig::default();
        assert!((reward_scale(&env, &cfg) - 0.25).abs() < 1e-12);
        assert!((default_slack_scale(&env, &cfg) - 4.0).abs() < 1e-12);
        let fixed = ScalConfig { reward_scale: Some(2.0), ..cfg.clone() };
        assert_eq!(reward_scale(&env, &fixed), 2.0);
        assert!(ScalConfig { reward_scale: Some(0.0), ..cfg.clone() }.validate().is_err());
        assert!(ScalConfig { reward_scale: Some(-1.0), ..cfg }.validate().is_err());
    }
}
