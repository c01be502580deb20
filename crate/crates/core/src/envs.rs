//! Concrete environments: day-to-day inventory control (as a simulator and
//! as an exact tabular model) and a noisy chain used for the ablations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{sample_transition, Policy, TabularMdp};
use crate::rng::categorical;

/// Inventory problem parameters. `h` is the unit holding cost and `p` the
/// unit selling price; demand is Poisson with mean `lambda`, truncated at `m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InventoryConfig {
    pub m: usize,
    pub k: f64,
    pub c: f64,
    pub h: f64,
    pub p: f64,
    pub lambda: f64,
    pub gamma: f64,
}

impl Default for InventoryConfig {
    fn default() -> Self {
        Self {
            m: 10,
            k: 5.0,
            c: 2.0,
            h: 2.0,
            p: 3.0,
            lambda: 2.0,
            gamma: 0.9,
        }
    }
}

impl InventoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Invalid("inventory size M must be at least 1".into()));
        }
        if self.k < 0.0 || self.c < 0.0 || self.h < 0.0 {
            return Err(Error::Invalid("inventory costs must be nonnegative".into()));
        }
        if !(self.p > self.h) {
            return Err(Error::Invalid(format!(
                "selling price p={} must exceed holding cost h={}",
                self.p, self.h
            )));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Invalid("demand mean must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Invalid("discount must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// One day of inventory dynamics: order `a` on top of stock `s`, then serve
/// demand `d`. Returns the next stock level and the day's revenue.
pub fn inventory_step(cfg: &InventoryConfig, s: usize, a: usize, d: usize) -> Result<(usize, f64)> {
    if s > cfg.m || a > cfg.m {
        return Err(Error::Invalid(format!(
            "stock {s} / order {a} outside 0..={}",
            cfg.m
        )));
    }
    let stocked = (s + a).min(cfg.m);
    let next = stocked.saturating_sub(d);
    let entry = if a > 0 { cfg.k } else { 0.0 };
    let reward = -entry - cfg.c * (stocked - s) as f64 - cfg.h * s as f64 + cfg.p * (stocked - next) as f64;
    Ok((next, reward))
}

/// Poisson(lambda) probabilities for `0..m` with all remaining tail mass
/// folded into the last entry `m`.
pub fn truncated_poisson(lambda: f64, m: usize) -> Result<Vec<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::Invalid("Poisson mean must be positive".into()));
    }
    let mut probs = Vec::with_capacity(m + 1);
    let mut pk = (-lambda).exp();
    let mut head = 0.0;
    for k in 0..m {
        probs.push(pk);
        head += pk;
        pk *= lambda / (k + 1) as f64;
    }
    probs.push((1.0 - head).max(0.0));
    Ok(probs)
}

/// Exact tabular model of the inventory problem over stock levels and order
/// quantities `0..=M`, with uniform initial stock.
///
/// Folding demand above `M` into `d = M` is exact: stock never exceeds `M`,
/// so every such demand empties the shelf and sells the same amount.
pub fn inventory_tabular(cfg: &InventoryConfig) -> Result<TabularMdp> {
    cfg.validate()?;
    let n = cfg.m + 1;
    let demand = truncated_poisson(cfg.lambda, cfg.m)?;
    let mut transition = vec![0.0; n * n * n];
    let mut reward = vec![0.0; n * n];
    for s in 0..n {
        for a in 0..n {
            let base = (s * n + a) * n;
            for (d, &pd) in demand.iter().enumerate() {
                let (next, r) = inventory_step(cfg, s, a, d)?;
                transition[base + next] += pd;
                reward[s * n + a] += pd * r;
            }
        }
    }
    TabularMdp::new(n, n, transition, reward, vec![1.0 / n as f64; n], cfg.gamma)
}

/// `n`-state chain with actions left (0) and right (1). The intended move is
/// flipped with probability `noise`; moves past either end stay put. Every
/// step taken from the right end pays reward 1. Initial states are uniform.
pub fn chain_mdp(n: usize, gamma: f64, noise: f64) -> Result<TabularMdp> {
    if n < 2 {
        return Err(Error::Invalid("chain needs at least two states".into()));
    }
    if !(0.0..1.0).contains(&noise) {
        return Err(Error::Invalid(format!("chain noise must lie in [0, 1), got {noise}")));
    }
    let mut transition = vec![0.0; n * 2 * n];
    let mut reward = vec![0.0; n * 2];
    for s in 0..n {
        let left = s.saturating_sub(1);
        let right = (s + 1).min(n - 1);
        for a in 0..2 {
            let (intended, flipped) = if a == 0 { (left, right) } else { (right, left) };
            let base = (s * 2 + a) * n;
            transition[base + intended] += 1.0 - noise;
            transition[base + flipped] += noise;
            if s == n - 1 {
                reward[s * 2 + a] = 1.0;
            }
        }
    }
    TabularMdp::new(n, 2, transition, reward, vec![1.0 / n as f64; n], gamma)
}

/// How policies are scored when logging learning curves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Evaluation {
    /// Exact infinite-horizon discounted return from `rho0`.
    Discounted,
    /// Expected cumulative reward over a fixed window from `rho0`.
    Window { horizon: usize, discounted: bool },
}

#[derive(Debug, Clone)]
enum Sampler {
    Model,
    Inventory { cfg: InventoryConfig, demand: Vec<f64> },
}

/// A sampled environment backed by an exact tabular model.
///
/// Training only touches `reset`/`step`; the model is kept for oracle
/// evaluation and the analysis routines.
#[derive(Debug, Clone)]
pub struct Environment {
    model: TabularMdp,
    sampler: Sampler,
    pub episode_len: usize,
    pub evaluation: Evaluation,
}

impl Environment {
    pub fn from_mdp(model: TabularMdp, episode_len: usize) -> Self {
        Self {
            model,
            sampler: Sampler::Model,
            episode_len: episode_len.max(1),
            evaluation: Evaluation::Discounted,
        }
    }

    /// Inventory simulator with realised (not expected) daily revenue,
    /// scored on 10-day windows.
    pub fn inventory(cfg: InventoryConfig, episode_len: usize) -> Result<Self> {
        let model = inventory_tabular(&cfg)?;
        let demand = truncated_poisson(cfg.lambda, cfg.m)?;
        Ok(Self {
            model,
            sampler: Sampler::Inventory { cfg, demand },
            episode_len: episode_len.max(1),
            evaluation: Evaluation::Window {
                horizon: 10,
                discounted: false,
            },
        })
    }

    pub fn with_evaluation(mut self, evaluation: Evaluation) -> Self {
        self.evaluation = evaluation;
        self
    }

    pub fn model(&self) -> &TabularMdp {
        &self.model
    }

    pub fn n_states(&self) -> usize {
        self.model.n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.model.n_actions()
    }

    pub fn gamma(&self) -> f64 {
        self.model.gamma()
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        categorical(rng, self.model.rho0()).expect("validated rho0")
    }

    pub fn step<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> Result<(usize, f64)> {
        match &self.sampler {
            Sampler::Model => sample_transition(&self.model, s, a, rng),
            Sampler::Inventory { cfg, demand } => {
                let d = categorical(rng, demand).expect("normalised demand");
                inventory_step(cfg, s, a, d)
            }
        }
    }

    pub fn evaluate(&self, policy: &Policy) -> Result<f64> {
        match self.evaluation {
            Evaluation::Discounted => self.model.policy_return(policy),
            Evaluation::Window { horizon, discounted } => self.model.window_return(policy, horizon, discounted),
        }
    }
}
