//! Two-layer ReLU networks with hand-written gradients, plus the value,
//! slack and multiplier heads built from them.
//!
//! A network computes `(1/sqrt(m)) sum_i c_i relu(w_i . input)` where the
//! output signs `c_i` are fixed at construction and only the hidden weights
//! `w_i` are trained. Inputs are sparse `(index, value)` lists because every
//! tabular feature map used here is one-hot.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{check_len, Error, Result};

/// Sparse feature vector.
pub type Input = [(usize, f64)];

const CHECKPOINT_MAGIC: &[u8; 4] = b"TLNT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerNet {
    width: usize,
    in_dim: usize,
    scale: f64,
    /// Slope of the activation for negative pre-activations; 0 is ReLU.
    leak: f64,
    out_sign: Vec<f64>,
    weights: Vec<f64>,
    init_weights: Vec<f64>,
}

impl TwoLayerNet {
    /// Random output signs, weights `N(0, 1/in_dim)` per entry.
    pub fn init<R: Rng + ?Sized>(width: usize, in_dim: usize, rng: &mut R) -> Result<Self> {
        Self::check_dims(width, in_dim)?;
        let out_sign = (0..width)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        Self::with_signs(out_sign, in_dim, rng)
    }

    /// All output signs `+1`, so the raw output is nonnegative.
    pub fn init_positive<R: Rng + ?Sized>(width: usize, in_dim: usize, rng: &mut R) -> Result<Self> {
        Self::check_dims(width, in_dim)?;
        Self::with_signs(vec![1.0; width], in_dim, rng)
    }

    /// Output signs `+1` and weights `|N(0, 1/in_dim)|`, so every unit
    /// starts active on nonnegative inputs.
    pub fn init_nonnegative<R: Rng + ?Sized>(width: usize, in_dim: usize, rng: &mut R) -> Result<Self> {
        let mut net = Self::init_positive(width, in_dim, rng)?;
        net.weights.iter_mut().for_each(|w| *w = w.abs());
        net.init_weights.clone_from(&net.weights);
        Ok(net)
    }

    /// Clamp every weight at zero from below.
    pub fn clamp_nonnegative(&mut self) {
        self.weights.iter_mut().for_each(|w| *w = w.max(0.0));
    }

    fn check_dims(width: usize, in_dim: usize) -> Result<()> {
        if width == 0 || in_dim == 0 {
            return Err(Error::Invalid(format!("network dims must be positive, got {width}x{in_dim}")));
        }
        Ok(())
    }

    fn with_signs<R: Rng + ?Sized>(out_sign: Vec<f64>, in_dim: usize, rng: &mut R) -> Result<Self> {
        let width = out_sign.len();
        let normal = Normal::new(0.0, (1.0 / in_dim as f64).sqrt()).expect("positive std");
        let weights: Vec<f64> = (0..width * in_dim).map(|_| normal.sample(rng)).collect();
        Ok(Self {
            width,
            in_dim,
            scale: 1.0 / (width as f64).sqrt(),
            leak: 0.0,
            out_sign,
            init_weights: weights.clone(),
            weights,
        })
    }

    /// Build from explicit parts; `init_weights` is set to `weights`.
    pub fn from_parts(in_dim: usize, out_sign: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let width = out_sign.len();
        Self::check_dims(width, in_dim)?;
        check_len("weights", weights.len(), width * in_dim)?;
        Ok(Self {
            width,
            in_dim,
            scale: 1.0 / (width as f64).sqrt(),
            leak: 0.0,
            out_sign,
            init_weights: weights.clone(),
            weights,
        })
    }

    /// Use `max(z, leak z)` instead of `max(z, 0)`.
    pub fn with_leak(mut self, leak: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&leak) {
            return Err(Error::Invalid(format!("activation leak must lie in [0, 1), got {leak}")));
        }
        self.leak = leak;
        Ok(self)
    }

    pub fn leak(&self) -> f64 {
        self.leak
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn n_params(&self) -> usize {
        self.weights.len()
    }

    pub fn out_sign(&self) -> &[f64] {
        &self.out_sign
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn init_weights(&self) -> &[f64] {
        &self.init_weights
    }

    #[inline]
    fn preact(&self, unit: usize, input: &Input) -> f64 {
        let row = &self.weights[unit * self.in_dim..(unit + 1) * self.in_dim];
        input.iter().map(|&(j, v)| row[j] * v).sum()
    }

    pub fn forward(&self, input: &Input) -> f64 {
        let mut out = 0.0;
        for i in 0..self.width {
            let z = self.preact(i, input);
            if z > 0.0 {
                out += self.out_sign[i] * z;
            } else if self.leak > 0.0 {
                out += self.out_sign[i] * self.leak * z;
            }
        }
        self.scale * out
    }

    /// `out += coef * d forward / d weights`, with the ReLU counted active at 0.
    pub fn accumulate_grad(&self, input: &Input, coef: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.weights.len());
        if coef == 0.0 {
            return;
        }
        for i in 0..self.width {
            let slope = if self.preact(i, input) >= 0.0 { 1.0 } else { self.leak };
            if slope == 0.0 {
                continue;
            }
            let c = coef * self.scale * self.out_sign[i] * slope;
            let base = i * self.in_dim;
            for &(j, v) in input {
                out[base + j] += c * v;
            }
        }
    }

    /// Dense gradient of the output with respect to the hidden weights.
    pub fn grad(&self, input: &Input) -> Vec<f64> {
        let mut g = vec![0.0; self.weights.len()];
        self.accumulate_grad(input, 1.0, &mut g);
        g
    }

    pub fn distance_to_init(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.init_weights)
            .map(|(w, w0)| (w - w0).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Radial projection onto `{ ||w - w0|| <= radius }`.
    pub fn project_ball(&mut self, radius: f64) {
        let d = self.distance_to_init();
        if d > radius {
            let f = radius / d;
            for (w, w0) in self.weights.iter_mut().zip(&self.init_weights) {
                *w = w0 + f * (*w - w0);
            }
        }
    }

    /// Byte layout (little endian): magic `TLNT`, `u32` version, `u32`
    /// width, `u32` in_dim, `f64` leak, then `f64` out_sign, weights and
    /// init_weights, the two matrices row-major by hidden unit.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u32::<LittleEndian>(self.width as u32)?;
        w.write_u32::<LittleEndian>(self.in_dim as u32)?;
        w.write_f64::<LittleEndian>(self.leak)?;
        for v in self.out_sign.iter().chain(&self.weights).chain(&self.init_weights) {
            w.write_f64::<LittleEndian>(*v)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Parse("not a network checkpoint".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
        }
        let width = r.read_u32::<LittleEndian>()? as usize;
        let in_dim = r.read_u32::<LittleEndian>()? as usize;
        Self::check_dims(width, in_dim)?;
        let leak = r.read_f64::<LittleEndian>()?;
        let mut read_vec = |n: usize| -> Result<Vec<f64>> {
            let mut v = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut v)?;
            Ok(v)
        };
        let out_sign = read_vec(width)?;
        let weights = read_vec(width * in_dim)?;
        let init_weights = read_vec(width * in_dim)?;
        Ok(Self {
            width,
            in_dim,
            scale: 1.0 / (width as f64).sqrt(),
            leak,
            out_sign,
            weights,
            init_weights,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Convert a dense vector to the sparse input format, dropping zeros.
pub fn sparse(dense: &[f64]) -> Vec<(usize, f64)> {
    dense
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, v)| (i, *v))
        .collect()
}

/// Feature vectors for every state and every state-action pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    n_actions: usize,
    state_dim: usize,
    pair_dim: usize,
    state: Vec<Vec<(usize, f64)>>,
    pair: Vec<Vec<(usize, f64)>>,
}

impl Features {
    /// One-hot state vectors and one-hot joint `(s, a)` vectors.
    pub fn one_hot(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_actions,
            state_dim: n_states,
            pair_dim: n_states * n_actions,
            state: (0..n_states).map(|s| vec![(s, 1.0)]).collect(),
            pair: (0..n_states * n_actions).map(|i| vec![(i, 1.0)]).collect(),
        }
    }

    /// Explicit dense features; every vector must have norm at most one.
    pub fn dense(n_actions: usize, state: &[Vec<f64>], pair: &[Vec<f64>]) -> Result<Self> {
        check_len("pair features", pair.len(), state.len() * n_actions)?;
        let state_dim = state.first().map_or(0, Vec::len);
        let pair_dim = pair.first().map_or(0, Vec::len);
        for v in state.iter().chain(pair) {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1.0 + 1e-12 {
                return Err(Error::Invalid(format!("feature norm {norm} exceeds one")));
            }
        }
        if state.iter().any(|v| v.len() != state_dim) || pair.iter().any(|v| v.len() != pair_dim) {
            return Err(Error::Invalid("ragged feature vectors".into()));
        }
        Ok(Self {
            n_actions,
            state_dim,
            pair_dim,
            state: state.iter().map(|v| sparse(v)).collect(),
            pair: pair.iter().map(|v| sparse(v)).collect(),
        })
    }

    pub fn n_states(&self) -> usize {
        self.state.len()
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn pair_dim(&self) -> usize {
        self.pair_dim
    }

    pub fn state(&self, s: usize) -> &Input {
        &self.state[s]
    }

    pub fn pair(&self, s: usize, a: usize) -> &Input {
        &self.pair[s * self.n_actions + a]
    }
}

/// Adam moments with a linearly annealed step size.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub base_lr: f64,
    pub anneal_horizon: u64,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptState {
    pub fn new(n_params: usize, base_lr: f64, anneal_horizon: u64) -> Self {
        Self {
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step_count: 0,
            base_lr,
            anneal_horizon: anneal_horizon.max(1),
        }
    }

    /// Step size the next update will use.
    pub fn lr(&self) -> f64 {
        let frac = self.step_count as f64 / self.anneal_horizon as f64;
        self.base_lr * (1.0 - frac).max(0.0)
    }

    pub fn adam_step(&mut self, weights: &mut [f64], grads: &[f64]) -> Result<()> {
        check_len("weights", weights.len(), self.first_moment.len())?;
        check_len("gradient", grads.len(), self.first_moment.len())?;
        let lr = self.lr();
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - ADAM_B1.powi(t);
        let c2 = 1.0 - ADAM_B2.powi(t);
        for i in 0..weights.len() {
            let g = grads[i];
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            *m = ADAM_B1 * *m + (1.0 - ADAM_B1) * g;
            *v = ADAM_B2 * *v + (1.0 - ADAM_B2) * g * g;
            if lr > 0.0 && (*m != 0.0) {
                weights[i] -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescale one head's gradient by `min(1, 1/||g||)`; returns the factor.
pub fn clip_local(grad: &mut [f64]) -> f64 {
    let n = norm(grad);
    if n > 1.0 {
        let f = 1.0 / n;
        grad.iter_mut().for_each(|g| *g *= f);
        f
    } else {
        1.0
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Output of the factored discrete multiplier head at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplierOutput {
    /// `x1(s) > 0`.
    pub mass: f64,
    /// Softmax over actions.
    pub probs: Vec<f64>,
    /// `x(s, a) = mass * probs[a]`.
    pub x: Vec<f64>,
}

/// Which trainable head a gradient belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Value,
    Slack,
    Mass,
    Logits,
}

pub const HEADS: [Head; 4] = [Head::Value, Head::Slack, Head::Mass, Head::Logits];

/// Per-head gradient buffers, laid out like the live networks.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleGrad {
    pub v: Vec<f64>,
    pub h: Vec<f64>,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
}

impl BundleGrad {
    pub fn head(&self, head: Head) -> &[f64] {
        match head {
            Head::Value => &self.v,
            Head::Slack => &self.h,
            Head::Mass => &self.x1,
            Head::Logits => &self.x2,
        }
    }

    pub fn head_mut(&mut self, head: Head) -> &mut Vec<f64> {
        match head {
            Head::Value => &mut self.v,
            Head::Slack => &mut self.h,
            Head::Mass => &mut self.x1,
            Head::Logits => &mut self.x2,
        }
    }

    pub fn scale(&mut self, f: f64) {
        for head in HEADS {
            self.head_mut(head).iter_mut().for_each(|g| *g *= f);
        }
    }
}

/// Value, slack and two-head multiplier networks with target snapshots.
///
/// * `V(s) = v_net(phi(s))`
/// * `h(s, a) = C sigmoid(h_net(phi(s, a)))`
/// * `x(s, a) = softplus(x1_net(phi(s))) * softmax_a(x2_net(phi(s, .)))`
#[derive(Debug, Clone, PartialEq)]
pub struct NetBundle {
    pub features: Features,
    pub v_net: TwoLayerNet,
    pub h_net: TwoLayerNet,
    pub x1_net: TwoLayerNet,
    pub x2_net: TwoLayerNet,
    pub v_target: TwoLayerNet,
    pub x1_target: TwoLayerNet,
    pub x2_target: TwoLayerNet,
    pub slack_scale: f64,
}

impl NetBundle {
    pub fn new<R: Rng + ?Sized>(features: Features, width: usize, slack_scale: f64, rng: &mut R) -> Result<Self> {
        Self::with_leak(features, width, slack_scale, 0.0, rng)
    }

    /// As [`NetBundle::new`], with every head using activation slope `leak`
    /// below zero.
    pub fn with_leak<R: Rng + ?Sized>(
        features: Features,
        width: usize,
        slack_scale: f64,
        leak: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(slack_scale >= 0.0) {
            return Err(Error::Invalid("slack scale must be nonnegative".into()));
        }
        let v_net = TwoLayerNet::init(width, features.state_dim(), rng)?.with_leak(leak)?;
        let h_net = TwoLayerNet::init(width, features.pair_dim(), rng)?.with_leak(leak)?;
        let x1_net = TwoLayerNet::init(width, features.state_dim(), rng)?.with_leak(leak)?;
        let x2_net = TwoLayerNet::init(width, features.pair_dim(), rng)?.with_leak(leak)?;
        Ok(Self {
            v_target: v_net.clone(),
            x1_target: x1_net.clone(),
            x2_target: x2_net.clone(),
            features,
            v_net,
            h_net,
            x1_net,
            x2_net,
            slack_scale,
        })
    }

    pub fn n_actions(&self) -> usize {
        self.features.n_actions()
    }

    pub fn n_states(&self) -> usize {
        self.features.n_states()
    }

    pub fn zero_grad(&self) -> BundleGrad {
        BundleGrad {
            v: vec![0.0; self.v_net.n_params()],
            h: vec![0.0; self.h_net.n_params()],
            x1: vec![0.0; self.x1_net.n_params()],
            x2: vec![0.0; self.x2_net.n_params()],
        }
    }

    pub fn net(&self, head: Head) -> &TwoLayerNet {
        match head {
            Head::Value => &self.v_net,
            Head::Slack => &self.h_net,
            Head::Mass => &self.x1_net,
            Head::Logits => &self.x2_net,
        }
    }

    pub fn net_mut(&mut self, head: Head) -> &mut TwoLayerNet {
        match head {
            Head::Value => &mut self.v_net,
            Head::Slack => &mut self.h_net,
            Head::Mass => &mut self.x1_net,
            Head::Logits => &mut self.x2_net,
        }
    }

    pub fn value(&self, s: usize) -> f64 {
        self.v_net.forward(self.features.state(s))
    }

    pub fn value_target(&self, s: usize) -> f64 {
        self.v_target.forward(self.features.state(s))
    }

    pub fn slack(&self, s: usize, a: usize) -> f64 {
        self.slack_scale * sigmoid(self.h_net.forward(self.features.pair(s, a)))
    }

    /// Slack for every action at `s`, each in `[0, C]`.
    pub fn slack_all(&self, s: usize) -> Vec<f64> {
        (0..self.n_actions()).map(|a| self.slack(s, a)).collect()
    }

    fn multiplier_with(&self, x1: &TwoLayerNet, x2: &TwoLayerNet, s: usize) -> MultiplierOutput {
        let mass = softplus(x1.forward(self.features.state(s)));
        let logits: Vec<f64> = (0..self.n_actions())
            .map(|a| x2.forward(self.features.pair(s, a)))
            .collect();
        let probs = softmax(&logits);
        let x = probs.iter().map(|p| mass * p).collect();
        MultiplierOutput { mass, probs, x }
    }

    pub fn multiplier(&self, s: usize) -> MultiplierOutput {
        self.multiplier_with(&self.x1_net, &self.x2_net, s)
    }

    pub fn multiplier_target(&self, s: usize) -> MultiplierOutput {
        self.multiplier_with(&self.x1_target, &self.x2_target, s)
    }

    pub fn x(&self, s: usize, a: usize) -> f64 {
        self.multiplier(s).x[a]
    }

    pub fn x_target(&self, s: usize, a: usize) -> f64 {
        self.multiplier_target(s).x[a]
    }

    pub fn value_grad(&self, s: usize, coef: f64, out: &mut BundleGrad) {
        self.v_net.accumulate_grad(self.features.state(s), coef, &mut out.v);
    }

    pub fn slack_grad(&self, s: usize, a: usize, coef: f64, out: &mut BundleGrad) {
        let input = self.features.pair(s, a);
        let sg = sigmoid(self.h_net.forward(input));
        let c = coef * self.slack_scale * sg * (1.0 - sg);
        self.h_net.accumulate_grad(input, c, &mut out.h);
    }

    /// Gradient of `x(s, a)` in both multiplier heads, given the forward
    /// output at `s`.
    pub fn multiplier_grad(&self, s: usize, a: usize, fwd: &MultiplierOutput, coef: f64, out: &mut BundleGrad) {
        if coef == 0.0 {
            return;
        }
        let state = self.features.state(s);
        let raw1 = self.x1_net.forward(state);
        // d softplus = sigmoid
        let c1 = coef * fwd.probs[a] * sigmoid(raw1);
        self.x1_net.accumulate_grad(state, c1, &mut out.x1);
        // d p_a / d l_b = p_a (1{a=b} - p_b)
        let base = coef * fwd.mass * fwd.probs[a];
        for b in 0..self.n_actions() {
            let ind = if a == b { 1.0 } else { 0.0 };
            let c = base * (ind - fwd.probs[b]);
            self.x2_net.accumulate_grad(self.features.pair(s, b), c, &mut out.x2);
        }
    }

    /// Gradient of `sum_a coefs[a] x(s, a)` in both multiplier heads; one
    /// backward pass per action instead of one per `(a, b)` pair.
    pub fn multiplier_grad_row(&self, s: usize, fwd: &MultiplierOutput, coefs: &[f64], out: &mut BundleGrad) {
        if coefs.iter().all(|&c| c == 0.0) {
            return;
        }
        let dot: f64 = coefs.iter().zip(&fwd.probs).map(|(c, p)| c * p).sum();
        let state = self.features.state(s);
        let raw1 = self.x1_net.forward(state);
        self.x1_net.accumulate_grad(state, dot * sigmoid(raw1), &mut out.x1);
        for (b, (&c, &p)) in coefs.iter().zip(&fwd.probs).enumerate() {
            self.x2_net
                .accumulate_grad(self.features.pair(s, b), fwd.mass * p * (c - dot), &mut out.x2);
        }
    }

    /// Copy the live value and multiplier networks into the targets.
    pub fn sync_target(&mut self) {
        self.v_target.clone_from(&self.v_net);
        self.x1_target.clone_from(&self.x1_net);
        self.x2_target.clone_from(&self.x2_net);
    }

    pub fn project_ball(&mut self, radius: f64) {
        for head in HEADS {
            self.net_mut(head).project_ball(radius);
        }
    }

    /// Greedy action per state from the softmax head.
    pub fn greedy_actions(&self) -> Vec<usize> {
        (0..self.n_states())
            .map(|s| crate::mdp::argmax(&self.multiplier(s).probs))
            .collect()
    }

    /// Softmax-head policy table.
    pub fn policy(&self) -> Result<crate::mdp::Policy> {
        let probs: Vec<f64> = (0..self.n_states()).flat_map(|s| self.multiplier(s).probs).collect();
        crate::mdp::Policy::from_probs(self.n_states(), self.n_actions(), probs)
    }

    /// Apply one optimizer step per head: clip locally, then Adam.
    pub fn apply(&mut self, mut grad: BundleGrad, opts: &mut [OptState; 4]) -> Result<()> {
        for (k, head) in HEADS.into_iter().enumerate() {
            let g = grad.head_mut(head);
            clip_local(g);
            opts[k].adam_step(self.net_mut(head).weights_mut(), g)?;
        }
        Ok(())
    }

    pub fn optimizers(&self, lr: [f64; 4], anneal_horizon: u64) -> [OptState; 4] {
        let mut k = 0;
        HEADS.map(|head| {
            let o = OptState::new(self.net(head).n_params(), lr[k], anneal_horizon);
            k += 1;
            o
        })
    }
}

/// Lower bound on `1 - tanh(u)^2` used by the change of variables.
pub const TANH_EPS: f64 = 1e-6;

/// Multiplier head for a box action space `(-a_bar, a_bar)^d`.
///
/// `a = a_bar tanh(u)` with `u ~ N(mean(s), sigma^2 I)`; the multiplier is
/// `x1(s)` times the density of `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousHead {
    pub x1_net: TwoLayerNet,
    pub mean_nets: Vec<TwoLayerNet>,
}

impl ContinuousHead {
    pub fn new<R: Rng + ?Sized>(width: usize, state_dim: usize, action_dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            x1_net: TwoLayerNet::init(width, state_dim, rng)?,
            mean_nets: (0..action_dim)
                .map(|_| TwoLayerNet::init(width, state_dim, rng))
                .collect::<Result<_>>()?,
        })
    }

    pub fn mass(&self, state: &Input) -> f64 {
        softplus(self.x1_net.forward(state))
    }

    pub fn mean(&self, state: &Input) -> Vec<f64> {
        self.mean_nets.iter().map(|n| n.forward(state)).collect()
    }

    /// `x1(s) exp(log f(u|s) - sum log(a_bar (1 - tanh(u)^2)))`.
    pub fn forward_multiplier_continuous(&self, state: &Input, u: &[f64], sigma: f64, a_bar: f64) -> Result<f64> {
        check_len("pre-squash action", u.len(), self.mean_nets.len())?;
        if !(sigma > 0.0) || !(a_bar > 0.0) {
            return Err(Error::Invalid("sigma and action bound must be positive".into()));
        }
        let mean = self.mean(state);
        let mut log_f = 0.0;
        let mut log_jac = 0.0;
        for (ui, mi) in u.iter().zip(&mean) {
            let z = (ui - mi) / sigma;
            log_f += -0.5 * z * z - (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
            let t = ui.tanh();
            log_jac += (a_bar * (1.0 - t * t).max(TANH_EPS)).ln();
        }
        Ok(self.mass(state) * (log_f - log_jac).exp())
    }

    /// Same density evaluated at an action `a` in the open box.
    pub fn density_at_action(&self, state: &Input, a: &[f64], sigma: f64, a_bar: f64) -> Result<f64> {
        let u: Vec<f64> = a
            .iter()
            .map(|ai| (ai / a_bar).clamp(-1.0 + 1e-15, 1.0 - 1e-15).atanh())
            .collect();
        self.forward_multiplier_continuous(state, &u, sigma, a_bar)
    }
}
