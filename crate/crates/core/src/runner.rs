//! Experiment configuration and the driver behind the `scal` binary.
//!
//! Configs are flat `key = value` text with dotted sections
//! (`scal.mu = 1.0`); command-line flags use the same keys
//! (`--scal.mu 1.0`). Resolution order is command preset, then config
//! file, then flags. The fully resolved config is written back as
//! `config.echo`, which can be fed to `--config` to repeat the run.

use std::fmt::Display;
use std::fs;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::analysis::{
    best_so_far, dominated_action_mdp, error_terms, grad_variance_ablation, ntk_residual_track, perturbation_bound,
    proximal_map, scaling_ratio_check, strong_convexity_probe, weighted_sq_dist, NtkConfig,
};
use crate::envs::{chain_mdp, Environment, InventoryConfig};
use crate::lp::{
    alm_iterate, dual_residuals, greedy_policy, oracle_report, policy_from_multiplier, run_alm, AlmState,
    InnerOptions, WeightFn,
};
use crate::mdp::{dot, max_abs, TabularMdp};
use crate::rng::stream;
use crate::scal::{deep_alm_train, scal_train, LogRow, ScalConfig, TrainingLog};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("bad config: {0}")]
    Config(String),

    #[error("{component} failed: {source}")]
    Runtime {
        component: &'static str,
        #[source]
        source: crate::Error,
    },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Runtime { .. } => 1,
        }
    }
}

trait Component<T> {
    fn within(self, component: &'static str) -> Result<T, RunError>;
}

impl<T, E: Into<crate::Error>> Component<T> for std::result::Result<T, E> {
    fn within(self, component: &'static str) -> Result<T, RunError> {
        self.map_err(|e| match e.into() {
            crate::Error::Config(msg) => RunError::Config(msg),
            source => RunError::Runtime { component, source },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Oracle,
    Alm,
    Scal,
    DeepAlm,
    AblateGrad,
    AblateMultistep,
    Verify,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::Oracle,
        Command::Alm,
        Command::Scal,
        Command::DeepAlm,
        Command::AblateGrad,
        Command::AblateMultistep,
        Command::Verify,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Oracle => "oracle",
            Command::Alm => "alm",
            Command::Scal => "scal",
            Command::DeepAlm => "deep-alm",
            Command::AblateGrad => "ablate-grad",
            Command::AblateMultistep => "ablate-multistep",
            Command::Verify => "verify",
        }
    }
}

impl FromStr for Command {
    type Err = RunError;

    fn from_str(s: &str) -> Result<Self, RunError> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Command::ALL.iter().map(|c| c.name()).collect();
                RunError::Config(format!("unknown command '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    Inventory,
    Chain,
    MdpFile,
}

impl EnvKind {
    fn name(self) -> &'static str {
        match self {
            EnvKind::Inventory => "inventory",
            EnvKind::Chain => "chain",
            EnvKind::MdpFile => "mdp-file",
        }
    }
}

impl FromStr for EnvKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "inventory" => Ok(EnvKind::Inventory),
            "chain" => Ok(EnvKind::Chain),
            "mdp-file" => Ok(EnvKind::MdpFile),
            _ => Err("expected inventory, chain or mdp-file".into()),
        }
    }
}

/// Every knob of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub command: Command,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub env: EnvKind,
    /// Chain length.
    pub n: usize,
    /// Discount for the chain and inventory environments.
    pub gamma: f64,
    /// Chain slip probability.
    pub noise: f64,
    pub mdp_path: Option<PathBuf>,
    pub episode_len: usize,
    pub inventory: InventoryConfig,
    pub alm_mu: f64,
    pub alm_tol: f64,
    pub alm_max_outer: usize,
    pub scal: ScalConfig,
    pub inner_steps: usize,
    pub grad_samples: usize,
    pub lookaheads: Vec<usize>,
    /// Fraction of the optimal return that counts as solved.
    pub threshold: f64,
}

const ALIASES: &[(&str, &str)] = &[
    ("env", "env.kind"),
    ("n", "env.n"),
    ("gamma", "env.gamma"),
    ("noise", "env.noise"),
    ("steps", "scal.total_steps"),
    ("seed", "seeds"),
    ("mu", "scal.mu"),
    ("beta", "scal.beta"),
];

impl ExperimentConfig {
    /// Defaults for `command`.
    pub fn preset(command: Command) -> Self {
        let mut cfg = Self {
            command,
            seeds: (0..5).collect(),
            out: PathBuf::from("runs").join(command.name()),
            env: EnvKind::Chain,
            n: 5,
            gamma: 0.9,
            noise: 0.1,
            mdp_path: None,
            episode_len: 50,
            inventory: InventoryConfig::default(),
            alm_mu: 100.0,
            alm_tol: 1e-6,
            alm_max_outer: 200,
            scal: ScalConfig::default(),
            inner_steps: 500,
            grad_samples: 20,
            lookaheads: vec![1, 3, 5],
            threshold: 0.9,
        };
        match command {
            Command::AblateGrad => {
                cfg.noise = 0.3;
                cfg.scal.total_steps = 20_000;
            }
            Command::AblateMultistep => {
                cfg.n = 8;
                cfg.gamma = 0.99;
                cfg.scal.total_steps = 20_000;
                cfg.scal.eval_every = 50;
            }
            Command::DeepAlm => {
                cfg.scal.total_steps = 20_000;
            }
            _ => {}
        }
        cfg
    }

    /// Build from ordered `(key, value)` pairs. The command comes from
    /// `command` if given, else from a `command` pair.
    pub fn resolve(command: Option<&str>, pairs: &[(String, String)]) -> Result<Self, RunError> {
        let from_pairs = pairs.iter().rev().find(|(k, _)| k == "command").map(|(_, v)| v.as_str());
        let name = command
            .or(from_pairs)
            .ok_or_else(|| RunError::Config("no command given".into()))?;
        let mut cfg = Self::preset(name.parse()?);
        for (k, v) in pairs {
            if k != "command" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Assign one key; aliases are expanded first.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), RunError> {
        let key = ALIASES.iter().find(|(a, _)| *a == key).map_or(key, |(_, k)| k);
        let value = value.trim();
        let s = &mut self.scal;
        let inv = &mut self.inventory;
        match key {
            "command" => self.command = value.parse()?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "env.kind" => self.env = value.parse().map_err(|e| bad(key, value, e))?,
            "env.n" => self.n = parse(key, value)?,
            "env.gamma" => self.gamma = parse(key, value)?,
            "env.noise" => self.noise = parse(key, value)?,
            "env.path" => self.mdp_path = parse_opt::<String>(key, value)?.map(PathBuf::from),
            "env.episode_len" => self.episode_len = parse(key, value)?,
            "inventory.m" => inv.m = parse(key, value)?,
            "inventory.k" => inv.k = parse(key, value)?,
            "inventory.c" => inv.c = parse(key, value)?,
            "inventory.h" => inv.h = parse(key, value)?,
            "inventory.p" => inv.p = parse(key, value)?,
            "inventory.lambda" => inv.lambda = parse(key, value)?,
            "alm.mu" => self.alm_mu = parse(key, value)?,
            "alm.tol" => self.alm_tol = parse(key, value)?,
            "alm.max_outer" => self.alm_max_outer = parse(key, value)?,
            "scal.mu" => s.mu = parse(key, value)?,
            "scal.beta" => s.beta = parse(key, value)?,
            "scal.lr_v" => s.lr_v = parse(key, value)?,
            "scal.lr_h" => s.lr_h = parse(key, value)?,
            "scal.lr_x" => s.lr_x = parse(key, value)?,
            "scal.batch" => s.batch = parse(key, value)?,
            "scal.target_period" => s.target_period = parse(key, value)?,
            "scal.total_steps" => s.total_steps = parse(key, value)?,
            "scal.lookahead" => s.lookahead = parse(key, value)?,
            "scal.eps_start" => s.eps_start = parse(key, value)?,
            "scal.eps_end" => s.eps_end = parse(key, value)?,
            "scal.explore_fraction" => s.explore_fraction = parse(key, value)?,
            "scal.ntk_radius" => s.ntk_radius = parse_opt(key, value)?,
            "scal.width" => s.width = parse(key, value)?,
            "scal.leak" => s.leak = parse(key, value)?,
            "scal.capacity" => s.capacity = parse(key, value)?,
            "scal.reward_scale" => s.reward_scale = parse_opt(key, value)?,
            "scal.slack_scale" => s.slack_scale = parse_opt(key, value)?,
            "scal.eval_every" => s.eval_every = parse(key, value)?,
            "scal.anneal_horizon" => s.anneal_horizon = parse_opt(key, value)?,
            "scal.eps_prio" => s.eps_prio = parse(key, value)?,
            "deep.inner_steps" => self.inner_steps = parse(key, value)?,
            "ablate.samples" => self.grad_samples = parse(key, value)?,
            "ablate.lookaheads" => self.lookaheads = parse_list(key, value)?,
            "ablate.threshold" => self.threshold = parse(key, value)?,
            _ => return Err(RunError::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Canonical `(key, value)` pairs; `resolve` on them rebuilds `self`.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.scal;
        let inv = &self.inventory;
        vec![
            ("command", self.command.name().to_string()),
            ("seeds", join(&self.seeds)),
            ("out", self.out.display().to_string()),
            ("env.kind", self.env.name().to_string()),
            ("env.n", self.n.to_string()),
            ("env.gamma", self.gamma.to_string()),
            ("env.noise", self.noise.to_string()),
            ("env.path", show_opt(&self.mdp_path.as_ref().map(|p| p.display()))),
            ("env.episode_len", self.episode_len.to_string()),
            ("inventory.m", inv.m.to_string()),
            ("inventory.k", inv.k.to_string()),
            ("inventory.c", inv.c.to_string()),
            ("inventory.h", inv.h.to_string()),
            ("inventory.p", inv.p.to_string()),
            ("inventory.lambda", inv.lambda.to_string()),
            ("alm.mu", self.alm_mu.to_string()),
            ("alm.tol", self.alm_tol.to_string()),
            ("alm.max_outer", self.alm_max_outer.to_string()),
            ("scal.mu", s.mu.to_string()),
            ("scal.beta", s.beta.to_string()),
            ("scal.lr_v", s.lr_v.to_string()),
            ("scal.lr_h", s.lr_h.to_string()),
            ("scal.lr_x", s.lr_x.to_string()),
            ("scal.batch", s.batch.to_string()),
            ("scal.target_period", s.target_period.to_string()),
            ("scal.total_steps", s.total_steps.to_string()),
            ("scal.lookahead", s.lookahead.to_string()),
            ("scal.eps_start", s.eps_start.to_string()),
            ("scal.eps_end", s.eps_end.to_string()),
            ("scal.explore_fraction", s.explore_fraction.to_string()),
            ("scal.ntk_radius", show_opt(&s.ntk_radius)),
            ("scal.width", s.width.to_string()),
            ("scal.leak", s.leak.to_string()),
            ("scal.capacity", s.capacity.to_string()),
            ("scal.reward_scale", show_opt(&s.reward_scale)),
            ("scal.slack_scale", show_opt(&s.slack_scale)),
            ("scal.eval_every", s.eval_every.to_string()),
            ("scal.anneal_horizon", show_opt(&s.anneal_horizon)),
            ("scal.eps_prio", s.eps_prio.to_string()),
            ("deep.inner_steps", self.inner_steps.to_string()),
            ("ablate.samples", self.grad_samples.to_string()),
            ("ablate.lookaheads", join(&self.lookaheads)),
            ("ablate.threshold", self.threshold.to_string()),
        ]
    }

    /// The `config.echo` text.
    pub fn echo(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<(), RunError> {
        if self.seeds.is_empty() {
            return Err(RunError::Config("seeds must list at least one seed".into()));
        }
        if self.env == EnvKind::MdpFile && self.mdp_path.is_none() {
            return Err(RunError::Config("env.kind = mdp-file needs env.path".into()));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(RunError::Config(format!("ablate.threshold must lie in (0, 1], got {}", self.threshold)));
        }
        if self.lookaheads.is_empty() || self.lookaheads.contains(&0) {
            return Err(RunError::Config("ablate.lookaheads must be positive integers".into()));
        }
        if self.inner_steps == 0 {
            return Err(RunError::Config("deep.inner_steps must be at least 1".into()));
        }
        if !(self.alm_mu > 0.0 && self.alm_tol > 0.0) {
            return Err(RunError::Config("alm.mu and alm.tol must be positive".into()));
        }
        self.scal.validate().within("config")?;
        Ok(())
    }

    pub fn environment(&self) -> crate::Result<Environment> {
        match self.env {
            EnvKind::Chain => Ok(Environment::from_mdp(chain_mdp(self.n, self.gamma, self.noise)?, self.episode_len)),
            EnvKind::Inventory => Environment::inventory(
                InventoryConfig {
                    gamma: self.gamma,
                    ..self.inventory
                },
                self.episode_len,
            ),
            EnvKind::MdpFile => {
                let path = self.mdp_path.as_ref().expect("validated");
                Ok(Environment::from_mdp(TabularMdp::load(path)?, self.episode_len))
            }
        }
    }

    /// SCAL settings for one seed.
    pub fn scal_for(&self, seed: u64) -> ScalConfig {
        ScalConfig {
            seed,
            ..self.scal.clone()
        }
    }
}

fn bad(key: &str, value: &str, why: impl Display) -> RunError {
    RunError::Config(format!("{key} = '{value}': {why}"))
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, RunError>
where
    T::Err: Display,
{
    value.parse().map_err(|e| bad(key, value, e))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, RunError>
where
    T::Err: Display,
{
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, RunError>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| parse(key, v))
        .collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn show_opt<T: Display>(x: &Option<T>) -> String {
    x.as_ref().map_or_else(|| "none".to_string(), |v| v.to_string())
}

/// Parse config text: one `key = value` per line, `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, RunError> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| RunError::Config(format!("line {}: expected key = value, got '{line}'", i + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Turn `--key value`, `--key=value` and `--config path` arguments into
/// ordered pairs, splicing config files in where they appear.
pub fn parse_args(args: &[String]) -> Result<Vec<(String, String)>, RunError> {
    let mut pairs = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let flag = arg
            .strip_prefix("--")
            .ok_or_else(|| RunError::Config(format!("expected a --key flag, got '{arg}'")))?;
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| RunError::Config(format!("flag --{flag} needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        if key == "config" {
            let text = fs::read_to_string(&value)
                .map_err(|e| RunError::Config(format!("cannot read config file {value}: {e}")))?;
            pairs.extend(parse_config_text(&text)?);
        } else {
            pairs.push((key, value));
        }
    }
    Ok(pairs)
}

/// One `metrics.csv` row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub step: usize,
    pub window_return: f64,
    pub objective: f64,
    pub penalty_residual: f64,
    pub mass_estimate: f64,
    pub lr: f64,
}

impl MetricsRow {
    fn from_log(seed: u64, r: &LogRow) -> Self {
        Self {
            seed,
            step: r.step,
            window_return: r.window_return,
            objective: r.objective,
            penalty_residual: r.penalty_residual,
            mass_estimate: r.mass_estimate,
            lr: r.lr,
        }
    }
}

/// One verify check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl Check {
    fn at_most(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            threshold,
            pass: measured <= threshold,
        }
    }

    fn at_least(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            threshold,
            pass: measured >= threshold,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "CHECK {} {:.6e} {:.6e} {}",
            self.name,
            self.measured,
            self.threshold,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

/// What a run produced.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub rows: Vec<MetricsRow>,
    pub checks: Vec<Check>,
    /// Human-readable summary for the terminal.
    pub console: String,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Execute the configured command, writing its files under `cfg.out`.
pub fn run(cfg: &ExperimentConfig) -> Result<Outcome, RunError> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out).within("output directory")?;
    fs::write(cfg.out.join("config.echo"), cfg.echo()).within("output directory")?;
    let env = cfg.environment().within("environment")?;
    let mut outcome = Outcome::default();
    match cfg.command {
        Command::Oracle => outcome.rows = run_oracle(cfg, &env, &mut outcome.console)?,
        Command::Alm => outcome.rows = run_alm_cmd(cfg, &env)?,
        Command::Scal | Command::DeepAlm => {
            for &seed in &cfg.seeds {
                let sc = cfg.scal_for(seed);
                let out = if cfg.command == Command::Scal {
                    scal_train(&env, &sc).within("scal")?
                } else {
                    deep_alm_train(&env, &sc, cfg.inner_steps).within("deep-alm")?
                };
                outcome.rows.extend(out.log.rows.iter().map(|r| MetricsRow::from_log(seed, r)));
            }
        }
        Command::AblateGrad => outcome.rows = run_ablate_grad(cfg, &env, &mut outcome.console)?,
        Command::AblateMultistep => {
            run_ablate_multistep(cfg, &env, &mut outcome.console)?;
            return Ok(outcome);
        }
        Command::Verify => {
            outcome.checks = run_verify(cfg)?;
            let report: String = outcome.checks.iter().map(|c| c.line() + "\n").collect();
            fs::write(cfg.out.join("report.txt"), &report).within("report")?;
            outcome.console.push_str(&report);
        }
    }
    if let Some(last) = outcome.rows.iter().map(|r| r.step).max() {
        let xs: Vec<f64> = outcome.rows.iter().filter(|r| r.step == last).map(|r| r.window_return).collect();
        let (m, sd) = mean_std(&xs);
        let _ = writeln!(outcome.console, "step {last}: return {m:.4} +/- {sd:.4} over {} seed(s)", xs.len());
    }
    write_metrics(&cfg.out.join("metrics.csv"), None, &outcome.rows).within("metrics")?;
    write_summary(&cfg.out.join("summary.csv"), &outcome.rows).within("summary")?;
    Ok(outcome)
}

fn write_metrics(path: &Path, lookahead: Option<usize>, rows: &[MetricsRow]) -> crate::Result<()> {
    let mut file = fs::File::create(path)?;
    if let Some(l) = lookahead {
        writeln!(file, "# lookahead={l}")?;
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(["seed", "step", "window_return", "objective", "penalty_residual", "mass_estimate", "lr"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean and sample standard deviation of a column.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Serialize)]
struct SummaryRow {
    step: usize,
    seeds: usize,
    mean_return: f64,
    std_return: f64,
}

/// Per-step mean and standard deviation of the return across seeds.
fn write_summary(path: &Path, rows: &[MetricsRow]) -> crate::Result<()> {
    let mut steps: Vec<usize> = rows.iter().map(|r| r.step).collect();
    steps.sort_unstable();
    steps.dedup();
    let mut w = csv::Writer::from_path(path)?;
    if steps.is_empty() {
        w.write_record(["step", "seeds", "mean_return", "std_return"])?;
    }
    for step in steps {
        let xs: Vec<f64> = rows.iter().filter(|r| r.step == step).map(|r| r.window_return).collect();
        let (mean_return, std_return) = mean_std(&xs);
        w.serialize(SummaryRow {
            step,
            seeds: xs.len(),
            mean_return,
            std_return,
        })?;
    }
    w.flush()?;
    Ok(())
}

fn run_oracle(cfg: &ExperimentConfig, env: &Environment, console: &mut String) -> Result<Vec<MetricsRow>, RunError> {
    let mdp = env.model();
    let report = oracle_report(mdp, cfg.alm_tol, cfg.alm_mu, cfg.alm_max_outer).within("oracle")?;
    let pi = greedy_policy(mdp, &report.v_star).within("oracle")?;
    let ret = env.evaluate(&pi).within("oracle")?;
    let _ = writeln!(console, "state  V*            action");
    for (s, (v, a)) in report.v_star.iter().zip(&report.greedy_actions).enumerate() {
        let _ = writeln!(console, "{s:<6} {v:<13.6} {a}");
    }
    let _ = writeln!(
        console,
        "bellman residual {:.3e} (tol {:.1e}), ALM dual residual {:.3e}",
        report.bellman_residual, cfg.alm_tol, report.dual_residual
    );
    fs::write(
        cfg.out.join("oracle.json"),
        serde_json::to_string_pretty(&report).within("oracle")?,
    )
    .within("oracle")?;
    if report.bellman_residual > cfg.alm_tol {
        return Err(RunError::Runtime {
            component: "oracle",
            source: crate::Error::NoConvergence {
                solver: "value iteration",
                iterations: 0,
                achieved: report.bellman_residual,
                tol: cfg.alm_tol,
            },
        });
    }
    let w = WeightFn::for_mdp(mdp);
    let mass: f64 = dot(w.as_slice(), &report.x_star);
    Ok(cfg
        .seeds
        .iter()
        .map(|&seed| MetricsRow {
            seed,
            step: 0,
            window_return: ret,
            objective: dot(mdp.rho0(), &report.v_star),
            penalty_residual: report.bellman_residual,
            mass_estimate: mass,
            lr: f64::NAN,
        })
        .collect())
}

/// Tabular ALM from zero; one row per outer iteration.
fn run_alm_cmd(cfg: &ExperimentConfig, env: &Environment) -> Result<Vec<MetricsRow>, RunError> {
    let mdp = env.model();
    let w = WeightFn::for_mdp(mdp);
    let opts = InnerOptions::newton(cfg.alm_tol.min(1e-9));
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let mut state = AlmState::zeros(mdp, cfg.alm_mu);
        for _ in 0..cfg.alm_max_outer {
            let next = alm_iterate(mdp, &w, &state, &opts).within("alm")?;
            let (_, dual) = dual_residuals(mdp, &w, &next.x).within("alm")?;
            let change = max_abs(next.x.iter().zip(&state.x).map(|(a, b)| a - b));
            let pi = policy_from_multiplier(&w, &next.x).within("alm")?;
            rows.push(MetricsRow {
                seed,
                step: next.iteration,
                window_return: env.evaluate(&pi).within("alm")?,
                objective: dot(mdp.rho0(), &next.v),
                penalty_residual: dual,
                mass_estimate: dot(w.as_slice(), &next.x),
                lr: f64::NAN,
            });
            state = next;
            if dual <= cfg.alm_tol && change <= cfg.alm_tol * cfg.alm_mu {
                break;
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Serialize)]
struct VarianceRow {
    seed: u64,
    step: usize,
    unbias: f64,
    bias: f64,
}

fn run_ablate_grad(cfg: &ExperimentConfig, env: &Environment, console: &mut String) -> Result<Vec<MetricsRow>, RunError> {
    let mut rows = Vec::new();
    let mut var = csv::Writer::from_path(cfg.out.join("variance.csv")).within("ablate-grad")?;
    for &seed in &cfg.seeds {
        let ab = grad_variance_ablation(env, &cfg.scal_for(seed), cfg.grad_samples).within("ablate-grad")?;
        let _ = writeln!(
            console,
            "seed {seed}: mean trace variance unbias {:.6e} bias {:.6e} over {} checkpoints",
            ab.mean_unbias(),
            ab.mean_bias(),
            ab.records.len()
        );
        for r in &ab.records {
            var.serialize(VarianceRow {
                seed,
                step: r.step,
                unbias: r.unbias,
                bias: r.bias,
            })
            .within("ablate-grad")?;
        }
        rows.extend(ab.log.rows.iter().map(|r| MetricsRow::from_log(seed, r)));
    }
    var.flush().within("ablate-grad")?;
    Ok(rows)
}

/// Median with `None` (never reached) sorted last.
pub fn median_steps(mut xs: Vec<Option<usize>>) -> Option<usize> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by_key(|x| x.unwrap_or(usize::MAX));
    xs[(xs.len() - 1) / 2]
}

#[derive(Debug, Serialize)]
struct ThresholdRow {
    lookahead: usize,
    seed: u64,
    first_step: Option<usize>,
}

/// Steps to reach `threshold` of the optimal return, per lookahead.
fn run_ablate_multistep(
    cfg: &ExperimentConfig,
    env: &Environment,
    console: &mut String,
) -> Result<Vec<(usize, Option<usize>)>, RunError> {
    let target = cfg.threshold * optimal_return(env).within("oracle")?;
    let mut table = csv::Writer::from_path(cfg.out.join("threshold.csv")).within("ablate-multistep")?;
    let mut medians = Vec::new();
    for &l in &cfg.lookaheads {
        let mut rows = Vec::new();
        let mut firsts = Vec::new();
        for &seed in &cfg.seeds {
            let sc = ScalConfig {
                lookahead: l,
                ..cfg.scal_for(seed)
            };
            let out = scal_train(env, &sc).within("ablate-multistep")?;
            let first = first_reaching(&out.log, target);
            table
                .serialize(ThresholdRow {
                    lookahead: l,
                    seed,
                    first_step: first,
                })
                .within("ablate-multistep")?;
            firsts.push(first);
            rows.extend(out.log.rows.iter().map(|r| MetricsRow::from_log(seed, r)));
        }
        write_metrics(&cfg.out.join(format!("metrics_l{l}.csv")), Some(l), &rows).within("metrics")?;
        let med = median_steps(firsts);
        let _ = writeln!(
            console,
            "lookahead {l}: median steps to {:.0}% of optimal = {}",
            cfg.threshold * 100.0,
            med.map_or("never".to_string(), |m| m.to_string())
        );
        medians.push((l, med));
    }
    table.flush().within("ablate-multistep")?;
    Ok(medians)
}

fn first_reaching(log: &TrainingLog, target: f64) -> Option<usize> {
    log.first_step_reaching(target)
}

/// Return of the greedy policy of `V*`, scored like the learning curves.
pub fn optimal_return(env: &Environment) -> crate::Result<f64> {
    let v = crate::lp::value_iteration(env.model(), 1e-10)?;
    env.evaluate(&greedy_policy(env.model(), &v)?)
}

/// Tabular lemma checks on small random instances, one block per seed.
fn run_verify(cfg: &ExperimentConfig) -> Result<Vec<Check>, RunError> {
    let mut checks = Vec::new();
    for &seed in &cfg.seeds {
        let tag = |name: &str| format!("{name}/seed{seed}");
        let mut rng = stream(seed);

        let mdp = dominated_action_mdp(3, 2, 0.5, 30.0, &mut rng).within("verify")?;
        let w = WeightFn::for_mdp(&mdp);
        let rep = scaling_ratio_check(&mdp, &w, 1.0, 1.0, 1e-10).within("scaling ratios")?;
        checks.push(Check::at_most(tag("xi2_scaling"), rep.x_deviation, 1e-4));

        let probe = strong_convexity_probe(1.0, 1.0, 1000, &mut rng).within("convexity probe")?;
        checks.push(Check::at_least(
            tag("x_block_constant"),
            probe.x_block_constant,
            probe.x_block_bound - 1e-10,
        ));
        checks.push(Check::at_least(tag("min_quadratic_quotient"), probe.min_quotient, -1e-10));

        let mdp = TabularMdp::random(5, 3, 0.9, &mut rng).within("verify")?;
        let w = WeightFn::for_mdp(&mdp);
        let tol = 1e-9;
        let run = run_alm(&mdp, &w, cfg.alm_mu, &InnerOptions::newton(tol), cfg.alm_max_outer, 1e-6).within("alm")?;
        let v_star = crate::lp::value_iteration(&mdp, 1e-10).within("oracle")?;
        let gap = max_abs(run.state.v.iter().zip(&v_star).map(|(a, b)| a - b));
        checks.push(Check::at_most(tag("alm_matches_value_iteration"), gap, 1e-4));
        let mass = dot(w.as_slice(), &run.state.x);
        checks.push(Check::at_most(
            tag("occupancy_mass"),
            (mass - 1.0 / (1.0 - mdp.gamma())).abs(),
            1e-3,
        ));

        let mut worst_eps = 0.0f64;
        let mut state = AlmState::zeros(&mdp, cfg.alm_mu);
        for _ in 0..20 {
            let next = alm_iterate(&mdp, &w, &state, &InnerOptions::newton(tol)).within("alm")?;
            let e = error_terms(&mdp, &w, &state, &next, cfg.alm_mu, tol).within("error terms")?;
            worst_eps = worst_eps.max(e.eps_l.abs()).max(e.eps_x.abs());
            state = next;
        }
        checks.push(Check::at_most(tag("exact_alm_error_terms"), worst_eps, 10.0 * tol));

        let mut worst_expansion = f64::NEG_INFINITY;
        let mut worst_bound = f64::NEG_INFINITY;
        for _ in 0..10 {
            let x1: Vec<f64> = (0..mdp.n_pairs()).map(|_| 20.0 * rng.random::<f64>()).collect();
            let x2: Vec<f64> = (0..mdp.n_pairs()).map(|_| 20.0 * rng.random::<f64>()).collect();
            let t1 = proximal_map(&mdp, &w, &x1, 1.0, 1e-10).within("proximal map")?;
            let t2 = proximal_map(&mdp, &w, &x2, 1.0, 1e-10).within("proximal map")?;
            worst_expansion = worst_expansion.max(weighted_sq_dist(&w, &t1, &t2) - weighted_sq_dist(&w, &x1, &x2));

            let k = AlmState {
                x: x1.clone(),
                ..AlmState::zeros(&mdp, 1.0)
            };
            let mut k1 = alm_iterate(&mdp, &w, &k, &InnerOptions::newton(1e-10)).within("alm")?;
            for v in k1.v.iter_mut() {
                *v += 0.1 * (rng.random::<f64>() - 0.5);
            }
            for x in k1.x.iter_mut() {
                *x = (*x + 0.1 * (rng.random::<f64>() - 0.5)).max(0.0);
            }
            let b = perturbation_bound(&mdp, &w, &k, &k1, 1.0, 1e-10).within("perturbation bound")?;
            worst_bound = worst_bound.max(b.lhs - b.rhs);
        }
        checks.push(Check::at_most(tag("proximal_nonexpansive"), worst_expansion, 1e-9));
        checks.push(Check::at_most(tag("perturbation_bound"), worst_bound, 1e-9));

        let mdp = TabularMdp::random(3, 2, 0.5, &mut rng).within("verify")?;
        let ntk = NtkConfig {
            seed,
            ..NtkConfig::default()
        };
        let series = ntk_residual_track(&mdp, &ntk).within("ntk residual track")?;
        let best = best_so_far(&series);
        let decay = best[0] / best[best.len() - 1];
        checks.push(Check::at_least(tag("ntk_residual_decay"), decay, 10.0));
    }
    Ok(checks)
}
