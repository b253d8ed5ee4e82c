//! Closed-loop evaluation.
//!
//! An ABIL agent perceives, picks an operator from the plan skeleton, and
//! lets that operator's policy choose the action. The baseline maps the
//! state straight to an action. Success is reaching the goal before the
//! horizon; rates are averaged over episodes and reported per seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expert::controller_plan;
use crate::grid::{self, Action, EnvError, EnvState, Split, Task, TaskConfig};
use crate::perception::Grounder;
use crate::policy::{select_operator_with, Actor, BcBaseline, Fallback, PolicyError, Selection};
use crate::symbolic::{plan_skeleton, GroundAtom};

/// Environment seeds used for evaluation start here, far from training seeds.
pub const EVAL_SEED_BASE: u64 = 1 << 40;
const SEED_STRIDE: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RunError {
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("agent `{0}` needs models that were not provided")]
    MissingModels(AgentKind),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Abil,
    Bc,
}

impl std::fmt::Display for AgentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AgentKind::Abil => "abil",
            AgentKind::Bc => "bc",
        })
    }
}

impl std::str::FromStr for AgentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "abil" => Ok(AgentKind::Abil),
            "bc" => Ok(AgentKind::Bc),
            _ => Err(format!("unknown agent `{s}` (expected abil or bc)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub task: Task,
    pub split: Split,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub agent: AgentKind,
    pub horizon: u32,
    /// Probability of flipping each grounded atom per step.
    pub noise: f64,
    pub fallback: Fallback,
}

impl EvalConfig {
    pub fn new(task: Task, split: Split, agent: AgentKind) -> Self {
        Self { task, split, episodes: 100, seeds: vec![0, 1, 2], agent, horizon: 64, noise: 0.0, fallback: Fallback::FirstOperator }
    }

    fn validate(&self) -> Result<(), RunError> {
        if self.episodes == 0 {
            return Err(RunError::Config("episodes must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(RunError::Config("at least one seed is required".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(RunError::Config(format!("noise {} outside [0, 1]", self.noise)));
        }
        Ok(())
    }

    /// Environment config of one episode.
    pub fn episode(&self, seed: u64, episode: usize) -> TaskConfig {
        let mut c = TaskConfig::new(self.task, self.split, EVAL_SEED_BASE + seed * SEED_STRIDE + episode as u64);
        c.horizon = self.horizon;
        c
    }
}

/// Flips each atom independently with probability `p`.
pub fn inject_grounding_noise(truth: &BTreeMap<GroundAtom, bool>, p: f64, rng: &mut ChaCha8Rng) -> BTreeMap<GroundAtom, bool> {
    truth.iter().map(|(a, &v)| (a.clone(), if rng.gen_bool(p) { !v } else { v })).collect()
}

pub fn inject_grounding_noise_seeded(truth: &BTreeMap<GroundAtom, bool>, p: f64, seed: u64) -> BTreeMap<GroundAtom, bool> {
    inject_grounding_noise(truth, p, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Replays the expert's sub-goal controllers for whichever operator is selected.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExpertActor;

impl Actor for ExpertActor {
    /// First action of the controller plan; a finished plan turns left.
    fn act(&self, state: &EnvState, op: &GroundAtom) -> Result<Action, PolicyError> {
        let plan = controller_plan(state, op).map_err(|_| PolicyError::UnknownOperator(op.predicate.clone()))?;
        Ok(plan.first().copied().unwrap_or(Action::TurnLeft))
    }
}

pub enum Controller<'a> {
    Abil { grounder: &'a dyn Grounder, actor: &'a dyn Actor, fallback: Fallback },
    Bc(&'a BcBaseline),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub action: Action,
    /// Selected operator, for ABIL agents.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op: Option<String>,
    #[serde(default)]
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub seed: u64,
    pub success: bool,
    pub steps: Vec<StepLog>,
    /// Set when the agent could not act (e.g. a missing policy).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EpisodeLog {
    pub fn actions(&self) -> Vec<Action> {
        self.steps.iter().map(|s| s.action).collect()
    }
}

/// Runs one episode to success or horizon. `noise_seed` drives grounding noise.
pub fn run_episode(ctrl: &Controller<'_>, cfg: &TaskConfig, noise: f64, noise_seed: u64) -> Result<EpisodeLog, RunError> {
    let mut s = grid::reset(cfg)?;
    let machine = s.bound_machine();
    let skeleton = plan_skeleton(&machine).map_err(|e| RunError::Config(e.to_string()))?;
    let tracked = machine.tracked_atoms();
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut prev: Option<Selection> = None;
    let mut steps = Vec::new();
    let mut error = None;
    while !s.goal_satisfied() && !s.timed_out() {
        let (action, log) = match ctrl {
            Controller::Abil { grounder, actor, fallback } => {
                let picked = grounder.ground(&s, &tracked).map_err(|e| e.to_string()).and_then(|g| {
                    let truth = if noise > 0.0 { inject_grounding_noise(&g.truth, noise, &mut rng) } else { g.truth };
                    let sel = select_operator_with(&truth, &machine, &skeleton, *fallback, prev.as_ref());
                    let a = actor.act(&s, &sel.op).map_err(|e| e.to_string())?;
                    Ok((a, sel))
                });
                match picked {
                    Ok((a, sel)) => {
                        let log = StepLog { action: a, op: Some(sel.op.to_string()), fallback: sel.fallback };
                        prev = Some(sel);
                        (a, log)
                    }
                    Err(e) => {
                        error = Some(e);
                        break;
                    }
                }
            }
            Controller::Bc(bc) => {
                let a = bc.act(&s);
                (a, StepLog { action: a, op: None, fallback: false })
            }
        };
        s = s.step(action)?;
        steps.push(log);
    }
    Ok(EpisodeLog { seed: cfg.seed, success: s.goal_satisfied(), steps, error })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    /// Steps per selected operator, over all episodes.
    pub per_operator: BTreeMap<String, usize>,
    pub fallback_steps: usize,
    pub steps: usize,
    pub agent_errors: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub task: Task,
    pub split: Split,
    pub agent: AgentKind,
    pub episodes: usize,
    pub noise: f64,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub std: f64,
    pub wallclock_ms_per_eval: f64,
    pub telemetry: Telemetry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grounding_accuracy: Option<f64>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, std)
}

pub fn evaluate(cfg: &EvalConfig, ctrl: &Controller<'_>) -> Result<Report, RunError> {
    cfg.validate()?;
    let agent = match ctrl {
        Controller::Abil { .. } => AgentKind::Abil,
        Controller::Bc(_) => AgentKind::Bc,
    };
    if agent != cfg.agent {
        return Err(RunError::Config(format!("config asks for agent {} but {agent} models were given", cfg.agent)));
    }
    let start = Instant::now();
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    let mut telemetry = Telemetry::default();
    for &seed in &cfg.seeds {
        let logs = (0..cfg.episodes)
            .into_par_iter()
            .map(|i| {
                let env = cfg.episode(seed, i);
                run_episode(ctrl, &env, cfg.noise, env.seed ^ 0x6e6f697365)
            })
            .collect::<Result<Vec<_>, _>>()?;
        per_seed.push(logs.iter().filter(|l| l.success).count() as f64 / cfg.episodes as f64);
        for l in &logs {
            telemetry.agent_errors += l.error.is_some() as usize;
            for st in &l.steps {
                telemetry.steps += 1;
                telemetry.fallback_steps += st.fallback as usize;
                if let Some(op) = &st.op {
                    let name = op.split('(').next().unwrap_or(op).to_string();
                    *telemetry.per_operator.entry(name).or_default() += 1;
                }
            }
        }
    }
    let (mean, std) = mean_std(&per_seed);
    let evals = (cfg.episodes * cfg.seeds.len()) as f64;
    Ok(Report {
        task: cfg.task,
        split: cfg.split,
        agent,
        episodes: cfg.episodes,
        noise: cfg.noise,
        seeds: cfg.seeds.clone(),
        per_seed,
        mean,
        std,
        wallclock_ms_per_eval: start.elapsed().as_secs_f64() * 1000.0 / evals,
        telemetry,
        grounding_accuracy: None,
    })
}

pub const CSV_HEADER: &str = "task,mode,agent,seed,episodes,success,wallclock_ms_per_eval";

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Basic => "basic",
        Split::Generalization => "gen",
    }
}

impl Report {
    /// One CSV row per seed, without the header.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for (seed, rate) in self.seeds.iter().zip(&self.per_seed) {
            writeln!(
                out,
                "{},{},{},{},{},{:.4},{:.3}",
                self.task,
                split_name(self.split),
                self.agent,
                seed,
                self.episodes,
                rate,
                self.wallclock_ms_per_eval
            )
            .expect("writing to a string");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        format!("{CSV_HEADER}\n{}", self.csv_rows())
    }

    pub fn summary(&self) -> String {
        format!("{} {} {}: {:.3} ± {:.3}", self.task, split_name(self.split), self.agent, self.mean, self.std)
    }
}
