//! Operator-conditioned action policies and the behavior-cloning baseline.
//!
//! At every step the grounded state picks the deepest plan-skeleton node it
//! satisfies; that node's outgoing operator names both the policy to run and
//! the objects the policy looks at.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expert::Dataset;
use crate::grid::{offset, Action, Color, Dir, EnvState, Kind, Task};
use crate::kb;
use crate::nn::{argmax, Mlp, Sample, Standardizer, Target};
use crate::perception::{Grounder, PerceptionError};
use crate::symbolic::{entails, plan_skeleton, Assignment, GroundAtom, PlanSkeleton, StateMachine, Symbol};

pub const HIDDEN: usize = 64;
/// Object slots in the baseline's input.
pub const BC_SLOTS: usize = 8;
/// Goal predicates the baseline's goal encoding knows about.
pub const GOAL_PREDICATES: [&str; 4] = ["facing", "holding", "is-open", "next-to"];

const AGENT_BLOCK: usize = 6 + 4;
const TARGET_BLOCK: usize = Kind::ALL.len() + Color::ALL.len() + 2 + 2 + 2;
const BC_SLOT: usize = 1 + Kind::ALL.len() + Color::ALL.len() + 4 + 3;
const GOAL_SLOT: usize = 1 + 2 * (Kind::ALL.len() + Color::ALL.len());

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("operator `{0}` has no policy")]
    UnknownOperator(String),
    #[error("operator {0} names an object missing from the state")]
    UnknownObject(String),
    #[error("dataset must contain at least one trajectory")]
    EmptyDataset,
    #[error("no machine for task {0}")]
    NoMachine(Task),
    #[error("machine for task {task}: {msg}")]
    Machine { task: Task, msg: String },
    #[error(transparent)]
    Perception(#[from] PerceptionError),
}

/// Agent position, heading and surrounding walls; shared by both agents.
fn agent_block(s: &EnvState, f: &mut Vec<f64>) {
    let (w, h) = (s.width as f64, s.height as f64);
    f.push(s.agent_pos.0 as f64 / w);
    f.push(s.agent_pos.1 as f64 / h);
    f.extend((0..4).map(|i| if s.agent_dir.index() == i { 1.0 } else { 0.0 }));
    for d in Dir::ALL {
        f.push(s.blocked(offset(s.agent_pos, d)) as u8 as f64);
    }
}

fn one_hot<T: PartialEq>(all: &[T], v: &T, f: &mut Vec<f64>) {
    f.extend(all.iter().map(|x| if x == v { 1.0 } else { 0.0 }));
}

pub fn policy_feature_len(arity: usize) -> usize {
    AGENT_BLOCK + arity * TARGET_BLOCK
}

/// Agent block, then for each operator argument its kind, color, position,
/// offset from the agent, whether it is an open door and whether it is carried.
pub fn policy_features(s: &EnvState, op: &GroundAtom) -> Result<Vec<f64>, PolicyError> {
    let missing = || PolicyError::UnknownObject(op.to_string());
    let ids = op.object_ids().ok_or_else(missing)?;
    let (w, h) = (s.width as f64, s.height as f64);
    let mut f = Vec::with_capacity(policy_feature_len(ids.len()));
    agent_block(s, &mut f);
    for id in ids {
        let o = s.object(id).ok_or_else(missing)?;
        one_hot(&Kind::ALL, &o.kind, &mut f);
        one_hot(&Color::ALL, &o.color, &mut f);
        f.push(o.pos.0 as f64 / w);
        f.push(o.pos.1 as f64 / h);
        f.push((o.pos.0 - s.agent_pos.0) as f64 / w);
        f.push((o.pos.1 - s.agent_pos.1) as f64 / h);
        f.push(o.is_open() as u8 as f64);
        f.push(o.carried as u8 as f64);
    }
    Ok(f)
}

pub fn bc_feature_len() -> usize {
    AGENT_BLOCK + BC_SLOTS * BC_SLOT + GOAL_PREDICATES.len() * GOAL_SLOT
}

/// Agent block, the first [`BC_SLOTS`] objects by id (zero-padded), then a
/// bag-of-goal-atoms encoding over predicate, kind and color.
pub fn bc_features(s: &EnvState) -> Vec<f64> {
    let (w, h) = (s.width as f64, s.height as f64);
    let mut f = Vec::with_capacity(bc_feature_len());
    agent_block(s, &mut f);
    for i in 0..BC_SLOTS {
        match s.objects.get(i) {
            Some(o) => {
                f.push(1.0);
                one_hot(&Kind::ALL, &o.kind, &mut f);
                one_hot(&Color::ALL, &o.color, &mut f);
                f.push(o.pos.0 as f64 / w);
                f.push(o.pos.1 as f64 / h);
                f.push((o.pos.0 - s.agent_pos.0) as f64 / w);
                f.push((o.pos.1 - s.agent_pos.1) as f64 / h);
                f.push(o.is_open() as u8 as f64);
                f.push(o.is_locked() as u8 as f64);
                f.push(o.carried as u8 as f64);
            }
            None => f.extend(std::iter::repeat_n(0.0, BC_SLOT)),
        }
    }
    for p in GOAL_PREDICATES {
        let mut slot = vec![0.0; GOAL_SLOT];
        for a in s.goal.iter().filter(|a| a.predicate == p) {
            slot[0] += 1.0;
            for (j, id) in a.object_ids().unwrap_or_default().into_iter().take(2).enumerate() {
                if let Some(o) = s.object(id) {
                    let base = 1 + j * (Kind::ALL.len() + Color::ALL.len());
                    slot[base + o.kind.index()] += 1.0;
                    slot[base + Kind::ALL.len() + o.color.index()] += 1.0;
                }
            }
        }
        f.extend(slot);
    }
    f
}

/// What to do when the grounding satisfies no skeleton node.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    #[default]
    FirstOperator,
    RepeatLast,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub op: GroundAtom,
    pub node: String,
    /// Position in the skeleton.
    pub index: usize,
    pub fallback: bool,
}

/// Operator of the deepest non-terminal skeleton node the grounding entails.
pub fn select_operator(grounded: &BTreeMap<GroundAtom, bool>, machine: &StateMachine, skeleton: &PlanSkeleton) -> Selection {
    select_operator_with(grounded, machine, skeleton, Fallback::FirstOperator, None)
}

pub fn select_operator_with(
    grounded: &BTreeMap<GroundAtom, bool>,
    machine: &StateMachine,
    skeleton: &PlanSkeleton,
    fallback: Fallback,
    previous: Option<&Selection>,
) -> Selection {
    let assignment = Assignment::Truth(grounded);
    for (k, step) in skeleton.steps.iter().enumerate().rev() {
        let holds = machine.node(&step.node).is_some_and(|cond| entails(&assignment, cond).unwrap_or(false));
        if holds {
            return Selection { op: step.op.clone(), node: step.node.clone(), index: k, fallback: false };
        }
    }
    match (fallback, previous) {
        (Fallback::RepeatLast, Some(p)) => Selection { fallback: true, ..p.clone() },
        _ => {
            let first = &skeleton.steps[0];
            Selection { op: first.op.clone(), node: first.node.clone(), index: 0, fallback: true }
        }
    }
}

/// Something that turns (state, operator) into a primitive action.
pub trait Actor: Sync {
    fn act(&self, state: &EnvState, op: &GroundAtom) -> Result<Action, PolicyError>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorPolicy {
    pub operator: Symbol,
    pub input: Standardizer,
    pub net: Mlp,
}

impl OperatorPolicy {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.net.logits(&self.input.apply(x))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyEnsemble {
    pub vocabulary: Vec<Symbol>,
    pub policies: BTreeMap<String, OperatorPolicy>,
}

/// Operators of every shipped machine.
pub fn shipped_operators() -> Vec<Symbol> {
    let mut ops: Vec<Symbol> = Vec::new();
    for (name, _) in kb::SHIPPED {
        for o in kb::shipped(name).expect("shipped machines parse").operators {
            if !ops.contains(&o) {
                ops.push(o);
            }
        }
    }
    ops.sort_by(|a, b| a.name.cmp(&b.name));
    ops
}

impl PolicyEnsemble {
    pub fn zeros(vocabulary: &[Symbol]) -> Self {
        Self::build(vocabulary, |s| Mlp::zeros(policy_feature_len(s.arity), HIDDEN, Action::COUNT))
    }

    pub fn init(vocabulary: &[Symbol], hidden: usize, seed: u64) -> Self {
        let mut i = 0;
        Self::build(vocabulary, |s| {
            let mut rng = stream(seed, i);
            i += 1;
            Mlp::init(policy_feature_len(s.arity), hidden, Action::COUNT, &mut rng)
        })
    }

    fn build(vocabulary: &[Symbol], mut net: impl FnMut(&Symbol) -> Mlp) -> Self {
        let policies = vocabulary
            .iter()
            .map(|s| {
                let input = Standardizer::identity(policy_feature_len(s.arity));
                (s.name.clone(), OperatorPolicy { operator: s.clone(), input, net: net(s) })
            })
            .collect();
        Self { vocabulary: vocabulary.to_vec(), policies }
    }
}

impl Actor for PolicyEnsemble {
    /// Greedy action; ties go to the lowest action index.
    fn act(&self, state: &EnvState, op: &GroundAtom) -> Result<Action, PolicyError> {
        let p = self.policies.get(&op.predicate).ok_or_else(|| PolicyError::UnknownOperator(op.predicate.clone()))?;
        let x = policy_features(state, op)?;
        Ok(Action::from_index(argmax(&p.logits(&x))).expect("policy has one logit per action"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub hidden: usize,
    pub seed: u64,
    pub fallback: Fallback,
    /// Extra copies of each BC sample with its object slots shuffled.
    #[serde(default)]
    pub bc_permutations: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: 0.05, batch: 64, hidden: HIDDEN, seed: 0, fallback: Fallback::FirstOperator, bc_permutations: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    /// Training steps routed to each operator.
    pub per_operator: BTreeMap<String, usize>,
    /// Steps where no node was entailed.
    pub fallback: usize,
    pub steps: usize,
}

fn stream(seed: u64, i: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i);
    rng
}

struct Row(Vec<f64>, Target);

impl Sample for Row {
    fn features(&self) -> &[f64] {
        &self.0
    }
    fn target(&self) -> Target {
        self.1
    }
}

pub type RoutedStep = (Selection, Vec<f64>, Action);

/// Routes every demonstration step through the perception grounding and
/// operator selection, one row per step: (operator, features, action).
pub fn route_dataset<G: Grounder>(
    data: &Dataset,
    grounder: &G,
    machines: &BTreeMap<Task, StateMachine>,
    fallback: Fallback,
) -> Result<Vec<Vec<RoutedStep>>, PolicyError> {
    data.trajectories
        .par_iter()
        .map(|t| {
            let m = machines.get(&t.task).ok_or(PolicyError::NoMachine(t.task))?;
            let bound = kb::bind_roles(m, &t.binding).map_err(|e| PolicyError::Machine { task: t.task, msg: e.to_string() })?;
            let skeleton = plan_skeleton(&bound).map_err(|e| PolicyError::Machine { task: t.task, msg: e.to_string() })?;
            let tracked = bound.tracked_atoms();
            let mut prev: Option<Selection> = None;
            let mut rows = Vec::with_capacity(t.len());
            for (s, &a) in t.states.iter().zip(&t.actions) {
                let g = grounder.ground(s, &tracked)?;
                let sel = select_operator_with(&g.truth, &bound, &skeleton, fallback, prev.as_ref());
                let x = policy_features(s, &sel.op)?;
                prev = Some(sel.clone());
                rows.push((sel, x, a));
            }
            Ok(rows)
        })
        .collect()
}

/// Fits one policy per operator on the steps routed to it.
pub fn train_ensemble<G: Grounder>(
    data: &Dataset,
    grounder: &G,
    machines: &BTreeMap<Task, StateMachine>,
    cfg: &PolicyConfig,
) -> Result<(PolicyEnsemble, RoutingStats), PolicyError> {
    if data.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    let routed = route_dataset(data, grounder, machines, cfg.fallback)?;
    let mut ensemble = PolicyEnsemble::init(&shipped_operators(), cfg.hidden, cfg.seed);
    let mut stats = RoutingStats::default();
    let mut buckets: BTreeMap<String, Vec<Row>> = ensemble.policies.keys().map(|k| (k.clone(), Vec::new())).collect();
    for (sel, x, a) in routed.into_iter().flatten() {
        stats.steps += 1;
        stats.fallback += sel.fallback as usize;
        *stats.per_operator.entry(sel.op.predicate.clone()).or_default() += 1;
        buckets
            .get_mut(&sel.op.predicate)
            .ok_or_else(|| PolicyError::UnknownOperator(sel.op.predicate.clone()))?
            .push(Row(x, Target::Class(a.index())));
    }
    for (name, rows) in &buckets {
        if rows.is_empty() && machines.values().any(|m| m.operators.iter().any(|o| &o.name == name)) {
            warn!("operator `{name}` received no training steps");
        }
    }
    let names: Vec<String> = buckets.keys().cloned().collect();
    let trained: Vec<OperatorPolicy> = names
        .par_iter()
        .enumerate()
        .map(|(i, name)| {
            let mut p = ensemble.policies[name].clone();
            let rows = &buckets[name];
            if rows.is_empty() {
                return p;
            }
            p.input = Standardizer::fit(p.input.mean.len(), rows.iter().map(|r| r.0.as_slice()));
            let scaled: Vec<Row> = rows.iter().map(|r| Row(p.input.apply(&r.0), r.1)).collect();
            let mut rng = stream(cfg.seed ^ 0xac7, i as u64);
            for _ in 0..cfg.epochs {
                p.net.train_epoch(&scaled, cfg.lr, cfg.batch, &mut rng);
            }
            p
        })
        .collect();
    for (name, p) in names.into_iter().zip(trained) {
        ensemble.policies.insert(name, p);
    }
    Ok((ensemble, stats))
}

/// One network over the whole state and the goal, no symbolic structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcBaseline {
    pub input: Standardizer,
    pub net: Mlp,
}

impl BcBaseline {
    pub fn zeros() -> Self {
        Self { input: Standardizer::identity(bc_feature_len()), net: Mlp::zeros(bc_feature_len(), HIDDEN, Action::COUNT) }
    }

    pub fn act(&self, state: &EnvState) -> Action {
        let logits = self.net.logits(&self.input.apply(&bc_features(state)));
        Action::from_index(argmax(&logits)).expect("one logit per action")
    }
}

/// Same state with the object slots in a random order.
fn permute_slots(x: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut order: Vec<usize> = (0..BC_SLOTS).collect();
    order.shuffle(rng);
    let mut out = x.to_vec();
    for (to, &from) in order.iter().enumerate() {
        let (a, b) = (AGENT_BLOCK + to * BC_SLOT, AGENT_BLOCK + from * BC_SLOT);
        out[a..a + BC_SLOT].copy_from_slice(&x[b..b + BC_SLOT]);
    }
    out
}

pub fn train_bc(data: &Dataset, cfg: &PolicyConfig) -> Result<BcBaseline, PolicyError> {
    if data.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    let rows: Vec<Row> = data
        .trajectories
        .par_iter()
        .flat_map_iter(|t| t.states.iter().zip(&t.actions).map(|(s, a)| Row(bc_features(s), Target::Class(a.index()))).collect::<Vec<_>>())
        .collect();
    let mut rows = rows;
    let mut perm = stream(cfg.seed ^ 0xbc, 2);
    for i in 0..rows.len() * cfg.bc_permutations {
        let r = &rows[i / cfg.bc_permutations];
        let shuffled = Row(permute_slots(&r.0, &mut perm), r.1);
        rows.push(shuffled);
    }
    let input = Standardizer::fit(bc_feature_len(), rows.iter().map(|r| r.0.as_slice()));
    let scaled: Vec<Row> = rows.iter().map(|r| Row(input.apply(&r.0), r.1)).collect();
    let mut rng = stream(cfg.seed, 0);
    let mut net = Mlp::init(bc_feature_len(), cfg.hidden, Action::COUNT, &mut rng);
    let mut shuffle = stream(cfg.seed ^ 0xbc, 1);
    for _ in 0..cfg.epochs {
        net.train_epoch(&scaled, cfg.lr, cfg.batch, &mut shuffle);
    }
    Ok(BcBaseline { input, net })
}
