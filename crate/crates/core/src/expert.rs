//! Scripted demonstrator.
//!
//! The expert walks the task's plan skeleton and runs one sub-goal
//! controller per operator: navigation uses A* over `(cell, direction)`
//! poses, manipulation operators are single primitive actions.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{self, manhattan, offset, Action, Cell, Dir, EnvError, EnvState, Task, TaskConfig};
use crate::kb::RoleBinding;
use crate::symbolic::{plan_skeleton, GroundAtom};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExpertError {
    #[error("no expert plan for seed {seed}: {reason}")]
    Unsolvable { seed: u64, reason: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("dataset must contain at least one trajectory")]
    Empty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task: Task,
    pub seed: u64,
    pub states: Vec<EnvState>,
    pub actions: Vec<Action>,
    pub goal: Vec<GroundAtom>,
    pub binding: RoleBinding,
}

impl Trajectory {
    /// Number of actions `T`.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Trajectory count per task.
    pub fn task_mix(&self) -> BTreeMap<Task, usize> {
        let mut m = BTreeMap::new();
        for t in &self.trajectories {
            *m.entry(t.task).or_default() += 1;
        }
        m
    }

    pub fn extend(&mut self, other: Dataset) {
        self.trajectories.extend(other.trajectories);
    }

    pub fn mean_length(&self) -> f64 {
        self.trajectories.iter().map(|t| t.len() as f64).sum::<f64>() / self.len().max(1) as f64
    }
}

type Pose = (Cell, Dir);

/// Cost added to poses that face an object the current sub-goal must not touch.
const AVOID_PENALTY: u32 = 100;

/// A* over poses. `goal` decides success; `stand` lists cells from which a
/// goal pose is possible and feeds the Manhattan heuristic.
fn astar(s: &EnvState, goal: impl Fn(Pose) -> bool, stand: &[Cell], avoid: &BTreeSet<Cell>) -> Option<Vec<Action>> {
    let start: Pose = (s.agent_pos, s.agent_dir);
    if goal(start) {
        return Some(Vec::new());
    }
    if stand.is_empty() {
        return None;
    }
    let h = |c: Cell| stand.iter().map(|&t| manhattan(c, t) as u32).min().unwrap_or(0);
    let mut open = BinaryHeap::new();
    let mut best: HashMap<Pose, u32> = HashMap::new();
    let mut parent: HashMap<Pose, (Pose, Action)> = HashMap::new();
    let mut seq = 0u64;
    best.insert(start, 0);
    open.push(Reverse((h(start.0), 0u32, seq, start)));
    while let Some(Reverse((_, g, _, pose))) = open.pop() {
        if best.get(&pose).is_some_and(|&b| b < g) {
            continue;
        }
        if goal(pose) {
            let mut actions = Vec::new();
            let mut cur = pose;
            while let Some(&(prev, a)) = parent.get(&cur) {
                actions.push(a);
                cur = prev;
            }
            actions.reverse();
            return Some(actions);
        }
        let (cell, dir) = pose;
        let fwd = offset(cell, dir);
        let mut succ = vec![((cell, dir.left()), Action::TurnLeft), ((cell, dir.right()), Action::TurnRight)];
        if !s.blocked(fwd) {
            succ.insert(0, ((fwd, dir), Action::Forward));
        }
        for (next, a) in succ {
            let penalty = if avoid.contains(&offset(next.0, next.1)) { AVOID_PENALTY } else { 0 };
            let ng = g + 1 + penalty;
            if best.get(&next).is_none_or(|&b| ng < b) {
                best.insert(next, ng);
                parent.insert(next, (pose, a));
                seq += 1;
                open.push(Reverse((ng + h(next.0), ng, seq, next)));
            }
        }
    }
    None
}

/// Cells of tracked-`facing` objects other than the current targets; the
/// expert does not face them on its way so that every step sits in exactly
/// one machine node.
fn avoid_cells(s: &EnvState, targets: &[u32]) -> BTreeSet<Cell> {
    let machine = s.bound_machine();
    machine
        .tracked_atoms()
        .iter()
        .filter(|a| a.predicate == "facing")
        .filter_map(|a| a.object_ids())
        .flatten()
        .filter(|id| !targets.contains(id))
        .filter_map(|id| s.object(id).filter(|o| !o.carried).map(|o| o.pos))
        .collect()
}

fn op_targets(s: &EnvState, op: &GroundAtom) -> Result<Vec<u32>, String> {
    let ids = op.object_ids().ok_or_else(|| format!("operator {op} is not bound"))?;
    for &id in &ids {
        if s.object(id).is_none() {
            return Err(format!("operator {op} names unknown object {id}"));
        }
    }
    Ok(ids)
}

/// Primitive actions that achieve one operator from `s`.
pub fn controller_plan(s: &EnvState, op: &GroundAtom) -> Result<Vec<Action>, String> {
    let ids = op_targets(s, op)?;
    match (op.predicate.as_str(), ids.as_slice()) {
        ("goto", &[t]) => {
            let target = s.object(t).expect("checked").pos;
            let stand: Vec<Cell> = Dir::ALL.iter().map(|&d| offset(target, d)).filter(|&c| !s.blocked(c) || c == s.agent_pos).collect();
            let avoid = avoid_cells(s, &ids);
            astar(s, |(c, d)| offset(c, d) == target, &stand, &avoid).ok_or_else(|| format!("target {t} unreachable"))
        }
        ("pick", &[_]) => Ok(vec![Action::Pickup]),
        ("open", &[_]) => Ok(vec![Action::Toggle]),
        ("put", &[_, anchor]) => {
            let anchor = s.object(anchor).expect("checked").pos;
            let free = |c: Cell| s.in_bounds(c) && !s.walls.contains(&c) && s.object_at(c).is_none();
            let drops: Vec<Cell> = Dir::ALL.iter().map(|&d| offset(anchor, d)).filter(|&c| free(c)).collect();
            let stand: Vec<Cell> = drops
                .iter()
                .flat_map(|&c| Dir::ALL.iter().map(move |&d| offset(c, d)))
                .filter(|&c| !s.blocked(c) || c == s.agent_pos)
                .collect();
            let avoid = avoid_cells(s, &ids);
            let mut plan = astar(s, |(c, d)| drops.contains(&offset(c, d)), &stand, &avoid).ok_or("no reachable drop cell")?;
            plan.push(Action::Drop);
            Ok(plan)
        }
        _ => Err(format!("no controller for operator {op}")),
    }
}

/// Goal-reaching action sequence for a freshly reset state.
pub fn solve(state: &EnvState) -> Result<Vec<Action>, ExpertError> {
    let unsolvable = |reason: String| ExpertError::Unsolvable { seed: 0, reason };
    let skeleton = plan_skeleton(&state.bound_machine()).map_err(|e| unsolvable(e.to_string()))?;
    let mut cur = state.clone();
    let mut actions = Vec::new();
    for step in &skeleton.steps {
        if cur.goal_satisfied() {
            break;
        }
        let plan = controller_plan(&cur, &step.op).map_err(unsolvable)?;
        for a in plan {
            cur = cur.step(a)?;
            actions.push(a);
        }
    }
    if !cur.goal_satisfied() {
        return Err(unsolvable("skeleton finished without reaching the goal".into()));
    }
    Ok(actions)
}

pub fn rollout(cfg: &TaskConfig) -> Result<Trajectory, ExpertError> {
    let s0 = grid::reset(cfg)?;
    let actions = solve(&s0).map_err(|e| match e {
        ExpertError::Unsolvable { reason, .. } => ExpertError::Unsolvable { seed: cfg.seed, reason },
        other => other,
    })?;
    let states = s0.replay(&actions)?;
    Ok(Trajectory { task: cfg.task, seed: cfg.seed, goal: s0.goal.clone(), binding: s0.binding.clone(), states, actions })
}

/// `n` expert trajectories from seeds `cfg.seed .. cfg.seed + n`, in seed order.
pub fn generate_dataset(cfg: &TaskConfig, n: usize) -> Result<Dataset, ExpertError> {
    if n == 0 {
        return Err(ExpertError::Empty);
    }
    let trajectories = (0..n as u64)
        .into_par_iter()
        .map(|i| rollout(&cfg.with_seed(cfg.seed + i)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset { trajectories })
}
