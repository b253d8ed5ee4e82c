//! Pseudo-label abduction.
//!
//! Given per-step scores for the tracked atoms of a bound machine, find the
//! cheapest way to walk one initial→goal path so that every step sits in a
//! node, every path node owns a non-empty contiguous block of steps, and the
//! goal block includes the final step. The cost of placing step `t` in node
//! `v` is the squared distance between the scores and `v`'s closed-world
//! truth vector over the tracked atoms.
//!
//! Ties are resolved by cost, then by the lexicographically smallest vector
//! of transition steps (earliest transitions first), then by path.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::EnvState;
use crate::symbolic::{enumerate_paths, GroundAtom, NodeId, StateMachine, SymbolicError};

/// Size limits for [`abduce_bruteforce`].
pub const BRUTE_MAX_STEPS: usize = 10;
pub const BRUTE_MAX_PATHS: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AbductionError {
    #[error("{steps} steps cannot cover any path (shortest needs {needed})")]
    Infeasible { steps: usize, needed: usize },
    #[error("brute force limited to T <= {BRUTE_MAX_STEPS} and <= {BRUTE_MAX_PATHS} paths (got T = {steps}, {paths} paths)")]
    SizeCap { steps: usize, paths: usize },
    #[error("score track atoms do not match the machine's tracked atoms")]
    AtomMismatch,
    #[error("score track must have at least one step")]
    Empty,
    #[error("score {value} at step {step} is outside [0, 1]")]
    BadScore { step: usize, value: f64 },
    #[error(transparent)]
    Symbolic(#[from] SymbolicError),
}

/// Scores for each tracked atom at steps `0..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTrack {
    pub atoms: Vec<GroundAtom>,
    /// `scores[t][i]` is the score of `atoms[i]` at step `t`.
    pub scores: Vec<Vec<f64>>,
}

impl ScoreTrack {
    pub fn new(atoms: Vec<GroundAtom>, scores: Vec<Vec<f64>>) -> Self {
        Self { atoms, scores }
    }

    pub fn uniform(machine: &StateMachine, steps: usize, value: f64) -> Self {
        let atoms = machine.tracked_atoms();
        let scores = vec![vec![value; atoms.len()]; steps + 1];
        Self { atoms, scores }
    }

    /// 0/1 scores read off the true environment state.
    pub fn oracle(machine: &StateMachine, states: &[EnvState]) -> Self {
        let atoms = machine.tracked_atoms();
        let scores = states
            .iter()
            .map(|s| atoms.iter().map(|a| if s.atom_truth(a).unwrap_or(false) { 1.0 } else { 0.0 }).collect())
            .collect();
        Self { atoms, scores }
    }

    /// Final step index `T`.
    pub fn horizon(&self) -> usize {
        self.scores.len().saturating_sub(1)
    }

    fn check(&self, machine: &StateMachine) -> Result<(), AbductionError> {
        if self.scores.is_empty() {
            return Err(AbductionError::Empty);
        }
        if self.atoms != machine.tracked_atoms() {
            return Err(AbductionError::AtomMismatch);
        }
        for (step, row) in self.scores.iter().enumerate() {
            if row.len() != self.atoms.len() {
                return Err(AbductionError::AtomMismatch);
            }
            if let Some(&value) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(AbductionError::BadScore { step, value });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub step: usize,
    pub atom: GroundAtom,
    pub value: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Labeling {
    pub path: Vec<NodeId>,
    /// Node of each step `0..=T`.
    pub assignment: Vec<NodeId>,
    /// First step of each non-initial path node's block.
    pub transitions: Vec<usize>,
    pub cost: f64,
    pub pseudo: Vec<PseudoLabel>,
}

/// Closed-world labels for every tracked atom at every step.
pub fn pseudo_labels(labeling: &Labeling, machine: &StateMachine) -> Vec<PseudoLabel> {
    let tracked = machine.tracked_atoms();
    let mut out = Vec::with_capacity(labeling.assignment.len() * tracked.len());
    for (step, node) in labeling.assignment.iter().enumerate() {
        let atoms = machine.node(node).expect("labeling node belongs to machine");
        for a in &tracked {
            out.push(PseudoLabel { step, atom: a.clone(), value: atoms.contains(a) });
        }
    }
    out
}

/// Labels every consistent labeling of `steps + 1` steps agrees on, whatever
/// the scores: an atom is fixed at step `t` when all nodes that some feasible
/// block assignment can place at `t` give it the same value.
pub fn forced_labels(machine: &StateMachine, steps: usize) -> Result<Vec<PseudoLabel>, AbductionError> {
    let paths = enumerate_paths(machine)?;
    if paths.iter().all(|p| p.len() > steps + 1) {
        return Err(infeasible(&paths, steps));
    }
    let tracked = machine.tracked_atoms();
    let mut out = Vec::new();
    for t in 0..=steps {
        let mut nodes = Vec::new();
        for p in paths.iter().filter(|p| p.len() <= steps + 1) {
            let n = p.len();
            for (k, v) in p.iter().enumerate() {
                if k <= t && n - 1 - k <= steps - t {
                    nodes.push(machine.node(v).expect("path node exists"));
                }
            }
        }
        for a in &tracked {
            let first = nodes[0].contains(a);
            if nodes.iter().all(|n| n.contains(a) == first) {
                out.push(PseudoLabel { step: t, atom: a.clone(), value: first });
            }
        }
    }
    Ok(out)
}

/// `cost[node][t]`, summed over tracked atoms in index order.
fn node_costs(track: &ScoreTrack, machine: &StateMachine) -> BTreeMap<NodeId, Vec<f64>> {
    machine
        .nodes
        .iter()
        .map(|(id, atoms)| {
            let truth: Vec<f64> = track.atoms.iter().map(|a| if atoms.contains(a) { 1.0 } else { 0.0 }).collect();
            let per_step = track
                .scores
                .iter()
                .map(|row| row.iter().zip(&truth).fold(0.0, |acc, (s, l)| acc + (l - s) * (l - s)))
                .collect();
            (id.clone(), per_step)
        })
        .collect()
}

struct Candidate {
    cost: f64,
    transitions: Vec<usize>,
    path: Vec<NodeId>,
}

fn better(a: &Candidate, b: &Candidate) -> bool {
    match a.cost.partial_cmp(&b.cost).unwrap_or(Ordering::Equal) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => (&a.transitions, &a.path) < (&b.transitions, &b.path),
    }
}

fn finish(c: Candidate, steps: usize, machine: &StateMachine) -> Labeling {
    let mut assignment = Vec::with_capacity(steps + 1);
    let mut k = 0;
    for t in 0..=steps {
        while k < c.transitions.len() && c.transitions[k] <= t {
            k += 1;
        }
        assignment.push(c.path[k].clone());
    }
    let mut l = Labeling { path: c.path, assignment, transitions: c.transitions, cost: c.cost, pseudo: Vec::new() };
    l.pseudo = pseudo_labels(&l, machine);
    l
}

/// Forward DP over (step, path position). Costs accumulate left to right in
/// step order, the same order the exhaustive search uses.
fn best_on_path(costs: &[&[f64]], steps: usize) -> Option<(f64, Vec<usize>)> {
    let n = costs.len();
    if n > steps + 1 {
        return None;
    }
    // cell[k] = (cost, transitions) of the best prefix ending at position k.
    let mut cell: Vec<Option<(f64, Vec<usize>)>> = vec![None; n];
    cell[0] = Some((costs[0][0], Vec::new()));
    for t in 1..=steps {
        let mut next: Vec<Option<(f64, Vec<usize>)>> = vec![None; n];
        // Position k needs k transitions by step t and n-1-k more afterwards.
        let lo = (n - 1).saturating_sub(steps - t);
        for (k, slot) in next.iter_mut().enumerate().take(n.min(t + 1)).skip(lo) {
            let stay = cell[k].as_ref().map(|(c, v)| (c + costs[k][t], v.clone()));
            let advance = (k > 0)
                .then(|| cell[k - 1].as_ref())
                .flatten()
                .map(|(c, v)| {
                    let mut v = v.clone();
                    v.push(t);
                    (c + costs[k][t], v)
                });
            *slot = match (stay, advance) {
                (Some(a), Some(b)) => match a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal) {
                    Ordering::Less => Some(a),
                    Ordering::Greater => Some(b),
                    Ordering::Equal => Some(if a.1 <= b.1 { a } else { b }),
                },
                (a, b) => a.or(b),
            };
        }
        cell = next;
    }
    cell.pop().flatten()
}

/// Per-node cost of every step.
type NodeCosts = BTreeMap<NodeId, Vec<f64>>;

fn paths_and_costs(track: &ScoreTrack, machine: &StateMachine) -> Result<(Vec<Vec<NodeId>>, NodeCosts), AbductionError> {
    track.check(machine)?;
    let paths = enumerate_paths(machine)?;
    Ok((paths, node_costs(track, machine)))
}

fn infeasible(paths: &[Vec<NodeId>], steps: usize) -> AbductionError {
    let needed = paths.iter().map(|p| p.len() - 1).min().unwrap_or(0);
    AbductionError::Infeasible { steps, needed }
}

/// Minimum-cost consistent labeling.
pub fn abduce(track: &ScoreTrack, machine: &StateMachine) -> Result<Labeling, AbductionError> {
    let (paths, costs) = paths_and_costs(track, machine)?;
    abduce_with_costs(&paths, &costs, track.horizon(), machine)
}

fn abduce_with_costs(
    paths: &[Vec<NodeId>],
    costs: &NodeCosts,
    steps: usize,
    machine: &StateMachine,
) -> Result<Labeling, AbductionError> {
    let mut best: Option<Candidate> = None;
    for path in paths {
        let rows: Vec<&[f64]> = path.iter().map(|v| costs[v].as_slice()).collect();
        if let Some((cost, transitions)) = best_on_path(&rows, steps) {
            let cand = Candidate { cost, transitions, path: path.clone() };
            if best.as_ref().is_none_or(|b| better(&cand, b)) {
                best = Some(cand);
            }
        }
    }
    best.map(|c| finish(c, steps, machine)).ok_or_else(|| infeasible(paths, steps))
}

/// Exhaustive search over every path and block boundary; test oracle.
pub fn abduce_bruteforce(track: &ScoreTrack, machine: &StateMachine) -> Result<Labeling, AbductionError> {
    let (paths, costs) = paths_and_costs(track, machine)?;
    let steps = track.horizon();
    if steps > BRUTE_MAX_STEPS || paths.len() > BRUTE_MAX_PATHS {
        return Err(AbductionError::SizeCap { steps, paths: paths.len() });
    }
    let mut best: Option<Candidate> = None;
    for path in &paths {
        let rows: Vec<&[f64]> = path.iter().map(|v| costs[v].as_slice()).collect();
        for transitions in combinations(1..=steps, path.len() - 1) {
            let mut cost = 0.0;
            let mut k = 0;
            for t in 0..=steps {
                while k < transitions.len() && transitions[k] <= t {
                    k += 1;
                }
                cost += rows[k][t];
            }
            let cand = Candidate { cost, transitions, path: path.clone() };
            if best.as_ref().is_none_or(|b| better(&cand, b)) {
                best = Some(cand);
            }
        }
    }
    best.map(|c| finish(c, steps, machine)).ok_or_else(|| infeasible(&paths, steps))
}

/// Increasing `k`-subsets of `range`, in lexicographic order.
fn combinations(range: std::ops::RangeInclusive<usize>, k: usize) -> Vec<Vec<usize>> {
    let items: Vec<usize> = range.collect();
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(items: &[usize], start: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..items.len() {
            if items.len() - i < k - cur.len() {
                break;
            }
            cur.push(items[i]);
            rec(items, i + 1, k, cur, out);
            cur.pop();
        }
    }
    rec(&items, 0, k, &mut cur, &mut out);
    out
}
