//! Symbolic vocabulary, entailment, and the state-machine knowledge base.
//!
//! A knowledge base is a directed graph whose nodes are sets of positive
//! ground atoms (sub-task conditions) and whose edges carry an operator atom
//! plus add/delete effects. Every edge must obey the effect law
//! `dst = (src - del) ∪ add`. Negative literals are implicit: a node asserts
//! that every tracked atom it does not contain is false.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = String;

/// Default cap on the number of simple initial→goal paths.
pub const DEFAULT_PATH_CAP: usize = 64;

/// Reference to an object: either a concrete episode object or a role name
/// used by template machines before binding.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ObjectRef {
    Id(u32),
    Role(String),
}

impl ObjectRef {
    pub fn id(&self) -> Option<u32> {
        match self {
            ObjectRef::Id(id) => Some(*id),
            ObjectRef::Role(_) => None,
        }
    }
}

impl fmt::Display for ObjectRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectRef::Id(id) => write!(f, "{id}"),
            ObjectRef::Role(r) => f.write_str(r),
        }
    }
}

/// A predicate or operator symbol with its arity.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Symbol {
    pub name: String,
    pub arity: usize,
}

impl Symbol {
    pub fn new(name: impl Into<String>, arity: usize) -> Self {
        Self { name: name.into(), arity }
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.name, self.arity)
    }
}

/// A predicate (or operator) applied to concrete objects or roles.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroundAtom {
    pub predicate: String,
    pub args: Vec<ObjectRef>,
}

impl GroundAtom {
    pub fn new(predicate: impl Into<String>, args: Vec<ObjectRef>) -> Self {
        Self { predicate: predicate.into(), args }
    }

    pub fn ids(predicate: impl Into<String>, ids: &[u32]) -> Self {
        Self::new(predicate, ids.iter().map(|&i| ObjectRef::Id(i)).collect())
    }

    pub fn roles(predicate: impl Into<String>, roles: &[&str]) -> Self {
        Self::new(predicate, roles.iter().map(|r| ObjectRef::Role(r.to_string())).collect())
    }

    pub fn arity(&self) -> usize {
        self.args.len()
    }

    /// Concrete object ids of the arguments; `None` if any argument is still a role.
    pub fn object_ids(&self) -> Option<Vec<u32>> {
        self.args.iter().map(ObjectRef::id).collect()
    }
}

impl fmt::Display for GroundAtom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.predicate)?;
        for (i, a) in self.args.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{a}")?;
        }
        f.write_str(")")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed atom `{0}`")]
pub struct AtomParseError(pub String);

impl FromStr for GroundAtom {
    type Err = AtomParseError;

    /// Parses `pred(a,b)`; numeric arguments become ids, others roles.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || AtomParseError(s.to_string());
        let s = s.trim();
        let open = s.find('(').ok_or_else(err)?;
        if !s.ends_with(')') {
            return Err(err());
        }
        let name = s[..open].trim();
        if name.is_empty() {
            return Err(err());
        }
        let inner = &s[open + 1..s.len() - 1];
        let mut args = Vec::new();
        for part in inner.split(',') {
            let part = part.trim();
            if part.is_empty() {
                return Err(err());
            }
            args.push(match part.parse::<u32>() {
                Ok(id) => ObjectRef::Id(id),
                Err(_) => ObjectRef::Role(part.to_string()),
            });
        }
        Ok(GroundAtom::new(name, args))
    }
}

impl Serialize for GroundAtomString<'_> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self.0)
    }
}

struct GroundAtomString<'a>(&'a GroundAtom);

/// Serde helpers for writing atoms as `"pred(1,2)"` strings.
pub mod atom_string {
    use super::*;
    use serde::de::Error as _;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(atoms: &[GroundAtom], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(atoms.iter().map(GroundAtomString))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<GroundAtom>, D::Error> {
        let raw: Vec<String> = Vec::deserialize(d)?;
        raw.iter().map(|r| r.parse().map_err(D::Error::custom)).collect()
    }
}

/// Positive atoms that hold at a node; everything else tracked is false.
pub type SymbolicState = BTreeSet<GroundAtom>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub src: NodeId,
    pub dst: NodeId,
    pub op: GroundAtom,
    pub add: BTreeSet<GroundAtom>,
    pub del: BTreeSet<GroundAtom>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateMachine {
    pub name: String,
    pub predicates: Vec<Symbol>,
    pub operators: Vec<Symbol>,
    /// Role name → role type, in declaration order.
    pub roles: Vec<(String, String)>,
    pub nodes: BTreeMap<NodeId, SymbolicState>,
    pub edges: Vec<Edge>,
    pub initial: NodeId,
    pub goal: NodeId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlanStep {
    pub node: NodeId,
    pub op: GroundAtom,
}

/// Shortest initial→goal route through the machine.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlanSkeleton {
    pub steps: Vec<PlanStep>,
    pub goal: NodeId,
}

impl PlanSkeleton {
    /// Node ids along the skeleton, goal last.
    pub fn nodes(&self) -> Vec<&NodeId> {
        self.steps.iter().map(|s| &s.node).chain(std::iter::once(&self.goal)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    EffectLaw { edge: usize },
    AddDelOverlap { edge: usize, atom: GroundAtom },
    UnknownNode { edge: usize, node: NodeId },
    MissingGoal,
    NoInitial,
    MultipleInitial(Vec<NodeId>),
    UnreachableGoal,
    UnreachableNode(NodeId),
    Cycle,
    ParallelEdges { src: NodeId, dst: NodeId },
    UnknownPredicate(GroundAtom),
    UnknownOperator(GroundAtom),
    ArityMismatch(GroundAtom),
    UnknownRole(GroundAtom),
    DuplicateSymbol(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EffectLaw { edge } => write!(f, "edge #{edge} violates dst = (src - del) ∪ add"),
            Violation::AddDelOverlap { edge, atom } => write!(f, "edge #{edge} both adds and deletes {atom}"),
            Violation::UnknownNode { edge, node } => write!(f, "edge #{edge} references unknown node `{node}`"),
            Violation::MissingGoal => f.write_str("no node named `goal`"),
            Violation::NoInitial => f.write_str("no node without incoming edges"),
            Violation::MultipleInitial(ns) => write!(f, "several nodes without incoming edges: {}", ns.join(", ")),
            Violation::UnreachableGoal => f.write_str("goal unreachable from the initial node"),
            Violation::UnreachableNode(n) => write!(f, "node `{n}` unreachable from the initial node"),
            Violation::Cycle => f.write_str("machine graph contains a cycle"),
            Violation::ParallelEdges { src, dst } => write!(f, "more than one edge {src} -> {dst}"),
            Violation::UnknownPredicate(a) => write!(f, "undeclared predicate in {a}"),
            Violation::UnknownOperator(a) => write!(f, "undeclared operator in {a}"),
            Violation::ArityMismatch(a) => write!(f, "arity mismatch in {a}"),
            Violation::UnknownRole(a) => write!(f, "undeclared object role in {a}"),
            Violation::DuplicateSymbol(s) => write!(f, "symbol `{s}` declared twice"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SymbolicError {
    #[error("atom {0} is absent from the assignment")]
    MissingAtom(GroundAtom),
    #[error("more than {cap} initial→goal paths")]
    PathExplosion { cap: usize },
    #[error("goal unreachable: no plan")]
    NoPlan,
}

/// Truth values or scores for a set of atoms.
#[derive(Clone, Debug)]
pub enum Assignment<'a> {
    Truth(&'a BTreeMap<GroundAtom, bool>),
    Scores { scores: &'a BTreeMap<GroundAtom, f64>, threshold: f64 },
}

/// `assignment ⊨ condition`: every atom of the condition holds.
pub fn entails(assignment: &Assignment<'_>, condition: &SymbolicState) -> Result<bool, SymbolicError> {
    let mut all = true;
    for atom in condition {
        let holds = match assignment {
            Assignment::Truth(m) => *m.get(atom).ok_or_else(|| SymbolicError::MissingAtom(atom.clone()))?,
            Assignment::Scores { scores, threshold } => {
                *scores.get(atom).ok_or_else(|| SymbolicError::MissingAtom(atom.clone()))? >= *threshold
            }
        };
        all &= holds;
    }
    Ok(all)
}

/// `(node - edge.del) ∪ edge.add`.
pub fn apply_edge(node: &SymbolicState, edge: &Edge) -> SymbolicState {
    node.difference(&edge.del).cloned().chain(edge.add.iter().cloned()).collect()
}

pub fn obj_of(atom: &GroundAtom) -> &[ObjectRef] {
    &atom.args
}

impl StateMachine {
    /// Union of all node atom sets, sorted.
    pub fn tracked_atoms(&self) -> Vec<GroundAtom> {
        let set: BTreeSet<&GroundAtom> = self.nodes.values().flatten().collect();
        set.into_iter().cloned().collect()
    }

    pub fn edge_between(&self, src: &str, dst: &str) -> Option<&Edge> {
        self.edges.iter().find(|e| e.src == src && e.dst == dst)
    }

    pub fn node(&self, id: &str) -> Option<&SymbolicState> {
        self.nodes.get(id)
    }

    fn successors(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut succ: BTreeMap<&str, Vec<&str>> = self.nodes.keys().map(|k| (k.as_str(), Vec::new())).collect();
        for e in &self.edges {
            if let Some(v) = succ.get_mut(e.src.as_str()) {
                v.push(e.dst.as_str());
            }
        }
        for v in succ.values_mut() {
            v.sort();
            v.dedup();
        }
        succ
    }

    fn reachable_from(&self, start: &str) -> BTreeSet<String> {
        let succ = self.successors();
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([start]);
        while let Some(n) = queue.pop_front() {
            if !seen.insert(n.to_string()) {
                continue;
            }
            for &m in succ.get(n).into_iter().flatten() {
                queue.push_back(m);
            }
        }
        seen
    }

    pub fn operator_names(&self) -> BTreeSet<&str> {
        self.edges.iter().map(|e| e.op.predicate.as_str()).collect()
    }
}

fn check_atom(
    atom: &GroundAtom,
    symbols: &[Symbol],
    roles: &BTreeSet<&str>,
    unknown: fn(GroundAtom) -> Violation,
    out: &mut Vec<Violation>,
) {
    match symbols.iter().find(|s| s.name == atom.predicate) {
        None => out.push(unknown(atom.clone())),
        Some(s) if s.arity != atom.arity() => out.push(Violation::ArityMismatch(atom.clone())),
        Some(_) => {}
    }
    for arg in &atom.args {
        if let ObjectRef::Role(r) = arg {
            if !roles.contains(r.as_str()) {
                out.push(Violation::UnknownRole(atom.clone()));
                break;
            }
        }
    }
}

/// Structural well-formedness: effect law on every edge, resolvable
/// vocabulary, a single initial node, acyclicity and goal reachability.
/// An empty result means the machine is valid.
pub fn validate_machine(m: &StateMachine) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut names = BTreeSet::new();
    for s in m.predicates.iter().chain(&m.operators) {
        if !names.insert(s.name.as_str()) {
            out.push(Violation::DuplicateSymbol(s.name.clone()));
        }
    }
    let mut role_names = BTreeSet::new();
    for (r, _) in &m.roles {
        if !role_names.insert(r.as_str()) {
            out.push(Violation::DuplicateSymbol(r.clone()));
        }
    }
    for atom in m.nodes.values().flatten() {
        check_atom(atom, &m.predicates, &role_names, Violation::UnknownPredicate, &mut out);
    }

    if !m.nodes.contains_key(&m.goal) {
        out.push(Violation::MissingGoal);
    }

    let mut pairs = BTreeSet::new();
    let mut any_missing_node = false;
    for (i, e) in m.edges.iter().enumerate() {
        for n in [&e.src, &e.dst] {
            if !m.nodes.contains_key(n) {
                any_missing_node = true;
                out.push(Violation::UnknownNode { edge: i, node: n.clone() });
            }
        }
        if !pairs.insert((e.src.clone(), e.dst.clone())) {
            out.push(Violation::ParallelEdges { src: e.src.clone(), dst: e.dst.clone() });
        }
        check_atom(&e.op, &m.operators, &role_names, Violation::UnknownOperator, &mut out);
        for a in e.add.iter().chain(&e.del) {
            check_atom(a, &m.predicates, &role_names, Violation::UnknownPredicate, &mut out);
        }
        for a in e.add.intersection(&e.del) {
            out.push(Violation::AddDelOverlap { edge: i, atom: a.clone() });
        }
        if let (Some(src), Some(dst)) = (m.nodes.get(&e.src), m.nodes.get(&e.dst)) {
            if apply_edge(src, e) != *dst {
                out.push(Violation::EffectLaw { edge: i });
            }
        }
    }
    if any_missing_node {
        return out;
    }

    let with_incoming: BTreeSet<&str> = m.edges.iter().map(|e| e.dst.as_str()).collect();
    let roots: Vec<NodeId> = m.nodes.keys().filter(|k| !with_incoming.contains(k.as_str())).cloned().collect();
    match roots.len() {
        0 => out.push(Violation::NoInitial),
        1 if roots[0] != m.initial => out.push(Violation::NoInitial),
        1 => {}
        _ => out.push(Violation::MultipleInitial(roots)),
    }

    if has_cycle(m) {
        out.push(Violation::Cycle);
    }

    if m.nodes.contains_key(&m.initial) {
        let reach = m.reachable_from(&m.initial);
        if m.nodes.contains_key(&m.goal) && !reach.contains(&m.goal) {
            out.push(Violation::UnreachableGoal);
        }
        for n in m.nodes.keys() {
            if !reach.contains(n) && *n != m.goal {
                out.push(Violation::UnreachableNode(n.clone()));
            }
        }
    }
    out
}

fn has_cycle(m: &StateMachine) -> bool {
    // Kahn's algorithm over unique (src, dst) pairs.
    let succ = m.successors();
    let mut indeg: BTreeMap<&str, usize> = succ.keys().map(|&k| (k, 0)).collect();
    for vs in succ.values() {
        for v in vs {
            *indeg.entry(v).or_default() += 1;
        }
    }
    let mut queue: VecDeque<&str> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&k, _)| k).collect();
    let mut visited = 0;
    while let Some(n) = queue.pop_front() {
        visited += 1;
        for &v in &succ[n] {
            let d = indeg.get_mut(v).expect("successor is a node");
            *d -= 1;
            if *d == 0 {
                queue.push_back(v);
            }
        }
    }
    visited != indeg.len()
}

/// All simple initial→goal paths, sorted lexicographically by node id.
pub fn enumerate_paths(m: &StateMachine) -> Result<Vec<Vec<NodeId>>, SymbolicError> {
    enumerate_paths_capped(m, DEFAULT_PATH_CAP)
}

pub fn enumerate_paths_capped(m: &StateMachine, cap: usize) -> Result<Vec<Vec<NodeId>>, SymbolicError> {
    fn dfs<'a>(
        node: &'a str,
        goal: &str,
        succ: &BTreeMap<&'a str, Vec<&'a str>>,
        stack: &mut Vec<&'a str>,
        out: &mut Vec<Vec<NodeId>>,
        cap: usize,
    ) -> Result<(), SymbolicError> {
        stack.push(node);
        if node == goal {
            if out.len() == cap {
                return Err(SymbolicError::PathExplosion { cap });
            }
            out.push(stack.iter().map(|s| s.to_string()).collect());
        } else {
            for &next in succ.get(node).into_iter().flatten() {
                if !stack.contains(&next) {
                    dfs(next, goal, succ, stack, out, cap)?;
                }
            }
        }
        stack.pop();
        Ok(())
    }
    let succ = m.successors();
    let mut out = Vec::new();
    dfs(&m.initial, &m.goal, &succ, &mut Vec::new(), &mut out, cap)?;
    out.sort();
    Ok(out)
}

/// Shortest initial→goal path with unit edge costs; ties go to the
/// lexicographically smallest node sequence.
pub fn plan_skeleton(m: &StateMachine) -> Result<PlanSkeleton, SymbolicError> {
    // BFS layer by layer, keeping the lexicographically smallest path to each node.
    let succ = m.successors();
    let mut best: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    best.insert(m.initial.as_str(), vec![m.initial.as_str()]);
    let mut frontier = vec![m.initial.as_str()];
    while !frontier.is_empty() && !best.contains_key(m.goal.as_str()) {
        let mut next: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for &n in &frontier {
            for &s in &succ[n] {
                if best.contains_key(s) {
                    continue;
                }
                let mut cand = best[n].clone();
                cand.push(s);
                match next.get(s) {
                    Some(existing) if *existing <= cand => {}
                    _ => {
                        next.insert(s, cand);
                    }
                }
            }
        }
        frontier = next.keys().copied().collect();
        best.extend(next);
    }
    let path = best.get(m.goal.as_str()).ok_or(SymbolicError::NoPlan)?;
    let steps = path
        .windows(2)
        .map(|w| {
            let e = m.edge_between(w[0], w[1]).expect("successor implies edge");
            PlanStep { node: w[0].to_string(), op: e.op.clone() }
        })
        .collect();
    Ok(PlanSkeleton { steps, goal: m.goal.clone() })
}

/// Closed-world node match: the true tracked atoms are exactly the node's atoms.
pub fn matches_node(truth: &SymbolicState, node: &SymbolicState) -> bool {
    truth == node
}

/// Whether a sequence of symbolic states (true tracked atoms per step)
/// satisfies the machine: every adjacent pair either stays in one node or
/// moves along an edge, the first state is the initial node and the last is
/// the goal. Nodes are matched closed-world over the tracked atoms.
pub fn trajectory_satisfies(m: &StateMachine, states: &[SymbolicState]) -> bool {
    let node_of = |s: &SymbolicState| -> Vec<&str> {
        m.nodes.iter().filter(|(_, v)| matches_node(s, v)).map(|(k, _)| k.as_str()).collect()
    };
    let (Some(first), Some(last)) = (states.first(), states.last()) else {
        return false;
    };
    if !node_of(first).contains(&m.initial.as_str()) || !node_of(last).contains(&m.goal.as_str()) {
        return false;
    }
    states.windows(2).all(|w| {
        let us = node_of(&w[0]);
        let vs = node_of(&w[1]);
        us.iter().any(|u| vs.iter().any(|v| u == v || m.edge_between(u, v).is_some()))
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn set(atoms: &[GroundAtom]) -> SymbolicState {
        atoms.iter().cloned().collect()
    }

    pub fn p(name: &str) -> GroundAtom {
        GroundAtom::roles(name, &["x"])
    }

    fn vocab(preds: &[&str], ops: &[&str]) -> (Vec<Symbol>, Vec<Symbol>) {
        (
            preds.iter().map(|n| Symbol::new(*n, 1)).collect(),
            ops.iter().map(|n| Symbol::new(*n, 1)).collect(),
        )
    }

    /// Builds a machine whose nodes have the given atoms (as unary `p(x)`
    /// predicates) and whose edges' effects are derived from the node sets.
    pub fn machine(nodes: &[(&str, &[&str])], edges: &[(&str, &str)]) -> StateMachine {
        let mut preds: BTreeSet<&str> = BTreeSet::new();
        for (_, atoms) in nodes {
            preds.extend(atoms.iter());
        }
        let preds: Vec<&str> = preds.into_iter().collect();
        let (predicates, operators) = vocab(&preds, &["o"]);
        let nodes: BTreeMap<NodeId, SymbolicState> = nodes
            .iter()
            .map(|(id, atoms)| (id.to_string(), atoms.iter().map(|a| p(a)).collect()))
            .collect();
        let edges = edges
            .iter()
            .map(|(s, d)| {
                let src = &nodes[*s];
                let dst = &nodes[*d];
                Edge {
                    src: s.to_string(),
                    dst: d.to_string(),
                    op: GroundAtom::roles("o", &["x"]),
                    add: dst.difference(src).cloned().collect(),
                    del: src.difference(dst).cloned().collect(),
                }
            })
            .collect::<Vec<_>>();
        let with_incoming: BTreeSet<&str> = edges.iter().map(|e: &Edge| e.dst.as_str()).collect();
        let initial = nodes.keys().find(|k| !with_incoming.contains(k.as_str())).cloned().unwrap_or_default();
        StateMachine {
            name: "fixture".into(),
            predicates,
            operators,
            roles: vec![("x".into(), "thing".into())],
            nodes,
            edges,
            initial,
            goal: "goal".into(),
        }
    }

    pub fn chain() -> StateMachine {
        machine(&[("v0", &[]), ("v1", &["a"]), ("goal", &["b"])], &[("v0", "v1"), ("v1", "goal")])
    }

    /// OR structure with branch lengths 1 (via `v1`) and 2 (via `v2`, `v3`).
    pub fn or_uneven() -> StateMachine {
        machine(
            &[("v0", &[]), ("v1", &["a"]), ("v2", &["b"]), ("v3", &["c"]), ("goal", &["g"])],
            &[("v0", "v2"), ("v2", "v3"), ("v3", "goal"), ("v0", "v1"), ("v1", "goal")],
        )
    }

    pub fn or_branch() -> StateMachine {
        machine(
            &[("v0", &[]), ("v1", &["a"]), ("v2", &["b"]), ("goal", &["g"])],
            &[("v0", "v1"), ("v0", "v2"), ("v1", "goal"), ("v2", "goal")],
        )
    }

    pub fn diamond() -> StateMachine {
        machine(
            &[("v0", &[]), ("a", &["a"]), ("b", &["b"]), ("ab", &["a", "b"]), ("goal", &["a", "b", "g"])],
            &[("v0", "a"), ("v0", "b"), ("a", "ab"), ("b", "ab"), ("ab", "goal")],
        )
    }

    pub fn single() -> StateMachine {
        machine(&[("v0", &[]), ("goal", &["g"])], &[("v0", "goal")])
    }
}
