#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use abil::symbolic::{Edge, NodeId, ObjectRef, Symbol, SymbolicState};
use abil::{GroundAtom, StateMachine};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn p(name: &str) -> GroundAtom {
    GroundAtom::roles(name, &["x"])
}

/// Machine over unary `name(x)` atoms with edge effects derived from the node sets.
pub fn machine(nodes: &[(&str, &[&str])], edges: &[(&str, &str)]) -> StateMachine {
    let preds: BTreeSet<&str> = nodes.iter().flat_map(|(_, a)| a.iter().copied()).collect();
    let nodes: BTreeMap<NodeId, SymbolicState> = nodes.iter().map(|(id, atoms)| (id.to_string(), atoms.iter().map(|a| p(a)).collect())).collect();
    let edges = edges.iter().map(|(s, d)| derived_edge(&nodes, s, d, GroundAtom::roles("o", &["x"]))).collect();
    finish(
        "fixture",
        preds.into_iter().map(|n| Symbol::new(n, 1)).collect(),
        vec![Symbol::new("o", 1)],
        vec![("x".into(), "thing".into())],
        nodes,
        edges,
    )
}

fn derived_edge(nodes: &BTreeMap<NodeId, SymbolicState>, s: &str, d: &str, op: GroundAtom) -> Edge {
    let (src, dst) = (&nodes[s], &nodes[d]);
    Edge {
        src: s.into(),
        dst: d.into(),
        op,
        add: dst.difference(src).cloned().collect(),
        del: src.difference(dst).cloned().collect(),
    }
}

fn finish(
    name: &str,
    predicates: Vec<Symbol>,
    operators: Vec<Symbol>,
    roles: Vec<(String, String)>,
    nodes: BTreeMap<NodeId, SymbolicState>,
    edges: Vec<Edge>,
) -> StateMachine {
    let with_incoming: BTreeSet<&str> = edges.iter().map(|e: &Edge| e.dst.as_str()).collect();
    let initial = nodes.keys().find(|k| !with_incoming.contains(k.as_str())).cloned().unwrap_or_default();
    StateMachine { name: name.into(), predicates, operators, roles, nodes, edges, initial, goal: "goal".into() }
}

/// Sequence of `len` operators.
pub fn chain(len: usize) -> StateMachine {
    let names: Vec<String> = (0..len).map(|i| format!("v{i}")).collect();
    let atoms: Vec<String> = (0..len).map(|i| format!("a{i}")).collect();
    let mut nodes: Vec<(&str, Vec<&str>)> = vec![("v0", vec![])];
    for i in 1..len {
        nodes.push((&names[i], vec![&atoms[i]]));
    }
    nodes.push(("goal", vec!["g"]));
    let node_refs: Vec<(&str, &[&str])> = nodes.iter().map(|(n, a)| (*n, a.as_slice())).collect();
    let ids: Vec<&str> = nodes.iter().map(|(n, _)| *n).collect();
    let edges: Vec<(&str, &str)> = ids.windows(2).map(|w| (w[0], w[1])).collect();
    machine(&node_refs, &edges)
}

/// Two alternative branches of lengths 1 and 2.
pub fn or_branch() -> StateMachine {
    machine(
        &[("v0", &[]), ("v1", &["a"]), ("v2", &["b"]), ("v3", &["c"]), ("goal", &["g"])],
        &[("v0", "v2"), ("v2", "v3"), ("v3", "goal"), ("v0", "v1"), ("v1", "goal")],
    )
}

/// Two sub-goals achievable in either order.
pub fn any_order() -> StateMachine {
    machine(
        &[("v0", &[]), ("a", &["a"]), ("b", &["b"]), ("ab", &["a", "b"]), ("goal", &["a", "b", "g"])],
        &[("v0", "a"), ("v0", "b"), ("a", "ab"), ("b", "ab"), ("ab", "goal")],
    )
}

/// An atom that must be achieved and then released before the goal.
pub fn achieve_release() -> StateMachine {
    machine(&[("v0", &[]), ("v1", &["h"]), ("v2", &["h", "f"]), ("goal", &["f", "g"])], &[("v0", "v1"), ("v1", "v2"), ("v2", "goal")])
}

/// Random well-formed DAG machine over unary and binary predicates, with
/// role or integer arguments.
pub fn random_machine(rng: &mut ChaCha8Rng) -> StateMachine {
    let roles: Vec<(String, String)> = (0..rng.gen_range(1..=3)).map(|i| (format!("r{i}"), ["key", "door", "ball"][i].to_string())).collect();
    let predicates: Vec<Symbol> = (0..rng.gen_range(1..=4)).map(|i| Symbol::new(format!("p{i}"), rng.gen_range(1..=2))).collect();
    let operators: Vec<Symbol> = (0..rng.gen_range(1..=3)).map(|i| Symbol::new(format!("op-{i}"), rng.gen_range(1..=2))).collect();
    let arg = |rng: &mut ChaCha8Rng| {
        if rng.gen_bool(0.25) {
            ObjectRef::Id(rng.gen_range(0..20))
        } else {
            ObjectRef::Role(roles.choose(rng).unwrap().0.clone())
        }
    };
    let atom = |rng: &mut ChaCha8Rng, sym: &Symbol| GroundAtom::new(sym.name.clone(), (0..sym.arity).map(|_| arg(rng)).collect());
    let universe: Vec<GroundAtom> = (0..6).map(|_| {
        let s = predicates.choose(rng).unwrap().clone();
        atom(rng, &s)
    }).collect();

    let inner = rng.gen_range(0..=4);
    let mut ids: Vec<String> = (0..=inner).map(|i| format!("v{i}")).collect();
    ids.push("goal".into());
    let nodes: BTreeMap<NodeId, SymbolicState> = ids
        .iter()
        .map(|id| (id.clone(), universe.iter().filter(|_| rng.gen_bool(0.4)).cloned().collect()))
        .collect();
    let mut pairs = BTreeSet::new();
    for j in 1..ids.len() {
        pairs.insert((rng.gen_range(0..j), j));
        if j >= 2 && rng.gen_bool(0.3) {
            pairs.insert((rng.gen_range(0..j), j));
        }
    }
    let mut edges = Vec::new();
    for (i, j) in pairs {
        let op_sym = operators.choose(rng).unwrap().clone();
        let op = atom(rng, &op_sym);
        edges.push(derived_edge(&nodes, &ids[i], &ids[j], op));
    }
    edges.shuffle(rng);
    finish(&format!("fuzz-{}", rng.gen::<u16>()), predicates, operators, roles, nodes, edges)
}
