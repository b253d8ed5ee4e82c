//! Object-level predicate grounding.
//!
//! Each predicate gets its own small network over the features of its
//! argument objects. Training never sees ground-truth atoms: labels come from
//! abducing each demonstration against its task's state machine, then the
//! scorers are fitted to those labels, and the loop repeats.

use std::collections::BTreeMap;

use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abduction::{abduce, forced_labels, AbductionError, PseudoLabel, ScoreTrack};
use crate::expert::{Dataset, Trajectory};
use crate::grid::{Color, EnvError, EnvState, Kind, Task};
use crate::kb;
use crate::nn::{Mlp, Sample, Standardizer, Target};
use crate::symbolic::{GroundAtom, StateMachine, Symbol};

pub const HIDDEN: usize = 32;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

const AGENT_BLOCK: usize = 6;
const OBJECT_BLOCK: usize = Kind::ALL.len() + Color::ALL.len() + 5;
const OFFSET_BLOCK: usize = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerceptionError {
    #[error("predicate `{0}` is not in the model vocabulary")]
    UnknownPredicate(String),
    #[error("atom {atom} has arity {got}, scorer expects {expected}")]
    Arity { atom: String, expected: usize, got: usize },
    #[error("atom {0} names an object missing from the state")]
    UnknownObject(String),
    #[error("dataset must contain at least one trajectory")]
    EmptyDataset,
    #[error("no machine for task {0}")]
    NoMachine(Task),
    #[error("binding roles for task {task}: {msg}")]
    Binding { task: Task, msg: String },
    #[error(transparent)]
    Abduction(#[from] AbductionError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

pub fn feature_len(arity: usize) -> usize {
    AGENT_BLOCK + arity * (OBJECT_BLOCK + OFFSET_BLOCK)
}

/// Agent block, one block per argument object, then each argument's offset
/// from the agent.
pub fn featurize(state: &EnvState, atom: &GroundAtom) -> Result<Vec<f64>, PerceptionError> {
    let missing = || PerceptionError::UnknownObject(atom.to_string());
    let ids = atom.object_ids().ok_or_else(missing)?;
    let objs = ids.iter().map(|&id| state.object(id).ok_or_else(missing)).collect::<Result<Vec<_>, _>>()?;
    let (w, h) = (state.width as f64, state.height as f64);
    let mut f = Vec::with_capacity(feature_len(objs.len()));
    f.push(state.agent_pos.0 as f64 / w);
    f.push(state.agent_pos.1 as f64 / h);
    f.extend((0..4).map(|i| if state.agent_dir.index() == i { 1.0 } else { 0.0 }));
    for o in &objs {
        f.extend(Kind::ALL.iter().map(|k| if *k == o.kind { 1.0 } else { 0.0 }));
        f.extend(Color::ALL.iter().map(|c| if *c == o.color { 1.0 } else { 0.0 }));
        f.push(o.pos.0 as f64 / w);
        f.push(o.pos.1 as f64 / h);
        f.push(o.is_open() as u8 as f64);
        f.push(o.is_locked() as u8 as f64);
        f.push(o.carried as u8 as f64);
    }
    for o in &objs {
        f.push((o.pos.0 - state.agent_pos.0) as f64 / w);
        f.push((o.pos.1 - state.agent_pos.1) as f64 / h);
    }
    Ok(f)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredicateScorer {
    pub predicate: Symbol,
    pub input: Standardizer,
    pub net: Mlp,
}

impl PredicateScorer {
    pub fn score(&self, features: &[f64]) -> f64 {
        self.net.prob(&self.input.apply(features))
    }
}

/// Thresholded truth plus the raw scores behind it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grounding {
    pub truth: BTreeMap<GroundAtom, bool>,
    pub scores: BTreeMap<GroundAtom, f64>,
}

/// Anything that can score ground atoms in a state.
pub trait Grounder: Sync {
    fn score(&self, state: &EnvState, atom: &GroundAtom) -> Result<f64, PerceptionError>;

    fn threshold(&self) -> f64 {
        DEFAULT_THRESHOLD
    }

    fn ground(&self, state: &EnvState, atoms: &[GroundAtom]) -> Result<Grounding, PerceptionError> {
        let mut g = Grounding::default();
        let theta = self.threshold();
        for a in atoms {
            let s = self.score(state, a)?;
            g.truth.insert(a.clone(), s >= theta);
            g.scores.insert(a.clone(), s);
        }
        Ok(g)
    }
}

/// Reads truth straight from the environment.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleGrounder;

impl Grounder for OracleGrounder {
    fn score(&self, state: &EnvState, atom: &GroundAtom) -> Result<f64, PerceptionError> {
        Ok(if state.atom_truth(atom)? { 1.0 } else { 0.0 })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptionModel {
    pub vocabulary: Vec<Symbol>,
    pub scorers: BTreeMap<String, PredicateScorer>,
    pub threshold: f64,
}

impl PerceptionModel {
    pub fn zeros(vocabulary: &[Symbol]) -> Self {
        Self::build(vocabulary, |s| Mlp::zeros(feature_len(s.arity), HIDDEN, 1))
    }

    /// Fresh random weights; each predicate draws from its own stream.
    pub fn init(vocabulary: &[Symbol], hidden: usize, seed: u64) -> Self {
        let mut i = 0;
        Self::build(vocabulary, |s| {
            let mut rng = stream(seed, i);
            i += 1;
            Mlp::init(feature_len(s.arity), hidden, 1, &mut rng)
        })
    }

    fn build(vocabulary: &[Symbol], mut net: impl FnMut(&Symbol) -> Mlp) -> Self {
        let scorers = vocabulary
            .iter()
            .map(|s| {
                let input = Standardizer::identity(feature_len(s.arity));
                (s.name.clone(), PredicateScorer { predicate: s.clone(), input, net: net(s) })
            })
            .collect();
        Self { vocabulary: vocabulary.to_vec(), scorers, threshold: DEFAULT_THRESHOLD }
    }

    fn scorer(&self, atom: &GroundAtom) -> Result<&PredicateScorer, PerceptionError> {
        let s = self.scorers.get(&atom.predicate).ok_or_else(|| PerceptionError::UnknownPredicate(atom.predicate.clone()))?;
        if s.predicate.arity != atom.arity() {
            return Err(PerceptionError::Arity { atom: atom.to_string(), expected: s.predicate.arity, got: atom.arity() });
        }
        Ok(s)
    }

    pub fn predict(&self, state: &EnvState, atom: &GroundAtom) -> Result<f64, PerceptionError> {
        let s = self.scorer(atom)?;
        Ok(s.score(&featurize(state, atom)?))
    }

    pub fn ground_state(&self, state: &EnvState, atoms: &[GroundAtom]) -> Result<Grounding, PerceptionError> {
        self.ground(state, atoms)
    }
}

impl Grounder for PerceptionModel {
    fn score(&self, state: &EnvState, atom: &GroundAtom) -> Result<f64, PerceptionError> {
        self.predict(state, atom)
    }

    fn threshold(&self) -> f64 {
        self.threshold
    }
}

fn stream(seed: u64, i: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i);
    rng
}

/// How round 0 picks its labels, before any scorer is trained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bootstrap {
    /// Only labels shared by every consistent segmentation (first and last
    /// steps, plus anything the machine's length pins down).
    #[default]
    Forced,
    /// Abduce against constant 0.5 scores and take the full labeling, which
    /// under the tie-break puts every transition as early as possible.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rounds: usize,
    pub epochs: usize,
    pub lr: f64,
    /// 0 means full batch.
    pub batch: usize,
    pub hidden: usize,
    pub seed: u64,
    pub bootstrap: Bootstrap,
    /// Also fit untracked atoms to the model's own thresholded output.
    pub self_training: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { rounds: 5, epochs: 50, lr: 0.1, batch: 32, hidden: HIDDEN, seed: 0, bootstrap: Bootstrap::Forced, self_training: false }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: usize,
    /// Summed abduction cost over trajectories; absent for a forced-label round.
    pub abduction_cost: Option<f64>,
    pub infeasible: usize,
    pub labels: usize,
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rounds: Vec<RoundStats>,
}

/// A trajectory's states with features cached for every atom we score.
struct Prepared {
    steps: usize,
    machine: StateMachine,
    tracked: Vec<GroundAtom>,
    /// `tracked_features[t][i]`, standardized once training starts.
    tracked_features: Vec<Vec<Vec<f64>>>,
    /// Untracked vocabulary atoms for self-training, `(t, atom, features)`.
    extra: Vec<(GroundAtom, Vec<Vec<f64>>)>,
}

struct Labeled<'a>(&'a [f64], Target);

impl Sample for Labeled<'_> {
    fn features(&self) -> &[f64] {
        self.0
    }
    fn target(&self) -> Target {
        self.1
    }
}

fn prepare(traj: &Trajectory, machine: &StateMachine, vocab: &[Symbol], self_training: bool) -> Result<Prepared, PerceptionError> {
    let tracked = machine.tracked_atoms();
    let tracked_features = traj
        .states
        .iter()
        .map(|s| tracked.iter().map(|a| featurize(s, a)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()?;
    let mut extra = Vec::new();
    if self_training {
        let s0 = &traj.states[0];
        for atom in s0.oracle_atoms(vocab)?.into_keys() {
            if tracked.contains(&atom) {
                continue;
            }
            let feats = traj.states.iter().map(|s| featurize(s, &atom)).collect::<Result<Vec<_>, _>>()?;
            extra.push((atom, feats));
        }
    }
    Ok(Prepared { steps: traj.len(), machine: machine.clone(), tracked, tracked_features, extra })
}

/// Trains one scorer per predicate of `machine` on demonstrations of a single task.
pub fn train_perception(data: &Dataset, machine: &StateMachine, cfg: &TrainConfig) -> Result<(PerceptionModel, TrainReport), PerceptionError> {
    let machines: BTreeMap<Task, StateMachine> = data.task_mix().into_keys().map(|t| (t, machine.clone())).collect();
    train_perception_multi(data, &machines, cfg)
}

/// Trains on a mix of tasks; each trajectory is abduced against its own task's machine.
pub fn train_perception_multi(
    data: &Dataset,
    machines: &BTreeMap<Task, StateMachine>,
    cfg: &TrainConfig,
) -> Result<(PerceptionModel, TrainReport), PerceptionError> {
    if data.is_empty() {
        return Err(PerceptionError::EmptyDataset);
    }
    let mut vocab: Vec<Symbol> = Vec::new();
    for m in machines.values() {
        for p in &m.predicates {
            if !vocab.contains(p) {
                vocab.push(p.clone());
            }
        }
    }
    vocab.sort_by(|a, b| a.name.cmp(&b.name));
    let prepared = data
        .trajectories
        .par_iter()
        .map(|t| {
            let m = machines.get(&t.task).ok_or(PerceptionError::NoMachine(t.task))?;
            let bound = kb::bind_roles(m, &t.binding).map_err(|e| PerceptionError::Binding { task: t.task, msg: e.to_string() })?;
            prepare(t, &bound, &vocab, cfg.self_training)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut model = PerceptionModel::init(&vocab, cfg.hidden, cfg.seed);
    for (name, scorer) in model.scorers.iter_mut() {
        let len = feature_len(scorer.predicate.arity);
        let rows = prepared.iter().flat_map(|p| {
            let idx: Vec<usize> = p.tracked.iter().enumerate().filter(|(_, a)| &a.predicate == name).map(|(i, _)| i).collect();
            p.tracked_features.iter().flat_map(move |row| idx.clone().into_iter().map(move |i| row[i].as_slice()))
        });
        scorer.input = Standardizer::fit(len, rows);
    }
    // Cache standardized inputs; the raw features are no longer needed.
    let prepared: Vec<Prepared> = prepared
        .into_par_iter()
        .map(|mut p| {
            for row in p.tracked_features.iter_mut() {
                for (x, a) in row.iter_mut().zip(&p.tracked) {
                    *x = model.scorers[&a.predicate].input.apply(x);
                }
            }
            for (a, feats) in p.extra.iter_mut() {
                if let Some(sc) = model.scorers.get(&a.predicate) {
                    feats.iter_mut().for_each(|x| *x = sc.input.apply(x));
                }
            }
            p
        })
        .collect();
    let mut report = TrainReport::default();
    for round in 0..cfg.rounds {
        let (labels, cost, infeasible) = label_round(&model, &prepared, round, cfg.bootstrap);
        if infeasible > 0 {
            warn!("round {round}: {infeasible} trajectories could not be abduced and were skipped");
        }
        let mut per_pred: BTreeMap<&str, Vec<Labeled>> = vocab.iter().map(|s| (s.name.as_str(), Vec::new())).collect();
        let mut count = 0;
        for (p, traj_labels) in prepared.iter().zip(&labels) {
            let Some(traj_labels) = traj_labels else { continue };
            for l in traj_labels {
                let i = p.tracked.iter().position(|a| *a == l.atom).expect("label atom is tracked");
                let x = &p.tracked_features[l.step][i];
                per_pred.get_mut(l.atom.predicate.as_str()).expect("machine predicates are in vocabulary").push(Labeled(x, Target::Binary(l.value as u8 as f64)));
                count += 1;
            }
            if cfg.self_training && round > 0 {
                for (atom, feats) in &p.extra {
                    if let Some(scorer) = model.scorers.get(&atom.predicate) {
                        for x in feats {
                            let y = (scorer.net.prob(x) >= model.threshold) as u8 as f64;
                            per_pred.get_mut(atom.predicate.as_str()).expect("in vocabulary").push(Labeled(x, Target::Binary(y)));
                        }
                    }
                }
            }
        }
        let names: Vec<String> = model.scorers.keys().cloned().collect();
        let results: Vec<(Mlp, Vec<f64>)> = names
            .par_iter()
            .enumerate()
            .map(|(i, name)| {
                let mut net = model.scorers[name].net.clone();
                let samples = &per_pred[name.as_str()];
                let mut rng = stream(cfg.seed ^ 0x5eed, (round * 1024 + i) as u64);
                let losses = (0..cfg.epochs).map(|_| net.train_epoch(samples, cfg.lr, cfg.batch, &mut rng)).collect();
                (net, losses)
            })
            .collect();
        let mut epoch_loss = vec![0.0; cfg.epochs];
        for (name, (net, losses)) in names.iter().zip(results) {
            model.scorers.get_mut(name).expect("same keys").net = net;
            for (e, l) in losses.into_iter().enumerate() {
                epoch_loss[e] += l / names.len() as f64;
            }
        }
        debug!("perception round {round}: cost {cost:?}, {count} labels, loss {epoch_loss:?}");
        report.rounds.push(RoundStats { round, abduction_cost: cost, infeasible, labels: count, epoch_loss });
    }
    Ok((model, report))
}

type RoundLabels = (Vec<Option<Vec<PseudoLabel>>>, Option<f64>, usize);

fn label_round(model: &PerceptionModel, prepared: &[Prepared], round: usize, bootstrap: Bootstrap) -> RoundLabels {
    let forced = round == 0 && bootstrap == Bootstrap::Forced;
    let results: Vec<Result<(Vec<PseudoLabel>, f64), AbductionError>> = prepared
        .par_iter()
        .map(|p| {
            if forced {
                return forced_labels(&p.machine, p.steps).map(|l| (l, 0.0));
            }
            let track = if round == 0 {
                ScoreTrack::uniform(&p.machine, p.steps, 0.5)
            } else {
                let scores = p
                    .tracked_features
                    .iter()
                    .map(|row| row.iter().zip(&p.tracked).map(|(x, a)| model.scorers[&a.predicate].net.prob(x)).collect())
                    .collect();
                ScoreTrack::new(p.tracked.clone(), scores)
            };
            abduce(&track, &p.machine).map(|l| (l.pseudo, l.cost))
        })
        .collect();
    let mut labels = Vec::with_capacity(results.len());
    let mut cost = 0.0;
    let mut infeasible = 0;
    for r in results {
        match r {
            Ok((l, c)) => {
                cost += c;
                labels.push(Some(l));
            }
            Err(_) => {
                infeasible += 1;
                labels.push(None);
            }
        }
    }
    (labels, (!forced).then_some(cost), infeasible)
}

/// Which atoms to grade in each state.
#[derive(Clone, Debug)]
pub enum AtomSelection {
    /// The tracked atoms of the state's own bound task machine.
    Tracked,
    /// Every ground atom of these predicates over the state's objects.
    Vocabulary(Vec<Symbol>),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    /// `(correct, total)` per predicate.
    pub per_predicate: BTreeMap<String, (usize, usize)>,
    pub correct: usize,
    pub total: usize,
}

impl AccuracyReport {
    /// Micro-averaged accuracy.
    pub fn overall(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.correct as f64 / self.total as f64
    }

    pub fn predicate(&self, name: &str) -> Option<f64> {
        self.per_predicate.get(name).map(|&(c, t)| c as f64 / t.max(1) as f64)
    }
}

/// Agreement between thresholded scores and oracle truth.
pub fn grounding_accuracy<G: Grounder>(g: &G, states: &[EnvState], selection: &AtomSelection) -> Result<AccuracyReport, PerceptionError> {
    let per_state = states
        .par_iter()
        .map(|s| {
            let atoms: Vec<GroundAtom> = match selection {
                AtomSelection::Tracked => s.bound_machine().tracked_atoms(),
                AtomSelection::Vocabulary(v) => s.oracle_atoms(v)?.into_keys().collect(),
            };
            let grounded = g.ground(s, &atoms)?;
            atoms
                .iter()
                .map(|a| Ok((a.predicate.clone(), grounded.truth[a] == s.atom_truth(a)?)))
                .collect::<Result<Vec<_>, PerceptionError>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut r = AccuracyReport::default();
    for (pred, ok) in per_state.into_iter().flatten() {
        let e = r.per_predicate.entry(pred).or_default();
        e.1 += 1;
        r.total += 1;
        if ok {
            e.0 += 1;
            r.correct += 1;
        }
    }
    Ok(r)
}

/// Held-out states for grading: all states of expert demos from the given
/// configs, truncated to `limit`.
pub fn sample_states(data: &Dataset, limit: usize) -> Vec<EnvState> {
    data.trajectories.iter().flat_map(|t| t.states.iter().cloned()).take(limit).collect()
}
