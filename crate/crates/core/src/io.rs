//! On-disk formats: JSONL datasets, JSON model files and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::expert::{Dataset, Trajectory};
use crate::grid::{Action, Cell, Color, Dir, DoorState, EnvState, GridObject, Kind, Task};
use crate::kb::RoleBinding;
use crate::nn::{Mlp, Standardizer};
use crate::perception::{PerceptionModel, PredicateScorer};
use crate::policy::{BcBaseline, OperatorPolicy, PolicyEnsemble};
use crate::symbolic::{atom_string, GroundAtom, Symbol};

pub const DATASET_SCHEMA: u32 = 1;
pub const MODEL_SCHEMA: u32 = 1;
pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}:{line}: schema version {found}, expected {expected}")]
    Schema { path: PathBuf, line: usize, found: u32, expected: u32 },
    #[error("{path}: {msg}")]
    Invalid { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |cause| IoError::Io { path: path.to_path_buf(), cause }
}

#[derive(Serialize, Deserialize)]
struct GridRecord {
    width: i32,
    height: i32,
    horizon: u32,
    walls: Vec<Cell>,
}

#[derive(Serialize, Deserialize)]
struct ObjectRecord {
    id: u32,
    kind: Kind,
    color: Color,
    pos: Cell,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    door: Option<DoorState>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    carried: bool,
}

#[derive(Serialize, Deserialize)]
struct StateRecord {
    agent: (i32, i32, Dir),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    carrying: Option<u32>,
    step: u32,
    objects: Vec<ObjectRecord>,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRecord {
    schema_version: u32,
    task: Task,
    seed: u64,
    binding: RoleBinding,
    #[serde(with = "atom_string")]
    goal: Vec<GroundAtom>,
    grid: GridRecord,
    states: Vec<StateRecord>,
    actions: Vec<usize>,
}

impl TrajectoryRecord {
    fn from_trajectory(t: &Trajectory) -> Self {
        let s0 = &t.states[0];
        let states = t
            .states
            .iter()
            .map(|s| StateRecord {
                agent: (s.agent_pos.0, s.agent_pos.1, s.agent_dir),
                carrying: s.carrying,
                step: s.step_count,
                objects: s
                    .objects
                    .iter()
                    .map(|o| ObjectRecord { id: o.id, kind: o.kind, color: o.color, pos: o.pos, door: o.door_state, carried: o.carried })
                    .collect(),
            })
            .collect();
        Self {
            schema_version: DATASET_SCHEMA,
            task: t.task,
            seed: t.seed,
            binding: t.binding.clone(),
            goal: t.goal.clone(),
            grid: GridRecord { width: s0.width, height: s0.height, horizon: s0.horizon, walls: s0.walls.iter().copied().collect() },
            states,
            actions: t.actions.iter().map(|a| a.index()).collect(),
        }
    }

    fn into_trajectory(self) -> Result<Trajectory, String> {
        let walls: std::collections::BTreeSet<Cell> = self.grid.walls.iter().copied().collect();
        let states: Vec<EnvState> = self
            .states
            .into_iter()
            .map(|r| EnvState {
                task: self.task,
                width: self.grid.width,
                height: self.grid.height,
                walls: walls.clone(),
                objects: r
                    .objects
                    .into_iter()
                    .map(|o| GridObject { id: o.id, kind: o.kind, color: o.color, pos: o.pos, door_state: o.door, carried: o.carried })
                    .collect(),
                agent_pos: (r.agent.0, r.agent.1),
                agent_dir: r.agent.2,
                carrying: r.carrying,
                step_count: r.step,
                horizon: self.grid.horizon,
                goal: self.goal.clone(),
                binding: self.binding.clone(),
            })
            .collect();
        let actions = self
            .actions
            .iter()
            .map(|&i| Action::from_index(i).ok_or_else(|| format!("action index {i} out of range")))
            .collect::<Result<Vec<_>, _>>()?;
        if states.len() != actions.len() + 1 {
            return Err(format!("{} states for {} actions", states.len(), actions.len()));
        }
        Ok(Trajectory { task: self.task, seed: self.seed, states, actions, goal: self.goal, binding: self.binding })
    }
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<(), IoError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for t in &data.trajectories {
        let line = serde_json::to_string(&TrajectoryRecord::from_trajectory(t)).expect("records serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: Option<u32>,
}

pub fn read_dataset(path: &Path) -> Result<Dataset, IoError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut trajectories = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| IoError::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let probe: VersionProbe = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        let found = probe.schema_version.ok_or_else(|| parse("missing schema_version".into()))?;
        if found != DATASET_SCHEMA {
            return Err(IoError::Schema { path: path.to_path_buf(), line: i + 1, found, expected: DATASET_SCHEMA });
        }
        let rec: TrajectoryRecord = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        trajectories.push(rec.into_trajectory().map_err(parse)?);
    }
    Ok(Dataset { trajectories })
}

/// Replays each trajectory's actions from its first state and checks every
/// recorded state. Returns the index of the first trajectory that diverges.
pub fn verify_replay(data: &Dataset) -> Result<(), (usize, String)> {
    for (i, t) in data.trajectories.iter().enumerate() {
        let replayed = t.states[0].replay(&t.actions).map_err(|e| (i, e.to_string()))?;
        if replayed != t.states {
            let step = replayed.iter().zip(&t.states).position(|(a, b)| a != b).unwrap_or(replayed.len().min(t.states.len()));
            return Err((i, format!("state {step} differs from replay")));
        }
    }
    Ok(())
}

pub fn read_dataset_verified(path: &Path) -> Result<Dataset, IoError> {
    let d = read_dataset(path)?;
    verify_replay(&d).map_err(|(i, msg)| IoError::Invalid { path: path.to_path_buf(), msg: format!("trajectory {i}: {msg}") })?;
    Ok(d)
}

/// A weight array with its shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Perception,
    Policy,
    Bc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub kind: ModelKind,
    /// `name/arity` per predicate or operator.
    pub vocabulary: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub weights: BTreeMap<String, Tensor>,
}

fn put_mlp(w: &mut BTreeMap<String, Tensor>, prefix: &str, m: &Mlp) {
    w.insert(format!("{prefix}.w1"), Tensor { shape: vec![m.hidden, m.input], data: m.w1.clone() });
    w.insert(format!("{prefix}.b1"), Tensor { shape: vec![m.hidden], data: m.b1.clone() });
    w.insert(format!("{prefix}.w2"), Tensor { shape: vec![m.output, m.hidden], data: m.w2.clone() });
    w.insert(format!("{prefix}.b2"), Tensor { shape: vec![m.output], data: m.b2.clone() });
}

fn put_std(w: &mut BTreeMap<String, Tensor>, prefix: &str, s: &Standardizer) {
    w.insert(format!("{prefix}.mean"), Tensor { shape: vec![s.mean.len()], data: s.mean.clone() });
    w.insert(format!("{prefix}.scale"), Tensor { shape: vec![s.scale.len()], data: s.scale.clone() });
}

fn take<'a>(w: &'a BTreeMap<String, Tensor>, key: &str, shape: &[usize]) -> Result<&'a [f64], String> {
    let t = w.get(key).ok_or_else(|| format!("missing weights `{key}`"))?;
    if t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
        return Err(format!("`{key}` has shape {:?} with {} values, expected {shape:?}", t.shape, t.data.len()));
    }
    Ok(&t.data)
}

fn get_mlp(w: &BTreeMap<String, Tensor>, prefix: &str) -> Result<Mlp, String> {
    let w1 = w.get(&format!("{prefix}.w1")).ok_or_else(|| format!("missing weights `{prefix}.w1`"))?;
    let [hidden, input] = w1.shape[..] else { return Err(format!("`{prefix}.w1` must be 2-d")) };
    let w2 = w.get(&format!("{prefix}.w2")).ok_or_else(|| format!("missing weights `{prefix}.w2`"))?;
    let output = *w2.shape.first().ok_or_else(|| format!("`{prefix}.w2` must be 2-d"))?;
    Ok(Mlp {
        input,
        hidden,
        output,
        w1: take(w, &format!("{prefix}.w1"), &[hidden, input])?.to_vec(),
        b1: take(w, &format!("{prefix}.b1"), &[hidden])?.to_vec(),
        w2: take(w, &format!("{prefix}.w2"), &[output, hidden])?.to_vec(),
        b2: take(w, &format!("{prefix}.b2"), &[output])?.to_vec(),
    })
}

fn get_std(w: &BTreeMap<String, Tensor>, prefix: &str, len: usize) -> Result<Standardizer, String> {
    Ok(Standardizer { mean: take(w, &format!("{prefix}.mean"), &[len])?.to_vec(), scale: take(w, &format!("{prefix}.scale"), &[len])?.to_vec() })
}

fn symbol_string(s: &Symbol) -> String {
    format!("{}/{}", s.name, s.arity)
}

fn parse_symbol(s: &str) -> Result<Symbol, String> {
    let (name, arity) = s.rsplit_once('/').ok_or_else(|| format!("vocabulary entry `{s}` is not name/arity"))?;
    let arity = arity.parse().map_err(|_| format!("bad arity in `{s}`"))?;
    Ok(Symbol::new(name, arity))
}

impl ModelFile {
    pub fn from_perception(m: &PerceptionModel) -> Self {
        let mut weights = BTreeMap::new();
        for (name, s) in &m.scorers {
            put_mlp(&mut weights, name, &s.net);
            put_std(&mut weights, name, &s.input);
        }
        Self {
            schema_version: MODEL_SCHEMA,
            kind: ModelKind::Perception,
            vocabulary: m.vocabulary.iter().map(symbol_string).collect(),
            threshold: Some(m.threshold),
            weights,
        }
    }

    pub fn from_policy(e: &PolicyEnsemble) -> Self {
        let mut weights = BTreeMap::new();
        for (name, p) in &e.policies {
            put_mlp(&mut weights, name, &p.net);
            put_std(&mut weights, name, &p.input);
        }
        Self { schema_version: MODEL_SCHEMA, kind: ModelKind::Policy, vocabulary: e.vocabulary.iter().map(symbol_string).collect(), threshold: None, weights }
    }

    pub fn from_bc(b: &BcBaseline) -> Self {
        let mut weights = BTreeMap::new();
        put_mlp(&mut weights, "bc", &b.net);
        put_std(&mut weights, "bc", &b.input);
        Self { schema_version: MODEL_SCHEMA, kind: ModelKind::Bc, vocabulary: Vec::new(), threshold: None, weights }
    }

    fn expect(&self, kind: ModelKind) -> Result<(), String> {
        if self.kind != kind {
            return Err(format!("expected a {kind:?} model, found {:?}", self.kind));
        }
        Ok(())
    }

    pub fn perception(&self) -> Result<PerceptionModel, String> {
        self.expect(ModelKind::Perception)?;
        let vocabulary = self.vocabulary.iter().map(|s| parse_symbol(s)).collect::<Result<Vec<_>, _>>()?;
        let mut scorers = BTreeMap::new();
        for s in &vocabulary {
            let net = get_mlp(&self.weights, &s.name)?;
            let input = get_std(&self.weights, &s.name, net.input)?;
            scorers.insert(s.name.clone(), PredicateScorer { predicate: s.clone(), input, net });
        }
        Ok(PerceptionModel { vocabulary, scorers, threshold: self.threshold.unwrap_or(crate::perception::DEFAULT_THRESHOLD) })
    }

    pub fn policy(&self) -> Result<PolicyEnsemble, String> {
        self.expect(ModelKind::Policy)?;
        let vocabulary = self.vocabulary.iter().map(|s| parse_symbol(s)).collect::<Result<Vec<_>, _>>()?;
        let mut policies = BTreeMap::new();
        for s in &vocabulary {
            let net = get_mlp(&self.weights, &s.name)?;
            let input = get_std(&self.weights, &s.name, net.input)?;
            policies.insert(s.name.clone(), OperatorPolicy { operator: s.clone(), input, net });
        }
        Ok(PolicyEnsemble { vocabulary, policies })
    }

    pub fn bc(&self) -> Result<BcBaseline, String> {
        self.expect(ModelKind::Bc)?;
        let net = get_mlp(&self.weights, "bc")?;
        let input = get_std(&self.weights, "bc", net.input)?;
        Ok(BcBaseline { input, net })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(value).expect("values serialize");
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| IoError::Parse { path: path.to_path_buf(), line: e.line(), msg: e.to_string() })
}

pub fn read_model(path: &Path) -> Result<ModelFile, IoError> {
    let probe: VersionProbe = read_json(path)?;
    let found = probe.schema_version.unwrap_or(0);
    if found != MODEL_SCHEMA {
        return Err(IoError::Schema { path: path.to_path_buf(), line: 1, found, expected: MODEL_SCHEMA });
    }
    read_json(path)
}

pub fn sha256_file(path: &Path) -> Result<String, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// How an artifact was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// sha256 of each input file.
    pub inputs: BTreeMap<String, String>,
    /// sha256 of each produced file.
    pub artifacts: BTreeMap<String, String>,
    pub version: String,
}

impl RunManifest {
    pub fn new(command: Vec<String>, config: serde_json::Value, seeds: Vec<u64>) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA,
            command,
            config,
            seeds,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), IoError> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn artifact(&mut self, path: &Path) -> Result<(), IoError> {
        self.artifacts.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// `<artifact>.manifest.json` next to the artifact.
    pub fn path_for(artifact: &Path) -> PathBuf {
        let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        artifact.with_file_name(name)
    }

    /// Writes one manifest beside each artifact.
    pub fn write_beside_artifacts(&self) -> Result<(), IoError> {
        for a in self.artifacts.keys() {
            write_json(&Self::path_for(Path::new(a)), self)?;
        }
        Ok(())
    }
}
