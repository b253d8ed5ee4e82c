//! Deterministic single-agent gridworld in the style of BabyAI.
//!
//! Coordinates are `(x, y)` with `y` growing southwards. The outer border is
//! wall; door tasks additionally split the grid with a vertical wall and keep
//! the agent in the western room.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{self, RoleBinding};
use crate::symbolic::{GroundAtom, ObjectRef, StateMachine, Symbol, SymbolicState};

pub type Cell = (i32, i32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Key,
    Ball,
    Box,
    Door,
}

impl Kind {
    pub const ALL: [Kind; 4] = [Kind::Key, Kind::Ball, Kind::Box, Kind::Door];

    pub fn name(self) -> &'static str {
        match self {
            Kind::Key => "key",
            Kind::Ball => "ball",
            Kind::Box => "box",
            Kind::Door => "door",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Purple,
    Yellow,
    Grey,
}

impl Color {
    pub const ALL: [Color; 6] = [Color::Red, Color::Green, Color::Blue, Color::Purple, Color::Yellow, Color::Grey];
    /// Distractor colors seen during training.
    pub const SEEN: [Color; 3] = [Color::Green, Color::Blue, Color::Purple];
    /// Distractor colors for the generalization split, including unseen ones.
    pub const WIDE: [Color; 5] = [Color::Green, Color::Blue, Color::Purple, Color::Yellow, Color::Grey];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Purple => "purple",
            Color::Yellow => "yellow",
            Color::Grey => "grey",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DoorState {
    Open,
    Closed,
    Locked,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Dir {
    N,
    E,
    S,
    W,
}

impl Dir {
    pub const ALL: [Dir; 4] = [Dir::N, Dir::E, Dir::S, Dir::W];

    pub fn delta(self) -> Cell {
        match self {
            Dir::N => (0, -1),
            Dir::E => (1, 0),
            Dir::S => (0, 1),
            Dir::W => (-1, 0),
        }
    }

    pub fn left(self) -> Dir {
        Dir::ALL[(self as usize + 3) % 4]
    }

    pub fn right(self) -> Dir {
        Dir::ALL[(self as usize + 1) % 4]
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

pub fn offset(c: Cell, d: Dir) -> Cell {
    let (dx, dy) = d.delta();
    (c.0 + dx, c.1 + dy)
}

pub fn manhattan(a: Cell, b: Cell) -> i32 {
    (a.0 - b.0).abs() + (a.1 - b.1).abs()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    TurnLeft,
    TurnRight,
    Forward,
    Pickup,
    Drop,
    Toggle,
}

impl Action {
    pub const ALL: [Action; 6] = [Action::TurnLeft, Action::TurnRight, Action::Forward, Action::Pickup, Action::Drop, Action::Toggle];
    pub const COUNT: usize = 6;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridObject {
    pub id: u32,
    pub kind: Kind,
    pub color: Color,
    pub pos: Cell,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub door_state: Option<DoorState>,
    #[serde(default)]
    pub carried: bool,
}

impl GridObject {
    pub fn is_door(&self) -> bool {
        self.kind == Kind::Door
    }

    pub fn is_open(&self) -> bool {
        self.door_state == Some(DoorState::Open)
    }

    pub fn is_locked(&self) -> bool {
        self.door_state == Some(DoorState::Locked)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    GotoSingle,
    Goto,
    Pickup,
    Open,
    Put,
    Unlock,
}

impl Task {
    pub const ALL: [Task; 6] = [Task::GotoSingle, Task::Goto, Task::Pickup, Task::Open, Task::Put, Task::Unlock];

    pub fn name(self) -> &'static str {
        match self {
            Task::GotoSingle => "goto_single",
            Task::Goto => "goto",
            Task::Pickup => "pickup",
            Task::Open => "open",
            Task::Put => "put",
            Task::Unlock => "unlock",
        }
    }

    /// Stem of the knowledge-base file describing this task.
    pub fn kb_name(self) -> &'static str {
        match self {
            Task::GotoSingle | Task::Goto => "goto",
            t => t.name(),
        }
    }

    pub fn machine(self) -> StateMachine {
        kb::shipped(self.kb_name()).expect("every task ships a knowledge base")
    }

    pub fn uses_doors(self) -> bool {
        matches!(self, Task::Open | Task::Unlock)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| format!("unknown task `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Basic,
    #[serde(alias = "gen")]
    Generalization,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Basic => "basic",
            Split::Generalization => "generalization",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "basic" => Ok(Split::Basic),
            "gen" | "generalization" => Ok(Split::Generalization),
            _ => Err(format!("unknown split `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task: Task,
    pub width: i32,
    pub height: i32,
    /// Total non-door objects, targets included.
    pub n_objects: usize,
    /// Total doors for door tasks, target included.
    pub n_doors: usize,
    pub horizon: u32,
    pub seed: u64,
    /// Draw distractor colors from the wide palette that includes colors never seen in training.
    pub unseen_colors: bool,
}

impl TaskConfig {
    pub fn new(task: Task, split: Split, seed: u64) -> Self {
        let (objects, doors, unseen) = match split {
            Split::Basic => (4, 4, false),
            Split::Generalization => (8, 8, true),
        };
        Self {
            task,
            width: 8,
            height: 8,
            n_objects: if task == Task::GotoSingle { 1 } else { objects },
            n_doors: doors,
            horizon: 64,
            seed,
            unseen_colors: unseen,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvError {
    #[error("cannot place {requested} objects for task {task} on a {width}x{height} grid")]
    Placement { task: Task, requested: usize, width: i32, height: i32 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("step {step} exceeds horizon {horizon}")]
    HorizonExceeded { step: u32, horizon: u32 },
    #[error("unknown predicate `{0}`")]
    UnknownPredicate(String),
    #[error("unknown object {0}")]
    UnknownObject(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvState {
    pub task: Task,
    pub width: i32,
    pub height: i32,
    pub walls: BTreeSet<Cell>,
    /// Sorted by id.
    pub objects: Vec<GridObject>,
    pub agent_pos: Cell,
    pub agent_dir: Dir,
    pub carrying: Option<u32>,
    pub step_count: u32,
    pub horizon: u32,
    pub goal: Vec<GroundAtom>,
    /// Which episode objects the task's knowledge-base roles refer to.
    pub binding: RoleBinding,
}

impl EnvState {
    pub fn object(&self, id: u32) -> Option<&GridObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    fn object_mut(&mut self, id: u32) -> Option<&mut GridObject> {
        self.objects.iter_mut().find(|o| o.id == id)
    }

    pub fn front(&self) -> Cell {
        offset(self.agent_pos, self.agent_dir)
    }

    /// The object lying on a cell (carried objects excluded).
    pub fn object_at(&self, c: Cell) -> Option<&GridObject> {
        self.objects.iter().find(|o| !o.carried && o.pos == c)
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.0 >= 0 && c.1 >= 0 && c.0 < self.width && c.1 < self.height
    }

    /// Whether the agent cannot enter this cell.
    pub fn blocked(&self, c: Cell) -> bool {
        if !self.in_bounds(c) {
            return true;
        }
        match self.object_at(c) {
            Some(o) if o.is_door() => !o.is_open(),
            Some(_) => true,
            None => self.walls.contains(&c),
        }
    }

    pub fn facing_object(&self) -> Option<&GridObject> {
        self.object_at(self.front())
    }

    pub fn target(&self, role: &str) -> Option<&GridObject> {
        self.binding.get(role).and_then(|id| self.object(id))
    }

    /// The task's knowledge base bound to this episode's target objects.
    pub fn bound_machine(&self) -> StateMachine {
        kb::bind_roles(&self.task.machine(), &self.binding).expect("generator binds every role")
    }

    /// Exact truth of a single ground atom.
    pub fn atom_truth(&self, atom: &GroundAtom) -> Result<bool, EnvError> {
        let ids = atom.object_ids().ok_or_else(|| EnvError::UnknownObject(atom.to_string()))?;
        let objs = ids
            .iter()
            .map(|&id| self.object(id).ok_or_else(|| EnvError::UnknownObject(id.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let arity_err = || EnvError::UnknownPredicate(format!("{}/{}", atom.predicate, objs.len()));
        let [o, rest @ ..] = objs.as_slice() else { return Err(arity_err()) };
        let unary = |v: bool| if rest.is_empty() { Ok(v) } else { Err(arity_err()) };
        match atom.predicate.as_str() {
            "facing" => unary(!o.carried && o.pos == self.front()),
            "holding" => unary(self.carrying == Some(o.id)),
            "is-open" => unary(o.is_open()),
            "is-locked" => unary(o.is_locked()),
            "next-to" => match rest {
                [b] => Ok(o.id != b.id && !o.carried && !b.carried && manhattan(o.pos, b.pos) == 1),
                _ => Err(arity_err()),
            },
            p => {
                let attr = p.strip_prefix("is-").ok_or_else(|| EnvError::UnknownPredicate(p.into()))?;
                if let Some(c) = Color::ALL.iter().find(|c| c.name() == attr) {
                    unary(o.color == *c)
                } else if let Some(k) = Kind::ALL.iter().find(|k| k.name() == attr) {
                    unary(o.kind == *k)
                } else {
                    Err(EnvError::UnknownPredicate(p.into()))
                }
            }
        }
    }

    /// Ground truth for every ground atom of the vocabulary over this state's objects.
    pub fn oracle_atoms(&self, vocabulary: &[Symbol]) -> Result<BTreeMap<GroundAtom, bool>, EnvError> {
        let mut out = BTreeMap::new();
        for sym in vocabulary {
            let args: Vec<Vec<u32>> = match sym.arity {
                1 => self.objects.iter().map(|o| vec![o.id]).collect(),
                2 => self
                    .objects
                    .iter()
                    .flat_map(|a| self.objects.iter().filter(move |b| b.id != a.id).map(move |b| vec![a.id, b.id]))
                    .collect(),
                n => return Err(EnvError::UnknownPredicate(format!("{}/{n}", sym.name))),
            };
            for ids in args {
                let atom = GroundAtom::ids(sym.name.clone(), &ids);
                let v = self.atom_truth(&atom)?;
                out.insert(atom, v);
            }
        }
        Ok(out)
    }

    /// True atoms among `atoms`.
    pub fn true_atoms<'a>(&self, atoms: impl IntoIterator<Item = &'a GroundAtom>) -> SymbolicState {
        atoms.into_iter().filter(|a| self.atom_truth(a).unwrap_or(false)).cloned().collect()
    }

    pub fn goal_satisfied(&self) -> bool {
        self.goal.iter().all(|a| self.atom_truth(a).unwrap_or(false))
    }

    pub fn timed_out(&self) -> bool {
        self.step_count >= self.horizon
    }

    /// Deterministic transition. Errors once the horizon is reached.
    pub fn step(&self, action: Action) -> Result<EnvState, EnvError> {
        if self.step_count >= self.horizon {
            return Err(EnvError::HorizonExceeded { step: self.step_count + 1, horizon: self.horizon });
        }
        let mut s = self.clone();
        s.step_count += 1;
        let front = s.front();
        match action {
            Action::TurnLeft => s.agent_dir = s.agent_dir.left(),
            Action::TurnRight => s.agent_dir = s.agent_dir.right(),
            Action::Forward => {
                if !s.blocked(front) {
                    s.agent_pos = front;
                    if let Some(id) = s.carrying {
                        s.object_mut(id).expect("carried object exists").pos = front;
                    }
                }
            }
            Action::Pickup => {
                if s.carrying.is_none() {
                    if let Some(id) = s.object_at(front).filter(|o| !o.is_door()).map(|o| o.id) {
                        let pos = s.agent_pos;
                        let o = s.object_mut(id).expect("object exists");
                        o.carried = true;
                        o.pos = pos;
                        s.carrying = Some(id);
                    }
                }
            }
            Action::Drop => {
                if let Some(id) = s.carrying {
                    let free = s.in_bounds(front) && !s.walls.contains(&front) && s.object_at(front).is_none();
                    if free {
                        let o = s.object_mut(id).expect("carried object exists");
                        o.carried = false;
                        o.pos = front;
                        s.carrying = None;
                    }
                }
            }
            Action::Toggle => {
                let key_color = s.carrying.and_then(|id| s.object(id)).filter(|o| o.kind == Kind::Key).map(|o| o.color);
                if let Some(id) = s.object_at(front).filter(|o| o.is_door()).map(|o| o.id) {
                    let door = s.object_mut(id).expect("door exists");
                    match door.door_state {
                        Some(DoorState::Closed) => door.door_state = Some(DoorState::Open),
                        Some(DoorState::Locked) if key_color == Some(door.color) => door.door_state = Some(DoorState::Open),
                        _ => {}
                    }
                }
            }
        }
        Ok(s)
    }

    /// Replays an action list from this state.
    pub fn replay(&self, actions: &[Action]) -> Result<Vec<EnvState>, EnvError> {
        let mut states = vec![self.clone()];
        for &a in actions {
            let next = states.last().expect("non-empty").step(a)?;
            states.push(next);
        }
        Ok(states)
    }
}

struct Layout {
    walls: BTreeSet<Cell>,
    /// Floor cells where the agent and free objects may be placed.
    room: Vec<Cell>,
    /// Wall cells that may host a door.
    door_slots: Vec<Cell>,
}

fn layout(cfg: &TaskConfig) -> Layout {
    let (w, h) = (cfg.width, cfg.height);
    let mut walls = BTreeSet::new();
    for x in 0..w {
        walls.insert((x, 0));
        walls.insert((x, h - 1));
    }
    for y in 0..h {
        walls.insert((0, y));
        walls.insert((w - 1, y));
    }
    let split = cfg.task.uses_doors();
    let divider = w / 2;
    if split {
        for y in 0..h {
            walls.insert((divider, y));
        }
    }
    let max_x = if split { divider - 1 } else { w - 2 };
    let room: Vec<Cell> = (1..h - 1).flat_map(|y| (1..=max_x).map(move |x| (x, y))).collect();
    let room_set: BTreeSet<Cell> = room.iter().copied().collect();
    let door_slots = walls
        .iter()
        .copied()
        .filter(|&c| Dir::ALL.iter().filter(|&&d| room_set.contains(&offset(c, d))).count() == 1)
        .collect();
    Layout { walls, room, door_slots }
}

fn distractor(rng: &mut ChaCha8Rng, palette: &[Color], kinds: &[Kind], exclude: &[(Kind, Color)]) -> (Kind, Color) {
    loop {
        let k = *kinds.choose(rng).expect("non-empty kinds");
        let c = *palette.choose(rng).expect("non-empty palette");
        if !exclude.contains(&(k, c)) {
            return (k, c);
        }
    }
}

const MAX_ATTEMPTS: usize = 1000;

/// Samples an initial state for the configured task. Deterministic in `cfg`.
pub fn reset(cfg: &TaskConfig) -> Result<EnvState, EnvError> {
    if cfg.n_objects == 0 {
        return Err(EnvError::Config("n_objects must be at least 1".into()));
    }
    if cfg.width < 5 || cfg.height < 4 {
        return Err(EnvError::Config(format!("grid {}x{} too small", cfg.width, cfg.height)));
    }
    let lay = layout(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let palette: &[Color] = if cfg.unseen_colors { &Color::WIDE } else { &Color::SEEN };
    let placement = || EnvError::Placement { task: cfg.task, requested: cfg.n_objects, width: cfg.width, height: cfg.height };

    // (role, kind, color, door state) for targets, then distractors.
    let mut specs: Vec<(Option<&str>, Kind, Color, Option<DoorState>)> = Vec::new();
    let (n_floor, n_door) = match cfg.task {
        Task::GotoSingle | Task::Goto => {
            specs.push((Some("box"), Kind::Box, Color::Red, None));
            for _ in 1..cfg.n_objects {
                let (k, c) = distractor(&mut rng, palette, &[Kind::Key, Kind::Ball, Kind::Box], &[(Kind::Box, Color::Red)]);
                specs.push((None, k, c, None));
            }
            (cfg.n_objects, 0)
        }
        Task::Pickup => {
            specs.push((Some("key"), Kind::Key, Color::Red, None));
            for _ in 1..cfg.n_objects {
                let (k, c) = distractor(&mut rng, palette, &[Kind::Key, Kind::Ball, Kind::Box], &[(Kind::Key, Color::Red)]);
                specs.push((None, k, c, None));
            }
            (cfg.n_objects, 0)
        }
        Task::Put => {
            if cfg.n_objects < 2 {
                return Err(EnvError::Config("put needs at least 2 objects".into()));
            }
            specs.push((Some("ball"), Kind::Ball, Color::Red, None));
            specs.push((Some("box"), Kind::Box, Color::Red, None));
            for _ in 2..cfg.n_objects {
                let excl = [(Kind::Ball, Color::Red), (Kind::Box, Color::Red)];
                let (k, c) = distractor(&mut rng, palette, &[Kind::Key, Kind::Ball, Kind::Box], &excl);
                specs.push((None, k, c, None));
            }
            (cfg.n_objects, 0)
        }
        Task::Open => {
            if cfg.n_doors == 0 {
                return Err(EnvError::Config("open needs at least one door".into()));
            }
            specs.push((Some("door"), Kind::Door, Color::Red, Some(DoorState::Closed)));
            for _ in 1..cfg.n_doors {
                let c = *palette.choose(&mut rng).expect("palette");
                specs.push((None, Kind::Door, c, Some(DoorState::Closed)));
            }
            (0, cfg.n_doors)
        }
        Task::Unlock => {
            if cfg.n_doors == 0 {
                return Err(EnvError::Config("unlock needs at least one door".into()));
            }
            specs.push((Some("door"), Kind::Door, Color::Red, Some(DoorState::Locked)));
            specs.push((Some("key"), Kind::Key, Color::Red, None));
            for _ in 1..cfg.n_doors {
                let c = *palette.choose(&mut rng).expect("palette");
                specs.push((None, Kind::Door, c, Some(DoorState::Closed)));
            }
            (1, cfg.n_doors)
        }
    };
    if n_floor + 1 > lay.room.len() || n_door > lay.door_slots.len() {
        return Err(placement());
    }

    let machine = cfg.task.machine();
    for _ in 0..MAX_ATTEMPTS {
        let mut ids: Vec<u32> = (0..specs.len() as u32).collect();
        ids.shuffle(&mut rng);
        let mut floor: Vec<Cell> = lay.room.clone();
        floor.shuffle(&mut rng);
        let mut slots = lay.door_slots.clone();
        slots.shuffle(&mut rng);
        let agent_pos = floor.pop().expect("room has cells");
        let agent_dir = Dir::ALL[rng.gen_range(0..4)];

        let mut objects = Vec::with_capacity(specs.len());
        let mut binding = RoleBinding::default();
        for (i, &(role, kind, color, door_state)) in specs.iter().enumerate() {
            let pos = if kind == Kind::Door { slots.pop() } else { floor.pop() }.ok_or_else(placement)?;
            objects.push(GridObject { id: ids[i], kind, color, pos, door_state, carried: false });
            if let Some(r) = role {
                binding = binding.bind(r, ids[i], kind.name());
            }
        }
        objects.sort_by_key(|o| o.id);
        let b = |r: &str| ObjectRef::Id(binding.get(r).expect("role bound"));
        let goal = match cfg.task {
            Task::GotoSingle | Task::Goto => vec![GroundAtom::new("facing", vec![b("box")])],
            Task::Pickup => vec![GroundAtom::new("holding", vec![b("key")])],
            Task::Open | Task::Unlock => vec![GroundAtom::new("is-open", vec![b("door")])],
            Task::Put => vec![GroundAtom::new("next-to", vec![b("ball"), b("box")])],
        };
        let state = EnvState {
            task: cfg.task,
            width: cfg.width,
            height: cfg.height,
            walls: lay.walls.clone(),
            objects,
            agent_pos,
            agent_dir,
            carrying: None,
            step_count: 0,
            horizon: cfg.horizon,
            goal,
            binding,
        };
        // Start in the initial node: no tracked atom may hold yet.
        let bound = kb::bind_roles(&machine, &state.binding).expect("roles bound by construction");
        let tracked = bound.tracked_atoms();
        if state.true_atoms(&tracked).is_empty() && !state.goal_satisfied() && solvable(&state) {
            return Ok(state);
        }
    }
    Err(placement())
}

/// Cheap reachability screen: every floor target has a reachable free neighbour.
fn solvable(s: &EnvState) -> bool {
    let reach = reachable_cells(s, s.agent_pos);
    let ok = |id: u32| {
        s.object(id).is_some_and(|o| Dir::ALL.iter().any(|&d| reach.contains(&offset(o.pos, d))))
    };
    let roles_ok = s.binding.objects.values().all(|&id| ok(id));
    if s.task == Task::Put {
        // The box needs a free floor cell beside it that is reachable for the drop.
        let bx = s.target("box").expect("put binds box");
        let drop_ok = Dir::ALL.iter().any(|&d| {
            let c = offset(bx.pos, d);
            !s.blocked(c) && Dir::ALL.iter().any(|&e| reach.contains(&offset(c, e)))
        });
        return roles_ok && drop_ok;
    }
    roles_ok
}

pub fn reachable_cells(s: &EnvState, from: Cell) -> BTreeSet<Cell> {
    let mut seen = BTreeSet::from([from]);
    let mut stack = vec![from];
    while let Some(c) = stack.pop() {
        for d in Dir::ALL {
            let n = offset(c, d);
            if !s.blocked(n) && seen.insert(n) {
                stack.push(n);
            }
        }
    }
    seen
}

/// Every predicate the gridworld can ground.
pub fn full_vocabulary() -> Vec<Symbol> {
    let mut v = vec![
        Symbol::new("facing", 1),
        Symbol::new("holding", 1),
        Symbol::new("is-open", 1),
        Symbol::new("is-locked", 1),
        Symbol::new("next-to", 2),
    ];
    v.extend(Color::ALL.iter().map(|c| Symbol::new(format!("is-{}", c.name()), 1)));
    v.extend(Kind::ALL.iter().map(|k| Symbol::new(format!("is-{}", k.name()), 1)));
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain_state() -> EnvState {
        let mut s = reset(&TaskConfig::new(Task::Pickup, Split::Basic, 0)).unwrap();
        s.objects.clear();
        s.agent_pos = (1, 1);
        s.agent_dir = Dir::E;
        s
    }

    fn obj(id: u32, kind: Kind, color: Color, pos: Cell) -> GridObject {
        GridObject {
            id,
            kind,
            color,
            pos,
            door_state: (kind == Kind::Door).then_some(DoorState::Closed),
            carried: false,
        }
    }

    #[test]
    fn pickup_reset_contract() {
        let s = reset(&TaskConfig::new(Task::Pickup, Split::Basic, 0)).unwrap();
        let key = s.target("key").unwrap();
        assert_eq!((key.kind, key.color), (Kind::Key, Color::Red));
        assert_eq!(s.goal, vec![GroundAtom::ids("holding", &[key.id])]);
        assert_eq!(s.objects.len(), 4);
    }

    #[test]
    fn unlock_reset_contract() {
        let s = reset(&TaskConfig::new(Task::Unlock, Split::Basic, 7)).unwrap();
        let door = s.target("door").unwrap();
        let key = s.target("key").unwrap();
        assert_eq!((door.kind, door.color, door.door_state), (Kind::Door, Color::Red, Some(DoorState::Locked)));
        assert_eq!((key.kind, key.color), (Kind::Key, Color::Red));
        assert!(s.walls.contains(&door.pos));
        let reach = reachable_cells(&s, s.agent_pos);
        assert!(Dir::ALL.iter().any(|&d| reach.contains(&offset(key.pos, d))));
    }

    #[test]
    fn reset_is_deterministic() {
        for task in Task::ALL {
            let cfg = TaskConfig::new(task, Split::Generalization, 42);
            assert_eq!(reset(&cfg).unwrap(), reset(&cfg).unwrap());
        }
    }

    #[test]
    fn reset_rejects_bad_config() {
        let mut cfg = TaskConfig::new(Task::Goto, Split::Basic, 0);
        cfg.n_objects = 0;
        assert!(matches!(reset(&cfg), Err(EnvError::Config(_))));
        let mut cfg = TaskConfig::new(Task::Goto, Split::Basic, 0);
        cfg.n_objects = 100;
        assert!(matches!(reset(&cfg), Err(EnvError::Placement { .. })));
    }

    #[test]
    fn initial_states_never_satisfy_goal() {
        for task in Task::ALL {
            for seed in 0..100 {
                for split in [Split::Basic, Split::Generalization] {
                    let s = reset(&TaskConfig::new(task, split, seed)).unwrap();
                    assert!(!s.goal_satisfied(), "{task} seed {seed}");
                }
            }
        }
    }

    #[test]
    fn toggle_locked_door_with_matching_key() {
        let mut s = plain_state();
        s.objects = vec![
            GridObject { door_state: Some(DoorState::Locked), ..obj(0, Kind::Door, Color::Red, (2, 1)) },
            GridObject { carried: true, ..obj(1, Kind::Key, Color::Red, (1, 1)) },
        ];
        s.carrying = Some(1);
        let t = s.step(Action::Toggle).unwrap();
        assert_eq!(t.object(0).unwrap().door_state, Some(DoorState::Open));
        let truth = t.oracle_atoms(&[Symbol::new("is-open", 1), Symbol::new("is-locked", 1)]).unwrap();
        assert!(truth[&GroundAtom::ids("is-open", &[0])]);
        assert!(!truth[&GroundAtom::ids("is-locked", &[0])]);

        // Wrong color key leaves the door locked.
        s.objects[1].color = Color::Blue;
        let t = s.step(Action::Toggle).unwrap();
        assert_eq!(t.object(0).unwrap().door_state, Some(DoorState::Locked));
    }

    #[test]
    fn forward_into_wall_is_blocked() {
        let mut s = plain_state();
        s.agent_dir = Dir::N;
        let t = s.step(Action::Forward).unwrap();
        assert_eq!((t.agent_pos, t.agent_dir), (s.agent_pos, s.agent_dir));
        assert_eq!(t.step_count, s.step_count + 1);
    }

    #[test]
    fn pickup_while_carrying_is_noop() {
        let mut s = plain_state();
        s.objects = vec![obj(0, Kind::Ball, Color::Green, (2, 1)), GridObject { carried: true, ..obj(1, Kind::Key, Color::Red, (1, 1)) }];
        s.carrying = Some(1);
        let t = s.step(Action::Pickup).unwrap();
        let mut expected = s.clone();
        expected.step_count += 1;
        assert_eq!(t, expected);
    }

    #[test]
    fn carried_object_follows_agent_and_drop() {
        let mut s = plain_state();
        s.objects = vec![obj(0, Kind::Ball, Color::Green, (2, 1))];
        let s = s.step(Action::Pickup).unwrap();
        assert_eq!(s.carrying, Some(0));
        let s = s.step(Action::Forward).unwrap();
        assert_eq!(s.agent_pos, (2, 1));
        assert_eq!(s.object(0).unwrap().pos, (2, 1));
        let s = s.step(Action::Drop).unwrap();
        assert_eq!(s.carrying, None);
        assert_eq!(s.object(0).unwrap().pos, (3, 1));
    }

    #[test]
    fn horizon_enforced() {
        let mut s = plain_state();
        s.horizon = 1;
        let s = s.step(Action::TurnLeft).unwrap();
        assert!(matches!(s.step(Action::TurnLeft), Err(EnvError::HorizonExceeded { .. })));
    }

    #[test]
    fn oracle_geometry() {
        let mut s = plain_state();
        s.objects = vec![obj(0, Kind::Key, Color::Red, (2, 1)), obj(1, Kind::Ball, Color::Blue, (2, 2)), obj(2, Kind::Box, Color::Grey, (2, 3))];
        let t = s.oracle_atoms(&full_vocabulary()).unwrap();
        assert!(t[&GroundAtom::ids("facing", &[0])]);
        assert!(!t[&GroundAtom::ids("holding", &[0])]);
        assert!(t[&GroundAtom::ids("next-to", &[1, 2])]);
        assert!(!t[&GroundAtom::ids("next-to", &[0, 2])]);
        assert!(t[&GroundAtom::ids("is-red", &[0])]);
        assert!(t[&GroundAtom::ids("is-box", &[2])]);
        assert!(s.oracle_atoms(&[Symbol::new("flying", 1)]).is_err());
    }

    #[test]
    fn goal_checks() {
        let mut s = plain_state();
        s.objects = vec![obj(0, Kind::Key, Color::Red, (2, 1))];
        s.goal = vec![GroundAtom::ids("holding", &[0])];
        assert!(!s.goal_satisfied());
        assert!(s.step(Action::Pickup).unwrap().goal_satisfied());

        let mut s = plain_state();
        s.objects = vec![obj(0, Kind::Ball, Color::Red, (3, 3)), obj(1, Kind::Box, Color::Red, (3, 4))];
        s.goal = vec![GroundAtom::ids("next-to", &[0, 1])];
        assert!(s.goal_satisfied());
    }

    #[test]
    fn episodes_replay_identically() {
        let s = reset(&TaskConfig::new(Task::Put, Split::Basic, 3)).unwrap();
        let actions = [Action::Forward, Action::TurnLeft, Action::Forward, Action::Pickup, Action::TurnRight, Action::Drop];
        let a = s.replay(&actions).unwrap();
        let b = s.replay(&actions).unwrap();
        assert_eq!(a, b);
        for st in &a {
            assert_eq!(st.objects.len(), s.objects.len());
            if let Some(id) = st.carrying {
                assert_eq!(st.object(id).unwrap().pos, st.agent_pos);
            }
        }
    }
}
