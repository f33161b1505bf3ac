//! GeoGrid: a deterministic gridworld of coloured shapes.
//!
//! The agent moves one cell per step; moves off the grid leave it in
//! place. Propositions `red green blue triangle circle` describe the object
//! (if any) under the agent. Observations are `height x width x 6` binary
//! tensors with channels `(red, green, blue, triangle, circle, agent)`.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logic::{Atom, TruthAssignment, Vocab};

pub const CHANNELS: usize = 6;
pub const AGENT_CHANNEL: usize = 5;
pub const ATOM_NAMES: [&str; 5] = ["red", "green", "blue", "triangle", "circle"];
pub const DATASET_FORMAT: &str = "rmgcr-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("infeasible configuration: {0}")]
    InfeasibleConfig(String),
    #[error("layout is randomized; the state space cannot be enumerated")]
    NotEnumerable,
    #[error("malformed observation: {0}")]
    MalformedObservation(String),
    #[error("dataset line {line}: {message}")]
    Dataset { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn channel(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ATOM_NAMES[self.channel()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Triangle,
    Circle,
}

impl Shape {
    pub const ALL: [Shape; 2] = [Shape::Triangle, Shape::Circle];

    pub fn channel(self) -> usize {
        3 + self as usize
    }

    pub fn name(self) -> &'static str {
        ATOM_NAMES[self.channel()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub fn new(row: usize, col: usize) -> Self {
        Cell { row, col }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub color: Color,
    pub shape: Shape,
    /// Pinned cell; unpinned objects are placed at random.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell: Option<Cell>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Object {
    pub color: Color,
    pub shape: Shape,
    pub cell: Cell,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayoutMode {
    /// Objects are placed once (from the config seed) and reused every episode.
    Fixed,
    /// Unpinned objects are re-placed at every reset.
    Randomized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub width: usize,
    pub height: usize,
    pub objects: Vec<ObjectSpec>,
    pub layout: LayoutMode,
    pub episode_len: usize,
    pub seed: u64,
    /// Pinned agent start; otherwise uniform over cells.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_start: Option<Cell>,
    /// Keep the agent off object cells at reset.
    #[serde(default)]
    pub exclude_agent_from_objects: bool,
}

fn one_of_each() -> Vec<ObjectSpec> {
    Color::ALL
        .iter()
        .flat_map(|&color| Shape::ALL.iter().map(move |&shape| ObjectSpec { color, shape, cell: None }))
        .collect()
}

impl GridConfig {
    /// 6x6 fixed layout used for exact oracles and the desk experiments.
    pub fn desk() -> Self {
        let pin = |color, shape, row, col| ObjectSpec {
            color,
            shape,
            cell: Some(Cell::new(row, col)),
        };
        GridConfig {
            width: 6,
            height: 6,
            objects: vec![
                pin(Color::Red, Shape::Triangle, 0, 0),
                pin(Color::Red, Shape::Circle, 5, 0),
                pin(Color::Green, Shape::Triangle, 5, 5),
                pin(Color::Green, Shape::Circle, 3, 2),
                pin(Color::Blue, Shape::Triangle, 0, 5),
                pin(Color::Blue, Shape::Circle, 2, 3),
            ],
            layout: LayoutMode::Fixed,
            episode_len: 60,
            seed: 0,
            agent_start: None,
            exclude_agent_from_objects: false,
        }
    }

    /// 8x8 randomized layout with one object per colour/shape pair.
    pub fn large() -> Self {
        GridConfig {
            width: 8,
            height: 8,
            objects: one_of_each(),
            layout: LayoutMode::Randomized,
            episode_len: 100,
            seed: 0,
            agent_start: None,
            exclude_agent_from_objects: false,
        }
    }

    /// 6x6 randomized layout.
    pub fn desk_randomized() -> Self {
        GridConfig {
            objects: one_of_each(),
            layout: LayoutMode::Randomized,
            ..GridConfig::desk()
        }
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GridState {
    pub height: usize,
    pub width: usize,
    pub agent: Cell,
    pub objects: Vec<Object>,
    pub step_count: usize,
}

impl GridState {
    pub fn object_at(&self, cell: Cell) -> Option<&Object> {
        self.objects.iter().find(|o| o.cell == cell)
    }
}

/// Move the agent one cell; off-grid moves are no-ops.
pub fn step(s: &GridState, a: Action) -> GridState {
    let Cell { row, col } = s.agent;
    let agent = match a {
        Action::Up => Cell::new(row.saturating_sub(1), col),
        Action::Down => Cell::new((row + 1).min(s.height - 1), col),
        Action::Left => Cell::new(row, col.saturating_sub(1)),
        Action::Right => Cell::new(row, (col + 1).min(s.width - 1)),
    };
    GridState {
        agent,
        step_count: s.step_count + 1,
        ..s.clone()
    }
}

/// Ground-truth labelling: the colour and shape of the object under the agent.
pub fn true_label(s: &GridState) -> TruthAssignment {
    match s.object_at(s.agent) {
        Some(o) => [o.color.name(), o.shape.name()]
            .into_iter()
            .map(|n| Atom::new(n).expect("static atom name"))
            .collect(),
        None => TruthAssignment::new(),
    }
}

pub fn geo_vocab() -> Vocab {
    Vocab::from_names(&ATOM_NAMES).expect("static vocabulary")
}

/// Exact observation identity: the channel bits packed into words.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObsKey(Box<[u64]>);

impl ObsKey {
    pub fn to_hex(&self) -> String {
        self.0.iter().map(|w| format!("{w:016x}")).collect()
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if !s.len().is_multiple_of(16) || !s.is_ascii() {
            return None;
        }
        (0..s.len() / 16)
            .map(|i| u64::from_str_radix(&s[i * 16..(i + 1) * 16], 16).ok())
            .collect::<Option<Vec<_>>>()
            .map(|v| ObsKey(v.into_boxed_slice()))
    }
}

impl Serialize for ObsKey {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ObsKey {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        ObsKey::from_hex(&s).ok_or_else(|| serde::de::Error::custom("invalid observation key"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Observation {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Observation {
    pub fn encode(s: &GridState) -> Self {
        let mut obs = Observation::zeros(s.height, s.width);
        for o in &s.objects {
            obs.set(o.cell, o.color.channel());
            obs.set(o.cell, o.shape.channel());
        }
        obs.set(s.agent, AGENT_CHANNEL);
        obs
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Observation {
            height,
            width,
            data: vec![0; height * width * CHANNELS],
        }
    }

    pub fn from_dense(height: usize, width: usize, data: Vec<u8>) -> Result<Self, GridError> {
        if data.len() != height * width * CHANNELS {
            return Err(GridError::MalformedObservation(format!(
                "expected {} entries, found {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        if data.iter().any(|&b| b > 1) {
            return Err(GridError::MalformedObservation("entries must be 0 or 1".into()));
        }
        Ok(Observation { height, width, data })
    }

    fn set(&mut self, cell: Cell, ch: usize) {
        let i = self.index(cell, ch);
        self.data[i] = 1;
    }

    fn index(&self, cell: Cell, ch: usize) -> usize {
        (cell.row * self.width + cell.col) * CHANNELS + ch
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, cell: Cell, ch: usize) -> bool {
        self.data[self.index(cell, ch)] == 1
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.height).flat_map(move |r| (0..self.width).map(move |c| Cell::new(r, c)))
    }

    /// First cell with the agent channel set.
    pub fn agent(&self) -> Option<Cell> {
        self.cells().find(|&c| self.get(c, AGENT_CHANNEL))
    }

    pub fn key(&self) -> ObsKey {
        let mut words = vec![0u64; self.data.len().div_ceil(64)];
        for (i, &b) in self.data.iter().enumerate() {
            if b == 1 {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        ObsKey(words.into_boxed_slice())
    }

    /// Recover the state (with `step_count` 0) from a well-formed observation.
    pub fn decode(&self) -> Result<GridState, GridError> {
        let bad = |m: String| GridError::MalformedObservation(m);
        let agents: Vec<Cell> = self.cells().filter(|&c| self.get(c, AGENT_CHANNEL)).collect();
        if agents.len() != 1 {
            return Err(bad(format!("expected one agent, found {}", agents.len())));
        }
        let mut objects = Vec::new();
        for cell in self.cells() {
            let colors: Vec<Color> = Color::ALL.into_iter().filter(|c| self.get(cell, c.channel())).collect();
            let shapes: Vec<Shape> = Shape::ALL.into_iter().filter(|s| self.get(cell, s.channel())).collect();
            match (colors.as_slice(), shapes.as_slice()) {
                ([], []) => {}
                ([color], [shape]) => objects.push(Object {
                    color: *color,
                    shape: *shape,
                    cell,
                }),
                _ => return Err(bad(format!("cell {cell} has an inconsistent object encoding"))),
            }
        }
        Ok(GridState {
            height: self.height,
            width: self.width,
            agent: agents[0],
            objects,
            step_count: 0,
        })
    }
}

/// An environment instance bound to a validated configuration.
#[derive(Clone, Debug)]
pub struct GeoGrid {
    cfg: GridConfig,
    fixed_objects: Option<Vec<Object>>,
}

fn in_bounds(cfg: &GridConfig, c: Cell) -> bool {
    c.row < cfg.height && c.col < cfg.width
}

impl GeoGrid {
    pub fn new(cfg: GridConfig) -> Result<Self, GridError> {
        let infeasible = |m: String| Err(GridError::InfeasibleConfig(m));
        if cfg.width == 0 || cfg.height == 0 {
            return infeasible("grid must have at least one cell".into());
        }
        if cfg.objects.len() > cfg.num_cells() {
            return infeasible(format!(
                "{} objects do not fit in {} cells",
                cfg.objects.len(),
                cfg.num_cells()
            ));
        }
        let mut pinned = BTreeSet::new();
        for o in &cfg.objects {
            if let Some(c) = o.cell {
                if !in_bounds(&cfg, c) {
                    return infeasible(format!("object cell {c} is out of bounds"));
                }
                if !pinned.insert(c) {
                    return infeasible(format!("two objects pinned to {c}"));
                }
            }
        }
        if let Some(a) = cfg.agent_start {
            if !in_bounds(&cfg, a) {
                return infeasible(format!("agent start {a} is out of bounds"));
            }
            if cfg.exclude_agent_from_objects && pinned.contains(&a) {
                return infeasible(format!("agent start {a} is an object cell"));
            }
        }
        if cfg.exclude_agent_from_objects && cfg.objects.len() == cfg.num_cells() {
            return infeasible("no free cell for the agent".into());
        }
        let mut env = GeoGrid { cfg, fixed_objects: None };
        if env.cfg.layout == LayoutMode::Fixed {
            let mut rng = ChaCha8Rng::seed_from_u64(env.cfg.seed);
            env.fixed_objects = Some(env.place_objects(&mut rng));
        }
        Ok(env)
    }

    pub fn config(&self) -> &GridConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> Vocab {
        geo_vocab()
    }

    fn all_cells(&self) -> Vec<Cell> {
        (0..self.cfg.height)
            .flat_map(|r| (0..self.cfg.width).map(move |c| Cell::new(r, c)))
            .collect()
    }

    fn place_objects(&self, rng: &mut impl Rng) -> Vec<Object> {
        let pinned: BTreeSet<Cell> = self.cfg.objects.iter().filter_map(|o| o.cell).collect();
        let mut free: Vec<Cell> = self.all_cells().into_iter().filter(|c| !pinned.contains(c)).collect();
        free.shuffle(rng);
        let mut free = free.into_iter();
        self.cfg
            .objects
            .iter()
            .map(|o| Object {
                color: o.color,
                shape: o.shape,
                cell: o.cell.unwrap_or_else(|| free.next().expect("feasibility checked in new")),
            })
            .collect()
    }

    pub fn reset_with(&self, rng: &mut impl Rng) -> GridState {
        let objects = match &self.fixed_objects {
            Some(objs) => objs.clone(),
            None => self.place_objects(rng),
        };
        let agent = match self.cfg.agent_start {
            Some(a) => a,
            None => {
                let candidates: Vec<Cell> = self
                    .all_cells()
                    .into_iter()
                    .filter(|c| !self.cfg.exclude_agent_from_objects || objects.iter().all(|o| o.cell != *c))
                    .collect();
                candidates[rng.gen_range(0..candidates.len())]
            }
        };
        GridState {
            height: self.cfg.height,
            width: self.cfg.width,
            agent,
            objects,
            step_count: 0,
        }
    }

    /// Deterministic reset from a seed.
    pub fn reset(&self, seed: u64) -> GridState {
        self.reset_with(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn step(&self, s: &GridState, a: Action) -> GridState {
        step(s, a)
    }

    pub fn observe(&self, s: &GridState) -> Observation {
        Observation::encode(s)
    }

    pub fn true_label(&self, s: &GridState) -> TruthAssignment {
        true_label(s)
    }

    /// Every state of a fixed layout (one per agent cell, row-major).
    pub fn enumerate_states(&self) -> Result<Vec<GridState>, GridError> {
        let objects = self.fixed_objects.clone().ok_or(GridError::NotEnumerable)?;
        Ok(self
            .all_cells()
            .into_iter()
            .map(|agent| GridState {
                height: self.cfg.height,
                width: self.cfg.width,
                agent,
                objects: objects.clone(),
                step_count: 0,
            })
            .collect())
    }

    /// Number of (agent, layout) states, saturating.
    pub fn state_space_size(&self) -> u128 {
        let cells = self.cfg.num_cells() as u128;
        if self.fixed_objects.is_some() {
            return cells;
        }
        let pinned = self.cfg.objects.iter().filter(|o| o.cell.is_some()).count() as u128;
        let movable = self.cfg.objects.len() as u128 - pinned;
        let mut free = cells - pinned;
        let mut layouts: u128 = 1;
        for _ in 0..movable {
            layouts = layouts.saturating_mul(free);
            free -= 1;
        }
        layouts.saturating_mul(cells)
    }
}

/// Convenience wrapper around [`GeoGrid::reset`].
pub fn reset(cfg: &GridConfig, seed: u64) -> Result<GridState, GridError> {
    Ok(GeoGrid::new(cfg.clone())?.reset(seed))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetPolicy {
    UniformRandom,
    Constant(Action),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub observations: Vec<Observation>,
    pub actions: Vec<Action>,
    pub labels: Vec<TruthAssignment>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format: String,
    pub version: u32,
    pub vocab: Vocab,
    pub seed: u64,
    pub policy: DatasetPolicy,
    pub config: GridConfig,
    pub n_trajectories: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundingDataset {
    pub meta: DatasetMeta,
    pub trajectories: Vec<Trajectory>,
}

impl GroundingDataset {
    pub fn vocab(&self) -> &Vocab {
        &self.meta.vocab
    }

    pub fn num_transitions(&self) -> usize {
        self.trajectories.iter().map(|t| t.actions.len()).sum()
    }

    /// Per-atom count of steps where the atom holds, and the total step count.
    pub fn label_frequencies(&self) -> (Vec<(Atom, usize)>, usize) {
        let total = self.trajectories.iter().map(|t| t.labels.len()).sum();
        let counts = self
            .vocab()
            .atoms()
            .iter()
            .map(|a| {
                let n = self
                    .trajectories
                    .iter()
                    .flat_map(|t| &t.labels)
                    .filter(|w| w.contains(a))
                    .count();
                (a.clone(), n)
            })
            .collect();
        (counts, total)
    }
}

/// Per-trajectory generator: stream `index` of the ChaCha generator keyed by `seed`.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn generate_dataset(
    cfg: &GridConfig,
    n_trajectories: usize,
    policy: DatasetPolicy,
    seed: u64,
) -> Result<GroundingDataset, GridError> {
    let env = GeoGrid::new(cfg.clone())?;
    let trajectories = (0..n_trajectories)
        .map(|i| {
            let mut rng = trajectory_rng(seed, i as u64);
            let mut s = env.reset_with(&mut rng);
            let mut t = Trajectory {
                observations: vec![env.observe(&s)],
                actions: Vec::with_capacity(cfg.episode_len),
                labels: vec![true_label(&s)],
            };
            for _ in 0..cfg.episode_len {
                let a = match policy {
                    DatasetPolicy::UniformRandom => Action::ALL[rng.gen_range(0..4)],
                    DatasetPolicy::Constant(a) => a,
                };
                s = step(&s, a);
                t.actions.push(a);
                t.observations.push(env.observe(&s));
                t.labels.push(true_label(&s));
            }
            t
        })
        .collect();
    Ok(GroundingDataset {
        meta: DatasetMeta {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            vocab: geo_vocab(),
            seed,
            policy,
            config: cfg.clone(),
            n_trajectories,
        },
        trajectories,
    })
}

#[derive(Serialize, Deserialize)]
struct Record {
    obs: Vec<Vec<u8>>,
    actions: Vec<u8>,
    labels: Vec<Vec<String>>,
}

/// Line-delimited JSON: a header object followed by one record per trajectory.
pub fn write_dataset(ds: &GroundingDataset, mut out: impl Write) -> Result<(), GridError> {
    serde_json::to_writer(&mut out, &ds.meta).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for t in &ds.trajectories {
        let rec = Record {
            obs: t.observations.iter().map(|o| o.data.clone()).collect(),
            actions: t.actions.iter().map(|a| a.index() as u8).collect(),
            labels: t
                .labels
                .iter()
                .map(|w| w.iter().map(|a| a.as_str().to_string()).collect())
                .collect(),
        };
        serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset(input: impl BufRead) -> Result<GroundingDataset, GridError> {
    let mut lines = input.lines();
    let err = |line: usize, message: String| GridError::Dataset { line, message };
    let header = lines.next().ok_or_else(|| err(1, "empty dataset file".into()))??;
    let meta: DatasetMeta = serde_json::from_str(&header).map_err(|e| err(1, e.to_string()))?;
    if meta.format != DATASET_FORMAT || meta.version != DATASET_VERSION {
        return Err(err(1, format!("unsupported format {} v{}", meta.format, meta.version)));
    }
    let (h, w) = (meta.config.height, meta.config.width);
    let mut trajectories = Vec::with_capacity(meta.n_trajectories);
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| err(n, e.to_string()))?;
        if rec.obs.len() != rec.actions.len() + 1 || rec.labels.len() != rec.obs.len() {
            return Err(err(n, "observations, actions and labels are misaligned".into()));
        }
        let observations = rec
            .obs
            .into_iter()
            .map(|d| Observation::from_dense(h, w, d))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| err(n, e.to_string()))?;
        let actions = rec
            .actions
            .iter()
            .map(|&a| Action::from_index(a as usize).ok_or_else(|| err(n, format!("invalid action {a}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let labels = rec
            .labels
            .iter()
            .map(|names| TruthAssignment::from_names(&meta.vocab, names).map_err(|e| err(n, e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        trajectories.push(Trajectory {
            observations,
            actions,
            labels,
        });
    }
    if trajectories.len() != meta.n_trajectories {
        return Err(err(
            0,
            format!("header declares {} trajectories, found {}", meta.n_trajectories, trajectories.len()),
        ));
    }
    Ok(GroundingDataset { meta, trajectories })
}
