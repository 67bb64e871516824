//! Procedural hexagonal environments.
//!
//! Locations live on a hexagon of cells addressed by axial coordinates
//! `(q, r)`. The six movement directions are fixed in this order:
//!
//! | action | name | `(dq, dr)` |
//! |--------|------|------------|
//! | 0      | E    | `(+1,  0)` |
//! | 1      | NE   | `(+1, -1)` |
//! | 2      | NW   | `( 0, -1)` |
//! | 3      | W    | `(-1,  0)` |
//! | 4      | SW   | `(-1, +1)` |
//! | 5      | SE   | `( 0, +1)` |
//!
//! so `opposite(a) = (a + 3) % 6`.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episodic::Transition;
use crate::error::{Error, Result};

pub const NUM_ACTIONS: usize = 6;

const STATE_SPLIT_SEED: u64 = 0x5eed_0005_9117;

const DIRECTIONS: [(i32, i32); NUM_ACTIONS] = [(1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)];

/// One of the six allocentric moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action(u8);

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] =
        [Action(0), Action(1), Action(2), Action(3), Action(4), Action(5)];

    pub fn new(index: usize) -> Result<Self> {
        if index < NUM_ACTIONS {
            Ok(Action(index as u8))
        } else {
            Err(Error::OutOfVocabulary { what: "action", value: index, limit: NUM_ACTIONS })
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn opposite(self) -> Action {
        Action((self.0 + 3) % NUM_ACTIONS as u8)
    }

    fn delta(self) -> (i32, i32) {
        DIRECTIONS[self.index()]
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const NAMES: [&str; NUM_ACTIONS] = ["E", "NE", "NW", "W", "SW", "SE"];
        f.write_str(NAMES[self.index()])
    }
}

/// Observation id assigned to a location by the environment's observation map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct State(pub u32);

impl State {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Bit `i` of the six-bit encoding, bit 0 least significant.
    pub fn bit(self, i: usize) -> u8 {
        ((self.0 >> i) & 1) as u8
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HexCoord {
    pub q: i32,
    pub r: i32,
}

impl HexCoord {
    pub const ORIGIN: HexCoord = HexCoord { q: 0, r: 0 };

    pub fn new(q: i32, r: i32) -> Self {
        HexCoord { q, r }
    }

    /// Distance from the origin in hex steps.
    pub fn ring(self) -> i32 {
        self.q.abs().max(self.r.abs()).max((self.q + self.r).abs())
    }

    pub fn distance(self, other: HexCoord) -> i32 {
        HexCoord::new(self.q - other.q, self.r - other.r).ring()
    }

    pub fn neighbor(self, action: Action) -> HexCoord {
        let (dq, dr) = action.delta();
        HexCoord::new(self.q + dq, self.r + dr)
    }

    /// The action leading from `self` to an adjacent `other`.
    pub fn direction_to(self, other: HexCoord) -> Option<Action> {
        Action::ALL.into_iter().find(|&a| self.neighbor(a) == other)
    }

    /// Cell center in the plane for pointy-top hexagons of unit size.
    pub fn to_pixel(self) -> (f64, f64) {
        let x = 3f64.sqrt() * (self.q as f64 + self.r as f64 / 2.0);
        let y = 1.5 * self.r as f64;
        (x, y)
    }

    pub fn euclidean(self, other: HexCoord) -> f64 {
        let (ax, ay) = self.to_pixel();
        let (bx, by) = other.to_pixel();
        (ax - bx).hypot(ay - by)
    }
}

impl fmt::Display for HexCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.q, self.r)
    }
}

/// Index of a location in [`HexGraph::locations`].
pub type LocId = usize;

/// Undirected adjacency edge, stored with `a < b`; `dir` leads from `a` to `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub a: LocId,
    pub b: LocId,
    pub dir: Action,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HexGraph {
    radius: u32,
    locations: Vec<HexCoord>,
    index: HashMap<HexCoord, LocId>,
    edges: Vec<Edge>,
    /// `neighbors[l][a]` is the location reached from `l` by `a`, if on the grid.
    neighbors: Vec<[Option<LocId>; NUM_ACTIONS]>,
}

pub fn build_hex_graph(radius: u32) -> HexGraph {
    let r = radius as i32;
    let mut locations = Vec::new();
    for q in -r..=r {
        for s in -r..=r {
            let c = HexCoord::new(q, s);
            if c.ring() <= r {
                locations.push(c);
            }
        }
    }
    let index: HashMap<HexCoord, LocId> =
        locations.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let neighbors: Vec<[Option<LocId>; NUM_ACTIONS]> = locations
        .iter()
        .map(|&c| Action::ALL.map(|a| index.get(&c.neighbor(a)).copied()))
        .collect();
    let mut edges = Vec::new();
    for (a, nbrs) in neighbors.iter().enumerate() {
        for action in Action::ALL {
            if let Some(b) = nbrs[action.index()] {
                if a < b {
                    edges.push(Edge { a, b, dir: action });
                }
            }
        }
    }
    HexGraph { radius, locations, index, edges, neighbors }
}

impl HexGraph {
    pub fn radius(&self) -> u32 {
        self.radius
    }

    pub fn locations(&self) -> &[HexCoord] {
        &self.locations
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn coord(&self, id: LocId) -> HexCoord {
        self.locations[id]
    }

    pub fn loc_id(&self, c: HexCoord) -> Option<LocId> {
        self.index.get(&c).copied()
    }

    pub fn neighbor(&self, id: LocId, action: Action) -> Option<LocId> {
        self.neighbors[id][action.index()]
    }

    pub fn edge_between(&self, x: LocId, y: LocId) -> Option<usize> {
        let (a, b) = if x < y { (x, y) } else { (y, x) };
        self.edges.iter().position(|e| e.a == a && e.b == b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    OpenArena,
    RandomWall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateEncoding {
    Integer,
    SixBit,
}

/// Which half of the state vocabulary an environment draws observations from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateSplit {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub family: Family,
    pub radius: u32,
    pub vocab_size: usize,
    pub state_encoding: StateEncoding,
    pub wall_len_min: usize,
    pub wall_len_max: usize,
    /// Upper bound on the unobserved blob, as a fraction of all locations.
    pub unobs_max_frac: f64,
    /// States reserved for evaluation; training environments never use them.
    pub heldout_states: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::random_wall(2)
    }
}

impl EnvConfig {
    pub fn open_arena() -> Self {
        EnvConfig {
            family: Family::OpenArena,
            radius: 2,
            vocab_size: 64,
            state_encoding: StateEncoding::SixBit,
            wall_len_min: 0,
            wall_len_max: 0,
            unobs_max_frac: 0.0,
            heldout_states: 20,
        }
    }

    /// Random Wall family; radius 2 uses 19 states, radius 3 uses 36.
    pub fn random_wall(radius: u32) -> Self {
        let cells = location_count(radius);
        EnvConfig {
            family: Family::RandomWall,
            radius,
            vocab_size: if radius >= 3 { cells - 1 } else { cells },
            state_encoding: StateEncoding::Integer,
            wall_len_min: 2,
            wall_len_max: radius as usize + 2,
            unobs_max_frac: 1.0 / 3.0,
            heldout_states: 0,
        }
    }

    fn pool(&self, split: StateSplit) -> Vec<State> {
        let mut all: Vec<State> = (0..self.vocab_size as u32).map(State).collect();
        if self.heldout_states == 0 {
            return all;
        }
        // Fixed permutation so the split never depends on the environment seed.
        all.shuffle(&mut ChaCha8Rng::seed_from_u64(STATE_SPLIT_SEED));
        let (test, train) = all.split_at(self.heldout_states);
        match split {
            StateSplit::Train => train.to_vec(),
            StateSplit::Test => test.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cells = location_count(self.radius);
        let required = match self.family {
            Family::OpenArena => cells,
            Family::RandomWall => {
                if cells < 3 {
                    return Err(Error::InvalidConfig(format!(
                        "random_wall needs radius >= 1, got {}",
                        self.radius
                    )));
                }
                if self.wall_len_min == 0 || self.wall_len_min > self.wall_len_max {
                    return Err(Error::InvalidConfig(format!(
                        "wall length bounds [{}, {}] are invalid",
                        self.wall_len_min, self.wall_len_max
                    )));
                }
                cells - 1
            }
        };
        if self.state_encoding == StateEncoding::SixBit && self.vocab_size > 64 {
            return Err(Error::InvalidConfig("six_bit encoding supports at most 64 states".into()));
        }
        if !(0.0..1.0).contains(&self.unobs_max_frac) {
            return Err(Error::InvalidConfig(format!(
                "unobs_max_frac must lie in [0, 1), got {}",
                self.unobs_max_frac
            )));
        }
        let train = self.vocab_size.saturating_sub(self.heldout_states);
        if train < required || (self.heldout_states > 0 && self.heldout_states < required) {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} (heldout {}) cannot give {} distinct states per environment",
                self.vocab_size, self.heldout_states, required
            )));
        }
        Ok(())
    }
}

const fn location_count(radius: u32) -> usize {
    let r = radius as usize;
    3 * r * r + 3 * r + 1
}


/// A generated room: the hex graph plus walls, observability filter,
/// observation map and per-edge orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    graph: HexGraph,
    family: Family,
    encoding: StateEncoding,
    vocab_size: usize,
    walls: Vec<bool>,
    observable: Vec<bool>,
    /// Observation of every location that has one. Wall cells may carry a
    /// dormant state so that removing the wall later keeps the map injective.
    obs_map: Vec<Option<State>>,
    state_to_loc: HashMap<State, LocId>,
    /// `true` when edge `i` is traversed from `a` to `b`.
    orientation: Vec<bool>,
}

pub fn generate_environment(config: &EnvConfig, seed: u64) -> Result<Environment> {
    generate_environment_split(config, StateSplit::Train, seed)
}

pub fn generate_environment_split(
    config: &EnvConfig,
    split: StateSplit,
    seed: u64,
) -> Result<Environment> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = build_hex_graph(config.radius);
    let n = graph.len();

    let mut walls = vec![false; n];
    let mut observable = vec![true; n];
    if config.family == Family::RandomWall {
        for l in sample_wall(&graph, config, &mut rng) {
            walls[l] = true;
            observable[l] = false;
        }
        let free: Vec<LocId> = (0..n).filter(|&l| !walls[l]).collect();
        let cap = ((n as f64) * config.unobs_max_frac).floor() as usize;
        let size = rng.random_range(0..=cap.min(free.len().saturating_sub(2)));
        for l in grow_blob(&graph, &walls, size, &mut rng) {
            observable[l] = false;
        }
    }

    let mut pool = config.pool(split);
    pool.shuffle(&mut rng);
    let mut pool = pool.into_iter();
    let mut obs_map = vec![None; n];
    for l in (0..n).filter(|&l| !walls[l]).chain((0..n).filter(|&l| walls[l])) {
        obs_map[l] = pool.next();
    }
    if obs_map.iter().zip(&walls).any(|(s, &w)| !w && s.is_none()) {
        return Err(Error::InvalidConfig("state pool exhausted before every free cell".into()));
    }
    let state_to_loc = obs_map
        .iter()
        .enumerate()
        .filter_map(|(l, s)| s.map(|s| (s, l)))
        .collect();
    let orientation = (0..graph.edges().len()).map(|_| rng.random_bool(0.5)).collect();

    Ok(Environment {
        graph,
        family: config.family,
        encoding: config.state_encoding,
        vocab_size: config.vocab_size,
        walls,
        observable,
        obs_map,
        state_to_loc,
        orientation,
    })
}

/// A wall grown from a random start cell along a heading that bends by
/// ±60° with probability 0.2 at each step.
fn sample_wall(graph: &HexGraph, config: &EnvConfig, rng: &mut ChaCha8Rng) -> Vec<LocId> {
    let n = graph.len();
    let max_len = config.wall_len_max.min(n - 2);
    let min_len = config.wall_len_min.min(max_len);
    let len = rng.random_range(min_len..=max_len);
    let mut cell = rng.random_range(0..n);
    let mut heading = rng.random_range(0..NUM_ACTIONS);
    let mut wall = vec![cell];
    while wall.len() < len {
        if !rng.random_bool(0.8) {
            heading = if rng.random_bool(0.5) { (heading + 1) % 6 } else { (heading + 5) % 6 };
        }
        match graph.neighbor(cell, Action(heading as u8)) {
            Some(next) if !wall.contains(&next) => {
                wall.push(next);
                cell = next;
            }
            _ => break,
        }
    }
    wall
}

fn grow_blob(graph: &HexGraph, walls: &[bool], size: usize, rng: &mut ChaCha8Rng) -> Vec<LocId> {
    if size == 0 {
        return Vec::new();
    }
    let free: Vec<LocId> = (0..graph.len()).filter(|&l| !walls[l]).collect();
    let seed = *free.choose(rng).expect("free cells exist");
    let mut blob = BTreeSet::from([seed]);
    while blob.len() < size {
        let frontier: BTreeSet<LocId> = blob
            .iter()
            .flat_map(|&l| Action::ALL.into_iter().filter_map(move |a| graph.neighbor(l, a)))
            .filter(|l| !walls[*l] && !blob.contains(l))
            .collect();
        let frontier: Vec<LocId> = frontier.into_iter().collect();
        match frontier.choose(rng) {
            Some(&l) => {
                blob.insert(l);
            }
            None => break,
        }
    }
    blob.into_iter().collect()
}

impl Environment {
    pub fn graph(&self) -> &HexGraph {
        &self.graph
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn encoding(&self) -> StateEncoding {
        self.encoding
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn is_wall(&self, l: LocId) -> bool {
        self.walls[l]
    }

    pub fn is_observable(&self, l: LocId) -> bool {
        self.observable[l]
    }

    /// Free cells hidden by the observability filter.
    pub fn is_unobserved(&self, l: LocId) -> bool {
        !self.walls[l] && !self.observable[l]
    }

    pub fn walls(&self) -> impl Iterator<Item = LocId> + '_ {
        (0..self.graph.len()).filter(|&l| self.walls[l])
    }

    pub fn free_locations(&self) -> impl Iterator<Item = LocId> + '_ {
        (0..self.graph.len()).filter(|&l| !self.walls[l])
    }

    pub fn observable_locations(&self) -> impl Iterator<Item = LocId> + '_ {
        (0..self.graph.len()).filter(|&l| self.observable[l])
    }

    /// Observation at a free location. Wall cells have none.
    pub fn state_at(&self, l: LocId) -> Option<State> {
        if self.walls[l] {
            None
        } else {
            self.obs_map[l]
        }
    }

    /// Observation a wall cell would show if it were cleared.
    pub fn dormant_state(&self, l: LocId) -> Option<State> {
        self.obs_map[l]
    }

    /// Location currently showing `s`; `None` if `s` is unused or walled in.
    pub fn location_of(&self, s: State) -> Option<LocId> {
        self.state_to_loc.get(&s).copied().filter(|&l| !self.walls[l])
    }

    /// Oriented endpoints `(from, to, action)` of edge `i`.
    pub fn oriented_edge(&self, i: usize) -> (LocId, LocId, Action) {
        let e = self.graph.edges()[i];
        if self.orientation[i] {
            (e.a, e.b, e.dir)
        } else {
            (e.b, e.a, e.dir.opposite())
        }
    }

    pub fn step_loc(&self, loc: LocId, action: Action) -> Result<LocId> {
        if loc >= self.graph.len() || self.walls[loc] {
            return Err(Error::InvalidLocation(format!("location id {loc} is a wall or off-grid")));
        }
        Ok(match self.graph.neighbor(loc, action) {
            Some(next) if !self.walls[next] => next,
            _ => loc,
        })
    }

    /// The state reached from `s` by `action`, under the true dynamics.
    pub fn step_state(&self, s: State, action: Action) -> Option<State> {
        let l = self.location_of(s)?;
        self.step_loc(l, action).ok().and_then(|l| self.state_at(l))
    }

    pub(crate) fn with_walls(&self, walls: Vec<bool>) -> Environment {
        let observable = self
            .observable
            .iter()
            .zip(&walls)
            .zip(&self.walls)
            .map(|((&o, &w_new), &w_old)| !w_new && (o || w_old))
            .collect();
        Environment { walls, observable, ..self.clone() }
    }

    /// Shortest-path distances (in steps, under the true dynamics) from `from`
    /// to every location; `None` where unreachable.
    pub fn distances_from(&self, from: LocId) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.graph.len()];
        if self.walls[from] {
            return dist;
        }
        dist[from] = Some(0);
        let mut queue = VecDeque::from([from]);
        while let Some(u) = queue.pop_front() {
            let d = dist[u].unwrap_or(0);
            for a in Action::ALL {
                if let Some(v) = self.graph.neighbor(u, a) {
                    if !self.walls[v] && dist[v].is_none() {
                        dist[v] = Some(d + 1);
                        queue.push_back(v);
                    }
                }
            }
        }
        dist
    }
}

pub fn step(env: &Environment, loc: HexCoord, action: Action) -> Result<HexCoord> {
    let id = env
        .graph
        .loc_id(loc)
        .ok_or_else(|| Error::InvalidLocation(format!("{loc} is outside the graph")))?;
    if env.walls[id] {
        return Err(Error::InvalidLocation(format!("{loc} is a wall cell")));
    }
    Ok(env.graph.coord(env.step_loc(id, action)?))
}

/// Transition observed along `edge` under the environment's orientation.
///
/// A destination inside a wall turns the transition into a self-loop at the
/// source. When the orientation points out of a wall cell (which has no
/// observation), the edge is read from the free side, so the result is the
/// same blocked self-loop.
pub fn directed_transition(env: &Environment, edge: (HexCoord, HexCoord)) -> Result<Transition> {
    let g = &env.graph;
    let (x, y) = match (g.loc_id(edge.0), g.loc_id(edge.1)) {
        (Some(x), Some(y)) => (x, y),
        _ => return Err(Error::InvalidEdge(format!("{} - {} leaves the graph", edge.0, edge.1))),
    };
    let idx = g
        .edge_between(x, y)
        .ok_or_else(|| Error::InvalidEdge(format!("{} - {} are not adjacent", edge.0, edge.1)))?;
    env.edge_transition(idx)
}

impl Environment {
    pub fn edge_transition(&self, idx: usize) -> Result<Transition> {
        let (from, to, action) = self.oriented_edge(idx);
        let (from, to, action) = match (self.walls[from], self.walls[to]) {
            (true, true) => {
                return Err(Error::InvalidEdge(format!(
                    "edge {} - {} lies inside the wall",
                    self.graph.coord(from),
                    self.graph.coord(to)
                )))
            }
            (true, false) => (to, from, action.opposite()),
            _ => (from, to, action),
        };
        let source = self.state_at(from).expect("free cells carry a state");
        let end = if self.walls[to] { source } else { self.state_at(to).expect("free cell") };
        Ok(Transition { source, action, end })
    }
}
