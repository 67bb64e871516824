//! Memory banks, queries and memory-graph statistics.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;

use petgraph::algo::min_spanning_tree;
use petgraph::data::Element;
use petgraph::graph::{NodeIndex, UnGraph};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hexgrid::{Action, Environment, HexCoord, LocId, State};

/// One-step episodic memory `(source, action, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transition {
    pub source: State,
    pub action: Action,
    pub end: State,
}

impl Transition {
    pub fn new(source: State, action: Action, end: State) -> Self {
        Transition { source, action, end }
    }

    pub fn is_self_loop(&self) -> bool {
        self.source == self.end
    }
}

impl fmt::Display for Transition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.source, self.action, self.end)
    }
}

/// Which component of a transition is hidden from the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mask {
    Source,
    Action,
    End,
}

impl Mask {
    pub const ALL: [Mask; 3] = [Mask::Source, Mask::Action, Mask::End];

    pub fn index(self) -> usize {
        match self {
            Mask::Source => 0,
            Mask::Action => 1,
            Mask::End => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Seen,
    Unseen,
    Unsolvable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub transition: Transition,
    pub mask: Mask,
    pub kind: QueryKind,
}

/// Sampling probabilities over query kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueryMix {
    pub unseen: f64,
    pub seen: f64,
    pub unsolvable: f64,
}

impl QueryMix {
    pub const RANDOM_WALL: QueryMix = QueryMix { unseen: 0.68, seen: 0.17, unsolvable: 0.15 };
    pub const UNSEEN_ONLY: QueryMix = QueryMix { unseen: 1.0, seen: 0.0, unsolvable: 0.0 };
    pub const SEEN_ONLY: QueryMix = QueryMix { unseen: 0.0, seen: 1.0, unsolvable: 0.0 };
    pub const UNSOLVABLE_ONLY: QueryMix = QueryMix { unseen: 0.0, seen: 0.0, unsolvable: 1.0 };

    pub fn validate(&self) -> Result<()> {
        let parts = [self.unseen, self.seen, self.unsolvable];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidConfig(format!("query mix has a negative entry: {self:?}")));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("query mix sums to {total}, not 1")));
        }
        Ok(())
    }

    fn weight(&self, kind: QueryKind) -> f64 {
        match kind {
            QueryKind::Unseen => self.unseen,
            QueryKind::Seen => self.seen,
            QueryKind::Unsolvable => self.unsolvable,
        }
    }
}

impl Default for QueryMix {
    fn default() -> Self {
        QueryMix::RANDOM_WALL
    }
}

/// Permuted set of one-step memories from a single environment.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MemoryBank {
    pub transitions: Vec<Transition>,
    pub env_id: u64,
}

impl MemoryBank {
    pub fn new(transitions: Vec<Transition>, env_id: u64) -> Self {
        MemoryBank { transitions, env_id }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn contains(&self, t: &Transition) -> bool {
        self.transitions.contains(t)
    }

    /// Distinct states mentioned by any memory, in first-seen order.
    pub fn unique_states(&self) -> Vec<State> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for t in &self.transitions {
            for s in [t.source, t.end] {
                if seen.insert(s) {
                    out.push(s);
                }
            }
        }
        out
    }

    pub fn mentions(&self, s: State) -> bool {
        self.transitions.iter().any(|t| t.source == s || t.end == s)
    }

    /// Adds `t` unless an identical memory is already stored.
    pub fn insert(&mut self, t: Transition) -> bool {
        if self.contains(&t) {
            false
        } else {
            self.transitions.push(t);
            true
        }
    }

    /// Removes every memory that starts or ends at `s`; returns how many went.
    pub fn forget_state(&mut self, s: State) -> usize {
        let before = self.transitions.len();
        self.transitions.retain(|t| t.source != s && t.end != s);
        before - self.transitions.len()
    }
}

/// Unordered location pair a transition was observed across.
pub fn transition_support(env: &Environment, t: &Transition) -> Option<(LocId, LocId)> {
    let from = env.location_of(t.source)?;
    let to = if t.is_self_loop() {
        env.graph().neighbor(from, t.action)?
    } else {
        env.location_of(t.end)?
    };
    Some(if from < to { (from, to) } else { (to, from) })
}

fn bank_support(env: &Environment, bank: &MemoryBank) -> HashSet<(LocId, LocId)> {
    bank.transitions.iter().filter_map(|t| transition_support(env, t)).collect()
}

pub fn sample_memory_bank(env: &Environment, seed: u64) -> MemoryBank {
    sample_memory_bank_with(env, &mut ChaCha8Rng::seed_from_u64(seed), seed)
}

/// Random minimal spanning forest of the observable subgraph, read through
/// the environment's orientation and observation map, then shuffled.
pub fn sample_memory_bank_with<R: Rng + ?Sized>(
    env: &Environment,
    rng: &mut R,
    env_id: u64,
) -> MemoryBank {
    let mut graph: UnGraph<LocId, f64> = UnGraph::default();
    let mut node_of = HashMap::new();
    for l in env.observable_locations() {
        node_of.insert(l, graph.add_node(l));
    }
    let mut edge_index = HashMap::new();
    for (i, e) in env.graph().edges().iter().enumerate() {
        if let (Some(&na), Some(&nb)) = (node_of.get(&e.a), node_of.get(&e.b)) {
            graph.add_edge(na, nb, rng.random::<f64>());
            edge_index.insert((e.a, e.b), i);
        }
    }
    let forest = min_spanning_tree(&graph);
    let mut transitions: Vec<Transition> = forest
        .filter_map(|el| match el {
            Element::Edge { source, target, .. } => {
                let (x, y) = (graph[NodeIndex::new(source)], graph[NodeIndex::new(target)]);
                let key = if x < y { (x, y) } else { (y, x) };
                Some(env.edge_transition(edge_index[&key]).expect("observable edge"))
            }
            Element::Node { .. } => None,
        })
        .collect();
    transitions.shuffle(rng);
    MemoryBank { transitions, env_id }
}

/// Candidate query transitions of each kind for a given bank.
#[derive(Debug, Clone, Default)]
pub struct QueryPool {
    pub seen: Vec<Transition>,
    pub unseen: Vec<Transition>,
    pub unsolvable: Vec<Transition>,
}

impl QueryPool {
    pub fn new(env: &Environment, bank: &MemoryBank) -> Self {
        let support = bank_support(env, bank);
        let mut pool = QueryPool { seen: bank.transitions.clone(), ..Default::default() };
        for (i, e) in env.graph().edges().iter().enumerate() {
            let (oa, ob) = (env.is_observable(e.a), env.is_observable(e.b));
            if oa && ob {
                if !support.contains(&(e.a, e.b)) {
                    pool.unseen.push(env.edge_transition(i).expect("observable edge"));
                }
            } else if (oa && env.is_unobserved(e.b)) || (ob && env.is_unobserved(e.a)) {
                pool.unsolvable.push(env.edge_transition(i).expect("free edge"));
            }
        }
        pool
    }

    pub fn of_kind(&self, kind: QueryKind) -> &[Transition] {
        match kind {
            QueryKind::Seen => &self.seen,
            QueryKind::Unseen => &self.unseen,
            QueryKind::Unsolvable => &self.unsolvable,
        }
    }

    /// Draws a kind from `mix`, renormalised over kinds with candidates.
    pub fn draw<R: Rng + ?Sized>(&self, mix: &QueryMix, rng: &mut R) -> Result<Query> {
        let kinds = [QueryKind::Unseen, QueryKind::Seen, QueryKind::Unsolvable];
        let weights: Vec<f64> = kinds
            .iter()
            .map(|&k| if self.of_kind(k).is_empty() { 0.0 } else { mix.weight(k) })
            .collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::NoQueryAvailable);
        }
        let mut u = rng.random::<f64>() * total;
        let mut kind = kinds[0];
        for (&k, &w) in kinds.iter().zip(&weights) {
            if w > 0.0 {
                kind = k;
                if u < w {
                    break;
                }
                u -= w;
            }
        }
        let transition = *self.of_kind(kind).choose(rng).expect("non-empty kind");
        let mask = *Mask::ALL.choose(rng).expect("three masks");
        Ok(Query { transition, mask, kind })
    }
}

pub fn sample_query(
    env: &Environment,
    bank: &MemoryBank,
    mix: &QueryMix,
    seed: u64,
) -> Result<Query> {
    mix.validate()?;
    QueryPool::new(env, bank).draw(mix, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Undirected state graph formed by the bank's memories (self-loops dropped).
pub fn memory_graph(bank: &MemoryBank) -> HashMap<State, Vec<State>> {
    let mut adj: HashMap<State, Vec<State>> = HashMap::new();
    for t in &bank.transitions {
        adj.entry(t.source).or_default();
        adj.entry(t.end).or_default();
        if !t.is_self_loop() {
            adj.entry(t.source).or_default().push(t.end);
            adj.entry(t.end).or_default().push(t.source);
        }
    }
    adj
}

/// Number of memories that must be chained to link the query's endpoints;
/// `None` when they sit in different bank components.
pub fn integration_path_length(bank: &MemoryBank, query: &Query) -> Option<usize> {
    let (from, to) = (query.transition.source, query.transition.end);
    let adj = memory_graph(bank);
    if from == to {
        return adj.contains_key(&from).then_some(0);
    }
    let mut dist: HashMap<State, usize> = HashMap::from([(from, 0)]);
    let mut queue = VecDeque::from([from]);
    while let Some(u) = queue.pop_front() {
        let d = dist[&u];
        for &v in adj.get(&u).map(Vec::as_slice).unwrap_or(&[]) {
            if !dist.contains_key(&v) {
                if v == to {
                    return Some(d + 1);
                }
                dist.insert(v, d + 1);
                queue.push_back(v);
            }
        }
    }
    None
}

/// Obstacle edit applied to an existing room.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WallEdit {
    pub add: Vec<HexCoord>,
    pub remove: Vec<HexCoord>,
}

impl WallEdit {
    pub fn add(cells: impl IntoIterator<Item = HexCoord>) -> Self {
        WallEdit { add: cells.into_iter().collect(), remove: Vec::new() }
    }

    pub fn remove(cells: impl IntoIterator<Item = HexCoord>) -> Self {
        WallEdit { add: Vec::new(), remove: cells.into_iter().collect() }
    }
}

/// Returns a copy of `env` with the wall set edited. Observation map,
/// orientation and observability of untouched cells are preserved.
///
/// Added cells must be free and form one contiguous group; removed cells
/// must be walls that still own a dormant observation.
pub fn apply_world_change(env: &Environment, change: &WallEdit) -> Result<Environment> {
    let g = env.graph();
    let resolve = |c: &HexCoord| {
        g.loc_id(*c)
            .ok_or_else(|| Error::InvalidWorldChange(format!("{c} is outside the graph")))
    };
    let mut walls: Vec<bool> = (0..g.len()).map(|l| env.is_wall(l)).collect();
    let mut added = Vec::new();
    for c in &change.add {
        let l = resolve(c)?;
        if walls[l] {
            return Err(Error::InvalidWorldChange(format!("{c} is already a wall")));
        }
        walls[l] = true;
        added.push(l);
    }
    if !is_contiguous(env, &added) {
        return Err(Error::InvalidWorldChange("added obstacles are not contiguous".into()));
    }
    for c in &change.remove {
        let l = resolve(c)?;
        if !walls[l] || added.contains(&l) {
            return Err(Error::InvalidWorldChange(format!("{c} is not an existing wall")));
        }
        if env.dormant_state(l).is_none() {
            return Err(Error::InvalidWorldChange(format!(
                "{c} has no observation to expose once cleared"
            )));
        }
        walls[l] = false;
    }
    if walls.iter().filter(|w| !**w).count() < 2 {
        return Err(Error::InvalidWorldChange("fewer than two free locations would remain".into()));
    }
    Ok(env.with_walls(walls))
}

fn is_contiguous(env: &Environment, cells: &[LocId]) -> bool {
    if cells.len() <= 1 {
        return true;
    }
    let set: HashSet<LocId> = cells.iter().copied().collect();
    let mut seen = HashSet::from([cells[0]]);
    let mut stack = vec![cells[0]];
    while let Some(u) = stack.pop() {
        for a in Action::ALL {
            if let Some(v) = env.graph().neighbor(u, a) {
                if set.contains(&v) && seen.insert(v) {
                    stack.push(v);
                }
            }
        }
    }
    seen.len() == set.len()
}
