//! Independent checks shared by the integration and acceptance targets.
//! Nothing here calls back into the code under test for the answer.
#![allow(dead_code)]

use std::collections::{HashMap, HashSet, VecDeque};

use eswm::episodic::{MemoryBank, Transition};
use eswm::hexgrid::{Environment, Family, HexCoord, LocId, State};

pub const UNIT_DIRECTIONS: [(i32, i32); 6] = [(1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)];

pub fn in_hexagon(q: i32, r: i32, radius: i32) -> bool {
    q.abs() <= radius && r.abs() <= radius && (q + r).abs() <= radius
}

/// Cells and undirected adjacencies of the radius-`radius` hexagon, counted
/// by scanning the bounding square.
pub fn brute_force_counts(radius: i32) -> (usize, usize) {
    let mut cells = 0;
    let mut pairs = 0;
    for q in -radius..=radius {
        for r in -radius..=radius {
            if !in_hexagon(q, r, radius) {
                continue;
            }
            cells += 1;
            for (dq, dr) in UNIT_DIRECTIONS {
                if in_hexagon(q + dq, r + dr, radius) {
                    pairs += 1;
                }
            }
        }
    }
    (cells, pairs / 2)
}

struct Dsu(Vec<usize>);

impl Dsu {
    fn new(n: usize) -> Self {
        Dsu((0..n).collect())
    }

    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.0[root] != root {
            root = self.0[root];
        }
        let mut x = x;
        while self.0[x] != root {
            let next = self.0[x];
            self.0[x] = root;
            x = next;
        }
        root
    }

    /// `false` if `a` and `b` were already joined.
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.0[ra] = rb;
        true
    }
}

fn adjacent(a: HexCoord, b: HexCoord) -> bool {
    UNIT_DIRECTIONS.contains(&(b.q - a.q, b.r - a.r))
}

fn coords_connected(cells: &[HexCoord]) -> bool {
    if cells.len() <= 1 {
        return true;
    }
    let mut dsu = Dsu::new(cells.len());
    for i in 0..cells.len() {
        for j in i + 1..cells.len() {
            if adjacent(cells[i], cells[j]) {
                dsu.union(i, j);
            }
        }
    }
    let root = dsu.find(0);
    (0..cells.len()).all(|i| dsu.find(i) == root)
}

pub fn check_environment(env: &Environment) -> Result<(), String> {
    let g = env.graph();
    let radius = g.radius() as i32;
    for &c in g.locations() {
        if !in_hexagon(c.q, c.r, radius) {
            return Err(format!("{c} lies outside radius {radius}"));
        }
    }
    let walls: Vec<HexCoord> = env.walls().map(|l| g.coord(l)).collect();
    match env.family() {
        Family::OpenArena => {
            if !walls.is_empty() || env.observable_locations().count() != g.len() {
                return Err("open arena must be wall-free and fully observable".into());
            }
        }
        Family::RandomWall => {
            if walls.is_empty() {
                return Err("random wall environment without a wall".into());
            }
        }
    }
    if !coords_connected(&walls) {
        return Err(format!("wall {walls:?} is not contiguous"));
    }
    let mut seen = HashSet::new();
    for l in 0..g.len() {
        if env.is_observable(l) && env.is_wall(l) {
            return Err(format!("wall cell {} is observable", g.coord(l)));
        }
        if env.is_wall(l) {
            continue;
        }
        let s = env.state_at(l).ok_or_else(|| format!("free cell {} has no state", g.coord(l)))?;
        if s.index() >= env.vocab_size() {
            return Err(format!("{s} outside vocabulary {}", env.vocab_size()));
        }
        if !seen.insert(s) {
            return Err(format!("{s} is used twice"));
        }
        if env.location_of(s) != Some(l) {
            return Err(format!("{s} does not map back to {}", g.coord(l)));
        }
    }
    Ok(())
}

/// Expected transition along edge `i`, rebuilt from the orientation and
/// the wall set.
pub fn expected_edge_transition(env: &Environment, i: usize) -> Option<Transition> {
    let (from, to, action) = env.oriented_edge(i);
    match (env.is_wall(from), env.is_wall(to)) {
        (true, true) => None,
        (false, true) => {
            let s = env.state_at(from)?;
            Some(Transition::new(s, action, s))
        }
        (true, false) => {
            let s = env.state_at(to)?;
            Some(Transition::new(s, action.opposite(), s))
        }
        (false, false) => Some(Transition::new(env.state_at(from)?, action, env.state_at(to)?)),
    }
}

/// Every edge's transition is a self-loop exactly when one endpoint is a wall.
pub fn check_edge_table(env: &Environment) -> Result<(), String> {
    for (i, e) in env.graph().edges().iter().enumerate() {
        let got = env.edge_transition(i).ok();
        let want = expected_edge_transition(env, i);
        if got != want {
            return Err(format!("edge {i} gave {got:?}, expected {want:?}"));
        }
        if let Some(t) = got {
            if t.is_self_loop() != (env.is_wall(e.a) || env.is_wall(e.b)) {
                return Err(format!("edge {i}: self-loop flag disagrees with walls"));
            }
        }
    }
    Ok(())
}

/// Spanning, minimal and size invariants of a bank, plus agreement of every
/// memory with the oriented edge it was read from.
pub fn check_bank(env: &Environment, bank: &MemoryBank) -> Result<(), String> {
    let g = env.graph();
    let n = g.len();
    if bank.len() > n - 1 {
        return Err(format!("bank has {} memories, bound is {}", bank.len(), n - 1));
    }
    let edge_of: HashMap<(LocId, LocId), usize> =
        g.edges().iter().enumerate().map(|(i, e)| ((e.a, e.b), i)).collect();
    let mut dsu = Dsu::new(n);
    let mut supports = HashSet::new();
    for t in &bank.transitions {
        let from = env.location_of(t.source).ok_or_else(|| format!("{t}: unknown source"))?;
        let to = if t.is_self_loop() {
            let c = g.coord(from).neighbor(t.action);
            g.loc_id(c).ok_or_else(|| format!("{t}: self-loop points off-grid"))?
        } else {
            env.location_of(t.end).ok_or_else(|| format!("{t}: unknown end"))?
        };
        let key = (from.min(to), from.max(to));
        let &idx = edge_of.get(&key).ok_or_else(|| format!("{t}: endpoints not adjacent"))?;
        if !env.is_observable(key.0) || !env.is_observable(key.1) {
            return Err(format!("{t}: support leaves the observable subgraph"));
        }
        if expected_edge_transition(env, idx) != Some(*t) {
            return Err(format!("{t}: disagrees with the edge orientation"));
        }
        if t.is_self_loop() != (env.is_wall(from) || env.is_wall(to)) {
            return Err(format!("{t}: self-loop without a wall"));
        }
        if !supports.insert(key) {
            return Err(format!("{t}: duplicated support"));
        }
        if !dsu.union(key.0, key.1) {
            return Err(format!("{t}: closes a cycle"));
        }
    }
    // spanning: every observable edge is inside one bank component
    let obs: Vec<LocId> = env.observable_locations().collect();
    let mut obs_dsu = Dsu::new(n);
    for e in g.edges() {
        if env.is_observable(e.a) && env.is_observable(e.b) {
            obs_dsu.union(e.a, e.b);
            if dsu.find(e.a) != dsu.find(e.b) {
                return Err(format!("observable edge {}-{} not spanned", g.coord(e.a), g.coord(e.b)));
            }
        }
    }
    let components = obs.iter().map(|&l| obs_dsu.find(l)).collect::<HashSet<_>>().len();
    if bank.len() != obs.len() - components {
        return Err(format!(
            "{} memories for {} observable cells in {components} components",
            bank.len(),
            obs.len()
        ));
    }
    Ok(())
}

/// Breadth-first search over the bank's undirected state graph.
pub fn bfs_bank_distance(bank: &MemoryBank, from: State, to: State) -> Option<usize> {
    let mut adj: HashMap<State, Vec<State>> = HashMap::new();
    for t in &bank.transitions {
        adj.entry(t.source).or_default().push(t.end);
        adj.entry(t.end).or_default().push(t.source);
    }
    if !adj.contains_key(&from) {
        return None;
    }
    let mut dist = HashMap::from([(from, 0usize)]);
    let mut queue = VecDeque::from([from]);
    while let Some(u) = queue.pop_front() {
        if u == to {
            return Some(dist[&u]);
        }
        for &v in &adj[&u] {
            if !dist.contains_key(&v) {
                dist.insert(v, dist[&u] + 1);
                queue.push_back(v);
            }
        }
    }
    None
}

/// Breadth-first distances over free cells using coordinates only.
pub fn bfs_grid_distance(env: &Environment, from: LocId, to: LocId) -> Option<usize> {
    let g = env.graph();
    let radius = g.radius() as i32;
    let mut dist = HashMap::from([(from, 0usize)]);
    let mut queue = VecDeque::from([from]);
    while let Some(u) = queue.pop_front() {
        if u == to {
            return Some(dist[&u]);
        }
        let c = g.coord(u);
        for (dq, dr) in UNIT_DIRECTIONS {
            let (q, r) = (c.q + dq, c.r + dr);
            if !in_hexagon(q, r, radius) {
                continue;
            }
            let v = g.loc_id(HexCoord::new(q, r)).expect("inside hexagon");
            if !env.is_wall(v) && !dist.contains_key(&v) {
                dist.insert(v, dist[&u] + 1);
                queue.push_back(v);
            }
        }
    }
    None
}
