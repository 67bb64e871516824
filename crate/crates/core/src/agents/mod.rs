//! Planning, exploration and navigation driven by model predictions.
//!
//! Every agent talks to the world through [`WorldModel`], so the same code
//! runs on a trained network or on one of the oracles in [`oracle`].

pub mod oracle;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet, VecDeque};

use ndarray::Array2;
use petgraph::algo::floyd_warshall;
use petgraph::graph::UnGraph;
use serde::{Deserialize, Serialize};

use crate::episodic::{MemoryBank, Transition};
use crate::error::{Error, Result};
use crate::hexgrid::{Action, Environment, LocId, State, NUM_ACTIONS};
use crate::model::{Decision, MaskedQuery, Prediction, WorldModel};

pub use oracle::{oracle_explore, MemoryOracle, TrueDynamics};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub t_max: usize,
    pub action_cost: f64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig { t_max: 40, action_cost: 1.0 }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 {
            return Err(Error::InvalidConfig("t_max must be at least 1".into()));
        }
        if !(self.action_cost > 0.0 && self.action_cost.is_finite()) {
            return Err(Error::InvalidConfig("action_cost must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExploreConfig {
    pub beta: f64,
    pub gamma: f64,
    pub confidence_threshold: f64,
    pub lookahead_depth: usize,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig { beta: 0.2, gamma: 0.1, confidence_threshold: 0.8, lookahead_depth: 10 }
    }
}

impl ExploreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "confidence_threshold {} outside (0, 1)",
                self.confidence_threshold
            )));
        }
        Ok(())
    }
}

/// Result of a search: the action sequence (or `None` for FAIL) and the
/// number of states expanded.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub actions: Option<Vec<Action>>,
    pub expanded: usize,
}

fn end_queries(s: State) -> Vec<MaskedQuery> {
    Action::ALL.iter().map(|&a| MaskedQuery::end(s, a)).collect()
}

fn successors<M: WorldModel + ?Sized>(model: &M, bank: &MemoryBank, s: State) -> Vec<(Action, Prediction)> {
    Action::ALL.into_iter().zip(model.predict_batch(bank, &end_queries(s))).collect()
}

#[derive(Debug)]
struct Entry {
    f: f64,
    h: f64,
    order: usize,
    cost: f64,
    state: State,
    path: Vec<Action>,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    // min-heap on (f, h, insertion order)
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| other.h.total_cmp(&self.h))
            .then_with(|| other.order.cmp(&self.order))
    }
}

/// Uniform-cost search over imagined transitions; A* when a heuristic table
/// is supplied. Successors predicted as IDK are never expanded, and paths
/// that reach `t_max` actions are not extended.
pub fn find_path<M: WorldModel + ?Sized>(
    model: &M,
    bank: &MemoryBank,
    start: State,
    goal: State,
    cfg: &PlanConfig,
    heuristic: Option<&HeuristicTable>,
) -> Plan {
    let h = |s: State| heuristic.map_or(0.0, |t| t.state_distance(s, goal));
    let mut heap = BinaryHeap::new();
    let mut order = 0;
    let h0 = h(start);
    heap.push(Entry { f: h0, h: h0, order, cost: 0.0, state: start, path: Vec::new() });
    let mut closed = HashSet::new();
    let mut expanded = 0;
    while let Some(e) = heap.pop() {
        if e.state == goal {
            return Plan { actions: Some(e.path), expanded };
        }
        if !closed.insert(e.state) || e.path.len() >= cfg.t_max {
            continue;
        }
        expanded += 1;
        for (a, p) in successors(model, bank, e.state) {
            let Some(next) = p.state() else { continue };
            if closed.contains(&next) {
                continue;
            }
            let cost = e.cost + cfg.action_cost;
            let hn = h(next);
            let mut path = e.path.clone();
            path.push(a);
            order += 1;
            heap.push(Entry { f: cost + hn, h: hn, order, cost, state: next, path });
        }
    }
    Plan { actions: None, expanded }
}

/// Chosen exploratory action and its score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExploreChoice {
    pub action: Action,
    pub score: f64,
}

/// Score of one predicted end state: `1 - beta * H` for IDK, `gamma * H`
/// when the most likely outcome has at most `confidence_threshold`
/// probability, otherwise not a candidate.
pub fn explore_score(p: &Prediction, cfg: &ExploreConfig) -> Option<f64> {
    let entropy = p.distribution.entropy();
    if p.is_idk() {
        Some(1.0 - cfg.beta * entropy)
    } else if p.distribution.max_prob() <= cfg.confidence_threshold {
        Some(cfg.gamma * entropy)
    } else {
        None
    }
}

/// Highest-scoring uncertain action from `s`, or `None` when every action
/// is predicted confidently.
pub fn explore_step<M: WorldModel + ?Sized>(
    model: &M,
    bank: &MemoryBank,
    s: State,
    cfg: &ExploreConfig,
) -> Option<ExploreChoice> {
    let mut best: Option<ExploreChoice> = None;
    for (action, p) in successors(model, bank, s) {
        if let Some(score) = explore_score(&p, cfg) {
            if best.is_none_or(|b| score > b.score) {
                best = Some(ExploreChoice { action, score });
            }
        }
    }
    best
}

/// Breadth-first unroll over confident predictions from `s`; returns a plan
/// to the nearest state where [`explore_step`] has a candidate.
pub fn frontier_lookahead<M: WorldModel + ?Sized>(
    model: &M,
    bank: &MemoryBank,
    s: State,
    explore_cfg: &ExploreConfig,
    plan_cfg: &PlanConfig,
) -> Option<Vec<Action>> {
    if explore_cfg.lookahead_depth == 0 {
        return None;
    }
    let mut parent: HashMap<State, (State, Action)> = HashMap::new();
    let mut depth = HashMap::from([(s, 0usize)]);
    let mut queue = VecDeque::from([s]);
    while let Some(x) = queue.pop_front() {
        let dx = depth[&x];
        if x != s && explore_step(model, bank, x, explore_cfg).is_some() {
            let cfg = PlanConfig { t_max: plan_cfg.t_max.max(dx), ..*plan_cfg };
            if let Some(actions) = find_path(model, bank, s, x, &cfg, None).actions {
                return Some(actions);
            }
            let mut path = Vec::new();
            let mut cur = x;
            while let Some(&(prev, a)) = parent.get(&cur) {
                path.push(a);
                cur = prev;
            }
            path.reverse();
            return Some(path);
        }
        if dx == explore_cfg.lookahead_depth {
            continue;
        }
        for (a, p) in successors(model, bank, x) {
            let Some(next) = p.state() else { continue };
            if p.distribution.max_prob() <= explore_cfg.confidence_threshold || depth.contains_key(&next) {
                continue;
            }
            depth.insert(next, dx + 1);
            parent.insert(next, (x, a));
            queue.push_back(next);
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExploreTrace {
    pub bank: MemoryBank,
    /// Unique states observed after each step (entry 0 is the start).
    pub unique_states: Vec<usize>,
    pub locations: Vec<LocId>,
    /// True when exploration stopped because nothing uncertain was left.
    pub saturated: bool,
}

/// Explores `env` from `start` with an initially empty bank, storing every
/// real transition. Stops after `budget` steps or at saturation.
pub fn explore_episode<M: WorldModel + ?Sized>(
    model: &M,
    env: &Environment,
    start: LocId,
    budget: usize,
    explore_cfg: &ExploreConfig,
    plan_cfg: &PlanConfig,
) -> Result<ExploreTrace> {
    if budget == 0 {
        return Err(Error::InvalidConfig("exploration budget must be at least 1".into()));
    }
    let mut bank = MemoryBank::default();
    let mut loc = start;
    let mut state = env
        .state_at(start)
        .ok_or_else(|| Error::InvalidLocation(format!("start {start} is a wall")))?;
    let mut seen = HashSet::from([state]);
    let mut trace = ExploreTrace { bank: MemoryBank::default(), unique_states: vec![1], locations: vec![loc], saturated: false };
    for _ in 0..budget {
        let action = match explore_step(model, &bank, state, explore_cfg) {
            Some(c) => c.action,
            None => match frontier_lookahead(model, &bank, state, explore_cfg, plan_cfg).and_then(|p| p.first().copied()) {
                Some(a) => a,
                None => {
                    trace.saturated = true;
                    break;
                }
            },
        };
        loc = env.step_loc(loc, action)?;
        let next = env.state_at(loc).expect("step never enters a wall");
        bank.insert(Transition::new(state, action, next));
        state = next;
        seen.insert(state);
        trace.unique_states.push(seen.len());
        trace.locations.push(loc);
    }
    trace.bank = bank;
    Ok(trace)
}

/// Geodesic distances between (state, action) activations.
#[derive(Debug, Clone, PartialEq)]
pub struct HeuristicTable {
    pub radius: f64,
    states: Vec<State>,
    index: HashMap<State, usize>,
    /// `(states * 6) x (states * 6)` distances, row `i * 6 + a`.
    table: Array2<f64>,
    /// Number of undirected edges in the latent graph.
    pub edges: usize,
}

impl HeuristicTable {
    pub fn states(&self) -> &[State] {
        &self.states
    }

    pub fn nodes(&self) -> usize {
        self.table.nrows()
    }

    pub fn table(&self) -> &Array2<f64> {
        &self.table
    }

    pub fn node(&self, s: State, a: Action) -> Option<usize> {
        self.index.get(&s).map(|i| i * NUM_ACTIONS + a.index())
    }

    pub fn pair(&self, x: State, a: Action, y: State, b: Action) -> f64 {
        match (self.node(x, a), self.node(y, b)) {
            (Some(i), Some(j)) => self.table[[i, j]],
            _ => f64::INFINITY,
        }
    }

    /// State-level heuristic: mean over finite action-slot pairs; zero on the
    /// diagonal and infinite when no slot pair is connected.
    pub fn state_distance(&self, x: State, y: State) -> f64 {
        if x == y {
            return 0.0;
        }
        let (Some(&i), Some(&j)) = (self.index.get(&x), self.index.get(&y)) else {
            return f64::INFINITY;
        };
        let mut sum = 0.0;
        let mut n = 0;
        for a in 0..NUM_ACTIONS {
            for b in 0..NUM_ACTIONS {
                let v = self.table[[i * NUM_ACTIONS + a, j * NUM_ACTIONS + b]];
                if v.is_finite() {
                    sum += v;
                    n += 1;
                }
            }
        }
        if n == 0 {
            f64::INFINITY
        } else {
            sum / n as f64
        }
    }

    /// Table whose every slot pair carries `dist(x, y)`; with true shortest
    /// path lengths this is an admissible, consistent heuristic.
    pub fn from_state_distances(states: &[State], dist: impl Fn(State, State) -> Option<f64>) -> Self {
        let n = states.len() * NUM_ACTIONS;
        let mut table = Array2::from_elem((n, n), f64::INFINITY);
        for (i, &x) in states.iter().enumerate() {
            for (j, &y) in states.iter().enumerate() {
                let v = if i == j { Some(0.0) } else { dist(x, y) };
                if let Some(v) = v {
                    for a in 0..NUM_ACTIONS {
                        for b in 0..NUM_ACTIONS {
                            table[[i * NUM_ACTIONS + a, j * NUM_ACTIONS + b]] = v;
                        }
                    }
                }
            }
        }
        for k in 0..n {
            table[[k, k]] = 0.0;
        }
        HeuristicTable {
            radius: f64::INFINITY,
            index: states.iter().enumerate().map(|(i, &s)| (s, i)).collect(),
            states: states.to_vec(),
            table,
            edges: 0,
        }
    }

    /// Ground-truth shortest-path table for the bank's states in `env`.
    pub fn ground_truth(env: &Environment, states: &[State]) -> Self {
        HeuristicTable::from_state_distances(states, |x, y| {
            let (lx, ly) = (env.location_of(x)?, env.location_of(y)?);
            env.distances_from(lx)[ly].map(|d| d as f64)
        })
    }
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na * nb)).max(0.0)
}

/// End-state activations at `layer` for every (state, action) over the bank's
/// unique states, ordered state-major.
pub fn collect_activations<M: WorldModel + ?Sized>(
    model: &M,
    bank: &MemoryBank,
    layer: usize,
) -> Result<(Vec<State>, Vec<Vec<f64>>)> {
    if bank.is_empty() {
        return Err(Error::Analysis("heuristic table needs a non-empty bank".into()));
    }
    let states = bank.unique_states();
    let queries: Vec<MaskedQuery> = states.iter().flat_map(|&s| end_queries(s)).collect();
    let acts = model
        .activations(bank, &queries, layer)
        .ok_or_else(|| Error::Analysis(format!("model exposes no activations at layer {layer}")))?;
    Ok((states, acts))
}

/// Pairwise cosine distances between activation vectors.
pub fn cosine_matrix(acts: &[Vec<f64>]) -> Array2<f64> {
    let n = acts.len();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v = cosine_distance(&acts[i], &acts[j]);
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// All-pairs shortest paths over the graph joining nodes whose distance is
/// at most `radius`, each edge weighted by that distance.
pub fn radius_geodesics(dist: &Array2<f64>, radius: f64) -> (Array2<f64>, usize) {
    let n = dist.nrows();
    let mut g: UnGraph<(), f64> = UnGraph::with_capacity(n, 0);
    let nodes: Vec<_> = (0..n).map(|_| g.add_node(())).collect();
    for i in 0..n {
        for j in i + 1..n {
            if dist[[i, j]] <= radius {
                g.add_edge(nodes[i], nodes[j], dist[[i, j]]);
            }
        }
    }
    let edges = g.edge_count();
    let mut out = Array2::from_elem((n, n), f64::INFINITY);
    let paths = floyd_warshall(&g, |e| *e.weight()).expect("non-negative weights");
    for ((a, b), v) in paths {
        // unreachable pairs come back as the weight type's maximum
        if v < f64::MAX {
            out[[a.index(), b.index()]] = v;
        }
    }
    for i in 0..n {
        out[[i, i]] = 0.0;
    }
    (out, edges)
}

/// Latent geodesic table over the bank's (state, action) pairs.
pub fn compute_heuristic_table<M: WorldModel + ?Sized>(
    model: &M,
    bank: &MemoryBank,
    radius: f64,
    layer: usize,
) -> Result<HeuristicTable> {
    let (states, acts) = collect_activations(model, bank, layer)?;
    Ok(table_from_activations(&states, &acts, radius))
}

pub fn table_from_activations(states: &[State], acts: &[Vec<f64>], radius: f64) -> HeuristicTable {
    let (table, edges) = radius_geodesics(&cosine_matrix(acts), radius);
    HeuristicTable {
        radius,
        index: states.iter().enumerate().map(|(i, &s)| (s, i)).collect(),
        states: states.to_vec(),
        table,
        edges,
    }
}

/// `count` evenly spaced radii between the 5th and 95th percentile of the
/// off-diagonal cosine distances.
pub fn r_latent_candidates(acts: &[Vec<f64>], count: usize) -> Vec<f64> {
    let d = cosine_matrix(acts);
    let n = d.nrows();
    let mut v: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| d[[i, j]]).collect();
    if v.is_empty() || count == 0 {
        return Vec::new();
    }
    v.sort_by(f64::total_cmp);
    let pct = |p: f64| v[((v.len() - 1) as f64 * p).round() as usize];
    let (lo, hi) = (pct(0.05), pct(0.95));
    if count == 1 {
        return vec![lo];
    }
    (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NavOutcome {
    pub success: bool,
    pub actions: Vec<Action>,
    pub states: Vec<State>,
}

/// Greedy descent on the state-level heuristic through imagined steps.
pub fn greedy_navigate<M: WorldModel + ?Sized>(
    model: &M,
    bank: &MemoryBank,
    table: &HeuristicTable,
    start: State,
    goal: State,
    cap: usize,
) -> NavOutcome {
    let mut out = NavOutcome { success: start == goal, actions: Vec::new(), states: vec![start] };
    let mut cur = start;
    while !out.success && out.actions.len() < cap {
        let best = successors(model, bank, cur)
            .into_iter()
            .filter_map(|(a, p)| p.state().filter(|&s| s != cur).map(|s| (a, s)))
            .map(|(a, s)| (if s == goal { -1.0 } else { table.state_distance(s, goal) }, a, s))
            .min_by(|x, y| x.0.total_cmp(&y.0));
        let Some((_, a, s)) = best else { break };
        out.actions.push(a);
        out.states.push(s);
        cur = s;
        out.success = cur == goal;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadiusScore {
    pub radius: f64,
    pub success_rate: f64,
    pub optimality: f64,
}

/// Picks the radius whose table lets greedy navigation reach the most goals
/// within `cap` steps; ties go to higher optimality, then to the smaller
/// radius. Optimality is the planner's shortest imagined path length over
/// the greedy path length, averaged over successes.
pub fn select_r_latent<M: WorldModel + ?Sized>(
    model: &M,
    bank: &MemoryBank,
    candidates: &[f64],
    pairs: &[(State, State)],
    layer: usize,
    cap: usize,
) -> Result<(f64, Vec<RadiusScore>)> {
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("no R_latent candidates".into()));
    }
    let (states, acts) = collect_activations(model, bank, layer)?;
    let tables: Vec<HeuristicTable> = candidates.iter().map(|&r| table_from_activations(&states, &acts, r)).collect();
    select_among_tables(model, bank, &tables, pairs, cap)
}

/// Radius selection over prebuilt tables.
pub fn select_among_tables<M: WorldModel + ?Sized>(
    model: &M,
    bank: &MemoryBank,
    tables: &[HeuristicTable],
    pairs: &[(State, State)],
    cap: usize,
) -> Result<(f64, Vec<RadiusScore>)> {
    if tables.is_empty() {
        return Err(Error::InvalidConfig("no R_latent candidates".into()));
    }
    let plan_cfg = PlanConfig { t_max: cap.max(1) * 4, ..PlanConfig::default() };
    let optimal: Vec<Option<usize>> = pairs
        .iter()
        .map(|&(s, g)| find_path(model, bank, s, g, &plan_cfg, None).actions.map(|p| p.len()))
        .collect();
    let mut scores = Vec::with_capacity(tables.len());
    for table in tables {
        let mut ok = 0;
        let mut opt_sum = 0.0;
        for (&(s, g), best) in pairs.iter().zip(&optimal) {
            let nav = greedy_navigate(model, bank, table, s, g, cap);
            if nav.success {
                ok += 1;
                let len = nav.actions.len().max(1) as f64;
                opt_sum += best.map_or(1.0, |b| (b.max(1) as f64 / len).min(1.0));
            }
        }
        let n = pairs.len().max(1) as f64;
        scores.push(RadiusScore {
            radius: table.radius,
            success_rate: ok as f64 / n,
            optimality: if ok > 0 { opt_sum / ok as f64 } else { 0.0 },
        });
    }
    let best = scores
        .iter()
        .max_by(|a, b| {
            a.success_rate
                .total_cmp(&b.success_rate)
                .then(a.optimality.total_cmp(&b.optimality))
                .then(b.radius.total_cmp(&a.radius))
        })
        .expect("non-empty");
    Ok((best.radius, scores))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    /// Real steps allowed in total.
    pub step_budget: usize,
    /// Real steps allowed for each local exploration burst.
    pub explore_budget: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig { step_budget: 60, explore_budget: 6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutcome {
    pub success: bool,
    pub steps: usize,
    pub replans: usize,
    pub mismatches: usize,
    pub locations: Vec<LocId>,
    pub bank: MemoryBank,
}

/// Plans with the model, executes in `env`, and on a surprise forgets every
/// memory touching the falsified observation, explores locally, and replans.
#[allow(clippy::too_many_arguments)]
pub fn adaptive_navigate<M: WorldModel + ?Sized>(
    model: &M,
    bank: &MemoryBank,
    env: &Environment,
    start: LocId,
    goal: State,
    plan_cfg: &PlanConfig,
    explore_cfg: &ExploreConfig,
    adapt_cfg: &AdaptConfig,
) -> Result<AdaptOutcome> {
    let mut bank = bank.clone();
    let mut loc = start;
    let mut out = AdaptOutcome { success: false, steps: 0, replans: 0, mismatches: 0, locations: vec![loc], bank: MemoryBank::default() };
    let state_of = |l: LocId| env.state_at(l).ok_or_else(|| Error::InvalidLocation(format!("location {l} is a wall")));
    let mut cur = state_of(loc)?;
    'outer: while out.steps < adapt_cfg.step_budget {
        if cur == goal {
            out.success = true;
            break;
        }
        let plan = find_path(model, &bank, cur, goal, plan_cfg, None);
        let Some(actions) = plan.actions else {
            // nothing known leads to the goal: explore, walking to the
            // frontier when nothing nearby is uncertain, then try again
            let before = out.steps;
            let frontier = Some(plan_cfg);
            explore_locally(model, &mut bank, env, &mut loc, &mut cur, explore_cfg, frontier, adapt_cfg, &mut out)?;
            out.replans += 1;
            if out.steps == before {
                break;
            }
            continue;
        };
        for a in actions {
            if out.steps >= adapt_cfg.step_budget {
                break 'outer;
            }
            let predicted = model.predict(&bank, MaskedQuery::end(cur, a)).state();
            loc = env.step_loc(loc, a)?;
            let real = state_of(loc)?;
            out.steps += 1;
            out.locations.push(loc);
            if predicted != Some(real) {
                out.mismatches += 1;
                if let Some(p) = predicted {
                    bank.forget_state(p);
                }
                bank.insert(Transition::new(cur, a, real));
                cur = real;
                explore_locally(model, &mut bank, env, &mut loc, &mut cur, explore_cfg, None, adapt_cfg, &mut out)?;
                out.replans += 1;
                continue 'outer;
            }
            bank.insert(Transition::new(cur, a, real));
            cur = real;
            if cur == goal {
                out.success = true;
                break 'outer;
            }
        }
    }
    out.success |= cur == goal;
    out.bank = bank;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn explore_locally<M: WorldModel + ?Sized>(
    model: &M,
    bank: &mut MemoryBank,
    env: &Environment,
    loc: &mut LocId,
    cur: &mut State,
    explore_cfg: &ExploreConfig,
    frontier: Option<&PlanConfig>,
    adapt_cfg: &AdaptConfig,
    out: &mut AdaptOutcome,
) -> Result<()> {
    for _ in 0..adapt_cfg.explore_budget {
        if out.steps >= adapt_cfg.step_budget {
            break;
        }
        let action = match explore_step(model, bank, *cur, explore_cfg) {
            Some(choice) => choice.action,
            None => {
                let ahead = frontier.and_then(|pc| frontier_lookahead(model, bank, *cur, explore_cfg, pc));
                match ahead.and_then(|p| p.first().copied()) {
                    Some(a) => a,
                    None => break,
                }
            }
        };
        *loc = env.step_loc(*loc, action)?;
        let real = env.state_at(*loc).expect("step never enters a wall");
        bank.insert(Transition::new(*cur, action, real));
        *cur = real;
        out.steps += 1;
        out.locations.push(*loc);
    }
    Ok(())
}

/// Replays `actions` from `start` under the true dynamics.
pub fn replay(env: &Environment, start: LocId, actions: &[Action]) -> Result<LocId> {
    actions.iter().try_fold(start, |l, &a| env.step_loc(l, a))
}

/// Imagined end state of `(s, a)`, or `None` on IDK.
pub fn imagine<M: WorldModel + ?Sized>(model: &M, bank: &MemoryBank, s: State, a: Action) -> Option<State> {
    match model.predict(bank, MaskedQuery::end(s, a)).decision {
        Decision::State(x) => Some(x),
        _ => None,
    }
}
