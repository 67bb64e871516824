//! Stand-ins for a trained model that answer from the true environment.

use std::collections::{HashSet, VecDeque};

use super::ExploreTrace;
use crate::episodic::{Mask, MemoryBank, Transition};
use crate::error::{Error, Result};
use crate::hexgrid::{Action, Environment, LocId, State};
use crate::model::{Decision, Distribution, MaskedQuery, Prediction, WorldModel};

fn certain(mask: Mask, classes: usize, decision: Decision, idk_index: usize) -> Prediction {
    let mut probs = vec![0.0; classes + 1];
    let hot = match decision {
        Decision::State(s) => s.index(),
        Decision::Action(a) => a.index(),
        Decision::Idk => idk_index,
    };
    probs[hot] = 1.0;
    Prediction { mask, distribution: Distribution::Categorical { probs, idk: Some(classes) }, decision }
}

fn answer(env: &Environment, mask: Mask, decision: Decision) -> Prediction {
    let classes = match mask {
        Mask::Action => crate::hexgrid::NUM_ACTIONS,
        _ => env.vocab_size(),
    };
    certain(mask, classes, decision, classes)
}

/// Answers every query with the true dynamics, ignoring the bank.
#[derive(Debug, Clone)]
pub struct TrueDynamics<'a> {
    pub env: &'a Environment,
}

impl<'a> TrueDynamics<'a> {
    pub fn new(env: &'a Environment) -> Self {
        TrueDynamics { env }
    }

    fn decide(&self, q: &MaskedQuery) -> Decision {
        let env = self.env;
        let t = &q.transition;
        match q.mask {
            Mask::End => env.step_state(t.source, t.action).map_or(Decision::Idk, Decision::State),
            Mask::Source => {
                let Some(end) = env.location_of(t.end) else { return Decision::Idk };
                env.graph()
                    .neighbor(end, t.action.opposite())
                    .and_then(|l| env.state_at(l))
                    .filter(|&s| env.step_state(s, t.action) == Some(t.end))
                    .map_or(Decision::Idk, Decision::State)
            }
            Mask::Action => Action::ALL
                .into_iter()
                .find(|&a| t.source != t.end && env.step_state(t.source, a) == Some(t.end))
                .map_or(Decision::Idk, Decision::Action),
        }
    }
}

impl WorldModel for TrueDynamics<'_> {
    fn predict_batch(&self, _bank: &MemoryBank, queries: &[MaskedQuery]) -> Vec<Prediction> {
        queries.iter().map(|q| answer(self.env, q.mask, self.decide(q))).collect()
    }
}

/// Knows the geometry of `env` but only the observations present in the
/// bank: a move is certain when the bank remembers it or already holds the
/// target cell's observation, and IDK otherwise. Stepping off the grid is a
/// certain self-loop.
#[derive(Debug, Clone)]
pub struct MemoryOracle<'a> {
    pub env: &'a Environment,
}

impl<'a> MemoryOracle<'a> {
    pub fn new(env: &'a Environment) -> Self {
        MemoryOracle { env }
    }

    fn end(&self, bank: &MemoryBank, s: State, a: Action) -> Decision {
        if let Some(t) = bank.transitions.iter().find(|t| t.source == s && t.action == a) {
            return Decision::State(t.end);
        }
        if let Some(t) = bank
            .transitions
            .iter()
            .find(|t| !t.is_self_loop() && t.end == s && t.action == a.opposite())
        {
            return Decision::State(t.source);
        }
        if !bank.mentions(s) {
            return Decision::Idk;
        }
        let Some(loc) = self.env.location_of(s) else { return Decision::Idk };
        match self.env.graph().neighbor(loc, a) {
            None => Decision::State(s),
            Some(next) => match self.env.state_at(next) {
                Some(t) if bank.mentions(t) => Decision::State(t),
                _ => Decision::Idk,
            },
        }
    }

    fn decide(&self, bank: &MemoryBank, q: &MaskedQuery) -> Decision {
        let t = &q.transition;
        match q.mask {
            Mask::End => self.end(bank, t.source, t.action),
            Mask::Source => {
                if !bank.mentions(t.end) {
                    return Decision::Idk;
                }
                let Some(loc) = self.env.location_of(t.end) else { return Decision::Idk };
                self.env
                    .graph()
                    .neighbor(loc, t.action.opposite())
                    .and_then(|l| self.env.state_at(l))
                    .filter(|&s| self.end(bank, s, t.action) == Decision::State(t.end))
                    .map_or(Decision::Idk, Decision::State)
            }
            Mask::Action => {
                if t.source == t.end {
                    return Decision::Idk;
                }
                Action::ALL
                    .into_iter()
                    .find(|&a| self.end(bank, t.source, a) == Decision::State(t.end))
                    .map_or(Decision::Idk, Decision::Action)
            }
        }
    }
}

impl WorldModel for MemoryOracle<'_> {
    fn predict_batch(&self, bank: &MemoryBank, queries: &[MaskedQuery]) -> Vec<Prediction> {
        queries.iter().map(|q| answer(self.env, q.mask, self.decide(bank, q))).collect()
    }
}

/// Shortest action sequence from `from` to the nearest location in
/// `targets`, moving only through free cells.
fn nearest_target(env: &Environment, from: LocId, targets: &HashSet<LocId>) -> Option<Vec<Action>> {
    let mut prev: Vec<Option<(LocId, Action)>> = vec![None; env.graph().len()];
    let mut seen = vec![false; env.graph().len()];
    seen[from] = true;
    let mut queue = VecDeque::from([from]);
    while let Some(l) = queue.pop_front() {
        if targets.contains(&l) {
            let mut path = Vec::new();
            let mut cur = l;
            while let Some((p, a)) = prev[cur] {
                path.push(a);
                cur = p;
            }
            path.reverse();
            return Some(path);
        }
        for a in Action::ALL {
            let next = env.step_loc(l, a).ok()?;
            if !seen[next] {
                seen[next] = true;
                prev[next] = Some((l, a));
                queue.push_back(next);
            }
        }
    }
    None
}

/// Coverage baseline with full knowledge of the free space: a
/// nearest-neighbour tour over the observable cells, walking the shortest
/// route to the closest unvisited one each time. This approximates the
/// travelling-salesman tour rather than solving it exactly.
pub fn oracle_explore(env: &Environment, start: LocId, budget: usize) -> Result<ExploreTrace> {
    if budget == 0 {
        return Err(Error::InvalidConfig("exploration budget must be at least 1".into()));
    }
    let mut state = env
        .state_at(start)
        .ok_or_else(|| Error::InvalidLocation(format!("start {start} is a wall")))?;
    let mut pending: HashSet<LocId> = env.observable_locations().filter(|&l| l != start).collect();
    let mut seen = HashSet::from([state]);
    let mut bank = MemoryBank::default();
    let mut trace = ExploreTrace { bank: MemoryBank::default(), unique_states: vec![1], locations: vec![start], saturated: false };
    let mut loc = start;
    'tour: while trace.locations.len() <= budget {
        let Some(route) = nearest_target(env, loc, &pending) else {
            trace.saturated = true;
            break;
        };
        for a in route {
            if trace.locations.len() > budget {
                break 'tour;
            }
            loc = env.step_loc(loc, a)?;
            let next = env.state_at(loc).expect("step never enters a wall");
            bank.insert(Transition::new(state, a, next));
            state = next;
            seen.insert(state);
            pending.remove(&loc);
            trace.unique_states.push(seen.len());
            trace.locations.push(loc);
        }
    }
    trace.bank = bank;
    Ok(trace)
}
