mod common;

use std::collections::HashSet;

use common::{bfs_bank_distance, check_bank};
use eswm::episodic::{
    apply_world_change, integration_path_length, sample_memory_bank, sample_query, Mask, MemoryBank, Query,
    QueryKind, QueryMix, QueryPool, Transition, WallEdit,
};
use eswm::hexgrid::{generate_environment, Action, EnvConfig, Environment, HexCoord, LocId, State};
use eswm::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fully_observed(radius: u32, wall_len: usize, seed: u64) -> Environment {
    let cfg = EnvConfig { unobs_max_frac: 0.0, wall_len_min: wall_len, wall_len_max: wall_len, ..EnvConfig::random_wall(radius) };
    generate_environment(&cfg, seed).unwrap()
}

fn step_table(env: &Environment) -> Vec<Option<LocId>> {
    let g = env.graph();
    (0..g.len())
        .flat_map(|l| Action::ALL.map(move |a| (l, a)))
        .map(|(l, a)| env.step_loc(l, a).ok())
        .collect()
}

#[test]
fn open_arena_bank_is_a_spanning_tree() {
    let env = generate_environment(&EnvConfig::open_arena(), 9).unwrap();
    let bank = sample_memory_bank(&env, 1);
    assert_eq!(bank.len(), 18);
    assert_eq!(bank.unique_states().len(), 19);
    check_bank(&env, &bank).unwrap();
}

#[test]
fn one_wall_cell_leaves_thirty_five_memories() {
    let env = fully_observed(3, 1, 4);
    assert_eq!(env.walls().count(), 1);
    let bank = sample_memory_bank(&env, 2);
    assert_eq!(bank.len(), 35);
    assert_eq!(bank.unique_states().len(), 36);
    check_bank(&env, &bank).unwrap();
}

#[test]
fn split_rooms_give_a_forest() {
    // a bent wall cuts five cells off the south-west corner
    let env = generate_environment(&EnvConfig::open_arena(), 0).unwrap();
    let wall = [(-2, 0), (-1, 0), (0, 0), (0, 1), (1, 1)].map(|(q, r)| HexCoord::new(q, r));
    let env = apply_world_change(&env, &WallEdit::add(wall)).unwrap();
    let bank = sample_memory_bank(&env, 3);
    assert_eq!(bank.len(), (9 - 1) + (5 - 1));
    check_bank(&env, &bank).unwrap();
    let q = |a: State, b: State| Query { transition: Transition::new(a, Action::new(0).unwrap(), b), mask: Mask::End, kind: QueryKind::Unseen };
    let s = |q, r| env.state_at(env.graph().loc_id(HexCoord::new(q, r)).unwrap()).unwrap();
    assert_eq!(integration_path_length(&bank, &q(s(-2, 2), s(2, -2))), None);
    assert!(integration_path_length(&bank, &q(s(-2, 2), s(0, 2))).is_some());
}

#[test]
fn banks_are_permutations_not_walks() {
    // consecutive memories chain (end feeds the next source) no more often
    // than in a reshuffled copy of the same list
    let env = generate_environment(&EnvConfig::open_arena(), 1).unwrap();
    let chained = |ts: &[Transition]| ts.windows(2).filter(|w| w[0].end == w[1].source).count();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut observed, mut shuffled) = (0usize, 0usize);
    for seed in 0..3000 {
        let bank = sample_memory_bank(&env, seed);
        observed += chained(&bank.transitions);
        let mut copy = bank.transitions.clone();
        copy.shuffle(&mut rng);
        shuffled += chained(&copy);
    }
    let ratio = observed as f64 / shuffled as f64;
    assert!((ratio - 1.0).abs() < 0.1, "{observed} vs {shuffled}");
}

#[test]
fn unseen_queries_use_the_remaining_edges() {
    let env = generate_environment(&EnvConfig::open_arena(), 2).unwrap();
    let bank = sample_memory_bank(&env, 5);
    let pool = QueryPool::new(&env, &bank);
    assert_eq!(pool.unseen.len(), 42 - 18);
    assert!(pool.unsolvable.is_empty());
    let support = |t: &Transition| {
        let (a, b) = (env.location_of(t.source).unwrap(), env.location_of(t.end).unwrap());
        (a.min(b), a.max(b))
    };
    let bank_support: HashSet<_> = bank.transitions.iter().map(support).collect();
    let unseen: HashSet<_> = pool.unseen.iter().map(support).collect();
    assert_eq!(unseen.len(), 24);
    assert!(unseen.is_disjoint(&bank_support));

    for seed in 0..200 {
        let q = sample_query(&env, &bank, &QueryMix::UNSEEN_ONLY, seed).unwrap();
        assert_eq!(q.kind, QueryKind::Unseen);
        assert!(unseen.contains(&support(&q.transition)));
        let q = sample_query(&env, &bank, &QueryMix::SEEN_ONLY, seed).unwrap();
        assert!(bank.contains(&q.transition));
    }
    // the arena has no hidden cells, so the unsolvable share is renormalised away
    for seed in 0..200 {
        let q = sample_query(&env, &bank, &QueryMix::RANDOM_WALL, seed).unwrap();
        assert_ne!(q.kind, QueryKind::Unsolvable);
    }
    assert!(matches!(sample_query(&env, &bank, &QueryMix::UNSOLVABLE_ONLY, 0), Err(Error::NoQueryAvailable)));
}

#[test]
fn unsolvable_queries_touch_exactly_one_hidden_cell() {
    let cfg = EnvConfig::random_wall(3);
    let mut checked = 0;
    for seed in 0..300 {
        let env = generate_environment(&cfg, seed).unwrap();
        let bank = sample_memory_bank(&env, seed);
        for t in QueryPool::new(&env, &bank).unsolvable {
            let a = env.location_of(t.source).unwrap();
            let hidden_a = env.is_unobserved(a);
            if t.is_self_loop() {
                // blocked step out of a hidden cell
                assert!(hidden_a);
            } else {
                let b = env.location_of(t.end).unwrap();
                assert!(hidden_a != env.is_unobserved(b));
                assert!(env.is_observable(a) || env.is_observable(b));
            }
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn integration_path_examples() {
    let s = |i| State(i);
    let a = Action::new(0).unwrap();
    let bank = MemoryBank::new(vec![Transition::new(s(0), a, s(1)), Transition::new(s(2), a, s(1)), Transition::new(s(2), a, s(3))], 0);
    let q = |x, y| Query { transition: Transition::new(s(x), a, s(y)), mask: Mask::Source, kind: QueryKind::Unseen };
    assert_eq!(integration_path_length(&bank, &q(0, 1)), Some(1));
    assert_eq!(integration_path_length(&bank, &q(0, 3)), Some(3));
    assert_eq!(integration_path_length(&bank, &q(3, 0)), Some(3));
    assert_eq!(integration_path_length(&bank, &q(0, 9)), None);
}

#[test]
fn integration_path_matches_breadth_first_search() {
    let cfg = EnvConfig::random_wall(3);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for i in 0..1000 {
        let env = generate_environment(&cfg, i).unwrap();
        let bank = sample_memory_bank(&env, i + 7);
        let states: Vec<State> = env.free_locations().filter_map(|l| env.state_at(l)).collect();
        let (x, y) = (states[rng.random_range(0..states.len())], states[rng.random_range(0..states.len())]);
        if x == y {
            continue;
        }
        let q = Query { transition: Transition::new(x, Action::new(1).unwrap(), y), mask: Mask::End, kind: QueryKind::Unseen };
        assert_eq!(integration_path_length(&bank, &q), bfs_bank_distance(&bank, x, y), "instance {i}");
    }
}

#[test]
fn query_mix_frequencies() {
    // conditioned on every kind being available, so no renormalisation applies
    let cfg = EnvConfig::random_wall(2);
    let mix = QueryMix::RANDOM_WALL;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut kinds = [0usize; 3];
    let mut masks = [0usize; 3];
    let draws = 100_000;
    let mut seed = 0;
    let mut pool_env = None;
    for i in 0..draws {
        if i % 50 == 0 {
            loop {
                let env = generate_environment(&cfg, seed).unwrap();
                let bank = sample_memory_bank(&env, seed);
                seed += 1;
                let pool = QueryPool::new(&env, &bank);
                if [QueryKind::Seen, QueryKind::Unseen, QueryKind::Unsolvable].iter().all(|&k| !pool.of_kind(k).is_empty()) {
                    pool_env = Some(pool);
                    break;
                }
            }
        }
        let q = pool_env.as_ref().unwrap().draw(&mix, &mut rng).unwrap();
        kinds[match q.kind {
            QueryKind::Unseen => 0,
            QueryKind::Seen => 1,
            QueryKind::Unsolvable => 2,
        }] += 1;
        masks[q.mask.index()] += 1;
    }
    for (count, p) in kinds.iter().zip([0.68, 0.17, 0.15]) {
        let f = *count as f64 / draws as f64;
        assert!((f - p).abs() < 0.01, "{kinds:?}");
    }
    for count in masks {
        assert!((count as f64 / draws as f64 - 1.0 / 3.0).abs() < 0.01, "{masks:?}");
    }
}

#[test]
fn one_obstacle_changes_only_its_incident_moves() {
    let env = generate_environment(&EnvConfig::open_arena(), 4).unwrap();
    let g = env.graph();
    let cell = HexCoord::new(1, -1);
    let l = g.loc_id(cell).unwrap();
    let changed = apply_world_change(&env, &WallEdit::add([cell])).unwrap();
    let (before, after) = (step_table(&env), step_table(&changed));
    for (i, (b, a)) in before.iter().zip(&after).enumerate() {
        let (from, action) = (i / 6, Action::new(i % 6).unwrap());
        let incident = from == l || g.neighbor(from, action) == Some(l);
        assert_eq!(b != a, incident, "from {} by {action}", g.coord(from));
    }
    // observations of untouched cells survive
    for c in env.free_locations().filter(|&c| c != l) {
        assert_eq!(env.state_at(c), changed.state_at(c));
    }
}

#[test]
fn clearing_the_wall_restores_open_dynamics() {
    let env = fully_observed(2, 3, 8);
    let wall: Vec<HexCoord> = env.walls().map(|l| env.graph().coord(l)).collect();
    let cleared = apply_world_change(&env, &WallEdit::remove(wall)).unwrap();
    let open = generate_environment(&EnvConfig::open_arena(), 0).unwrap();
    assert_eq!(step_table(&cleared), step_table(&open));
}

#[test]
fn more_obstacles_never_add_moves() {
    let env = generate_environment(&EnvConfig::open_arena(), 6).unwrap();
    let line = [(-2, 0), (-1, 0), (0, 0), (1, 0)].map(|(q, r)| HexCoord::new(q, r));
    let moves = |e: &Environment| {
        step_table(e).iter().enumerate().filter(|(i, s)| matches!(s, Some(t) if *t != i / 6)).count()
    };
    let mut last = moves(&env);
    for k in 1..=4 {
        let e = apply_world_change(&env, &WallEdit::add(line[..k].iter().copied())).unwrap();
        let m = moves(&e);
        assert!(m <= last, "k={k}");
        last = m;
    }
}

#[test]
fn invalid_edits_are_rejected() {
    let env = generate_environment(&EnvConfig::open_arena(), 6).unwrap();
    let apart = WallEdit::add([HexCoord::new(-2, 0), HexCoord::new(2, 0)]);
    assert!(matches!(apply_world_change(&env, &apart), Err(Error::InvalidWorldChange(_))));
    let off = WallEdit::add([HexCoord::new(5, 0)]);
    assert!(matches!(apply_world_change(&env, &off), Err(Error::InvalidWorldChange(_))));
    let not_wall = WallEdit::remove([HexCoord::ORIGIN]);
    assert!(matches!(apply_world_change(&env, &not_wall), Err(Error::InvalidWorldChange(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn banks_satisfy_their_invariants(env_seed in any::<u64>(), bank_seed in any::<u64>(), radius in 2u32..=3) {
        let env = generate_environment(&EnvConfig::random_wall(radius), env_seed).unwrap();
        let bank = sample_memory_bank(&env, bank_seed);
        prop_assert_eq!(check_bank(&env, &bank), Ok(()));
        prop_assert_eq!(bank.env_id, bank_seed);
        prop_assert_eq!(sample_memory_bank(&env, bank_seed), bank);
    }

    #[test]
    fn query_kinds_match_their_definition(seed in any::<u64>()) {
        let env = generate_environment(&EnvConfig::random_wall(2), seed).unwrap();
        let bank = sample_memory_bank(&env, seed ^ 1);
        if let Ok(q) = sample_query(&env, &bank, &QueryMix::RANDOM_WALL, seed) {
            let in_bank = bank.contains(&q.transition);
            match q.kind {
                QueryKind::Seen => prop_assert!(in_bank),
                QueryKind::Unseen => {
                    prop_assert!(!in_bank);
                    let a = env.location_of(q.transition.source).unwrap();
                    let b = env.location_of(q.transition.end).unwrap();
                    prop_assert!(env.is_observable(a) && env.is_observable(b));
                }
                QueryKind::Unsolvable => prop_assert!(!in_bank),
            }
        }
    }
}
