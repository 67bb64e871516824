//! Acceptance run: one PASS/FAIL line per headline criterion.
//!
//! The desk-scale criteria need a trained model. It is trained once into
//! the cargo target directory and reused while its config hash matches.

mod common;

use std::cell::OnceCell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{bfs_grid_distance, check_bank, check_edge_table, check_environment};
use eswm::agents::{
    adaptive_navigate, explore_episode, find_path, replay, AdaptConfig, ExploreConfig, HeuristicTable, MemoryOracle,
    PlanConfig, TrueDynamics,
};
use eswm::analysis::stats::binomial_upper_p;
use eswm::analysis::{
    density_sweep, distance_correlation, distance_probe, entropy_vs_integration, eval_accuracy, isomap_points,
    kl_shortcut, latent_distance_correlation, Metric, ProbeFeatures, QuerySpec, Sampler,
};
use eswm::episodic::{apply_world_change, sample_memory_bank, Mask, QueryKind, QueryMix, QueryPool, Transition, WallEdit};
use eswm::harness::{load_config_str, load_model, run, Command, ExperimentConfig, RunOptions};
use eswm::hexgrid::{build_hex_graph, generate_environment, EnvConfig, HexCoord, LocId, State, StateEncoding, StateSplit};
use eswm::model::{training_sample, Arch, Eswm, LossConfig, MaskedQuery, ModelConfig, Targets, WorldModel};
use eswm::Eswm32;
use nalgebra::DMatrix;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ENV_SAMPLES: u64 = 10_000;
const MIX_DRAWS: usize = 100_000;
const MIX_TOLERANCE: f64 = 0.01;
const PROPERTY_BUDGET: Duration = Duration::from_secs(5 * 60);

const PLANNER_ENVS: u64 = 50;
const PLANNER_BUDGET: Duration = Duration::from_secs(2 * 60);
const SHORT_HORIZON: usize = 3;

const GRAD_COORDS: usize = 100;
const GRAD_EPS: f64 = 1e-5;
const GRAD_TOLERANCE: f64 = 1e-3;
const PERMUTATION_TOLERANCE: f64 = 1e-4;
const ANCHOR_TOLERANCE: f64 = 1e-6;

const DESK_ITERATIONS: usize = 50_000;
const DESK_BATCH: usize = 128;
const DESK_EVAL_TRIALS: usize = 3000;
const SEEN_END_MIN: f64 = 0.90;
const UNSEEN_CHANCE: f64 = 1.0 / 20.0;
const UNSEEN_FACTOR: f64 = 5.0;
const SIGNIFICANCE: f64 = 0.01;
const IDK_MIN: f64 = 0.5;

const TREND_TRIALS: usize = 2000;
const DENSITY_EXTRAS: [usize; 6] = [0, 2, 4, 8, 16, 64];
const DENSITY_MIN_SIZES: usize = 4;

const LATTICE_CORRELATION_MIN: f64 = 0.95;
const LATENT_R2_MIN: f64 = 0.5;
const PROBE_MIN: f64 = 0.75;
const SHUFFLED_CENTRE: f64 = 0.5;
const SHUFFLED_TOLERANCE: f64 = 0.02;

const EXPLORE_ARENAS: u64 = 20;
const EXPLORE_STEPS: usize = 40;
const ADAPT_INSTANCES: usize = 20;

const ASTAR_ENVS: u64 = 50;
const ASTAR_MIN_LENGTH: usize = 3;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict, String> {
    Ok(Verdict { pass, detail })
}

// ---------------------------------------------------------------------------
// environments and memory banks

fn env_bank_properties() -> Result<Verdict, String> {
    let start = Instant::now();
    let mut problems = Vec::new();
    for (radius, cells, edges) in [(2u32, 19usize, 42usize), (3, 37, 90)] {
        let g = build_hex_graph(radius);
        if (g.len(), g.edges().len(), 2 * g.edges().len()) != (cells, edges, 2 * edges) {
            problems.push(format!("radius {radius}: {} cells, {} edges", g.len(), g.edges().len()));
        }
    }

    let configs = [EnvConfig::random_wall(2), EnvConfig::random_wall(3), EnvConfig::open_arena()];
    let mut checked = 0usize;
    let mut self_loop_edges = 0usize;
    for i in 0..ENV_SAMPLES {
        for cfg in &configs {
            let env = generate_environment(cfg, i).map_err(|e| e.to_string())?;
            let bank = sample_memory_bank(&env, i.wrapping_mul(0x9e37_79b9) ^ 5);
            for r in [check_environment(&env), check_edge_table(&env), check_bank(&env, &bank)] {
                if let Err(e) = r {
                    problems.push(format!("radius {} seed {i}: {e}", cfg.radius));
                }
            }
            let bound = if cfg.radius == 2 { 18 } else { 36 };
            if bank.len() > bound {
                problems.push(format!("radius {} seed {i}: bank of {}", cfg.radius, bank.len()));
            }
            self_loop_edges += (0..env.graph().edges().len())
                .filter_map(|k| env.edge_transition(k).ok())
                .filter(Transition::is_self_loop)
                .count();
            checked += 1;
        }
        if problems.len() > 5 {
            break;
        }
    }

    // kind frequencies over rooms where every kind is available
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut kinds = [0usize; 3];
    let mut seed = 0;
    let mut pool = None;
    for d in 0..MIX_DRAWS {
        if d % 50 == 0 {
            pool = loop {
                let env = generate_environment(&EnvConfig::random_wall(2), 1_000_000 + seed).map_err(|e| e.to_string())?;
                seed += 1;
                let p = QueryPool::new(&env, &sample_memory_bank(&env, seed));
                if !p.seen.is_empty() && !p.unseen.is_empty() && !p.unsolvable.is_empty() {
                    break Some(p);
                }
            };
        }
        let q = pool.as_ref().expect("drawn above").draw(&QueryMix::RANDOM_WALL, &mut rng).map_err(|e| e.to_string())?;
        kinds[match q.kind {
            QueryKind::Unseen => 0,
            QueryKind::Seen => 1,
            QueryKind::Unsolvable => 2,
        }] += 1;
    }
    let freqs: Vec<f64> = kinds.iter().map(|&k| k as f64 / MIX_DRAWS as f64).collect();
    for (f, p) in freqs.iter().zip([0.68, 0.17, 0.15]) {
        if (f - p).abs() > MIX_TOLERANCE {
            problems.push(format!("kind frequency {f:.4} vs {p}"));
        }
    }
    let elapsed = start.elapsed();
    if elapsed > PROPERTY_BUDGET {
        problems.push(format!("took {elapsed:?}"));
    }
    verdict(
        problems.is_empty(),
        format!(
            "{checked} rooms+banks, {self_loop_edges} wall self-loop edges checked, mix ({:.4}, {:.4}, {:.4}), {:.1}s{}",
            freqs[0],
            freqs[1],
            freqs[2],
            elapsed.as_secs_f64(),
            first_problems(&problems)
        ),
    )
}

fn first_problems(p: &[String]) -> String {
    if p.is_empty() {
        String::new()
    } else {
        format!("; {}", p.iter().take(3).cloned().collect::<Vec<_>>().join("; "))
    }
}

// ---------------------------------------------------------------------------
// planner against breadth-first search

fn free_states(env: &eswm::hexgrid::Environment) -> Vec<(LocId, State)> {
    env.free_locations().map(|l| (l, env.state_at(l).expect("free cell"))).collect()
}

fn planner_equivalence() -> Result<Verdict, String> {
    let start = Instant::now();
    let cfg = EnvConfig::random_wall(3);
    let full = PlanConfig::default();
    let short = PlanConfig { t_max: SHORT_HORIZON, ..full };
    let (mut pairs, mut disconnected, mut beyond) = (0usize, 0usize, 0usize);
    let mut problems = Vec::new();
    for i in 0..PLANNER_ENVS {
        let env = generate_environment(&cfg, 500 + i).map_err(|e| e.to_string())?;
        let bank = sample_memory_bank(&env, i);
        let oracle = TrueDynamics::new(&env);
        let cells = free_states(&env);
        for &(x, sx) in &cells {
            for &(y, sy) in &cells {
                let truth = bfs_grid_distance(&env, x, y);
                let plan = find_path(&oracle, &bank, sx, sy, &full, None).actions;
                match (truth, &plan) {
                    (Some(d), Some(p)) if p.len() == d && replay(&env, x, p).ok() == Some(y) => {}
                    (None, None) => disconnected += 1,
                    _ => problems.push(format!("room {i}: {sx}->{sy} bfs {truth:?} plan {:?}", plan.as_ref().map(Vec::len))),
                }
                let clipped = find_path(&oracle, &bank, sx, sy, &short, None).actions;
                match (truth, clipped) {
                    (Some(d), Some(p)) if d <= SHORT_HORIZON && p.len() == d => {}
                    (Some(d), None) if d > SHORT_HORIZON => beyond += 1,
                    (None, None) => {}
                    (t, c) => problems.push(format!("room {i} horizon {SHORT_HORIZON}: bfs {t:?} plan {:?}", c.map(|p| p.len()))),
                }
                pairs += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    if elapsed > PLANNER_BUDGET {
        problems.push(format!("took {elapsed:?}"));
    }
    if disconnected == 0 || beyond == 0 {
        problems.push("no disconnected or beyond-horizon pairs were exercised".into());
    }
    verdict(
        problems.is_empty(),
        format!(
            "{pairs} pairs, {disconnected} disconnected FAIL, {beyond} beyond-horizon FAIL, {:.1}s{}",
            elapsed.as_secs_f64(),
            first_problems(&problems)
        ),
    )
}

// ---------------------------------------------------------------------------
// numerics

fn tiny(arch: Arch, encoding: StateEncoding) -> ModelConfig {
    let six = encoding == StateEncoding::SixBit;
    ModelConfig {
        arch,
        layers: 2,
        embed_dim: 12,
        heads: 2,
        ff_dim: 16,
        dropout: 0.0,
        state_vocab: if six { 64 } else { 19 },
        idk_enabled: !six,
        state_encoding: encoding,
    }
}

type Batch = (Vec<eswm::episodic::MemoryBank>, Vec<MaskedQuery>, Vec<Targets>);

fn batch(env: &EnvConfig, mix: &QueryMix, n: usize, seed: u64) -> Result<Batch, String> {
    let mut out: Batch = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        let (_, bank, q) = training_sample(env, mix, StateSplit::Train, seed * 1000 + i as u64).map_err(|e| e.to_string())?;
        out.0.push(bank);
        out.1.push(MaskedQuery::from(&q));
        out.2.push(Targets::for_query(&q));
    }
    Ok(out)
}

fn worst_gradient_error(cfg: ModelConfig, env: &EnvConfig, mix: &QueryMix) -> Result<f64, String> {
    let model = Eswm::<f64>::new(cfg, 3).map_err(|e| e.to_string())?;
    let (banks, qs, ts) = batch(env, mix, 3, 11)?;
    let s: Vec<(&[Transition], MaskedQuery)> = banks.iter().zip(&qs).map(|(b, &q)| (b.transitions.as_slice(), q)).collect();
    let lc = LossConfig { weights: [0.7, 1.0, 1.3], masked_only: false };
    let (_, grads, _) = model.loss_and_grad::<ChaCha8Rng>(&s, &ts, &lc, None).map_err(|e| e.to_string())?;
    let live: Vec<usize> = (0..grads.numel()).filter(|&i| grads.coord(i) != 0.0).collect();
    if live.len() < GRAD_COORDS {
        return Err(format!("only {} live coordinates", live.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for &i in live.choose_multiple(&mut rng, GRAD_COORDS) {
        let mut m = model.clone();
        let x = m.params().coord(i);
        m.params_mut().set_coord(i, x + GRAD_EPS);
        let up = m.loss(&s, &ts, &lc).map_err(|e| e.to_string())?;
        m.params_mut().set_coord(i, x - GRAD_EPS);
        let down = m.loss(&s, &ts, &lc).map_err(|e| e.to_string())?;
        let numeric = (up - down) / (2.0 * GRAD_EPS);
        let analytic = grads.coord(i);
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7));
    }
    Ok(worst)
}

fn zero_heads(m: &mut Eswm<f64>) {
    for t in m.params_mut().tensors_mut() {
        if t.name.starts_with("head.") && !t.name.starts_with("head.norm") {
            t.value.fill(0.0);
        }
    }
}

fn model_numerics() -> Result<Verdict, String> {
    let rw = EnvConfig::random_wall(2);
    let grad = [
        worst_gradient_error(tiny(Arch::Transformer, StateEncoding::Integer), &rw, &QueryMix::RANDOM_WALL)?,
        worst_gradient_error(tiny(Arch::Transformer, StateEncoding::SixBit), &EnvConfig::open_arena(), &QueryMix::UNSEEN_ONLY)?,
        worst_gradient_error(tiny(Arch::Lstm, StateEncoding::Integer), &rw, &QueryMix::RANDOM_WALL)?,
    ];

    let model = Eswm::<f64>::new(ModelConfig { embed_dim: 32, heads: 4, ff_dim: 64, ..ModelConfig::desk() }, 1).map_err(|e| e.to_string())?;
    let (banks, qs, _) = batch(&rw, &QueryMix::RANDOM_WALL, 20, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut perm: f64 = 0.0;
    for (bank, q) in banks.iter().zip(&qs) {
        let a = model.forward(bank, *q).map_err(|e| e.to_string())?;
        let mut shuffled = bank.clone();
        shuffled.transitions.shuffle(&mut rng);
        let b = model.forward(&shuffled, *q).map_err(|e| e.to_string())?;
        for head in Mask::ALL {
            for (x, y) in a.logits(head).iter().zip(b.logits(head)) {
                perm = perm.max((x - y).abs() / x.abs().max(y.abs()).max(1e-9));
            }
        }
    }

    let mut anchor: f64 = 0.0;
    let mut m = Eswm::<f64>::new(tiny(Arch::Transformer, StateEncoding::SixBit), 0).map_err(|e| e.to_string())?;
    zero_heads(&mut m);
    let (banks, qs, ts) = batch(&EnvConfig::open_arena(), &QueryMix::UNSEEN_ONLY, 4, 1)?;
    for ((bank, q), t) in banks.iter().zip(&qs).zip(&ts) {
        let out = m.forward(bank, *q).map_err(|e| e.to_string())?;
        let (l, _) = m.head_loss(Mask::Action, &out.action_logits, t.action).map_err(|e| e.to_string())?;
        anchor = anchor.max((l - 6f64.ln()).abs());
    }
    let cfg = ModelConfig { state_vocab: 36, ..tiny(Arch::Transformer, StateEncoding::Integer) };
    let mut m = Eswm::<f64>::new(cfg, 0).map_err(|e| e.to_string())?;
    zero_heads(&mut m);
    let (banks, qs, ts) = batch(&EnvConfig::random_wall(3), &QueryMix::RANDOM_WALL, 6, 2)?;
    for ((bank, q), t) in banks.iter().zip(&qs).zip(&ts) {
        let out = m.forward(bank, *q).map_err(|e| e.to_string())?;
        for head in [Mask::Source, Mask::End] {
            let (l, _) = m.head_loss(head, out.logits(head), t.get(head)).map_err(|e| e.to_string())?;
            anchor = anchor.max((l - 37f64.ln()).abs());
        }
    }

    let worst_grad = grad.iter().copied().fold(0.0, f64::max);
    verdict(
        worst_grad <= GRAD_TOLERANCE && perm <= PERMUTATION_TOLERANCE && anchor <= ANCHOR_TOLERANCE,
        format!(
            "gradient rel err (transformer, six-bit, lstm) {:.1e}/{:.1e}/{:.1e}; permutation {perm:.1e}; anchor {anchor:.1e}",
            grad[0], grad[1], grad[2]
        ),
    )
}

// ---------------------------------------------------------------------------
// desk-scale model

fn desk_config() -> ExperimentConfig {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let mut cfg = load_config_str(
        None,
        &[format!("train.iterations={DESK_ITERATIONS}"), format!("train.batch_size={DESK_BATCH}"), "train.log_every=1000".into()],
    )
    .expect("desk config is valid");
    cfg.output_dir = dir.join(format!("desk-{}", &cfg.hash()[..12]));
    cfg
}

fn desk_model(cfg: &ExperimentConfig) -> Result<Eswm32, String> {
    let path = cfg.checkpoint_path();
    if let Ok((model, meta)) = load_model::<f32>(&path, Some(&cfg.model)) {
        if meta.config_hash == cfg.hash() {
            eprintln!("acceptance: reusing {}", path.display());
            return Ok(model);
        }
    }
    eprintln!("acceptance: training the desk model ({DESK_ITERATIONS} iterations) into {}", cfg.output_dir.display());
    run(Command::Train, cfg, RunOptions::default()).map_err(|e| e.to_string())?;
    load_model::<f32>(&path, Some(&cfg.model)).map(|(m, _)| m).map_err(|e| e.to_string())
}

fn desk_sampler(cfg: &ExperimentConfig) -> Sampler {
    Sampler::new(cfg.env.clone(), cfg.analysis.split, cfg.seeds().eval)
}

fn desk_learning(cfg: &ExperimentConfig, model: &Eswm32) -> Result<Verdict, String> {
    let s = desk_sampler(cfg);
    let acc = |kind| eval_accuracy(model, &s, &QuerySpec::only(kind, None), DESK_EVAL_TRIALS).map_err(|e| e.to_string());
    let seen = acc(QueryKind::Seen)?;
    let unseen = acc(QueryKind::Unseen)?;
    let unsolvable = acc(QueryKind::Unsolvable)?;
    let seen_end = seen.task(Mask::End).accuracy;
    let ue = unseen.task(Mask::End);
    let floor = UNSEEN_FACTOR * UNSEEN_CHANCE;
    let p = binomial_upper_p(ue.correct, ue.total, floor);
    let idk = unsolvable.overall.idk_rate();
    verdict(
        seen_end >= SEEN_END_MIN && ue.accuracy >= floor && p < SIGNIFICANCE && idk > IDK_MIN,
        format!(
            "seen end {:.1}%, unseen end {:.1}% ({}/{}, P(X>=k | p={floor}) {p:.1e}), unsolvable IDK {:.1}%",
            100.0 * seen_end,
            100.0 * ue.accuracy,
            ue.correct,
            ue.total,
            100.0 * idk
        ),
    )
}

fn desk_trends(cfg: &ExperimentConfig, model: &Eswm32) -> Result<Verdict, String> {
    let s = desk_sampler(cfg);
    let e = entropy_vs_integration(model, &s, TREND_TRIALS).map_err(|e| e.to_string())?;
    let entropy_ok = e.spearman.is_some_and(|c| c.rho > 0.0 && c.p_value < SIGNIFICANCE);
    let k = kl_shortcut(model, &s, TREND_TRIALS, cfg.analysis.kl_min_length).map_err(|e| e.to_string())?;
    let kl_ok = k.test.is_some_and(|t| t.t > 0.0 && t.p_greater < SIGNIFICANCE);
    let d = density_sweep(model, &s, &DENSITY_EXTRAS, TREND_TRIALS).map_err(|e| e.to_string())?;
    let sizes = d.points.len();
    let density_ok = sizes >= DENSITY_MIN_SIZES && d.spearman.is_some_and(|c| c.rho > 0.0);
    let fmt_corr = |c: Option<eswm::analysis::Correlation>| c.map_or("undefined".to_string(), |c| format!("rho {:.3} p {:.1e}", c.rho, c.p_value));
    verdict(
        entropy_ok && kl_ok && density_ok,
        format!(
            "entropy {} (n {}); KL t {} p {}; density {} over {sizes} sizes ({})",
            fmt_corr(e.spearman),
            e.points.len(),
            k.test.map_or("-".into(), |t| format!("{:.2}", t.t)),
            k.test.map_or("-".into(), |t| format!("{:.1e}", t.p_greater)),
            fmt_corr(d.spearman),
            d.points.iter().map(|p| format!("{:.1}:{:.3}", p.mean_bank_size, p.accuracy)).collect::<Vec<_>>().join(" ")
        ),
    )
}

fn hex_lattice(radius: i32) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for q in -radius..=radius {
        for r in -radius..=radius {
            if common::in_hexagon(q, r, radius) {
                let (x, y) = HexCoord::new(q, r).to_pixel();
                out.push(vec![x, y]);
            }
        }
    }
    out
}

fn lattice_recovery() -> Result<f64, String> {
    let lattice = hex_lattice(5);
    let dim = 50;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let q = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0)).qr().q();
    let lifted: Vec<Vec<f64>> = lattice.iter().map(|p| (0..dim).map(|r| q[(r, 0)] * p[0] + q[(r, 1)] * p[1]).collect()).collect();
    let res = isomap_points(&lifted, 6, Metric::Euclidean).map_err(|e| e.to_string())?;
    let kept: Vec<Vec<f64>> = res.kept().map(|(_, c)| c.to_vec()).collect();
    let truth: Vec<Vec<f64>> = res.kept().map(|(i, _)| lattice[i].clone()).collect();
    distance_correlation(&kept, &truth).ok_or_else(|| "degenerate embedding".to_string())
}

fn latent_map(cfg: &ExperimentConfig, model: &Eswm32) -> Result<Verdict, String> {
    let lattice = lattice_recovery()?;
    let a = &cfg.analysis;
    let layer = cfg.agent.layer.unwrap_or(model.config().default_latent_layer());
    let lat = latent_distance_correlation(model, &desk_sampler(cfg), a.latent_envs, a.latent_pairs_per_env, a.latent_radius, layer)
        .map_err(|e| e.to_string())?;
    let ps = Sampler::new(cfg.env.clone(), a.split, cfg.seeds().probe);
    let probe_layer = eswm::analysis::default_layer(Mask::Action, model.num_layers());
    let pc = eswm::analysis::ProbeConfig { layer: probe_layer, ..a.probe };
    let probe = distance_probe(model, &ps, &pc, ProbeFeatures::Activations).map_err(|e| e.to_string())?;
    let shuffled = distance_probe(model, &ps, &eswm::analysis::ProbeConfig { shuffle_labels: true, ..pc }, ProbeFeatures::Activations)
        .map_err(|e| e.to_string())?;
    verdict(
        lattice >= LATTICE_CORRELATION_MIN
            && lat.r2() >= LATENT_R2_MIN
            && probe.mean >= PROBE_MIN
            && (shuffled.mean - SHUFFLED_CENTRE).abs() <= SHUFFLED_TOLERANCE,
        format!(
            "lattice corr {lattice:.3}; latent R^2 {:.3} ({} pairs, {:.1}% excluded); probe {:.2}% +/- {:.2}; shuffled {:.2}% +/- {:.2}",
            lat.r2(),
            lat.points.len(),
            100.0 * lat.exclusion_rate(),
            100.0 * probe.mean,
            100.0 * probe.sd,
            100.0 * shuffled.mean,
            100.0 * shuffled.sd
        ),
    )
}

// ---------------------------------------------------------------------------
// exploration and adaptation with the memory oracle

fn exploration_adaptation() -> Result<Verdict, String> {
    let mut covered = 0;
    let mut worst_steps = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..EXPLORE_ARENAS {
        let env = generate_environment(&EnvConfig::open_arena(), 900 + i).map_err(|e| e.to_string())?;
        let start = rng.random_range(0..env.graph().len());
        let oracle = MemoryOracle::new(&env);
        let trace = explore_episode(&oracle, &env, start, EXPLORE_STEPS, &ExploreConfig::default(), &PlanConfig::default())
            .map_err(|e| e.to_string())?;
        if let Some(step) = trace.unique_states.iter().position(|&n| n == env.graph().len()) {
            covered += 1;
            worst_steps = worst_steps.max(step);
        }
    }

    let instances = adaptation_instances()?;
    let mut recovered = 0;
    for inst in &instances {
        let oracle = MemoryOracle::new(&inst.before);
        let out = adaptive_navigate(
            &oracle,
            &inst.bank,
            &inst.after,
            inst.start,
            inst.goal,
            &PlanConfig::default(),
            &ExploreConfig::default(),
            &AdaptConfig::default(),
        )
        .map_err(|e| e.to_string())?;
        let arrived = out.locations.last().and_then(|&l| inst.after.state_at(l)) == Some(inst.goal);
        if out.success && arrived && out.mismatches >= 1 {
            recovered += 1;
        }
    }
    verdict(
        covered == EXPLORE_ARENAS && instances.len() == ADAPT_INSTANCES && recovered == ADAPT_INSTANCES,
        format!(
            "full coverage {covered}/{EXPLORE_ARENAS} arenas (slowest {worst_steps} steps); adaptation {recovered}/{}",
            instances.len()
        ),
    )
}

struct AdaptInstance {
    before: eswm::hexgrid::Environment,
    after: eswm::hexgrid::Environment,
    bank: eswm::episodic::MemoryBank,
    start: LocId,
    goal: State,
}

/// One instance per room: a planned route of at least three steps with a
/// new obstacle dropped on one of its interior cells, goal still reachable.
fn adaptation_instances() -> Result<Vec<AdaptInstance>, String> {
    let cfg = EnvConfig { unobs_max_frac: 0.0, ..EnvConfig::random_wall(3) };
    let plan = PlanConfig::default();
    let mut out = Vec::new();
    let mut seed = 0;
    while out.len() < ADAPT_INSTANCES && seed < 200 {
        let env = generate_environment(&cfg, 7000 + seed).map_err(|e| e.to_string())?;
        let bank = sample_memory_bank(&env, seed);
        let oracle = MemoryOracle::new(&env);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        seed += 1;
        let mut cells = free_states(&env);
        cells.shuffle(&mut rng);
        'pairs: for &(x, sx) in &cells {
            for &(y, sy) in &cells {
                let Some(p) = find_path(&oracle, &bank, sx, sy, &plan, None).actions else { continue };
                if p.len() < 3 {
                    continue;
                }
                let cut = rng.random_range(1..p.len());
                let block = replay(&env, x, &p[..cut]).map_err(|e| e.to_string())?;
                let Ok(after) = apply_world_change(&env, &WallEdit::add([env.graph().coord(block)])) else { continue };
                if bfs_grid_distance(&after, x, y).is_none() {
                    continue;
                }
                out.push(AdaptInstance { before: env.clone(), after, bank: bank.clone(), start: x, goal: sy });
                break 'pairs;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// A* against uniform-cost search

fn astar_discipline() -> Result<Verdict, String> {
    let cfg = EnvConfig::random_wall(3);
    let plan = PlanConfig::default();
    let (mut compared, mut fewer, mut corridor) = (0usize, 0usize, 0usize);
    let (mut astar_total, mut dijkstra_total) = (0usize, 0usize);
    let mut problems = Vec::new();
    for i in 0..ASTAR_ENVS {
        let env = generate_environment(&cfg, 3000 + i).map_err(|e| e.to_string())?;
        let bank = sample_memory_bank(&env, i);
        let oracle = TrueDynamics::new(&env);
        let cells = free_states(&env);
        let states: Vec<State> = cells.iter().map(|c| c.1).collect();
        let table = HeuristicTable::ground_truth(&env, &states);
        for &(x, sx) in &cells {
            let dist: Vec<Option<usize>> = cells.iter().map(|c| bfs_grid_distance(&env, x, c.0)).collect();
            for (&(_, sy), &d) in cells.iter().zip(&dist) {
                let Some(d) = d else { continue };
                if d < ASTAR_MIN_LENGTH {
                    continue;
                }
                let a = find_path(&oracle, &bank, sx, sy, &plan, Some(&table));
                let u = find_path(&oracle, &bank, sx, sy, &plan, None);
                let (la, lu) = (a.actions.as_ref().map(Vec::len), u.actions.as_ref().map(Vec::len));
                if la != Some(d) || lu != Some(d) {
                    problems.push(format!("room {i} {sx}->{sy}: A* {la:?}, uniform {lu:?}, bfs {d}"));
                }
                // any search expands at least d states; uniform-cost search
                // expands every state closer than d, so when only the d path
                // states are closer there is nothing left to save
                let closer = dist.iter().filter(|e| e.is_some_and(|e| e < d)).count();
                if closer == d {
                    corridor += 1;
                    if a.expanded > u.expanded {
                        problems.push(format!("room {i} {sx}->{sy}: A* expanded more in a corridor"));
                    }
                    continue;
                }
                compared += 1;
                fewer += usize::from(a.expanded < u.expanded);
                astar_total += a.expanded;
                dijkstra_total += u.expanded;
            }
        }
    }
    verdict(
        problems.is_empty() && compared > 0 && fewer == compared,
        format!(
            "{} pairs of length >= {ASTAR_MIN_LENGTH}, equal cost everywhere={}; strictly fewer expansions {fewer}/{compared} ({astar_total} vs {dijkstra_total}); {corridor} dead-end pairs with no room to improve{}",
            compared + corridor,
            problems.is_empty(),
            first_problems(&problems)
        ),
    )
}

// ---------------------------------------------------------------------------

struct Context {
    desk: ExperimentConfig,
    model: OnceCell<Result<Eswm32, String>>,
}

impl Context {
    fn with_model(&self, f: fn(&ExperimentConfig, &Eswm32) -> Result<Verdict, String>) -> Result<Verdict, String> {
        match self.model.get_or_init(|| desk_model(&self.desk)) {
            Ok(m) => f(&self.desk, m),
            Err(e) => Err(format!("desk model unavailable: {e}")),
        }
    }
}

type Criterion = (&'static str, fn(&Context) -> Result<Verdict, String>);

const CRITERIA: [Criterion; 8] = [
    ("environment/memory-bank property suite", |_| env_bank_properties()),
    ("planner oracle equivalence", |_| planner_equivalence()),
    ("model numerics", |_| model_numerics()),
    ("desk-scale learning", |c| c.with_model(desk_learning)),
    ("desk-scale trend reproduction", |c| c.with_model(desk_trends)),
    ("latent-map checks", |c| c.with_model(latent_map)),
    ("exploration/adaptation with memory oracle", |_| exploration_adaptation()),
    ("A* discipline", |_| astar_discipline()),
];

/// Set to make any failing criterion fail the test run.
const STRICT_VAR: &str = "ESWM_ACCEPTANCE_STRICT";

fn main() -> ExitCode {
    let ctx = Context { desk: desk_config(), model: OnceCell::new() };
    // positional arguments select criteria by substring, as test filters do
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| check(&ctx)))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_message(&p))));
        let (pass, detail) = match result {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, e),
        };
        failed += usize::from(!pass);
        println!("{} {name} [{:.1}s]: {detail}", if pass { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
    }
    if failed == 0 {
        println!("all criteria passed");
        return ExitCode::SUCCESS;
    }
    println!("{failed} criteria failed");
    // failures are reported, not fatal, unless strict mode is requested
    if std::env::var_os(STRICT_VAR).is_some() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| p.downcast_ref::<String>().cloned()).unwrap_or_default()
}
