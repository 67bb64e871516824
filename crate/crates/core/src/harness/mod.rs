//! Reproducible runs: configuration, checkpoints, metrics files and the
//! subcommands behind the `eswm` binary.

pub mod checkpoint;
pub mod config;
pub mod metrics;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::agents::{
    adaptive_navigate, compute_heuristic_table, explore_episode, find_path, greedy_navigate, replay, select_r_latent,
    r_latent_candidates, collect_activations, oracle_explore, HeuristicTable, MemoryOracle, TrueDynamics,
};
use crate::analysis::{
    collect_records, default_layer, density_sweep, distance_probe, entropy_vs_integration, eval_accuracy, isomap_embed,
    kl_shortcut, latent_distance_correlation, ProbeFeatures, QuerySpec, Sampler,
};
use crate::episodic::{apply_world_change, Mask, QueryKind, WallEdit};
use crate::error::{Error, Result};
use crate::hexgrid::{LocId, State};
use crate::model::{train_with_callback, WorldModel};
use crate::seed::derive_seed;
use crate::Eswm32;

pub use checkpoint::{load_checkpoint, load_model, save_checkpoint, save_model, CheckpointMeta, CHECKPOINT_VERSION};
pub use config::{apply_override, load_config, load_config_str, ExperimentConfig, Seeds, OUTPUT_ROOT_VAR};
pub use metrics::{read_metrics, record, write_metrics, MetricValue, MetricsRecord, MetricsWriter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Train,
    Eval,
    Explore,
    Navigate,
    Heuristic,
    Adapt,
    Latent,
    Probe,
    Figures,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Explore => "explore",
            Command::Navigate => "navigate",
            Command::Heuristic => "heuristic",
            Command::Adapt => "adapt",
            Command::Latent => "latent",
            Command::Probe => "probe",
            Command::Figures => "figures",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Replace the trained model with a ground-truth stand-in.
    pub oracle: bool,
    /// Skip the entropy, KL and density analyses in `eval`.
    pub accuracy_only: bool,
}

/// What a command printed and wrote.
#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub report: String,
    pub files: Vec<PathBuf>,
}

/// Stored analysis results and the plot-data file each one feeds.
pub const FIGURES: [(&str, &str); 8] = [
    ("accuracy", "accuracy_by_task"),
    ("entropy", "entropy_vs_integration"),
    ("kl", "kl_shortcut"),
    ("density", "density_sweep"),
    ("train", "training_curve"),
    ("explore", "exploration_coverage"),
    ("navigate", "navigation"),
    ("adapt", "adaptation"),
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub config_hash: String,
    pub checkpoint_hash: Option<String>,
    pub seeds: Option<Seeds>,
    pub versions: BTreeMap<String, String>,
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub runs: BTreeMap<String, ManifestEntry>,
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(config::hex_digest(&fs::read(path)?))
}

fn point(series: &str, x: f64, y: f64) -> MetricsRecord {
    record([("kind", "point".into()), ("series", series.into()), ("x", x.into()), ("y", y.into())])
}

fn summary(series: &str) -> MetricsRecord {
    record([("kind", "summary".into()), ("series", series.into())])
}

/// Plot rows (`x,y,series`) of a result set.
pub fn plot_csv(rows: &[MetricsRecord]) -> String {
    let mut out = String::from("x,y,series\n");
    for r in rows {
        if r.get("kind") != Some(&MetricValue::Text("point".into())) {
            continue;
        }
        let num = |k: &str| r.get(k).and_then(MetricValue::as_f64).unwrap_or(f64::NAN);
        let series = match r.get("series") {
            Some(MetricValue::Text(s)) => s.clone(),
            _ => String::new(),
        };
        let _ = writeln!(out, "{},{},{}", num("x"), num("y"), series);
    }
    out
}

struct Output {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Output {
    fn result(&mut self, name: &str, rows: &[MetricsRecord]) -> Result<()> {
        let data = self.dir.join(format!("{name}.jsonl"));
        write_metrics(&data, rows)?;
        let plot = self.dir.join(format!("{name}.plot.csv"));
        fs::write(&plot, plot_csv(rows))?;
        self.files.push(data);
        self.files.push(plot);
        Ok(())
    }
}

fn load_trained(cfg: &ExperimentConfig) -> Result<(Eswm32, PathBuf)> {
    let path = cfg.checkpoint_path();
    let (model, _) = load_model::<f32>(&path, Some(&cfg.model))?;
    Ok((model, path))
}

/// Runs one subcommand, writing results, the resolved config and the
/// manifest entry into the output directory.
pub fn run(cmd: Command, cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunSummary> {
    let dir = cfg.resolved_output_dir();
    fs::create_dir_all(&dir)?;
    let config_file = dir.join("config.resolved.toml");
    fs::write(&config_file, cfg.to_toml())?;
    let mut out = Output { dir: dir.clone(), files: vec![config_file] };
    let needs_model = !matches!(cmd, Command::Train | Command::Figures) && !opts.oracle;
    let trained = if needs_model { Some(load_trained(cfg)?) } else { None };
    let model = trained.as_ref().map(|(m, _)| m);

    let report = match cmd {
        Command::Train => cmd_train(cfg, &mut out)?,
        Command::Eval => cmd_eval(cfg, opts, model, &mut out)?,
        Command::Explore => cmd_explore(cfg, model, &mut out)?,
        Command::Navigate => cmd_navigate(cfg, model, &mut out)?,
        Command::Heuristic => cmd_heuristic(cfg, model, &mut out)?,
        Command::Adapt => cmd_adapt(cfg, model, &mut out)?,
        Command::Latent => cmd_latent(cfg, model, &mut out)?,
        Command::Probe => cmd_probe(cfg, model, &mut out)?,
        Command::Figures => cmd_figures(&mut out)?,
    };

    let checkpoint = match cmd {
        Command::Train => Some(cfg.checkpoint_path()),
        _ => trained.map(|(_, p)| p),
    };
    let mut entry = ManifestEntry {
        config_hash: cfg.hash(),
        checkpoint_hash: checkpoint.as_deref().map(file_hash).transpose()?,
        seeds: Some(cfg.seeds()),
        versions: BTreeMap::from([
            ("eswm".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("checkpoint_format".to_string(), CHECKPOINT_VERSION.to_string()),
        ]),
        files: BTreeMap::new(),
    };
    for f in &out.files {
        let rel = f.strip_prefix(&dir).unwrap_or(f).display().to_string();
        entry.files.insert(rel, file_hash(f)?);
    }
    let manifest_path = dir.join("manifest.json");
    let mut manifest: Manifest = match fs::read(&manifest_path) {
        Ok(bytes) => serde_json::from_slice(&bytes).unwrap_or_default(),
        Err(_) => Manifest::default(),
    };
    manifest.runs.insert(cmd.name().to_string(), entry);
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).expect("manifest serialises"))?;
    out.files.push(manifest_path);
    Ok(RunSummary { report, files: out.files })
}

fn cmd_train(cfg: &ExperimentConfig, out: &mut Output) -> Result<String> {
    let seeds = cfg.seeds();
    let mut model = Eswm32::new(cfg.model.clone(), seeds.init)?;
    let log_path = out.dir.join("train_metrics.jsonl");
    if log_path.exists() {
        fs::remove_file(&log_path)?;
    }
    let mut writer = MetricsWriter::append(&log_path)?;
    let mut write_err = None;
    let mut rows = Vec::new();
    let outcome = train_with_callback(&mut model, &cfg.train_config(), |m| {
        // wall-clock time is left out so reruns compare equal
        let rec = record([
            ("iteration", m.iteration.into()),
            ("loss", m.loss.into()),
            ("lr", m.lr.into()),
            ("masked_accuracy", m.masked_accuracy.into()),
            ("grad_norm", m.grad_norm.into()),
        ]);
        if let Err(e) = writer.write(&rec) {
            write_err.get_or_insert(e);
        }
        eprintln!("iter {:>6}  loss {:.4}  acc {:.3}  lr {:.2e}  {:.0}s", m.iteration, m.loss, m.masked_accuracy, m.lr, m.elapsed_s);
        rows.push(point("loss", m.iteration as f64, m.loss));
        rows.push(point("masked_accuracy", m.iteration as f64, m.masked_accuracy));
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    out.files.push(log_path);
    out.result("train", &rows)?;
    let ckpt = cfg.checkpoint_path();
    save_model(&ckpt, &model, cfg.train.iterations, seeds.root, &cfg.hash())?;
    Ok(format!("trained {} iterations, final loss {:.4}\ncheckpoint {}\n", cfg.train.iterations, outcome.final_loss, ckpt.display()))
}

fn sampler(cfg: &ExperimentConfig, seed: u64) -> Sampler {
    Sampler::new(cfg.env.clone(), cfg.analysis.split, seed)
}

fn cmd_eval(cfg: &ExperimentConfig, opts: RunOptions, model: Option<&Eswm32>, out: &mut Output) -> Result<String> {
    let model = model.ok_or_else(|| Error::InvalidConfig("eval has no oracle mode".into()))?;
    let s = sampler(cfg, cfg.seeds().eval);
    let a = &cfg.analysis;
    let mut rows = Vec::new();
    let mut report = String::from("kind        source  action  end\n");
    for kind in [QueryKind::Seen, QueryKind::Unseen, QueryKind::Unsolvable] {
        let name = format!("{kind:?}").to_lowercase();
        let r = eval_accuracy(model, &s, &QuerySpec::only(kind, None), a.eval_trials)?;
        let _ = write!(report, "{name:<10}");
        for m in Mask::ALL {
            let t = r.task(m);
            let mut p = point(&name, m.index() as f64, t.accuracy);
            p.insert("ci_low".into(), t.ci_low.into());
            p.insert("ci_high".into(), t.ci_high.into());
            p.insert("idk_rate".into(), t.idk_rate().into());
            p.insert("n".into(), t.total.into());
            rows.push(p);
            let _ = write!(report, "  {:>6.1}%", 100.0 * t.accuracy);
        }
        report.push('\n');
    }
    out.result("accuracy", &rows)?;
    if opts.accuracy_only {
        return Ok(report);
    }

    let e = entropy_vs_integration(model, &s, a.entropy_trials)?;
    let mut rows: Vec<MetricsRecord> = e.points.iter().map(|&(l, h)| point("entropy", l as f64, h)).collect();
    let mut sm = summary("spearman");
    if let Some(c) = e.spearman {
        sm.insert("rho".into(), c.rho.into());
        sm.insert("p_value".into(), c.p_value.into());
        let _ = writeln!(report, "entropy vs integration: rho {:.3} (p {:.2e}, n {})", c.rho, c.p_value, c.n);
    }
    rows.push(sm);
    out.result("entropy", &rows)?;

    let k = kl_shortcut(model, &s, a.kl_trials, a.kl_min_length)?;
    let mut rows: Vec<MetricsRecord> = k.informative.iter().enumerate().map(|(i, &v)| point("informative", i as f64, v)).collect();
    rows.extend(k.non_informative.iter().enumerate().map(|(i, &v)| point("non_informative", i as f64, v)));
    let mut sm = summary("t_test");
    sm.insert("skipped".into(), k.skipped.into());
    if let Some(t) = k.test {
        sm.insert("t".into(), t.t.into());
        sm.insert("p_greater".into(), t.p_greater.into());
        let _ = writeln!(report, "KL shortcut: t {:.2} (one-sided p {:.2e})", t.t, t.p_greater);
    }
    rows.push(sm);
    out.result("kl", &rows)?;

    let d = density_sweep(model, &s, &a.density_extras, a.density_trials)?;
    let mut rows: Vec<MetricsRecord> = d.points.iter().map(|p| point("accuracy", p.mean_bank_size, p.accuracy)).collect();
    let mut sm = summary("spearman");
    if let Some(c) = d.spearman {
        sm.insert("rho".into(), c.rho.into());
        sm.insert("p_value".into(), c.p_value.into());
        let _ = writeln!(report, "density sweep: rho {:.3}", c.rho);
    }
    rows.push(sm);
    out.result("density", &rows)?;
    Ok(report)
}

/// Runs `f` with either the trained model or the oracle built for `env`.
fn with_model<R>(
    model: Option<&Eswm32>,
    oracle: &dyn WorldModel,
    f: impl FnOnce(&dyn WorldModel) -> R,
) -> R {
    match model {
        Some(m) => f(m),
        None => f(oracle),
    }
}

fn cmd_explore(cfg: &ExperimentConfig, model: Option<&Eswm32>, out: &mut Output) -> Result<String> {
    let s = sampler(cfg, cfg.seeds().agent);
    let ag = &cfg.agent;
    let mut coverage = vec![0.0; ag.explore_steps + 1];
    let mut oracle_coverage = vec![0.0; ag.explore_steps + 1];
    let (mut full, mut saturated) = (0usize, 0usize);
    let (mut unique, mut oracle_unique) = (0usize, 0usize);
    for i in 0..ag.envs as u64 {
        let (env, _) = s.room(i)?;
        let observable: Vec<LocId> = env.observable_locations().collect();
        let start = *observable.choose(&mut s.rng("explore-start", i)).expect("observable cells");
        let oracle = MemoryOracle::new(&env);
        let trace = with_model(model, &oracle, |m| explore_episode(m, &env, start, ag.explore_steps, &ag.explore, &ag.plan))?;
        let tour = oracle_explore(&env, start, ag.explore_steps)?;
        let total = observable.len() as f64;
        for (curve, tr) in [(&mut coverage, &trace), (&mut oracle_coverage, &tour)] {
            for (t, c) in curve.iter_mut().enumerate() {
                let seen = tr.unique_states.get(t).or(tr.unique_states.last()).copied().unwrap_or(0);
                *c += seen as f64 / total / ag.envs as f64;
            }
        }
        unique += trace.unique_states.last().copied().unwrap_or(0);
        oracle_unique += tour.unique_states.last().copied().unwrap_or(0);
        full += usize::from(trace.unique_states.last().copied().unwrap_or(0) == observable.len());
        saturated += usize::from(trace.saturated);
    }
    let mut rows: Vec<MetricsRecord> = coverage.iter().enumerate().map(|(t, &c)| point("coverage", t as f64, c)).collect();
    rows.extend(oracle_coverage.iter().enumerate().map(|(t, &c)| point("oracle_coverage", t as f64, c)));
    let relative = unique as f64 / oracle_unique.max(1) as f64;
    let mut sm = summary("coverage");
    sm.insert("full_coverage_rate".into(), (full as f64 / ag.envs as f64).into());
    sm.insert("saturated_rate".into(), (saturated as f64 / ag.envs as f64).into());
    sm.insert("relative_to_oracle".into(), relative.into());
    rows.push(sm);
    out.result("explore", &rows)?;
    Ok(format!(
        "mean coverage after {} steps: {:.1}% (nearest-neighbour tour oracle: {:.1}%)\nunique states relative to oracle: {:.2}%\nfull coverage: {}/{}\n",
        ag.explore_steps,
        100.0 * coverage.last().copied().unwrap_or(0.0),
        100.0 * oracle_coverage.last().copied().unwrap_or(0.0),
        100.0 * relative,
        full,
        ag.envs
    ))
}

/// Start location and goal state pairs connected under the true dynamics.
fn nav_pairs(env: &crate::hexgrid::Environment, bank: &crate::episodic::MemoryBank, n: usize, seed: u64) -> Vec<(LocId, State, usize)> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let states = bank.unique_states();
    let mut out = Vec::new();
    for _ in 0..n * 20 {
        if out.len() == n || states.len() < 2 {
            break;
        }
        let pick: Vec<State> = states.choose_multiple(&mut rng, 2).copied().collect();
        let (Some(x), Some(y)) = (env.location_of(pick[0]), env.location_of(pick[1])) else { continue };
        if let Some(d) = env.distances_from(x)[y] {
            out.push((x, pick[1], d));
        }
    }
    out
}

fn cmd_navigate(cfg: &ExperimentConfig, model: Option<&Eswm32>, out: &mut Output) -> Result<String> {
    let s = sampler(cfg, cfg.seeds().agent);
    let ag = &cfg.agent;
    let mut by_len: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let (mut ok, mut total, mut opt) = (0usize, 0usize, 0.0);
    for i in 0..ag.envs as u64 {
        let (env, bank) = s.room(i)?;
        let oracle = TrueDynamics::new(&env);
        for (start, goal, d) in nav_pairs(&env, &bank, ag.pairs_per_env, derive_seed(s.seed, "navigate-pairs", i)) {
            let sx = env.state_at(start).expect("observable start");
            let plan = with_model(model, &oracle, |m| find_path(m, &bank, sx, goal, &ag.plan, None));
            let reached = plan
                .actions
                .as_ref()
                .is_some_and(|p| replay(&env, start, p).ok() == env.location_of(goal));
            let e = by_len.entry(d).or_default();
            e.1 += 1;
            total += 1;
            if reached {
                e.0 += 1;
                ok += 1;
                let len = plan.actions.as_ref().map_or(0, Vec::len);
                opt += if len == 0 { 1.0 } else { d as f64 / len as f64 };
            }
        }
    }
    let mut rows: Vec<MetricsRecord> =
        by_len.iter().map(|(&d, &(k, n))| point("success_rate", d as f64, k as f64 / n as f64)).collect();
    let mut sm = summary("navigation");
    let rate = ok as f64 / total.max(1) as f64;
    let optimality = if ok == 0 { 0.0 } else { opt / ok as f64 };
    sm.insert("success_rate".into(), rate.into());
    sm.insert("optimality".into(), optimality.into());
    sm.insert("pairs".into(), total.into());
    rows.push(sm);
    out.result("navigate", &rows)?;
    Ok(format!("navigation: {ok}/{total} reached ({:.1}%), optimality {:.3}\n", 100.0 * rate, optimality))
}

fn cmd_heuristic(cfg: &ExperimentConfig, model: Option<&Eswm32>, out: &mut Output) -> Result<String> {
    let s = sampler(cfg, cfg.seeds().agent);
    let ag = &cfg.agent;
    let mut rows = Vec::new();
    let (mut dijkstra_exp, mut astar_exp, mut equal, mut greedy_ok, mut total) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for i in 0..ag.envs as u64 {
        let (env, bank) = s.room(i)?;
        let pairs = nav_pairs(&env, &bank, ag.pairs_per_env, derive_seed(s.seed, "heuristic-pairs", i));
        let state_pairs: Vec<(State, State)> =
            pairs.iter().map(|&(x, g, _)| (env.state_at(x).expect("observable"), g)).collect();
        let oracle = TrueDynamics::new(&env);
        let table: HeuristicTable = match model {
            None => HeuristicTable::ground_truth(&env, &bank.unique_states()),
            Some(m) => {
                let layer = ag.layer.unwrap_or(m.config().default_latent_layer());
                let (_, acts) = collect_activations(m, &bank, layer)?;
                let candidates = r_latent_candidates(&acts, ag.radius_candidates);
                let (r, _) = select_r_latent(m, &bank, &candidates, &state_pairs, layer, ag.greedy_cap)?;
                compute_heuristic_table(m, &bank, r, layer)?
            }
        };
        with_model(model, &oracle, |m| {
            for &(sx, g) in &state_pairs {
                let plain = find_path(m, &bank, sx, g, &ag.plan, None);
                let guided = find_path(m, &bank, sx, g, &ag.plan, Some(&table));
                let greedy = greedy_navigate(m, &bank, &table, sx, g, ag.greedy_cap);
                total += 1;
                dijkstra_exp += plain.expanded;
                astar_exp += guided.expanded;
                equal += usize::from(plain.actions.as_ref().map(Vec::len) == guided.actions.as_ref().map(Vec::len));
                greedy_ok += usize::from(greedy.success);
                let len = plain.actions.as_ref().map_or(f64::NAN, |p| p.len() as f64);
                rows.push(point("dijkstra_expanded", len, plain.expanded as f64));
                rows.push(point("astar_expanded", len, guided.expanded as f64));
            }
        });
    }
    let mut sm = summary("heuristic");
    let saving = 1.0 - astar_exp as f64 / dijkstra_exp.max(1) as f64;
    sm.insert("expansion_saving".into(), saving.into());
    sm.insert("equal_length_rate".into(), (equal as f64 / total.max(1) as f64).into());
    sm.insert("greedy_success_rate".into(), (greedy_ok as f64 / total.max(1) as f64).into());
    rows.push(sm);
    out.result("heuristic", &rows)?;
    Ok(format!(
        "A* expanded {:.1}% fewer nodes than Dijkstra; equal-length plans {equal}/{total}; greedy success {greedy_ok}/{total}\n",
        100.0 * saving
    ))
}

fn cmd_adapt(cfg: &ExperimentConfig, model: Option<&Eswm32>, out: &mut Output) -> Result<String> {
    let s = sampler(cfg, cfg.seeds().agent);
    let ag = &cfg.agent;
    let mut rows = Vec::new();
    let (mut ok, mut total) = (0usize, 0usize);
    for i in 0..ag.envs as u64 {
        let (env, bank) = s.room(i)?;
        let oracle = MemoryOracle::new(&env);
        let mut pairs = nav_pairs(&env, &bank, ag.pairs_per_env, derive_seed(s.seed, "adapt-pairs", i));
        pairs.shuffle(&mut s.rng("adapt-order", i));
        // first pair whose shortest route can be blocked without disconnecting it
        let instance = pairs.into_iter().find_map(|(start, goal, d)| {
            if d < 3 {
                return None;
            }
            let sx = env.state_at(start)?;
            let plan = find_path(&TrueDynamics::new(&env), &bank, sx, goal, &ag.plan, None).actions?;
            let block = replay(&env, start, &plan[..plan.len() / 2]).ok()?;
            let changed = apply_world_change(&env, &WallEdit::add([env.graph().coord(block)])).ok()?;
            changed.distances_from(start)[changed.location_of(goal)?]?;
            Some((start, goal, changed))
        });
        let Some((start, goal, changed)) = instance else { continue };
        let res = with_model(model, &oracle, |m| {
            adaptive_navigate(m, &bank, &changed, start, goal, &ag.plan, &ag.explore, &ag.adapt)
        })?;
        total += 1;
        ok += usize::from(res.success);
        let mut p = point("success", total as f64, f64::from(u8::from(res.success)));
        p.insert("steps".into(), res.steps.into());
        p.insert("replans".into(), res.replans.into());
        p.insert("mismatches".into(), res.mismatches.into());
        rows.push(p);
    }
    let mut sm = summary("adaptation");
    sm.insert("success_rate".into(), (ok as f64 / total.max(1) as f64).into());
    sm.insert("instances".into(), total.into());
    rows.push(sm);
    out.result("adapt", &rows)?;
    Ok(format!("adaptation: {ok}/{total} reached the goal after the change\n"))
}

fn cmd_latent(cfg: &ExperimentConfig, model: Option<&Eswm32>, out: &mut Output) -> Result<String> {
    let model = model.ok_or_else(|| Error::InvalidConfig("latent has no oracle mode".into()))?;
    let a = &cfg.analysis;
    let s = sampler(cfg, cfg.seeds().eval);
    let mut report = String::new();
    for task in Mask::ALL {
        let layer = default_layer(task, model.num_layers());
        let recs = collect_records(model, &s, task, a.isomap_banks, a.isomap_per_bank, layer)?;
        let emb = isomap_embed(&recs, a.isomap_neighbors)?;
        let name = format!("{task:?}").to_lowercase();
        let rows: Vec<MetricsRecord> = emb
            .kept()
            .map(|(i, c)| {
                record([
                    ("x", c[0].into()),
                    ("y", c[1].into()),
                    ("z", c[2].into()),
                    ("anchor_q", (recs[i].anchor.q as f64).into()),
                    ("anchor_r", (recs[i].anchor.r as f64).into()),
                    ("layer", layer.into()),
                ])
            })
            .collect();
        out.result(&format!("isomap_{name}"), &rows)?;
        let _ = writeln!(
            report,
            "isomap {name}: {} points, {} dropped, stress {:.3}",
            recs.len() - emb.dropped,
            emb.dropped,
            emb.stress
        );
    }
    let layer = cfg.agent.layer.unwrap_or(model.config().default_latent_layer());
    let lat = latent_distance_correlation(model, &s, a.latent_envs, a.latent_pairs_per_env, a.latent_radius, layer)?;
    let mut rows: Vec<MetricsRecord> = lat.points.iter().map(|&(l, d)| point("path_length", l, d)).collect();
    let mut sm = summary("latent_fit");
    sm.insert("r2".into(), lat.r2().into());
    sm.insert("exclusion_rate".into(), lat.exclusion_rate().into());
    rows.push(sm);
    out.result("latent_distance", &rows)?;
    let _ = writeln!(report, "latent/physical R^2 {:.3} (excluded {:.1}%)", lat.r2(), 100.0 * lat.exclusion_rate());
    Ok(report)
}

fn cmd_probe(cfg: &ExperimentConfig, model: Option<&Eswm32>, out: &mut Output) -> Result<String> {
    let s = sampler(cfg, cfg.seeds().probe);
    let base = cfg.analysis.probe;
    let mut rows = Vec::new();
    let mut report = String::new();
    let mut runs: Vec<(&str, crate::analysis::ProbeConfig, ProbeFeatures)> =
        vec![("ground_truth", base, ProbeFeatures::GroundTruth)];
    if let Some(m) = model {
        let layer = default_layer(Mask::Action, m.num_layers());
        runs.push(("activations", crate::analysis::ProbeConfig { layer, ..base }, ProbeFeatures::Activations));
        runs.push(("shuffled", crate::analysis::ProbeConfig { layer, shuffle_labels: true, ..base }, ProbeFeatures::Activations));
    }
    for (name, pc, features) in runs {
        let r = match model {
            Some(m) => distance_probe(m, &s, &pc, features)?,
            None => distance_probe(&crate::agents::TrueDynamics::new(&s.room(0)?.0), &s, &pc, features)?,
        };
        for (i, acc) in r.accuracies.iter().enumerate() {
            rows.push(point(name, i as f64, *acc));
        }
        let mut sm = summary(name);
        sm.insert("mean".into(), r.mean.into());
        sm.insert("sd".into(), r.sd.into());
        rows.push(sm);
        let _ = writeln!(report, "probe {name}: {:.2}% +/- {:.2}", 100.0 * r.mean, 100.0 * r.sd);
    }
    out.result("probe", &rows)?;
    Ok(report)
}

fn cmd_figures(out: &mut Output) -> Result<String> {
    let fig_dir = out.dir.join("figures");
    fs::create_dir_all(&fig_dir)?;
    let mut report = String::new();
    for (result, figure) in FIGURES {
        let src = out.dir.join(format!("{result}.jsonl"));
        if !src.exists() {
            let _ = writeln!(report, "{figure}: no stored {result} results, skipped");
            continue;
        }
        let rows = read_metrics(&src)?;
        let dst = fig_dir.join(format!("{figure}.csv"));
        fs::write(&dst, plot_csv(&rows))?;
        let _ = writeln!(report, "{figure}: {} rows from {}", rows.len(), src.display());
        out.files.push(dst);
    }
    Ok(report)
}

/// Process exit code for an error: 2 for configuration problems, 3 for a
/// missing checkpoint, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) => 2,
        Error::MissingCheckpoint(_) => 3,
        _ => 1,
    }
}
