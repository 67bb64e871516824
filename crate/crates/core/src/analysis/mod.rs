//! Evaluation and latent-space analyses of a world model.

pub mod isomap;
pub mod stats;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{collect_activations, HeuristicTable, r_latent_candidates, select_among_tables, table_from_activations};
use crate::episodic::{integration_path_length, sample_memory_bank, Mask, MemoryBank, Query, QueryKind, QueryMix, QueryPool, Transition};
use crate::error::{Error, Result};
use crate::hexgrid::{generate_environment_split, EnvConfig, Environment, HexCoord, State, StateSplit};
use crate::model::{Distribution, MaskedQuery, Prediction, Targets, WorldModel};
use crate::seed::derive_seed;

pub use isomap::{classical_mds, distance_correlation, isomap_embed, isomap_points, EmbeddingResult, Metric, DEFAULT_NEIGHBORS};
pub use stats::{Correlation, LinearFit, TTest};

/// Source of fresh evaluation rooms; trial `i` always yields the same room.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampler {
    pub env: EnvConfig,
    pub split: StateSplit,
    pub seed: u64,
}

impl Sampler {
    pub fn new(env: EnvConfig, split: StateSplit, seed: u64) -> Self {
        Sampler { env, split, seed }
    }

    pub fn room(&self, i: u64) -> Result<(Environment, MemoryBank)> {
        let env = generate_environment_split(&self.env, self.split, derive_seed(self.seed, "analysis-env", i))?;
        let bank = sample_memory_bank(&env, derive_seed(self.seed, "analysis-bank", i));
        Ok((env, bank))
    }

    pub fn rng(&self, stream: &str, i: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.seed, stream, i))
    }
}

/// Which queries an evaluation draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub mix: QueryMix,
    /// Restrict to one kind; rooms without that kind are skipped.
    pub kind: Option<QueryKind>,
    /// Force the masked component instead of drawing it uniformly.
    pub mask: Option<Mask>,
}

impl QuerySpec {
    pub fn mixed(mix: QueryMix) -> Self {
        QuerySpec { mix, kind: None, mask: None }
    }

    pub fn only(kind: QueryKind, mask: Option<Mask>) -> Self {
        QuerySpec { mix: QueryMix::RANDOM_WALL, kind: Some(kind), mask }
    }
}

#[derive(Debug, Clone)]
pub struct Trial {
    pub env: Environment,
    pub bank: MemoryBank,
    pub query: Query,
}

fn draw_query<R: Rng>(pool: &QueryPool, spec: &QuerySpec, rng: &mut R) -> Option<Query> {
    let mut q = match spec.kind {
        Some(kind) => {
            let transition = *pool.of_kind(kind).choose(rng)?;
            Query { transition, mask: *Mask::ALL.choose(rng).expect("three masks"), kind }
        }
        None => pool.draw(&spec.mix, rng).ok()?,
    };
    if let Some(m) = spec.mask {
        q.mask = m;
    }
    Some(q)
}

/// `n` trials with fresh rooms, skipping rooms that cannot supply the query.
pub fn draw_trials(sampler: &Sampler, spec: &QuerySpec, n: usize) -> Result<Vec<Trial>> {
    let mut out = Vec::with_capacity(n);
    let mut i = 0u64;
    while out.len() < n {
        if i as usize > 50 * n + 100 {
            return Err(Error::Analysis(format!("only {} of {n} trials could be drawn", out.len())));
        }
        let (env, bank) = sampler.room(i)?;
        let mut rng = sampler.rng("analysis-query", i);
        i += 1;
        let pool = QueryPool::new(&env, &bank);
        if let Some(query) = draw_query(&pool, spec, &mut rng) {
            out.push(Trial { env, bank, query });
        }
    }
    Ok(out)
}

fn predict_trials<M: WorldModel + ?Sized>(model: &M, trials: &[Trial]) -> Vec<Prediction> {
    let items: Vec<(&MemoryBank, MaskedQuery)> = trials.iter().map(|t| (&t.bank, MaskedQuery::from(&t.query))).collect();
    model.predict_many(&items)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub correct: usize,
    pub total: usize,
    pub idk: usize,
    pub accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl TaskAccuracy {
    fn finish(mut self) -> Self {
        self.accuracy = if self.total == 0 { 0.0 } else { self.correct as f64 / self.total as f64 };
        (self.ci_low, self.ci_high) = stats::wilson_interval(self.correct, self.total, 0.95);
        self
    }

    pub fn idk_rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.idk as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    /// Indexed by mask: source, action, end.
    pub tasks: [TaskAccuracy; 3],
    pub overall: TaskAccuracy,
}

impl AccuracyReport {
    pub fn task(&self, m: Mask) -> &TaskAccuracy {
        &self.tasks[m.index()]
    }
}

/// Fraction of correct masked-head decisions per task, with Wilson 95%
/// intervals. Unsolvable queries count as correct only when answered IDK.
pub fn eval_accuracy<M: WorldModel + ?Sized>(model: &M, sampler: &Sampler, spec: &QuerySpec, n: usize) -> Result<AccuracyReport> {
    if n == 0 {
        return Err(Error::Analysis("evaluation needs at least one trial".into()));
    }
    let trials = draw_trials(sampler, spec, n)?;
    let preds = predict_trials(model, &trials);
    let mut tasks = [TaskAccuracy::default(); 3];
    let mut overall = TaskAccuracy::default();
    for (t, p) in trials.iter().zip(&preds) {
        let label = Targets::for_query(&t.query).get(t.query.mask);
        let ok = p.matches(label);
        for acc in [&mut tasks[t.query.mask.index()], &mut overall] {
            acc.total += 1;
            acc.correct += usize::from(ok);
            acc.idk += usize::from(p.is_idk());
        }
    }
    Ok(AccuracyReport { tasks: tasks.map(TaskAccuracy::finish), overall: overall.finish() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrationReport {
    /// (integration path length, masked-head entropy) per trial.
    pub points: Vec<(usize, f64)>,
    /// `None` when entropy or length is constant.
    pub spearman: Option<Correlation>,
}

/// Entropy of the masked head against the number of memories that must be
/// chained to answer, over solvable queries.
pub fn entropy_vs_integration<M: WorldModel + ?Sized>(model: &M, sampler: &Sampler, n: usize) -> Result<IntegrationReport> {
    let total = QueryMix::RANDOM_WALL.unseen + QueryMix::RANDOM_WALL.seen;
    let mix = QueryMix { unseen: QueryMix::RANDOM_WALL.unseen / total, seen: QueryMix::RANDOM_WALL.seen / total, unsolvable: 0.0 };
    let trials = draw_trials(sampler, &QuerySpec::mixed(mix), n)?;
    let preds = predict_trials(model, &trials);
    let points: Vec<(usize, f64)> = trials
        .iter()
        .zip(&preds)
        .filter_map(|(t, p)| integration_path_length(&t.bank, &t.query).map(|l| (l, p.distribution.entropy())))
        .collect();
    let (x, y): (Vec<f64>, Vec<f64>) = points.iter().map(|&(l, h)| (l as f64, h)).unzip();
    Ok(IntegrationReport { spearman: stats::spearman(&x, &y), points })
}

/// KL(p || q) between two head distributions of the same shape.
pub fn kl_divergence(p: &Distribution, q: &Distribution) -> f64 {
    const FLOOR: f64 = 1e-12;
    let term = |a: f64, b: f64| if a > 0.0 { a * (a / b.max(FLOOR)).ln() } else { 0.0 };
    match (p, q) {
        (Distribution::Categorical { probs: a, .. }, Distribution::Categorical { probs: b, .. }) => {
            a.iter().zip(b).map(|(&x, &y)| term(x, y)).sum::<f64>().max(0.0)
        }
        (Distribution::Bits(a), Distribution::Bits(b)) => a
            .iter()
            .zip(b)
            .map(|(&x, &y)| term(x, y) + term(1.0 - x, 1.0 - y))
            .sum::<f64>()
            .max(0.0),
        _ => f64::NAN,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    pub informative: Vec<f64>,
    pub non_informative: Vec<f64>,
    pub test: Option<TTest>,
    pub skipped: usize,
}

/// Shift of the masked-head distribution when one memory is added: a
/// shortcut that shortens the integration path versus one that leaves it
/// unchanged. Each trial contributes to both arms.
pub fn kl_shortcut<M: WorldModel + ?Sized>(model: &M, sampler: &Sampler, n: usize, min_length: usize) -> Result<KlReport> {
    let mut report = KlReport { informative: Vec::new(), non_informative: Vec::new(), test: None, skipped: 0 };
    let mut i = 0u64;
    while report.informative.len() < n {
        if i as usize > 50 * n + 100 {
            return Err(Error::Analysis(format!("only {} of {n} shortcut trials found", report.informative.len())));
        }
        let (env, bank) = sampler.room(i)?;
        let mut rng = sampler.rng("analysis-kl", i);
        i += 1;
        let pool = QueryPool::new(&env, &bank);
        let mut candidates: Vec<Query> = pool
            .unseen
            .iter()
            .map(|&t| Query { transition: t, mask: Mask::End, kind: QueryKind::Unseen })
            .filter(|q| integration_path_length(&bank, q).is_some_and(|l| l >= min_length))
            .collect();
        candidates.shuffle(&mut rng);
        let Some(mut query) = candidates.into_iter().next() else {
            report.skipped += 1;
            continue;
        };
        query.mask = *Mask::ALL.choose(&mut rng).expect("three masks");
        let base = integration_path_length(&bank, &query).expect("filtered");
        let mut shortcut = Vec::new();
        let mut neutral = Vec::new();
        for &t in pool.unseen.iter().filter(|&&t| t != query.transition) {
            let mut b = bank.clone();
            b.transitions.push(t);
            match integration_path_length(&b, &query) {
                Some(l) if l < base => shortcut.push(b),
                Some(l) if l == base => neutral.push(b),
                _ => {}
            }
        }
        let Some(informative) = shortcut.choose(&mut rng).cloned() else {
            report.skipped += 1;
            continue;
        };
        let neutral = neutral.choose(&mut rng).cloned().unwrap_or_else(|| {
            // duplicate memory: the path cannot change
            let mut b = bank.clone();
            let dup = *bank.transitions.choose(&mut rng).expect("non-empty bank");
            b.transitions.push(dup);
            b
        });
        let q = MaskedQuery::from(&query);
        let preds = model.predict_many(&[(&bank, q), (&informative, q), (&neutral, q)]);
        report.informative.push(kl_divergence(&preds[0].distribution, &preds[1].distribution));
        report.non_informative.push(kl_divergence(&preds[0].distribution, &preds[2].distribution));
    }
    report.test = stats::two_sample_t(&report.informative, &report.non_informative);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityPoint {
    pub extra: usize,
    pub mean_bank_size: f64,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub points: Vec<DensityPoint>,
    pub spearman: Option<Correlation>,
}

/// Accuracy on queries that were unseen in the minimal bank as extra true
/// memories are added. The same rooms and queries are used at every size,
/// and larger banks extend smaller ones.
pub fn density_sweep<M: WorldModel + ?Sized>(model: &M, sampler: &Sampler, extras: &[usize], n: usize) -> Result<DensityReport> {
    let trials = draw_trials(sampler, &QuerySpec::only(QueryKind::Unseen, None), n)?;
    let orders: Vec<Vec<Transition>> = trials
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut extra = QueryPool::new(&t.env, &t.bank).unseen;
            extra.shuffle(&mut sampler.rng("analysis-density", i as u64));
            extra
        })
        .collect();
    let mut points = Vec::with_capacity(extras.len());
    for &k in extras {
        let banks: Vec<MemoryBank> = trials
            .iter()
            .zip(&orders)
            .map(|(t, order)| {
                let mut b = t.bank.clone();
                b.transitions.extend(order.iter().take(k));
                b
            })
            .collect();
        let items: Vec<(&MemoryBank, MaskedQuery)> =
            banks.iter().zip(&trials).map(|(b, t)| (b, MaskedQuery::from(&t.query))).collect();
        let preds = model.predict_many(&items);
        let correct = trials
            .iter()
            .zip(&preds)
            .filter(|(t, p)| p.matches(Targets::for_query(&t.query).get(t.query.mask)))
            .count();
        points.push(DensityPoint {
            extra: k,
            mean_bank_size: banks.iter().map(|b| b.len() as f64).sum::<f64>() / banks.len() as f64,
            correct,
            total: trials.len(),
            accuracy: correct as f64 / trials.len() as f64,
        });
    }
    let (x, y): (Vec<f64>, Vec<f64>) = points.iter().map(|p| (p.mean_bank_size, p.accuracy)).unzip();
    Ok(DensityReport { spearman: stats::spearman(&x, &y), points })
}

/// Query-token activation with the location it is anchored to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub vector: Vec<f64>,
    pub layer: usize,
    pub anchor: HexCoord,
    pub task: Mask,
}

/// Anchor of a query: the source location, or the end location when the
/// source is the masked component.
pub fn anchor_location(env: &Environment, q: &Query) -> Option<HexCoord> {
    let s = if q.mask == Mask::Source { q.transition.end } else { q.transition.source };
    env.location_of(s).map(|l| env.graph().coord(l))
}

/// Default layer for a task in an `layers`-deep model: the first layer for
/// action queries, the last for state queries.
pub fn default_layer(task: Mask, layers: usize) -> usize {
    match task {
        Mask::Action => 0,
        _ => layers.saturating_sub(1),
    }
}

/// Activations of seen and unseen queries for `task` over `banks` rooms,
/// `per_bank` queries each.
pub fn collect_records<M: WorldModel + ?Sized>(
    model: &M,
    sampler: &Sampler,
    task: Mask,
    banks: usize,
    per_bank: usize,
    layer: usize,
) -> Result<Vec<ActivationRecord>> {
    let mut items_owned = Vec::new();
    for i in 0..banks as u64 {
        let (env, bank) = sampler.room(i)?;
        let pool = QueryPool::new(&env, &bank);
        let mut candidates: Vec<Transition> = pool.seen.iter().chain(&pool.unseen).copied().collect();
        candidates.shuffle(&mut sampler.rng("analysis-records", i));
        for t in candidates.into_iter().take(per_bank) {
            let q = Query { transition: t, mask: task, kind: QueryKind::Seen };
            if let Some(anchor) = anchor_location(&env, &q) {
                items_owned.push((bank.clone(), MaskedQuery::from(&q), anchor));
            }
        }
    }
    let items: Vec<(&MemoryBank, MaskedQuery)> = items_owned.iter().map(|(b, q, _)| (b, *q)).collect();
    let acts = model
        .activations_many(&items, layer)
        .ok_or_else(|| Error::Analysis(format!("model exposes no activations at layer {layer}")))?;
    Ok(acts
        .into_iter()
        .zip(&items_owned)
        .map(|(vector, (_, _, anchor))| ActivationRecord { vector, layer, anchor: *anchor, task })
        .collect())
}

/// How the latent radius is chosen per room.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusChoice {
    Fixed(f64),
    /// Greedy-navigation selection over the percentile grid of this many
    /// candidates.
    Auto(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentReport {
    pub fit: Option<LinearFit>,
    /// (latent geodesic, true path length) for every retained pair.
    pub points: Vec<(f64, f64)>,
    pub excluded: usize,
    pub radii: Vec<f64>,
}

impl LatentReport {
    pub fn r2(&self) -> f64 {
        self.fit.map_or(0.0, |f| f.r2)
    }

    pub fn exclusion_rate(&self) -> f64 {
        let total = self.points.len() + self.excluded;
        if total == 0 {
            0.0
        } else {
            self.excluded as f64 / total as f64
        }
    }
}

/// Adds (latent geodesic, true path length) points for `pairs` scored by
/// `table`; pairs disconnected in either graph are counted as excluded.
pub fn score_table(env: &Environment, table: &HeuristicTable, pairs: &[(State, State)], report: &mut LatentReport) {
    for &(a, b) in pairs {
        let latent = table.state_distance(a, b);
        let truth = match (env.location_of(a), env.location_of(b)) {
            (Some(la), Some(lb)) => env.distances_from(la)[lb],
            _ => None,
        };
        match truth {
            Some(d) if latent.is_finite() => report.points.push((latent, d as f64)),
            _ => report.excluded += 1,
        }
    }
}

impl LatentReport {
    pub fn empty() -> Self {
        LatentReport { fit: None, points: Vec::new(), excluded: 0, radii: Vec::new() }
    }

    /// Fits the regression over the collected points.
    pub fn finish(mut self) -> Self {
        let (x, y): (Vec<f64>, Vec<f64>) = self.points.iter().copied().unzip();
        self.fit = stats::linear_fit(&x, &y);
        self
    }
}

/// Regresses true shortest-path length on the state-level latent geodesic
/// over `pairs_per_env` state pairs in each of `envs` rooms.
pub fn latent_distance_correlation<M: WorldModel + ?Sized>(
    model: &M,
    sampler: &Sampler,
    envs: usize,
    pairs_per_env: usize,
    radius: RadiusChoice,
    layer: usize,
) -> Result<LatentReport> {
    let mut report = LatentReport::empty();
    for i in 0..envs as u64 {
        let (env, bank) = sampler.room(i)?;
        let mut rng = sampler.rng("analysis-latent", i);
        let states = bank.unique_states();
        if states.len() < 2 {
            continue;
        }
        let mut all_pairs: Vec<(State, State)> = states
            .iter()
            .flat_map(|&a| states.iter().map(move |&b| (a, b)))
            .filter(|(a, b)| a < b)
            .collect();
        all_pairs.shuffle(&mut rng);
        let pairs = &all_pairs[..pairs_per_env.min(all_pairs.len())];
        let (table_states, acts) = collect_activations(model, &bank, layer)?;
        let r = match radius {
            RadiusChoice::Fixed(r) => r,
            RadiusChoice::Auto(count) => {
                let tables: Vec<_> = r_latent_candidates(&acts, count)
                    .into_iter()
                    .map(|r| table_from_activations(&table_states, &acts, r))
                    .collect();
                let eval: Vec<(State, State)> = all_pairs.iter().take(20).copied().collect();
                select_among_tables(model, &bank, &tables, &eval, 20)?.0
            }
        };
        report.radii.push(r);
        let table = table_from_activations(&table_states, &acts, r);
        score_table(&env, &table, pairs, &mut report);
    }
    Ok(report.finish())
}

/// Features fed to the distance probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeFeatures {
    /// Concatenated action-query activations at A, B and C.
    Activations,
    /// Quadratic expansion of the true cell-centre coordinates (ceiling).
    GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub runs: usize,
    pub layer: usize,
    pub shuffle_labels: bool,
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { n_train: 3000, n_test: 1000, runs: 10, layer: 0, shuffle_labels: false, epochs: 400, lr: 0.01, l2: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

struct Triplet {
    features: Vec<f64>,
    label: bool,
}

/// Any bank neighbour of `s`, so an action query at `s` has a real answer.
fn action_query_at(bank: &MemoryBank, s: State) -> Option<MaskedQuery> {
    bank.transitions.iter().find_map(|t| {
        if t.is_self_loop() {
            None
        } else if t.source == s {
            Some(MaskedQuery::action(s, t.end))
        } else if t.end == s {
            Some(MaskedQuery::action(s, t.source))
        } else {
            None
        }
    })
}

fn quadratic(coords: &[f64]) -> Vec<f64> {
    let mut out = coords.to_vec();
    for i in 0..coords.len() {
        for j in i..coords.len() {
            out.push(coords[i] * coords[j]);
        }
    }
    out
}

fn probe_triplets<M: WorldModel + ?Sized>(model: &M, sampler: &Sampler, n: usize, offset: u64, cfg: &ProbeConfig, features: ProbeFeatures) -> Result<Vec<Triplet>> {
    let mut picks = Vec::with_capacity(n);
    let mut i = offset;
    while picks.len() < n {
        let (env, bank) = sampler.room(i)?;
        let mut rng = sampler.rng("analysis-probe", i);
        i += 1;
        let states = bank.unique_states();
        if states.len() < 3 {
            continue;
        }
        for _ in 0..20 {
            let chosen: Vec<State> = states.choose_multiple(&mut rng, 3).copied().collect();
            let pos: Vec<(f64, f64)> = chosen
                .iter()
                .map(|&s| env.graph().coord(env.location_of(s).expect("bank states are placed")).to_pixel())
                .collect();
            let d = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
            let (ab, ac) = (d(pos[0], pos[1]), d(pos[0], pos[2]));
            if (ab - ac).abs() < 1e-9 {
                continue;
            }
            picks.push((bank.clone(), chosen, pos, ab > ac));
            break;
        }
    }
    let feats: Vec<Vec<f64>> = match features {
        ProbeFeatures::GroundTruth => picks.iter().map(|(_, _, pos, _)| quadratic(&pos.iter().flat_map(|p| [p.0, p.1]).collect::<Vec<_>>())).collect(),
        ProbeFeatures::Activations => {
            let mut items = Vec::with_capacity(3 * picks.len());
            for (bank, chosen, _, _) in &picks {
                for &s in chosen {
                    let q = action_query_at(bank, s).ok_or_else(|| Error::Analysis("state without a bank neighbour".into()))?;
                    items.push((bank, q));
                }
            }
            let acts = model
                .activations_many(&items, cfg.layer)
                .ok_or_else(|| Error::Analysis(format!("model exposes no activations at layer {}", cfg.layer)))?;
            acts.chunks(3).map(|c| c.concat()).collect()
        }
    };
    Ok(feats.into_iter().zip(&picks).map(|(features, p)| Triplet { features, label: p.3 }).collect())
}

/// Logistic regression by full-batch Adam on standardised features;
/// returns test accuracy.
fn fit_logistic(train: &[(&[f64], bool)], test: &[(&[f64], bool)], cfg: &ProbeConfig, seed: u64) -> f64 {
    let dim = train[0].0.len();
    let n = train.len() as f64;
    let mut mu = vec![0.0; dim];
    let mut sd = vec![0.0; dim];
    for (x, _) in train {
        for (m, v) in mu.iter_mut().zip(x.iter()) {
            *m += v / n;
        }
    }
    for (x, _) in train {
        for ((s, v), m) in sd.iter_mut().zip(x.iter()).zip(&mu) {
            *s += (v - m).powi(2) / n;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|s| s.sqrt().max(1e-8)).collect();
    let norm = |x: &[f64]| -> Vec<f64> { x.iter().zip(&mu).zip(&sd).map(|((v, m), s)| (v - m) / s).collect() };
    let xtr: Vec<Vec<f64>> = train.iter().map(|(x, _)| norm(x)).collect();
    let ytr: Vec<f64> = train.iter().map(|(_, y)| f64::from(u8::from(*y))).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.01..0.01)).collect();
    let mut b = 0.0;
    let (mut m, mut v) = (vec![0.0; dim + 1], vec![0.0; dim + 1]);
    for step in 1..=cfg.epochs {
        let mut g = vec![0.0; dim + 1];
        for (x, &y) in xtr.iter().zip(&ytr) {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            let err = 1.0 / (1.0 + (-z).exp()) - y;
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi += err * xi / n;
            }
            g[dim] += err / n;
        }
        for (gi, wi) in g.iter_mut().zip(&w) {
            *gi += cfg.l2 * wi;
        }
        let t = step as i32;
        for k in 0..=dim {
            m[k] = 0.9 * m[k] + 0.1 * g[k];
            v[k] = 0.999 * v[k] + 0.001 * g[k] * g[k];
            let upd = cfg.lr * (m[k] / (1.0 - 0.9f64.powi(t))) / ((v[k] / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            if k == dim {
                b -= upd;
            } else {
                w[k] -= upd;
            }
        }
    }
    let correct = test
        .iter()
        .filter(|(x, y)| {
            let z: f64 = norm(x).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            (z > 0.0) == *y
        })
        .count();
    correct as f64 / test.len() as f64
}

/// Linear probe predicting whether A is farther from B than from C, trained
/// on triplets from distinct rooms and scored on held-out rooms.
pub fn distance_probe<M: WorldModel + ?Sized>(model: &M, sampler: &Sampler, cfg: &ProbeConfig, features: ProbeFeatures) -> Result<ProbeReport> {
    if cfg.n_train == 0 || cfg.n_test == 0 || cfg.runs == 0 {
        return Err(Error::Analysis("probe needs training data, test data and at least one run".into()));
    }
    let train = probe_triplets(model, sampler, cfg.n_train, 0, cfg, features)?;
    let test = probe_triplets(model, sampler, cfg.n_test, 1 << 32, cfg, features)?;
    let mut accuracies = Vec::with_capacity(cfg.runs);
    for run in 0..cfg.runs as u64 {
        let mut ytr: Vec<bool> = train.iter().map(|t| t.label).collect();
        let mut yte: Vec<bool> = test.iter().map(|t| t.label).collect();
        if cfg.shuffle_labels {
            let mut rng = sampler.rng("analysis-probe-shuffle", run);
            ytr.shuffle(&mut rng);
            yte.shuffle(&mut rng);
        }
        let tr: Vec<(&[f64], bool)> = train.iter().zip(&ytr).map(|(t, &y)| (t.features.as_slice(), y)).collect();
        let te: Vec<(&[f64], bool)> = test.iter().zip(&yte).map(|(t, &y)| (t.features.as_slice(), y)).collect();
        accuracies.push(fit_logistic(&tr, &te, cfg, derive_seed(sampler.seed, "analysis-probe-init", run)));
    }
    let mean = stats::mean(&accuracies);
    let sd = if accuracies.len() > 1 { stats::variance(&accuracies).sqrt() } else { 0.0 };
    Ok(ProbeReport { accuracies, mean, sd })
}
