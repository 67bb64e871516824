//! The sequence model: transition embedding, encoder, read-out heads and
//! the masked-component objective.
//!
//! Every memory in the bank becomes one token; the masked query is appended
//! as the last token and is the only token carrying the learned mask vector.
//! The transformer encoder uses no positional information, so its output is
//! invariant to the order of the bank. The LSTM encoder reads the tokens
//! left to right and is read out from its final hidden state.

mod layers;
mod lstm;
mod params;
mod scalar;
mod train;
mod transformer;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episodic::{Mask, MemoryBank, Query, QueryKind, Transition};
use crate::error::{Error, Result};
use crate::hexgrid::{Action, State, StateEncoding, NUM_ACTIONS};

pub use params::{ParamId, Params, Tensor};
pub use scalar::Scalar;
pub use train::{
    cosine_lr, train, train_with_callback, training_sample, AdamW, BatchStats, TrainConfig, TrainMetrics,
    TrainOutcome,
};

use layers::{layer_norm, layer_norm_backward, linear, linear_backward, LayerNormCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Transformer,
    Lstm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: Arch,
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub state_vocab: usize,
    pub idk_enabled: bool,
    pub state_encoding: StateEncoding,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Small transformer for radius-2 Random Wall rooms.
    pub fn desk() -> Self {
        ModelConfig {
            arch: Arch::Transformer,
            layers: 2,
            embed_dim: 128,
            heads: 4,
            ff_dim: 512,
            dropout: 0.0,
            state_vocab: 19,
            idk_enabled: true,
            state_encoding: StateEncoding::Integer,
        }
    }

    /// Full-width Random Wall transformer.
    pub fn random_wall_full(layers: usize) -> Self {
        ModelConfig {
            arch: Arch::Transformer,
            layers,
            embed_dim: 1024,
            heads: 8,
            ff_dim: 2048,
            dropout: 0.1,
            state_vocab: 36,
            idk_enabled: true,
            state_encoding: StateEncoding::Integer,
        }
    }

    /// Full-width Open Arena transformer with six-bit states.
    pub fn open_arena_full(layers: usize) -> Self {
        ModelConfig {
            arch: Arch::Transformer,
            layers,
            embed_dim: 768,
            heads: 8,
            ff_dim: 2048,
            dropout: 0.1,
            state_vocab: 64,
            idk_enabled: false,
            state_encoding: StateEncoding::SixBit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.layers == 0 || self.embed_dim == 0 || self.state_vocab == 0 {
            return bad("layers, embed_dim and state_vocab must be positive".into());
        }
        if self.arch == Arch::Transformer {
            if self.heads == 0 || self.embed_dim % self.heads != 0 {
                return bad(format!(
                    "embed_dim {} is not divisible by {} heads",
                    self.embed_dim, self.heads
                ));
            }
            if self.ff_dim == 0 {
                return bad("ff_dim must be positive".into());
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.state_encoding == StateEncoding::SixBit {
            if self.embed_dim % 6 != 0 {
                return bad(format!("six_bit needs embed_dim divisible by 6, got {}", self.embed_dim));
            }
            if self.idk_enabled {
                return bad("six_bit state heads have no IDK class".into());
            }
            if self.state_vocab > 64 {
                return bad("six_bit encoding holds at most 64 states".into());
            }
        }
        Ok(())
    }

    /// Width of each state head (six independent bits, or one class per state
    /// plus IDK).
    pub fn state_classes(&self) -> usize {
        match self.state_encoding {
            StateEncoding::SixBit => 6,
            StateEncoding::Integer => self.state_vocab + usize::from(self.idk_enabled),
        }
    }

    pub fn action_classes(&self) -> usize {
        NUM_ACTIONS + usize::from(self.idk_enabled)
    }

    /// Layer used by default for end-state activations in latent analyses.
    pub fn default_latent_layer(&self) -> usize {
        self.layers.div_ceil(2).max(1) - 1
    }
}

/// A transition with one component hidden. The hidden component's value in
/// `transition` is ignored by the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskedQuery {
    pub transition: Transition,
    pub mask: Mask,
}

impl MaskedQuery {
    pub fn new(transition: Transition, mask: Mask) -> Self {
        MaskedQuery { transition, mask }
    }

    pub fn end(source: State, action: Action) -> Self {
        MaskedQuery { transition: Transition::new(source, action, State(0)), mask: Mask::End }
    }

    pub fn source(action: Action, end: State) -> Self {
        MaskedQuery { transition: Transition::new(State(0), action, end), mask: Mask::Source }
    }

    pub fn action(source: State, end: State) -> Self {
        MaskedQuery {
            transition: Transition::new(source, Action::ALL[0], end),
            mask: Mask::Action,
        }
    }
}

impl From<&Query> for MaskedQuery {
    fn from(q: &Query) -> Self {
        MaskedQuery { transition: q.transition, mask: q.mask }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Class(usize),
    Idk,
}

/// Training targets for the three heads of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Targets {
    pub source: Label,
    pub action: Label,
    pub end: Label,
}

impl Targets {
    /// Copy targets for visible components; the masked component of an
    /// unsolvable query is IDK.
    pub fn for_query(q: &Query) -> Self {
        let t = &q.transition;
        let mut targets = Targets {
            source: Label::Class(t.source.index()),
            action: Label::Class(t.action.index()),
            end: Label::Class(t.end.index()),
        };
        if q.kind == QueryKind::Unsolvable {
            match q.mask {
                Mask::Source => targets.source = Label::Idk,
                Mask::Action => targets.action = Label::Idk,
                Mask::End => targets.end = Label::Idk,
            }
        }
        targets
    }

    pub fn get(&self, head: Mask) -> Label {
        match head {
            Mask::Source => self.source,
            Mask::Action => self.action,
            Mask::End => self.end,
        }
    }
}

/// Raw head scores for one sample plus the query-token activation after
/// every encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOutput<T> {
    pub source_logits: Array1<T>,
    pub action_logits: Array1<T>,
    pub end_logits: Array1<T>,
    pub activations: Vec<Array1<T>>,
}

impl<T: Scalar> PredictionOutput<T> {
    pub fn logits(&self, head: Mask) -> &Array1<T> {
        match head {
            Mask::Source => &self.source_logits,
            Mask::Action => &self.action_logits,
            Mask::End => &self.end_logits,
        }
    }
}

/// Per-head weights of the objective. `masked_only` restricts the loss to
/// the masked component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: [f64; 3],
    pub masked_only: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { weights: [1.0, 1.0, 1.0], masked_only: false }
    }
}

/// Normalised distribution of the masked head.
#[derive(Debug, Clone, PartialEq)]
pub enum Distribution {
    /// Softmax over classes; `idk` is the index of the IDK class if present.
    Categorical { probs: Vec<f64>, idk: Option<usize> },
    /// Independent per-bit probabilities of a six-bit state.
    Bits([f64; 6]),
}

impl Distribution {
    /// Shannon entropy in nats (sum of bit entropies for six-bit heads).
    pub fn entropy(&self) -> f64 {
        let h = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
        match self {
            Distribution::Categorical { probs, .. } => probs.iter().map(|&p| h(p)).sum(),
            Distribution::Bits(bits) => bits.iter().map(|&p| h(p) + h(1.0 - p)).sum(),
        }
    }

    /// Probability of the most likely outcome.
    pub fn max_prob(&self) -> f64 {
        match self {
            Distribution::Categorical { probs, .. } => probs.iter().copied().fold(0.0, f64::max),
            Distribution::Bits(bits) => bits.iter().map(|&p| p.max(1.0 - p)).product(),
        }
    }

    pub fn argmax(&self) -> usize {
        match self {
            Distribution::Categorical { probs, .. } => argmax(probs),
            Distribution::Bits(bits) => {
                bits.iter().enumerate().map(|(i, &p)| usize::from(p >= 0.5) << i).sum()
            }
        }
    }

    pub fn idk_prob(&self) -> f64 {
        match self {
            Distribution::Categorical { probs, idk: Some(i) } => probs[*i],
            _ => 0.0,
        }
    }

    /// Probability assigned to `label`.
    pub fn prob_of(&self, label: Label) -> f64 {
        match (self, label) {
            (Distribution::Categorical { probs, idk }, Label::Idk) => idk.map_or(0.0, |i| probs[i]),
            (Distribution::Categorical { probs, .. }, Label::Class(c)) => {
                probs.get(c).copied().unwrap_or(0.0)
            }
            (Distribution::Bits(_), Label::Idk) => 0.0,
            (Distribution::Bits(bits), Label::Class(c)) => bits
                .iter()
                .enumerate()
                .map(|(i, &p)| if (c >> i) & 1 == 1 { p } else { 1.0 - p })
                .product(),
        }
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Decision {
    State(State),
    Action(Action),
    Idk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mask: Mask,
    pub distribution: Distribution,
    pub decision: Decision,
}

impl Prediction {
    pub fn is_idk(&self) -> bool {
        self.decision == Decision::Idk
    }

    pub fn state(&self) -> Option<State> {
        match self.decision {
            Decision::State(s) => Some(s),
            _ => None,
        }
    }

    pub fn action(&self) -> Option<Action> {
        match self.decision {
            Decision::Action(a) => Some(a),
            _ => None,
        }
    }

    /// Whether the decision equals `label`.
    pub fn matches(&self, label: Label) -> bool {
        match (self.decision, label) {
            (Decision::Idk, Label::Idk) => true,
            (Decision::State(s), Label::Class(c)) => s.index() == c,
            (Decision::Action(a), Label::Class(c)) => a.index() == c,
            _ => false,
        }
    }
}

/// Anything that can answer masked queries against a memory bank.
pub trait WorldModel {
    fn predict_batch(&self, bank: &MemoryBank, queries: &[MaskedQuery]) -> Vec<Prediction>;

    fn predict(&self, bank: &MemoryBank, query: MaskedQuery) -> Prediction {
        self.predict_batch(bank, &[query]).pop().expect("one prediction per query")
    }

    /// Query-token activations at `layer` for each query, when the model has
    /// an internal representation to expose.
    fn activations(&self, _bank: &MemoryBank, _queries: &[MaskedQuery], _layer: usize) -> Option<Vec<Vec<f64>>> {
        None
    }

    fn num_layers(&self) -> usize {
        0
    }

    /// Predictions for queries against different banks.
    fn predict_many(&self, items: &[(&MemoryBank, MaskedQuery)]) -> Vec<Prediction> {
        items.iter().map(|(bank, q)| self.predict(bank, *q)).collect()
    }

    /// Activations for queries against different banks.
    fn activations_many(&self, items: &[(&MemoryBank, MaskedQuery)], layer: usize) -> Option<Vec<Vec<f64>>> {
        items
            .iter()
            .map(|(bank, q)| self.activations(bank, &[*q], layer).and_then(|mut v| v.pop()))
            .collect()
    }
}

/// Samples per packed forward pass at inference time.
const INFERENCE_CHUNK: usize = 256;

/// Token fed to the encoder.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Token {
    pub(crate) transition: Transition,
    pub(crate) mask: Option<Mask>,
}

/// Variable-length samples packed row-wise into one matrix.
#[derive(Debug, Clone)]
pub(crate) struct Packed {
    pub(crate) tokens: Vec<Token>,
    pub(crate) starts: Vec<usize>,
    pub(crate) lens: Vec<usize>,
}

impl Packed {
    pub(crate) fn new(samples: &[(&[Transition], MaskedQuery)]) -> Self {
        let mut tokens = Vec::new();
        let mut starts = Vec::with_capacity(samples.len());
        let mut lens = Vec::with_capacity(samples.len());
        for (bank, q) in samples {
            starts.push(tokens.len());
            lens.push(bank.len() + 1);
            tokens.extend(bank.iter().map(|&t| Token { transition: t, mask: None }));
            tokens.push(Token { transition: q.transition, mask: Some(q.mask) });
        }
        Packed { tokens, starts, lens }
    }

    pub(crate) fn batch(&self) -> usize {
        self.starts.len()
    }

    pub(crate) fn query_rows(&self) -> Vec<usize> {
        self.starts.iter().zip(&self.lens).map(|(s, l)| s + l - 1).collect()
    }

    pub(crate) fn range(&self, b: usize) -> std::ops::Range<usize> {
        self.starts[b]..self.starts[b] + self.lens[b]
    }
}

#[derive(Debug, Clone)]
enum StateProj {
    Table { w: ParamId, b: ParamId },
    Bits { w: ParamId, b: ParamId },
}

#[derive(Debug, Clone)]
struct EmbedIds {
    source: StateProj,
    action_w: ParamId,
    action_b: ParamId,
    end: StateProj,
    mask: ParamId,
}

#[derive(Debug, Clone)]
struct HeadIds {
    norm: Option<(ParamId, ParamId)>,
    source: (ParamId, ParamId),
    action: (ParamId, ParamId),
    end: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
enum EncoderIds {
    Transformer(Vec<transformer::LayerIds>),
    Lstm(Vec<lstm::LstmIds>),
}

#[derive(Debug, Clone)]
struct Layout {
    embed: EmbedIds,
    encoder: EncoderIds,
    heads: HeadIds,
}

/// Episodic spatial world model over scalar type `T`.
#[derive(Debug, Clone)]
pub struct Eswm<T> {
    config: ModelConfig,
    params: Params<T>,
    layout: Layout,
}

impl<T: Scalar> Eswm<T> {
    /// Freshly initialised model; identical seeds give identical parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let d = config.embed_dim;
        let state_proj = |p: &mut Params<T>, role: &str, rng: &mut ChaCha8Rng| match config.state_encoding {
            StateEncoding::Integer => {
                let bound = 1.0 / (config.state_vocab as f64).sqrt();
                StateProj::Table {
                    w: p.uniform(format!("embed.{role}.weight"), (config.state_vocab, d), bound, rng),
                    b: p.uniform(format!("embed.{role}.bias"), (1, d), bound, rng),
                }
            }
            StateEncoding::SixBit => StateProj::Bits {
                w: p.uniform(format!("embed.{role}.weight"), (1, d / 6), 1.0, rng),
                b: p.uniform(format!("embed.{role}.bias"), (1, d / 6), 1.0, rng),
            },
        };
        let source = state_proj(&mut p, "source", &mut rng);
        let bound_a = 1.0 / (NUM_ACTIONS as f64).sqrt();
        let action_w = p.uniform("embed.action.weight", (NUM_ACTIONS, d), bound_a, &mut rng);
        let action_b = p.uniform("embed.action.bias", (1, d), bound_a, &mut rng);
        let end = state_proj(&mut p, "end", &mut rng);
        let mask = p.normal("embed.mask", (1, d), 0.02, &mut rng);
        let embed = EmbedIds { source, action_w, action_b, end, mask };

        let encoder = match config.arch {
            Arch::Transformer => EncoderIds::Transformer(
                (0..config.layers)
                    .map(|l| transformer::LayerIds::init(&mut p, l, d, config.ff_dim, &mut rng))
                    .collect(),
            ),
            Arch::Lstm => EncoderIds::Lstm(
                (0..config.layers).map(|l| lstm::LstmIds::init(&mut p, l, d, &mut rng)).collect(),
            ),
        };

        let norm = (config.arch == Arch::Transformer).then(|| {
            (p.constant("head.norm.weight", (1, d), 1.0), p.constant("head.norm.bias", (1, d), 0.0))
        });
        let bound_h = 1.0 / (d as f64).sqrt();
        let mut head = |name: &str, classes: usize, rng: &mut ChaCha8Rng| {
            (
                p.uniform(format!("head.{name}.weight"), (d, classes), bound_h, rng),
                p.uniform(format!("head.{name}.bias"), (1, classes), bound_h, rng),
            )
        };
        let heads = HeadIds {
            norm,
            source: head("source", config.state_classes(), &mut rng),
            action: head("action", config.action_classes(), &mut rng),
            end: head("end", config.state_classes(), &mut rng),
        };
        Ok(Eswm { config, params: p, layout: Layout { embed, encoder, heads } })
    }

    /// Rebuilds a model around existing parameters, checking every tensor
    /// name and shape against `config`.
    pub fn from_params(config: ModelConfig, params: Params<T>) -> Result<Self> {
        let mut model = Eswm::new(config, 0)?;
        let expected = model.params.tensors();
        let found = params.tensors();
        let mut problems = Vec::new();
        if expected.len() != found.len() {
            problems.push(format!("expected {} tensors, found {}", expected.len(), found.len()));
        }
        for (e, f) in expected.iter().zip(found) {
            if e.name != f.name || e.value.dim() != f.value.dim() {
                problems.push(format!(
                    "{} {:?} vs {} {:?}",
                    e.name,
                    e.value.dim(),
                    f.name,
                    f.value.dim()
                ));
            }
        }
        if !problems.is_empty() {
            return Err(Error::ShapeMismatch(problems.join("; ")));
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    fn check_token(&self, t: &Transition) -> Result<()> {
        for s in [t.source, t.end] {
            if s.index() >= self.config.state_vocab {
                return Err(Error::OutOfVocabulary {
                    what: "state",
                    value: s.index(),
                    limit: self.config.state_vocab,
                });
            }
        }
        Ok(())
    }

    fn state_vector(&self, proj: &StateProj, s: State) -> Array1<T> {
        let p = &self.params;
        match proj {
            StateProj::Table { w, b } => &p[*w].row(s.index()) + &p[*b].row(0),
            StateProj::Bits { w, b } => {
                let chunk = self.config.embed_dim / 6;
                let mut v = Array1::zeros(self.config.embed_dim);
                for i in 0..6 {
                    let bit = T::c(f64::from(s.bit(i)));
                    let mut out = v.slice_mut(ndarray::s![i * chunk..(i + 1) * chunk]);
                    out.assign(&(&p[*w].row(0) * bit + &p[*b].row(0)));
                }
                v
            }
        }
    }

    /// Token vector for a transition: mean of the three component
    /// projections, with the masked component replaced by the mask vector.
    pub fn embed_transition(&self, t: &Transition, mask: Option<Mask>) -> Result<Array1<T>> {
        self.check_token(t)?;
        Ok(self.embed_token(&Token { transition: *t, mask }))
    }

    fn embed_token(&self, tok: &Token) -> Array1<T> {
        let e = &self.layout.embed;
        let p = &self.params;
        let mask_vec = || p[e.mask].row(0).to_owned();
        let t = &tok.transition;
        let src = if tok.mask == Some(Mask::Source) { mask_vec() } else { self.state_vector(&e.source, t.source) };
        let act = if tok.mask == Some(Mask::Action) {
            mask_vec()
        } else {
            &p[e.action_w].row(t.action.index()) + &p[e.action_b].row(0)
        };
        let end = if tok.mask == Some(Mask::End) { mask_vec() } else { self.state_vector(&e.end, t.end) };
        (src + act + end) / T::c(3.0)
    }

    fn embed_backward(&self, packed: &Packed, dx: &Array2<T>, g: &mut Params<T>) {
        let e = &self.layout.embed;
        let third = T::c(1.0 / 3.0);
        let chunk = self.config.embed_dim / 6;
        let state_back = |g: &mut Params<T>, proj: &StateProj, s: State, d: &Array1<T>| match proj {
            StateProj::Table { w, b } => {
                let mut row = g[*w].row_mut(s.index());
                row += d;
                let mut brow = g[*b].row_mut(0);
                brow += d;
            }
            StateProj::Bits { w, b } => {
                for i in 0..6 {
                    let part = d.slice(ndarray::s![i * chunk..(i + 1) * chunk]);
                    if s.bit(i) == 1 {
                        let mut wrow = g[*w].row_mut(0);
                        wrow += &part;
                    }
                    let mut brow = g[*b].row_mut(0);
                    brow += &part;
                }
            }
        };
        for (tok, row) in packed.tokens.iter().zip(dx.rows()) {
            let d = row.to_owned() * third;
            let t = &tok.transition;
            if tok.mask == Some(Mask::Source) {
                let mut m = g[e.mask].row_mut(0);
                m += &d;
            } else {
                state_back(g, &e.source, t.source, &d);
            }
            if tok.mask == Some(Mask::Action) {
                let mut m = g[e.mask].row_mut(0);
                m += &d;
            } else {
                let mut row = g[e.action_w].row_mut(t.action.index());
                row += &d;
                let mut brow = g[e.action_b].row_mut(0);
                brow += &d;
            }
            if tok.mask == Some(Mask::End) {
                let mut m = g[e.mask].row_mut(0);
                m += &d;
            } else {
                state_back(g, &e.end, t.end, &d);
            }
        }
    }

    fn run<R: Rng + ?Sized>(&self, packed: &Packed, mut rng: Option<&mut R>) -> (Vec<PredictionOutput<T>>, RunCache<T>) {
        let d = self.config.embed_dim;
        let mut x = Array2::zeros((packed.tokens.len(), d));
        for (mut row, tok) in x.rows_mut().into_iter().zip(&packed.tokens) {
            row.assign(&self.embed_token(tok));
        }
        let batch = packed.batch();
        let mut acts: Vec<Vec<Array1<T>>> = vec![Vec::with_capacity(self.config.layers); batch];
        let (z_raw, encoder_cache) = match &self.layout.encoder {
            EncoderIds::Transformer(ids) => {
                let query_rows = packed.query_rows();
                let mut caches = Vec::with_capacity(ids.len());
                for (l, lid) in ids.iter().enumerate() {
                    let last = l + 1 == ids.len();
                    let (out, cache) = transformer::forward(
                        &self.params,
                        lid,
                        &x,
                        packed,
                        last,
                        self.config.heads,
                        self.config.dropout,
                        rng.as_deref_mut(),
                    );
                    for (b, a) in acts.iter_mut().enumerate() {
                        let row = if last { b } else { query_rows[b] };
                        a.push(out.row(row).to_owned());
                    }
                    caches.push(cache);
                    x = out;
                }
                (x, EncoderCache::Transformer(caches))
            }
            EncoderIds::Lstm(ids) => {
                let mut caches = Vec::with_capacity(ids.len());
                for lid in ids {
                    let (out, cache) = lstm::forward(&self.params, lid, &x, packed);
                    for (b, a) in acts.iter_mut().enumerate() {
                        a.push(out.row(packed.query_rows()[b]).to_owned());
                    }
                    caches.push(cache);
                    x = out;
                }
                let z = layers::rows(&x, &packed.query_rows());
                (z, EncoderCache::Lstm(caches))
            }
        };
        let h = &self.layout.heads;
        let (z, norm_cache) = match h.norm {
            Some((g, b)) => {
                let (z, c) = layer_norm(&z_raw.view(), &self.params[g], &self.params[b]);
                (z, Some(c))
            }
            None => (z_raw, None),
        };
        let p = &self.params;
        let ls = linear(&z.view(), &p[h.source.0], &p[h.source.1]);
        let la = linear(&z.view(), &p[h.action.0], &p[h.action.1]);
        let le = linear(&z.view(), &p[h.end.0], &p[h.end.1]);
        let outputs = acts
            .into_iter()
            .enumerate()
            .map(|(b, activations)| PredictionOutput {
                source_logits: ls.row(b).to_owned(),
                action_logits: la.row(b).to_owned(),
                end_logits: le.row(b).to_owned(),
                activations,
            })
            .collect();
        (outputs, RunCache { encoder: encoder_cache, norm: norm_cache, z })
    }

    fn check_samples(&self, samples: &[(&[Transition], MaskedQuery)]) -> Result<()> {
        for (bank, q) in samples {
            for t in bank.iter() {
                self.check_token(t)?;
            }
            let mut t = q.transition;
            match q.mask {
                Mask::Source => t.source = t.end,
                Mask::End => t.end = t.source,
                Mask::Action => {}
            }
            self.check_token(&t)?;
        }
        Ok(())
    }

    /// Inference forward pass (no dropout) over a batch of samples.
    pub fn forward_batch(&self, samples: &[(&[Transition], MaskedQuery)]) -> Result<Vec<PredictionOutput<T>>> {
        self.check_samples(samples)?;
        let packed = Packed::new(samples);
        Ok(self.run::<ChaCha8Rng>(&packed, None).0)
    }

    pub fn forward(&self, bank: &MemoryBank, query: MaskedQuery) -> Result<PredictionOutput<T>> {
        Ok(self.forward_batch(&[(&bank.transitions, query)])?.pop().expect("one sample"))
    }

    /// Mean loss over the batch and its gradient with respect to every
    /// parameter. Dropout is active only when `rng` is given.
    pub fn loss_and_grad<R: Rng + ?Sized>(
        &self,
        samples: &[(&[Transition], MaskedQuery)],
        targets: &[Targets],
        loss_cfg: &LossConfig,
        rng: Option<&mut R>,
    ) -> Result<(T, Params<T>, BatchStats)> {
        self.check_samples(samples)?;
        let packed = Packed::new(samples);
        let (outputs, cache) = self.run(&packed, rng);
        let batch = samples.len();
        let mut total = T::zero();
        let mut stats = BatchStats::default();
        let mut dlogits = [
            Array2::zeros((batch, self.config.state_classes())),
            Array2::zeros((batch, self.config.action_classes())),
            Array2::zeros((batch, self.config.state_classes())),
        ];
        let inv_b = T::c(1.0 / batch as f64);
        for (b, ((out, tg), (_, q))) in outputs.iter().zip(targets).zip(samples).enumerate() {
            for head in Mask::ALL {
                let w = if loss_cfg.masked_only && head != q.mask { 0.0 } else { loss_cfg.weights[head.index()] };
                let (l, grad) = self.head_loss(head, out.logits(head), tg.get(head))?;
                total += l * T::c(w);
                let mut row = dlogits[head.index()].row_mut(b);
                row.assign(&(grad * (T::c(w) * inv_b)));
            }
            let dist = self.distribution(q.mask, out.logits(q.mask));
            stats.record(q.mask, self.decide(q.mask, &dist) == label_decision(q.mask, tg.get(q.mask), &self.config));
        }
        let loss = total * inv_b;
        let grads = self.backward(&packed, &cache, &dlogits);
        Ok((loss, grads, stats))
    }

    /// Loss only, for finite-difference checks.
    pub fn loss(&self, samples: &[(&[Transition], MaskedQuery)], targets: &[Targets], loss_cfg: &LossConfig) -> Result<T> {
        let outputs = self.forward_batch(samples)?;
        let mut total = T::zero();
        for ((out, tg), (_, q)) in outputs.iter().zip(targets).zip(samples) {
            total += self.sample_loss(out, tg, q.mask, loss_cfg)?;
        }
        Ok(total / T::c(samples.len() as f64))
    }

    /// Weighted sum of the three head terms for one sample.
    pub fn sample_loss(&self, out: &PredictionOutput<T>, tg: &Targets, mask: Mask, loss_cfg: &LossConfig) -> Result<T> {
        let mut total = T::zero();
        for head in Mask::ALL {
            let w = if loss_cfg.masked_only && head != mask { 0.0 } else { loss_cfg.weights[head.index()] };
            total += self.head_loss(head, out.logits(head), tg.get(head))?.0 * T::c(w);
        }
        Ok(total)
    }

    fn class_index(&self, head: Mask, label: Label) -> Result<usize> {
        let classes = match head {
            Mask::Action => self.config.action_classes(),
            _ => self.config.state_classes(),
        };
        match label {
            Label::Class(c) if c < classes - usize::from(self.config.idk_enabled) => Ok(c),
            Label::Idk if self.config.idk_enabled => Ok(classes - 1),
            Label::Class(c) => Err(Error::OutOfVocabulary { what: "target class", value: c, limit: classes }),
            Label::Idk => Err(Error::InvalidConfig("IDK target on a model without an IDK class".into())),
        }
    }

    /// Cross-entropy of one head (mean of six binary cross-entropies for
    /// six-bit state heads) and its gradient with respect to the logits.
    pub fn head_loss(&self, head: Mask, logits: &Array1<T>, label: Label) -> Result<(T, Array1<T>)> {
        let bits = self.config.state_encoding == StateEncoding::SixBit && head != Mask::Action;
        if bits {
            let Label::Class(c) = label else {
                return Err(Error::InvalidConfig("IDK target on a six-bit head".into()));
            };
            let mut loss = T::zero();
            let mut grad = Array1::zeros(6);
            let sixth = T::c(1.0 / 6.0);
            for i in 0..6 {
                let z = logits[i];
                let y = T::c(((c >> i) & 1) as f64);
                // log(1 + e^z) - y z, computed stably
                let softplus = z.max(T::zero()) + (-(z.abs())).exp().ln_1p();
                loss += (softplus - y * z) * sixth;
                let sig = T::one() / (T::one() + (-z).exp());
                grad[i] = (sig - y) * sixth;
            }
            return Ok((loss, grad));
        }
        let idx = self.class_index(head, label)?;
        let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        let mut grad = logits.mapv(|v| (v - lse).exp());
        grad[idx] -= T::one();
        Ok((lse - logits[idx], grad))
    }

    fn backward(&self, packed: &Packed, cache: &RunCache<T>, dlogits: &[Array2<T>; 3]) -> Params<T> {
        let mut g = self.params.zeros_like();
        let h = &self.layout.heads;
        let zv = cache.z.view();
        let mut dz = Array2::zeros(cache.z.raw_dim());
        for (ids, dl) in [h.source, h.action, h.end].iter().zip(dlogits) {
            let (dw, db) = g.pair_mut(ids.0, ids.1);
            dz += &linear_backward(&zv, &self.params[ids.0], dl, dw, db);
        }
        let dz_raw = match (h.norm, &cache.norm) {
            (Some((gid, bid)), Some(c)) => {
                let (dg, dbt) = g.pair_mut(gid, bid);
                layer_norm_backward(c, &self.params[gid], &dz, dg, dbt)
            }
            _ => dz,
        };
        let dx = match (&self.layout.encoder, &cache.encoder) {
            (EncoderIds::Transformer(ids), EncoderCache::Transformer(caches)) => {
                let mut dout = dz_raw;
                for (lid, c) in ids.iter().zip(caches).rev() {
                    dout = transformer::backward(&self.params, &mut g, lid, c, packed, self.config.heads, &dout);
                }
                dout
            }
            (EncoderIds::Lstm(ids), EncoderCache::Lstm(caches)) => {
                let mut dout = Array2::zeros((packed.tokens.len(), self.config.embed_dim));
                layers::scatter_add_rows(&mut dout, &packed.query_rows(), &dz_raw);
                for (lid, c) in ids.iter().zip(caches).rev() {
                    dout = lstm::backward(&self.params, &mut g, lid, c, packed, &dout);
                }
                dout
            }
            _ => unreachable!("cache matches encoder"),
        };
        self.embed_backward(packed, &dx, &mut g);
        g
    }

    pub fn distribution(&self, head: Mask, logits: &Array1<T>) -> Distribution {
        let bits = self.config.state_encoding == StateEncoding::SixBit && head != Mask::Action;
        if bits {
            let mut out = [0.0; 6];
            for (o, &z) in out.iter_mut().zip(logits.iter()) {
                *o = 1.0 / (1.0 + (-z.f64()).exp());
            }
            return Distribution::Bits(out);
        }
        let max = logits.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|v| (v.f64() - max).exp()).collect();
        let sum: f64 = exp.iter().sum();
        let idk = self.config.idk_enabled.then(|| logits.len() - 1);
        Distribution::Categorical { probs: exp.into_iter().map(|e| e / sum).collect(), idk }
    }

    fn decide(&self, head: Mask, dist: &Distribution) -> Decision {
        let top = dist.argmax();
        if let Distribution::Categorical { idk: Some(i), .. } = dist {
            if top == *i {
                return Decision::Idk;
            }
        }
        match head {
            Mask::Action => Decision::Action(Action::ALL[top]),
            _ => Decision::State(State(top as u32)),
        }
    }

    /// Normalised masked-head distribution with its decision.
    pub fn prediction_from(&self, mask: Mask, out: &PredictionOutput<T>) -> Prediction {
        let distribution = self.distribution(mask, out.logits(mask));
        let decision = self.decide(mask, &distribution);
        Prediction { mask, distribution, decision }
    }

    /// Predictions that keep the model's error type instead of panicking.
    pub fn try_predict_batch(&self, bank: &MemoryBank, queries: &[MaskedQuery]) -> Result<Vec<Prediction>> {
        let samples: Vec<(&[Transition], MaskedQuery)> =
            queries.iter().map(|&q| (bank.transitions.as_slice(), q)).collect();
        Ok(self
            .forward_batch(&samples)?
            .iter()
            .zip(queries)
            .map(|(out, q)| self.prediction_from(q.mask, out))
            .collect())
    }
}

fn label_decision(head: Mask, label: Label, cfg: &ModelConfig) -> Decision {
    match label {
        Label::Idk => Decision::Idk,
        Label::Class(c) => match head {
            Mask::Action => Decision::Action(Action::ALL[c.min(NUM_ACTIONS - 1)]),
            _ => {
                let _ = cfg;
                Decision::State(State(c as u32))
            }
        },
    }
}

impl<T: Scalar> WorldModel for Eswm<T> {
    fn predict_batch(&self, bank: &MemoryBank, queries: &[MaskedQuery]) -> Vec<Prediction> {
        self.try_predict_batch(bank, queries).expect("queries within the model vocabulary")
    }

    fn activations(&self, bank: &MemoryBank, queries: &[MaskedQuery], layer: usize) -> Option<Vec<Vec<f64>>> {
        let samples: Vec<(&[Transition], MaskedQuery)> =
            queries.iter().map(|&q| (bank.transitions.as_slice(), q)).collect();
        let outs = self.forward_batch(&samples).ok()?;
        outs.into_iter()
            .map(|o| o.activations.get(layer).map(|a| a.iter().map(|v| v.f64()).collect()))
            .collect()
    }

    fn num_layers(&self) -> usize {
        self.config.layers
    }

    fn predict_many(&self, items: &[(&MemoryBank, MaskedQuery)]) -> Vec<Prediction> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(INFERENCE_CHUNK) {
            let samples: Vec<(&[Transition], MaskedQuery)> =
                chunk.iter().map(|(b, q)| (b.transitions.as_slice(), *q)).collect();
            let outs = self.forward_batch(&samples).expect("queries within the model vocabulary");
            out.extend(outs.iter().zip(chunk).map(|(o, (_, q))| self.prediction_from(q.mask, o)));
        }
        out
    }

    fn activations_many(&self, items: &[(&MemoryBank, MaskedQuery)], layer: usize) -> Option<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(INFERENCE_CHUNK) {
            let samples: Vec<(&[Transition], MaskedQuery)> =
                chunk.iter().map(|(b, q)| (b.transitions.as_slice(), *q)).collect();
            for o in self.forward_batch(&samples).ok()? {
                out.push(o.activations.get(layer)?.iter().map(|v| v.f64()).collect());
            }
        }
        Some(out)
    }
}

struct RunCache<T> {
    encoder: EncoderCache<T>,
    norm: Option<LayerNormCache<T>>,
    z: Array2<T>,
}

enum EncoderCache<T> {
    Transformer(Vec<transformer::LayerCache<T>>),
    Lstm(Vec<lstm::LstmCache<T>>),
}
