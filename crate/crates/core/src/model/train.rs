//! Training loop: fresh environment per sample, AdamW, cosine decay.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Eswm, LossConfig, MaskedQuery, Params, Scalar, Targets};
use crate::episodic::{sample_memory_bank, sample_query, Mask, MemoryBank, Query, QueryMix, Transition};
use crate::error::{Error, Result};
use crate::hexgrid::{generate_environment_split, EnvConfig, Environment, StateSplit};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub log_every: usize,
    pub loss: LossConfig,
    pub env: EnvConfig,
    pub mix: QueryMix,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 20_000,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            log_every: 100,
            loss: LossConfig::default(),
            env: EnvConfig::random_wall(2),
            mix: QueryMix::RANDOM_WALL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("iterations and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be positive", self.lr)));
        }
        self.env.validate()?;
        self.mix.validate()
    }
}

/// Learning rate at `iteration` of `total`, decaying from `base` to zero.
pub fn cosine_lr(base: f64, iteration: usize, total: usize) -> f64 {
    let frac = iteration as f64 / total.max(1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Params<T>,
    v: Params<T>,
    t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &Params<T>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW { beta1, beta2, eps, weight_decay, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let c1 = T::c(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::c(1.0 - self.beta2.powi(self.t as i32));
        let lr_t = T::c(lr);
        let decay = T::c(1.0 - lr * self.weight_decay);
        let eps = T::c(self.eps);
        let one = T::one();
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            ndarray::Zip::from(&mut p.value)
                .and(&g.value)
                .and(&mut m.value)
                .and(&mut v.value)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *p = *p * decay - lr_t * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

/// Masked-head accuracy counts split by mask.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub correct: [usize; 3],
    pub total: [usize; 3],
}

impl BatchStats {
    pub(crate) fn record(&mut self, mask: Mask, correct: bool) {
        self.total[mask.index()] += 1;
        self.correct[mask.index()] += usize::from(correct);
    }

    pub fn merge(&mut self, other: &BatchStats) {
        for i in 0..3 {
            self.correct[i] += other.correct[i];
            self.total[i] += other.total[i];
        }
    }

    pub fn accuracy(&self) -> f64 {
        let t: usize = self.total.iter().sum();
        if t == 0 {
            return 0.0;
        }
        self.correct.iter().sum::<usize>() as f64 / t as f64
    }
}

/// One logged point of the training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    pub masked_accuracy: f64,
    pub grad_norm: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub final_loss: f64,
    pub history: Vec<TrainMetrics>,
}

/// One training example: a fresh environment, its bank and a query.
pub fn training_sample(env_cfg: &EnvConfig, mix: &QueryMix, split: StateSplit, seed: u64) -> Result<(Environment, MemoryBank, Query)> {
    let env = generate_environment_split(env_cfg, split, derive_seed(seed, "env", 0))?;
    let bank = sample_memory_bank(&env, derive_seed(seed, "bank", 0));
    let query = sample_query(&env, &bank, mix, derive_seed(seed, "query", 0))?;
    Ok((env, bank, query))
}

pub fn train<T: Scalar>(model: &mut Eswm<T>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_callback(model, cfg, |_| {})
}

/// Runs the full schedule, calling `on_log` every `log_every` iterations and
/// at the end. Fails on the first non-finite loss.
pub fn train_with_callback<T: Scalar>(
    model: &mut Eswm<T>,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&TrainMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let mut opt = AdamW::new(model.params(), cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let mut history = Vec::new();
    let mut window_loss = 0.0;
    let mut window_n = 0usize;
    let mut window_stats = BatchStats::default();
    let mut last_loss = f64::NAN;
    for it in 0..cfg.iterations {
        let mut banks = Vec::with_capacity(cfg.batch_size);
        let mut queries = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size {
            let seed = derive_seed(cfg.seed, "sample", (it * cfg.batch_size + b) as u64);
            let (_, bank, q) = training_sample(&cfg.env, &cfg.mix, StateSplit::Train, seed)?;
            targets.push(Targets::for_query(&q));
            queries.push(MaskedQuery::from(&q));
            banks.push(bank);
        }
        let samples: Vec<(&[Transition], MaskedQuery)> =
            banks.iter().zip(&queries).map(|(b, &q)| (b.transitions.as_slice(), q)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "dropout", it as u64));
        let (loss, mut grads, stats) = model.loss_and_grad(&samples, &targets, &cfg.loss, Some(&mut rng))?;
        let loss = loss.f64();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it, loss });
        }
        let norm = grads.sum_squares().f64().sqrt();
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            let scale = T::c(cfg.grad_clip / norm);
            for t in grads.tensors_mut() {
                t.value *= scale;
            }
        }
        let lr = cosine_lr(cfg.lr, it, cfg.iterations);
        opt.step(model.params_mut(), &grads, lr);
        last_loss = loss;
        window_loss += loss;
        window_n += 1;
        window_stats.merge(&stats);
        let log_now = cfg.log_every > 0 && (it + 1) % cfg.log_every == 0;
        if log_now || it + 1 == cfg.iterations {
            let m = TrainMetrics {
                iteration: it + 1,
                loss: window_loss / window_n as f64,
                lr,
                masked_accuracy: window_stats.accuracy(),
                grad_norm: norm,
                elapsed_s: start.elapsed().as_secs_f64(),
            };
            on_log(&m);
            history.push(m);
            window_loss = 0.0;
            window_n = 0;
            window_stats = BatchStats::default();
        }
    }
    Ok(TrainOutcome { final_loss: last_loss, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        // with zero decay the bias-corrected first step is lr * sign(g)
        let mut p = Params::<f64>::new();
        let id = p.constant("w", (1, 3), 1.0);
        let mut g = p.zeros_like();
        g[id] = ndarray::arr2(&[[0.5, -2.0, 0.0]]);
        let mut opt = AdamW::new(&p, 0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut p, &g, 0.1);
        let w = &p[id];
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((w[[0, 1]] - 1.1).abs() < 1e-6);
        assert_eq!(w[[0, 2]], 1.0);
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let mut p = Params::<f64>::new();
        let id = p.constant("w", (1, 1), 2.0);
        let g = p.zeros_like();
        let mut opt = AdamW::new(&p, 0.9, 0.999, 1e-8, 0.5);
        opt.step(&mut p, &g, 0.1);
        assert!((p[id][[0, 0]] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }
}
