//! Adam optimizer, gradient clipping and the epoch loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EcoError, Result};
use crate::model::{joint_loss, LossFlags, ModelParams, TurnExample};
use crate::tape::{Tape, Tensor};
use crate::trie::EntityTrie;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 1e-3,
            batch_size: 1,
            clip_norm: 1.0,
            eval_every: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EcoError::InvalidConfig(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        Ok(())
    }
}

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, p) in params.tensors_mut().into_iter().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            for (mj, gj) in m.iter_mut().zip(g) {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
            }
            let v = self.v[i].data_mut();
            for (vj, gj) in v.iter_mut().zip(g) {
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
            }
            let m = self.m[i].data();
            let v = self.v[i].data();
            for ((pj, mj), vj) in p.data_mut().iter_mut().zip(m).zip(v) {
                *pj -= self.lr * (mj / c1) / ((vj / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean of the per-batch losses seen during the epoch.
    pub loss: f64,
    pub entity_loss: f64,
    pub response_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best evaluated epoch, or the last epoch when no
    /// evaluation ran.
    pub params: ModelParams,
    pub best_epoch: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub history: Vec<EpochStats>,
    /// `(epoch, dev score)` for every evaluation.
    pub evaluations: Vec<(usize, f64)>,
}

/// Joint loss of `params` over `examples` without updating anything.
pub fn dataset_loss(
    params: &ModelParams,
    examples: &[TurnExample],
    tries: &[EntityTrie],
    flags: LossFlags,
    batch_size: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(EcoError::EmptyCorpus);
    }
    let mut total = 0.0;
    for batch in examples.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let mut b = params.bind(&mut tape);
        let l = joint_loss(
            &mut tape,
            &mut b,
            batch,
            tries,
            flags,
            params.config.max_entity_len,
        )?;
        total += tape.value(l.total).item() * batch.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Trains `params`. `data(epoch)` supplies the training turns of each
/// epoch, numbered from 1, so augmentation can be re-sampled per epoch.
/// Initial and final loss are both measured on the epoch-1 turns.
///
/// Every `eval_every` epochs (and after the last one) `evaluate` is called
/// with the current parameters and returns a dev score; the best-scoring
/// parameters are returned, earliest on ties.
pub fn train<D, F>(
    mut params: ModelParams,
    mut data: D,
    tries: &[EntityTrie],
    flags: LossFlags,
    config: &TrainConfig,
    mut evaluate: F,
) -> Result<TrainOutcome>
where
    D: FnMut(usize) -> Result<Vec<TurnExample>>,
    F: FnMut(usize, &ModelParams) -> Result<f64>,
{
    config.validate()?;
    let max_entity_len = params.config.max_entity_len;
    let reference = data(1)?;
    let initial_loss = dataset_loss(&params, &reference, tries, flags, config.batch_size)?;
    log::info!(
        "initial loss {initial_loss:.4} over {} turns",
        reference.len()
    );

    let mut adam = Adam::new(&params, config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::with_capacity(config.epochs);
    let mut evaluations = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 1..=config.epochs {
        let resampled;
        let examples = if epoch == 1 {
            &reference
        } else {
            resampled = data(epoch)?;
            &resampled
        };
        if examples.is_empty() {
            return Err(EcoError::EmptyCorpus);
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut en_sum, mut re_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<TurnExample> = idx.iter().map(|&i| examples[i].clone()).collect();
            let mut tape = Tape::new();
            let mut b = params.bind(&mut tape);
            let l = joint_loss(&mut tape, &mut b, &batch, tries, flags, max_entity_len)?;
            let value = tape.value(l.total).item();
            if !value.is_finite() {
                return Err(EcoError::NonFiniteLoss { epoch, batch: bi });
            }
            let grads = tape.backward(l.total);
            let mut grads = b.gradients(&grads, &params);
            clip_gradients(&mut grads, config.clip_norm);
            adam.update(&mut params, &grads);
            loss_sum += value;
            en_sum += l.entity_sum / l.turns as f64;
            re_sum += l.response_sum / l.turns as f64;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        let stats = EpochStats {
            epoch,
            loss: loss_sum / n,
            entity_loss: en_sum / n,
            response_loss: re_sum / n,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (entity {:.4}, response {:.4})",
            stats.loss,
            stats.entity_loss,
            stats.response_loss
        );
        history.push(stats);

        if epoch % config.eval_every == 0 || epoch == config.epochs {
            let score = evaluate(epoch, &params)?;
            log::info!("epoch {epoch}: dev score {score:.2}");
            evaluations.push((epoch, score));
            if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                best = Some((score, epoch, params.clone()));
            }
        }
    }

    let final_loss = if config.epochs == 0 {
        initial_loss
    } else {
        dataset_loss(&params, &reference, tries, flags, config.batch_size)?
    };
    let (best_epoch, params) = match best {
        Some((_, epoch, p)) => (epoch, p),
        None => (config.epochs, params),
    };
    Ok(TrainOutcome {
        params,
        best_epoch,
        initial_loss,
        final_loss,
        history,
        evaluations,
    })
}
