use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::LmConfig;
use super::model::{BoundLm, FrozenLm, LmParams};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub heldout_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 8,
            lr: 3e-3,
            warmup_ratio: 0.1,
            heldout_fraction: 0.1,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("lm_train.steps must be at least 1".into()));
        }
        if self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("lm_train.batch and lm_train.lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::InvalidConfig("lm_train.heldout_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub step_losses: Vec<f64>,
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
}

/// Mean next-token cross-entropy over `docs` (no gradients).
pub fn heldout_loss<T: Scalar>(cfg: &LmConfig, params: &LmParams<T>, docs: &[Vec<usize>]) -> Result<f64> {
    let mut total = 0.0;
    for doc in docs {
        let tape = Tape::new();
        let lm = BoundLm::new(cfg, params, &tape, false);
        total += lm.lm_loss(doc)?.item().as_f64();
    }
    Ok(total / docs.len() as f64)
}

fn prepare(corpus: &[Vec<usize>], cfg: &LmConfig) -> Vec<Vec<usize>> {
    corpus
        .iter()
        .filter(|d| d.len() >= 2)
        .map(|d| d[..d.len().min(cfg.context_len)].to_vec())
        .collect()
}

/// Trains a randomly initialized model on next-token prediction and returns it frozen.
///
/// The trailing `heldout_fraction` of documents is held out; the run fails unless
/// the held-out loss ends strictly below its value at initialization.
pub fn pretrain_lm<T: Scalar>(
    corpus: &[Vec<usize>],
    config: &LmConfig,
    train: &PretrainConfig,
    seed: u64,
) -> Result<(FrozenLm<T>, PretrainReport)> {
    config.validate()?;
    train.validate()?;
    let docs = prepare(corpus, config);
    if docs.is_empty() {
        return Err(Error::Empty("pretraining corpus".into()));
    }
    let n_held = ((docs.len() as f64 * train.heldout_fraction).ceil() as usize).min(docs.len() - 1);
    let (train_docs, held) = docs.split_at(docs.len() - n_held);
    let held = if held.is_empty() { train_docs } else { held };

    let mut params = LmParams::<T>::init(config, &mut stream(seed, "lm-init"))?;
    let initial_heldout_loss = heldout_loss(config, &params, held)?;

    let sizes: Vec<usize> = params.iter().iter().map(|t| t.numel()).collect();
    let mut opt = Adam::new(&sizes, AdamConfig::default());
    let schedule = LrSchedule::WarmupCosine {
        warmup_ratio: train.warmup_ratio,
    };
    let mut rng = stream(seed, "lm-batches");
    let mut step_losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let (loss, grads) = {
            let tape = Tape::new();
            let lm = BoundLm::new(config, &params, &tape, true);
            let mut parts = Vec::with_capacity(train.batch);
            for _ in 0..train.batch {
                let doc = &train_docs[rng.random_range(0..train_docs.len())];
                parts.push(lm.lm_loss(doc)?);
            }
            let mut loss = parts[0];
            for p in &parts[1..] {
                loss = loss.add(*p)?;
            }
            let loss = loss.scale(T::one() / T::of_usize(train.batch));
            let value = loss.item().as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            tape.backward(loss)?;
            let grads: Vec<Tensor<T>> = lm.vars().iter().map(|v| v.grad().expect("grad")).collect();
            (value, grads)
        };
        step_losses.push(loss);
        let lr = T::of(train.lr * schedule.factor(step, train.steps));
        let lrs = vec![lr; sizes.len()];
        opt.step(&mut params.iter_mut(), &grads, &lrs);
    }

    let final_heldout_loss = heldout_loss(config, &params, held)?;
    if !final_heldout_loss.is_finite() {
        return Err(Error::Diverged {
            step: train.steps,
            loss: final_heldout_loss,
        });
    }
    if final_heldout_loss >= initial_heldout_loss {
        return Err(Error::Training(format!(
            "held-out loss did not improve: {initial_heldout_loss} -> {final_heldout_loss}"
        )));
    }
    let model = FrozenLm::new(config.clone(), params)?;
    Ok((
        model,
        PretrainReport {
            step_losses,
            initial_heldout_loss,
            final_heldout_loss,
        },
    ))
}
