//! Adapter training against the frozen model, and the full fine-tuning baseline.

use serde::{Deserialize, Serialize};

use super::data::{split_validation, PreferenceTriplet};
use super::simpo::{evaluate, objective, prepare, sum_vars, Evaluation, Prepared, SimpoConfig, SteeringVars};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::lm::{sequence_avg_logprob, BoundLm, FrozenLm, LmParams};
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::rng::{permutation, stream};
use crate::sae::SparseAutoencoder;
use crate::scalar::Scalar;
use crate::steering::{SteeringAdapter, Variant};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub simpo: f64,
    /// Mean nonzero steering entries per token in the batch.
    pub l0: f64,
    /// Mean ℓ1 of the steering vector per token in the batch.
    pub l1: f64,
}

#[derive(Clone, Debug)]
pub struct AdapterFit<T> {
    pub adapter: SteeringAdapter<T>,
    pub log: Vec<StepMetrics>,
    pub unsteered: Evaluation,
    pub steered: Evaluation,
}

impl<T> AdapterFit<T> {
    pub fn improved(&self) -> bool {
        self.steered.loss < self.unsteered.loss
    }
}

/// Yields the shuffled micro-batches of each epoch, grouped per optimizer step.
fn schedule(n: usize, cfg: &SimpoConfig, seed: u64, name: &str) -> Vec<Vec<Vec<usize>>> {
    let mut steps = Vec::new();
    for epoch in 0..cfg.epochs {
        let order = permutation(&mut stream(seed, &format!("{name}-epoch-{epoch}")), n);
        let micro: Vec<Vec<usize>> = order.chunks(cfg.batch).map(<[usize]>::to_vec).collect();
        for group in micro.chunks(cfg.grad_accum) {
            steps.push(group.to_vec());
        }
    }
    steps
}

fn check_inputs<T: Scalar>(
    model: &FrozenLm<T>,
    sae: &SparseAutoencoder<T>,
    adapter: &SteeringAdapter<T>,
    train: &[PreferenceTriplet],
    val: &[PreferenceTriplet],
) -> Result<()> {
    adapter.check_compatible(sae)?;
    if sae.d() != model.config().d_model {
        return Err(Error::Shape {
            op: "sae/model",
            lhs: vec![model.config().d_model],
            rhs: vec![sae.d()],
        });
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("training and validation sets must be non-empty".into()));
    }
    Ok(())
}

/// Trains `adapter` and reports validation loss with and without it, whether or
/// not steering helped.
pub fn fit_adapter<T: Scalar>(
    model: &FrozenLm<T>,
    sae: &SparseAutoencoder<T>,
    mut adapter: SteeringAdapter<T>,
    train: &[PreferenceTriplet],
    val: &[PreferenceTriplet],
    cfg: &SimpoConfig,
    seed: u64,
) -> Result<AdapterFit<T>> {
    cfg.validate()?;
    check_inputs(model, sae, &adapter, train, val)?;
    let train_p = prepare(model, train)?;
    let val_p = prepare(model, val)?;
    let unsteered = evaluate(model, None, &val_p, cfg, None)?;

    let plan = schedule(train_p.len(), cfg, seed, "adapter");
    let total = plan.len();
    let sizes: Vec<usize> = adapter.tensors().iter().map(|t| t.numel()).collect();
    let mut opt = Adam::new(&sizes, AdamConfig::default());
    let sched = LrSchedule::WarmupCosine {
        warmup_ratio: cfg.warmup_ratio,
    };
    let theta_mult = if adapter.variant == Variant::JumpRelu {
        cfg.theta_lr_mult
    } else {
        1.0
    };
    let mut log = Vec::with_capacity(total);
    for (step, group) in plan.iter().enumerate() {
        let mut grads: Vec<Tensor<T>> = adapter.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut m = StepMetrics {
            step,
            loss: 0.0,
            simpo: 0.0,
            l0: 0.0,
            l1: 0.0,
        };
        let mut tokens = 0usize;
        for micro in group {
            let tape = Tape::new();
            let lm = model.bind(&tape);
            let sv = SteeringVars {
                sae: sae.bind(&tape, false)?,
                adapter: adapter.bind(&tape, true)?,
                mode: cfg.steering_mode,
            };
            let items: Vec<&Prepared<T>> = micro.iter().map(|&i| &train_p[i]).collect();
            let obj = objective(&lm, Some(&sv), &items, cfg, None).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged { step, loss: f64::NAN },
                e => e,
            })?;
            let scale = T::one() / T::of_usize(group.len());
            tape.backward(obj.total.scale(scale))?;
            for (g, v) in grads.iter_mut().zip(sv.adapter.vars()) {
                let gv = v.grad().expect("adapter gradient");
                for (a, b) in g.data_mut().iter_mut().zip(gv.data()) {
                    *a += *b;
                }
            }
            m.loss += obj.total.item().as_f64() / group.len() as f64;
            m.simpo += obj.simpo.item().as_f64() / group.len() as f64;
            m.l0 += obj.l0_sum as f64;
            m.l1 += obj.l1_sum;
            tokens += obj.tokens;
        }
        m.l0 /= tokens.max(1) as f64;
        m.l1 /= tokens.max(1) as f64;
        if !m.loss.is_finite() {
            return Err(Error::Diverged { step, loss: m.loss });
        }
        log.push(m);
        let lr = cfg.lr * sched.factor(step, total);
        let lrs = [T::of(lr), T::of(lr), T::of(lr * theta_mult)];
        opt.step(&mut adapter.tensors_mut(), &grads, &lrs);
        adapter.clamp_theta();
    }

    let steered = evaluate(model, Some((sae, &adapter)), &val_p, cfg, None)?;
    Ok(AdapterFit {
        adapter,
        log,
        unsteered,
        steered,
    })
}

/// [`fit_adapter`] with its postconditions enforced: validation loss strictly below
/// the unsteered model's, and the model and SAE bit-identical afterwards.
pub fn train_adapter<T: Scalar>(
    model: &FrozenLm<T>,
    sae: &SparseAutoencoder<T>,
    adapter: SteeringAdapter<T>,
    train: &[PreferenceTriplet],
    val: &[PreferenceTriplet],
    cfg: &SimpoConfig,
    seed: u64,
) -> Result<AdapterFit<T>> {
    let before = (model.fingerprint(), sae.fingerprint());
    let fit = fit_adapter(model, sae, adapter, train, val, cfg, seed)?;
    if (model.fingerprint(), sae.fingerprint()) != before {
        return Err(Error::FrozenMutation("adapter training".into()));
    }
    if !fit.improved() {
        return Err(Error::Training(format!(
            "steered validation loss {} is not below unsteered {}",
            fit.steered.loss, fit.unsteered.loss
        )));
    }
    Ok(fit)
}

/// Splits `data` by `cfg.validation_fraction`, then trains.
pub fn train_adapter_on<T: Scalar>(
    model: &FrozenLm<T>,
    sae: &SparseAutoencoder<T>,
    adapter: SteeringAdapter<T>,
    data: &[PreferenceTriplet],
    cfg: &SimpoConfig,
    seed: u64,
) -> Result<AdapterFit<T>> {
    let (train, val) = split_validation(data, cfg.validation_fraction)?;
    train_adapter(model, sae, adapter, train, val, cfg, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Learning rate as a fraction of the adapter learning rate.
    pub lr_ratio: f64,
    pub epochs: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            lr_ratio: 0.04,
            epochs: 2,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_ratio > 0.0) {
            return Err(Error::InvalidConfig("baseline.lr_ratio must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("baseline.epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BaselineFit<T> {
    pub model: FrozenLm<T>,
    pub log: Vec<StepMetrics>,
    pub initial: Evaluation,
    pub final_eval: Evaluation,
}

/// Fine-tunes every parameter of a thawed copy of `model` on the SimPO loss.
pub fn train_full_baseline<T: Scalar>(
    model: &FrozenLm<T>,
    train: &[PreferenceTriplet],
    val: &[PreferenceTriplet],
    cfg: &SimpoConfig,
    bcfg: &BaselineConfig,
    seed: u64,
) -> Result<BaselineFit<T>> {
    cfg.validate()?;
    bcfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("training and validation sets must be non-empty".into()));
    }
    let before = model.fingerprint();
    let seqs: Vec<_> = train
        .iter()
        .map(|t| Ok((t.chosen_sequence()?, t.rejected_sequence()?)))
        .collect::<Result<_>>()?;
    let initial = evaluate(model, None, &prepare(model, val)?, cfg, None)?;

    let run_cfg = SimpoConfig {
        epochs: bcfg.epochs,
        ..cfg.clone()
    };
    let plan = schedule(seqs.len(), &run_cfg, seed, "baseline");
    let total = plan.len();
    let config = model.config().clone();
    let mut params: LmParams<T> = model.thaw();
    let sizes: Vec<usize> = params.iter().iter().map(|t| t.numel()).collect();
    let mut opt = Adam::new(&sizes, AdamConfig::default());
    let sched = LrSchedule::WarmupCosine {
        warmup_ratio: cfg.warmup_ratio,
    };
    let (beta, gamma) = (T::of(cfg.beta), T::of(cfg.gamma()));
    let mut log = Vec::with_capacity(total);
    for (step, group) in plan.iter().enumerate() {
        let mut grads: Vec<Tensor<T>> = params.iter().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut loss = 0.0;
        for micro in group {
            let tape = Tape::new();
            let lm = BoundLm::new(&config, &params, &tape, true);
            let mut parts = Vec::with_capacity(micro.len());
            for &i in micro {
                let (w, l) = &seqs[i];
                let lw = sequence_avg_logprob(lm.forward_with_hook(&w.tokens, None)?.logits, w)?;
                let ll = sequence_avg_logprob(lm.forward_with_hook(&l.tokens, None)?.logits, l)?;
                let margin = lw.sub(ll)?.scale(beta).shift(-gamma);
                parts.push(super::simpo::neg_log_sigmoid(margin)?);
            }
            let obj = sum_vars(&parts)?.scale(T::one() / T::of_usize(micro.len()));
            let value = obj.item().as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            tape.backward(obj.scale(T::one() / T::of_usize(group.len())))?;
            for (g, v) in grads.iter_mut().zip(lm.vars()) {
                let gv = v.grad().expect("model gradient");
                for (a, b) in g.data_mut().iter_mut().zip(gv.data()) {
                    *a += *b;
                }
            }
            loss += value / group.len() as f64;
        }
        log.push(StepMetrics {
            step,
            loss,
            simpo: loss,
            l0: 0.0,
            l1: 0.0,
        });
        let lr = T::of(cfg.lr * bcfg.lr_ratio * sched.factor(step, total));
        opt.step(&mut params.iter_mut(), &grads, &vec![lr; sizes.len()]);
    }

    if model.fingerprint() != before {
        return Err(Error::FrozenMutation("baseline fine-tuning".into()));
    }
    let tuned = FrozenLm::new(config, params)?;
    let final_eval = evaluate(&tuned, None, &prepare(&tuned, val)?, cfg, None)?;
    if !(final_eval.loss < initial.loss) {
        return Err(Error::Training(format!(
            "baseline validation loss {} is not below initial {}",
            final_eval.loss, initial.loss
        )));
    }
    Ok(BaselineFit {
        model: tuned,
        log,
        initial,
        final_eval,
    })
}
